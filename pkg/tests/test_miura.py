import numpy as np
import pytest

from mastervein.imaging import FingerMask, VeinImage
from mastervein.miura import (
    MatchScore,
    TemplateBank,
    VeinPattern,
    curvature_scores,
    max_curvature,
    miura_full_match,
    miura_match,
    miura_partial_match,
)


def match_oracle(probe_bits, template_bits, cw, ch):
    """Exhaustive displacement search, straight from the score definition."""
    ph, pw = probe_bits.shape
    crop = probe_bits[ch : ph - ch, cw : pw - cw]
    ps = int(crop.sum())
    if ps == 0:
        return 0.0
    th, tw = template_bits.shape
    kh, kw = crop.shape
    best = 0.0
    for dy in range(th - kh + 1):
        for dx in range(tw - kw + 1):
            win = template_bits[dy : dy + kh, dx : dx + kw]
            ov = int(np.logical_and(crop, win).sum())
            best = max(best, ov / (ps + int(win.sum())))
    return best


def line_image(h, w, row, depth=0.4, width=3.0, bg=0.85):
    yy = np.arange(h, dtype=np.float64)[:, None]
    img = bg - depth * np.exp(-((yy - row) ** 2) / (2 * width ** 2))
    return VeinImage(np.broadcast_to(img, (h, w)).astype(np.float32))


def rect_mask(h, w, top, bottom, left, right):
    bits = np.zeros((h, w), dtype=bool)
    bits[top:bottom, left:right] = True
    return FingerMask(bits)


# ---------------------------------------------------------------------------
# max_curvature


def test_constant_image_yields_empty_pattern():
    img = VeinImage(np.full((60, 80), 0.6, dtype=np.float32))
    mask = rect_mask(60, 80, 5, 55, 5, 75)
    pat = max_curvature(img, mask, sigma=3.0)
    assert not pat.bits.any()


def test_horizontal_line_centerline_localized():
    h, w, row = 120, 200, 60
    img = line_image(h, w, row)
    mask = rect_mask(h, w, 20, 100, 10, 190)
    pat = max_curvature(img, mask, sigma=3.0)
    cols = range(10, 190)
    hit = sum(1 for x in cols if pat.bits[row - 1 : row + 2, x].any())
    assert hit / len(cols) >= 0.90
    # nothing detected far from the line
    assert not pat.bits[:40, :].any() and not pat.bits[80:, :].any()


def test_crossing_veins_recovered():
    h, w = 120, 160
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = 0.85 - 0.35 * np.exp(-((yy - 50) ** 2) / 18.0) - 0.35 * np.exp(
        -((xx - 80) ** 2) / 18.0
    )
    img = VeinImage(np.clip(img, 0, 1).astype(np.float32))
    mask = rect_mask(h, w, 10, 110, 10, 150)
    pat = max_curvature(img, mask, sigma=3.0)

    # horizontal vein: per-column argmax of vertical-profile curvature is the oracle
    from scipy.ndimage import gaussian_filter

    p = gaussian_filter(img.pixels.astype(np.float64), 3.0, mode="nearest")
    hits = 0
    cols = [x for x in range(10, 150) if abs(x - 80) > 8]
    for x in cols:
        prof = p[:, x]
        d1 = 0.5 * (np.roll(prof, -1) - np.roll(prof, 1))
        d2 = np.roll(prof, -1) - 2 * prof + np.roll(prof, 1)
        kappa = (d2 / (1 + d1 ** 2) ** 1.5)[10:110]
        r = 10 + int(np.argmax(kappa))
        assert abs(r - 50) <= 1  # oracle localizes the analytic center
        if pat.bits[r - 1 : r + 2, x].any():
            hits += 1
    assert hits / len(cols) >= 0.90
    # vertical vein recovered as well
    rows = [y for y in range(10, 110) if abs(y - 50) > 8]
    vhits = sum(1 for y in rows if pat.bits[y, 79:82].any())
    assert vhits / len(rows) >= 0.90
    # crossing pixel marked
    assert pat.bits[49:52, 79:82].any()


def test_pattern_only_inside_mask():
    img = line_image(100, 100, 50)
    mask = rect_mask(100, 100, 30, 70, 20, 80)
    pat = max_curvature(img, mask, sigma=3.0)
    assert not pat.bits[~mask.bits].any()


def test_affine_rescale_keeps_peak_locations():
    # symmetric cross-profiles have zero slope at their centers, so the
    # curvature argmax is analytically unchanged by a*I + b with a > 0
    h, w = 120, 160
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    base = 0.8 - 0.3 * np.exp(-((yy - 40) ** 2) / 20.0) - 0.25 * np.exp(
        -((xx - 70) ** 2) / 14.0
    )
    mask = rect_mask(h, w, 8, 112, 8, 152)
    s1 = curvature_scores(VeinImage(base.astype(np.float32)), mask, 3.0)
    s2 = curvature_scores(VeinImage((0.5 * base + 0.2).astype(np.float32)), mask, 3.0)
    np.testing.assert_array_equal(s1 > 0, s2 > 0)


def test_max_curvature_rejects_bad_sigma():
    img = line_image(40, 40, 20)
    mask = rect_mask(40, 40, 5, 35, 5, 35)
    with pytest.raises(ValueError):
        max_curvature(img, mask, sigma=0.0)


def test_runtime_under_one_second_full_frame():
    import time

    rng = np.random.default_rng(0)
    img = VeinImage(np.clip(0.7 + 0.1 * rng.standard_normal((240, 320)), 0, 1).astype(np.float32))
    mask = rect_mask(240, 320, 10, 230, 10, 310)
    t0 = time.perf_counter()
    max_curvature(img, mask, sigma=3.0)
    assert time.perf_counter() - t0 < 1.0


# ---------------------------------------------------------------------------
# miura_match


def random_pattern(rng, h, w, density=0.1):
    return VeinPattern(rng.random((h, w)) < density)


def test_self_match_is_half():
    rng = np.random.default_rng(8)
    pat = random_pattern(rng, 40, 40)
    assert miura_match(pat, pat, 0, 0).value == 0.5


def test_disjoint_patterns_score_zero():
    a = np.zeros((20, 20), dtype=bool)
    b = np.zeros((20, 20), dtype=bool)
    a[5, :] = True
    b[15, :] = True
    # displacement 0 only, so the patterns never overlap
    assert miura_match(VeinPattern(a), VeinPattern(b), 0, 0).value == 0.0


def test_matches_exhaustive_oracle_exactly():
    rng = np.random.default_rng(9)
    for _ in range(10):
        probe = random_pattern(rng, 32, 32, 0.12)
        template = random_pattern(rng, 32, 32, 0.12)
        got = miura_match(probe, template, 4, 4).value
        want = match_oracle(probe.bits, template.bits, 4, 4)
        assert got == want


def test_partial_probe_against_larger_template_oracle():
    rng = np.random.default_rng(10)
    probe = random_pattern(rng, 16, 16, 0.15)
    template = random_pattern(rng, 40, 48, 0.15)
    got = miura_match(probe, template, 2, 2).value
    assert got == match_oracle(probe.bits, template.bits, 2, 2)


def test_empty_probe_warns_and_scores_zero():
    probe = VeinPattern(np.zeros((10, 10), dtype=bool))
    rng = np.random.default_rng(11)
    template = random_pattern(rng, 10, 10)
    s = miura_match(probe, template, 0, 0)
    assert s.value == 0.0 and s.warning is not None


def test_score_range_property():
    rng = np.random.default_rng(12)
    for _ in range(20):
        probe = random_pattern(rng, 24, 24, rng.uniform(0.02, 0.4))
        template = random_pattern(rng, 24, 24, rng.uniform(0.02, 0.4))
        v = miura_match(probe, template, 3, 3).value
        assert 0.0 <= v <= 0.5


def test_shift_equivariance():
    rng = np.random.default_rng(13)
    core = rng.random((20, 20)) < 0.2
    a = np.zeros((32, 32), dtype=bool)
    b = np.zeros((32, 32), dtype=bool)
    a[4:24, 4:24] = core
    b[4:24, 4:24] = rng.random((20, 20)) < 0.2
    base = miura_match(VeinPattern(a), VeinPattern(b), 3, 3).value
    # translate both by the same in-bounds offset
    a2 = np.roll(np.roll(a, 3, axis=0), 2, axis=1)
    b2 = np.roll(np.roll(b, 3, axis=0), 2, axis=1)
    moved = miura_match(VeinPattern(a2), VeinPattern(b2), 3, 3).value
    assert base == moved


def test_subset_overlap_monotone_with_fixed_denominator():
    # A's bits are a subset of B's; with the denominator pinned to B's, the
    # normalized score cannot increase when bits are removed.
    rng = np.random.default_rng(14)
    template = random_pattern(rng, 24, 24, 0.3)
    b_bits = template.bits & (rng.random((24, 24)) < 0.7)
    keep = rng.random((24, 24)) < 0.6
    a_bits = b_bits & keep
    if not a_bits.any():
        a_bits[np.argwhere(b_bits)[0][0], np.argwhere(b_bits)[0][1]] = True
    win = int(template.bits.sum())
    denom = int(b_bits.sum()) + win
    ov_a = int((a_bits & template.bits).sum())
    ov_b = int((b_bits & template.bits).sum())
    score_b = miura_match(VeinPattern(b_bits), template, 0, 0).value
    assert ov_a / denom <= ov_b / denom + 1e-9
    assert score_b == ov_b / denom


def test_dimension_mismatch_rejected():
    small = VeinPattern(np.ones((10, 10), dtype=bool))
    big = VeinPattern(np.ones((20, 20), dtype=bool))
    with pytest.raises(ValueError):
        miura_match(big, small, 0, 0)


def test_score_value_validation():
    with pytest.raises(ValueError):
        MatchScore(0.7)


# ---------------------------------------------------------------------------
# full / partial wrappers and the template bank


def test_full_match_blank_probe_warns():
    img = VeinImage(np.full((60, 80), 0.3, dtype=np.float32))
    mask = rect_mask(60, 80, 5, 55, 5, 75)
    template = max_curvature(line_image(60, 80, 30), mask, 3.0)
    s = miura_full_match(img, template, mask, cw=4, ch=4)
    assert s.value == 0.0 and s.warning is not None


def test_full_match_deterministic():
    rng = np.random.default_rng(7)
    img = VeinImage(np.clip(0.8 - 0.3 * rng.random((60, 80)), 0, 1).astype(np.float32))
    mask = rect_mask(60, 80, 4, 56, 4, 76)
    template = max_curvature(line_image(60, 80, 30), mask, 3.0)
    s1 = miura_full_match(img, template, mask, cw=4, ch=4).value
    s2 = miura_full_match(img, template, mask, cw=4, ch=4).value
    assert s1 == s2


def test_partial_requires_smaller_probe():
    img = line_image(60, 80, 30)
    mask = rect_mask(60, 80, 5, 55, 5, 75)
    template = max_curvature(img, mask, 3.0)
    with pytest.raises(ValueError):
        miura_partial_match(img, template, mask)


def test_template_bank_matches_loop():
    rng = np.random.default_rng(15)
    templates = [random_pattern(rng, 36, 44, 0.1) for _ in range(5)]
    bank = TemplateBank(templates, cw=3, ch=3)
    probe = random_pattern(rng, 36, 44, 0.1)
    got = bank.scores(probe)
    want = np.array([miura_match(probe, t, 3, 3).value for t in templates])
    np.testing.assert_array_equal(got, want)
    # also for a smaller probe (partial mode shapes)
    probe_small = random_pattern(rng, 20, 24, 0.15)
    got2 = bank.scores(probe_small)
    want2 = np.array([miura_match(probe_small, t, 3, 3).value for t in templates])
    np.testing.assert_array_equal(got2, want2)
