from pathlib import Path

import numpy as np
import pytest

from mastervein.generators import (
    PROCEDURAL_LATENT_DIM,
    ProceduralGenerator,
    build_corpus,
    load_corpus,
    neural_generator,
    procedural_vein,
    save_corpus,
)
from mastervein.imaging import load_image, quantize8
from mastervein.miura import TemplateBank, max_curvature

FIXTURES = Path(__file__).parent / "fixtures"


# ---------------------------------------------------------------------------
# procedural generator


def test_zero_latent_matches_golden_fixture():
    img = procedural_vein(np.zeros(PROCEDURAL_LATENT_DIM))
    golden = load_image(FIXTURES / "canonical_vein.pgm")
    np.testing.assert_array_equal(quantize8(img.pixels), golden.pixels)


def test_intensity_straddles_half():
    rng = np.random.default_rng(0)
    for _ in range(5):
        z = rng.uniform(-3, 3, PROCEDURAL_LATENT_DIM)
        img = procedural_vein(z)
        assert img.pixels.min() < 0.5 < img.pixels.max()


def test_width_coordinate_changes_only_one_stroke():
    z1 = np.zeros(PROCEDURAL_LATENT_DIM)
    z2 = np.zeros(PROCEDURAL_LATENT_DIM)
    z2[6 * 1 + 3] = 3.0  # stroke 1 width coordinate
    a = procedural_vein(z1).pixels.astype(np.float64)
    b = procedural_vein(z2).pixels.astype(np.float64)
    diff_rows = np.where(np.abs(a - b).max(axis=1) > 1e-4)[0]
    assert diff_rows.size > 0
    band_row = 0.43 * 240
    assert diff_rows.min() >= band_row - 15 and diff_rows.max() <= band_row + 15


def test_out_of_range_latent_clamped_with_warning():
    z = np.zeros(PROCEDURAL_LATENT_DIM)
    z[0] = 5.0
    with pytest.warns(UserWarning):
        img = procedural_vein(z)
    zc = np.zeros(PROCEDURAL_LATENT_DIM)
    zc[0] = 3.0
    np.testing.assert_array_equal(img.pixels, procedural_vein(zc).pixels)


def test_generator_deterministic():
    gen = ProceduralGenerator()
    z = np.random.default_rng(1).uniform(-2, 2, gen.latent_dim)
    np.testing.assert_array_equal(gen.generate(z).pixels, gen.generate(z).pixels)


def test_generator_continuity():
    gen = ProceduralGenerator()
    rng = np.random.default_rng(2)
    z = rng.uniform(-2, 2, gen.latent_dim)
    delta = np.full(gen.latent_dim, 1e-3)
    a = gen.generate(z).pixels.astype(np.float64)
    b = gen.generate(z + delta).pixels.astype(np.float64)
    assert np.abs(a - b).max() < 0.02  # small latent steps move pixels slightly


# ---------------------------------------------------------------------------
# neural generator adapter


def test_neural_generator_wraps_decoder():
    from tests.test_neural import random_decoder, zero_decoder

    gen = neural_generator(zero_decoder())
    img = gen.generate(np.zeros(gen.latent_dim))
    assert (img.width, img.height) == (320, 240)
    np.testing.assert_allclose(img.pixels, 0.5, atol=1e-6)

    gen2 = neural_generator(random_decoder(seed=3))
    z = np.random.default_rng(4).standard_normal(gen2.latent_dim)
    np.testing.assert_array_equal(gen2.generate(z).pixels, gen2.generate(z).pixels)


# ---------------------------------------------------------------------------
# corpus


def test_zero_jitter_makes_identical_samples():
    corpus = build_corpus(2, 4, jitter=0.0, seed=5)
    rec = corpus.identities[0]
    images = rec.enroll + rec.probe
    for img in images[1:]:
        np.testing.assert_array_equal(img.pixels, images[0].pixels)


def test_corpus_deterministic_from_seed(tmp_path):
    a = build_corpus(3, 4, jitter=0.15, seed=6)
    b = build_corpus(3, 4, jitter=0.15, seed=6)
    for ra, rb in zip(a.identities, b.identities):
        for ia, ib in zip(ra.enroll + ra.probe, rb.enroll + rb.probe):
            np.testing.assert_array_equal(ia.pixels, ib.pixels)
        np.testing.assert_array_equal(ra.mask.bits, rb.mask.bits)
    save_corpus(a, tmp_path / "c1")
    save_corpus(b, tmp_path / "c2")
    for p1 in sorted((tmp_path / "c1").rglob("*")):
        if p1.is_file():
            p2 = tmp_path / "c2" / p1.relative_to(tmp_path / "c1")
            assert p1.read_bytes() == p2.read_bytes()


def test_corpus_roundtrip(tmp_path):
    corpus = build_corpus(3, 4, jitter=0.15, seed=7)
    save_corpus(corpus, tmp_path / "corpus")
    loaded = load_corpus(tmp_path / "corpus")
    assert loaded.n_identities == 3 and loaded.seed == 7
    for ra, rb in zip(corpus.identities, loaded.identities):
        assert ra.identity == rb.identity
        assert len(rb.enroll) == 2 and len(rb.probe) == 2
        for ia, ib in zip(ra.enroll + ra.probe, rb.enroll + rb.probe):
            np.testing.assert_array_equal(ia.pixels, ib.pixels)
        np.testing.assert_array_equal(ra.mask.bits, rb.mask.bits)


def test_corpus_rejects_degenerate_parameters():
    with pytest.raises(ValueError):
        build_corpus(1, 4)
    with pytest.raises(ValueError):
        build_corpus(3, 1)


def test_corpus_identity_separability():
    corpus = build_corpus(6, 4, jitter=0.15, seed=8)
    tids, templates = [], []
    for ident, img, mask in corpus.all_enroll():
        tids.append(ident)
        templates.append(max_curvature(img, mask))
    bank = TemplateBank(templates)
    genuine, impostor = [], []
    for rec in corpus.identities:
        for img in rec.probe:
            scores = bank.scores(max_curvature(img, rec.mask))
            for tid, s in zip(tids, scores):
                (genuine if tid == rec.identity else impostor).append(s)
    assert np.mean(genuine) > np.mean(impostor)
