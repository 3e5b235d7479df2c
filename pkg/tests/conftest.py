import numpy as np
import pytest


@pytest.fixture(scope="session")
def desk_corpus():
    """The frozen 20-identity desk corpus (seed 3)."""
    from mastervein.generators import build_corpus

    return build_corpus(20, 8, jitter=0.15, seed=3)


@pytest.fixture(scope="session")
def miura_full(desk_corpus):
    from mastervein.evaluation import MiuraSystem

    return MiuraSystem(desk_corpus, mode="full")


@pytest.fixture(scope="session")
def miura_calibration(miura_full):
    from mastervein.evaluation import calibrate_threshold, compute_far, compute_frr, score_matrix

    genuine, impostor = score_matrix(miura_full)
    threshold = calibrate_threshold(genuine, impostor)
    return {
        "genuine": genuine,
        "impostor": impostor,
        "threshold": threshold,
        "far": compute_far(impostor, threshold),
        "frr": compute_frr(genuine, threshold),
    }


@pytest.fixture(scope="session")
def trained_cnn(desk_corpus):
    """The desk CNN matcher, trained for 30 epochs (quality-gate recipe)."""
    from mastervein.neural import train_cnn

    images, labels = [], []
    for k, rec in enumerate(desk_corpus.identities):
        for img in rec.enroll + rec.probe:
            images.append(img)
            labels.append(k)
    model, history = train_cnn(
        images, labels, desk_corpus.n_identities, epochs=30, lr=0.02,
        rng=np.random.default_rng(5),
    )
    return model, history


@pytest.fixture(scope="session")
def cnn_calibration(desk_corpus, trained_cnn):
    from mastervein.evaluation import (
        CnnSystem,
        calibrate_threshold,
        compute_far,
        compute_frr,
        score_matrix,
    )

    model, _ = trained_cnn
    system = CnnSystem(desk_corpus, model)
    genuine, impostor = score_matrix(system)
    threshold = calibrate_threshold(genuine, impostor)
    return {
        "system": system,
        "genuine": genuine,
        "impostor": impostor,
        "threshold": threshold,
        "far": compute_far(impostor, threshold),
        "frr": compute_frr(genuine, threshold),
    }


@pytest.fixture(scope="session")
def lve_regression(miura_full):
    """The frozen master-vein evolution run: seed 11, 40 generations."""
    import time

    from mastervein.attacks import LveConfig, lve_run
    from mastervein.generators import ProceduralGenerator

    cfg = LveConfig(
        generator=ProceduralGenerator(), matcher=miura_full, iterations=40,
        population=18, seed=11,
    )
    start = time.perf_counter()
    result = lve_run(cfg)
    elapsed = time.perf_counter() - start
    return result, elapsed
