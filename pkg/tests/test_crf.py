import numpy as np
import pytest

from tissueproto.postprocess import (CrfContractError, CrfParams, appearance_filter, dense_crf, mean_field,
                                     unary_from_probabilities)
from tissueproto.postprocess.crf import _radius

import oracles

DEFAULT = CrfParams()


def random_problem(rng, h, w, n_labels=5, blocks=True):
    """Blocky colour image with a noisy label distribution, the regime the CRF sees in practice."""
    if blocks:
        img = np.repeat(np.repeat(rng.integers(0, 256, (h // 4 + 1, w // 4 + 1, 3)), 4, 0), 4, 1)[:h, :w]
        img = np.clip(img + rng.normal(0, 8, img.shape), 0, 255).astype(np.float64)
    else:
        img = rng.uniform(0, 255, (h, w, 3))
    prob = rng.dirichlet(np.full(n_labels, 0.6), size=(h, w)).transpose(2, 0, 1)
    return prob, img


def oracle(prob, img, p: CrfParams, windowed=False):
    window = (_radius(p.sigma_alpha, p.truncate), _radius(p.sigma_beta, p.truncate)) if windowed else None
    return oracles.mean_field(prob, img, p.w1, p.sigma_alpha, p.w2, p.sigma_beta, p.sigma_gamma,
                              p.iterations, window=window)


def test_fast_matches_brute_force_on_random_problems():
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(20):
        h, w = (16, 16) if i % 2 == 0 else tuple(rng.integers(6, 17, 2))
        prob, img = random_problem(rng, h, w, blocks=i % 3 != 0)
        q_fast = mean_field(unary_from_probabilities(prob), img, DEFAULT)
        q_ref, _ = oracle(prob, img, DEFAULT)
        worst = max(worst, np.abs(q_fast - q_ref).max())
        assert np.array_equal(q_fast.argmax(0), q_ref.argmax(0)), f"problem {i}"
    assert worst < 1e-3


def test_fast_matches_brute_force_in_soft_regime():
    # weights low enough that Q stays soft on a 16 x 16 grid, so entries are compared away from 0/1
    params = CrfParams(w1=0.03, w2=0.05)
    rng = np.random.default_rng(17)
    changed = 0
    for _ in range(4):
        prob, img = random_problem(rng, 16, 16, blocks=False)
        q_fast = mean_field(unary_from_probabilities(prob), img, params)
        q_ref, _ = oracle(prob, img, params)
        assert np.abs(q_fast - q_ref).max() < 1e-6
        assert np.array_equal(q_fast.argmax(0), q_ref.argmax(0))
        assert (q_fast.max(0) < 0.9).mean() > 0.5
        changed += int((q_fast.argmax(0) != prob.argmax(0)).sum())
    assert changed > 0


@pytest.mark.parametrize("params", [
    CrfParams(w1=3.0, sigma_alpha=1.0, w2=5.0, sigma_beta=1.5, sigma_gamma=20.0),
    CrfParams(w1=10.0, sigma_alpha=2.0, w2=10.0, sigma_beta=1.0, sigma_gamma=40.0, iterations=3),
])
def test_truncated_window_matches_windowed_oracle(params):
    rng = np.random.default_rng(11)
    for _ in range(3):
        prob, img = random_problem(rng, 12, 14)
        q_fast = mean_field(unary_from_probabilities(prob), img, params)
        q_ref, _ = oracle(prob, img, params, windowed=True)
        assert np.abs(q_fast - q_ref).max() < 1e-3
        assert np.array_equal(q_fast.argmax(0), q_ref.argmax(0))
        q_win = mean_field(unary_from_probabilities(prob), img, params, method="exact-windowed")
        assert np.abs(q_win - q_ref).max() < 1e-9


def test_exact_path_matches_oracle():
    rng = np.random.default_rng(3)
    prob, img = random_problem(rng, 9, 7)
    q, hist = mean_field(unary_from_probabilities(prob), img, DEFAULT, method="exact", return_history=True)
    q_ref, hist_ref = oracle(prob, img, DEFAULT)
    assert len(hist) == len(hist_ref) == DEFAULT.iterations
    for a, b in zip(hist, hist_ref):
        assert np.abs(a - b).max() < 1e-9


def test_q_normalised_every_round():
    rng = np.random.default_rng(5)
    prob, img = random_problem(rng, 16, 16)
    for method in ("fast", "exact"):
        _, hist = mean_field(unary_from_probabilities(prob), img, DEFAULT, method=method, return_history=True)
        assert len(hist) == 5
        for q in hist:
            assert np.abs(q.sum(0) - 1).max() < 1e-5
            assert q.min() >= 0


def test_zero_pairwise_weights_give_unary_argmax():
    rng = np.random.default_rng(0)
    prob, img = random_problem(rng, 16, 16)
    params = CrfParams(w1=0.0, w2=0.0)
    assert np.array_equal(dense_crf(prob, img, params), prob.argmax(0))
    assert np.array_equal(dense_crf(prob, img, params, method="exact"), prob.argmax(0))


def test_isolated_contrarian_pixel_flips():
    img = np.full((8, 8, 3), 120.0)
    prob = np.zeros((2, 8, 8))
    prob[0], prob[1] = 0.7, 0.3
    prob[:, 3, 4] = (0.3, 0.7)
    params = CrfParams(w1=30.0, sigma_alpha=3.0, w2=0.0)
    q_ref, _ = oracle(prob, img, params)
    assert q_ref.argmax(0)[3, 4] == 0
    out = dense_crf(prob, img, params)
    assert (out == 0).all()
    assert np.array_equal(dense_crf(prob, img, DEFAULT), np.zeros((8, 8), dtype=int))


def test_argmax_ties_prefer_lowest_label():
    img = np.zeros((4, 4, 3))
    prob = np.full((3, 4, 4), 1 / 3)
    assert (dense_crf(prob, img, CrfParams(w1=0.0, w2=0.0)) == 0).all()


def test_non_normalised_unary_rejected():
    with pytest.raises(CrfContractError):
        mean_field(np.zeros((3, 4, 4)), np.zeros((4, 4, 3)))


def test_shape_and_method_checks():
    u = unary_from_probabilities(np.full((2, 4, 4), 0.5))
    with pytest.raises(ValueError):
        mean_field(u, np.zeros((5, 4, 3)))
    with pytest.raises(ValueError):
        mean_field(u, np.zeros((4, 4, 3)), method="lattice")


def test_param_validation():
    with pytest.raises(ValueError):
        CrfParams(w1=-1)
    with pytest.raises(ValueError):
        CrfParams(sigma_gamma=0)
    with pytest.raises(ValueError):
        CrfParams(iterations=0)


def test_label_pruning_is_lossless():
    rng = np.random.default_rng(2)
    prob, img = random_problem(rng, 16, 16)
    prob[1:3] = 0.0                                    # two labels absent everywhere
    prob /= prob.sum(0, keepdims=True)
    u = unary_from_probabilities(prob)
    pruned = mean_field(u, img, DEFAULT)
    full = mean_field(u, img, DEFAULT, prune=-1.0)
    assert np.abs(pruned - full).max() < 1e-6
    ref, _ = oracle(prob, img, DEFAULT)
    assert np.abs(pruned - ref).max() < 1e-3


def test_general_compatibility_path():
    rng = np.random.default_rng(4)
    prob, img = random_problem(rng, 8, 8, n_labels=3)
    compat = np.array([[0.0, 0.5, 1.0], [0.5, 0.0, 1.0], [1.0, 1.0, 0.0]])
    u = unary_from_probabilities(prob)
    fast = mean_field(u, img, DEFAULT, compat=compat)
    exact = mean_field(u, img, DEFAULT, method="exact", compat=compat)
    assert np.abs(fast - exact).max() < 1e-3


def test_shared_appearance_filter():
    rng = np.random.default_rng(9)
    prob, img = random_problem(rng, 16, 16)
    app = appearance_filter(img, DEFAULT)
    assert np.array_equal(dense_crf(prob, img, DEFAULT, appearance=app), dense_crf(prob, img, DEFAULT))
