import math
import warnings

import numpy as np
import pytest

from attention_qft.embedding import EmbeddingSpec, SpectralProfile
from attention_qft.ensembles import (
    ConfigError,
    EnsembleConfig,
    ReadoutLaw,
    draw_score_matrices,
    sample_head_params,
    sample_readout,
    verify_moments,
)
from attention_qft.rng import RngStream


def _se_ok(x, expected, n_se=5.0):
    x = np.asarray(x, dtype=float).ravel()
    return abs(x.mean() - expected) <= n_se * x.std(ddof=1) / math.sqrt(x.size)


def test_wq_mean_and_variance():
    cfg = EnsembleConfig(d=4, d_k=1)
    W = sample_head_params(cfg, RngStream(1), 100_000).WQ[..., 0, 0, 0]
    assert _se_ok(W, 0.0)
    assert _se_ok(W**2, 0.25)


def test_head_params_deterministic():
    cfg = EnsembleConfig(d=3, d_k=5, N_h=2)
    a = sample_head_params(cfg, RngStream(7, 3), 4)
    b = sample_head_params(cfg, RngStream(7, 3), 4)
    for x, y in zip((a.WQ, a.WK, a.WV), (b.WQ, b.WK, b.WV)):
        assert np.array_equal(x, y)
    assert a.WQ.shape == (4, 2, 3, 5)


def test_blocks_are_independent():
    cfg = EnsembleConfig(d=2, d_k=2)
    h = sample_head_params(cfg, RngStream(2), 100_000)
    q, k, v = h.WQ[:, 0, 0, 0], h.WK[:, 0, 0, 0], h.WV[:, 0, 1, 1]
    for a, b in ((q, k), (q, v), (h.WQ[:, 0, 0, 0], h.WQ[:, 0, 1, 0])):
        assert _se_ok(a * b, 0.0)


def test_doubling_d_halves_weight_variance():
    v2 = sample_head_params(EnsembleConfig(d=2, d_k=1), RngStream(1), 100_000).WV.ravel()
    v4 = sample_head_params(EnsembleConfig(d=4, d_k=1), RngStream(1), 100_000).WV.ravel()
    assert _se_ok(v2**2, 0.5)
    assert _se_ok(v4**2, 0.25)


@pytest.mark.parametrize("N_h, expected", [(1, 0.125), (4, 1 / 32)])
def test_readout_second_moment(N_h, expected):
    cfg = EnsembleConfig(d_k=8, N_h=N_h)
    z = sample_readout(cfg, RngStream(4), 1_000_000 // (8 * N_h)).z
    assert _se_ok(z**2, expected)
    assert _se_ok(z**3, 0.0)


def test_gaussian_law_rejects_other_fourth_moment():
    with pytest.raises(ConfigError):
        EnsembleConfig(gamma_z4=2.0)


def test_mixture_law_realises_requested_moments():
    cfg = EnsembleConfig(d_k=4, readout_law=ReadoutLaw.MIXTURE, sigma_z=1.0, gamma_z4=5.0)
    z = sample_readout(cfg, RngStream(0), 200_000).z
    assert _se_ok(z**2, 1 / 4)
    assert _se_ok(z**4, 5 / 16)
    assert _se_ok(z, 0.0)


def test_mixture_infeasible_moments_rejected():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(ConfigError):
            EnsembleConfig(readout_law="mixture", gamma_z4=0.5)


def test_low_fourth_moment_warns():
    with pytest.warns(UserWarning):
        with pytest.raises(ConfigError):
            EnsembleConfig(gamma_z4=0.5)


@pytest.mark.parametrize("kw", [
    {"d": 0}, {"d_k": -1}, {"sigma_Q": 0.0}, {"score_power": 0.7}, {"seed": -3},
    {"attention_mode": "fixed_context"}, {"attention_mode": "bogus"},
    {"decoupled_alpha": True},
])
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        EnsembleConfig(**kw)


def test_identity_requires_token_dim_d():
    with pytest.raises(ConfigError):
        EnsembleConfig(d=2, embedding=EmbeddingSpec(token_dim=3))


def test_dict_round_trip_and_strictness():
    cfg = EnsembleConfig(d=1, attention_mode="fixed_context", context_points=[[0.1], [0.2]],
                         embedding=EmbeddingSpec.cosnet(SpectralProfile.cauchy_1d(1.0), token_dim=8))
    assert EnsembleConfig.from_dict(cfg.to_dict()) == cfg
    bad = cfg.to_dict() | {"sigmaQ": 1.0}
    with pytest.raises(ConfigError, match="sigmaQ"):
        EnsembleConfig.from_dict(bad)


def test_verify_moments_default_passes():
    assert verify_moments(EnsembleConfig(), 100_000).all_passed


def test_verify_moments_value_scale():
    rep = verify_moments(EnsembleConfig(d=4, sigma_V=2.0), 100_000)
    c = rep.get("WV", 2)
    assert c.expected == 1.0 and c.passed


def test_verify_moments_cosnet_blocks():
    emb = EmbeddingSpec.cosnet(SpectralProfile.gaussian_iso(1.5), token_dim=3)
    rep = verify_moments(EnsembleConfig(d=2, embedding=emb), 20_000)
    assert rep.all_passed
    assert rep.get("c", 2).passed


def test_verify_moments_tiny_sample():
    with pytest.warns(UserWarning):
        rep = verify_moments(EnsembleConfig(), 10)
    assert all(math.isfinite(c.stderr) for c in rep.checks)


@pytest.mark.parametrize("d_k", [1, 2, 5])
def test_score_matrices_match_explicit_product(d_k):
    # compare low moments of M = WQ WK^T from the Bartlett route with an explicit product
    cfg = EnsembleConfig(d=2, d_k=d_k, attention_mode="insertion_set", decoupled_alpha=True)
    M = draw_score_matrices(cfg, RngStream(1).generator(), 100_000)[:, 0, 0]
    sq = cfg.weight_std("Q") * cfg.weight_std("K")
    A = np.random.default_rng(2).standard_normal((100_000, 2, d_k))
    B = np.random.default_rng(3).standard_normal((100_000, 2, d_k))
    ref = sq * A @ np.swapaxes(B, 1, 2)
    for stat in (lambda m: m[:, 0, 0] ** 2, lambda m: m[:, 0, 1] * m[:, 1, 1], lambda m: m[:, 0, 0] ** 2 * m[:, 1, 1] ** 2,
                 lambda m: m[:, 0, 0] ** 2 * m[:, 0, 1] ** 2):
        a, b = stat(M), stat(ref)
        se = math.hypot(a.std(), b.std()) / math.sqrt(a.size)
        assert abs(a.mean() - b.mean()) <= 5 * se


def test_score_matrices_wide_heads_moments():
    # E[M_00^2] = d_k s^4 for a product of two independent D x d_k Gaussian matrices
    cfg = EnsembleConfig(d=2, d_k=32, attention_mode="insertion_set", decoupled_alpha=True)
    M = draw_score_matrices(cfg, RngStream(1).generator(), 20_000)[:, 0]
    s4 = (cfg.weight_std("Q") * cfg.weight_std("K")) ** 2
    assert _se_ok(M[..., 0, 0] ** 2 / s4, 32.0)
    assert _se_ok(M[..., 0, 1] * M[..., 1, 0] / s4, 0.0)
