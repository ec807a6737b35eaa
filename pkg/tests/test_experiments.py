import numpy as np
import pytest

from attention_qft.embedding import EmbeddingSpec, SpectralProfile
from attention_qft.ensembles import EnsembleConfig
from attention_qft.experiments import (
    InsufficientCells,
    SweepParameter,
    SweepSpec,
    control_separation,
    decoupled_alpha_control,
    default_context,
    fit_power_law,
    invariance_probe,
    random_rotations,
    score_power_sweep,
    sweep_heads,
    sweep_width,
)
from attention_qft.rng import RngStream

PTS = np.array([[0.3, -0.2], [0.5, 0.8], [-0.7, 0.1], [0.2, -0.9]])


def base(**kw):
    return EnsembleConfig(**(dict(d=2, d_k=8, attention_mode="fixed_context", context_points=default_context(2)) | kw))


def test_exact_power_law():
    xs = np.array([1.0, 2.0, 4.0, 8.0, 16.0])
    fit = fit_power_law(xs, 3.0 / xs)
    assert abs(fit.slope + 1.0) < 1e-10 and fit.r_squared == pytest.approx(1.0)


def test_constant_has_zero_slope():
    xs = np.array([1.0, 2.0, 4.0, 8.0])
    ys = np.array([2.0, 2.1, 1.95, 2.02])
    fit = fit_power_law(xs, ys, 0.05 * np.ones(4))
    assert abs(fit.slope) <= 3 * fit.slope_stderr


def test_noisy_power_law_recovered():
    rng = np.random.default_rng(0)
    xs = np.array([8.0, 16.0, 32.0, 64.0, 128.0])
    hits = 0
    for _ in range(100):
        ys = 1.0 / xs * (1 + 0.05 * rng.standard_normal(5))
        fit = fit_power_law(xs, ys, 0.05 * np.abs(ys))
        hits += abs(fit.slope + 1.0) <= 0.15
    assert hits >= 95


def test_fit_gates_insignificant_cells():
    xs = [1.0, 2.0, 4.0, 8.0]
    with pytest.raises(InsufficientCells):
        fit_power_law(xs, [1.0, 0.5, 0.01, 0.001], [0.01, 0.01, 0.01, 0.01])


@pytest.mark.parametrize("grid", [(4, 8), (8, 4, 16), (4, 4, 8)])
def test_sweep_grid_validation(grid):
    with pytest.raises(ValueError):
        SweepSpec(base(), SweepParameter.WIDTH_DK, grid, PTS, 100, 10)


def test_cells_have_independent_streams():
    spec = SweepSpec(base(), "width_dk", (2, 4, 8), PTS, 100, 10)
    assert spec.cell_stream(2) != spec.cell_stream(4)
    assert spec.cell_config(4).d_k == 4


def test_width_sweep_runs():
    spec = SweepSpec(base(), "width_dk", (4, 8, 16), PTS, 20_000, 20)
    res = sweep_width(spec)
    assert [c.value for c in res.cells] == [4, 8, 16]
    assert res.checks["g2_width_independent"]
    assert res.checks["decomposition"] and res.checks["ib_routes"]
    assert len(res.rows()) == 3 and "G4c_mean" in res.rows()[0]


def test_single_token_identity_sweep_has_no_ib():
    spec = SweepSpec(EnsembleConfig(d=2, d_k=4, readout_law="mixture", gamma_z4=1.0), "width_dk", (4, 8, 16),
                     PTS, 20_000, 20)
    res = sweep_width(spec)
    assert res.checks["g4c_null"]
    assert all(c.analysis.ib.I_IB.mean == 0.0 for c in res.cells)


def test_heads_sweep_fits():
    spec = SweepSpec(base(), "heads_nh", (1, 2, 4, 8), PTS, 40_000, 20)
    res = sweep_heads(spec)
    assert res.fit is not None and -1.3 <= res.fit.slope <= -0.7
    assert res.checks["head_additivity"] and res.checks["g2_head_independent"]


def test_decoupled_control_and_separation():
    pts = np.array([[0.5, 0.5]] * 4)
    spec = SweepSpec(base(), "width_dk", (2, 4, 8), pts, 20_000, 20)
    dec = decoupled_alpha_control(spec)
    assert dec.checks["ib_null"] and dec.checks["g2_matches_shared"]
    assert "G2_shared_sigma" in dec.rows()[0]
    shared = sweep_width(spec)
    assert control_separation(shared, dec) == (shared.cells[-1].I_IB.significance >= 3)


def test_decoupled_requires_mixing_mode():
    spec = SweepSpec(EnsembleConfig(d=2), "width_dk", (2, 4, 8), PTS, 100, 10)
    with pytest.raises(ValueError):
        decoupled_alpha_control(spec)


def test_score_power_sweep_structure():
    spec = SweepSpec(base(), "score_power", (4, 16, 64), PTS, 10_000, 10)
    res = score_power_sweep(spec)
    assert set(res.sweeps) == {0.5, 1.0}
    assert "decreasing_at_power_1" in res.checks
    assert res.sweeps[1.0].cells[0].analysis.G2.n_samples == 10_000


def test_rotations_are_orthogonal():
    for R in random_rotations(3, 4, RngStream(0)):
        assert np.allclose(R @ R.T, np.eye(3))
    assert np.array_equal(random_rotations(1, 1, RngStream(0))[0], [[-1.0]])


def test_invariance_probe_isotropic():
    cfg = EnsembleConfig(d=2, d_k=2, embedding=EmbeddingSpec.cosnet(SpectralProfile.gaussian_iso(1.0), 16))
    rots = random_rotations(2, 2, RngStream(1))
    rep = invariance_probe(cfg, [[0.5, -1.0], [3.0, 2.0]], rots, [[[0, 0], [0.8, 0.3]]], 20_000, 50)
    assert rep.translation_ok and rep.rotation_ok and rep.odd_ok and rep.isotropic


def test_invariance_probe_anisotropic_control():
    prof = SpectralProfile.gaussian_diag([2.0, 0.5])
    cfg = EnsembleConfig(d=2, d_k=2, embedding=EmbeddingSpec.cosnet(prof, 16))
    quarter = [[0.0, -1.0], [1.0, 0.0]]
    rep = invariance_probe(cfg, [[1.0, 1.0]], [quarter], [[[0, 0], [1.0, 0.0]]], 10_000, 10)
    assert not rep.rotation_ok and rep.translation_ok


def test_invariance_needs_cosnet():
    with pytest.raises(ValueError):
        invariance_probe(EnsembleConfig(), [], [], [[[0, 0], [1, 1]]])
