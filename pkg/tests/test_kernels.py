import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attention_qft.embedding import EmbeddingSpec, SpectralLaw, SpectralProfile
from attention_qft.ensembles import EnsembleConfig
from attention_qft.estimators import estimate_g2_conditional
from attention_qft.kernels import (
    KernelSpec,
    PropagatorTarget,
    QuadratureError,
    angular_average,
    cosnet_kernel_closed_form,
    free_propagator_target,
    kernel_quadrature,
    match_profile_to_propagator,
)


def test_closed_form_examples():
    c = KernelSpec(SpectralProfile.cauchy_1d(1.0, amplitude=math.sqrt(0.5)))
    assert cosnet_kernel_closed_form([1.0], c) == pytest.approx(math.exp(-1) / 2, abs=1e-12)
    g = KernelSpec(SpectralProfile.gaussian_iso(1.0))
    assert cosnet_kernel_closed_form([1.0, 1.0], g) == pytest.approx(math.exp(-1), abs=1e-12)
    s = KernelSpec(SpectralProfile.gaussian_iso(2.0, amplitude=1.5), sigma_z=0.5, sigma_V=2.0)
    assert cosnet_kernel_closed_form([0.0, 0.0], s) == pytest.approx(1.5**2)


def test_no_closed_form_for_truncated_resolvent():
    spec = KernelSpec(SpectralProfile.truncated_resolvent(1.0, 5.0))
    with pytest.raises(ValueError, match="kernel_quadrature"):
        cosnet_kernel_closed_form([0.5, 0.0], spec)


@pytest.mark.parametrize("m, r, expected", [(1, 0, 0.5), (1, 1, math.exp(-1) / 2), (2, 0, 0.25)])
def test_free_propagator_d1(m, r, expected):
    assert free_propagator_target(r, PropagatorTarget(m, 1)) == pytest.approx(expected, abs=1e-15)


def test_free_propagator_d3_and_singularity():
    assert free_propagator_target(2.0, PropagatorTarget(1.0, 3)) == pytest.approx(math.exp(-2) / (8 * math.pi))
    with pytest.raises(ValueError):
        free_propagator_target(0.0, PropagatorTarget(1.0, 3))
    with pytest.raises(ValueError):
        free_propagator_target(-1.0, PropagatorTarget(1.0, 1))


@pytest.mark.parametrize("d", [1, 2, 3])
def test_truncated_propagator_converges_to_continuum(d):
    r = 1.0
    exact = free_propagator_target(r, PropagatorTarget(1.0, d))
    cut = free_propagator_target(r, PropagatorTarget(1.0, d, 300.0))
    assert cut == pytest.approx(exact, rel=5e-3)


def test_matching_examples():
    p1 = match_profile_to_propagator(PropagatorTarget(1.0, 1))
    assert p1.law is SpectralLaw.CAUCHY_1D and p1.amplitude**2 == pytest.approx(0.5)
    assert match_profile_to_propagator(PropagatorTarget(2.0, 1)).amplitude**2 == pytest.approx(0.25)
    with pytest.raises(ValueError):
        match_profile_to_propagator(PropagatorTarget(1.0, 2))


@pytest.mark.parametrize("m", [0.5, 1.0, 2.0])
def test_matching_identity_d1(m):
    spec = KernelSpec(match_profile_to_propagator(PropagatorTarget(m, 1)))
    for r in (0.0, 0.5, 1.0, 2.0, 3.0):
        r = r / m
        assert abs(kernel_quadrature([r], spec) - math.exp(-m * r) / (2 * m)) <= 1e-6


@pytest.mark.parametrize("d", [1, 2, 3])
def test_matching_truncated(d):
    t = PropagatorTarget(1.0, d, 10.0)
    spec = KernelSpec(match_profile_to_propagator(t, sigma_z=0.8, sigma_V=1.3), 0.8, 1.3)
    for r in (0.0, 0.7, 2.0):
        vec = np.zeros(d)
        vec[0] = r
        assert abs(kernel_quadrature(vec, spec) - free_propagator_target(r, t)) <= 1e-6


def test_quadrature_matches_gaussian_closed_form():
    for d in (1, 2, 3):
        spec = KernelSpec(SpectralProfile.gaussian_iso(1.3, amplitude=0.9))
        for r in (0.0, 0.4, 1.5):
            vec = np.full(d, r / math.sqrt(d))
            assert abs(kernel_quadrature(vec, spec) - cosnet_kernel_closed_form(vec, spec)) <= 1e-6


def test_quadrature_diag_profile():
    spec = KernelSpec(SpectralProfile.gaussian_diag([2.0, 0.5]))
    assert abs(kernel_quadrature([0.3, 1.1], spec) - cosnet_kernel_closed_form([0.3, 1.1], spec)) <= 1e-6


def test_zero_separation_gives_mean_square_amplitude():
    spec = KernelSpec(SpectralProfile.truncated_resolvent(1.0, 4.0, amplitude=1.7), sigma_z=2.0)
    assert kernel_quadrature([0.0, 0.0], spec) == pytest.approx(4.0 * 1.7**2, abs=1e-6)


def test_quadrature_failure_reported():
    spec = KernelSpec(SpectralProfile.cauchy_1d(1.0))
    with pytest.raises(QuadratureError) as info:
        kernel_quadrature([1e-3], spec, tol=1e-30)
    assert info.value.requested == 1e-30


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_kernel_symmetry_and_bound(x, y):
    spec = KernelSpec(SpectralProfile.gaussian_iso(0.8))
    k = cosnet_kernel_closed_form([x, y], spec)
    assert k == cosnet_kernel_closed_form([-x, -y], spec)
    assert abs(k) <= cosnet_kernel_closed_form([0, 0], spec)


@settings(max_examples=10, deadline=None)
@given(st.floats(0, 2 * math.pi))
def test_rotation_invariance_d2(theta):
    spec = KernelSpec(SpectralProfile.truncated_resolvent(1.0, 5.0))
    r = np.array([0.9, 0.0])
    R = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    assert abs(kernel_quadrature(r, spec) - kernel_quadrature(R @ r, spec)) <= 1e-6


def test_angular_average_limits():
    for d in (1, 2, 3, 4, 5):
        assert float(angular_average(d, 0.0)) == pytest.approx(1.0)
    assert float(angular_average(4, 2.0)) == pytest.approx(2 * 0.5767248077568734 / 2.0, rel=1e-12)


def test_monte_carlo_reproduces_propagator():
    prof = match_profile_to_propagator(PropagatorTarget(1.0, 1))
    cfg = EnsembleConfig(d=1, d_k=2, embedding=EmbeddingSpec.cosnet(prof, token_dim=64))
    for r in (0.0, 1.0, 2.0):
        est = estimate_g2_conditional([0.0], [r], cfg, 20_000, 20)
        assert est.sigmas_from(math.exp(-r) / 2) < 3
