"""Reference kernels for cos-net fields and free massive propagators.

A cos-net field with profile ``(rho, F0)`` has two-point function
``sigma_z^2 sigma_V^2 F0^2 E_rho[cos(b . r)]``.  The free propagator is
``int d^d p / (2 pi)^d  cos(p . r) / (p^2 + m^2)``, optionally restricted to
``|p| <= cutoff``.  Both reduce to one-dimensional radial integrals through
the angular average ``Omega_d(u)`` of ``cos(p . r)`` over directions.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special, stats

from .embedding import SpectralLaw, SpectralProfile

PROPAGATOR_TOL = 1e-8
KERNEL_TOL = 1e-6


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not reach the requested tolerance."""

    def __init__(self, what: str, achieved: float, requested: float):
        super().__init__(f"{what}: quadrature reached {achieved:.3g}, requested {requested:.3g}")
        self.achieved = achieved
        self.requested = requested


@dataclass(frozen=True)
class PropagatorTarget:
    m: float
    d: int
    cutoff: float = math.inf

    def __post_init__(self):
        if not (self.m > 0 and math.isfinite(self.m)):
            raise ValueError("mass must be finite and positive")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError("d must be a positive integer")
        if not self.cutoff > 0:
            raise ValueError("cutoff must be positive (or inf)")

    @property
    def truncated(self) -> bool:
        return math.isfinite(self.cutoff)


@dataclass(frozen=True)
class KernelSpec:
    profile: SpectralProfile
    sigma_z: float = 1.0
    sigma_V: float = 1.0

    def __post_init__(self):
        if not (self.sigma_z > 0 and self.sigma_V > 0):
            raise ValueError("sigma_z and sigma_V must be positive")

    @property
    def prefactor(self) -> float:
        """``sigma_z^2 sigma_V^2 F0^2``, the kernel at zero separation."""
        return (self.sigma_z * self.sigma_V * self.profile.amplitude) ** 2


def sphere_area(d: int) -> float:
    """Surface area of the unit sphere in R^d (2 for d = 1)."""
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)


def angular_average(d: int, u):
    """Mean of ``cos(p . r)`` over directions of ``p`` with ``|p||r| = u``."""
    u = np.asarray(u, dtype=float)
    if d == 1:
        return np.cos(u)
    if d == 2:
        return special.j0(u)
    if d == 3:
        return np.sinc(u / np.pi)
    nu = d / 2 - 1
    safe = np.where(u == 0, 1.0, u)
    val = math.gamma(d / 2) * (2 / safe) ** nu * special.jv(nu, safe)
    return np.where(u == 0, 1.0, val)


def _norm(r) -> tuple:
    r = np.atleast_1d(np.asarray(r, dtype=float))
    if r.ndim != 1:
        raise ValueError("separation must be a vector")
    return r, float(np.linalg.norm(r))


def _quad(f, a, b, what, tol, **kw):
    # convergence is judged from the returned error estimate, not scipy's warning
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, err = integrate.quad(f, a, b, epsabs=tol, epsrel=0.0, limit=kw.pop("limit", 1000), **kw)
    if not err <= tol:
        raise QuadratureError(what, err, tol)
    return val


def cosnet_kernel_closed_form(r, spec: KernelSpec) -> float:
    """Analytic cos-net two-point kernel at separation ``r``."""
    r, rn = _norm(r)
    law = spec.profile.law
    if law is SpectralLaw.GAUSSIAN_ISO:
        return spec.prefactor * math.exp(-0.5 * (spec.profile.bandwidth * rn) ** 2)
    if law is SpectralLaw.CAUCHY_1D:
        if r.size != 1:
            raise ValueError("cauchy_1d kernel is defined for d = 1")
        return spec.prefactor * math.exp(-spec.profile.mass * rn)
    if law is SpectralLaw.GAUSSIAN_DIAG:
        s = np.asarray(spec.profile.axis_scales)
        if s.size != r.size:
            raise ValueError("separation and axis_scales differ in dimension")
        return spec.prefactor * math.exp(-0.5 * float(np.sum((s * r) ** 2)))
    raise ValueError(f"{law.value} has no closed form; use kernel_quadrature")


def _radial_resolvent(d, m, cutoff, rn, tol, what):
    f = lambda p: p ** (d - 1) / (p * p + m * m) * float(angular_average(d, p * rn))  # noqa: E731
    return _quad(f, 0.0, cutoff, what, tol)


def resolvent_normalization(d: int, m: float, cutoff: float) -> float:
    """``Z = int_{|p| <= cutoff} d^d p / (p^2 + m^2)``."""
    if not math.isfinite(cutoff):
        if d == 1:
            return math.pi / m
        raise ValueError(f"resolvent density is not normalizable in d={d} without a cutoff")
    return sphere_area(d) * _radial_resolvent(d, m, cutoff, 0.0, PROPAGATOR_TOL, "normalization")


def free_propagator_target(r: float, target: PropagatorTarget) -> float:
    """Free Euclidean propagator of mass ``m`` at separation ``r`` (cutoff applied if finite)."""
    r = float(r)
    if r < 0 or not math.isfinite(r):
        raise ValueError("separation must be finite and non-negative")
    d, m = int(target.d), target.m
    if target.truncated:
        radial = _radial_resolvent(d, m, target.cutoff, r, PROPAGATOR_TOL, "propagator")
        return sphere_area(d) / (2 * math.pi) ** d * radial
    if d == 1:
        return math.exp(-m * r) / (2 * m)
    if r == 0:
        raise ValueError(f"the untruncated propagator is singular at r=0 in d={d}")
    if d == 2:
        return float(special.k0(m * r)) / (2 * math.pi)
    if d == 3:
        return math.exp(-m * r) / (4 * math.pi * r)
    nu = d / 2 - 1
    return (m / r) ** nu * float(special.kv(nu, m * r)) / (2 * math.pi) ** (d / 2)


def match_profile_to_propagator(target: PropagatorTarget, sigma_z: float = 1.0,
                                sigma_V: float = 1.0) -> SpectralProfile:
    """Spectral profile whose cos-net kernel equals the (truncated) free propagator."""
    scale = (sigma_z * sigma_V) ** 2
    d, m = int(target.d), target.m
    if not target.truncated:
        if d != 1:
            raise ValueError(f"matching in d={d} needs a finite cutoff (log/power-divergent normalization)")
        return SpectralProfile.cauchy_1d(m, amplitude=math.sqrt(1.0 / (2 * m * scale)))
    Z = resolvent_normalization(d, m, target.cutoff)
    F0_sq = Z / ((2 * math.pi) ** d * scale)
    return SpectralProfile.truncated_resolvent(m, target.cutoff, amplitude=math.sqrt(F0_sq))


def _expected_cos(profile: SpectralProfile, r: np.ndarray, rn: float, tol: float) -> float:
    law, d = profile.law, r.size
    profile.check_dimension(d)
    if rn == 0:
        return 1.0
    if law is SpectralLaw.CAUCHY_1D:
        # E cos(b r) for b ~ Cauchy(m): 2 int_0^inf cos(r b) m / (pi (b^2+m^2)) db
        m = profile.mass
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            val, err = integrate.quad(lambda b: m / (math.pi * (b * b + m * m)), 0, math.inf,
                                      weight="cos", wvar=rn, epsabs=tol / 2, limlst=200)
        if not err <= tol / 2:
            raise QuadratureError("cauchy kernel", 2 * err, tol)
        return 2 * val
    if law is SpectralLaw.GAUSSIAN_ISO:
        dens = stats.chi(d, scale=profile.bandwidth).pdf
        upper = profile.bandwidth * (math.sqrt(d) + 40.0)
        return _quad(lambda p: dens(p) * float(angular_average(d, p * rn)), 0.0, upper, "gaussian kernel", tol)
    if law is SpectralLaw.GAUSSIAN_DIAG:
        out = 1.0
        for s, ri in zip(profile.axis_scales, r):
            dens = stats.norm(scale=s).pdf
            out *= _quad(lambda b: dens(b) * math.cos(b * ri), -40 * s, 40 * s, "diagonal kernel", tol / d)
        return out
    m, cutoff = profile.mass, profile.cutoff
    Z = _radial_resolvent(d, m, cutoff, 0.0, tol, "normalization")
    return _radial_resolvent(d, m, cutoff, rn, tol * Z, "resolvent kernel") / Z


def kernel_quadrature(r, spec: KernelSpec, tol: float = KERNEL_TOL) -> float:
    """``sigma_z^2 sigma_V^2 E[F^2 cos(b . r)]`` by adaptive quadrature over the profile."""
    r, rn = _norm(r)
    inner_tol = tol / max(spec.prefactor, 1e-300)
    return spec.prefactor * _expected_cos(spec.profile, r, rn, inner_tol)
