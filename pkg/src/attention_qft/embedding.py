"""Token embeddings x -> token(x), including the random Fourier feature map.

A cos-net token has components ``sqrt(2) * F(b_r) * cos(b_r . x + c_r)`` with
random frequency rows ``b_r`` drawn from a spectral profile and phases
``c_r ~ U[-pi, pi]``.  Averaging the phase gives ``F(b)^2 cos(b . (x1 - x2))``,
so the profile fixes the induced stationary kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .rng import RngStream


class EmbeddingKind(str, Enum):
    IDENTITY = "identity"
    COSNET = "cosnet"


class SpectralLaw(str, Enum):
    GAUSSIAN_ISO = "gaussian_iso"
    CAUCHY_1D = "cauchy_1d"
    TRUNCATED_RESOLVENT = "truncated_resolvent"
    # axis-aligned anisotropic Gaussian, used as a negative control for rotations
    GAUSSIAN_DIAG = "gaussian_diag"


@dataclass(frozen=True)
class SpectralProfile:
    """Frequency law for the rows ``b_r`` plus a constant amplitude ``F0``."""

    law: SpectralLaw
    bandwidth: Optional[float] = None
    mass: Optional[float] = None
    cutoff: Optional[float] = None
    axis_scales: Optional[tuple] = None
    amplitude: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "law", SpectralLaw(self.law))
        if self.axis_scales is not None:
            object.__setattr__(self, "axis_scales", tuple(float(s) for s in self.axis_scales))
        if not self.amplitude > 0:
            raise ValueError("amplitude F0 must be strictly positive")
        needed = {
            SpectralLaw.GAUSSIAN_ISO: ("bandwidth",),
            SpectralLaw.CAUCHY_1D: ("mass",),
            SpectralLaw.TRUNCATED_RESOLVENT: ("mass", "cutoff"),
            SpectralLaw.GAUSSIAN_DIAG: (),
        }[self.law]
        for name in needed:
            v = getattr(self, name)
            if v is None or not v > 0 or not math.isfinite(v):
                raise ValueError(f"{self.law.value} profile needs a finite positive {name}")
        if self.law is SpectralLaw.GAUSSIAN_DIAG:
            if not self.axis_scales or min(self.axis_scales) <= 0:
                raise ValueError("gaussian_diag profile needs positive axis_scales")

    @classmethod
    def gaussian_iso(cls, bandwidth: float, amplitude: float = 1.0) -> SpectralProfile:
        return cls(SpectralLaw.GAUSSIAN_ISO, bandwidth=bandwidth, amplitude=amplitude)

    @classmethod
    def cauchy_1d(cls, mass: float, amplitude: float = 1.0) -> SpectralProfile:
        return cls(SpectralLaw.CAUCHY_1D, mass=mass, amplitude=amplitude)

    @classmethod
    def truncated_resolvent(cls, mass: float, cutoff: float, amplitude: float = 1.0) -> SpectralProfile:
        return cls(SpectralLaw.TRUNCATED_RESOLVENT, mass=mass, cutoff=cutoff, amplitude=amplitude)

    @classmethod
    def gaussian_diag(cls, axis_scales: Sequence[float], amplitude: float = 1.0) -> SpectralProfile:
        return cls(SpectralLaw.GAUSSIAN_DIAG, axis_scales=tuple(axis_scales), amplitude=amplitude)

    @property
    def is_isotropic(self) -> bool:
        return self.law is not SpectralLaw.GAUSSIAN_DIAG

    def check_dimension(self, d: int) -> None:
        if self.law is SpectralLaw.CAUCHY_1D and d != 1:
            raise ValueError("cauchy_1d profile requires d = 1")
        if self.law is SpectralLaw.GAUSSIAN_DIAG and len(self.axis_scales) != d:
            raise ValueError(f"gaussian_diag needs {d} axis_scales, got {len(self.axis_scales)}")

    def sample(self, rng: np.random.Generator, size, d: int) -> np.ndarray:
        """Draw frequency rows, shape ``size + (d,)``."""
        self.check_dimension(d)
        size = as_shape(size)
        if self.law is SpectralLaw.GAUSSIAN_ISO:
            return self.bandwidth * rng.standard_normal(size + (d,))
        if self.law is SpectralLaw.GAUSSIAN_DIAG:
            return np.asarray(self.axis_scales) * rng.standard_normal(size + (d,))
        if self.law is SpectralLaw.CAUCHY_1D:
            return self.mass * rng.standard_cauchy(size + (1,))
        n = int(np.prod(size, dtype=np.int64))
        radii, _ = sample_resolvent_radii(rng, n, d, self.mass, self.cutoff)
        return (radii[:, None] * _unit_vectors(rng, n, d)).reshape(size + (d,))

    def to_dict(self) -> dict:
        out = {"law": self.law.value, "amplitude": self.amplitude}
        for name in ("bandwidth", "mass", "cutoff"):
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        if self.axis_scales is not None:
            out["axis_scales"] = list(self.axis_scales)
        return out


def as_shape(size) -> tuple:
    if size is None:
        return ()
    if isinstance(size, (int, np.integer)):
        return (int(size),)
    return tuple(int(s) for s in size)


def _unit_vectors(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    if d == 1:
        return rng.choice(np.array([-1.0, 1.0]), size=(n, 1))
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _resolvent_radial_density(rho, d, m):
    return rho ** (d - 1) / (rho**2 + m**2)


def _resolvent_radial_max(d: int, m: float, cutoff: float) -> float:
    # rho^(d-1)/(rho^2+m^2) peaks at 0 (d=1), at m (d=2), and is increasing for d>=3
    rho_star = 0.0 if d == 1 else (min(m, cutoff) if d == 2 else cutoff)
    return float(_resolvent_radial_density(rho_star, d, m))


def resolvent_acceptance_ratio(d: int, m: float, cutoff: float) -> float:
    """Expected acceptance rate of the uniform-radial rejection sampler."""
    from scipy.integrate import quad

    area, _ = quad(_resolvent_radial_density, 0.0, cutoff, args=(d, m), limit=200)
    return area / (cutoff * _resolvent_radial_max(d, m, cutoff))


def sample_resolvent_radii(rng: np.random.Generator, n: int, d: int, m: float, cutoff: float):
    """Radii |b| with density prop. to ``rho^(d-1)/(rho^2+m^2)`` on ``[0, cutoff]``.

    This is the radial marginal of a vector density prop. to ``1/(|b|^2+m^2)``
    on the ball.  Returns ``(radii, acceptance_ratio)``.
    """
    gmax = _resolvent_radial_max(d, m, cutoff)
    out = np.empty(n)
    filled = proposed = accepted = 0
    while filled < n:
        k = max(64, 2 * (n - filled))
        rho = cutoff * rng.random(k)
        keep = rho[rng.random(k) * gmax <= _resolvent_radial_density(rho, d, m)]
        take = min(keep.size, n - filled)
        out[filled:filled + take] = keep[:take]
        filled += take
        proposed += k
        accepted += keep.size
    return out, (accepted / proposed if proposed else 1.0)


@dataclass(frozen=True)
class EmbeddingSpec:
    kind: EmbeddingKind = EmbeddingKind.IDENTITY
    profile: Optional[SpectralProfile] = None
    token_dim: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", EmbeddingKind(self.kind))
        if self.kind is EmbeddingKind.COSNET and self.profile is None:
            raise ValueError("cosnet embedding requires a spectral profile")
        if self.token_dim is not None and int(self.token_dim) < 1:
            raise ValueError("token_dim must be a positive integer")

    @classmethod
    def cosnet(cls, profile: SpectralProfile, token_dim: Optional[int] = None) -> EmbeddingSpec:
        return cls(EmbeddingKind.COSNET, profile, token_dim)

    def resolved_token_dim(self, d: int) -> int:
        return int(self.token_dim) if self.token_dim is not None else int(d)

    def check_dimension(self, d: int) -> None:
        if self.kind is EmbeddingKind.IDENTITY and self.resolved_token_dim(d) != d:
            raise ValueError(f"identity embedding requires token_dim == d ({d}), got {self.token_dim}")
        if self.profile is not None:
            self.profile.check_dimension(d)

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value, "token_dim": self.token_dim}
        if self.profile is not None:
            out["profile"] = self.profile.to_dict()
        return out


@dataclass(frozen=True)
class FeatureParams:
    """Frequencies ``b`` (token_dim x d) and phases ``c`` (token_dim), with optional leading batch axes."""

    b: np.ndarray
    c: np.ndarray


def sample_feature_params(spec: EmbeddingSpec, stream, d: int, size=()) -> FeatureParams:
    """Draw cos-net feature parameters.  ``stream`` is an RngStream or a live Generator."""
    if spec.kind is not EmbeddingKind.COSNET:
        raise TypeError("feature parameters only exist for the cosnet embedding")
    spec.check_dimension(d)
    rng = stream.generator() if isinstance(stream, RngStream) else stream
    size = as_shape(size)
    D = spec.resolved_token_dim(d)
    b = spec.profile.sample(rng, size + (D,), d)
    c = rng.uniform(-np.pi, np.pi, size + (D,))
    return FeatureParams(b, c)


def embed_point(x, spec: EmbeddingSpec, fp: Optional[FeatureParams] = None) -> np.ndarray:
    """Token vector(s) for point(s) ``x`` of shape ``(..., d)``.

    For cos-net the leading axes of ``fp.b`` (everything before ``(D, d)``)
    must broadcast against the leading axes of ``x``.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        raise ValueError("a point needs at least one coordinate")
    d = x.shape[-1]
    if spec.kind is EmbeddingKind.IDENTITY:
        if fp is not None:
            raise ValueError("identity embedding takes no feature parameters")
        spec.check_dimension(d)
        return x.copy()
    if fp is None:
        raise ValueError("cosnet embedding needs feature parameters")
    b, c = np.asarray(fp.b), np.asarray(fp.c)
    if b.shape[-1] != d:
        raise ValueError(f"point has dimension {d} but feature rows have {b.shape[-1]}")
    phase = np.einsum("...d,...rd->...r", x, b) + c
    return math.sqrt(2.0) * spec.profile.amplitude * np.cos(phase)
