"""Random parameter ensembles for attention-head fields.

Weights follow a fan-in scaling: every entry of ``W^Q, W^K, W^V`` is a centred
Gaussian with variance ``sigma^2 / D`` where ``D`` is the token dimension
(``D = d`` for the identity embedding).  Readout weights ``z`` are i.i.d.
symmetric with ``E z^2 = sigma_z^2 / (N_h d_k)`` and
``E z^4 = gamma_z4 / (N_h d_k)^2``.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .embedding import (
    EmbeddingKind,
    EmbeddingSpec,
    SpectralLaw,
    SpectralProfile,
    as_shape,
    sample_feature_params,
)
from .rng import RngStream


class ConfigError(ValueError):
    """Invalid or inconsistent ensemble / run configuration."""


class AttentionMode(str, Enum):
    SINGLE_TOKEN = "single_token"
    FIXED_CONTEXT = "fixed_context"
    INSERTION_SET = "insertion_set"


class ReadoutLaw(str, Enum):
    GAUSSIAN = "gaussian"
    # z = +-a with probability q each, 0 otherwise
    MIXTURE = "mixture"


@dataclass(frozen=True)
class EnsembleConfig:
    d: int = 2
    d_k: int = 16
    N_h: int = 1
    sigma_Q: float = 1.0
    sigma_K: float = 1.0
    sigma_V: float = 1.0
    sigma_z: float = 1.0
    gamma_z4: Optional[float] = None
    score_power: float = 0.5
    attention_mode: AttentionMode = AttentionMode.SINGLE_TOKEN
    embedding: EmbeddingSpec = field(default_factory=EmbeddingSpec)
    context_points: tuple = ()
    seed: int = 0
    readout_law: ReadoutLaw = ReadoutLaw.GAUSSIAN
    include_query: bool = False
    decoupled_alpha: bool = False

    def __post_init__(self):
        try:
            object.__setattr__(self, "attention_mode", AttentionMode(self.attention_mode))
            object.__setattr__(self, "readout_law", ReadoutLaw(self.readout_law))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        pts = tuple(tuple(float(c) for c in np.atleast_1d(p)) for p in self.context_points)
        object.__setattr__(self, "context_points", pts)
        self._validate()

    def _validate(self):
        for name in ("d", "d_k", "N_h"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        for name in ("sigma_Q", "sigma_K", "sigma_V", "sigma_z"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be a finite positive real, got {v!r}")
        if self.score_power not in (0.5, 1.0):
            raise ConfigError(f"score_power must be 0.5 or 1.0, got {self.score_power!r}")
        if not isinstance(self.seed, (int, np.integer)) or not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        try:
            self.embedding.check_dimension(self.d)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.attention_mode is AttentionMode.FIXED_CONTEXT and not self.context_points:
            raise ConfigError("fixed_context mode requires a non-empty context_points list")
        if any(len(p) != self.d for p in self.context_points):
            raise ConfigError(f"context points must have dimension d={self.d}")
        if self.decoupled_alpha and self.attention_mode is AttentionMode.SINGLE_TOKEN:
            raise ConfigError("decoupled_alpha needs an attention mode with a softmax")

        g4, s4 = self.gamma_z4_resolved, self.sigma_z**4
        if not (math.isfinite(g4) and g4 > 0):
            raise ConfigError("gamma_z4 must be a finite positive real")
        if g4 < s4:
            warnings.warn(
                f"gamma_z4={g4:g} < sigma_z^4={s4:g}: no symmetric law has these moments",
                stacklevel=3,
            )
        if self.readout_law is ReadoutLaw.GAUSSIAN and not math.isclose(g4, 3 * s4, rel_tol=1e-12):
            raise ConfigError(
                f"gaussian readout implies gamma_z4 = 3 sigma_z^4 = {3 * s4:g}; got {g4:g} "
                "(select readout_law='mixture' for other fourth moments)"
            )
        if self.readout_law is ReadoutLaw.MIXTURE and g4 < s4:
            raise ConfigError("mixture readout law needs gamma_z4 >= sigma_z^4")

    @property
    def gamma_z4_resolved(self) -> float:
        return 3.0 * self.sigma_z**4 if self.gamma_z4 is None else float(self.gamma_z4)

    @property
    def token_dim(self) -> int:
        return self.embedding.resolved_token_dim(self.d)

    @property
    def z_second_moment(self) -> float:
        return self.sigma_z**2 / (self.N_h * self.d_k)

    @property
    def z_fourth_moment(self) -> float:
        return self.gamma_z4_resolved / (self.N_h * self.d_k) ** 2

    @property
    def context_array(self) -> np.ndarray:
        return np.asarray(self.context_points, dtype=float).reshape(-1, self.d)

    def weight_std(self, which: str) -> float:
        sigma = {"Q": self.sigma_Q, "K": self.sigma_K, "V": self.sigma_V}[which]
        return sigma / math.sqrt(self.token_dim)

    def replace(self, **changes) -> EnsembleConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Enum):
                v = v.value
            elif isinstance(v, EmbeddingSpec):
                v = v.to_dict()
            elif f.name == "context_points":
                v = [list(p) for p in v]
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> EnsembleConfig:
        """Strict parse: unknown keys are an error, never silently dropped."""
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown ensemble keys: {unknown}")
        if "embedding" in data and isinstance(data["embedding"], dict):
            data["embedding"] = embedding_from_dict(data["embedding"])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def embedding_from_dict(data: dict) -> EmbeddingSpec:
    unknown = sorted(set(data) - {"kind", "profile", "token_dim"})
    if unknown:
        raise ConfigError(f"unknown embedding keys: {unknown}")
    profile = data.get("profile")
    try:
        if isinstance(profile, dict):
            allowed = {f.name for f in dataclasses.fields(SpectralProfile)}
            bad = sorted(set(profile) - allowed)
            if bad:
                raise ConfigError(f"unknown profile keys: {bad}")
            profile = SpectralProfile(**profile)
        return EmbeddingSpec(data.get("kind", "identity"), profile, data.get("token_dim"))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class HeadParams:
    """Query/key/value matrices, shape ``(..., N_h, D, d_k)``."""

    WQ: np.ndarray
    WK: np.ndarray
    WV: np.ndarray


@dataclass(frozen=True)
class ReadoutParams:
    """Readout weights ``z``, shape ``(..., N_h, d_k)``."""

    z: np.ndarray


def _rng(stream) -> np.random.Generator:
    return stream.generator() if isinstance(stream, RngStream) else stream


def draw_weight(cfg: EnsembleConfig, which: str, rng: np.random.Generator, size=()) -> np.ndarray:
    shape = as_shape(size) + (cfg.N_h, cfg.token_dim, cfg.d_k)
    return cfg.weight_std(which) * rng.standard_normal(shape)


def sample_head_params(cfg: EnsembleConfig, stream: RngStream, size=()) -> HeadParams:
    """Independent ``W^Q, W^K, W^V`` for every head, each from its own sub-stream."""
    return HeadParams(
        *(draw_weight(cfg, w, stream.child("W" + w).generator(), size) for w in "QKV")
    )


def draw_readout(cfg: EnsembleConfig, rng: np.random.Generator, size=()) -> np.ndarray:
    shape = as_shape(size) + (cfg.N_h, cfg.d_k)
    s2, g4 = cfg.z_second_moment, cfg.z_fourth_moment
    if cfg.readout_law is ReadoutLaw.GAUSSIAN:
        return math.sqrt(s2) * rng.standard_normal(shape)
    # E z^2 = 2 q a^2, E z^4 = 2 q a^4
    a = math.sqrt(g4 / s2)
    q = s2 * s2 / (2.0 * g4)
    u = rng.random(shape)
    return np.where(u < q, a, np.where(u > 1.0 - q, -a, 0.0))


def sample_readout(cfg: EnsembleConfig, stream, size=()) -> ReadoutParams:
    return ReadoutParams(draw_readout(cfg, _rng(stream), size))


def draw_score_matrices(cfg: EnsembleConfig, rng: np.random.Generator, size=()) -> np.ndarray:
    """Per-coordinate products ``W^Q (W^K)^T``, shape ``(..., N_h, d_k, D, D)``.

    Each output coordinate gets its own independent ``(W^Q, W^K)`` pair of
    shape ``D x d_k``.  Only their product enters the scores, so for
    ``d_k > D`` we draw it in ``O(D^2)``: ``W^Q (W^Q)^T`` is Wishart and
    factors as ``s_Q^2 L L^T`` (Bartlett), and given it the columns of the
    product are ``N(0, s_K^2 W^Q (W^Q)^T)``, i.e. ``s_Q s_K L G`` in law.
    """
    D, dk = cfg.token_dim, cfg.d_k
    sq, sk = cfg.weight_std("Q"), cfg.weight_std("K")
    lead = as_shape(size) + (cfg.N_h, dk)
    if dk <= D:
        A = sq * rng.standard_normal(lead + (D, dk))
        B = sk * rng.standard_normal(lead + (D, dk))
        return A @ np.swapaxes(B, -1, -2)
    L = np.zeros(lead + (D, D))
    rows, cols = np.tril_indices(D, -1)
    L[..., rows, cols] = rng.standard_normal(lead + (rows.size,))
    dof = dk - np.arange(D)
    L[..., np.arange(D), np.arange(D)] = np.sqrt(rng.chisquare(dof, lead + (D,)))
    G = rng.standard_normal(lead + (D, D))
    return sq * sk * (L @ G)


def sample_score_matrices(cfg: EnsembleConfig, stream, size=()) -> np.ndarray:
    return draw_score_matrices(cfg, _rng(stream), size)


@dataclass(frozen=True)
class MomentCheck:
    block: str
    moment: int
    expected: float
    estimate: float
    stderr: float
    passed: bool


@dataclass(frozen=True)
class MomentReport:
    n_draws: int
    checks: tuple

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def get(self, block: str, moment: int) -> MomentCheck:
        for c in self.checks:
            if c.block == block and c.moment == moment:
                return c
        raise KeyError((block, moment))

    def rows(self) -> list:
        return [dataclasses.asdict(c) for c in self.checks]


def _moment_check(block, k, values, expected, n_se=5.0) -> MomentCheck:
    p = np.asarray(values, dtype=float).ravel() ** k
    est = float(p.mean())
    se = float(p.std(ddof=1) / math.sqrt(p.size)) if p.size > 1 else math.inf
    return MomentCheck(block, k, float(expected), est, se, abs(est - expected) <= n_se * se)


def verify_moments(cfg: EnsembleConfig, n_draws: int, stream: Optional[RngStream] = None) -> MomentReport:
    """Empirical 2nd/4th moments of every parameter block, flagged at 5 standard errors."""
    if n_draws < 1:
        raise ValueError("n_draws must be positive")
    if n_draws < 1000:
        warnings.warn("fewer than 1000 draws: moment checks will have wide error bars", stacklevel=2)
    stream = stream or RngStream(cfg.seed).child("verify_moments")
    heads = sample_head_params(cfg, stream.child("heads"), n_draws)
    z = sample_readout(cfg, stream.child("readout"), n_draws).z
    checks = []
    for name, w, sigma in (("WQ", heads.WQ, cfg.sigma_Q), ("WK", heads.WK, cfg.sigma_K), ("WV", heads.WV, cfg.sigma_V)):
        var = sigma**2 / cfg.token_dim
        checks.append(_moment_check(name, 2, w, var))
        checks.append(_moment_check(name, 4, w, 3 * var**2))
    checks.append(_moment_check("z", 2, z, cfg.z_second_moment))
    checks.append(_moment_check("z", 4, z, cfg.z_fourth_moment))
    if cfg.embedding.kind is EmbeddingKind.COSNET:
        fp = sample_feature_params(cfg.embedding, stream.child("features"), cfg.d, n_draws)
        checks.append(_moment_check("c", 2, fp.c, np.pi**2 / 3))
        checks.append(_moment_check("c", 4, fp.c, np.pi**4 / 5))
        prof = cfg.embedding.profile
        if prof.law in (SpectralLaw.GAUSSIAN_ISO, SpectralLaw.GAUSSIAN_DIAG):
            scales = np.full(cfg.d, prof.bandwidth) if prof.law is SpectralLaw.GAUSSIAN_ISO else np.asarray(prof.axis_scales)
            for k in range(cfg.d):
                checks.append(_moment_check(f"b[:, {k}]", 2, fp.b[..., k], scales[k] ** 2))
                checks.append(_moment_check(f"b[:, {k}]", 4, fp.b[..., k], 3 * scales[k] ** 4))
    return MomentReport(n_draws, tuple(checks))
