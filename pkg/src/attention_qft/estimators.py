"""Monte Carlo correlators of attention-head fields with batch jackknife errors.

Two routes are available for most quantities:

* raw: products of sampled field values / head components;
* conditional: the value weights are integrated out exactly, leaving the
  conditional two-point objects ``X_ab`` as functions of the query/key draw.

Within one estimator call, every field insertion of a sample shares one
parameter draw.  Calls with the same stream use the same draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np

from ._batches import run_batches
from .attention import ContextSet, attention_weights, _keys_for_query, _token
from .embedding import EmbeddingKind, FeatureParams
from .ensembles import AttentionMode, EnsembleConfig, HeadParams
from .rng import RngStream

PAIRS = ("12", "34", "13", "24", "14", "23")
PAIRINGS = (("12", "34"), ("13", "24"), ("14", "23"))


@dataclass(frozen=True)
class CorrelatorEstimate:
    mean: float
    stderr: float
    n_samples: int
    n_batches: int

    def sigmas_from(self, value: float) -> float:
        """Distance from ``value`` in units of the standard error."""
        diff = abs(self.mean - value)
        if self.stderr == 0:
            return 0.0 if diff == 0 else math.inf
        return diff / self.stderr

    @property
    def significance(self) -> float:
        return self.sigmas_from(0.0)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n_samples": self.n_samples, "n_batches": self.n_batches}


def combined_sigma(a: CorrelatorEstimate, b: CorrelatorEstimate) -> float:
    """``|a - b|`` in units of ``sqrt(se_a^2 + se_b^2)``."""
    se = math.hypot(a.stderr, b.stderr)
    diff = abs(a.mean - b.mean)
    if se == 0:
        return 0.0 if diff == 0 else math.inf
    return diff / se


def compatible(a: CorrelatorEstimate, b: CorrelatorEstimate, n_sigma: float = 3.0) -> bool:
    return combined_sigma(a, b) <= n_sigma


def jackknife_error(batch_means, combiner: Optional[Callable] = None):
    """Leave-one-out jackknife over batches.

    ``batch_means`` is ``(B,)`` or ``(B, k)``; ``combiner`` maps a mean vector
    (length ``k``) to a scalar and defaults to the identity.  Returns the
    bias-corrected estimate and its standard error.
    """
    x = np.asarray(batch_means, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    B = x.shape[0]
    if B < 2:
        raise ValueError("jackknife needs at least 2 batches")
    if combiner is None:
        if x.shape[1] != 1:
            raise ValueError("a combiner is required for multi-statistic batches")
        combiner = lambda m: m[0]  # noqa: E731
    full = float(combiner(x.mean(axis=0)))
    loo = (x.sum(axis=0) - x) / (B - 1)
    thetas = np.array([float(combiner(row)) for row in loo])
    if np.all(thetas == thetas[0]):
        return B * full - (B - 1) * thetas[0], 0.0
    tbar = thetas.mean()
    stderr = math.sqrt((B - 1) / B * np.sum((thetas - tbar) ** 2))
    return B * full - (B - 1) * tbar, stderr


@dataclass(frozen=True)
class BatchTable:
    """Batch means of named per-sample statistics; the unit of joint error propagation."""

    labels: tuple
    means: np.ndarray
    n_samples: int

    @property
    def n_batches(self) -> int:
        return self.means.shape[0]

    def estimate(self, fn: Callable[[dict], float]) -> CorrelatorEstimate:
        idx = {k: i for i, k in enumerate(self.labels)}
        mean, se = jackknife_error(self.means, lambda row: fn(_Row(row, idx)))
        return CorrelatorEstimate(float(mean), float(se), self.n_samples, self.n_batches)

    def merge(self, other: BatchTable) -> BatchTable:
        return BatchTable(self.labels + other.labels, np.hstack([self.means, other.means]), self.n_samples)


class _Row:
    __slots__ = ("row", "idx")

    def __init__(self, row, idx):
        self.row, self.idx = row, idx

    def __getitem__(self, key):
        return self.row[self.idx[key]]


def _stream(cfg: EnsembleConfig, stream: Optional[RngStream]) -> RngStream:
    return stream if stream is not None else RngStream(cfg.seed).child("estimate")


def _points(points, cfg: EnsembleConfig, n: Optional[int] = None) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1 and cfg.d == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[1] != cfg.d or len(pts) == 0:
        raise ValueError(f"points must be a non-empty list of {cfg.d}-vectors")
    if n is not None and len(pts) != n:
        raise ValueError(f"expected exactly {n} points, got {len(pts)}")
    return pts


def _table(cfg, pts, n_samples, n_batches, stream, stat_fn, threads) -> BatchTable:
    labels, means = run_batches(cfg, pts, n_samples, n_batches, _stream(cfg, stream), stat_fn, threads)
    return BatchTable(labels, means, n_samples)


def _ij(pair: str):
    return int(pair[0]) - 1, int(pair[1]) - 1


# ---------------------------------------------------------------- statistics

def _phi_stats(fb) -> dict:
    phi = fb.phi
    out = {"phi1234": phi[:, 0] * phi[:, 1] * phi[:, 2] * phi[:, 3]}
    for p in PAIRS:
        a, b = _ij(p)
        out["phi" + p] = phi[:, a] * phi[:, b]
    return out


def _head_tensor_stats(fb) -> dict:
    """Coordinate-averaged raw head moments (i != j excluded where required)."""
    h = fb.heads  # (S, H, 4, dk)
    dk = h.shape[-1]
    prod = {p: h[:, :, _ij(p)[0]] * h[:, :, _ij(p)[1]] for p in PAIRS}  # (S, H, dk)
    sums = {p: v.sum(axis=-1) for p, v in prod.items()}
    quad = prod["12"] * prod["34"]
    quad_sum = quad.sum(axis=-1)
    out = {f"H2_{p}": sums[p].mean(axis=1) / dk for p in PAIRS}
    out["Hiiii"] = quad_sum.mean(axis=1) / dk
    norm = dk * (dk - 1)
    for name, (p, q) in zip(("Hiijj", "Hijij", "Hijji"), PAIRINGS):
        out[name] = ((sums[p] * sums[q] - quad_sum) / norm).mean(axis=1)
    for p, q in PAIRINGS:
        out[f"Hxh{p}_{q}"] = _cross_heads(sums[p] / dk, sums[q] / dk)
    return out


def _cross_heads(a, b):
    """Mean of ``a[h] b[h']`` over ordered head pairs ``h != h'`` (zero for one head)."""
    H = a.shape[1]
    if H == 1:
        return np.zeros(a.shape[0])
    return (a.sum(axis=1) * b.sum(axis=1) - (a * b).sum(axis=1)) / (H * (H - 1))


def _x_pairs(fb) -> dict:
    X = fb.X
    return {p: X[..., _ij(p)[0], _ij(p)[1]] for p in PAIRS}


def _conditional_stats(fb) -> dict:
    """Conditional H-tensors and X moments; value weights integrated out."""
    x = _x_pairs(fb)  # (S, H) or (S, H, dk)
    out = {}
    if fb.cfg.decoupled_alpha:
        dk = fb.cfg.d_k
        for p in PAIRS:
            out[f"X{p}"] = x[p].mean(axis=(1, 2))
        for p, q in PAIRINGS:
            same = x[p] * x[q]
            out[f"XX{p}_{q}_same"] = same.mean(axis=(1, 2))
            cross = (x[p].sum(-1) * x[q].sum(-1) - same.sum(-1)) / (dk * (dk - 1))
            out[f"XX{p}_{q}"] = cross.mean(axis=1)
        out["X12sq"] = (x["12"] ** 2).mean(axis=(1, 2))
    else:
        for p in PAIRS:
            out[f"X{p}"] = x[p].mean(axis=1)
        for p, q in PAIRINGS:
            out[f"XX{p}_{q}"] = (x[p] * x[q]).mean(axis=1)
            out[f"XX{p}_{q}_same"] = out[f"XX{p}_{q}"]
        out["X12sq"] = (x["12"] ** 2).mean(axis=1)
    per_head = {p: v.mean(axis=2) if v.ndim == 3 else v for p, v in x.items()}
    for p, q in PAIRINGS:
        out[f"XXh{p}_{q}"] = _cross_heads(per_head[p], per_head[q])
    return out


# ---------------------------------------------------------------- n-point functions

def estimate_gn(points, cfg: EnsembleConfig, n_samples: int = 100_000, n_batches: int = 50,
                stream: Optional[RngStream] = None, threads: int = 1) -> CorrelatorEstimate:
    """``E[phi(x_1) ... phi(x_n)]`` over fresh draws of every parameter."""
    pts = _points(points, cfg)
    stat = lambda fb: {"prod": np.prod(fb.phi, axis=1)}  # noqa: E731
    return _table(cfg, pts, n_samples, n_batches, stream, stat, threads).estimate(lambda m: m["prod"])


def _g4c(m) -> float:
    return m["phi1234"] - sum(m["phi" + p] * m["phi" + q] for p, q in PAIRINGS)


def estimate_g4_connected(points, cfg: EnsembleConfig, n_samples: int = 1_000_000, n_batches: int = 100,
                          stream: Optional[RngStream] = None, threads: int = 1) -> CorrelatorEstimate:
    """Fourth cumulant ``G4 - (G12 G34 + G13 G24 + G14 G23)``, jackknifed as one nonlinear statistic."""
    pts = _points(points, cfg, 4)
    return _table(cfg, pts, n_samples, n_batches, stream, _phi_stats, threads).estimate(_g4c)


def conditional_X(a, b, head: HeadParams, ctx: Optional[ContextSet], cfg: EnsembleConfig,
                  fp: Optional[FeatureParams] = None):
    """``E[head_i(x_a) head_i(x_b) | W^Q, W^K]`` for one draw.

    Equals ``sigma_V^2 / D * sum_uv alpha_u(x_a) alpha_v(x_b) (t_u . t_v)``.
    ``head`` needs ``WQ`` and ``WK``; stacked heads give one value per head.
    """
    scale = cfg.sigma_V**2 / cfg.token_dim
    ta, tb = _token(a, cfg, fp), _token(b, cfg, fp)
    if cfg.attention_mode is AttentionMode.SINGLE_TOKEN:
        value = scale * float(ta @ tb)
        lead = np.shape(head.WQ)[:-2] if head is not None else ()
        return np.full(lead, value) if lead else value

    def attended(x, tq):
        keys = _keys_for_query(tq, ctx, cfg)
        alpha = attention_weights(x, ctx, head, cfg, fp)
        return (alpha[..., None, :] @ keys)[..., 0, :]

    ma, mb = attended(a, ta), attended(b, tb)
    out = scale * np.sum(ma * mb, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def estimate_g2_conditional(x1, x2, cfg: EnsembleConfig, n_samples: int = 100_000, n_batches: int = 50,
                            stream: Optional[RngStream] = None, threads: int = 1) -> CorrelatorEstimate:
    """``sigma_z^2 E[X_12]`` -- the two-point function with value and readout weights integrated out."""
    pts = _points([x1, x2], cfg, 2)

    def stat(fb):
        X = fb.X[..., 0, 1]
        return {"X12": X.reshape(X.shape[0], -1).mean(axis=1)}

    table = _table(cfg, pts, n_samples, n_batches, stream, stat, threads)
    return table.estimate(lambda m: cfg.sigma_z**2 * m["X12"])


# ---------------------------------------------------------------- four-point structure

def _x_is_deterministic(cfg: EnsembleConfig) -> bool:
    return cfg.attention_mode is AttentionMode.SINGLE_TOKEN and cfg.embedding.kind is EmbeddingKind.IDENTITY


def _ib_prefactor(cfg: EnsembleConfig) -> float:
    return cfg.sigma_z**4 / cfg.N_h * (1.0 - 1.0 / cfg.d_k)


def _cross_head_prefactor(cfg: EnsembleConfig) -> float:
    # distinct heads share the embedding features, so they need not be independent
    return cfg.sigma_z**4 * (1.0 - 1.0 / cfg.N_h)


@dataclass(frozen=True)
class IBCovariances:
    """Query/key covariances of the conditional two-point objects.

    ``cov_12_34`` etc. are the independence-breaking brackets: covariances
    of ``X`` taken at two *different* output coordinates (for shared
    attention this is the plain covariance).  ``var_12`` is the variance of
    ``X_12`` at a single coordinate.  ``cross_heads`` sums the same
    covariances between two different heads; it vanishes unless the heads
    share random embedding features.
    """

    cov_12_34: CorrelatorEstimate
    cov_13_24: CorrelatorEstimate
    cov_14_23: CorrelatorEstimate
    var_12: CorrelatorEstimate
    I_IB: CorrelatorEstimate
    table: Optional[BatchTable] = field(default=None, repr=False, compare=False)
    cross_heads: Optional[CorrelatorEstimate] = None


def _cov_fn(p, q):
    return lambda m: m[f"XX{p}_{q}"] - m[f"X{p}"] * m[f"X{q}"]


def _cross_cov(m):
    return sum(m[f"XXh{p}_{q}"] - m[f"X{p}"] * m[f"X{q}"] for p, q in PAIRINGS)


def _ib_from_table(table: BatchTable, cfg: EnsembleConfig) -> IBCovariances:
    covs = [table.estimate(_cov_fn(p, q)) for p, q in PAIRINGS]
    var = table.estimate(lambda m: m["X12sq"] - m["X12"] ** 2)
    pref, xpref = _ib_prefactor(cfg), _cross_head_prefactor(cfg)
    i_ib = table.estimate(lambda m: pref * sum(_cov_fn(p, q)(m) for p, q in PAIRINGS) + xpref * _cross_cov(m))
    return IBCovariances(*covs, var, i_ib, table, table.estimate(_cross_cov))


def estimate_ib_covariances(points, cfg: EnsembleConfig, n_samples: int = 100_000, n_batches: int = 50,
                            stream: Optional[RngStream] = None, threads: int = 1) -> IBCovariances:
    pts = _points(points, cfg, 4)
    if _x_is_deterministic(cfg):
        zero = CorrelatorEstimate(0.0, 0.0, n_samples, n_batches)
        return IBCovariances(zero, zero, zero, zero, zero)
    table = _table(cfg, pts, n_samples, n_batches, stream, _conditional_stats, threads)
    return _ib_from_table(table, cfg)


class Route(str, Enum):
    RAW_MC = "raw_mc"
    CONDITIONAL = "conditional"


@dataclass(frozen=True)
class HTensorEstimates:
    """Coordinate-averaged head moments at four points.

    ``H2`` maps a pair label like ``"12"`` to ``E[head_i(x_1) head_i(x_2)]``.
    """

    H2: dict
    H_iiii: CorrelatorEstimate
    H_iijj: CorrelatorEstimate
    H_ijij: CorrelatorEstimate
    H_ijji: CorrelatorEstimate
    route: Route
    table: BatchTable = field(repr=False, compare=False)


# Names of the batch statistics holding each H-tensor, per route.
_H_KEYS = {
    Route.RAW_MC: dict({f"H2_{p}": f"H2_{p}" for p in PAIRS} | {f"Hxh{p}_{q}": f"Hxh{p}_{q}" for p, q in PAIRINGS},
                       Hiiii="Hiiii", Hiijj="Hiijj", Hijij="Hijij", Hijji="Hijji"),
    Route.CONDITIONAL: dict({f"H2_{p}": f"X{p}" for p in PAIRS} | {f"Hxh{p}_{q}": f"XXh{p}_{q}" for p, q in PAIRINGS},
                            Hiijj="XX12_34", Hijij="XX13_24", Hijji="XX14_23"),
}


def _h_value(m, route: Route, name: str) -> float:
    if route is Route.CONDITIONAL and name == "Hiiii":
        # conditional Gaussian (Wick) pairing of a single coordinate
        return sum(m[f"XX{p}_{q}_same"] for p, q in PAIRINGS)
    return m[_H_KEYS[route][name]]


def _h_from_table(table: BatchTable, route: Route) -> HTensorEstimates:
    est = lambda name: table.estimate(lambda m: _h_value(m, route, name))  # noqa: E731
    return HTensorEstimates(
        {p: est(f"H2_{p}") for p in PAIRS},
        est("Hiiii"), est("Hiijj"), est("Hijij"), est("Hijji"), route, table,
    )


def estimate_h_tensors(points, cfg: EnsembleConfig, n_samples: int = 100_000, n_batches: int = 50,
                       stream: Optional[RngStream] = None, threads: int = 1,
                       route: Route = Route.RAW_MC) -> HTensorEstimates:
    """H-tensors from retained head components (raw) or from ``X`` moments (conditional)."""
    if cfg.d_k < 2:
        raise ValueError("H-tensors with i != j need d_k >= 2")
    pts = _points(points, cfg, 4)
    route = Route(route)
    stat = _head_tensor_stats if route is Route.RAW_MC else _conditional_stats
    return _h_from_table(_table(cfg, pts, n_samples, n_batches, stream, stat, threads), route)


@dataclass(frozen=True)
class FourPointDecomposition:
    G4: CorrelatorEstimate
    G4_connected: CorrelatorEstimate
    I_dk: CorrelatorEstimate
    I_IB: CorrelatorEstimate
    route: Route

    def to_dict(self) -> dict:
        return {k: getattr(self, k).to_dict() for k in ("G4", "G4_connected", "I_dk", "I_IB")} | {"route": self.route.value}


def assemble_four_point_decomposition(H: HTensorEstimates, cfg: EnsembleConfig) -> FourPointDecomposition:
    """Finite-width and independence-breaking parts of the connected four-point function.

    For ``N_h`` heads each head contributes with ``sigma_z^2 -> sigma_z^2/N_h``
    and ``gamma_z4 -> gamma_z4/N_h^2``, so both single-head parts carry an
    overall ``1/N_h``.  Pairs of distinct heads add
    ``sigma_z^4 (1 - 1/N_h) sum (Hxh - H2 H2)`` to the independence-breaking
    part; it is nonzero only when the heads share random embedding features.
    """
    route, dk, Nh = H.route, cfg.d_k, cfg.N_h
    s4, g4 = cfg.sigma_z**4, cfg.gamma_z4_resolved
    h = lambda m, name: _h_value(m, route, name)  # noqa: E731

    def pair_products(m):
        return sum(h(m, f"H2_{p}") * h(m, f"H2_{q}") for p, q in PAIRINGS)

    def i_dk(m):
        return (g4 * h(m, "Hiiii") - s4 * pair_products(m)) / (Nh * dk)

    def i_ib(m):
        brackets = sum(h(m, name) - h(m, f"H2_{p}") * h(m, f"H2_{q}")
                       for name, (p, q) in zip(("Hiijj", "Hijij", "Hijji"), PAIRINGS))
        cross = sum(h(m, f"Hxh{p}_{q}") - h(m, f"H2_{p}") * h(m, f"H2_{q}") for p, q in PAIRINGS)
        return _ib_prefactor(cfg) * brackets + _cross_head_prefactor(cfg) * cross

    def full(m):
        mixed = h(m, "Hiijj") + h(m, "Hijij") + h(m, "Hijji")
        cross = sum(h(m, f"Hxh{p}_{q}") for p, q in PAIRINGS)
        return (g4 * h(m, "Hiiii") / (Nh * dk) + s4 * (1 - 1 / dk) / Nh * mixed
                + s4 * (1 - 1 / Nh) * cross)

    t = H.table
    return FourPointDecomposition(
        t.estimate(full), t.estimate(lambda m: i_dk(m) + i_ib(m)), t.estimate(i_dk), t.estimate(i_ib), route,
    )


# ---------------------------------------------------------------- one-pass analysis

@dataclass(frozen=True)
class FourPointAnalysis:
    """Every four-point quantity from one shared set of parameter draws."""

    G2: CorrelatorEstimate
    G2_conditional: CorrelatorEstimate
    G4: CorrelatorEstimate
    G4_connected: CorrelatorEstimate
    raw: FourPointDecomposition
    conditional: FourPointDecomposition
    ib: IBCovariances
    H_raw: HTensorEstimates = field(repr=False)
    H_conditional: HTensorEstimates = field(repr=False)

    @property
    def decomposition_sigma(self) -> float:
        """Raw ``G4_c`` vs ``I_dk + I_IB`` (H-tensor route), combined-stderr units."""
        return combined_sigma(self.G4_connected, self.raw.G4_connected)

    @property
    def ib_route_sigma(self) -> float:
        """``I_IB`` covariance route vs H-tensor route, combined-stderr units."""
        return combined_sigma(self.ib.I_IB, self.raw.I_IB)


def four_point_analysis(points, cfg: EnsembleConfig, n_samples: int = 1_000_000, n_batches: int = 100,
                        stream: Optional[RngStream] = None, threads: int = 1) -> FourPointAnalysis:
    pts = _points(points, cfg, 4)

    def stat(fb):
        return _phi_stats(fb) | _head_tensor_stats(fb) | _conditional_stats(fb)

    table = _table(cfg, pts, n_samples, n_batches, stream, stat, threads)
    H_raw = _h_from_table(table, Route.RAW_MC)
    H_cond = _h_from_table(table, Route.CONDITIONAL)
    ib = _ib_from_table(table, cfg)
    if _x_is_deterministic(cfg):
        zero = CorrelatorEstimate(0.0, 0.0, n_samples, table.n_batches)
        ib = IBCovariances(zero, zero, zero, zero, zero, table)
    s2 = cfg.sigma_z**2
    return FourPointAnalysis(
        G2=table.estimate(lambda m: m["phi12"]),
        G2_conditional=table.estimate(lambda m: s2 * m["X12"]),
        G4=table.estimate(lambda m: m["phi1234"]),
        G4_connected=table.estimate(_g4c),
        raw=assemble_four_point_decomposition(H_raw, cfg),
        conditional=assemble_four_point_decomposition(H_cond, cfg),
        ib=ib,
        H_raw=H_raw,
        H_conditional=H_cond,
    )
