"""Scaling sweeps, control ensembles, invariance probes and power-law fits.

Every sweep cell is a full one-pass four-point analysis with its own
independent stream, so cells can be rerun or reordered without changing
any other cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .embedding import EmbeddingKind
from .ensembles import EnsembleConfig
from .estimators import (
    CorrelatorEstimate,
    FourPointAnalysis,
    combined_sigma,
    estimate_g2_conditional,
    estimate_gn,
    four_point_analysis,
)
from .rng import RngStream

N_SIGMA = 3.0


class SweepParameter(str, Enum):
    WIDTH_DK = "width_dk"
    HEADS_NH = "heads_nh"
    # a width sweep repeated at both score exponents
    SCORE_POWER = "score_power"


class InsufficientCells(ValueError):
    """Too few significant cells to fit a power law."""


def default_context(d: int, n_points: int = 8, seed: int = 0) -> np.ndarray:
    """A frozen 'generic' context: ``n_points`` draws from a unit Gaussian cloud."""
    return RngStream(seed).child("context").generator().standard_normal((n_points, d))


@dataclass(frozen=True)
class SweepSpec:
    base_cfg: EnsembleConfig
    parameter: SweepParameter
    grid: tuple
    points: np.ndarray
    samples_per_cell: int = 1_000_000
    batches: int = 100

    def __post_init__(self):
        object.__setattr__(self, "parameter", SweepParameter(self.parameter))
        grid = tuple(int(v) for v in self.grid)
        if any(g != v for g, v in zip(grid, self.grid)):
            raise ValueError("sweep grid values must be integers (d_k or N_h)")
        if len(grid) < 3:
            raise ValueError(f"sweep grid needs at least 3 values, got {len(grid)}")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("sweep grid must be strictly increasing")
        if grid[0] < 1:
            raise ValueError("sweep grid values must be positive")
        if self.parameter is not SweepParameter.HEADS_NH and grid[0] < 2:
            raise ValueError("width sweeps need d_k >= 2")
        object.__setattr__(self, "grid", grid)
        pts = np.asarray(self.points, dtype=float).reshape(4, self.base_cfg.d)
        object.__setattr__(self, "points", pts)
        if self.samples_per_cell % self.batches or self.batches < 2:
            raise ValueError("samples_per_cell must split evenly into >= 2 batches")

    def cell_config(self, value: int) -> EnsembleConfig:
        if self.parameter is SweepParameter.HEADS_NH:
            return self.base_cfg.replace(N_h=value)
        return self.base_cfg.replace(d_k=value)

    def cell_stream(self, value: int, tag: str = "") -> RngStream:
        return RngStream(self.base_cfg.seed).child("sweep", self.parameter.value, tag, value)

    def replace(self, **changes) -> SweepSpec:
        kw = {k: getattr(self, k) for k in ("base_cfg", "parameter", "grid", "points", "samples_per_cell", "batches")}
        kw.update(changes)
        return SweepSpec(**kw)

    def to_dict(self) -> dict:
        return {
            "parameter": self.parameter.value,
            "grid": list(self.grid),
            "points": self.points.tolist(),
            "samples_per_cell": self.samples_per_cell,
            "batches": self.batches,
        }


@dataclass(frozen=True)
class PowerLawFit:
    slope: float
    intercept: float
    r_squared: float
    slope_stderr: float
    n_cells: int = 0

    def slope_in(self, lo: float, hi: float) -> bool:
        return lo <= self.slope <= hi

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "r_squared": self.r_squared,
                "slope_stderr": self.slope_stderr, "n_cells": self.n_cells}


def fit_power_law(xs: Sequence[float], ys: Sequence[float], stderrs: Optional[Sequence[float]] = None,
                  n_sigma: float = N_SIGMA) -> PowerLawFit:
    """Weighted straight-line fit of ``log|y|`` against ``log x``.

    With ``stderrs`` only cells with ``|y| > n_sigma * stderr`` enter, each
    weighted by its inverse relative error; without them the fit is unweighted.
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("xs and ys must be 1-d and of equal length")
    if np.any(x <= 0):
        raise ValueError("power-law abscissae must be positive")
    if stderrs is None:
        keep = y != 0
        w = np.ones(int(keep.sum()))
        weighted = False
    else:
        se = np.asarray(stderrs, dtype=float)
        keep = np.abs(y) > n_sigma * se
        rel = se[keep] / np.abs(y[keep])
        weighted = bool(np.all(rel > 0))
        w = 1.0 / rel if weighted else np.ones(int(keep.sum()))
    n = int(keep.sum())
    if n < 3:
        raise InsufficientCells(f"power-law fit needs >= 3 significant cells, have {n}")
    lx, ly = np.log(x[keep]), np.log(np.abs(y[keep]))
    if weighted:
        coef, cov = np.polyfit(lx, ly, 1, w=w, cov="unscaled")
    else:
        coef = np.polyfit(lx, ly, 1)
        resid = ly - np.polyval(coef, lx)
        A = np.vstack([lx, np.ones_like(lx)]).T
        s2 = float(resid @ resid) / (n - 2) if n > 2 else 0.0
        cov = s2 * np.linalg.pinv(A.T @ A)
    pred = np.polyval(coef, lx)
    w2 = w**2
    ybar = np.sum(w2 * ly) / np.sum(w2)
    ss_res = float(np.sum(w2 * (ly - pred) ** 2))
    ss_tot = float(np.sum(w2 * (ly - ybar) ** 2))
    scale = max(float(np.sum(w2 * ly**2)), 1.0)
    if ss_tot <= 1e-24 * scale:
        r2 = 1.0 if ss_res <= 1e-24 * scale else 0.0
    else:
        r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return PowerLawFit(float(coef[0]), float(coef[1]), r2, float(math.sqrt(max(cov[0, 0], 0.0))), n)


# ---------------------------------------------------------------- sweep cells

@dataclass(frozen=True)
class SweepCell:
    value: int
    analysis: FourPointAnalysis
    extra: dict = field(default_factory=dict)

    @property
    def G2(self) -> CorrelatorEstimate:
        return self.analysis.G2

    @property
    def G4_connected(self) -> CorrelatorEstimate:
        return self.analysis.G4_connected

    @property
    def I_dk(self) -> CorrelatorEstimate:
        return self.analysis.raw.I_dk

    @property
    def I_IB(self) -> CorrelatorEstimate:
        return self.analysis.raw.I_IB

    @property
    def var_X12(self) -> CorrelatorEstimate:
        return self.analysis.ib.var_12

    @property
    def checks(self) -> dict:
        a = self.analysis
        return {
            "decomposition": a.decomposition_sigma <= N_SIGMA,
            "ib_routes": a.ib_route_sigma <= N_SIGMA,
            "g2_routes": combined_sigma(a.G2, a.G2_conditional) <= N_SIGMA,
        }

    def row(self) -> dict:
        a = self.analysis
        out = {"value": self.value}
        named = {
            "G2": a.G2, "G2_conditional": a.G2_conditional, "G4c": a.G4_connected,
            "I_dk": a.raw.I_dk, "I_IB": a.raw.I_IB, "I_IB_cov": a.ib.I_IB,
            "I_dk_cond": a.conditional.I_dk, "var_X12": a.ib.var_12,
        }
        for name, est in named.items():
            out[f"{name}_mean"] = est.mean
            out[f"{name}_stderr"] = est.stderr
        out["decomposition_sigma"] = a.decomposition_sigma
        out["ib_route_sigma"] = a.ib_route_sigma
        for k, v in self.checks.items():
            out[f"{k}_ok"] = v
        for k, v in self.extra.items():
            out[k] = v
        return out


@dataclass(frozen=True)
class SweepResult:
    spec: SweepSpec
    cells: tuple
    fit: Optional[PowerLawFit] = None
    fit_error: Optional[str] = None
    checks: dict = field(default_factory=dict)
    label: str = ""

    def cell(self, value: int) -> SweepCell:
        for c in self.cells:
            if c.value == value:
                return c
        raise KeyError(value)

    def rows(self) -> list:
        return [dict({"sweep": self.label}, **c.row()) for c in self.cells]

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "spec": self.spec.to_dict(),
            "cells": [
                {"value": c.value, "G2": c.G2.to_dict(), "G4_connected": c.G4_connected.to_dict(),
                 "I_dk": c.I_dk.to_dict(), "I_IB": c.I_IB.to_dict(), "I_IB_cov": c.analysis.ib.I_IB.to_dict(),
                 "var_X12": c.var_X12.to_dict(), "checks": c.checks}
                for c in self.cells
            ],
            "fit": self.fit.to_dict() if self.fit else None,
            "fit_error": self.fit_error,
            "checks": dict(self.checks),
        }


def _run_cells(spec: SweepSpec, cfg_of, tag: str, threads: int) -> tuple:
    cells = []
    for v in spec.grid:
        a = four_point_analysis(spec.points, cfg_of(v), spec.samples_per_cell, spec.batches,
                                spec.cell_stream(v, tag), threads)
        cells.append(SweepCell(v, a))
    return tuple(cells)


def _pairwise_compatible(ests) -> bool:
    return all(combined_sigma(a, b) <= N_SIGMA for i, a in enumerate(ests) for b in ests[i + 1:])


def _g4_fit(spec: SweepSpec, cells):
    try:
        fit = fit_power_law(spec.grid, [c.G4_connected.mean for c in cells],
                            [c.G4_connected.stderr for c in cells])
        return fit, None
    except InsufficientCells as exc:
        return None, str(exc)


def _cell_checks(cells) -> dict:
    return {name: all(c.checks[name] for c in cells) for name in ("decomposition", "ib_routes", "g2_routes")}


def _require(spec: SweepSpec, *allowed: SweepParameter):
    if spec.parameter not in allowed:
        raise ValueError(f"sweep parameter {spec.parameter.value} is not valid here")


def sweep_width(spec: SweepSpec, threads: int = 1) -> SweepResult:
    """Four-point structure across head widths at fixed everything else."""
    _require(spec, SweepParameter.WIDTH_DK)
    cells = _run_cells(spec, spec.cell_config, "shared", threads)
    checks = _cell_checks(cells)
    checks["g2_width_independent"] = _pairwise_compatible([c.G2 for c in cells])
    checks["g4c_plateau"] = combined_sigma(cells[-1].G4_connected, cells[-2].G4_connected) <= N_SIGMA
    checks["g4c_null"] = all(c.G4_connected.significance <= N_SIGMA for c in cells)
    return SweepResult(spec, cells, checks=checks, label="width")


def sweep_heads(spec: SweepSpec, threads: int = 1) -> SweepResult:
    """``G4_c`` across head counts with a power-law fit and a head-additivity check."""
    _require(spec, SweepParameter.HEADS_NH)
    cells = _run_cells(spec, spec.cell_config, "heads", threads)
    fit, err = _g4_fit(spec, cells)
    checks = _cell_checks(cells)
    checks["g2_head_independent"] = _pairwise_compatible([c.G2 for c in cells])
    checks["slope_in_band"] = bool(fit and fit.slope_in(-1.3, -0.7))
    by = {c.value: c for c in cells}
    if 1 in by and 2 in by:
        one, two = by[1].G4_connected, by[2].G4_connected
        half = CorrelatorEstimate(one.mean / 2, one.stderr / 2, one.n_samples, one.n_batches)
        checks["head_additivity"] = combined_sigma(two, half) <= N_SIGMA
    first, last = cells[0].G4_connected, cells[-1].G4_connected
    if cells[0].value == 1 and first.significance >= 5:
        checks["monotone_suppression"] = abs(last.mean) * spec.grid[-1] / 2 <= abs(first.mean)
    return SweepResult(spec, cells, fit, err, checks, label="heads")


def decoupled_alpha_control(spec: SweepSpec, threads: int = 1, compare_shared: bool = True) -> SweepResult:
    """Width sweep where every output coordinate draws its own query/key pair.

    Independence breaking then vanishes, so ``G4_c`` is pure finite-width
    and should fall as ``1/d_k``.  With ``compare_shared`` each cell's
    ``G2`` is compared with the shared-attention ensemble.
    """
    _require(spec, SweepParameter.WIDTH_DK)
    if spec.base_cfg.attention_mode.value == "single_token":
        raise ValueError("the decoupled control needs an attention mode that mixes tokens")
    cfg_of = lambda v: spec.cell_config(v).replace(decoupled_alpha=True)  # noqa: E731
    cells = list(_run_cells(spec, cfg_of, "decoupled", threads))
    if compare_shared:
        for i, c in enumerate(cells):
            p = spec.points
            shared = estimate_g2_conditional(p[0], p[1], spec.cell_config(c.value), spec.samples_per_cell,
                                             spec.batches, spec.cell_stream(c.value, "shared_g2"), threads)
            sigma = combined_sigma(c.analysis.G2_conditional, shared)
            cells[i] = SweepCell(c.value, c.analysis, {"G2_shared_mean": shared.mean,
                                                       "G2_shared_stderr": shared.stderr,
                                                       "G2_shared_sigma": sigma})
    cells = tuple(cells)
    fit, err = _g4_fit(spec, cells)
    checks = _cell_checks(cells)
    checks["slope_in_band"] = bool(fit and fit.slope_in(-1.3, -0.7))
    checks["ib_null"] = all(c.I_IB.significance <= N_SIGMA and c.analysis.ib.I_IB.significance <= N_SIGMA
                            for c in cells)
    if compare_shared:
        checks["g2_matches_shared"] = all(c.extra["G2_shared_sigma"] <= N_SIGMA for c in cells)
    return SweepResult(spec, cells, fit, err, checks, label="decoupled")


def control_separation(shared: SweepResult, decoupled: SweepResult) -> bool:
    """Shared attention shows ``I_IB`` at the largest width; the decoupled control does not."""
    s, c = shared.cells[-1], decoupled.cells[-1]
    return s.I_IB.significance >= N_SIGMA and c.I_IB.significance <= N_SIGMA


@dataclass(frozen=True)
class ScorePowerResult:
    sweeps: dict  # score power -> SweepResult
    checks: dict

    def rows(self) -> list:
        return [r for sw in self.sweeps.values() for r in sw.rows()]

    def to_dict(self) -> dict:
        return {"sweeps": {str(p): sw.to_dict() for p, sw in self.sweeps.items()}, "checks": dict(self.checks)}


def score_power_sweep(spec: SweepSpec, threads: int = 1) -> ScorePowerResult:
    """Width sweeps at score exponents 0.5 and 1.0.

    The check is a decreasing ``|G4_c|`` trend at exponent 1.0: the largest
    width lies below the smallest by more than ``3`` combined standard errors.
    """
    _require(spec, SweepParameter.SCORE_POWER)
    sweeps = {}
    for power in (0.5, 1.0):
        base = spec.base_cfg.replace(score_power=power)
        sub = spec.replace(base_cfg=base, parameter=SweepParameter.WIDTH_DK)
        cells = _run_cells(sub, sub.cell_config, f"power{power}", threads)
        sweeps[power] = SweepResult(sub, cells, checks=_cell_checks(cells), label=f"score_power={power}")
    cells = sweeps[1.0].cells
    first, last = cells[0].G4_connected, cells[-1].G4_connected
    gap = abs(first.mean) - abs(last.mean)
    checks = {"decreasing_at_power_1": gap > N_SIGMA * math.hypot(first.stderr, last.stderr)}
    return ScorePowerResult(sweeps, checks)


# ---------------------------------------------------------------- invariance

@dataclass(frozen=True)
class InvarianceReport:
    translation_sigma: float
    rotation_sigma: float
    odd_sigma: float
    isotropic: bool
    rows: tuple

    @property
    def translation_ok(self) -> bool:
        return self.translation_sigma <= N_SIGMA

    @property
    def rotation_ok(self) -> bool:
        return self.rotation_sigma <= N_SIGMA

    @property
    def odd_ok(self) -> bool:
        return self.odd_sigma < N_SIGMA

    def to_dict(self) -> dict:
        return {
            "translation_sigma": self.translation_sigma, "rotation_sigma": self.rotation_sigma,
            "odd_sigma": self.odd_sigma, "isotropic": self.isotropic,
            "translation_ok": self.translation_ok, "rotation_ok": self.rotation_ok, "odd_ok": self.odd_ok,
        }


def random_rotations(d: int, n: int, stream: RngStream) -> list:
    """``n`` Haar-random orthogonal matrices (reflections when ``d = 1``)."""
    from scipy.stats import ortho_group

    rng = stream.generator()
    if d == 1:
        return [np.array([[-1.0]]) for _ in range(n)]
    return [ortho_group.rvs(d, random_state=rng) for _ in range(n)]


def invariance_probe(cfg: EnsembleConfig, shifts, rotations, pairs, n_samples: int = 100_000,
                     n_batches: int = 50, stream: Optional[RngStream] = None,
                     threads: int = 1) -> InvarianceReport:
    """Two-point function at moved pairs versus the original pairs.

    Every estimate uses its own stream, so the discrepancies are between
    independent estimates.  Odd correlators are checked on the first pair.
    """
    if cfg.embedding.kind is not EmbeddingKind.COSNET:
        raise ValueError("invariance probes need a cos-net embedding")
    base = stream if stream is not None else RngStream(cfg.seed).child("invariance")
    pairs = [tuple(np.asarray(p, dtype=float).reshape(2, cfg.d)) for p in pairs]
    g2 = lambda a, b, *tag: estimate_g2_conditional(a, b, cfg, n_samples, n_batches, base.child(*tag), threads)  # noqa: E731
    rows = []
    t_max = r_max = 0.0
    for k, (x1, x2) in enumerate(pairs):
        ref = g2(x1, x2, "pair", k)
        for j, a in enumerate(shifts):
            a = np.asarray(a, dtype=float).reshape(cfg.d)
            moved = g2(x1 + a, x2 + a, "shift", k, j)
            s = combined_sigma(ref, moved)
            t_max = max(t_max, s)
            rows.append({"kind": "translation", "pair": k, "index": j, "ref_mean": ref.mean,
                         "ref_stderr": ref.stderr, "moved_mean": moved.mean, "moved_stderr": moved.stderr,
                         "sigma": s})
        for j, R in enumerate(rotations):
            R = np.asarray(R, dtype=float).reshape(cfg.d, cfg.d)
            moved = g2(R @ x1, R @ x2, "rotate", k, j)
            s = combined_sigma(ref, moved)
            r_max = max(r_max, s)
            rows.append({"kind": "rotation", "pair": k, "index": j, "ref_mean": ref.mean,
                         "ref_stderr": ref.stderr, "moved_mean": moved.mean, "moved_stderr": moved.stderr,
                         "sigma": s})
    x1, x2 = pairs[0]
    odd = max(
        estimate_gn([x1], cfg, n_samples, n_batches, base.child("odd", 1), threads).significance,
        estimate_gn([x1, x2, x1 + x2], cfg, n_samples, n_batches, base.child("odd", 3), threads).significance,
    )
    return InvarianceReport(t_max, r_max, odd, cfg.embedding.profile.is_isotropic, tuple(rows))
