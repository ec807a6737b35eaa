"""Command-line entry point.

A run is described by one JSON document::

    {"command": "estimate", "seed": 7, "ensemble": {...}, "points": [...],
     "estimate": {...}, "formats": ["csv", "json"]}

Every output file carries the resolved configuration, and the payload
depends only on that configuration: no timestamps, no dependence on the
thread count.  Exit status is 0 on success, 2 for invalid configuration
and 3 for failures while running.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .embedding import EmbeddingKind, EmbeddingSpec
from .ensembles import AttentionMode, ConfigError, EnsembleConfig
from .estimators import (
    estimate_g2_conditional,
    estimate_g4_connected,
    estimate_gn,
    four_point_analysis,
)
from .experiments import (
    SweepParameter,
    SweepSpec,
    decoupled_alpha_control,
    default_context,
    invariance_probe,
    random_rotations,
    score_power_sweep,
    sweep_heads,
    sweep_width,
)
from .kernels import (
    KERNEL_TOL,
    KernelSpec,
    PropagatorTarget,
    cosnet_kernel_closed_form,
    free_propagator_target,
    kernel_quadrature,
    match_profile_to_propagator,
)
from .rng import RngStream

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
COMMANDS = ("estimate", "sweep", "kernel-check", "invariance", "report")
FORMATS = ("csv", "json")

_TOP_KEYS = {"command", "seed", "ensemble", "points", "estimate", "sweep", "kernel", "invariance", "report",
             "formats", "output_dir"}
_SECTION_KEYS = {
    "estimate": {"quantity", "n_samples", "n_batches", "separations", "direction", "target", "match_profile"},
    "sweep": {"parameter", "grid", "points", "samples_per_cell", "batches", "control"},
    "kernel-check": {"target", "separations", "sigma_z", "sigma_V"},
    "invariance": {"shifts", "rotations", "pairs", "n_samples", "n_batches"},
    "report": {"sources"},
}
_SECTION_OF = {"kernel-check": "kernel"}
_QUANTITIES = ("g2_separation", "correlator", "g4_connected", "four_point")


@dataclass(frozen=True)
class RunConfig:
    command: str
    ensemble: EnsembleConfig
    points: Optional[np.ndarray]
    section: dict
    output_dir: Path
    formats: tuple = FORMATS
    resolved: dict = field(default_factory=dict, compare=False)

    @property
    def seed(self) -> int:
        return self.ensemble.seed


def _strict(data, allowed, where: str) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    return dict(data)


def _target(data) -> PropagatorTarget:
    t = _strict(data, {"m", "d", "cutoff"}, "target")
    cutoff = t.get("cutoff")
    try:
        return PropagatorTarget(float(t["m"]), int(t["d"]), math.inf if cutoff is None else float(cutoff))
    except KeyError as exc:
        raise ConfigError(f"target needs {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _target_dict(t: PropagatorTarget) -> dict:
    return {"m": t.m, "d": t.d, "cutoff": None if math.isinf(t.cutoff) else t.cutoff}


def parse_run_config(data: dict, seed: Optional[int] = None, output_dir: Optional[str] = None) -> RunConfig:
    """Validate a raw config document; every problem raises :class:`ConfigError`."""
    data = _strict(data, _TOP_KEYS, "config")
    command = data.get("command")
    if command not in COMMANDS:
        raise ConfigError(f"command must be one of {list(COMMANDS)}, got {command!r}")
    if seed is None:
        seed = data.get("seed")
    if seed is None:
        raise ConfigError("a seed is mandatory (config 'seed' or --seed)")
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    formats = tuple(data.get("formats", FORMATS))
    if not formats or any(f not in FORMATS for f in formats):
        raise ConfigError(f"formats must be a non-empty subset of {list(FORMATS)}")

    ens = _strict(data.get("ensemble", {}), {f for f in EnsembleConfig.__dataclass_fields__ if f != "seed"},
                  "ensemble")
    key = _SECTION_OF.get(command, command)
    section = _strict(data.get(key, {}), _SECTION_KEYS[command], key)
    ens["seed"] = seed
    mode = ens.get("attention_mode", AttentionMode.SINGLE_TOKEN.value)
    if mode == AttentionMode.FIXED_CONTEXT.value and not ens.get("context_points"):
        ens["context_points"] = default_context(int(ens.get("d", 2)), 8, seed).tolist()

    if command == "estimate" and section.get("match_profile"):
        if "target" not in section:
            raise ConfigError("match_profile needs a target")
        target = _target(section["target"])
        emb = ens.get("embedding", {})
        token_dim = emb.get("token_dim") if isinstance(emb, dict) else None
        profile = match_profile_to_propagator(target, ens.get("sigma_z", 1.0), ens.get("sigma_V", 1.0))
        ens["embedding"] = EmbeddingSpec.cosnet(profile, token_dim).to_dict()
    cfg = EnsembleConfig.from_dict(ens)

    points = data.get("points")
    if points is not None:
        try:
            points = np.asarray(points, dtype=float).reshape(-1, cfg.d)
        except ValueError:
            raise ConfigError(f"points must be a list of {cfg.d}-vectors") from None

    _check_section(command, section, cfg, points)
    out = Path(output_dir if output_dir is not None else data.get("output_dir", "results"))
    resolved = {
        "command": command,
        "seed": seed,
        "ensemble": cfg.to_dict(),
        "points": None if points is None else points.tolist(),
        key: section,
        "formats": list(formats),
    }
    return RunConfig(command, cfg, points, section, out, formats, resolved)


def _positive_int(section, key, default):
    v = section.get(key, default)
    if isinstance(v, bool) or not isinstance(v, int) or v < 1:
        raise ConfigError(f"{key} must be a positive integer")
    return v


def _check_section(command: str, s: dict, cfg: EnsembleConfig, points) -> None:
    if command == "estimate":
        q = s.setdefault("quantity", "g2_separation")
        if q not in _QUANTITIES:
            raise ConfigError(f"estimate.quantity must be one of {list(_QUANTITIES)}")
        two_point = q in ("g2_separation", "correlator")
        s["n_samples"] = _positive_int(s, "n_samples", 100_000 if two_point else 1_000_000)
        s["n_batches"] = _positive_int(s, "n_batches", 50 if two_point else 100)
        if s["n_batches"] < 2 or s["n_samples"] % s["n_batches"] or s["n_samples"] < s["n_batches"]:
            raise ConfigError("n_samples must split evenly into n_batches >= 2")
        if q == "g2_separation":
            if not s.get("separations"):
                raise ConfigError("g2_separation needs a non-empty 'separations' list")
            s["separations"] = [float(r) for r in s["separations"]]
            direction = np.asarray(s.get("direction", np.eye(cfg.d)[0]), dtype=float)
            if direction.shape != (cfg.d,) or not np.linalg.norm(direction) > 0:
                raise ConfigError("direction must be a non-zero d-vector")
            s["direction"] = (direction / np.linalg.norm(direction)).tolist()
            if "target" in s:
                s["target"] = _target_dict(_target(s["target"]))
        elif points is None or (q != "correlator" and len(points) != 4):
            raise ConfigError(f"{q} needs {'points' if q == 'correlator' else 'exactly 4 points'}")
    elif command == "sweep":
        pts = s.get("points", None if points is None else points.tolist())
        if pts is None:
            raise ConfigError("sweep needs 4 points (sweep.points or top-level points)")
        control = s.setdefault("control", "shared")
        if control not in ("shared", "decoupled"):
            raise ConfigError("sweep.control must be 'shared' or 'decoupled'")
        try:
            spec = SweepSpec(cfg, s.get("parameter", "width_dk"), tuple(s.get("grid", ())), pts,
                             _positive_int(s, "samples_per_cell", 1_000_000), _positive_int(s, "batches", 100))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid sweep: {exc}") from None
        if control == "decoupled" and spec.parameter is not SweepParameter.WIDTH_DK:
            raise ConfigError("the decoupled control is a width sweep")
        s.update(spec.to_dict())
    elif command == "kernel-check":
        if "target" in s:
            s["target"] = _target_dict(_target(s["target"]))
        elif cfg.embedding.kind is not EmbeddingKind.COSNET:
            raise ConfigError("kernel-check needs a target or a cos-net ensemble profile")
        seps = s.get("separations")
        if not seps:
            raise ConfigError("kernel-check needs a non-empty 'separations' list")
        s["separations"] = [float(r) for r in seps]
        s.setdefault("sigma_z", cfg.sigma_z)
        s.setdefault("sigma_V", cfg.sigma_V)
    elif command == "invariance":
        if cfg.embedding.kind is not EmbeddingKind.COSNET:
            raise ConfigError("invariance probes need a cos-net embedding")
        if not s.get("pairs"):
            raise ConfigError("invariance needs a non-empty 'pairs' list")
        s["n_samples"] = _positive_int(s, "n_samples", 100_000)
        s["n_batches"] = _positive_int(s, "n_batches", 50)
        for key in ("shifts", "rotations"):
            v = s.setdefault(key, 5)
            if not isinstance(v, (int, list)) or isinstance(v, bool):
                raise ConfigError(f"{key} must be a count or a list")
    elif command == "report":
        sources = s.get("sources")
        if not sources:
            raise ConfigError("report needs a non-empty 'sources' list of result directories")
        missing = [p for p in sources if not (Path(p) / "summary.json").is_file()]
        if missing:
            raise ConfigError(f"no summary.json in: {missing}")


# ---------------------------------------------------------------- commands

def _run_estimate(rc: RunConfig, threads: int):
    s, cfg = rc.section, rc.ensemble
    n, b = s["n_samples"], s["n_batches"]
    stream = RngStream(rc.seed).child("cli", "estimate")
    q = s["quantity"]
    if q == "g2_separation":
        direction = np.asarray(s["direction"])
        target = PropagatorTarget(s["target"]["m"], s["target"]["d"],
                                  s["target"]["cutoff"] or math.inf) if "target" in s else None
        rows, results = [], []
        origin = np.zeros(cfg.d)
        for k, r in enumerate(s["separations"]):
            est = estimate_g2_conditional(origin, r * direction, cfg, n, b, stream.child("r", k), threads)
            row = {"r": r, "g2_mean": est.mean, "g2_stderr": est.stderr}
            if target is not None:
                tv = free_propagator_target(abs(r), target)
                row.update(target=tv, sigma_units=est.sigmas_from(tv),
                           rel_error=abs(est.mean - tv) / abs(tv) if tv else math.inf)
            rows.append(row)
            results.append({"r": r, "g2": est.to_dict()})
        checks = {}
        if target is not None:
            checks["within_3_sigma"] = all(row["sigma_units"] < 3 for row in rows)
        return rows, {"estimates": results}, checks
    pts = rc.points
    if q == "correlator":
        est = estimate_gn(pts, cfg, n, b, stream, threads)
        return [{"quantity": f"G{len(pts)}", "mean": est.mean, "stderr": est.stderr}], {"G": est.to_dict()}, {}
    if q == "g4_connected":
        est = estimate_g4_connected(pts, cfg, n, b, stream, threads)
        return [{"quantity": "G4c", "mean": est.mean, "stderr": est.stderr}], {"G4_connected": est.to_dict()}, {}
    a = four_point_analysis(pts, cfg, n, b, stream, threads)
    named = {"G2": a.G2, "G2_conditional": a.G2_conditional, "G4": a.G4, "G4_connected": a.G4_connected,
             "I_dk": a.raw.I_dk, "I_IB": a.raw.I_IB, "I_IB_cov": a.ib.I_IB, "var_X12": a.ib.var_12,
             "I_dk_conditional": a.conditional.I_dk, "I_IB_conditional": a.conditional.I_IB}
    rows = [{"quantity": k, "mean": e.mean, "stderr": e.stderr} for k, e in named.items()]
    checks = {"decomposition": a.decomposition_sigma <= 3, "ib_routes": a.ib_route_sigma <= 3}
    return rows, {k: e.to_dict() for k, e in named.items()}, checks


def _run_sweep(rc: RunConfig, threads: int):
    s = rc.section
    spec = SweepSpec(rc.ensemble, s["parameter"], tuple(s["grid"]), s["points"], s["samples_per_cell"],
                     s["batches"])
    if spec.parameter is SweepParameter.SCORE_POWER:
        res = score_power_sweep(spec, threads)
    elif spec.parameter is SweepParameter.HEADS_NH:
        res = sweep_heads(spec, threads)
    elif s["control"] == "decoupled":
        res = decoupled_alpha_control(spec, threads)
    else:
        res = sweep_width(spec, threads)
    return res.rows(), res.to_dict(), dict(res.checks)


def _run_kernel_check(rc: RunConfig, threads: int):
    s = rc.section
    target = None
    if "target" in s:
        t = s["target"]
        target = PropagatorTarget(t["m"], t["d"], t["cutoff"] or math.inf)
        profile = match_profile_to_propagator(target, s["sigma_z"], s["sigma_V"])
        d = target.d
    else:
        profile, d = rc.ensemble.embedding.profile, rc.ensemble.d
    spec = KernelSpec(profile, s["sigma_z"], s["sigma_V"])
    rows, ok = [], True
    for r in s["separations"]:
        vec = np.zeros(d)
        vec[0] = r
        row = {"r": r, "kernel_quadrature": kernel_quadrature(vec, spec)}
        try:
            row["kernel_closed_form"] = cosnet_kernel_closed_form(vec, spec)
        except ValueError:
            row["kernel_closed_form"] = None
        if target is not None:
            row["target"] = free_propagator_target(abs(r), target)
            row["abs_diff"] = abs(row["kernel_quadrature"] - row["target"])
            ok &= row["abs_diff"] <= KERNEL_TOL
        rows.append(row)
    checks = {"matches_target": bool(ok)} if target is not None else {}
    return rows, {"profile": profile.to_dict()}, checks


def _run_invariance(rc: RunConfig, threads: int):
    s, cfg = rc.section, rc.ensemble
    stream = RngStream(rc.seed).child("cli", "invariance")
    shifts = s["shifts"]
    if isinstance(shifts, int):
        shifts = stream.child("shifts").generator().standard_normal((shifts, cfg.d)).tolist()
    rots = s["rotations"]
    if isinstance(rots, int):
        rots = [R.tolist() for R in random_rotations(cfg.d, rots, stream.child("rotations"))]
    rep = invariance_probe(cfg, shifts, rots, s["pairs"], s["n_samples"], s["n_batches"],
                           stream.child("probe"), threads)
    checks = {"translation": rep.translation_ok, "rotation": rep.rotation_ok, "odd_nullity": rep.odd_ok}
    return list(rep.rows), rep.to_dict(), checks


def _run_report(rc: RunConfig, threads: int):
    rows, runs = [], []
    for src in rc.section["sources"]:
        summary = json.loads((Path(src) / "summary.json").read_text(encoding="utf-8"))
        checks = summary.get("checks", {})
        for name, passed in sorted(checks.items()):
            rows.append({"source": str(src), "command": summary.get("command"), "check": name, "passed": passed})
        runs.append({"source": str(src), "command": summary.get("command"), "seed": summary.get("seed"),
                     "checks": checks})
    all_passed = all(r["passed"] for r in rows)
    return rows, {"runs": runs}, {"all_sources_passed": all_passed}


_RUNNERS = {
    "estimate": _run_estimate,
    "sweep": _run_sweep,
    "kernel-check": _run_kernel_check,
    "invariance": _run_invariance,
    "report": _run_report,
}


# ---------------------------------------------------------------- output

def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, Path):
        return str(v)
    return v


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _csv_text(rows: list, resolved: dict) -> str:
    buf = io.StringIO()
    buf.write("# resolved_config=" + json.dumps(_jsonable(resolved), sort_keys=True) + "\n")
    fields = []
    for row in rows:
        fields.extend(k for k in row if k not in fields)
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", restval="")
    w.writeheader()
    for row in rows:
        w.writerow({k: "" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                    for k, v in _jsonable(row).items()})
    return buf.getvalue()


def render_report(summary: dict) -> str:
    """Plain-text pass/fail listing of a run (and, for ``report``, of every source run)."""
    lines = [f"command: {summary['command']}", f"seed: {summary['seed']}", ""]
    for run in summary["results"].get("runs", []):
        lines.append(f"[{run['source']}] {run['command']} (seed {run['seed']})")
        for name, passed in sorted(run["checks"].items()):
            lines.append(f"  {'PASS' if passed else 'FAIL'}  {name}")
    for name, passed in sorted(summary.get("checks", {}).items()):
        lines.append(f"{'PASS' if passed else 'FAIL'}  {name}")
    return "\n".join(lines) + "\n"


def execute_config(rc: RunConfig, threads: int = 1) -> int:
    """Run one configured pipeline and write its artifacts; returns the exit status."""
    rows, results, checks = _RUNNERS[rc.command](rc, threads)
    summary = {"command": rc.command, "seed": rc.seed, "resolved_config": rc.resolved,
               "results": results, "checks": checks}
    rc.output_dir.mkdir(parents=True, exist_ok=True)
    (rc.output_dir / "resolved_config.json").write_text(dumps(rc.resolved), encoding="utf-8")
    if "csv" in rc.formats:
        (rc.output_dir / "results.csv").write_text(_csv_text(rows, rc.resolved), encoding="utf-8")
    if "json" in rc.formats:
        (rc.output_dir / "summary.json").write_text(dumps(summary), encoding="utf-8")
    if rc.command == "report":
        (rc.output_dir / "report.txt").write_text(render_report(summary), encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attention-qft", description="Monte Carlo correlators of attention-head fields.")
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    p.add_argument("--output", default=None, help="output directory (overrides output_dir)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        rc = parse_run_config(data, args.seed, args.output)
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return execute_config(rc, args.threads)
    except Exception as exc:  # noqa: BLE001 -- any failure while running maps to one status
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
