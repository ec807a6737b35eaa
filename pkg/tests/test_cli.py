import json

import pytest

from attention_qft.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main, parse_run_config
from attention_qft.ensembles import ConfigError

PROP = {
    "command": "estimate", "seed": 11,
    "ensemble": {"d": 1, "d_k": 2, "embedding": {"kind": "cosnet", "token_dim": 64}},
    "estimate": {"quantity": "g2_separation", "separations": [0, 0.5, 1, 2, 3],
                 "target": {"m": 1, "d": 1}, "match_profile": True, "n_samples": 20_000, "n_batches": 20},
}


def run(tmp_path, cfg, *extra, name="out"):
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / name
    return main(["--config", str(path), "--output", str(out), *extra]), out


def test_estimate_matched_propagator(tmp_path):
    code, out = run(tmp_path, PROP)
    assert code == EXIT_OK
    lines = (out / "results.csv").read_text().splitlines()
    assert lines[0].startswith("# resolved_config=")
    assert lines[1].split(",")[:5] == ["r", "g2_mean", "g2_stderr", "target", "sigma_units"]
    assert all(float(row.split(",")[4]) < 3 for row in lines[2:])
    summary = json.loads((out / "summary.json").read_text())
    assert summary["checks"]["within_3_sigma"]
    assert summary["resolved_config"]["ensemble"]["embedding"]["profile"]["law"] == "cauchy_1d"
    assert json.loads((out / "resolved_config.json").read_text())["seed"] == 11


def test_rerun_is_byte_identical_across_threads(tmp_path):
    _, a = run(tmp_path, PROP, "--threads", "1", name="a")
    _, b = run(tmp_path, PROP, "--threads", "3", name="b")
    for f in ("results.csv", "summary.json", "resolved_config.json"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_seed_flag_overrides(tmp_path):
    _, a = run(tmp_path, PROP, "--seed", "5", name="a")
    assert json.loads((a / "resolved_config.json").read_text())["seed"] == 5


def test_short_grid_is_config_error(tmp_path):
    cfg = {"command": "sweep", "seed": 1, "ensemble": {"attention_mode": "fixed_context"},
           "points": [[0, 0], [1, 0], [0, 1], [1, 1]], "sweep": {"grid": [4, 8]}}
    assert run(tmp_path, cfg)[0] == EXIT_CONFIG


@pytest.mark.parametrize("bad", [
    {"command": "estimate", "seed": 1, "ensemble": {"dk": 4}},
    {"command": "estimate", "seed": 1, "estimat": {}},
    {"command": "estimate"},
    {"command": "fly", "seed": 1},
    {"command": "estimate", "seed": 1, "ensemble": {"seed": 3}},
    {"command": "estimate", "seed": 1, "estimate": {"quantity": "g4_connected"}},
    {"command": "report", "seed": 1, "report": {"sources": ["/nonexistent"]}},
])
def test_invalid_configs_exit_2(tmp_path, bad):
    assert run(tmp_path, bad)[0] == EXIT_CONFIG


def test_missing_file_exit_2(tmp_path):
    assert main(["--config", str(tmp_path / "none.json")]) == EXIT_CONFIG


def test_runtime_failure_exit_3(tmp_path):
    # d = 3 target at r = 0 without cutoff is singular
    cfg = {"command": "kernel-check", "seed": 1, "ensemble": {"d": 1},
           "kernel": {"target": {"m": 1, "d": 1}, "separations": [0.5]}}
    assert run(tmp_path, cfg)[0] == EXIT_OK
    cfg["ensemble"] = {"d": 3, "embedding": {"kind": "cosnet", "profile": {"law": "gaussian_iso", "bandwidth": 1.0}}}
    cfg["kernel"] = {"target": {"m": 1, "d": 3}, "separations": [0.5]}
    assert run(tmp_path, cfg, name="x")[0] == EXIT_RUNTIME


def test_kernel_check_truncated(tmp_path):
    cfg = {"command": "kernel-check", "seed": 1,
           "kernel": {"target": {"m": 1, "d": 2, "cutoff": 10}, "separations": [0, 0.5, 1]}}
    code, out = run(tmp_path, cfg)
    assert code == EXIT_OK
    assert json.loads((out / "summary.json").read_text())["checks"]["matches_target"]


def test_sweep_and_report(tmp_path):
    sweep = {"command": "sweep", "seed": 2, "ensemble": {"d": 2, "attention_mode": "fixed_context"},
             "points": [[0.3, -0.2], [0.5, 0.8], [-0.7, 0.1], [0.2, -0.9]],
             "sweep": {"parameter": "heads_nh", "grid": [1, 2, 4], "samples_per_cell": 4000, "batches": 10}}
    code, out = run(tmp_path, sweep, name="sweep")
    assert code == EXIT_OK
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert len(resolved["ensemble"]["context_points"]) == 8
    report = {"command": "report", "seed": 0, "report": {"sources": [str(out)]}}
    code, rep = run(tmp_path, report, name="rep")
    assert code == EXIT_OK
    assert "head_additivity" in (rep / "report.txt").read_text()


def test_invariance_command(tmp_path):
    cfg = {"command": "invariance", "seed": 3,
           "ensemble": {"d": 1, "d_k": 2, "embedding": {"kind": "cosnet", "token_dim": 16,
                                                         "profile": {"law": "cauchy_1d", "mass": 1.0}}},
           "invariance": {"pairs": [[[0.0], [0.7]]], "shifts": 2, "rotations": 1, "n_samples": 5000,
                          "n_batches": 10}}
    code, out = run(tmp_path, cfg)
    assert code == EXIT_OK
    checks = json.loads((out / "summary.json").read_text())["checks"]
    assert set(checks) == {"translation", "rotation", "odd_nullity"}


def test_parse_requires_seed():
    with pytest.raises(ConfigError, match="seed"):
        parse_run_config({"command": "estimate"})
