import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from rigidttt import arrays, cli, config, simharness
from rigidttt.config import ConfigError, RunConfig
from rigidttt.motion import MotionOperator, MotionTrajectory

ROOT = Path(__file__).resolve().parents[1]

SMALL = {
    "data": {"shape": [32, 32], "d": 8, "bandwidth": 12.0},
    "solver": {"altopt": {"max_iters": 3}},
    "theory": {"verify": {"n": 64, "k": 32, "d": 4, "b": 2, "draws": 3, "n_random": 2},
               "landscape": {"n": 128, "k": 64, "d": 8, "b": 3, "draws": 2, "half_width": 4}},
    "sweep": {"kind": "nsplits", "levels": [[1, 5]], "seeds": 1, "n_splits": [2, 4]},
}


def write_config(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def level(doc, n, m):
    doc = json.loads(json.dumps(doc))
    doc["motion"] = {"n_events": n, "m_max": m}
    return doc


# ------------------------------------------------------------------ configuration


def test_config_round_trip_and_defaults():
    cfg = config.default_config()
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert RunConfig.from_json(cfg.to_json()) == cfg
    assert cfg["data"]["shape"] == [64, 64] and cfg["ttt"]["dc_threshold"] == 0.575
    small = RunConfig.from_dict(SMALL)
    assert RunConfig.from_json(small.to_json()).to_dict() == small.to_dict()
    assert small.ttt_config().seed == 0 and small.with_seed(9).ttt_config().seed == 9


@pytest.mark.parametrize("doc", [
    {"colour": {}},
    {"data": {"shape": [8, 8], "bogus": 1}},
    {"data": {"d": "sixteen"}},
    {"data": {"d": 1.5}},
    {"motion": {"intra": 1}},
    {"mask": {"kind": "spiral"}},
    {"trajectory": {"order": "backwards"}},
    {"solver": {"final": "magic"}},
    {"data": {"shape": [8]}},
    {"ttt": {"phase1_lr": -1.0}},
    {"sweep": {"levels": [[1]]}},
    [],
])
def test_config_rejects_invalid_documents(doc):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(doc)


def test_config_rejects_malformed_json():
    with pytest.raises(ConfigError):
        RunConfig.from_json("{not json")


def test_integers_are_accepted_for_float_fields():
    cfg = RunConfig.from_dict({"data": {"bandwidth": 20}})
    assert cfg["data"]["bandwidth"] == 20.0 and isinstance(cfg["data"]["bandwidth"], float)


def test_shipped_schema_matches_defaults():
    shipped = json.loads((ROOT / "docs" / "config.schema.json").read_text())
    assert shipped == json.loads(json.dumps(config.json_schema()))
    assert shipped["properties"]["mask"]["properties"]["kind"]["enum"] == list(config._CHOICES[("mask", "kind")])


# ------------------------------------------------------------------ pipeline


@pytest.fixture(scope="module")
def sim_dirs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg_free = write_config(base, level(SMALL, 0, 0), "free.json")
    cfg_mot = write_config(base, level(SMALL, 1, 2), "motion.json")
    assert cli.run(["simulate", "--config", cfg_free, "--out", str(base / "free")]) == 0
    assert cli.run(["simulate", "--config", cfg_mot, "--out", str(base / "motion")]) == 0
    return base, cfg_free, cfg_mot


def test_simulate_outputs_and_manifest(sim_dirs):
    base, _, _ = sim_dirs
    d = base / "motion"
    man = json.loads((d / "manifest.json").read_text())
    assert man["command"] == "simulate" and man["seed"] == 0
    for name in ("phantom.mttt", "basis.mttt", "coils.mttt", "mask.mttt", "trajectory.json",
                 "true_trajectory.json", "motion_true.csv", "kspace.mttt", "config.json"):
        assert name in man["files"], name
    assert (d / "motion_true.csv").read_text().splitlines()[0].startswith("state,")
    mask = arrays.read_array(d / "mask.mttt")
    assert set(np.unique(mask.real)) == {0.0, 1.0}
    echoed = RunConfig.load(d / "config.json")
    assert echoed.severity().n_events == 1
    cli.verify_manifest(d)


def test_motion_free_kspace_is_plain_forward_model(sim_dirs):
    base, cfg, _ = sim_dirs
    run = RunConfig.load(cfg)
    p = simharness.build_problem(run.experiment_spec(), run.severity(), 0)
    y = arrays.read_array(base / "free" / "kspace.mttt")
    free = p.shot_op.forward(p.x, p.shot_op.zero_motion())
    np.testing.assert_array_equal(y, free.astype(np.complex64))


def test_rerun_gives_identical_hashes(sim_dirs, tmp_path):
    base, _, cfg_mot = sim_dirs
    assert cli.run(["simulate", "--config", cfg_mot, "--out", str(tmp_path / "again")]) == 0
    a = json.loads((base / "motion" / "manifest.json").read_text())["files"]
    b = json.loads((tmp_path / "again" / "manifest.json").read_text())["files"]
    assert a == b
    assert cli.run(["simulate", "--config", cfg_mot, "--seed", "5", "--out", str(tmp_path / "other")]) == 0
    c = json.loads((tmp_path / "other" / "manifest.json").read_text())["files"]
    assert c["kspace.mttt"] != a["kspace.mttt"]


def test_missing_output_parent_is_io_error(sim_dirs, tmp_path):
    _, cfg, _ = sim_dirs
    assert cli.run(["simulate", "--config", cfg, "--out", str(tmp_path / "no" / "such" / "dir")]) == 3


def test_config_errors_exit_two_and_missing_config_exits_three(tmp_path):
    bad = write_config(tmp_path, {"data": {"nonsense": 1}})
    assert cli.run(["simulate", "--config", bad, "--out", str(tmp_path / "x")]) == 2
    assert cli.run(["simulate", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "y")]) == 3
    assert cli.run(["simulate", "--seed", "-1", "--out", str(tmp_path / "z")]) == 2


def test_estimate_ttt_on_motion_free_data(tmp_path):
    cfg = write_config(tmp_path, {"motion": {"n_events": 0, "m_max": 0.0}})
    assert cli.run(["simulate", "--config", cfg, "--out", str(tmp_path / "sim")]) == 0
    out = tmp_path / "est"
    assert cli.run(["estimate", "--config", cfg, "--in", str(tmp_path / "sim"), "--out", str(out)]) == 0
    m = MotionTrajectory.from_csv(out / "motion_est.csv")
    assert np.max(np.abs(m.params)) <= 0.25
    trace = (out / "trace.csv").read_text().splitlines()
    assert trace[0] == "iteration,phase,loss" and len(trace) > 1
    assert (out / "dc_report.csv").read_text().splitlines()[0] == "state,loss,flagged"
    man = json.loads((out / "manifest.json").read_text())
    assert man["inputs"]["kspace_sha256"] == cli.verify_manifest(tmp_path / "sim")["files"]["kspace.mttt"]


def test_estimate_altopt_routing(sim_dirs):
    base, cfg, _ = sim_dirs
    out = base / "est_alt"
    assert cli.run(["estimate", "--config", cfg, "--in", str(base / "motion"), "--out", str(out),
                    "--method", "altopt"]) == 0
    info = json.loads((out / "estimate.json").read_text())
    assert info["method"] == "altopt"
    phases = {line.split(",")[1] for line in (out / "trace.csv").read_text().splitlines()[1:]}
    assert phases == {"altopt"}
    assert len((out / "trace.csv").read_text().splitlines()) == 1 + 3


def test_tampered_input_is_rejected(sim_dirs, tmp_path):
    base, cfg, _ = sim_dirs
    import shutil

    copy = tmp_path / "sim"
    shutil.copytree(base / "motion", copy)
    with open(copy / "kspace.mttt", "r+b") as fh:
        fh.seek(-1, 2)
        last = fh.read(1)
        fh.seek(-1, 2)
        fh.write(bytes([last[0] ^ 0xFF]))
    assert cli.run(["estimate", "--config", cfg, "--in", str(copy), "--out", str(tmp_path / "e")]) == 2
    (copy / "manifest.json").unlink()
    assert cli.run(["estimate", "--config", cfg, "--in", str(copy), "--out", str(tmp_path / "f")]) == 3


def test_reconstruct_known_equals_no_correction_without_motion(sim_dirs):
    base, cfg, _ = sim_dirs
    for flag in ("--known-motion", "--no-correction"):
        out = base / f"rec{flag}"
        assert cli.run(["reconstruct", "--config", cfg, "--in", str(base / "free"), "--out", str(out), flag]) == 0
    known = json.loads((base / "rec--known-motion" / "metrics.json").read_text())
    none = json.loads((base / "rec--no-correction" / "metrics.json").read_text())
    assert known["mode"] == "known" and none["mode"] == "none"
    assert known["psnr"] == none["psnr"]


def test_reconstruct_flags_are_mutually_exclusive(sim_dirs, tmp_path):
    base, cfg, _ = sim_dirs
    with pytest.raises(SystemExit) as err:
        cli.run(["reconstruct", "--config", cfg, "--in", str(base / "free"), "--out", str(tmp_path / "r"),
                 "--known-motion", "--no-correction"])
    assert err.value.code == 2
    with pytest.raises(cli.CLIError) as err:
        cli.cmd_reconstruct(RunConfig.load(cfg), base / "free", tmp_path / "r2", known_motion=True,
                            no_correction=True)
    assert err.value.code == 2


def test_threshold_flag_is_reported(sim_dirs):
    base, cfg, _ = sim_dirs
    est = base / "est_motion"
    assert cli.run(["estimate", "--config", cfg, "--in", str(base / "motion"), "--out", str(est)]) == 0
    for extra, expect in (([], False), (["--threshold"], True)):
        out = base / f"rec_th{expect}"
        argv = ["reconstruct", "--config", cfg, "--in", str(base / "motion"), "--estimate", str(est),
                "--out", str(out)] + extra
        assert cli.run(argv) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["threshold"] is expect and metrics["mode"] == "estimated"
        assert metrics["solver"] == "l1" and np.isfinite(metrics["psnr"])


def test_reconstruct_is_bit_reproducible(sim_dirs, tmp_path):
    base, cfg, _ = sim_dirs
    for name in ("a", "b"):
        assert cli.run(["reconstruct", "--config", cfg, "--in", str(base / "motion"), "--out", str(tmp_path / name),
                        "--known-motion"]) == 0
    assert (tmp_path / "a" / "recon.mttt").read_bytes() == (tmp_path / "b" / "recon.mttt").read_bytes()


def test_baseline_writes_results(sim_dirs):
    base, _, _ = sim_dirs
    doc = level(SMALL, 1, 2)
    doc["sweep"] = {"methods": ["known", "none"]}
    cfg = write_config(base, doc, "baseline.json")
    out = base / "baseline"
    assert cli.run(["baseline", "--config", cfg, "--in", str(base / "motion"), "--out", str(out)]) == 0
    header, rows = arrays.read_csv(out / "results.csv")
    assert header == ["level", "method", "seed", "psnr", "motion_mae", "flagged_count"]
    assert [r[:2] for r in rows] == [["(1,2)", "known"], ["(1,2)", "none"]]


def test_theory_commands(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    assert cli.run(["theory", "verify", "--config", cfg, "--out", str(tmp_path / "v")]) == 0
    rep = json.loads((tmp_path / "v" / "verify.json").read_text())
    assert rep["draws"] == 3 and len(rep["per_draw"]) == 3
    for key in ("global_min_fraction", "bound_fraction", "random_greater_fraction"):
        assert 0.0 <= rep[key] <= 1.0
    assert cli.run(["theory", "landscape", "--config", cfg, "--out", str(tmp_path / "l")]) == 0
    lines = (tmp_path / "l" / "landscape.csv").read_text().splitlines()
    assert lines[0] == "m1,loss_a0,loss_a1,loss_a2" and len(lines) == 1 + 9
    rows = [list(map(float, line.split(","))) for line in lines[1:]]
    a0 = [r[1] for r in rows]
    assert rows[int(np.argmin(a0))][0] == 0
    with pytest.raises(SystemExit) as err:
        cli.run(["theory", "nonsense", "--out", str(tmp_path / "n")])
    assert err.value.code == 2
    with pytest.raises(cli.CLIError) as err:
        cli.cmd_theory(RunConfig.from_dict(SMALL), "nonsense", tmp_path / "n2")
    assert err.value.code == 2


def test_theory_verify_default_scale(tmp_path):
    assert cli.run(["theory", "verify", "--out", str(tmp_path / "v")]) == 0
    rep = json.loads((tmp_path / "v" / "verify.json").read_text())
    assert rep["draws"] == 50 and rep["global_min_fraction"] >= 0.95


def test_sweep_nsplits(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    assert cli.run(["sweep", "--config", cfg, "--out", str(tmp_path / "s")]) == 0
    lines = (tmp_path / "s" / "nsplits.csv").read_text().splitlines()
    assert lines[0].split(",")[:2] == ["level", "n_splits"] and len(lines) == 1 + 2


def test_module_entry_point_reports_version():
    out = subprocess.run([sys.executable, "-m", "rigidttt", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()
