"""Command-line pipeline: simulate -> estimate -> reconstruct, plus baselines,
theory-model experiments and parameter sweeps.

Every command takes ``--config`` (JSON, see :mod:`rigidttt.config`),
``--out`` (output directory; its parent must exist) and ``--seed``
(overrides ``data.seed``). The effective configuration is echoed to
``<out>/config.json`` and a ``manifest.json`` lists the SHA-256 of every
output file. Commands that read a previous stage verify its manifest.

Exit codes: 0 success, 2 configuration or usage error (including manifest
hash mismatches), 3 input/output error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, arrays, kspace, priors, simharness, solvers, theory, ttt
from .config import ConfigError, RunConfig
from .motion import MotionOperator, MotionTrajectory

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------ file plumbing


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Output:
    """Output directory that records every file it writes for the manifest."""

    def __init__(self, path, command: str, cfg: RunConfig):
        self.path = Path(path)
        try:
            self.path.mkdir(exist_ok=True)
        except OSError as exc:
            raise CLIError(f"cannot create output directory {self.path}: {exc}", EXIT_IO) from exc
        self.command = command
        self.cfg = cfg
        self.files = []
        self.text("config.json", cfg.to_json())

    def _done(self, name):
        if name not in self.files:
            self.files.append(name)
        return self.path / name

    def text(self, name, text: str):
        p = self.path / name
        with open(p, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
        self._done(name)

    def json(self, name, doc):
        self.text(name, json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def array(self, name, data, labels=()):
        arrays.write_array(data, self.path / name, axis_labels=labels)
        self._done(name)

    def csv(self, name, header, rows):
        self.text(name, arrays.csv_text(header, rows))

    def finish(self, inputs=None):
        doc = {
            "command": self.command,
            "version": __version__,
            "seed": self.cfg["data"]["seed"],
            "files": {n: _sha256(self.path / n) for n in sorted(self.files)},
        }
        if inputs:
            doc["inputs"] = inputs
        with open(self.path / "manifest.json", "w", encoding="utf-8") as fh:
            fh.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def verify_manifest(directory) -> dict:
    """Check every hash listed in ``<directory>/manifest.json``."""
    directory = Path(directory)
    path = directory / "manifest.json"
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CLIError(f"no manifest in {directory}", EXIT_IO) from exc
    except json.JSONDecodeError as exc:
        raise CLIError(f"malformed manifest {path}: {exc}", EXIT_CONFIG) from exc
    for name, digest in doc.get("files", {}).items():
        f = directory / name
        if not f.is_file():
            raise CLIError(f"{f} listed in the manifest is missing", EXIT_IO)
        if _sha256(f) != digest:
            raise CLIError(f"hash mismatch for {f}: manifest {digest[:12]}..., file {_sha256(f)[:12]}...",
                           EXIT_CONFIG)
    return doc


# ------------------------------------------------------------------ staged inputs


class Simulation:
    """Simulated acquisition reloaded from a ``simulate`` output directory."""

    def __init__(self, directory):
        d = Path(directory)
        self.dir = d
        self.manifest = verify_manifest(d)
        self.x = arrays.read_array(d / "phantom.mttt")
        self.basis = arrays.read_array(d / "basis.mttt").real
        self.coils = kspace.CoilSensitivities(arrays.read_array(d / "coils.mttt"))
        self.shot_traj = kspace.SamplingTrajectory.from_json((d / "trajectory.json").read_text(encoding="utf-8"))
        self.true_traj = kspace.SamplingTrajectory.from_json(
            (d / "true_trajectory.json").read_text(encoding="utf-8"))
        self.true_motion = MotionTrajectory.from_csv(d / "motion_true.csv")
        self.y = arrays.read_array(d / "kspace.mttt")
        self.shape = self.x.shape
        self.shot_op = MotionOperator(self.shape, self.coils, self.shot_traj)
        self.true_op = MotionOperator(self.shape, self.coils, self.true_traj)
        if self.y.shape != self.shot_op.sample_shape:
            raise CLIError(f"k-space shape {self.y.shape} does not match {self.shot_op.sample_shape}", EXIT_CONFIG)

    def inputs(self):
        return {"simulation": str(self.dir), "kspace_sha256": self.manifest["files"]["kspace.mttt"]}

    def prior(self, cfg: RunConfig) -> priors.Reconstructor:
        rc = cfg["reconstructor"]
        if rc["kind"] == "projector":
            samples = int(np.prod(self.shot_op.base.shape[:2]))
            return priors.subspace_projector(self.basis, 1, samples, self.shape)
        if rc["kind"] == "wavelet":
            return priors.wavelet_denoiser(rc["tau"], rc["levels"], self.shape)
        return priors.zf_identity()

    def problem(self, cfg: RunConfig) -> simharness.Problem:
        spec = cfg.experiment_spec()
        scenario = simharness.SimulatedScenario(self.true_motion, self.true_traj, None, [], cfg.severity(),
                                                cfg["data"]["seed"])
        return simharness.Problem(spec, cfg["data"]["seed"], self.x, self.basis, self.coils, self.shot_traj,
                                  scenario, self.y, self.true_op, self.shot_op, self.prior(cfg))


class Estimate:
    def __init__(self, directory):
        d = Path(directory)
        self.manifest = verify_manifest(d)
        self.motion = MotionTrajectory.from_csv(d / "motion_est.csv")
        self.traj = kspace.SamplingTrajectory.from_json((d / "est_trajectory.json").read_text(encoding="utf-8"))
        _, rows = arrays.read_csv(d / "dc_report.csv")
        self.flagged = [int(r[0]) for r in rows if r[2] == "true"]


# ------------------------------------------------------------------ commands


def cmd_simulate(cfg: RunConfig, out_dir) -> None:
    spec = cfg.experiment_spec()
    seed = cfg["data"]["seed"]
    problem = simharness.build_problem(spec, cfg.severity(), seed)
    out = Output(out_dir, "simulate", cfg)
    out.array("phantom.mttt", problem.x)
    out.array("basis.mttt", problem.basis, ("voxel", "component"))
    out.array("coils.mttt", problem.coils.maps)
    out.array("mask.mttt", problem.shot_traj.support_mask().astype(np.float32))
    out.text("trajectory.json", problem.shot_traj.to_json())
    out.text("true_trajectory.json", problem.scenario.trajectory.to_json())
    out.text("motion_true.csv", problem.scenario.motion.csv_text())
    out.text("shot_motion_true.csv", MotionTrajectory(problem.scenario.shot_motion, len(spec.shape)).csv_text())
    out.json("scenario.json", {"level": [cfg.severity().n_events, cfg.severity().m_max],
                               "intra_shots": [int(s) for s in problem.scenario.intra_shots],
                               "seed": seed})
    out.array("kspace.mttt", problem.y, ("coil", "line", "readout"))
    out.finish()


def _estimate_motion(sim: Simulation, cfg: RunConfig, method: str):
    prior = sim.prior(cfg)
    if method == "ttt":
        res = ttt.run_full(sim.y, sim.shot_op, prior, cfg.ttt_config())
        trace = [[r.iteration, r.phase, r.loss] for r in res.trace]
        return res.motion, res.trajectory, res.report, trace
    res = solvers.altopt(sim.y, sim.shot_op, cfg.altopt_config())
    report = ttt.dc_loss_per_state(sim.y, sim.shot_op, res.motion, prior, cfg["ttt"]["dc_threshold"])
    trace = [[i, "altopt", v] for i, v in enumerate(res.trace)]
    return res.motion, sim.shot_traj, report, trace


def cmd_estimate(cfg: RunConfig, in_dir, out_dir, method: str = "ttt") -> None:
    sim = Simulation(in_dir)
    motion, traj, report, trace = _estimate_motion(sim, cfg, method)
    if not np.all(np.isfinite(motion.params)):
        raise CLIError("motion estimate is not finite", EXIT_NUMERIC)
    out = Output(out_dir, "estimate", cfg)
    out.text("motion_est.csv", motion.csv_text())
    out.text("est_trajectory.json", traj.to_json())
    out.text("dc_report.csv", report.csv_text())
    out.csv("trace.csv", ["iteration", "phase", "loss"], trace)
    out.json("estimate.json", {"method": method, "num_states": motion.params.shape[0],
                               "flagged": report.flagged})
    out.finish(sim.inputs())


def cmd_reconstruct(cfg: RunConfig, in_dir, out_dir, estimate_dir=None, known_motion=False,
                    no_correction=False, threshold=False) -> None:
    if known_motion and no_correction:
        raise CLIError("--known-motion and --no-correction are mutually exclusive", EXIT_CONFIG)
    sim = Simulation(in_dir)
    threshold = threshold or cfg["solver"]["threshold"]
    excluded = []
    if known_motion:
        mode, op, m = "known", sim.true_op, sim.true_motion.params
    elif no_correction:
        mode, op, m = "none", sim.shot_op, sim.shot_op.zero_motion()
    else:
        est = Estimate(estimate_dir or in_dir)
        mode = "estimated"
        op = sim.shot_op.with_trajectory(est.traj)
        m = est.motion.params
        if threshold:
            excluded = est.flagged if len(est.flagged) < op.num_states else []
    if cfg["solver"]["final"] == "l1":
        image = solvers.l1_reconstruct(sim.y, op, m, cfg.l1_config(), excluded)
    else:
        dc = cfg["solver"]["dc_layer"]
        x0 = sim.prior(cfg).apply(op.corrected_zf(sim.y, m))
        image = solvers.dc_layer_refine(x0, sim.y, op, m, dc["lam"], dc["steps"], dc["rel_step"]).image
    if not np.all(np.isfinite(image)):
        raise CLIError("reconstruction is not finite", EXIT_NUMERIC)
    out = Output(out_dir, "reconstruct", cfg)
    if cfg["output"]["write_images"]:
        out.array("recon.mttt", image)
    out.json("metrics.json", {"mode": mode, "threshold": bool(threshold), "solver": cfg["solver"]["final"],
                              "psnr": arrays.psnr(sim.x, image), "flagged_count": len(excluded)})
    out.finish(sim.inputs())


def cmd_baseline(cfg: RunConfig, in_dir, out_dir) -> None:
    """Every method of the comparison on one simulated acquisition."""
    sim = Simulation(in_dir)
    problem = sim.problem(cfg)
    methods = tuple(cfg["sweep"]["methods"])
    res = simharness.run_trial(problem, methods)
    level = cfg.severity().label()
    rows = [[level, mth, cfg["data"]["seed"], res[mth].psnr, res[mth].motion_mae, res[mth].flagged_count]
            for mth in methods]
    out = Output(out_dir, "baseline", cfg)
    out.csv("results.csv", simharness.RESULT_HEADER, rows)
    out.finish(sim.inputs())


def cmd_theory(cfg: RunConfig, sub: str, out_dir) -> None:
    seed = cfg["data"]["seed"]
    if sub == "landscape":
        p = cfg["theory"]["landscape"]
        grid, mean, _ = theory.landscape_experiment(p["n"], p["k"], p["d"], p["b"], p["draws"], p["half_width"],
                                                    seed)
        sweeps = [theory.LandscapeSweep(a, grid, mean[a]) for a in range(p["b"])]
        header, rows = theory.landscape_rows(sweeps)
        out = Output(out_dir, "theory-landscape", cfg)
        out.csv("landscape.csv", header, rows)
        out.finish()
        return
    if sub != "verify":
        raise CLIError(f"unknown theory subcommand {sub!r}", EXIT_CONFIG)
    p = cfg["theory"]["verify"]
    checks = []
    for t in range(p["draws"]):
        model = theory.draw_model(p["n"], p["k"], p["d"], p["b"], seed=seed + t)
        y = theory.simulate_measurements(model)
        checks.append(theory.theorem1_check(model, y, n_random=p["n_random"], seed=seed + t))
    report = {
        "draws": p["draws"],
        "global_min_fraction": float(np.mean([c["sweep_argmin_is_truth"] for c in checks])),
        "bound_fraction": float(np.mean([c["bound_holds"] for c in checks])),
        "random_greater_fraction": float(np.mean([c["random_fraction_greater"] for c in checks])),
        "per_draw": [{k: v for k, v in c.items() if k != "random_samples"} for c in checks],
    }
    out = Output(out_dir, "theory-verify", cfg)
    out.json("verify.json", report)
    out.finish()


def cmd_sweep(cfg: RunConfig, out_dir) -> None:
    sw = cfg["sweep"]
    spec = cfg.experiment_spec()
    seeds = range(cfg["data"]["seed"], cfg["data"]["seed"] + sw["seeds"])
    levels = [simharness.SeverityLevel(int(n), float(a)) for n, a in sw["levels"]]
    out = Output(out_dir, "sweep", cfg)
    if sw["kind"] == "methods":
        rows = []
        for level in levels:
            rows += simharness.run_experiment(spec, level, tuple(sw["methods"]), seeds)
        out.csv("results.csv", simharness.RESULT_HEADER, rows)
    else:
        rows = simharness.sweep_nsplits(spec, levels, tuple(sw["n_splits"]), seeds)
        out.csv("nsplits.csv", simharness.NSPLIT_HEADER, rows)
    out.finish()


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
    common.add_argument("--out", required=True, help="output directory (its parent must exist)")
    common.add_argument("--seed", type=int, help="overrides data.seed")

    parser = argparse.ArgumentParser(prog="rigidttt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate a motion-corrupted acquisition")
    est = sub.add_parser("estimate", parents=[common], help="estimate motion from simulated data")
    est.add_argument("--in", dest="in_dir", required=True, help="simulate output directory")
    est.add_argument("--method", choices=("ttt", "altopt"), default="ttt")
    rec = sub.add_parser("reconstruct", parents=[common], help="final reconstruction")
    rec.add_argument("--in", dest="in_dir", required=True, help="simulate output directory")
    rec.add_argument("--estimate", dest="estimate_dir", help="estimate output directory (default: --in)")
    mode = rec.add_mutually_exclusive_group()
    mode.add_argument("--known-motion", action="store_true", help="use the ground-truth motion")
    mode.add_argument("--no-correction", action="store_true", help="assume no motion")
    rec.add_argument("--threshold", action="store_true", help="drop lines of states flagged by the DC check")
    base = sub.add_parser("baseline", parents=[common], help="compare all methods on simulated data")
    base.add_argument("--in", dest="in_dir", required=True, help="simulate output directory")
    th = sub.add_parser("theory", parents=[common], help="random-subspace shift model experiments")
    th.add_argument("subcommand", choices=("landscape", "verify"))
    sub.add_parser("sweep", parents=[common], help="seeded method comparison or N_splits sweep")
    return parser


def _load_config(args) -> RunConfig:
    if args.config:
        try:
            cfg = RunConfig.load(args.config)
        except OSError as exc:
            raise CLIError(f"cannot read config {args.config}: {exc}", EXIT_IO) from exc
    else:
        cfg = RunConfig.from_dict({})
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        cfg = cfg.with_seed(args.seed)
    return cfg


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        if args.command == "simulate":
            cmd_simulate(cfg, args.out)
        elif args.command == "estimate":
            cmd_estimate(cfg, args.in_dir, args.out, args.method)
        elif args.command == "reconstruct":
            cmd_reconstruct(cfg, args.in_dir, args.out, args.estimate_dir, args.known_motion,
                            args.no_correction, args.threshold)
        elif args.command == "baseline":
            cmd_baseline(cfg, args.in_dir, args.out)
        elif args.command == "theory":
            cmd_theory(cfg, args.subcommand, args.out)
        elif args.command == "sweep":
            cmd_sweep(cfg, args.out)
    except CLIError as exc:
        print(f"rigidttt: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"rigidttt: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, arrays.ArrayFormatError) as exc:
        print(f"rigidttt: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (solvers.SolverDivergedError, FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
        print(f"rigidttt: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
