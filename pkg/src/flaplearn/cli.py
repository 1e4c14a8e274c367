"""Command-line pipeline: orbit search, expert labeling, policy training,
closed-loop evaluation, and integrator diagnostics.

Every command reads one JSON experiment config (resolved against the "desk"
or "paper" preset), writes plain CSV/JSON artifacts into the run directory,
and stamps products with the resolved-config hash and tool version. Worker
counts (--jobs) never change results, only wall time.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure,
3 non-convergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, replace

import numpy as np

from . import __version__
from .datagen import (generate_dataset, load_dataset, make_expert,
                      make_simulator, save_dataset)
from .dynamics import Morphology
from .evalharness import (AlgoSummary, compare_report, noise_sweep, sweep,
                          write_boxplot_csv, write_envelope_csv)
from .expert import MPCOptions, ReferenceOrbit, find_periodic_orbit
from .imitation import (ILConfig, IterRecord, behavior_cloning, coil,
                        constraint_norm, dagger, dart, write_metrics)
from .integrate import CG3_TABLEAU, CG4_TABLEAU, LIE_EULER_TABLEAU, simulate
from .policy import NetArch, TrainOptions, load_policy, mse, save_policy
from .wingkin import WingParams, reference_wing_params

log = logging.getLogger("flaplearn")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_NO_CONVERGENCE = 3


class NonConvergence(RuntimeError):
    """An iterative stage failed to reach its tolerance."""


PRESETS: dict[str, dict] = {
    "desk": {
        "morphology": {},
        "waveform": {},
        "orbit": {"tol": 1e-4, "lambda_E": 1e-2, "max_nfev": 2000},
        "mpc": {},
        "train": {},
        "arch": {"n_hidden": 36, "cascade": True},
        "data": {"n_samples": 200, "n_zero": 40},
        "il": {"n_iter": 5, "alpha": 0.75, "dart_scale": 1e-4,
               "rollout_periods": 5, "mu_c": 1.0, "n_rollouts": 15},
        "sweep": {"n_traj": 256, "horizon": 60},
        "seeds": {"data": 2024, "train": 7, "eval": 99},
        "out_dir": "runs/desk",
    },
    "paper": {
        "morphology": {},
        "waveform": {},
        "orbit": {"tol": 1e-4, "lambda_E": 1e-2, "max_nfev": 2000},
        "mpc": {},
        "train": {},
        "arch": {"n_hidden": 36, "cascade": True},
        "data": {"n_samples": 1587, "n_zero": 300},
        "il": {"n_iter": 5, "alpha": 0.75, "dart_scale": 1e-4,
               "rollout_periods": 5, "mu_c": 1.0, "n_rollouts": 30},
        "sweep": {"n_traj": 12291, "horizon": 60},
        "seeds": {"data": 2024, "train": 7, "eval": 99},
        "out_dir": "runs/paper",
    },
}


@dataclass
class ExperimentConfig:
    resolved: dict
    hash: str
    morph: Morphology
    waveform: WingParams
    mpc: MPCOptions
    train_opts: TrainOptions
    arch: NetArch
    il: ILConfig
    n_samples: int
    n_zero: int
    sweep_traj: int
    sweep_horizon: int
    seeds: dict
    out_dir: str
    orbit_tol: float
    orbit_lambda_E: float
    orbit_max_nfev: int


def resolve_config(doc: dict) -> ExperimentConfig:
    doc = dict(doc)
    preset = doc.pop("preset", "desk")
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from "
                         f"{sorted(PRESETS)}")
    resolved = json.loads(json.dumps(PRESETS[preset]))  # deep copy
    for key, val in doc.items():
        if key not in resolved:
            raise ValueError(f"unknown config key {key!r}")
        if isinstance(resolved[key], dict):
            if not isinstance(val, dict) and not (
                    key == "morphology" and isinstance(val, str)):
                raise ValueError(f"config section {key!r} must be an object")
            if isinstance(val, str):
                # morphology given as a file of field overrides
                if not os.path.exists(val):
                    raise ValueError(f"morphology file {val!r} not found")
                with open(val) as fh:
                    val = json.load(fh)
                resolved[key] = val  # hash covers content, not the path
            else:
                resolved[key] = {**resolved[key], **val}
        else:
            resolved[key] = val

    seeds = resolved["seeds"]
    for name in ("data", "train", "eval"):
        if name not in seeds or not isinstance(seeds[name], int):
            raise ValueError("seeds must be explicit integers: data, train, "
                             "eval")

    cfg_hash = hashlib.sha256(
        json.dumps(resolved, sort_keys=True).encode()).hexdigest()[:12]
    orbit = resolved["orbit"]
    return ExperimentConfig(
        resolved=resolved,
        hash=cfg_hash,
        morph=Morphology(**resolved["morphology"]),
        waveform=replace(reference_wing_params(), **resolved["waveform"]),
        mpc=MPCOptions(**resolved["mpc"]),
        train_opts=TrainOptions(**resolved["train"]),
        arch=NetArch(n_in=12, n_out=60, **resolved["arch"]),
        il=ILConfig(**resolved["il"]),
        n_samples=int(resolved["data"]["n_samples"]),
        n_zero=int(resolved["data"]["n_zero"]),
        sweep_traj=int(resolved["sweep"]["n_traj"]),
        sweep_horizon=int(resolved["sweep"]["horizon"]),
        seeds=seeds,
        out_dir=str(resolved["out_dir"]),
        orbit_tol=float(orbit["tol"]),
        orbit_lambda_E=float(orbit["lambda_E"]),
        orbit_max_nfev=int(orbit["max_nfev"]),
    )


def _config_from_args(args) -> ExperimentConfig:
    doc: dict = {}
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ValueError("config file must hold a JSON object")
    if args.preset:
        doc["preset"] = args.preset
    if args.out:
        doc["out_dir"] = args.out
    return resolve_config(doc)


def _write_manifest(cfg: ExperimentConfig, command: str, inputs: dict,
                    outputs: list[str]) -> None:
    doc = {
        "tool_version": __version__,
        "config_hash": cfg.hash,
        "command": command,
        "config": cfg.resolved,
        "inputs": inputs,
        "outputs": sorted(outputs),
    }
    path = os.path.join(cfg.out_dir, f"{command.replace('-', '_')}_run.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def _orbit_path(cfg: ExperimentConfig, args) -> str:
    path = args.orbit or os.path.join(cfg.out_dir, "orbit.json")
    if not os.path.exists(path):
        raise ValueError(f"orbit file {path!r} not found; run find-orbit "
                         "first or pass --orbit")
    return path


# ---------------------------------------------------------------- commands

def cmd_find_orbit(cfg: ExperimentConfig, args) -> int:
    path = os.path.join(cfg.out_dir, "orbit.json")
    log.info("searching for a hovering orbit (tol %.1e, f seed %.2f Hz)",
             cfg.orbit_tol, cfg.waveform.f)
    try:
        orbit = find_periodic_orbit(cfg.morph, cfg.waveform,
                                    tol_orbit=cfg.orbit_tol,
                                    lambda_E=cfg.orbit_lambda_E,
                                    max_nfev=cfg.orbit_max_nfev)
    except (ValueError, RuntimeError) as exc:
        raise NonConvergence(f"orbit search failed: {exc}") from exc
    orbit.save(path)
    log.info("orbit: f=%.4f Hz defect=%.3e mean aero power=%.4e W -> %s",
             orbit.f, orbit.defect, orbit.mean_aero_power, path)
    _write_manifest(cfg, "find-orbit", {},
                    [path, _rel_manifest(cfg, "find-orbit")])
    return EXIT_OK


def _rel_manifest(cfg: ExperimentConfig, command: str) -> str:
    return os.path.join(cfg.out_dir,
                        f"{command.replace('-', '_')}_run.json")


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    orbit_file = _orbit_path(cfg, args)
    orbit = ReferenceOrbit.load(orbit_file)
    log.info("labeling %d sampled + %d zero states (seed %d, %d jobs)",
             cfg.n_samples, cfg.n_zero, cfg.seeds["data"], args.jobs)
    ds = generate_dataset(cfg.n_samples, cfg.n_zero, orbit, opts=cfg.mpc,
                          seed=cfg.seeds["data"], morph=cfg.morph,
                          n_jobs=args.jobs)
    if cfg.n_samples > 0 and ds.n == ds.n_zero:
        raise NonConvergence("every expert solve failed; no labels produced")
    path = os.path.join(cfg.out_dir, "dataset.npz")
    save_dataset(ds, path, orbit_hash=orbit.content_hash())
    log.info("dataset: %d columns (%d zero) -> %s", ds.n, ds.n_zero, path)
    _write_manifest(cfg, "gen-data", {"orbit": orbit_file},
                    [path, _rel_manifest(cfg, "gen-data")])
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    ds_path = args.dataset or os.path.join(cfg.out_dir, "dataset.npz")
    if not os.path.exists(ds_path):
        raise ValueError(f"dataset file {ds_path!r} not found; run gen-data "
                         "first or pass --dataset")
    ds, header = load_dataset(ds_path)
    algo = args.algo
    seed = cfg.seeds["train"]
    log.info("training %s on %d pairs (seed %d)", algo, ds.n, seed)
    t0 = time.perf_counter()
    if algo == "bc":
        net = behavior_cloning(ds, cfg.arch, cfg.train_opts, seed=seed)
        records = [IterRecord(0, ds.n, mse(net, ds.X, ds.Y),
                              constraint_norm(net),
                              time.perf_counter() - t0)]
    elif algo in ("dagger", "dart"):
        orbit = ReferenceOrbit.load(_orbit_path(cfg, args))
        expert = make_expert(orbit, opts=cfg.mpc, morph=cfg.morph)
        simulator = make_simulator(orbit, morph=cfg.morph)
        fn = dagger if algo == "dagger" else dart
        net, records = fn(ds, cfg.arch, cfg.il, expert, simulator,
                          opts=cfg.train_opts, seed=seed)
    elif algo == "coil":
        net, records = coil(ds, cfg.arch, cfg.il, opts=cfg.train_opts,
                            seed=seed)
    else:  # pragma: no cover - argparse restricts choices
        raise ValueError(f"unknown algorithm {algo!r}")
    train_time = time.perf_counter() - t0

    metrics_path = os.path.join(cfg.out_dir, f"metrics_{algo}.csv")
    write_metrics(records, metrics_path)
    policy_path = os.path.join(cfg.out_dir, f"policy_{algo}.json")
    meta = {
        "algo": algo,
        "config_hash": cfg.hash,
        "tool_version": __version__,
        "train_time_s": train_time,
        "mse": records[-1].mse,
        "constraint_norm": records[-1].constraint_norm,
        "n_data": records[-1].n_data,
        "dataset": os.path.basename(ds_path),
        "orbit_hash": header.get("orbit_hash", ""),
    }
    save_policy(net, policy_path, meta)
    log.info("%s: mse=%.4e |f(0)|=%.3e %.1fs -> %s", algo,
             records[-1].mse, records[-1].constraint_norm, train_time,
             policy_path)
    _write_manifest(cfg, f"train-{algo}", {"dataset": ds_path},
                    [metrics_path, policy_path,
                     _rel_manifest(cfg, f"train-{algo}")])
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    net = load_policy(args.policy)
    orbit = ReferenceOrbit.load(_orbit_path(cfg, args))
    n_traj = args.n_traj or cfg.sweep_traj
    horizon = args.horizon or cfg.sweep_horizon
    stem = os.path.splitext(os.path.basename(args.policy))[0]
    sigma = args.noise
    log.info("sweeping %s: %d trajectories x %d periods%s", stem, n_traj,
             horizon, f" (input noise {sigma:g})" if sigma else "")

    def progress(i: int) -> None:
        if (i + 1) % 10 == 0:
            log.info("  trajectory %d/%d", i + 1, n_traj)

    outputs = []
    if sigma:
        nres = noise_sweep(net, orbit, sigma, n_traj, horizon,
                           cfg.seeds["eval"], morph=cfg.morph,
                           n_jobs=args.jobs, progress=progress)
        res = nres.sweep
        box_path = os.path.join(cfg.out_dir, f"{stem}_boxplot.csv")
        write_boxplot_csv(nres, box_path)
        outputs.append(box_path)
    else:
        res = sweep(net, orbit, n_traj, horizon, cfg.seeds["eval"],
                    morph=cfg.morph, n_jobs=args.jobs, progress=progress)
    env_path = os.path.join(cfg.out_dir, f"{stem}_envelope.csv")
    write_envelope_csv(res, env_path)
    outputs.append(env_path)

    m = res.metrics
    summary = {
        "policy": os.path.basename(args.policy),
        "sigma_w": sigma or 0.0,
        "n_traj": n_traj,
        "horizon": horizon,
        "bounded": m.flag,
        "b": m.b,
        "gamma": m.gamma,
        "t_T": m.t_T,
        "wall_time_s": res.wall_time,
        "policy_latency_s": res.policy_latency_s,
        "config_hash": cfg.hash,
        "tool_version": __version__,
    }
    sum_path = os.path.join(cfg.out_dir, f"{stem}_eval.json")
    with open(sum_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    outputs.append(sum_path)
    log.info("%s: bounded=%s b=%s gamma=%.4g t_T=%g", stem, m.flag,
             "N/A" if m.b is None else f"{m.b:.4g}", m.gamma, m.t_T)
    _write_manifest(cfg, "evaluate", {"policy": args.policy}, outputs)
    return EXIT_OK


def cmd_compare(cfg: ExperimentConfig, args) -> int:
    docs = []
    for path in args.policies:
        with open(path) as fh:
            docs.append((path, json.load(fh)))
    layouts = {d.get("u_layout") for _, d in docs}
    if len(layouts) > 1:
        raise ValueError(f"policies mix control layouts {sorted(layouts)}; "
                         "refusing to compare")
    orbit = ReferenceOrbit.load(_orbit_path(cfg, args))
    n_traj = args.n_traj or cfg.sweep_traj
    horizon = args.horizon or cfg.sweep_horizon

    summaries = []
    for path, doc in docs:
        net = load_policy(path)
        meta = doc.get("meta", {})
        algo = meta.get("algo") or os.path.splitext(
            os.path.basename(path))[0]
        log.info("sweeping %s (%d x %d)", algo, n_traj, horizon)
        res = sweep(net, orbit, n_traj, horizon, cfg.seeds["eval"],
                    morph=cfg.morph, n_jobs=args.jobs)
        summaries.append(AlgoSummary(
            algo=algo,
            train_time_s=float(meta.get("train_time_s", float("nan"))),
            metrics=res.metrics,
            constraint_norm=constraint_norm(net),
            mse=float(meta.get("mse", float("nan"))),
        ))

    csv_text, pretty = compare_report(summaries)
    csv_path = os.path.join(cfg.out_dir, "compare.csv")
    with open(csv_path, "w") as fh:
        fh.write(csv_text)
    txt_path = os.path.join(cfg.out_dir, "compare.txt")
    with open(txt_path, "w") as fh:
        fh.write(pretty)
    sys.stdout.write(pretty)
    _write_manifest(cfg, "compare", {"policies": list(args.policies)},
                    [csv_path, txt_path, _rel_manifest(cfg, "compare")])
    return EXIT_OK


_BENCH_METHODS = (("cg4", CG4_TABLEAU), ("cg3", CG3_TABLEAU),
                  ("lie_euler", LIE_EULER_TABLEAU), ("rk4", "rk4"))


def cmd_integrator_bench(cfg: ExperimentConfig, args) -> int:
    orbit = ReferenceOrbit.load(_orbit_path(cfg, args))
    periods = args.periods
    spp = orbit.steps_per_period
    drifts = {}
    for name, method in _BENCH_METHODS:
        t0 = time.perf_counter()
        traj = simulate(orbit.initial, periods, None, cfg.morph,
                        orbit.params_R, steps_per_period=spp, method=method,
                        save_every=spp)
        wall = time.perf_counter() - t0
        drifts[name] = traj.orthogonality_drift()
        log.info("%s: %d periods in %.2fs, final drift %.3e", name, periods,
                 wall, drifts[name][-1])
    path = os.path.join(cfg.out_dir, "integrator_bench.csv")
    import csv as _csv
    with open(path, "w", newline="") as fh:
        w = _csv.writer(fh)
        names = [n for n, _ in _BENCH_METHODS]
        w.writerow(["period"] + names)
        for k in range(periods + 1):
            w.writerow([k] + [repr(float(drifts[n][k])) for n in names])
    log.info("orthogonality drift table -> %s", path)
    _write_manifest(cfg, "integrator-bench", {"periods": periods},
                    [path, _rel_manifest(cfg, "integrator-bench")])
    return EXIT_OK


# ------------------------------------------------------------------- main

def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="flaplearn",
        description="Flapping-wing hover: orbit search, expert labeling, "
                    "imitation training, and closed-loop evaluation.")
    p.add_argument("--version", action="version",
                   version=f"%(prog)s {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--preset", choices=sorted(PRESETS),
                        help="preset to resolve against (default: desk)")
    common.add_argument("--out", help="override the run directory")
    common.add_argument("--jobs", type=int, default=1,
                        help="worker processes (never changes results)")
    common.add_argument("--orbit", help="orbit file (default: "
                                         "<out_dir>/orbit.json)")

    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("find-orbit", parents=[common],
                   help="search for the hovering limit cycle")
    sub.add_parser("gen-data", parents=[common],
                   help="label sampled initial errors with the expert")
    sp = sub.add_parser("train", parents=[common],
                        help="train a policy by imitation")
    sp.add_argument("algo", choices=["bc", "dagger", "dart", "coil"])
    sp.add_argument("--dataset", help="dataset file (default: "
                                      "<out_dir>/dataset.npz)")
    sp = sub.add_parser("evaluate", parents=[common],
                        help="closed-loop boundedness sweep for one policy")
    sp.add_argument("policy", help="policy JSON file")
    sp.add_argument("--noise", type=float, default=None,
                    help="weighted std of input noise (default: none)")
    sp.add_argument("--n-traj", type=int, default=None)
    sp.add_argument("--horizon", type=int, default=None)
    sp = sub.add_parser("compare", parents=[common],
                        help="side-by-side sweep report for several policies")
    sp.add_argument("policies", nargs="+", help="policy JSON files")
    sp.add_argument("--n-traj", type=int, default=None)
    sp.add_argument("--horizon", type=int, default=None)
    sp = sub.add_parser("integrator-bench", parents=[common],
                        help="per-period rotation orthogonality drift")
    sp.add_argument("--periods", type=int, default=10)
    return p


_DISPATCH = {
    "find-orbit": cmd_find_orbit,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "integrator-bench": cmd_integrator_bench,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; remap to the documented code
        return EXIT_OK if exc.code == 0 else EXIT_USAGE

    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(message)s")
    try:
        cfg = _config_from_args(args)
        os.makedirs(cfg.out_dir, exist_ok=True)
        return _DISPATCH[args.command](cfg, args)
    except NonConvergence as exc:
        log.error("non-convergence: %s", exc)
        return EXIT_NO_CONVERGENCE
    except (ValueError, TypeError, KeyError, OSError,
            json.JSONDecodeError) as exc:
        log.error("usage error: %s", exc)
        return EXIT_USAGE
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except RuntimeError as exc:
        if "diverged" in str(exc) or "converge" in str(exc):
            log.error("non-convergence: %s", exc)
            return EXIT_NO_CONVERGENCE
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
