"""Command-line driver: ``femzz uniform`` and ``femzz adapt``.

Exit codes: 0 success, 2 usage error, 3 numerical abort.
"""
from __future__ import annotations

import os

_threads = os.environ.get("FEMZZ_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import configparser  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import math  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from dataclasses import asdict  # noqa: E402
from pathlib import Path  # noqa: E402

from .adaptivity import AdaptConfig, TimestepUnderflow, run_adaptive  # noqa: E402
from .benchmarks import get_problem, uniform_study, write_step_log, write_study  # noqa: E402
from .fespace import write_function_snapshot  # noqa: E402
from .mesh import write_mesh_snapshot  # noqa: E402
from .sparse import SolverError  # noqa: E402

log = logging.getLogger("femzz")

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 2, 3


class UsageError(Exception):
    pass


def parse_levels(text):
    """``"4..7"`` -> ``[4, 5, 6, 7]``; a single integer is one level."""
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            lo, hi = int(a), int(b)
        else:
            lo = hi = int(text)
    except ValueError:
        raise UsageError(f"bad --levels {text!r}; expected A..B") from None
    if lo > hi or lo < 0:
        raise UsageError(f"bad --levels {text!r}; need 0 <= A <= B")
    return list(range(lo, hi + 1))


def parse_times(text):
    if text is None or text == "":
        return ()
    try:
        return tuple(float(t) for t in str(text).split(","))
    except ValueError:
        raise UsageError(f"bad time list {text!r}") from None


def _float(text):
    """Float that also accepts ``inf``."""
    return float(text)


UNIFORM_DEFAULTS = {
    "problem": None, "degree": 1, "levels": "4..7", "tau_coef": 0.1, "tau_power": 2.0, "t_end": None,
    "theta_variant": "h-1", "out": "femzz-out",
}

ADAPT_DEFAULTS = {
    "problem": None, "degree": 1, "tol_eps": 0.1, "tol_gamma": 0.01, "tol_theta": 0.1, "tol_theta_min": 0.025,
    "xi": 0.7, "k_max": 5, "tau0": None, "t_end": None, "timestep": "explicit", "snapshot_times": "",
    "C0": 1.0, "C_mu": 1.0, "C_mu_prime": 1.0, "C_P": None, "initial_refinements": 2, "max_leaves": None,
    "redo_limit": 20, "tau_min": None, "seed": 0, "out": "femzz-out",
}

CASTS = {
    "degree": int, "tau_coef": float, "tau_power": float, "t_end": float, "tol_eps": _float, "tol_gamma": _float,
    "tol_theta": _float, "tol_theta_min": _float, "xi": float, "k_max": int, "tau0": float, "C0": float,
    "C_mu": float, "C_mu_prime": float, "C_P": float, "initial_refinements": int, "max_leaves": int,
    "redo_limit": int, "tau_min": float, "seed": int,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="femzz", description="Adaptive FEM for the heat equation with ZZ estimators.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    u = sub.add_parser("uniform", help="convergence study on uniform meshes")
    u.add_argument("--config", help="INI file with key = value settings")
    u.add_argument("--problem", choices=["p1", "p2", "p3"])
    u.add_argument("--degree", type=int)
    u.add_argument("--levels", help="level range A..B with h = 2^(-i/2)")
    u.add_argument("--tau-coef", dest="tau_coef", type=float, help="c in tau = c h^k")
    u.add_argument("--tau-power", dest="tau_power", type=float, help="k in tau = c h^k")
    u.add_argument("--t-end", dest="t_end", type=float)
    u.add_argument("--theta-variant", dest="theta_variant", choices=["h-1", "energy"])
    u.add_argument("--out")

    a = sub.add_parser("adapt", help="adaptive run")
    a.add_argument("--config", help="INI file with key = value settings")
    a.add_argument("--problem", choices=["p1", "p2", "p3", "fourier"])
    a.add_argument("--degree", type=int)
    a.add_argument("--tol-eps", dest="tol_eps", type=_float)
    a.add_argument("--tol-gamma", dest="tol_gamma", type=_float)
    a.add_argument("--tol-theta", dest="tol_theta", type=_float)
    a.add_argument("--tol-theta-min", dest="tol_theta_min", type=_float)
    a.add_argument("--xi", type=float)
    a.add_argument("--k-max", dest="k_max", type=int)
    a.add_argument("--tau0", type=float, help="initial timestep (uniform mode default: 0.04 h^2)")
    a.add_argument("--t-end", dest="t_end", type=float)
    a.add_argument("--timestep", choices=["explicit", "implicit", "uniform"])
    a.add_argument("--snapshot-times", dest="snapshot_times", help="comma-separated times")
    a.add_argument("--C0", type=float)
    a.add_argument("--C-mu", dest="C_mu", type=float)
    a.add_argument("--C-mu-prime", dest="C_mu_prime", type=float)
    a.add_argument("--C-P", dest="C_P", type=float)
    a.add_argument("--initial-refinements", dest="initial_refinements", type=int)
    a.add_argument("--max-leaves", dest="max_leaves", type=int)
    a.add_argument("--redo-limit", dest="redo_limit", type=int)
    a.add_argument("--tau-min", dest="tau_min", type=float)
    a.add_argument("--seed", type=int, help="accepted for reproducibility records; runs are deterministic")
    a.add_argument("--out")
    return parser


def read_config(path, section):
    """Settings from an INI file: the ``[section]`` and ``[femzz]`` tables, or bare keys."""
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not text.lstrip().startswith("["):
        text = "[femzz]\n" + text
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise UsageError(f"bad config {path}: {exc}") from None
    out = {}
    for name in ("femzz", section):
        if cp.has_section(name):
            for k, v in cp.items(name):
                out[k.replace("-", "_")] = v
    return out


def resolve(args, defaults, section):
    """Defaults < config file < flags."""
    conf = read_config(args.config, section) if getattr(args, "config", None) else {}
    lower = {k.lower(): k for k in defaults}
    unknown = [k for k in conf if k.lower() not in lower]
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    values = dict(defaults)
    for k, v in conf.items():
        key = lower[k.lower()]
        try:
            values[key] = CASTS[key](v) if key in CASTS else v
        except ValueError:
            raise UsageError(f"bad value for {key}: {v!r}") from None
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    return values


def _run_id(values):
    blob = json.dumps(values, sort_keys=True, default=str).encode()
    return hashlib.sha1(blob).hexdigest()[:12]


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=_json_default)
        fh.write("\n")


def _json_default(v):
    if isinstance(v, float):
        return float(f"{v:.17g}")
    if hasattr(v, "item"):
        return v.item()
    if isinstance(v, tuple):
        return list(v)
    raise TypeError(f"not serialisable: {type(v)}")


def _finite(v):
    return None if v is None or not math.isfinite(v) else v


def cmd_uniform(args):
    v = resolve(args, UNIFORM_DEFAULTS, "uniform")
    if v["problem"] not in ("p1", "p2", "p3"):
        raise UsageError("--problem is required (p1, p2 or p3)")
    if v["degree"] not in (1, 2, 3, 4):
        raise UsageError("--degree must be 1..4")
    if v["theta_variant"] not in ("h-1", "energy"):
        raise UsageError("--theta-variant must be h-1 or energy")
    if not (v["tau_coef"] > 0 and v["tau_power"] > 0):
        raise UsageError("--tau-coef and --tau-power must be positive")
    levels = parse_levels(str(v["levels"]))
    problem = get_problem(v["problem"], v["t_end"])
    out = Path(v["out"])
    phases = {}
    t0 = time.perf_counter()

    def progress(r):
        log.info("level %d: dim=%d steps=%d E=%.4e Theta=%.4e error=%.4e EI=%s", r.level, r.dim, r.steps, r.E,
                 r.Theta, r.error, r.ei)

    study = uniform_study(problem, v["degree"], levels, v["tau_coef"], v["tau_power"], theta_variant=v["theta_variant"],
                          progress=progress)
    phases["solve"] = time.perf_counter() - t0
    t1 = time.perf_counter()
    write_study(study, out)
    phases["write"] = time.perf_counter() - t1
    files = ["study.csv", "study.json"] + [f"level_{r.level}.csv" for r in study.levels]
    _write_json(out / "manifest.json", {"command": "uniform", "config": v, "run_id": _run_id(v), "output_dir": str(out),
                                        "files": files, "seconds": phases})
    return EXIT_OK


def _adapt_config(v, problem):
    T = problem.T if v["t_end"] is None else v["t_end"]
    tau0 = v["tau0"]
    mesh = None
    if v["timestep"] == "uniform" and tau0 is None:
        mesh = problem.macro_mesh()
        mesh.refine_uniform(v["initial_refinements"])
        tau0 = 0.04 * mesh.mesh_size()[1] ** 2
        mesh = None
    if tau0 is None:
        tau0 = T / 100.0
    tol_theta_min = v["tol_theta_min"]
    if math.isinf(v["tol_theta"]) and math.isinf(tol_theta_min):
        tol_theta_min = 0.0
    try:
        return AdaptConfig(
            tol_eps=v["tol_eps"], tol_gamma=v["tol_gamma"], tol_theta=v["tol_theta"], tol_theta_min=tol_theta_min,
            xi=v["xi"], k_max=v["k_max"], tau0=tau0, T=T, timestep=v["timestep"], degree=v["degree"], C0=v["C0"],
            C_mu=v["C_mu"], C_mu_prime=v["C_mu_prime"], C_P=v["C_P"], tau_min=v["tau_min"],
            redo_limit=v["redo_limit"], initial_refinements=v["initial_refinements"], max_leaves=v["max_leaves"],
            snapshot_times=parse_times(v["snapshot_times"]),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _adapt_summary(problem, cfg, result):
    return {
        "problem": problem.name,
        "degree": cfg.degree,
        "tolerances": {"tol_eps": cfg.tol_eps, "tol_gamma": cfg.tol_gamma, "tol_theta": cfg.tol_theta,
                       "tol_theta_min": cfg.tol_theta_min, "tol": _finite(cfg.global_tol)},
        "total_dof": result.total_dof,
        "steps": result.steps,
        "eta_final": result.eta,
        "error_final": result.error,
        "ei_final": result.ei,
        "redos": result.redos,
        "t_end": result.final.t,
        "timestep": cfg.timestep,
        "aborted": result.aborted,
    }


def _write_adapt(out, problem, cfg, result, values, phases):
    out.mkdir(parents=True, exist_ok=True)
    write_step_log(result.history, out / "steps.csv")
    files = ["steps.csv", "summary.json"]
    for i, snap in enumerate(result.snapshots):
        mname, fname = f"mesh_{i:03d}.txt", f"fun_{i:03d}.txt"
        write_mesh_snapshot(snap.leafset, out / mname)
        write_function_snapshot(snap.U, out / fname)
        files += [mname, fname]
    _write_json(out / "summary.json", _adapt_summary(problem, cfg, result))
    _write_json(out / "manifest.json", {
        "command": "adapt", "config": values, "resolved": asdict(cfg), "run_id": _run_id(values),
        "output_dir": str(out), "files": files,
        "snapshots": [{"t": s.t, "leaves": len(s.leafset)} for s in result.snapshots], "seconds": phases,
    })


def cmd_adapt(args):
    v = resolve(args, ADAPT_DEFAULTS, "adapt")
    if v["problem"] not in ("p1", "p2", "p3", "fourier"):
        raise UsageError("--problem is required (p1, p2, p3 or fourier)")
    if v["timestep"] not in ("explicit", "implicit", "uniform"):
        raise UsageError("--timestep must be explicit, implicit or uniform")
    if v["degree"] not in (1, 2, 3, 4):
        raise UsageError("--degree must be 1..4")
    problem = get_problem(v["problem"], v["t_end"])
    cfg = _adapt_config(v, problem)
    out = Path(v["out"])

    def progress(rec):
        log.info("n=%d t=%.6g tau=%.3e dof=%d eps=%.3e theta=%.3e eta=%.4e", rec.n, rec.t, rec.tau, rec.dof, rec.eps,
                 rec.theta, rec.eta_cum)

    t0 = time.perf_counter()
    try:
        result = run_adaptive(problem, cfg, progress=progress)
    except TimestepUnderflow as exc:
        log.error("%s", exc)
        if exc.result is not None:
            _write_adapt(out, problem, cfg, exc.result, v, {"solve": time.perf_counter() - t0})
        return EXIT_ABORT
    phases = {"solve": time.perf_counter() - t0}
    t1 = time.perf_counter()
    _write_adapt(out, problem, cfg, result, v, phases)
    phases["write"] = time.perf_counter() - t1
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr)
    try:
        if args.command == "uniform":
            return cmd_uniform(args)
        return cmd_adapt(args)
    except UsageError as exc:
        print(f"femzz: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SolverError as exc:
        print(f"femzz: numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
