"""Command-line front end.

Every subcommand reads one JSON model file,

    {"beta": 1.0, "z": 0.2, "dim": 1, "box": {"lo": [0], "hi": [1]},
     "potential": {"kind": "hard_core", "r": 0.5}, "budgets": {...}, "seed": 0}

prints a single JSON summary line on stdout and, with ``--out DIR``, writes
its artifacts there.  Exit status: 0 when every assertion passes, 1 on a
statistical failure, 2 on a configuration or usage error (JSON on stderr).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import _rng
from .closure import ClosureModel, closure_janossy, lenard_check, ruelle_check, sign_alternation
from .errors import KirkwoodError, ModeUnsupported, OutsideDisk
from .gnz import BATTERY, gnz_residual, kernel_bound_check, random_queries
from .grand_canonical import BoxRegion, McEstimate, partition_function, set_threads, theta_explicit
from .hamiltonian import Configuration
from .ks_core import neumann_solve
from .multibody import hamiltonian_from_dict, kernel_kH, multibody_neumann_solve, pair_kernel
from .potentials import ModelParams, c_beta, potential_from_dict, z0
from .sampler import (
    closure_bin_average,
    compare_correlations,
    estimate_correlations,
    pooled_verdict,
    sample_batch,
)

DEFAULT_BUDGETS = {
    "mc_per_term": 20000,
    "samples": 100_000,
    "inner": 2000,
    "count_mc": 200_000,
    "kernel_pairs": 20000,
    "kernel_inner": 500,
    "kernel_queries": 100,
    "nodes": 64,
    "N_max": 3,
    "k_max": None,
    "probes": 20,
    "tol": 1e-10,
    "assumed_norm": None,
}


class UsageError(Exception):
    pass


# --- configuration ---------------------------------------------------------------


class Config:
    def __init__(self, raw: dict, base_dir: Optional[Path], args):
        if not isinstance(raw, dict):
            raise UsageError("config must be a JSON object")
        for key in ("beta", "z", "potential", "box"):
            if key not in raw:
                raise UsageError(f"config is missing {key!r}")
        try:
            self.beta = float(raw["beta"])
            self.z = float(args.z) if getattr(args, "z", None) is not None else float(raw["z"])
            self.dim = int(raw.get("dim", 1))
            self.box = BoxRegion(raw["box"]["lo"], raw["box"]["hi"])
        except (TypeError, ValueError, KeyError) as exc:
            raise UsageError(f"bad model field: {exc}") from exc
        if not self.beta > 0:
            raise UsageError("beta must be positive")
        if self.box.dim != self.dim:
            raise UsageError("box dimension does not match dim")
        try:
            self.potential = potential_from_dict(raw["potential"], base_dir)
        except (TypeError, ValueError, KeyError) as exc:
            raise UsageError(f"bad potential: {exc}") from exc
        budgets = raw.get("budgets", {}) or {}
        unknown = set(budgets) - set(DEFAULT_BUDGETS)
        if unknown:
            raise UsageError(f"unknown budget keys: {sorted(unknown)}")
        self.budgets = {**DEFAULT_BUDGETS, **budgets}
        self.seed = int(args.seed) if getattr(args, "seed", None) is not None else int(raw.get("seed", 0))
        self.multibody = raw.get("multibody")
        self.base_dir = base_dir
        self.override = bool(getattr(args, "override_disk_check", False))

    @property
    def params(self) -> ModelParams:
        return ModelParams(self.beta, self.z, self.potential, self.dim)

    def model(self) -> ClosureModel:
        return ClosureModel(self.params, self.override)

    def b(self, key):
        return self.budgets[key]


def _load_config(args) -> Config:
    path = Path(args.config)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from exc
    return Config(raw, path.parent, args)


# --- output helpers --------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, McEstimate):
        return obj.to_dict()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _clean(obj):
    """Replace non-finite floats by strings so the output is strict JSON."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, McEstimate):
        return _clean(obj.to_dict())
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def _dumps(obj, **kw) -> str:
    return json.dumps(_clean(obj), sort_keys=True, default=_jsonable, **kw)


def exact(value, seed=None) -> dict:
    return {"value": value, "std_error": "exact", "seed": seed, "tail_bound": 0.0}


def estimate(est: McEstimate) -> dict:
    return {"value": est.value, "std_error": est.std_error, "seed": list(est.seed), "tail_bound": est.tail_bound,
            "samples": est.samples, "k_max": est.k_max}


def _out_dir(args) -> Optional[Path]:
    if args.out is None:
        return None
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(args, name: str, obj) -> None:
    out = _out_dir(args)
    if out is not None:
        (out / name).write_text(_dumps(obj, indent=2) + "\n")


def _parse_points(text: Optional[str], dim: int):
    if text is None or text.strip() == "":
        return np.zeros((0, dim))
    try:
        val = json.loads(text) if text.strip().startswith("[") else [float(v) for v in text.split(",")]
    except (ValueError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot parse points {text!r}") from exc
    arr = np.asarray(val, dtype=float)
    return arr.reshape(-1, dim)


def _probes(cfg: Config, count: int, n_max: int = 3, tag: int = 0):
    gen = _rng.stream((cfg.seed,), _rng.TAG_PROBES, 100 + tag)
    out = []
    for i in range(count):
        n = 1 + i % n_max
        out.append(cfg.box.uniform(gen, (n,)))
    return out


# --- subcommands --------------------------------------------------------------------


def cmd_z0(cfg: Config, args) -> tuple[dict, int]:
    C = c_beta(cfg.potential, cfg.beta, cfg.dim)
    r = z0(cfg.potential, cfg.beta, cfg.dim)
    B = cfg.potential.stability_B
    return {"z0": exact(r), "beta": cfg.beta, "B": B, "C_beta": {**exact(C), "quadrature_tol": 1e-10}}, 0


def cmd_xi(cfg: Config, args) -> tuple[dict, int]:
    est = partition_function(cfg.params, cfg.box, cfg.b("k_max"), cfg.b("mc_per_term"), cfg.seed)
    return {"z": cfg.z, "xi": estimate(est)}, 0


def cmd_theta(cfg: Config, args) -> tuple[dict, int]:
    x = _parse_points(args.x, cfg.dim)
    if x.shape[0] == 0:
        raise UsageError("theta needs --x")
    res = {}
    for sign, name in ((1, "plus"), (-1, "minus")):
        p = cfg.params.with_activity(sign * cfg.z)
        est = theta_explicit(p, cfg.box, x.shape[0], x, cfg.b("k_max"), cfg.b("mc_per_term"), cfg.seed,
                             check_disk=not cfg.override)
        res[name] = {"z": sign * cfg.z, "theta": estimate(est)}
    return {"n": int(x.shape[0]), "x": x.tolist(), **res}, 0


def cmd_janossy(cfg: Config, args) -> tuple[dict, int]:
    x = _parse_points(args.x, cfg.dim)
    est = closure_janossy(cfg.model(), cfg.box, x, cfg.b("k_max"), cfg.b("mc_per_term"), cfg.seed)
    return {"n": int(x.shape[0]), "x": x.tolist(), "janossy": estimate(est)}, 0


def cmd_solve_ks(cfg: Config, args) -> tuple[dict, int]:
    theta, rep = neumann_solve(cfg.params, cfg.box, int(cfg.b("N_max")), cfg.b("k_max"), float(cfg.b("tol")),
                               nodes=int(cfg.b("nodes")))
    out = _out_dir(args)
    if out is not None:
        theta.save(out / "theta")
    ok = rep.residual <= max(float(cfg.b("tol")) * 100, 1e-8)
    return {"report": rep.to_dict(), "theta1_max": exact(float(np.max(np.abs(theta.level(1))))),
            "tail_bound": theta.tail, "passed": bool(ok)}, 0 if ok else 1


def _batch(cfg: Config, args, count: Optional[int] = None):
    n = count if count is not None else (args.n if getattr(args, "n", None) is not None else cfg.b("samples"))
    return sample_batch(cfg.model(), cfg.box, int(n), cfg.seed, inner=int(cfg.b("inner")),
                        mc_per_term=int(cfg.b("count_mc")), threads=args.threads)


def cmd_sample(cfg: Config, args) -> tuple[dict, int]:
    batch = _batch(cfg, args)
    out = _out_dir(args)
    files = []
    if out is not None:
        files = [str(p.name) for p in batch.write(out, "sample")]
    sizes = batch.sizes
    return {"samples": len(batch), "seed": [cfg.seed], "mean_count": exact(float(sizes.mean()) if sizes.size else 0.0),
            "void_fraction": exact(float(np.mean(sizes == 0)) if sizes.size else 0.0),
            "stats": batch.stats, "files": files}, 0


def _correlation_bins(cfg: Config):
    L = float(cfg.box.lengths[0])
    lo = float(cfg.box.lo[0])
    bins = {1: np.linspace(lo, lo + L, 11), 2: np.linspace(0.0, L, 11)}
    if cfg.dim == 1:
        g = np.linspace(0.0, L, 5)
        bins[3] = (g, g)
    return bins


def _verify_correlations(cfg: Config, args, batch) -> dict:
    model = cfg.model()
    res = {}
    out = _out_dir(args)
    bins = _correlation_bins(cfg)
    for n, b in bins.items():
        if cfg.dim != 1 and n > 1:
            continue
        est = estimate_correlations(batch, n, b)
        ex = closure_bin_average(model, cfg.box, n, b)
        res[str(n)] = compare_correlations(est, ex)
        if out is not None:
            est.to_csv(out / f"rho{n}.csv")
    pooled = pooled_verdict(res.values())
    return {"orders": res, "pooled": pooled, "passed": pooled["passed"], "samples": len(batch),
            "seed": [cfg.seed]}


def cmd_verify_correlations(cfg: Config, args) -> tuple[dict, int]:
    rep = _verify_correlations(cfg, args, _batch(cfg, args))
    return rep, 0 if rep["passed"] else 1


def _verify_gnz(cfg: Config, args, batch) -> dict:
    model = cfg.model()
    res = {}
    for n in (1, 2):
        res[str(n)] = gnz_residual(model, cfg.box, BATTERY, batch, n, int(cfg.b("kernel_pairs")),
                                  int(cfg.b("kernel_inner")), _rng.child_seed((cfg.seed,), 10 + n))
    qs = random_queries(model, cfg.box, int(cfg.b("kernel_queries")), rng=cfg.seed)
    kb = kernel_bound_check(model, qs, cfg.b("mc_per_term"), rng=cfg.seed)
    kb.pop("rows")
    passed = all(r["passed"] for r in res.values()) and kb["nonnegative"]
    if getattr(args, "check_kernel_bound", False):
        passed = passed and kb["passed"]
    return {"gnz": res, "kernel_bound": {**kb, "asserted": bool(getattr(args, "check_kernel_bound", False))},
            "passed": bool(passed), "samples": len(batch), "seed": [cfg.seed]}


def _require_local_stability(cfg: Config):
    if not cfg.potential.locally_stable:
        raise UsageError(f"the {cfg.potential.kind} potential is not locally stable; GNZ checks need it")


def cmd_verify_gnz(cfg: Config, args) -> tuple[dict, int]:
    _require_local_stability(cfg)
    rep = _verify_gnz(cfg, args, _batch(cfg, args))
    _write_json(args, "gnz.json", rep)
    return rep, 0 if rep["passed"] else 1


def _lenard(cfg: Config) -> dict:
    model = cfg.model()
    probes = _probes(cfg, int(cfg.b("probes")))
    len_rep = lenard_check(model, cfg.box, probes, cfg.b("k_max"), cfg.b("mc_per_term"), cfg.seed)
    sa = sign_alternation(model, cfg.box, probes, cfg.b("k_max"), cfg.b("mc_per_term"), cfg.seed)
    return {"lenard": len_rep, "sign_alternation": sa, "passed": bool(len_rep["passed"] and sa["passed"])}


def cmd_lenard_check(cfg: Config, args) -> tuple[dict, int]:
    rep = _lenard(cfg)
    _write_json(args, "lenard.json", rep)
    return rep, 0 if rep["passed"] else 1


def _hamiltonian(cfg: Config):
    if cfg.multibody is None:
        from .hamiltonian import MultiBodyHamiltonian

        return MultiBodyHamiltonian.from_pair(cfg.potential)
    try:
        return hamiltonian_from_dict(cfg.multibody, cfg.base_dir)
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"bad multibody spec: {exc}") from exc


def cmd_multibody_kernel(cfg: Config, args) -> tuple[dict, int]:
    H = _hamiltonian(cfg)
    x = _parse_points(args.x, cfg.dim)
    if x.shape[0] != 1:
        raise UsageError("multibody-kernel needs exactly one point in --x")
    xn = _parse_points(args.xn, cfg.dim)
    y = _parse_points(args.y, cfg.dim)
    rec = kernel_kH(H, x[0], xn, y, cfg.beta)
    sub = kernel_kH(H, x[0], xn, y, cfg.beta, method="subsets")
    out = {"kernel": exact(rec), "subset_sum": exact(sub), "k": int(y.shape[0])}
    ok = True
    if H.is_pair_only and H.pair is not None:
        ref = pair_kernel(H.pair, x[0], xn, y, cfg.beta)
        rel = abs(rec - ref) / abs(ref) if ref != 0 else abs(rec)
        out["pair_product"] = exact(ref)
        out["relative_error"] = rel
        ok = rel <= 1e-12
    return {**out, "passed": bool(ok)}, 0 if ok else 1


def cmd_multibody_solve(cfg: Config, args) -> tuple[dict, int]:
    H = _hamiltonian(cfg)
    norm = cfg.b("assumed_norm")
    if norm is None:
        raise UsageError("multibody-solve needs budgets.assumed_norm")
    nodes = int(cfg.budgets.get("nodes", 32))
    theta, rep = multibody_neumann_solve(H, cfg.params, cfg.box, int(cfg.b("N_max")), cfg.b("k_max"),
                                         float(cfg.b("tol")), float(norm), nodes=min(nodes, 32))
    out = _out_dir(args)
    if out is not None:
        theta.save(out / "theta_multibody")
    ok = rep.residual <= max(float(cfg.b("tol")) * 100, 1e-8)
    return {"report": {**rep.to_dict(), "term_norms": list(rep.term_norms)}, "assumed_norm": float(norm),
            "passed": bool(ok)}, 0 if ok else 1


def cmd_report(cfg: Config, args) -> tuple[dict, int]:
    model = cfg.model()
    rep = {"z0": cmd_z0(cfg, args)[0]}
    rep["xi_plus"] = estimate(partition_function(cfg.params, cfg.box, None, cfg.b("mc_per_term"), cfg.seed))
    rep["xi_minus"] = estimate(partition_function(model.negative, cfg.box, None, cfg.b("mc_per_term"), cfg.seed))
    gen = _rng.stream((cfg.seed,), _rng.TAG_PROBES, 200)
    probes = [cfg.box.uniform(gen, (1 + i % 3,)) for i in range(1000)]
    rep["ruelle"] = {k: v for k, v in ruelle_check(model, probes).items()}
    rep["lenard"] = _lenard(cfg)
    passed = rep["ruelle"]["passed"] and rep["lenard"]["passed"]
    if cfg.dim == 1:
        theta, srep = neumann_solve(cfg.params, cfg.box, min(int(cfg.b("N_max")), 3), None, float(cfg.b("tol")),
                                    nodes=int(cfg.b("nodes")))
        rep["solve_ks"] = srep.to_dict()
        passed = passed and srep.residual <= 1e-8
    batch = _batch(cfg, args)
    out = _out_dir(args)
    if out is not None:
        batch.write(out, "sample")
    rep["correlations"] = _verify_correlations(cfg, args, batch)
    passed = passed and rep["correlations"]["passed"]
    if cfg.potential.locally_stable:
        rep["gnz"] = _verify_gnz(cfg, args, batch)
        passed = passed and rep["gnz"]["passed"]
    rep["passed"] = bool(passed)
    _write_json(args, "report.json", rep)
    return rep, 0 if passed else 1


COMMANDS = {
    "z0": cmd_z0,
    "xi": cmd_xi,
    "theta": cmd_theta,
    "janossy": cmd_janossy,
    "solve-ks": cmd_solve_ks,
    "sample": cmd_sample,
    "verify-correlations": cmd_verify_correlations,
    "verify-gnz": cmd_verify_gnz,
    "lenard-check": cmd_lenard_check,
    "multibody-kernel": cmd_multibody_kernel,
    "multibody-solve": cmd_multibody_solve,
    "report": cmd_report,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kirkwood", description="Kirkwood closure process toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="model JSON file")
        s.add_argument("--out", default=None, help="directory for artifacts")
        s.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--z", type=float, default=None, help="override the activity")
        s.add_argument("--n", type=int, default=None, help="number of samples")
        s.add_argument("--override-disk-check", action="store_true",
                       help="allow z >= z0 (no existence guarantee)")
        if name in ("theta", "janossy", "multibody-kernel"):
            s.add_argument("--x", default=None, help="points as '0.1,0.6' or a JSON list")
        if name == "multibody-kernel":
            s.add_argument("--xn", default=None)
            s.add_argument("--y", default=None)
        if name in ("verify-gnz", "report"):
            s.add_argument("--check-kernel-bound", action="store_true",
                           help="fail when a kernel exceeds (z e^(2 beta B))^n")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
        if threads < 1:
            raise UsageError("--threads must be positive")
        args.threads = threads
        set_threads(threads)
        cfg = _load_config(args)
        if args.seed is not None and args.seed < 0:
            raise UsageError("--seed must be nonnegative")
        result, code = COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        sys.stderr.write(_dumps({"error": "usage", "message": str(exc)}) + "\n")
        return 2
    except (OutsideDisk, ModeUnsupported, ValueError) as exc:
        sys.stderr.write(_dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 2
    except KirkwoodError as exc:
        sys.stderr.write(_dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1
    sys.stdout.write(_dumps({"command": args.command, **result}) + "\n")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
