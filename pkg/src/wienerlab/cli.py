"""Command-line experiment runner.

Every invocation resolves a flat configuration (subcommand defaults, then an
optional JSON file, then explicit flags), runs one experiment, and persists a
run record as ``<out>/<timestamp>_<hash>/record.json``. Passing a previous
record to ``--config`` (or to ``rerun``) re-executes it with the stored
configuration; ``--threads`` never changes numerical results.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__, acceptance
from . import functionals as fn
from . import ou_gaussian as ou
from .checks import Check, all_passed, within
from .drift_opt import FAMILY_KINDS, OptConfig, PolicyFamily, optimize, reference_lhs
from .errors import InvalidArgument, WienerLabError
from .follmer import entropy_bound_check, entropy_identity_check, follmer_drift, follmer_policy, target_entropy
from .paths import AffinePolicy, BrownianSource, ConstantPolicy, DriftPolicy, ZeroPolicy, make_grid, ou_feedback
from .variational import GapReport, estimate_lhs, estimate_lhs_quadrature, estimate_rhs, truncation_sweep

OUT_ENV = "WIENERLAB_OUT"
RECORD_SCHEMA = "wienerlab.run/1"
SUBCOMMANDS = (
    "lhs", "rhs", "gap", "optimize", "follmer", "entropy", "truncation-sweep",
    "ou-ehc", "ou-rehc", "lsi", "suite",
)
POLICIES = ("zero", "constant", "ou", "affine", "follmer", "oracle")
EXPERIMENTS = ("acceptance",) + tuple(f"acceptance:{k}" for k in sorted(acceptance.CRITERIA))

COMMON = {"functional": "linear", "policy": "zero", "n": 100_000, "seed": 0, "steps": 100,
          "horizon": None, "threads": 1}
DEFAULTS: dict[str, dict[str, Any]] = {
    "lhs": {**COMMON, "method": "mc"},
    "rhs": dict(COMMON),
    "gap": {**COMMON, "lhs_method": "mc"},
    "optimize": {**COMMON, "family": "linear_feedback", "pieces": 10, "clamp": None, "iters": 200,
                 "batch": 2048, "lr": 0.05, "decay": 0.995, "heldout": 20_000, "eval_every": 10, "tol": None},
    "follmer": {**COMMON, "n": 10_000, "steps": 400, "points": [[0.0, 0.0]], "allowance": 0.01},
    "entropy": {**COMMON, "policy": "ou", "n": 20_000, "steps": 400},
    "truncation-sweep": {"functional": "quadratic", "side": "upper", "levels": [1, 2, 4, 8, 16, 64],
                         "with_rhs": False, "n": 20_000, "seed": 0, "steps": 20, "threads": 1},
    "ou-ehc": {"field": "sin", "t": np.geomspace(0.05, 3.0, 8).tolist()},
    "ou-rehc": {"field": "sin", "t": [0.25, 0.5, 0.75, 1.0], "n": 100_000, "seed": 0, "steps": 4,
                "threads": 1},
    "lsi": {"fields": ["sin", "quadratic", "one_plus_sin", "mixed_2d", "exp"]},
    "suite": {"name": "acceptance"},
}
FLAG_KEYS = ("functional", "policy", "n", "seed", "steps", "horizon", "threads")


def artifact_version() -> str:
    return __version__


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


def _count(value) -> int:
    """Accept ``1e6`` style counts."""
    x = float(value)
    if x != int(x) or x < 1:
        raise InvalidArgument(f"expected a positive integer count, got {value!r}")
    return int(x)


def resolve_config(subcommand: str, overrides: dict | None = None) -> dict:
    if subcommand not in DEFAULTS:
        raise InvalidArgument(f"unknown subcommand {subcommand!r}; known: {SUBCOMMANDS}")
    cfg = dict(DEFAULTS[subcommand])
    for key, value in (overrides or {}).items():
        if key not in cfg:
            raise InvalidArgument(f"unknown option {key!r} for {subcommand!r}; known: {sorted(cfg)}")
        cfg[key] = value
    for key in ("n", "steps", "iters", "batch", "heldout", "pieces", "eval_every"):
        if key in cfg and cfg[key] is not None:
            cfg[key] = _count(cfg[key])
    if "seed" in cfg:
        cfg["seed"] = int(cfg["seed"])
    if "threads" in cfg:
        cfg["threads"] = max(1, int(cfg["threads"]))
    return cfg


def config_hash(subcommand: str, cfg: dict) -> str:
    keyed = {k: v for k, v in cfg.items() if k != "threads"}
    blob = json.dumps({"subcommand": subcommand, "config": keyed}, sort_keys=True, default=_jsonable)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def load_config(path) -> tuple[str | None, dict]:
    """Read a JSON config or a run record; returns ``(subcommand or None, config)``."""
    path = Path(path)
    if path.is_dir():
        path = path / "record.json"
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidArgument(f"cannot read config {str(path)!r}: {exc}") from exc
    if not isinstance(data, dict):
        raise InvalidArgument("config must be a JSON object")
    if data.get("schema") == RECORD_SCHEMA:
        return data["subcommand"], dict(data["config"])
    return data.pop("subcommand", None), data


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------


def _kv(rest: str) -> dict[str, float]:
    out = {}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        key, eq, value = item.partition("=")
        if not eq:
            raise InvalidArgument(f"expected key=value, got {item!r}")
        out[key.strip()] = float(value)
    return out


def parse_policy(spec: str, F: fn.CylinderFunctional, horizon: float) -> DriftPolicy:
    """``zero``, ``constant:a``, ``ou[:r]``, ``affine:a=..,b=..``, ``follmer`` or ``oracle``."""
    name, _, rest = spec.partition(":")
    if name == "zero":
        return ZeroPolicy()
    if name == "constant":
        value = float(rest.split("=")[-1]) if rest else 1.0
        return ConstantPolicy(value, cutoff=horizon, name=f"constant:{value:g}")
    if name == "ou":
        rate = _kv(rest).get("rate", 1.0) if "=" in rest else float(rest or 1.0)
        return ou_feedback(rate, cutoff=horizon)
    if name == "affine":
        p = _kv(rest)
        a, b = p.get("a", 0.0), p.get("b", 0.0)
        return AffinePolicy(lambda t: (a, b), cutoff=horizon, name=f"affine:a={a:g},b={b:g}")
    if name == "follmer":
        return follmer_policy(F)
    if name == "oracle":
        if F.optimal_policy is None:
            raise InvalidArgument(f"no oracle policy known for {F.name!r}")
        return F.optimal_policy()
    raise InvalidArgument(f"unknown policy {spec!r}; known: {POLICIES}")


def _setup(cfg: dict):
    F = fn.parse_functional(cfg["functional"])
    horizon = float(cfg["horizon"]) if cfg.get("horizon") is not None else F.last_mark
    grid = make_grid(horizon, cfg["steps"], F.marks)
    src = BrownianSource(grid, cfg["n"], cfg["seed"], F.dim, cfg["threads"])
    return F, horizon, src


def _reference(F, src=None):
    try:
        return reference_lhs(F, src)
    except WienerLabError:
        return None


def _report(r) -> dict:
    return r.to_dict()


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"not serializable: {type(x).__name__}")


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------


def _lhs(cfg, art):
    if cfg["method"] == "quadrature":
        F = fn.parse_functional(cfg["functional"])
        lhs = estimate_lhs_quadrature(F)
    elif cfg["method"] == "mc":
        F, _, src = _setup(cfg)
        lhs = estimate_lhs(F, src)
    else:
        raise InvalidArgument(f"unknown method {cfg['method']!r}")
    checks = []
    if F.log_mgf is not None:
        checks.append(within("lhs vs closed form", lhs.value, F.log_mgf, 3 * lhs.std_error + 1e-9))
    return {"lhs": _report(lhs), "closed_form": F.log_mgf}, checks


def _rhs(cfg, art):
    F, horizon, src = _setup(cfg)
    rhs = estimate_rhs(F, parse_policy(cfg["policy"], F, horizon), src)
    checks, ref = [], _reference(F)
    if ref is not None:
        checks.append(Check("rhs - reference lhs", rhs.value - ref.value, "<=", 3 * rhs.std_error))
    return {"rhs": _report(rhs), "reference_lhs": None if ref is None else ref.value}, checks


def _gap(cfg, art):
    F, horizon, src = _setup(cfg)
    policy = parse_policy(cfg["policy"], F, horizon)
    if cfg["lhs_method"] == "mc":
        lhs = estimate_lhs(F, src)
    elif cfg["lhs_method"] == "reference":
        lhs = reference_lhs(F, src)
    else:
        raise InvalidArgument(f"unknown lhs_method {cfg['lhs_method']!r}")
    gap = GapReport.build(lhs, estimate_rhs(F, policy, src))
    return {"gap": gap.to_dict()}, [Check("gap", gap.gap, ">=", -3 * gap.gap_se)]


def _optimize(cfg, art):
    F = fn.parse_functional(cfg["functional"])
    horizon = float(cfg["horizon"]) if cfg.get("horizon") is not None else F.last_mark
    family = PolicyFamily(cfg["family"], horizon=horizon, dim=F.dim, pieces=cfg["pieces"], clamp=cfg["clamp"])
    config = OptConfig(iters=cfg["iters"], batch=cfg["batch"], steps=cfg["steps"], lr=cfg["lr"],
                       decay=cfg["decay"], heldout=cfg["heldout"], eval_every=cfg["eval_every"], seed=cfg["seed"])
    _, trace = optimize(F, family, config)
    art["trace.jsonl"] = trace.to_jsonl()
    checks, ref = [], _reference(F)
    if ref is not None:
        checks.append(Check("best heldout - reference lhs", trace.best_heldout - ref.value, "<=",
                            3 * trace.best_heldout_se))
        if cfg["tol"] is not None:
            checks.append(Check("best heldout - (lhs - tol)", trace.best_heldout - (ref.value - cfg["tol"]), ">=", 0))
    results = {"best_theta": trace.best_theta, "best_heldout": trace.best_heldout,
               "best_heldout_se": trace.best_heldout_se, "initial_heldout": trace.initial_heldout,
               "reference_lhs": None if ref is None else ref.value}
    return results, checks


def _follmer(cfg, art):
    F, horizon, src = _setup(cfg)
    drifts = []
    for t, *x in cfg["points"]:
        x = np.asarray(x if len(x) == F.dim else [x[0]] * F.dim, dtype=float)
        drifts.append({"t": t, "x": x.tolist(), "u": follmer_drift(F, t, x).tolist()})
    results, checks = {"drift": drifts}, []
    if F.n_marks == 1:
        rep = entropy_identity_check(F, src, allowance=cfg["allowance"])
        results["entropy"] = {"H": rep.entropy.value, "method": rep.entropy.method,
                              "half_action": _report(rep.half_action), "diff": rep.diff}
        checks.append(within("|H - action/2|", rep.diff, 0.0, rep.tolerance))
    else:
        results["entropy"] = {"H": target_entropy(F).value}
    return results, checks


def _entropy(cfg, art):
    F, horizon, src = _setup(cfg)
    rep = entropy_bound_check(parse_policy(cfg["policy"], F, horizon), src, F.marks)
    results = {"kl": rep.entropy.value, "method": rep.entropy.method,
               "half_action": _report(rep.half_action), "slack": rep.slack}
    return results, [Check("slack", rep.slack, ">=", -3 * rep.half_action.std_error)]


def _sweep(cfg, art):
    F = fn.parse_functional(cfg["functional"])
    levels = [float(v) for v in cfg["levels"]]
    if cfg["side"] == "upper":
        specs = [fn.TruncationSpec(upper=v) for v in levels]
    elif cfg["side"] == "lower":
        specs = [fn.TruncationSpec(lower=v) for v in levels]
    else:
        raise InvalidArgument("side must be 'upper' or 'lower'")
    base = None
    if cfg["with_rhs"]:
        base = BrownianSource(make_grid(F.last_mark, cfg["steps"], F.marks), cfg["n"], cfg["seed"], F.dim,
                              cfg["threads"])
    rows = truncation_sweep(F, specs, base=base)
    fields = ("upper", "lower", "lhs", "lhs_se", "rhs", "rhs_se")
    table = [[getattr(r, k) for k in fields] for r in rows]
    art["sweep.csv"] = (fields, table)
    lhs = np.array([r.lhs for r in rows])
    sign = 1.0 if cfg["side"] == "upper" else -1.0
    checks = [Check("monotone (min signed increment)", float(min(sign * np.diff(lhs), default=0.0)), ">=", 0.0)]
    if F.log_mgf is not None:
        checks.append(within("last level vs limit", float(lhs[-1]), F.log_mgf, 1e-6))
    return {"rows": [dict(zip(fields, row)) for row in table]}, checks


def _ou_ehc(cfg, art):
    f = ou.parse_field(cfg["field"])
    rows = [{"t": t, **vars(ou.ehc_check(f, float(t)))} for t in cfg["t"]]
    return {"rows": rows}, [Check(f"t={r['t']:.4g} deficit", r["deficit"], ">=", -1e-9) for r in rows]


def _ou_rehc(cfg, art):
    f = ou.parse_field(cfg["field"])
    rows, checks = [], []
    for t in cfg["t"]:
        src = BrownianSource(ou.rehc_grid(float(t), cfg["steps"]), cfg["n"], cfg["seed"], f.dim, cfg["threads"])
        rep = ou.rehc_check(f, float(t), src)
        rows.append({"t": t, "lhs": _report(rep.lhs), "rhs": _report(rep.rhs), "slack": rep.slack,
                     "slack_se": rep.slack_se, "lhs_quadrature": rep.lhs_quadrature,
                     "rhs_quadrature": rep.rhs_quadrature})
        checks.append(Check(f"t={t} slack", rep.slack, ">=", -3 * rep.slack_se))
    return {"rows": rows}, checks


def _lsi(cfg, art):
    rows = [{"field": name, **vars(ou.lsi_check(ou.parse_field(name)))} for name in cfg["fields"]]
    return {"rows": rows}, [Check(f"{r['field']} deficit", r["deficit"], ">=", -1e-9) for r in rows]


def _suite(cfg, art):
    name = cfg["name"]
    if name == "acceptance":
        numbers = None
    elif name.startswith("acceptance:"):
        numbers = [int(k) for k in name.split(":", 1)[1].split(",")]
        if any(k not in acceptance.CRITERIA for k in numbers):
            raise InvalidArgument(f"unknown criterion in {name!r}")
    else:
        raise InvalidArgument(f"unknown experiment {name!r}; known: {EXPERIMENTS}")
    results = acceptance.run_all(numbers)
    for r in results:
        print(r.line(), file=sys.stderr)
    checks = [Check(f"c{r.number} {c.name}", c.value, c.op, c.bound) for r in results for c in r.checks]
    return {"criteria": [r.to_dict() for r in results]}, checks


RUNNERS = {
    "lhs": _lhs, "rhs": _rhs, "gap": _gap, "optimize": _optimize, "follmer": _follmer, "entropy": _entropy,
    "truncation-sweep": _sweep, "ou-ehc": _ou_ehc, "ou-rehc": _ou_rehc, "lsi": _lsi, "suite": _suite,
}


def run(subcommand: str, overrides: dict | None = None) -> dict:
    """Execute one experiment and return its run record (not yet persisted).

    Invalid configurations raise :class:`InvalidArgument`; other module errors
    are captured in the record (``error``) and make it fail.
    """
    cfg = resolve_config(subcommand, overrides)
    started = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    artifacts: dict = {}
    try:
        results, checks = RUNNERS[subcommand](cfg, artifacts)
        error = None
    except InvalidArgument:
        raise
    except WienerLabError as exc:
        results, checks, error = {}, [], f"{type(exc).__name__}: {exc}"
    return {
        "schema": RECORD_SCHEMA,
        "artifact_version": artifact_version(),
        "subcommand": subcommand,
        "config": cfg,
        "config_hash": config_hash(subcommand, cfg),
        "started_at": started.isoformat(timespec="seconds"),
        "wall_clock_seconds": time.perf_counter() - t0,
        "results": results,
        "checks": [c.to_dict() for c in checks],
        "error": error,
        "passed": error is None and all_passed(checks),
        "_artifacts": artifacts,
    }


def write_record(record: dict, out_dir=None) -> Path:
    """Write ``record.json`` (and any tables) into a fresh run directory; returns the record path."""
    root = Path(out_dir or os.environ.get(OUT_ENV, "runs"))
    stamp = record["started_at"].replace(":", "").replace("-", "").replace("+0000", "Z")
    base = root / f"{stamp}_{record['config_hash']}"
    run_dir, k = base, 0
    while True:
        try:
            run_dir.mkdir(parents=True, exist_ok=False)
            break
        except FileExistsError:
            k += 1
            run_dir = base.with_name(f"{base.name}-{k}")
    artifacts = record.get("_artifacts", {})
    body = {k: v for k, v in record.items() if k != "_artifacts"}
    body["artifacts"] = sorted(artifacts)
    for name, content in artifacts.items():
        if name.endswith(".csv"):
            header, rows = content
            with open(run_dir / name, "x", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                w.writerows(rows)
        else:
            (run_dir / name).write_text(content)
    path = run_dir / "record.json"
    with open(path, "x") as fh:
        json.dump(body, fh, indent=2, default=_jsonable, allow_nan=True)
    return path


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def list_catalog(kind: str) -> dict:
    if kind == "functionals":
        return {name: fn.parameter_schema(name) for name in fn.CATALOG}
    if kind == "policies":
        return {"policies": list(POLICIES), "families": list(FAMILY_KINDS)}
    if kind == "experiments":
        return {"experiments": list(EXPERIMENTS)}
    if kind == "fields":
        return {"fields": list(ou.FIELDS)}
    raise InvalidArgument(f"unknown catalog kind {kind!r}; expected functionals, policies, experiments or fields")


def _value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wienerlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS + ("rerun",):
        sp = sub.add_parser(name)
        if name == "rerun":
            sp.add_argument("record", help="run record (file or run directory)")
        sp.add_argument("--functional", default=argparse.SUPPRESS)
        sp.add_argument("--policy", default=argparse.SUPPRESS)
        sp.add_argument("--n", default=argparse.SUPPRESS, type=float)
        sp.add_argument("--seed", default=argparse.SUPPRESS, type=int)
        sp.add_argument("--steps", default=argparse.SUPPRESS, type=float)
        sp.add_argument("--horizon", default=argparse.SUPPRESS, type=float)
        sp.add_argument("--threads", default=argparse.SUPPRESS, type=int)
        sp.add_argument("--name", default=argparse.SUPPRESS, help="experiment name for suite")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key; VALUE is parsed as JSON when possible")
        sp.add_argument("--config", help="JSON config or previous run record")
        sp.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
        sp.add_argument("--no-write", action="store_true", help="print the record without persisting it")
    ls = sub.add_parser("list")
    ls.add_argument("kind", choices=("functionals", "policies", "experiments", "fields"))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "list":
            print(json.dumps(list_catalog(args.kind), indent=2, default=_jsonable))
            return 0
        subcommand, cfg = args.command, {}
        source = args.record if args.command == "rerun" else args.config
        if source:
            stored_sub, cfg = load_config(source)
            if subcommand == "rerun":
                if stored_sub is None:
                    raise InvalidArgument("rerun needs a run record")
                subcommand = stored_sub
            elif stored_sub not in (None, subcommand):
                raise InvalidArgument(f"config is for {stored_sub!r}, not {subcommand!r}")
        flags = vars(args)
        cfg.update({k: flags[k] for k in FLAG_KEYS + ("name",) if k in flags})
        for item in args.set:
            key, eq, value = item.partition("=")
            if not eq:
                raise InvalidArgument(f"--set expects KEY=VALUE, got {item!r}")
            cfg[key] = _value(value)
        record = run(subcommand, cfg)
    except InvalidArgument as exc:
        print(f"wienerlab: error: {exc}", file=sys.stderr)
        return 2
    if record["error"]:
        print(f"wienerlab: {record['error']}", file=sys.stderr)
    if args.no_write:
        print(json.dumps({k: v for k, v in record.items() if k != "_artifacts"}, indent=2, default=_jsonable))
    else:
        print(write_record(record, args.out))
    for c in record["checks"]:
        print(Check.from_dict(c).line(), file=sys.stderr)
    if record["error"]:
        return 3
    return 0 if record["passed"] else 1


if __name__ == "__main__":
    sys.exit(main())
