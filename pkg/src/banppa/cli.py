"""Command-line interface: ``banppa {simulate,split,fit,evaluate,compare,gtable}``.

Exit codes: 0 success, 1 usage, 2 data/I-O, 3 numerical failure. A JSON
``--config`` file may set any option by its long name (dashes or
underscores); values from the file override command-line flags.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .gp import ConditioningError
from .sequences import ContractViolation, FormatError, ValidationError, load_dataset, save_dataset, split_train_test

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

# pseudo-input counts per dataset family
M_PRESETS = {"A": 18, "B": 24, "microblog": 30, "citation": 30}

log = logging.getLogger("banppa")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


# --- commands ---------------------------------------------------------------


def cmd_simulate(args) -> int:
    from .synthgen import generate, ground_truth_path, preset

    spec = preset(args.variant, seed=args.seed, **({"D": args.D} if args.D else {}))
    ds, truth = generate(spec)
    out = Path(args.out or f"synthetic_{spec.which}_seed{args.seed}.events")
    save_dataset(ds, out)
    truth.save(ground_truth_path(out))
    written = [out]
    if args.split:
        tr, te = split_train_test(ds, np.random.default_rng(args.split_seed))
        written.append(save_dataset(tr, out.with_name(out.stem + ".train.events")))
        written.append(save_dataset(te, out.with_name(out.stem + ".test.events")))
    for p in written:
        print(p)
    return EXIT_OK


def cmd_split(args) -> int:
    ds = load_dataset(args.input)
    tr, te = split_train_test(ds, np.random.default_rng(args.seed))
    inp = Path(args.input)
    train_out = Path(args.train_out or inp.with_name(inp.stem + ".train.events"))
    test_out = Path(args.test_out or inp.with_name(inp.stem + ".test.events"))
    save_dataset(tr, train_out)
    save_dataset(te, test_out)
    print(train_out)
    print(test_out)
    return EXIT_OK


def _fit_config(args):
    from .optimize import FitConfig

    M = args.M if args.M is not None else M_PRESETS.get(args.preset or "A", 18)
    return FitConfig(
        variant=args.variant,
        K=args.K,
        M=M,
        max_outer=args.max_outer,
        inner_tol=args.inner_tol,
        outer_tol=args.outer_tol,
        learn_alpha=args.fix_alpha is None,
        alpha=args.fix_alpha if args.fix_alpha is not None else args.alpha,
        seed=args.seed,
        gamma=args.gamma,
        lengthscale=args.lengthscale,
        learn_lengthscale=not args.fix_lengthscale,
        restarts=args.restarts,
    )


def cmd_fit(args) -> int:
    from .optimize import outer_loop

    ds = load_dataset(args.data)
    try:
        cfg = _fit_config(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    res = outer_loop(ds, cfg)
    out = Path(args.out or Path(args.data).with_suffix(".fit.json"))
    res.state.meta["wall_time"] = res.wall_time
    res.state.meta["termination"] = res.termination
    res.state.save(out)
    record = res.to_dict()
    record["tool_version"] = __version__
    record["config_hash"] = cfg.digest()
    if cfg.variant != "banppa":
        record.pop("residual_trace")
        record.pop("multiplier_trace")
    _write_json(out.with_name(out.name + ".result.json"), record)
    res.write_traces(out.with_name(out.name + ".trace.csv"), residuals=cfg.variant == "banppa")
    if res.termination != "converged" or res.degraded:
        log.warning("fit finished with termination=%s degraded=%s", res.termination, res.degraded)
    print(out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluate import EvalConfig, build_report
    from .model import ContractError, ModelState

    fit = ModelState.load(args.fit)
    test = load_dataset(args.test)
    train = load_dataset(args.train) if args.train else test
    cfg = EvalConfig(samples=args.samples, seed=args.seed, grid_points=args.grid, rate_law=args.rate_law)
    try:
        rep = build_report(fit, train, test, cfg)
    except ContractError as exc:
        raise DataError(str(exc)) from None
    out = Path(args.out or Path(args.fit).with_suffix(".report.json"))
    rep.meta["config_hash"] = _config_hash(asdict(cfg))
    rep.save(out)
    if args.tables:
        rep.write_tables(args.tables, fit, cfg.grid_points)
    print(out)
    return EXIT_OK


COMPARE_COLUMNS = ["variant", "K", "test_likelihood", "test_likelihood_sampled", "ner_top4", "active", "wall_time", "fit"]


def compare_rows(fits: list, test, samples: int = 100, seed: int = 0) -> list[dict]:
    """One row per ``(path, ModelState)``; sorted by ``(variant, K, path)``."""
    from .evaluate import active_components, ner, test_likelihood_point, test_likelihood_sampled, top_mass

    ref = fits[0][1]
    rows = []
    for path, fit in fits:
        if fit.window != ref.window or list(fit.seq_ids) != list(ref.seq_ids):
            raise DataError(f"{path}: fit was trained on a different split")
        nv = ner(fit)
        sampled = None
        if fit.variant != "lppa":
            sampled = test_likelihood_sampled(fit, test, samples, np.random.default_rng(seed))[0]
        rows.append({
            "variant": fit.variant,
            "K": fit.K,
            "test_likelihood": test_likelihood_point(fit, test),
            "test_likelihood_sampled": sampled,
            "ner_top4": top_mass(nv, 4),
            "active": int(active_components(nv).size),
            "wall_time": fit.meta.get("wall_time"),
            "fit": str(path),
        })
    rows.sort(key=lambda r: (r["variant"], r["K"], r["fit"]))
    return rows


def cmd_compare(args) -> int:
    from .model import ContractError, ModelState

    if len(args.fits) < 2:
        raise UsageError("compare needs at least two fit files")
    fits = [(p, ModelState.load(p)) for p in args.fits]
    test = load_dataset(args.test)
    try:
        rows = compare_rows(fits, test, args.samples, args.seed)
    except ContractError as exc:
        raise DataError(str(exc)) from None
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        wr = csv.DictWriter(fh, fieldnames=COMPARE_COLUMNS)
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


def cmd_gtable(args) -> int:
    from .gtable import build_gtable

    tbl = build_gtable(z1=args.z1, zmax=args.zmax, n1=args.n1, n2=args.n2)
    print(tbl.save(args.out))
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="banppa", description="Bayesian nonparametric Poisson-process allocation")
    p.add_argument("--version", action="version", version=f"banppa {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON file whose keys override flags")
        sp.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("simulate", help="generate a synthetic corpus")
    common(s)
    s.add_argument("--variant", required=True, choices=["A", "B", "C", "D", "E"])
    s.add_argument("--D", type=int, default=None, help="override the number of sequences")
    s.add_argument("--out")
    s.add_argument("--split", action="store_true", help="also write a train/test split")
    s.add_argument("--split-seed", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("split", help="per-event 50/50 train/test split")
    common(s)
    s.add_argument("--input", required=True)
    s.add_argument("--train-out")
    s.add_argument("--test-out")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("fit", help="fit a model to a dataset")
    common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--variant", default="banppa", choices=["lppa", "banppa-nc", "banppa"])
    s.add_argument("--K", type=int, default=14)
    s.add_argument("--M", type=int, default=None)
    s.add_argument("--preset", choices=sorted(M_PRESETS), help="pick M for a dataset family")
    s.add_argument("--max-outer", type=int, default=15)
    s.add_argument("--inner-tol", type=float, default=1e-3)
    s.add_argument("--outer-tol", type=float, default=1e-3)
    s.add_argument("--alpha", type=float, default=1.0, help="initial concentration")
    s.add_argument("--fix-alpha", type=float, default=None, help="hold the concentration fixed")
    s.add_argument("--gamma", type=float, default=None, help="kernel amplitude (default A/|T|)")
    s.add_argument("--lengthscale", type=float, default=None)
    s.add_argument("--fix-lengthscale", action="store_true")
    s.add_argument("--restarts", type=int, default=5, help="independent random starts; the best final training objective wins")
    s.add_argument("--out")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("evaluate", help="score a fit on held-out data")
    common(s)
    s.add_argument("--fit", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--train")
    s.add_argument("--samples", type=int, default=100)
    s.add_argument("--rate-law", default="conditional", choices=["conditional", "prior", "point"])
    s.add_argument("--grid", type=int, default=200)
    s.add_argument("--out")
    s.add_argument("--tables", help="directory for CSV exports")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("compare", help="tabulate several fits on one split")
    common(s)
    s.add_argument("--fits", nargs="+", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--samples", type=int, default=100)
    s.add_argument("--out")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("gtable", help="write the G look-up table")
    common(s)
    s.add_argument("--out", required=True)
    s.add_argument("--z1", type=float, default=20.0)
    s.add_argument("--zmax", type=float, default=1e6)
    s.add_argument("--n1", type=int, default=2000)
    s.add_argument("--n2", type=int, default=2000)
    s.set_defaults(func=cmd_gtable)
    return p


def apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace) -> argparse.Namespace:
    if not getattr(args, "config", None):
        return args
    try:
        overrides = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(overrides, dict):
        raise UsageError("config file must hold a JSON object")
    for key, val in overrides.items():
        dest = key.replace("-", "_")
        if dest in ("command", "func", "config") or not hasattr(args, dest):
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        setattr(args, dest, val)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command")
        args = apply_config(parser, args)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"banppa: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConditioningError, np.linalg.LinAlgError, FloatingPointError, ArithmeticError) as exc:
        # LinAlgError derives from ValueError, so this comes first
        print(f"banppa: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, FormatError, ValidationError, ContractViolation, OSError, ValueError) as exc:
        print(f"banppa: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
