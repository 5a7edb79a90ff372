"""Command-line entry point: ``fbdsdej {solve,check,calculus,study}``.

Exit codes: 0 success, 1 configuration or I/O error, 2 theorem
preconditions fail, 3 continuation stalled, 4 a checker failed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import time
import warnings
from dataclasses import replace
from importlib import resources

import jsonschema
import numpy as np

from . import __version__
from .calculus import (halving_ok, identity_suite, left_endpoint_backward, martingale_suite,
                       product_battery)
from .coefficients import (LipschitzConstants, MonotoneParams, canonical_monotone_family,
                           check_lipschitz, check_monotonicity, general_affine_family,
                           rank_bounds, validate_theorem_preconditions, zero_family)
from .continuation import (ContinuationConfig, ContinuationStalled, NoContraction,
                           PreconditionError, continuation_solve, measure_contraction)
from .decoupled import h2_norm
from .noise import (Dims, MarkSpace, RegressionEngine, TreeConfig, build_tree, make_grid,
                    sample_paths)
from .verification import decay_study, uniqueness_probe

DEFAULT_SEED = 0xFBD5DE
SEED_ENV = "FBDSDEJ_SEED"

EXIT_OK, EXIT_CONFIG, EXIT_PRECONDITION, EXIT_STALLED, EXIT_CHECK = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration


def _schema() -> dict:
    return json.loads(resources.files("fbdsdej").joinpath("config_schema.json").read_text())


def _key(path) -> str:
    return ".".join(str(p) for p in path) or "<root>"


def load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    validator = jsonschema.Draft202012Validator(_schema())
    error = jsonschema.exceptions.best_match(validator.iter_errors(cfg))
    if error is not None:
        raise ConfigError(f"config key '{_key(error.absolute_path)}': {error.message}")


_CANONICAL_KEYS = {"theta1", "theta2", "beta1", "beta2", "psi0", "phi0", "flipped"}
_MONOTONE_KEYS = ("theta1", "theta2", "beta1", "beta2")


def _array(value, key):
    try:
        return np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"config key '{key}': not a numeric array") from None


def build_coefficients(cfg: dict):
    """Coefficient set described by a validated config."""
    d = cfg["dims"]
    dims = Dims(d["n"], d["m"], d.get("d", 1), d.get("l", 1))
    m = cfg.get("marks", {})
    marks = MarkSpace(tuple(m.get("weights", ())),
                      tuple(m["labels"]) if "labels" in m else None)
    R = _array(cfg["R"], "R") if "R" in cfg else None
    if R is not None and R.shape != (dims.m, dims.n):
        raise ConfigError(f"config key 'R': shape {R.shape}, expected {(dims.m, dims.n)}")
    loads = {k: _array(v, f"loadings.{k}") for k, v in cfg.get("loadings", {}).items()}
    constants = LipschitzConstants(**cfg["constants"]) if "constants" in cfg else None
    orientation = cfg.get("orientation", "standard")
    fam = cfg["family"]
    params = dict(fam.get("params", {}))
    name = fam["name"]
    try:
        if name == "Zero":
            unknown = set(params) - set(_MONOTONE_KEYS)
            if unknown:
                raise ConfigError(f"config key 'family.params.{sorted(unknown)[0]}': "
                                  "Zero only takes declared monotonicity constants")
            mono = MonotoneParams(*(float(params.get(k, 0.0)) for k in _MONOTONE_KEYS))
            return zero_family(dims, marks, R, constants=constants, orientation=orientation,
                               monotone=mono, **loads)
        if name == "CanonicalMonotone":
            unknown = set(params) - _CANONICAL_KEYS
            if unknown:
                raise ConfigError(f"config key 'family.params.{sorted(unknown)[0]}': unknown parameter")
            return canonical_monotone_family(dims, marks, R, constants=constants,
                                             orientation=orientation, **params, **loads)
        unknown = set(params) - {"matrices", "offsets", "monotone"}
        if unknown:
            raise ConfigError(f"config key 'family.params.{sorted(unknown)[0]}': unknown parameter")
        matrices = {k: _array(v, f"family.params.matrices.{k}")
                    for k, v in params.get("matrices", {}).items()}
        offsets = {k: _array(v, f"family.params.offsets.{k}")
                   for k, v in params.get("offsets", {}).items()}
        mono = params.get("monotone", {})
        monotone = MonotoneParams(*(float(mono.get(k, 0.0)) for k in _MONOTONE_KEYS))
        return general_affine_family(dims, marks, np.eye(dims.m, dims.n) if R is None else R,
                                     matrices, offsets, monotone=monotone,
                                     constants=constants, orientation=orientation, **loads)
    except ConfigError:
        raise
    except TypeError as exc:
        raise ConfigError(f"config key 'family.params': {exc}") from None
    except ValueError as exc:
        if str(exc).startswith("invalid constants"):
            raise PreconditionError([str(exc)]) from None
        raise ConfigError(f"config key 'family': {exc}") from None


def build_engine(cfg: dict, coeffs, backend: str, seed: int, N: int | None = None):
    g = cfg["grid"]
    grid = make_grid(g["T"], N or g["N"])
    try:
        if backend == "mc":
            mc = cfg.get("mc", {})
            bundle = sample_paths(grid, coeffs.dims, coeffs.marks, mc.get("paths", 4096), seed)
            return RegressionEngine(bundle, coeffs.dims, mc.get("degree", 2))
        return build_tree(grid, coeffs.dims, coeffs.marks, TreeConfig(**cfg.get("tree", {})))
    except ValueError as exc:
        raise ConfigError(f"config key 'grid': {exc}") from None


def continuation_config(cfg: dict, backend: str) -> ContinuationConfig:
    return ContinuationConfig(**cfg.get("continuation", {}), backend=backend)


def resolve_seed(flag: int | None, cfg: dict | None = None) -> int:
    """Flag, then environment, then config, then the fixed default."""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env, 0)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
    if cfg and "seed" in cfg:
        return cfg["seed"]
    return DEFAULT_SEED


# ---------------------------------------------------------------------------
# Output


def _plain(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"not serializable: {type(x).__name__}")


def dumps(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2, default=_plain) + "\n"


def write_atomic(path: str, text: str) -> None:
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".fbdsdej-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit(doc, out: str | None) -> None:
    text = dumps(doc)
    if out:
        write_atomic(out, text)
    else:
        sys.stdout.write(text)


def convergence_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["level", "iteration", "distance", "ratio"])
    for lv_index, lv in enumerate(report.levels):
        for k, d in enumerate(lv.distances):
            prev = lv.distances[k - 1] if k else None
            ratio = d / prev if prev else ""
            w.writerow([lv_index, k + 1, repr(d), repr(ratio) if ratio != "" else ""])
    return buf.getvalue()


def summarize(field, engine, marks) -> dict:
    E = engine.expect
    return {
        "y_0": np.atleast_1d(E(field.y[0])).tolist(),
        "Y_0": np.atleast_1d(E(field.Y[0])).tolist(),
        "y_T": np.atleast_1d(E(field.y[-1])).tolist(),
        "Y_T": np.atleast_1d(E(field.Y[-1])).tolist(),
        "E_abs_y_T_sq": float(E(np.sum(field.y[-1] ** 2, -1))),
        "E_abs_Y_T_sq": float(E(np.sum(field.Y[-1] ** 2, -1))),
        "h2_norm": h2_norm(field, engine, marks),
    }


def _header(command, cfg, seed, backend) -> dict:
    return {"command": command, "version": __version__, "seed": seed, "backend": backend,
            "problem": {"family": cfg["family"]["name"], "dims": cfg["dims"], "grid": cfg["grid"]}}


# ---------------------------------------------------------------------------
# Commands


def cmd_solve(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args.seed, cfg)
    backend = args.backend or cfg.get("backend", "tree")
    doc = _header("solve", cfg, seed, backend)
    started = time.perf_counter()
    try:
        coeffs = build_coefficients(cfg)
        engine = build_engine(cfg, coeffs, backend, seed)
        config = continuation_config(cfg, backend)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            field, report = continuation_solve(coeffs, config, engine)
        doc["warnings"] = [str(w.message) for w in caught]
    except PreconditionError as exc:
        doc.update(status="precondition", violations=exc.violations)
        emit(doc, args.out)
        print(f"precondition failure: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (ContinuationStalled, NoContraction) as exc:
        doc.update(status="stalled", message=str(exc))
        emit(doc, args.out)
        print(f"continuation stalled: {exc}", file=sys.stderr)
        return EXIT_STALLED
    doc.update(
        status="converged",
        variant=report.variant,
        solution=summarize(field, engine, coeffs.marks),
        convergence=report.to_dict(timing=args.timing),
        contraction=measure_contraction(report).to_dict(),
        residuals=report.final_residual,
        checks={"preconditions": validate_theorem_preconditions(coeffs).to_dict()},
    )
    if args.timing:
        doc["timing"] = {"total_seconds": time.perf_counter() - started}
    emit(doc, args.out)
    if args.csv:
        write_atomic(args.csv, convergence_csv(report))
    return EXIT_OK


def cmd_check(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args.seed, cfg)
    doc = _header("check", cfg, seed, "none")
    try:
        coeffs = build_coefficients(cfg)
    except PreconditionError as exc:
        doc.update(status="fail", violations=exc.violations)
        emit(doc, args.out)
        return EXIT_CHECK
    opts = cfg.get("check", {})
    mono = check_monotonicity(coeffs, samples=opts.get("samples", 10_000), seed=seed,
                              tolerance=opts.get("tolerance", 1e-10))
    lip = check_lipschitz(coeffs, seed=seed)
    verdict = validate_theorem_preconditions(coeffs)
    try:
        lo, hi = rank_bounds(coeffs.R)
        rank = {"min_singular": lo, "max_singular": hi, "full_rank": True}
    except ValueError as exc:
        rank = {"full_rank": False, "message": str(exc)}
    passed = mono.passed and lip.passed and verdict.valid and rank["full_rank"]
    doc.update(status="pass" if passed else "fail", monotonicity=mono.to_dict(),
               lipschitz=lip.to_dict(), preconditions=verdict.to_dict(), rank=rank)
    emit(doc, args.out)
    return EXIT_OK if passed else EXIT_CHECK


def cmd_calculus(args) -> int:
    seed = resolve_seed(args.seed)
    sizes = tuple(int(s) for s in args.sizes.split(","))
    backward = left_endpoint_backward if args.self_test else None
    rows = identity_suite(args.trials, args.max_steps, seed,
                          **({"backward": backward} if backward else {}))
    deviation = max(r.deviation for r in rows)
    mart, anticipating = martingale_suite(seed=seed)
    product = product_battery(sizes, jumps=args.jumps > 0)
    halving = halving_ok(product)
    doc = {
        "command": "calculus", "version": __version__, "seed": seed,
        "identities": {"max_deviation": deviation, "rows": [r.to_dict() for r in rows]},
        "martingale": {"adapted_pass": all(r.is_martingale for r in mart),
                       "max_violation": max(r.violation for r in mart),
                       "anticipating_detected": not anticipating.is_martingale,
                       "anticipating_violation": anticipating.violation},
        "product": {"rows": [r.to_dict() for r in product], "halving": halving,
                    "max_jump_term": max(abs(r.jump_term) for r in product)},
    }
    if args.self_test:
        detected = deviation > 1e-12
        doc["self_test"] = {"wrong_endpoint_deviation": deviation, "detected": detected}
        emit(doc, args.out)
        return EXIT_OK if detected else EXIT_CHECK
    ok = (deviation <= 1e-12 and doc["martingale"]["adapted_pass"]
          and doc["martingale"]["anticipating_detected"]
          and all(r.within for r in product) and all(halving.values()))
    doc["status"] = "pass" if ok else "fail"
    emit(doc, args.out)
    return EXIT_OK if ok else EXIT_CHECK


def cmd_study(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args.seed, cfg)
    backend = args.backend or cfg.get("backend", "tree")
    doc = _header("study", cfg, seed, backend)
    opts = cfg.get("study", {})
    sweeps = ("decay", "delta", "uniqueness") if args.sweep == "all" else (args.sweep,)
    try:
        coeffs = build_coefficients(cfg)
        config = continuation_config(cfg, backend)
        engine = build_engine(cfg, coeffs, backend, seed)
        if "decay" in sweeps:
            try:
                table = decay_study(coeffs, tuple(opts.get("sizes", (2, 4, 8, 16))),
                                    T=cfg["grid"]["T"],
                                    tree_config=TreeConfig(**cfg.get("tree", {})),
                                    config=config, threads=args.threads)
            except ValueError as exc:
                if not str(exc).startswith("tree too large"):
                    raise
                raise ConfigError(f"config key 'study.sizes': {exc}") from None
            doc["decay"] = table.to_dict()
        if "delta" in sweeps:
            rows = []
            for delta in opts.get("deltas", (0.5, 0.25, 0.125, 0.0625)):
                _, rep = continuation_solve(coeffs, replace(config, delta=delta, adaptive=False),
                                            engine)
                s = measure_contraction(rep)
                rows.append({"delta": delta, "max_ratio": s.max_ratio,
                             "max_ratio_after_first": s.max_ratio_after_first,
                             "levels": len(rep.levels)})
            doc["delta_sweep"] = rows
        if "uniqueness" in sweeps:
            dist = uniqueness_probe(coeffs, engine, config, opts.get("trials", 5), seed,
                                    threads=args.threads)
            doc["uniqueness"] = {"trials": opts.get("trials", 5), "max_pairwise_distance": dist,
                                 "tolerance": config.tolerance}
    except PreconditionError as exc:
        doc.update(status="precondition", violations=exc.violations)
        emit(doc, args.out)
        return EXIT_PRECONDITION
    except (ContinuationStalled, NoContraction) as exc:
        doc.update(status="stalled", message=str(exc))
        emit(doc, args.out)
        return EXIT_STALLED
    doc["status"] = "done"
    emit(doc, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fbdsdej", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, metavar="PATH")
        p.add_argument("--out", metavar="PATH", help="result file (default: stdout)")
        p.add_argument("--seed", type=_seed, metavar="U64",
                       help=f"overrides ${SEED_ENV}; default {DEFAULT_SEED:#x}")
        p.add_argument("--backend", choices=("tree", "mc"))
        p.add_argument("--threads", type=int, default=1, metavar="N")

    p = sub.add_parser("solve", help="solve the coupled system by continuation")
    common(p)
    p.add_argument("--csv", metavar="PATH", help="per-iteration distances as CSV")
    p.add_argument("--timing", action="store_true", help="include wall-clock times")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("check", help="run the coefficient checkers")
    common(p)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("calculus", help="discrete stochastic calculus identity suite")
    common(p, config=False)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--max-steps", type=int, default=6)
    p.add_argument("--sizes", default="4,8,16", help="step counts for the product formula")
    p.add_argument("--jumps", type=int, default=1, choices=(0, 1))
    p.add_argument("--self-test", action="store_true",
                   help="inject a left-endpoint backward integral; passes if detected")
    p.set_defaults(func=cmd_calculus)

    p = sub.add_parser("study", help="step-size, delta and uniqueness studies")
    common(p)
    p.add_argument("--sweep", choices=("decay", "delta", "uniqueness", "all"), default="all")
    p.set_defaults(func=cmd_study)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
