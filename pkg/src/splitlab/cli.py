"""Command-line entry point: ``splitlab <subcommand> [flags]``.

Every subcommand prints its fully resolved configuration as a JSON object on
the first line of standard output. Relative ``--out`` paths are resolved
against the directory named by ``SPLITLAB_OUTPUT_DIR`` (default: the current
directory).

Exit codes: 0 success, 1 check failure, 2 usage error, 3 insufficient data,
4 training divergence.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


from .correspondence import equivalence_check
from .gradcheck import gradcheck_layer
from .splitting import (
    ConfigurationError,
    InsufficientDataError,
    fit_order,
    gamma_grid,
    local_errors,
    order_study_csv,
)
from .systems import SYSTEMS, default_state
from .tensor import ContractError
from .training import DivergenceError, TaskSpec, TrainConfig, compare, default_configs, train

OUTPUT_ENV = "SPLITLAB_OUTPUT_DIR"
EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4
SCHEME_NAMES = {"euler": "euler", "lt": "lie-trotter", "sm": "strang-marchuk"}
EQUIVALENCE_TOLERANCE = 1e-12
GRAD_TOLERANCE = 1e-5


def _out_path(value: str | None, default_name: str) -> Path:
    base = Path(os.environ.get(OUTPUT_ENV, "."))
    path = Path(value) if value else Path(default_name)
    return path if path.is_absolute() else base / path


def _emit(obj) -> None:
    print(json.dumps(obj), flush=True)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def cmd_order_study(args) -> int:
    scheme = SCHEME_NAMES[args.scheme]
    out = _out_path(args.out, f"order_{args.system}_{args.scheme}_{args.substep}.csv")
    _emit({"command": "order-study", "system": args.system, "scheme": scheme, "substep": args.substep,
           "gamma_min": args.gamma_min, "gamma_max": args.gamma_max, "points": args.points, "out": str(out)})
    system = SYSTEMS[args.system]()
    state = default_state(args.system)
    try:
        grid = gamma_grid(args.gamma_min, args.gamma_max, args.points)
        samples = local_errors(system, state, scheme, args.substep, grid)
    except (ConfigurationError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    pairs = [(s.gamma, s.abs_error) for s in samples]
    _write(out, order_study_csv(pairs, scheme, args.substep, args.system))
    try:
        est = fit_order([g for g, _ in pairs], [e for _, e in pairs], [s.floor for s in samples])
    except InsufficientDataError as exc:
        below = all(s.abs_error <= s.floor for s in samples)
        _emit({"slope": None, "r2": None, "all_below_rounding_floor": below, "error": str(exc)})
        return EXIT_DATA
    _emit({"slope": est.slope, "intercept": est.intercept, "r2": est.r2, "used": sum(est.used)})
    return EXIT_OK


def _instances(seeds: int, d_model: int, n: int, heads: int):
    for seed in range(seeds):
        yield seed, d_model, n, heads


def cmd_claim_check(args) -> int:
    archs = ["transformer", "macaron"] if args.arch == "both" else [args.arch]
    out = _out_path(args.out, "claim_check.json")
    _emit({"command": "claim-check", "arch": archs, "d_model": args.d_model, "n": args.n, "heads": args.heads,
           "seeds": args.seeds, "perturb": args.perturb, "tolerance": EQUIVALENCE_TOLERANCE, "out": str(out)})
    try:
        reports = [equivalence_check(a, d, n, h, s, perturb=args.perturb)
                   for a in archs for s, d, n, h in _instances(args.seeds, args.d_model, args.n, args.heads)]
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _write(out, json.dumps([json.loads(r.to_json()) for r in reports], indent=1) + "\n")
    failures = [r for r in reports if not r.max_abs_diff <= EQUIVALENCE_TOLERANCE]
    worst = max(r.max_abs_diff for r in reports)
    _emit({"passed": not failures, "max_abs_diff": worst,
           "failures": [{"architecture": r.architecture, "seed": r.seed, "max_abs_diff": r.max_abs_diff}
                        for r in failures]})
    return EXIT_CHECK if failures else EXIT_OK


def cmd_gradcheck(args) -> int:
    _emit({"command": "gradcheck", "arch": args.arch, "d_model": args.d_model, "n": args.n, "heads": args.heads,
           "seed": args.seed, "layer_norm": args.layer_norm, "break_grad": args.break_grad,
           "tolerance": GRAD_TOLERANCE})
    try:
        results = gradcheck_layer(args.arch, args.d_model, args.n, args.heads, args.seed,
                                  layer_norm=args.layer_norm, break_grad=args.break_grad)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    worst = max(results, key=lambda r: r.rel_error)
    passed = worst.rel_error < GRAD_TOLERANCE
    _emit({"passed": passed, "worst_parameter": worst.name, "worst_rel_error": worst.rel_error,
           "checked": len(results)})
    return EXIT_OK if passed else EXIT_CHECK


def _train_overrides(args) -> dict:
    over = {}
    if args.steps is not None:
        over["max_steps"] = args.steps
    return over


def cmd_train(args) -> int:
    task = TaskSpec(args.task, seed=args.data_seed)
    model_cfg, train_cfg = default_configs(task, args.arch, **_train_overrides(args))
    train_cfg = TrainConfig(**{**train_cfg.__dict__, "seed": args.seed})
    out = _out_path(args.out, f"train_{args.task}_{args.arch}_seed{args.seed}.jsonl")
    _emit({"command": "train", "task": task.__dict__, "model": model_cfg.__dict__, "train": train_cfg.__dict__,
           "out": str(out)})
    try:
        record = train(model_cfg, task, train_cfg)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    _write(out, record.jsonl())
    final = record.final
    _emit({"final": final, "steps_to_threshold": record.steps_to_threshold, "param_count": record.param_count})
    return EXIT_OK if record.steps_to_threshold is not None else EXIT_CHECK


def cmd_compare(args) -> int:
    archs = ["transformer", "macaron"] if args.arch == "both" else [args.arch]
    task_names = ["copy", "reverse"] if args.task == "both" else [args.task]
    tasks = [TaskSpec(t, seed=args.data_seed) for t in task_names]
    seeds = list(range(args.seeds))
    out = _out_path(args.out, "compare.csv")
    _emit({"command": "compare", "arch": archs, "task": task_names, "seeds": seeds, "steps": args.steps,
           "data_seed": args.data_seed, "out": str(out)})
    try:
        result = compare(archs, tasks, seeds, **_train_overrides(args))
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _write(out, result.csv())
    print(result.report())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splitlab",
        description="Splitting-scheme order studies, layer/scheme equivalence checks, gradient checks "
                    "and toy training runs.",
        epilog=f"Relative output paths are resolved against ${OUTPUT_ENV} (default: current directory).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("order-study", help="fit the local truncation error order of a scheme")
    p.add_argument("--system", choices=sorted(SYSTEMS), default="noncommuting")
    p.add_argument("--scheme", choices=sorted(SCHEME_NAMES), default="lt")
    p.add_argument("--substep", choices=["euler", "exact"], default="exact")
    p.add_argument("--gamma-min", type=float, default=1e-3)
    p.add_argument("--gamma-max", type=float, default=1e-1)
    p.add_argument("--points", type=int, default=9)
    p.add_argument("--out")
    p.set_defaults(func=cmd_order_study)

    p = sub.add_parser("claim-check", help="compare splitting steps against layer forward passes")
    p.add_argument("--arch", choices=["transformer", "macaron", "both"], default="both")
    p.add_argument("--d-model", type=int, default=8)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--perturb", type=float, default=0.0,
                   help="add this to one attention weight of the layer path (sensitivity control)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_claim_check)

    p = sub.add_parser("gradcheck", help="check parameter gradients against finite differences")
    p.add_argument("--arch", choices=["transformer", "macaron", "macaron-decoder", "transformer-decoder"],
                   default="transformer")
    p.add_argument("--d-model", type=int, default=8)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layer-norm", action="store_true")
    p.add_argument("--break-grad", action="store_true", help="flip the ReLU adjoint sign (control)")
    p.set_defaults(func=cmd_gradcheck)

    for name, func, help_ in (("train", cmd_train, "train one model on a toy task"),
                              ("compare", cmd_compare, "train both architectures over several seeds")):
        p = sub.add_parser(name, help=help_)
        both = ["both"] if name == "compare" else []
        p.add_argument("--task", choices=["copy", "reverse", *both], default="copy")
        p.add_argument("--arch", choices=["transformer", "macaron", *both],
                       default="both" if name == "compare" else "transformer")
        p.add_argument("--steps", type=int, help="maximum training steps (default: task budget)")
        p.add_argument("--data-seed", type=int, default=0)
        if name == "train":
            p.add_argument("--seed", type=int, default=0)
        else:
            p.add_argument("--seeds", type=int, default=3, help="number of seeds, 0..N-1")
        p.add_argument("--out")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
