"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import archspec
from .analysis import format_table, summarize
from .archspec import MODEL_NAMES, SpecError, named_model, parse_spec, serialize_spec, validate_spec
from .graph import GraphError, build_graph, export_dot, export_json
from .search import CommandEvaluator, SearchConfig, flops_evaluator, run_trials, search_report
from .tensorops import ExecutionError, execute, init_random_weights, load_tensor, load_weights, save_tensor, save_weights
from .verify import run_checks

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _hw(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"sizes must be positive, got {text!r}")
    return h, w


def _rates(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _write_text(path: Optional[str], text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _load_spec(path: str) -> archspec.ModelSpec:
    try:
        text = sys.stdin.read() if path == "-" else Path(path).read_text()
    except OSError as exc:
        raise RuntimeError(f"cannot read spec: {exc}") from None
    try:
        spec = parse_spec(text)
    except (SpecError, ValueError) as exc:
        raise ValidationError(str(exc)) from None
    problems = validate_spec(spec)
    if problems:
        raise ValidationError("invalid spec:\n" + "\n".join(f"  {p}" for p in problems))
    return spec


def _graph(spec, hw, in_channels: int = 3):
    try:
        return build_graph(spec, hw, in_channels=in_channels)
    except (GraphError, SpecError) as exc:
        raise ValidationError(str(exc)) from None


# -- subcommands -------------------------------------------------------------------


def cmd_build(args) -> int:
    if args.spec:
        spec = _load_spec(args.spec)
        if args.classes is not None:
            spec = spec.replace(num_classes=args.classes)
        if args.aspp_rates is not None:
            spec = spec.replace(aspp_rates=args.aspp_rates)
        if args.output_stride is not None and args.output_stride != spec.output_stride:
            spec = archspec.set_output_stride(spec, args.output_stride)
    else:
        rates = args.aspp_rates
        if rates is None:
            rates = archspec.CITYSCAPES_ASPP_RATES if args.classes == 19 else archspec.PASCAL_ASPP_RATES
        spec = named_model(args.model, args.classes if args.classes is not None else 21, args.output_stride, rates)
    problems = validate_spec(spec)
    if problems:
        raise ValidationError("invalid spec:\n" + "\n".join(f"  {p}" for p in problems))
    _write_text(args.out, serialize_spec(spec))
    return EXIT_OK


def cmd_stats(args) -> int:
    spec = _load_spec(args.spec)
    try:
        stats = summarize(spec, args.input)
    except (GraphError, SpecError) as exc:
        raise ValidationError(str(exc)) from None
    if not args.anchor:
        stats.anchor = None
    if args.json:
        _write_text(args.out, json.dumps(stats.to_dict(per_node=args.per_node), indent=2) + "\n")
    else:
        text = format_table(stats)
        if args.anchor and stats.anchor is None:
            text += "anchor: spec does not match any named model with reported values\n"
        _write_text(args.out, text)
    return EXIT_OK


def cmd_init_weights(args) -> int:
    spec = _load_spec(args.spec)
    graph = _graph(spec, args.input)
    save_weights(args.out, init_random_weights(graph, args.random_seed))
    return EXIT_OK


def cmd_infer(args) -> int:
    spec = _load_spec(args.spec)
    try:
        x = load_tensor(args.input)
    except OSError as exc:
        raise RuntimeError(f"cannot read input tensor: {exc}") from None
    except ValueError as exc:
        raise ValidationError(f"input tensor: {exc}") from None
    if x.ndim != 4:
        raise ValidationError(f"input tensor must be NHWC, got rank {x.ndim}")
    graph = _graph(spec, (x.shape[1], x.shape[2]), in_channels=x.shape[3])
    if args.weights:
        try:
            weights = load_weights(args.weights)
        except OSError as exc:
            raise RuntimeError(f"cannot read weights: {exc}") from None
    else:
        weights = init_random_weights(graph, args.random_seed)
    out = execute(graph, x, weights, workers=_workers(args.workers))
    if args.argmax:
        out = np.argmax(out, axis=-1)[..., None].astype(np.float32)
    save_tensor(args.out, out)
    return EXIT_OK


def cmd_export(args) -> int:
    spec = _load_spec(args.spec)
    graph = _graph(spec, args.input)
    _write_text(args.out, export_dot(graph) if args.format == "dot" else export_json(graph))
    return EXIT_OK


def _workers(requested: int) -> int:
    cap = os.environ.get("SPINESEG_THREADS")
    if cap:
        try:
            return max(1, min(requested, int(cap)))
        except ValueError:
            raise UsageError(f"SPINESEG_THREADS must be an integer, got {cap!r}") from None
    return max(1, requested)


def cmd_search(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    if args.config:
        try:
            config = SearchConfig.from_dict(json.loads(Path(args.config).read_text()))
        except OSError as exc:
            raise RuntimeError(f"cannot read config: {exc}") from None
        except (ValueError, TypeError) as exc:
            raise ValidationError(f"search config: {exc}") from None
    else:
        config = SearchConfig()
    if args.evaluator == "flops":
        evaluator, name = flops_evaluator(config.input_hw), "flops"
    elif args.evaluator.startswith("cmd:"):
        evaluator, name = CommandEvaluator(args.evaluator[4:]), args.evaluator
    else:
        raise UsageError(f"unknown evaluator {args.evaluator!r}; use flops or cmd:PATH")
    records = run_trials(config, args.trials, evaluator, _workers(args.workers), args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trials.jsonl", "w") as f:
        for r in records:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    report = search_report(config, records, top_k=args.top_k, seed=args.seed, evaluator_name=name)
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"{report['feasible']} feasible / {report['trials']} trials; report in {out / 'report.json'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_checks()
    for name, ok, detail in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else ""))
    failed = sum(not ok for _, ok, _ in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_INVALID


# -- parser ------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spineseg", description="Scale-permuted segmentation network tooling.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("build", help="write a normalized model spec")
    src = b.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", choices=MODEL_NAMES)
    src.add_argument("--spec", help="spec file to normalize ('-' for stdin)")
    b.add_argument("--classes", type=int)
    b.add_argument("--output-stride", type=int, choices=archspec.OUTPUT_STRIDES)
    b.add_argument("--aspp-rates", type=_rates, help="e.g. 12,24,36 (default depends on --classes)")
    b.add_argument("--out")
    b.set_defaults(func=cmd_build)

    s = sub.add_parser("stats", help="parameter, FLOP, stride and receptive field report")
    s.add_argument("--spec", required=True)
    s.add_argument("--input", type=_hw, default=(512, 512), help="HxW (default 512x512)")
    s.add_argument("--anchor", action="store_true", help="compare against reported values")
    s.add_argument("--json", action="store_true")
    s.add_argument("--per-node", action="store_true", help="include per-node rows in JSON")
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)

    w = sub.add_parser("init-weights", help="write a seeded random weight archive")
    w.add_argument("--spec", required=True)
    w.add_argument("--input", type=_hw, default=(128, 128))
    w.add_argument("--random-seed", type=int, default=0)
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_init_weights)

    i = sub.add_parser("infer", help="run a forward pass on a tensor file")
    i.add_argument("--spec", required=True)
    wsrc = i.add_mutually_exclusive_group(required=True)
    wsrc.add_argument("--weights")
    wsrc.add_argument("--random-seed", type=int)
    i.add_argument("--input", required=True, help="NHWC tensor file")
    i.add_argument("--out", required=True)
    i.add_argument("--argmax", action="store_true", help="write class indices instead of logits")
    i.add_argument("--workers", type=int, default=1)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("export", help="export the compute graph")
    e.add_argument("--spec", required=True)
    e.add_argument("--format", choices=("dot", "json"), default="dot")
    e.add_argument("--input", type=_hw, default=(512, 512))
    e.add_argument("--out")
    e.set_defaults(func=cmd_export)

    r = sub.add_parser("search", help="random architecture search")
    r.add_argument("--trials", type=int, default=100)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--evaluator", default="flops", help="flops or cmd:PATH")
    r.add_argument("--config", help="search config JSON")
    r.add_argument("--top-k", type=int, default=10)
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=cmd_search)

    v = sub.add_parser("verify", help="run the built-in invariant checks")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = make_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, SpecError, GraphError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ExecutionError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
