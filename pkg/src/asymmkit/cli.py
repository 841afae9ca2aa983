"""``asymmkit`` command line.

Exit codes: 0 success, 1 usage or input error, 2 numeric failure
(gradcheck over threshold, non-finite loss).
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import os
import sys
import time
from dataclasses import fields, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, cost, weights
from .blocks import BlockSpec, BlockSpecError, init_block_params, plan_block
from .data import DatasetError, parse_source
from .network import build_network
from .ops import ConvParams
from .train import (BlockModule, ConvModule, NumericError, TrainConfig, format_record,
                    gradcheck, train_toy)
from .weights import WeightFileError
from .zoo import BUILTIN_NAMES, SpecError, builtin_spec, dump_spec, load_spec, scale_spec

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

GRADCHECK_TOL = {"conv": 1e-8, "block": 1e-5, "asymm-block": 1e-5, "network": 1e-4}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _network_spec(args, arch=None, multiplier=None):
    """Built-in or file spec with the command-line overrides applied."""
    if getattr(args, "spec", None):
        spec = load_spec(args.spec)
    else:
        spec = builtin_spec(arch or args.arch)
    m = multiplier if multiplier is not None else getattr(args, "multiplier", None)
    if m is not None:
        spec = scale_spec(spec, m)
    if getattr(args, "input", None) is not None:
        spec = replace(spec, resolution=args.input)
    if getattr(args, "classes", None) is not None:
        spec = replace(spec, num_classes=args.classes)
    return spec


def _add_spec_args(p, require=True):
    g = p.add_mutually_exclusive_group(required=require)
    g.add_argument("--arch", choices=BUILTIN_NAMES, help="built-in architecture")
    g.add_argument("--spec", metavar="FILE", help="architecture spec file")
    p.add_argument("--multiplier", type=float, help="width multiplier (default: the spec's own)")
    p.add_argument("--input", type=int, help="input resolution (default: the spec's own)")
    p.add_argument("--classes", type=int, help="classifier width (default: the spec's own)")


# ------------------------------------------------------------------ commands


def cmd_analyze(args) -> int:
    report = cost.network_cost(_network_spec(args))
    print(cost.format_struct(report) if args.format == "struct" else cost.format_table(report))
    return EXIT_OK


def cmd_compare(args) -> int:
    archs = [a for a in args.archs.split(",") if a]
    if not archs:
        raise UsageError("--archs needs at least one architecture")
    mults = _floats(args.multipliers) or [1.0]
    rates = _ints(args.rate) if args.rate else [None]
    rows = []
    for arch in archs:
        for m in mults:
            for r in rates:
                spec = _network_spec(args, arch=arch, multiplier=m)
                if r is not None:
                    spec = spec.with_rate(r)
                rep = cost.network_cost(spec)
                rows.append({"arch": arch, "multiplier": m, "rate": r,
                             "madds": rep.madds, "params": rep.params})
    if args.format == "struct":
        print(json.dumps(rows, indent=2))
        return EXIT_OK
    show_rate = rates != [None]
    head = f"{'arch':<12} {'mult':>5}" + (f" {'r':>2}" if show_rate else "") + f" {'MAdds (M)':>10} {'Params (M)':>11}"
    print(head)
    for row in rows:
        line = f"{row['arch']:<12} {row['multiplier']:>5g}"
        if show_rate:
            line += f" {row['rate']:>2}"
        line += f" {cost.millions(row['madds']):>10} {cost.millions(row['params']):>11}"
        print(line)
    return EXIT_OK


def _gradcheck_models(target: str, seed: int):
    """Yield ``(label, model, input_shape)`` for a gradcheck target."""
    rng = np.random.default_rng(seed)
    if target == "conv":
        for label, cp in [("conv1x1", ConvParams(4, 6, 1)),
                          ("conv3x3", ConvParams(3, 5, 3, stride=2)),
                          ("grouped", ConvParams(4, 6, 3, groups=2)),
                          ("depthwise", ConvParams.depthwise(5, 3))]:
            w = rng.standard_normal(cp.weight_shape)
            yield label, ConvModule(cp, w), (2, cp.in_channels, 6, 6)
    elif target == "asymm-block":
        plan = plan_block(BlockSpec("asymm", 3, 24, 8, 1, True, "hswish", 1), 8)
        yield "asymm c8 p24 r1 k3 se", BlockModule(plan, init_block_params(plan, rng)), (2, 8, 6, 6)
    elif target == "block":
        cases = [("mmblock", BlockSpec("mmblock", 3, 24, 8, 1, True, "hswish"), 8),
                 ("pruned", BlockSpec("pruned", 3, 24, 8, 1, True, "relu"), 8),
                 ("asymm", BlockSpec("asymm", 3, 24, 8, 1, True, "hswish", 1), 8),
                 ("asymm-s2", BlockSpec("asymm", 5, 32, 12, 2, False, "relu", 1), 8),
                 ("dwsep", BlockSpec("dwsep", 3, None, 12, 1, False, "relu"), 8)]
        for label, spec, c in cases:
            plan = plan_block(spec, c)
            yield label, BlockModule(plan, init_block_params(plan, rng)), (2, c, 6, 6)
    elif target == "network":
        spec = replace(scale_spec(builtin_spec("asymmnet-s"), 0.35), resolution=32, num_classes=10)
        net, _ = build_network(spec, seed=seed, dtype=np.float64)
        yield "asymmnet-s x0.35 @32", net, (16, 3, 32, 32)
    else:
        raise UsageError(f"unknown gradcheck target {target!r}")


def cmd_gradcheck(args) -> int:
    tol = GRADCHECK_TOL[args.target]
    ok = True
    for label, model, shape in _gradcheck_models(args.target, args.seed):
        rep = gradcheck(model, shape, seed=args.seed)
        passed = rep.passed(tol)
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {label}: max rel err {rep.max_rel_err:.3e} "
              f"(params {rep.max_param_err:.3e} over {rep.param_coords}, "
              f"input {rep.max_input_err:.3e} over {rep.input_coords}; tol {tol:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


def _train_config(args) -> TrainConfig:
    values = {}
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            values = json.load(f)
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(values) - known
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for key in ("lr", "epochs", "batch_size", "seed", "max_steps", "warmup_epochs"):
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from None


def cmd_train(args) -> int:
    config = _train_config(args)
    spec = _network_spec(args)
    data = parse_source(args.data, spec.resolution, spec.num_classes, config.seed)
    log = open(args.log, "w", encoding="utf-8") if args.log else contextlib.nullcontext()
    start = time.perf_counter()
    with log as fh:
        def record(rec):
            if fh is not None:
                fh.write(format_record(rec) + "\n")
                fh.flush()
            if "epoch" in rec:
                stamp = "" if args.no_timestamps else f" ({time.perf_counter() - start:.1f}s)"
                print(f"epoch {rec['epoch']:>3} step {rec['step']:>4} train acc {rec['train_acc']:.4f}{stamp}")

        _, store, tlog = train_toy(spec, data, config, on_record=record, stop_at=args.stop_at)
    print(f"final train accuracy {tlog.final_accuracy:.4f} after {len(tlog.steps)} steps")
    if args.out:
        weights.save(args.out, store.state())
        print(f"wrote {len(store.state())} tensors to {args.out}")
    return EXIT_OK


def _probe_digest(spec, store_net, seed: int) -> str:
    net = store_net
    x = np.random.default_rng(seed).standard_normal((2, 3, spec.resolution, spec.resolution))
    logits = net.predict(x.astype(net.dtype))
    return hashlib.sha256(logits.tobytes()).hexdigest()


def _dtype(name: str):
    return {"float32": np.float32, "float64": np.float64}[name]


def cmd_export(args) -> int:
    spec = _network_spec(args)
    net, store = build_network(spec, seed=args.seed, dtype=_dtype(args.dtype))
    if args.weights:
        store.load_state(weights.load(args.weights))
    weights.save(args.out, store.state())
    print(f"wrote {len(store.state())} tensors ({store.num_params()} trainable values) to {args.out}")
    print(f"probe logits sha256 {_probe_digest(spec, net, args.probe_seed)}")
    return EXIT_OK


def cmd_import(args) -> int:
    tensors = weights.load(args.weights)
    spec = _network_spec(args)
    first = next(iter(tensors.values()))
    net, store = build_network(spec, seed=0, dtype=first.dtype)
    store.load_state(tensors)
    print(f"loaded {len(tensors)} tensors ({store.num_params()} trainable values) from {args.weights}")
    print(f"probe logits sha256 {_probe_digest(spec, net, args.probe_seed)}")
    return EXIT_OK


def cmd_dump_spec(args) -> int:
    text = dump_spec(_network_spec(args))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="asymmkit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"asymmkit {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("analyze", help="per-layer MAdds and parameter report")
    _add_spec_args(a)
    a.add_argument("--format", choices=("table", "struct"), default="table")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("compare", help="MAdds/params grid over architectures and multipliers")
    c.add_argument("--archs", required=True, help="comma-separated built-in names")
    c.add_argument("--multipliers", default="", help="comma-separated widths (default 1.0)")
    c.add_argument("--rate", default="", help="comma-separated asymmetry rates to sweep")
    c.add_argument("--input", type=int)
    c.add_argument("--classes", type=int)
    c.add_argument("--format", choices=("table", "struct"), default="table")
    c.set_defaults(func=cmd_compare)

    g = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    g.add_argument("--target", choices=tuple(GRADCHECK_TOL), default="asymm-block")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("train", help="train on a small dataset")
    _add_spec_args(t)
    t.add_argument("--data", default="synthetic:64", help="synthetic:N or cifar10:PATH[,PATH][:LIMIT]")
    t.add_argument("--config", metavar="FILE", help="JSON file of training settings")
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--warmup-epochs", dest="warmup_epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--max-steps", dest="max_steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--stop-at", dest="stop_at", type=float, help="stop once epoch accuracy reaches this")
    t.add_argument("--log", metavar="FILE", help="metrics log (one JSON object per line)")
    t.add_argument("--out", metavar="FILE", help="weight file to write after training")
    t.add_argument("--no-timestamps", action="store_true", help="omit elapsed times from stdout")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("export", help="write a network's tensors to a weight file")
    _add_spec_args(e)
    e.add_argument("--seed", type=int, default=0, help="initialisation seed")
    e.add_argument("--weights", metavar="FILE", help="start from these weights instead")
    e.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    e.add_argument("--probe-seed", dest="probe_seed", type=int, default=0)
    e.add_argument("--out", metavar="FILE", required=True)
    e.set_defaults(func=cmd_export)

    i = sub.add_parser("import", help="load a weight file and run a probe forward pass")
    _add_spec_args(i)
    i.add_argument("--weights", metavar="FILE", required=True)
    i.add_argument("--probe-seed", dest="probe_seed", type=int, default=0)
    i.set_defaults(func=cmd_import)

    d = sub.add_parser("dump-spec", help="write a built-in architecture as a spec file")
    _add_spec_args(d)
    d.add_argument("--out", metavar="FILE")
    d.set_defaults(func=cmd_dump_spec)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = os.environ.get("ASYMMKIT_THREADS")
    limit = contextlib.nullcontext()
    if threads:
        try:
            limit = threadpool_limits(limits=max(1, int(threads)))
        except ValueError:
            print(f"asymmkit: ASYMMKIT_THREADS must be an integer, got {threads!r}", file=sys.stderr)
            return EXIT_USAGE
    try:
        with limit:
            return args.func(args)
    except NumericError as exc:
        print(f"asymmkit: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, SpecError, BlockSpecError, DatasetError, WeightFileError,
            KeyError, OSError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"asymmkit: error: {msg}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
