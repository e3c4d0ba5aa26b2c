"""Command-line interface.

Commands: train, collapse, verify, eval, init-tl, sweep. Flags override a
``key=value`` config file (``--config``); every effective value is echoed
into the metrics file header so runs are reproducible.

Exit codes: 0 ok, 2 configuration/usage error, 3 data or model-file error,
4 divergence during training, 5 verification failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .data import Dataset, load_cifar10_bin, load_mnist_idx, subset_per_class
from .errors import (ConfigError, DataError, DivergenceError, KfloError,
                     ModelFileError, UsageError)
from .model import (BUILDERS, MODE_DEPLOYED, MODE_TRAINING, ModelGraph,
                    collapse_model, forward_node, inference_macs, iter_params,
                    param_count, training_macs_per_step)
from .serialize import load_model, save_model
from .tensor import DTYPE
from .train import MetricsRecord, TrainConfig, evaluate, format_metrics_line, train
from .block import tl_stack_init

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4
EXIT_VERIFY = 5


def parse_kflo(value: str) -> tuple[int, float]:
    """Parse a BxR spec like '2x4' or '3x0.5' into (depth, width mult)."""
    parts = value.split("x")
    if len(parts) != 2:
        raise ConfigError(f"expected BxR like '2x4', got {value!r}")
    try:
        depth = int(parts[0])
        width = float(parts[1])
    except ValueError as e:
        raise ConfigError(f"bad --kflo value {value!r}: {e}") from e
    if depth < 1:
        raise ConfigError(f"linear depth must be >= 1, got {depth}")
    if not width > 0:
        raise ConfigError(f"width multiplier must be > 0, got {width}")
    return depth, width


def format_kflo(depth: int, width: float) -> str:
    return f"{depth}x{width:g}"


def _kflo_arg(value: str):
    try:
        return parse_kflo(value)
    except ConfigError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def _int_list(value: str) -> tuple[int, ...]:
    return tuple(int(v) for v in value.split(",") if v != "")


def _float_list(value: str) -> tuple[float, ...]:
    return tuple(float(v) for v in value.split(",") if v != "")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(
        prog="kflo",
        description="Train filtering-kernel overparameterized CNNs and "
                    "collapse them for deployment.")
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers = {}

    def common(p):
        p.add_argument("--config", default=None,
                       help="key=value file; command-line flags win")
        p.add_argument("--seed", type=int, default=0)

    def data_flags(p):
        p.add_argument("--data", choices=("mnist", "cifar10"), default="mnist")
        p.add_argument("--data-dir", default="data")
        p.add_argument("--fraction", type=float, default=1.0,
                       help="per-class fraction of the training split to keep")

    def train_flags(p):
        p.add_argument("--arch", choices=sorted(BUILDERS), default="lenet5")
        p.add_argument("--kflo", type=_kflo_arg, default=(1, 1.0),
                       help="BxR: linear depth x width multiplier (1x1 = vanilla)")
        p.add_argument("--classes", type=int, default=10)
        p.add_argument("--epochs", type=int, default=1)
        p.add_argument("--lr", type=float, default=0.05)
        p.add_argument("--milestones", type=_int_list, default=(),
                       help="epochs at which lr decays by 10x, e.g. 20,30")
        p.add_argument("--momentum", type=float, default=0.9)
        p.add_argument("--wd", type=float, default=5e-4,
                       help="weight decay for plain weights and collapsed kernels")
        p.add_argument("--ema", type=float, default=None,
                       help="EMA decay; adds ema_test_acc to the metrics")
        p.add_argument("--batch-size", type=int, default=64)
        p.add_argument("--augment", action="store_true")

    p = sub.add_parser("train", help="train a model and save it")
    common(p)
    data_flags(p)
    train_flags(p)
    p.add_argument("--out-model", default="model.kflo")
    p.add_argument("--out-metrics", default="metrics.txt")
    p.set_defaults(func=cmd_train)
    subparsers["train"] = p

    p = sub.add_parser("collapse", help="collapse a trained model for deployment")
    common(p)
    p.add_argument("model", help="training-mode model file")
    p.add_argument("--out-model", required=True)
    p.set_defaults(func=cmd_collapse)
    subparsers["collapse"] = p

    p = sub.add_parser("verify", help="check collapse equivalence on random inputs")
    common(p)
    p.add_argument("model", help="training-mode model file")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=cmd_verify)
    subparsers["verify"] = p

    p = sub.add_parser("eval", help="print a model's accuracy on a dataset")
    common(p)
    data_flags(p)
    p.add_argument("model")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_eval)
    subparsers["eval"] = p

    p = sub.add_parser("init-tl", help="stack pretrained deployed models into "
                                       "a fresh training-mode model")
    common(p)
    p.add_argument("--arch", choices=sorted(BUILDERS), default="lenet5")
    p.add_argument("--pretrained", action="append", required=True,
                   help="deployed model file; repeat once per network")
    p.add_argument("--kflo", type=_kflo_arg, default=None,
                   help="BxR; R must equal the number of pretrained files "
                        "(default 2x<count>)")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--out-model", required=True)
    p.set_defaults(func=cmd_init_tl)
    subparsers["init-tl"] = p

    p = sub.add_parser("sweep", help="train a grid of depth/width settings "
                                     "and emit a comparison table")
    common(p)
    data_flags(p)
    train_flags(p)
    p.add_argument("--b-values", type=_int_list, default=(2, 3))
    p.add_argument("--rho-values", type=_float_list, default=(1.0, 2.0, 4.0))
    p.add_argument("--out-table", default="sweep.txt")
    p.set_defaults(func=cmd_sweep)
    subparsers["sweep"] = p

    return parser, subparsers


def _read_config_file(path) -> dict[str, str]:
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def _apply_config_file(parser, subparser, args, argv):
    file_vals = _read_config_file(args.config)
    actions = {a.dest: a for a in subparser._actions}
    converted = {}
    for key, sval in file_vals.items():
        if key not in actions:
            raise ConfigError(
                f"config file key {key!r} is not a flag of "
                f"'{args.command}'")
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            converted[key] = sval.lower() in ("1", "true", "yes")
        elif action.type is not None:
            try:
                converted[key] = action.type(sval)
            except (ValueError, argparse.ArgumentTypeError) as e:
                raise ConfigError(f"config file key {key!r}: {e}") from e
        else:
            converted[key] = sval
    subparser.set_defaults(**converted)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# data plumbing

_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _load_split(args, split: str) -> Dataset:
    d = Path(args.data_dir)
    if args.data == "mnist":
        img, lab = (d / name for name in _MNIST_FILES[split])
        for path in (img, lab):
            if not path.exists():
                raise DataError(f"missing data path: {path}")
        ds = load_mnist_idx(img, lab, split)
        if split == "train" and args.fraction < 1.0:
            ds = subset_per_class(ds, args.fraction, args.seed)
        return ds
    if split == "train":
        batches = sorted(d.glob("data_batch_*.bin"))
        if not batches:
            raise DataError(f"missing data path: {d}/data_batch_*.bin")
        return load_cifar10_bin(batches, args.fraction, args.seed, split)
    test = d / "test_batch.bin"
    if not test.exists():
        raise DataError(f"missing data path: {test}")
    return load_cifar10_bin(test, 1.0, args.seed, split)


def _in_channels(data: str) -> int:
    return 1 if data == "mnist" else 3


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        lr=args.lr, lr_milestones=args.milestones, momentum=args.momentum,
        wd_plain=args.wd, wd_collapsed=args.wd, ema_decay=args.ema,
        batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
        data_fraction=args.fraction, augment=args.augment)


def _effective_config(args, keys) -> dict:
    out = {}
    for key in keys:
        val = getattr(args, key)
        if key == "kflo":
            val = format_kflo(*val)
        elif isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        out[key] = val
    return out


_TRAIN_ECHO_KEYS = ("arch", "kflo", "classes", "data", "data_dir", "fraction",
                    "epochs", "lr", "milestones", "momentum", "wd", "ema",
                    "batch_size", "augment", "seed", "out_model", "out_metrics")


def _write_metrics(path, header: dict, records: list[MetricsRecord]):
    lines = [f"# {k}={v}" for k, v in header.items()]
    lines.extend(format_metrics_line(r) for r in records)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    depth, width = args.kflo
    graph = BUILDERS[args.arch](
        depth=depth, width_mult=width, num_classes=args.classes,
        in_channels=_in_channels(args.data), seed=args.seed)
    train_ds = _load_split(args, "train")
    test_ds = _load_split(args, "test")
    records = train(graph, train_ds, _train_config(args), test_ds)
    save_model(graph, args.out_model)
    _write_metrics(args.out_metrics,
                   _effective_config(args, _TRAIN_ECHO_KEYS), records)
    last = records[-1]
    print(f"trained {args.arch} {format_kflo(depth, width)}: "
          f"test_acc={last.test_acc:.4f} ({args.out_model}, {args.out_metrics})")
    return EXIT_OK


def cmd_collapse(args) -> int:
    graph = load_model(args.model)
    if graph.mode != MODE_TRAINING:
        raise UsageError(f"{args.model} is already deployed; collapse needs a "
                         f"training-mode model")
    deployed = collapse_model(graph)
    save_model(deployed, args.out_model)
    print(f"parameters: {param_count(graph)} -> {param_count(deployed)}")
    return EXIT_OK


def _rel_dev(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).max() / (np.abs(b).max() + 1e-8))


def verify_graph(graph: ModelGraph, trials: int, seed: int = 0,
                 batch: int = 2) -> tuple[float, str]:
    """Max relative deviation between the expanded forward, the collapsed
    forward, and the feature-filtering oracle, per layer, over random
    inputs. Returns (worst deviation, worst layer name)."""
    deployed = collapse_model(graph)
    rng = np.random.default_rng(seed)
    worst, worst_layer = 0.0, "-"
    for _ in range(trials):
        a = rng.standard_normal((batch, *graph.input_shape)).astype(DTYPE)
        for node, dnode in zip(graph.nodes, deployed.nodes):
            y_expanded = forward_node(node, a, "collapsed")
            y_deployed = forward_node(dnode, a, "collapsed")
            y_oracle = forward_node(node, a, "oracle")
            dev = max(_rel_dev(y_expanded, y_oracle),
                      _rel_dev(y_deployed, y_oracle),
                      _rel_dev(y_expanded, y_deployed))
            if dev > worst:
                worst, worst_layer = dev, node.name
            a = y_deployed
    return worst, worst_layer


def cmd_verify(args) -> int:
    graph = load_model(args.model, expect_mode=MODE_TRAINING)
    worst, layer = verify_graph(graph, args.trials, args.seed)
    print(f"max relative deviation {worst:.3e} (worst layer: {layer}) "
          f"over {args.trials} trials")
    if worst > args.tolerance:
        print(f"error: deviation exceeds tolerance {args.tolerance:g} "
              f"at layer {layer}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_eval(args) -> int:
    graph = load_model(args.model)
    ds = _load_split(args, args.split)
    acc = evaluate(graph, ds)
    print(f"accuracy {acc:.4f}")
    return EXIT_OK


def _check_same_architecture(graphs, paths):
    first = graphs[0]
    for g, path in zip(graphs[1:], paths[1:]):
        if len(g.nodes) != len(first.nodes):
            raise ConfigError(f"{path}: node count differs from {paths[0]}")
        for a, b in zip(first.nodes, g.nodes):
            if a.kind != b.kind or a.name != b.name:
                raise ConfigError(f"{path}: node {b.name!r} differs from "
                                  f"{paths[0]}'s {a.name!r}")
            if (a.kernel is None) != (b.kernel is None):
                raise ConfigError(f"{path}: layer {a.name!r} parameterization "
                                  f"differs")
            if a.kernel is not None and a.kernel.value.shape != b.kernel.value.shape:
                raise ConfigError(
                    f"{path}: layer {a.name!r} has shape "
                    f"{b.kernel.value.shape}, expected {a.kernel.value.shape}")


def cmd_init_tl(args) -> int:
    paths = args.pretrained
    graphs = [load_model(p, expect_mode=MODE_DEPLOYED) for p in paths]
    _check_same_architecture(graphs, paths)
    width = len(graphs)
    depth = 2
    if args.kflo is not None:
        depth, k_width = args.kflo
        if k_width != width:
            raise ConfigError(
                f"--kflo width {k_width:g} must equal the number of "
                f"pretrained files ({width})")
    ref = graphs[0]
    graph = BUILDERS[args.arch](
        depth=depth, width_mult=float(width), num_classes=args.classes,
        in_channels=ref.input_shape[0], seed=args.seed)
    filtering = [n for n in graph.nodes if n.is_filtering()]
    ref_filtering = [n for n in ref.nodes if n.is_filtering()]
    if len(filtering) != len(ref_filtering):
        raise ConfigError(f"{paths[0]} does not match architecture {args.arch}")
    for node, *pre_nodes in zip(filtering,
                                *[[n for n in g.nodes if n.is_filtering()]
                                  for g in graphs]):
        head = node is filtering[-1]
        target_shape = (node.block.ch_out,
                        node.block.w1.value.shape[1],
                        *node.block.spatial)
        kernels = []
        for pn in pre_nodes:
            k = pn.kernel.value
            if node.kind == "fc":
                k = k.reshape(k.shape[0], k.shape[1], 1, 1)
            kernels.append(k)
        if head and kernels[0].shape != target_shape:
            print(f"note: classifier head {node.name!r} has "
                  f"{kernels[0].shape[0]} pretrained classes, needs "
                  f"{node.block.ch_out}; re-initialized fresh")
            continue
        if kernels[0].shape != target_shape:
            raise ConfigError(
                f"layer {node.name!r}: pretrained kernel shape "
                f"{kernels[0].shape} does not match {target_shape}")
        tl_stack_init(node.block, kernels)
        pre_bias = next(pn for pn in ref.nodes if pn.name == node.name).bias
        node.bias.value[...] = pre_bias.value
        node.bias.bump()
    save_model(graph, args.out_model)
    print(f"initialized {args.arch} {format_kflo(depth, float(width))} from "
          f"{width} pretrained model(s) -> {args.out_model}")
    return EXIT_OK


_SWEEP_ECHO_KEYS = ("arch", "data", "data_dir", "fraction", "epochs", "lr",
                    "momentum", "wd", "batch_size", "seed")


def cmd_sweep(args) -> int:
    configs = [(1, 1.0)]
    configs += [(b, r) for b in args.b_values for r in args.rho_values]
    train_ds = _load_split(args, "train")
    test_ds = _load_split(args, "test")
    rows = []
    for depth, width in configs:
        graph = BUILDERS[args.arch](
            depth=depth, width_mult=width, num_classes=args.classes,
            in_channels=_in_channels(args.data), seed=args.seed)
        records = train(graph, train_ds, _train_config(args), test_ds)
        deployed = collapse_model(graph)
        label = "vanilla" if depth == 1 else format_kflo(depth, width)
        rows.append((label, param_count(graph), param_count(deployed),
                     training_macs_per_step(graph, args.batch_size),
                     records[-1].test_acc))
    header = f"{'config':<10} {'params':>10} {'deployed':>10} " \
             f"{'macs/step':>12} {'test_acc':>9}"
    lines = [f"# {k}={v}" for k, v in _effective_config(args, _SWEEP_ECHO_KEYS).items()]
    lines.append(header)
    lines.append("-" * len(header))
    for label, p_train, p_dep, macs, acc in rows:
        lines.append(f"{label:<10} {p_train:>10} {p_dep:>10} {macs:>12} "
                     f"{acc:>9.4f}")
    table = "\n".join(lines) + "\n"
    Path(args.out_table).write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    parser, subparsers = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "config", None):
            args = _apply_config_file(parser, subparsers[args.command],
                                      args, argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ModelFileError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except KfloError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
