"""Command-line interface: ``tdnets {analyze,train,evaluate,verify,inspect}``.

Exit codes: 0 ok, 1 verification failure, 2 invalid configuration,
3 data or file error, 4 non-finite training loss.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import formats as fm
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .errors import DataError, InvalidConfig, NumericalError, ShapeMismatch, TDError
from .formats import Format, TDConfig
from .layers import ParamInfo, TDConv2D, TDLinear
from .mnist import Dataset, find_mnist_files, load_mnist_idx
from .networks import (
    Network,
    build_td_lenet5,
    build_td_lstm,
    build_td_resnet,
    build_tr_demo_classifier,
    expand_ranks,
)
from .training import evaluate, train_epochs
from .verify import FAULTS, SUITES, run_suite

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

TD_FORMATS = ("cp", "tucker2", "btt", "tt", "tr")
NETS = ("demo", "lenet5", "resnet20", "resnet32", "lstm")
SEED_ENV = "TEDNET_SEED"


class ConfigError(Exception):
    """Bad flag combination detected after argument parsing."""


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _seed(args) -> int:
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return args.seed
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _fmt(x: float) -> str:
    return f"{x:.4g}"


# --- analyze -----------------------------------------------------------------


def _layer_config(args, fmt: str) -> TDConfig:
    if args.in_modes is None or args.out_modes is None:
        raise ConfigError("--layer needs --in-modes and --out-modes")
    kernel = args.kernel if args.layer == "conv" else None
    if args.layer == "conv" and kernel is None:
        raise ConfigError("--layer conv needs --kernel")
    f = Format.parse(fmt)
    ranks: tuple[int, ...] = ()
    if f is not Format.DENSE:
        if not args.ranks:
            raise ConfigError(f"format {f.value} needs --ranks")
        ranks = tuple(args.ranks)
        if len(ranks) == 1:
            ranks = expand_ranks(f, ranks[0], len(args.in_modes), len(args.out_modes), kernel is not None)
    blocks = args.blocks if f is Format.BTT else 1
    return fm.validate(TDConfig(f, args.in_modes, args.out_modes, ranks, kernel, blocks))


def _net_ranks(args, count: int, default: int) -> list[int]:
    ranks = args.ranks or [default]
    if len(ranks) == 1:
        ranks = ranks * count
    return ranks


def build_from_args(args, fmt: str | None = None, seed: int = 0, input_size: int | None = None) -> Network:
    """Construct the network named by ``--net`` (default: the demo classifier)."""
    net = args.net or "demo"
    fmt = fmt or args.format or "tr"
    classes = args.classes or 10
    blocks = args.blocks
    if net == "demo":
        if Format.parse(fmt) is not Format.TR:
            raise ConfigError("the demo classifier is tensor-ring only (use --format tr)")
        return build_tr_demo_classifier(seed=seed)
    if net == "lenet5":
        return build_td_lenet5(fmt, classes, _net_ranks(args, 4, 6), seed=seed, input_size=input_size or 32,
                               blocks=blocks)
    if net in ("resnet20", "resnet32"):
        return build_td_resnet(int(net[-2:]), fmt, _net_ranks(args, 7, 7), classes, seed=seed, blocks=blocks)
    if net == "lstm":
        in_modes = args.in_modes or [16, 16]
        hidden = args.out_modes or [32, 32]
        ranks = args.ranks or [5]
        rank_arg = ranks[0] if len(ranks) == 1 else ranks
        return build_td_lstm(in_modes, hidden, rank_arg, fmt, args.classes, seed=seed, blocks=blocks)
    raise ConfigError(f"unknown network {net!r}")


def _total(info: ParamInfo) -> dict:
    return {
        "params": info.params,
        "dense_params": info.dense_params,
        "cr": info.cr,
        "format_params": info.format_params,
        "dense_format_params": info.dense_format_params,
    }


def analyze_report(args, fmt: str) -> dict:
    """One machine-readable report for ``fmt``: per-layer rows plus totals."""
    if args.layer:
        cfg = _layer_config(args, fmt)
        layer = TDConv2D(cfg) if cfg.is_conv else TDLinear(cfg)
        info = layer.param_info()
        rows = [{"name": args.layer, "kind": layer.kind, "format": cfg.format.value, "params": info.params,
                 "dense_params": info.dense_params, "cr": info.cr}]
        target = f"{args.layer} in={list(cfg.in_modes)} out={list(cfg.out_modes)}"
    else:
        net = build_from_args(args, fmt)
        info = net.param_info()
        rows = net.layer_report()
        target = args.net or "demo"
    return {"target": str(target), "format": Format.parse(fmt).value, "layers": rows, "total": _total(info)}


def _print_table(rep: dict) -> None:
    print(f"target: {rep['target']}")
    print(f"format: {rep['format']}")
    head = f"{'layer':<12} {'kind':<14} {'format':<8} {'params':>10} {'dense':>10} {'CR':>9}"
    print(head)
    print("-" * len(head))
    for row in rep["layers"]:
        print(f"{row['name']:<12} {row['kind']:<14} {row['format'] or '-':<8} {row['params']:>10} "
              f"{row['dense_params']:>10} {_fmt(row['cr']):>9}")
    t = rep["total"]
    print("-" * len(head))
    print(f"{'total':<12} {'':<14} {'':<8} {t['params']:>10} {t['dense_params']:>10} {_fmt(t['cr']):>9}")
    print(f"format-only params: {t['format_params']} of {t['dense_format_params']} dense")


def _print_side_by_side(reps: list[dict]) -> None:
    names = [r["format"] for r in reps]
    print(f"target: {reps[0]['target']}")
    head = f"{'layer':<12} {'dense':>10} " + " ".join(f"{n:>10}" for n in names)
    print(head)
    print("-" * len(head))
    for i, row in enumerate(reps[0]["layers"]):
        cells = " ".join(f"{r['layers'][i]['params']:>10}" for r in reps)
        print(f"{row['name']:<12} {row['dense_params']:>10} {cells}")
    print("-" * len(head))
    print(f"{'total':<12} {reps[0]['total']['dense_params']:>10} "
          + " ".join(f"{r['total']['params']:>10}" for r in reps))
    print(f"{'CR':<12} {'1':>10} " + " ".join(f"{_fmt(r['total']['cr']):>10}" for r in reps))


def cmd_analyze(args) -> int:
    if bool(args.layer) == bool(args.net):
        if not args.layer and not args.net:
            args.net = "demo"
        else:
            raise ConfigError("give either --layer or --net, not both")
    fmt = args.format or "tr"
    if fmt == "all":
        if args.net == "demo":
            raise ConfigError("the demo classifier is tensor-ring only; --format all needs another --net")
        reps = [analyze_report(args, f) for f in TD_FORMATS]
        if args.json:
            print(json.dumps(reps, sort_keys=True))
        else:
            _print_side_by_side(reps)
        return EXIT_OK
    rep = analyze_report(args, fmt)
    if args.json:
        print(json.dumps(rep, sort_keys=True))
    else:
        _print_table(rep)
    return EXIT_OK


# --- data --------------------------------------------------------------------


def _load_split(args, split: str) -> Dataset:
    images = getattr(args, f"{split}_images")
    labels = getattr(args, f"{split}_labels")
    if images is None and labels is None:
        if args.data_dir is None:
            raise DataError(f"no {split} data: pass --data-dir or --{split}-images/--{split}-labels")
        images, labels = find_mnist_files(args.data_dir, split)
    elif images is None or labels is None:
        raise DataError(f"--{split}-images and --{split}-labels must be given together")
    for p in (images, labels):
        if not os.path.exists(p):
            raise DataError(f"no such file: {p}")
    return load_mnist_idx(images, labels)


def _maybe_subset(ds: Dataset, n: int | None, seed: int) -> Dataset:
    return ds if n is None or n >= len(ds) else ds.subset(n, seed=seed)


# --- train / evaluate --------------------------------------------------------


def cmd_train(args) -> int:
    seed = _seed(args)
    if args.epochs < 0 or args.batch_size < 1 or not args.lr > 0:
        raise ConfigError("need --epochs >= 0, --batch-size >= 1 and --lr > 0")
    net = build_from_args(args, seed=seed, input_size=28)
    train = _maybe_subset(_load_split(args, "train"), args.train_subset, seed)
    test = _maybe_subset(_load_split(args, "test"), args.test_subset, seed)
    want = tuple(net.input_shape)
    if tuple(train.images.shape[1:]) != want:
        raise ShapeMismatch(f"network {net.arch} expects inputs {list(want)}, data has "
                            f"{list(train.images.shape[1:])}")
    print(f"network: {net.arch}  params: {net.param_info().params}  seed: {seed}")
    print(f"data: {len(train)} train, {len(test)} test")
    if args.epochs == 0:
        print(f"epoch 0 test_accuracy {evaluate(net, test):.4f}")

    def report(rec: dict) -> None:
        print(f"epoch {rec['epoch']} loss {rec['loss']:.6f} test_accuracy {rec['test_accuracy']:.4f}",
              flush=True)

    history = train_epochs(net, train, args.epochs, batch_size=args.batch_size, lr=args.lr, seed=seed, test=test,
                           optimizer=args.optimizer, momentum=args.momentum, on_epoch=report)
    final = history[-1]["test_accuracy"] if history else evaluate(net, test)
    print(f"final test_accuracy {final:.4f}")
    if args.out:
        save_checkpoint(net, args.out)
        print(f"checkpoint: {args.out}")
    if args.json:
        print(json.dumps({"history": history, "final_test_accuracy": final}, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    net = load_checkpoint(args.checkpoint)
    test = _maybe_subset(_load_split(args, "test"), args.test_subset, _seed(args))
    acc = evaluate(net, test)
    print(f"test_accuracy {acc:.4f} on {len(test)} samples")
    return EXIT_OK


def cmd_inspect(args) -> int:
    ck = read_checkpoint(args.checkpoint)
    desc = ck.descriptor["network"]
    if args.json:
        print(json.dumps({"network": desc, "tensors": {k: list(v.shape) for k, v in ck.params.items()}},
                         sort_keys=True))
        return EXIT_OK
    net = load_checkpoint(args.checkpoint)
    print(f"architecture: {desc['arch']}  input: {desc['input_shape']}  classes: {desc['num_classes']}")
    print(f"builder: {json.dumps(desc['builder'], sort_keys=True)}")
    for row in net.layer_report():
        print(f"  {row['name']:<6} {row['kind']:<12} {row['format'] or '-':<8} params {row['params']}")
    total = net.param_info()
    print(f"parameters: {total.params} (dense equivalent {total.dense_params}, CR {_fmt(total.cr)})")
    print(f"tensors: {len(ck.params)} parameters, {len(ck.buffers)} buffers")
    if ck.optimizer:
        print(f"optimizer state: {ck.optimizer['kind']}")
    return EXIT_OK


# --- verify ------------------------------------------------------------------


def cmd_verify(args) -> int:
    seed = _seed(args)
    suites = []
    for item in args.suite or list(SUITES):
        suites += [s for s in item.split(",") if s]
    bad = [s for s in suites if s not in SUITES]
    if bad:
        raise ConfigError(f"unknown suite {bad[0]!r}; choose from {', '.join(SUITES)}")
    first_failure = None
    for name in suites:
        res = run_suite(name, seed=seed, fault=args.fault)
        status = "PASS" if res.passed else "FAIL"
        print(f"{name:<10} {status}  max error {res.max_error:.3e}  (tolerance {res.tolerance:g}, "
              f"{res.checks} checks)")
        if not res.passed and first_failure is None:
            first_failure = f"{name}: {res.failure}"
    if first_failure:
        print(f"first failing property: {first_failure}")
        return EXIT_VERIFY
    print("all suites passed")
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def _add_net_flags(p: argparse.ArgumentParser, with_layer: bool = False) -> None:
    if with_layer:
        p.add_argument("--layer", choices=("linear", "conv"), help="analyze a single layer")
    p.add_argument("--net", choices=NETS, help="network builder (default: demo)")
    formats = TD_FORMATS + ("dense",) + (("all",) if with_layer else ())
    p.add_argument("--format", choices=formats, help="decomposition format (default: tr)")
    p.add_argument("--in-modes", type=_ints, help="input mode factorization, e.g. 20,26,26")
    p.add_argument("--out-modes", type=_ints, help="output (or LSTM hidden) modes, e.g. 10")
    p.add_argument("--ranks", type=_ints, help="rank list; a single value is expanded")
    p.add_argument("--kernel", type=int, help="kernel size for --layer conv")
    p.add_argument("--blocks", type=int, default=5, help="BTT block-term count (default: 5)")
    p.add_argument("--classes", type=int, help="number of classes (default: 10)")


def _add_data_flags(p: argparse.ArgumentParser, train: bool) -> None:
    p.add_argument("--data-dir", help="directory with the canonical MNIST IDX files (plain or .gz)")
    splits = ("train", "test") if train else ("test",)
    for split in splits:
        p.add_argument(f"--{split}-images", help=f"{split} images IDX file")
        p.add_argument(f"--{split}-labels", help=f"{split} labels IDX file")
        p.add_argument(f"--{split}-subset", type=int, help=f"use a seeded random subset of this many {split} samples")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdnets", description="Tensor-decomposition network toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="parameter counts and compression ratios")
    _add_net_flags(p, with_layer=True)
    p.add_argument("--json", action="store_true", help="emit JSON instead of a table")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train", help="train a network on MNIST and save a checkpoint")
    _add_net_flags(p)
    _add_data_flags(p, train=True)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--momentum", type=float, default=0.9, help="SGD momentum")
    p.add_argument("--seed", type=int, default=0, help=f"overridden by ${SEED_ENV}")
    p.add_argument("--out", default="model.tdnc", help="checkpoint path (empty string: do not save)")
    p.add_argument("--json", action="store_true", help="also print the history as JSON")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="test accuracy of a checkpoint")
    p.add_argument("checkpoint")
    _add_data_flags(p, train=False)
    p.add_argument("--seed", type=int, default=0, help=f"subset seed; overridden by ${SEED_ENV}")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("verify", help="run the self-check suites")
    p.add_argument("--suite", action="append", help=f"suite(s) to run: {', '.join(SUITES)} (default: all)")
    p.add_argument("--seed", type=int, default=0, help=f"overridden by ${SEED_ENV}")
    p.add_argument("--fault", choices=FAULTS, help="inject a fault to exercise failure reporting")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("inspect", help="summarize a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, InvalidConfig, ShapeMismatch, TDError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
