"""Command-line entry point: train, eval, gradcheck, tree, plot."""

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .data import LOADERS, FormatError, detect_dataset, load_checkpoint, read_metrics_csv
from .hierarchy import SHIPPED_TREES, TreeParseError, check_dataset_consistency, load_label_tree, shipped_tree
from .model import PRESETS, build_baseline, build_preset

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3

log = logging.getLogger("bcnn")


class DataError(RuntimeError):
    pass


def _load_splits(cfg):
    try:
        train, test = LOADERS[cfg.dataset](cfg.data_dir)
    except (OSError, FormatError) as exc:
        raise DataError(f"cannot load {cfg.dataset} from {cfg.data_dir}: {exc}") from exc
    return train.subset(cfg.train_limit), test.subset(cfg.test_limit)


def _build(cfg):
    if cfg.mode == "baseline":
        return build_baseline(cfg.arch, cfg.tree, seed=cfg.seed, width_divisor=cfg.width_divisor)
    return build_preset(cfg.arch, cfg.tree, seed=cfg.seed, width_divisor=cfg.width_divisor)


def cmd_train(args):
    from .plotting import plot_history
    from .train import fit

    cfg = load_config(args.config)
    print(cfg.describe(), flush=True)
    train, test = _load_splits(cfg)
    print(f"train_samples = {len(train)}\ntest_samples = {len(test)}", flush=True)
    model = _build(cfg)
    result = fit(model, train, test, cfg.lr_schedule, cfg.loss_weight_schedule, cfg.epochs,
                 batch_size=cfg.batch_size, seed=cfg.seed, out_dir=cfg.out_dir)
    plot_history(result.history, cfg.out_dir / "history.png", title=Path(args.config).stem)
    final = result.final
    for k, acc in enumerate(final.test_acc, start=1):
        print(f"final_acc_level_{k}={acc!r}")
    print(f"final_consistency={final.test_consistency!r}")
    print(f"best_epoch={result.best_epoch}")
    print(f"best_acc_fine={result.best_test_acc!r}")
    print(f"out_dir={cfg.out_dir}")
    return EXIT_OK


def cmd_eval(args):
    from .train import evaluate

    cfg = load_config(args.config)
    try:
        state = load_checkpoint(args.checkpoint)
    except (OSError, FormatError) as exc:
        raise DataError(f"cannot read checkpoint: {exc}") from exc
    model = _build(cfg)
    try:
        model.load_state_dict(state)
    except ValueError as exc:
        raise ConfigError(f"checkpoint {args.checkpoint} does not fit this config: {exc}") from None
    _, test = _load_splits(cfg)
    accs, consistency, _ = evaluate(model, test)
    for k, acc in enumerate(accs, start=1):
        print(f"acc_level_{k}={acc!r}")
    print(f"consistency={consistency!r}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import run_gradcheck

    if args.arch not in PRESETS:
        raise ConfigError(f"unknown arch {args.arch!r}")
    if args.divisor < 1:
        raise ConfigError("--divisor must be >= 1")
    ok, results = run_gradcheck(args.arch, args.divisor, seed=args.seed)
    if not ok:
        bad = [name for name, err in results.items() if not err <= 1e-4]
        print(f"gradient check failed for: {', '.join(bad)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _tree_from_arg(arg):
    if arg in SHIPPED_TREES and not Path(arg).exists():
        return shipped_tree(arg)
    if not Path(arg).exists():
        raise ConfigError(f"tree file not found: {arg}")
    try:
        return load_label_tree(arg)
    except (TreeParseError, ValueError) as exc:
        raise ConfigError(f"{arg}: {exc}") from None


def cmd_tree(args):
    tree = _tree_from_arg(args.tree)
    print(f"levels={tree.K} counts={','.join(map(str, tree.counts))}")
    for k in range(1, tree.K + 1):
        print(f"level_{k}=" + ",".join(tree.name(k, i) for i in range(tree.counts[k - 1])))
    if args.dataset is None:
        return EXIT_OK
    try:
        kind = detect_dataset(args.dataset)
        splits = LOADERS[kind](args.dataset)
    except (OSError, FormatError) as exc:
        raise DataError(str(exc)) from exc
    print(f"dataset={kind}")
    total, first = 0, None
    for split in splits:
        fine = split.fine_labels
        if fine.size and fine.max() >= tree.fine_count:
            raise ConfigError(f"{split.split} labels reach {fine.max()} but the tree has {tree.fine_count} fine classes")
        if split.coarse_labels is None:
            continue
        if tree.K < 2:
            raise ConfigError("the dataset has coarse labels but the tree has a single level")
        n, idx = check_dataset_consistency(tree, fine, split.coarse_labels, tree.K - 1)
        print(f"mismatches_{split.split}={n}")
        if n and first is None:
            first = f"{split.split}:{idx}"
        total += n
    if all(s.coarse_labels is None for s in splits):
        print("coarse_labels=none fine_range_ok=1")
        return EXIT_OK
    print(f"mismatches={total}")
    if first is not None:
        print(f"first_mismatch={first}")
    return EXIT_OK


def cmd_plot(args):
    from .plotting import plot_comparison, plot_history

    histories = {}
    for p in args.history:
        try:
            histories[Path(p).parent.name or Path(p).stem] = read_metrics_csv(p)
        except (OSError, ValueError, IndexError) as exc:
            raise DataError(f"cannot read {p}: {exc}") from exc
    out = Path(args.output)
    if len(histories) == 1:
        ((label, history),) = histories.items()
        plot_history(history, out, title=label)
    else:
        plot_comparison(histories, out)
    print("run,epochs," + "final_fine_acc,best_fine_acc")
    for label, history in histories.items():
        fine = [r.test_acc[-1] for r in history]
        print(f"{label},{len(history)},{fine[-1]!r},{max(fine)!r}")
    print(f"figure={out}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="bcnn", description="Branch CNN trainer for hierarchical labels.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("checkpoint")
    e.add_argument("config")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every layer and a reduced model")
    g.add_argument("--arch", default="A", choices=sorted(PRESETS))
    g.add_argument("--divisor", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("tree", help="validate a label tree, optionally against a dataset")
    r.add_argument("tree", help="tree file, or a shipped tree name: " + ", ".join(SHIPPED_TREES))
    r.add_argument("--dataset", help="dataset directory to check labels against")
    r.set_defaults(func=cmd_tree)

    pl = sub.add_parser("plot", help="render history.csv files to a figure")
    pl.add_argument("history", nargs="+")
    pl.add_argument("-o", "--output", default="history.png")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main_exit():
    sys.exit(main())
