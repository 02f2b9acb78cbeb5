"""Experiment config files: UTF-8 ``key = value`` lines, ``#`` comments."""

import os
from dataclasses import dataclass
from pathlib import Path

from .hierarchy import SHIPPED_TREES, LabelTree, load_label_tree, shipped_tree
from .model import PRESETS
from .train import ScheduleTable

DATASETS = ("mnist", "cifar10", "cifar100")
INPUT_SHAPES = {"mnist": (28, 28, 1), "cifar10": (32, 32, 3), "cifar100": (32, 32, 3)}
DATA_DIR_ENV = "BCNN_DATA_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str
    data_dir: Path
    arch: str
    width_divisor: int
    tree_path: str
    epochs: int
    batch_size: int
    seed: int
    lr_schedule: ScheduleTable
    loss_weight_schedule: ScheduleTable
    out_dir: Path
    mode: str = "bcnn"
    train_limit: int = None
    test_limit: int = None
    tree: LabelTree = None

    def describe(self):
        """Resolved settings, one ``key = value`` line each."""
        return "\n".join([
            f"dataset = {self.dataset}",
            f"arch = {self.arch}",
            f"width_divisor = {self.width_divisor}",
            f"mode = {self.mode}",
            f"tree = {self.tree_path} (levels={self.tree.K} counts={','.join(map(str, self.tree.counts))})",
            f"epochs = {self.epochs}",
            f"batch_size = {self.batch_size}",
            f"seed = {self.seed}",
            f"train_limit = {self.train_limit if self.train_limit is not None else 'all'}",
            f"test_limit = {self.test_limit if self.test_limit is not None else 'all'}",
            f"lr = {self.lr_schedule.format()}",
            f"loss_weights = {self.loss_weight_schedule.format()}",
            f"out_dir = {self.out_dir}",
        ])


REQUIRED = ("dataset", "arch", "tree", "epochs", "lr", "loss_weights")
KNOWN = REQUIRED + ("data_dir", "width_divisor", "batch_size", "seed", "out_dir", "mode",
                    "train_limit", "test_limit")


def parse_config_text(text, base_dir=None, env=None, name="run"):
    """Build a RunConfig; relative paths resolve against ``base_dir``.

    Without an ``out_dir`` key, output goes to ``runs/<name>`` under the
    working directory.
    """
    env = os.environ if env is None else env
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in KNOWN:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    missing = [k for k in REQUIRED if k not in raw]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")

    def integer(key, default=None, minimum=1):
        if key not in raw:
            return default
        try:
            v = int(raw[key])
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw[key]!r}") from None
        if v < minimum:
            raise ConfigError(f"{key}: must be >= {minimum}, got {v}")
        return v

    def path(value):
        p = Path(value).expanduser()
        return p if p.is_absolute() else base_dir / p

    dataset = raw["dataset"]
    if dataset not in DATASETS:
        raise ConfigError(f"dataset: expected one of {DATASETS}, got {dataset!r}")
    arch = raw["arch"]
    if arch not in PRESETS:
        raise ConfigError(f"arch: expected one of {sorted(PRESETS)}, got {arch!r}")
    if PRESETS[arch].input_shape != INPUT_SHAPES[dataset]:
        raise ConfigError(f"arch {arch} takes {PRESETS[arch].input_shape} inputs; {dataset} images are "
                          f"{INPUT_SHAPES[dataset]}")
    mode = raw.get("mode", "bcnn")
    if mode not in ("bcnn", "baseline"):
        raise ConfigError(f"mode: expected bcnn or baseline, got {mode!r}")

    if "data_dir" in raw:
        data_dir = path(raw["data_dir"])
    elif env.get(DATA_DIR_ENV):
        data_dir = Path(env[DATA_DIR_ENV])
    else:
        raise ConfigError(f"no data_dir key and {DATA_DIR_ENV} is unset")

    tree_path = raw["tree"]
    try:
        if tree_path in SHIPPED_TREES:
            tree = shipped_tree(tree_path)
        else:
            tree_file = path(tree_path)
            if not tree_file.exists():
                raise ConfigError(f"tree: file not found: {tree_file}")
            tree = load_label_tree(tree_file)
            tree_path = str(tree_file)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"tree {tree_path}: {exc}") from None

    try:
        lr = ScheduleTable.parse(raw["lr"])
        weights = ScheduleTable.parse(raw["loss_weights"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not lr.entries or lr.width != 1:
        raise ConfigError("lr: each entry needs exactly one value")
    if any(v[0] <= 0 for _, v in lr.entries):
        raise ConfigError("lr: learning rates must be positive")

    if mode == "baseline":
        # a baseline has only the fine head, trained on the fine loss alone
        weights = ScheduleTable(((1, (1.0,)),))
    else:
        if weights.width != tree.K:
            raise ConfigError(f"loss_weights: entries have {weights.width} values but the tree has K={tree.K}")
        if tree.K != PRESETS[arch].levels:
            raise ConfigError(f"arch {arch} has {PRESETS[arch].levels} outputs but the tree has K={tree.K}")
        try:
            weights.as_loss_weights()
        except ValueError as exc:
            raise ConfigError(f"loss_weights: {exc}") from None

    out_dir = path(raw["out_dir"]) if "out_dir" in raw else Path.cwd() / "runs" / name
    return RunConfig(
        dataset=dataset, data_dir=data_dir, arch=arch,
        width_divisor=integer("width_divisor", 1), tree_path=tree_path,
        epochs=integer("epochs"), batch_size=integer("batch_size", 128, minimum=2),
        seed=integer("seed", 0, minimum=0), lr_schedule=lr, loss_weight_schedule=weights,
        out_dir=out_dir, mode=mode, train_limit=integer("train_limit"),
        test_limit=integer("test_limit"), tree=tree)


def load_config(path, env=None):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not UTF-8 ({exc})") from None
    return parse_config_text(text, path.resolve().parent, env, path.stem)


def shipped_config_names():
    from importlib import resources
    root = resources.files("bcnn").joinpath("configs")
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".cfg"))


def shipped_config_path(name):
    from importlib import resources
    return Path(str(resources.files("bcnn").joinpath("configs").joinpath(f"{name}.cfg")))
