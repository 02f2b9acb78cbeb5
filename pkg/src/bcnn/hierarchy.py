"""Label trees: K levels of classes, each level-k class pointing at one parent
on level k-1.  Levels are numbered 1 (coarsest) to K (fine).

Tree files are line oriented::

    # comment
    3                  <- K
    2 7 10             <- class count per level
    0 0 0 1 1 1 1      <- parent of each level-2 class (on level 1)
    0 1 3 4 5 4 6 5 2 1
    name 1 0 transport <- optional display names
"""

from dataclasses import dataclass
from importlib import resources

import numpy as np


class TreeParseError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _frozen(a):
    a = np.asarray(a, dtype=np.int64).copy()
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LabelTree:
    """Equality compares structure (counts and parent maps), not names."""

    counts: tuple
    parents: tuple = ()  # parents[k-2] maps level-k classes to level k-1
    names: tuple = ()

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if not counts:
            raise ValueError("a label tree needs at least one level")
        if any(c < 1 for c in counts):
            raise ValueError(f"class counts must be positive, got {counts}")
        parents = tuple(_frozen(p) for p in self.parents)
        if len(parents) != len(counts) - 1:
            raise ValueError(f"expected {len(counts) - 1} parent maps, got {len(parents)}")
        for k, p in enumerate(parents, start=2):
            _check_parent_map(p, counts[k - 1], counts[k - 2], k)
        names = tuple(tuple(level) for level in self.names) or tuple(() for _ in counts)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "names", names)

    def __eq__(self, other):
        if not isinstance(other, LabelTree):
            return NotImplemented
        return self.counts == other.counts and all(
            np.array_equal(a, b) for a, b in zip(self.parents, other.parents))

    def __hash__(self):
        return hash((self.counts, tuple(p.tobytes() for p in self.parents)))

    @property
    def K(self):
        return len(self.counts)

    @property
    def fine_count(self):
        return self.counts[-1]

    def name(self, level, index):
        level_names = self.names[level - 1]
        if index < len(level_names) and level_names[index]:
            return level_names[index]
        return str(index)

    def parent_map(self, level):
        """Parent indices (on level-1) of every class on ``level``."""
        if not 2 <= level <= self.K:
            raise ValueError(f"level {level} has no parent map (K={self.K})")
        return self.parents[level - 2]

    def ancestor(self, level, index, target_level):
        """Ancestor of class ``index`` on ``level`` at ``target_level``."""
        if not 1 <= target_level <= level <= self.K:
            raise ValueError(f"need 1 <= target_level <= level <= K, got {target_level}, {level}, K={self.K}")
        if not 0 <= index < self.counts[level - 1]:
            raise ValueError(f"class {index} out of range for level {level}")
        for k in range(level, target_level, -1):
            index = int(self.parents[k - 2][index])
        return index

    def ancestors(self, level, indices, target_level):
        """Vectorised ``ancestor`` over an integer array."""
        if not 1 <= target_level <= level <= self.K:
            raise ValueError(f"need 1 <= target_level <= level <= K, got {target_level}, {level}, K={self.K}")
        out = np.asarray(indices, dtype=np.int64)
        for k in range(level, target_level, -1):
            out = self.parents[k - 2][out]
        return out

    def derive_targets(self, fine_labels):
        """Per-level targets, coarsest first; the last entry is the input."""
        fine = np.asarray(fine_labels, dtype=np.int64)
        if fine.size and (fine.min() < 0 or fine.max() >= self.fine_count):
            raise ValueError(f"fine labels must lie in [0, {self.fine_count})")
        targets = [fine]
        for k in range(self.K, 1, -1):
            targets.append(self.parents[k - 2][targets[-1]])
        return targets[::-1]

    def flat(self):
        """One-level tree over the fine classes (used by baseline models)."""
        return LabelTree((self.fine_count,), (), (self.names[-1],))

    def to_text(self):
        lines = [str(self.K), " ".join(map(str, self.counts))]
        lines += [" ".join(map(str, p.tolist())) for p in self.parents]
        for k, level_names in enumerate(self.names, start=1):
            for i, n in enumerate(level_names):
                if n:
                    lines.append(f"name {k} {i} {n}")
        return "\n".join(lines) + "\n"


def _check_parent_map(p, n_children, n_parents, level, line=None):
    if p.shape != (n_children,):
        raise TreeParseError(f"level {level} parent map needs {n_children} entries, got {p.size}", line)
    bad = np.flatnonzero((p < 0) | (p >= n_parents))
    if bad.size:
        i = int(bad[0])
        raise TreeParseError(
            f"level {level} class {i}: parent {int(p[i])} outside [0, {n_parents})", line)
    orphans = np.setdiff1d(np.arange(n_parents), p)
    if orphans.size:
        raise TreeParseError(f"level {level - 1} class {int(orphans[0])} has no children", line)


def _ints(tokens, lineno):
    try:
        return [int(t) for t in tokens]
    except ValueError:
        raise TreeParseError(f"expected integers, got {' '.join(tokens)!r}", lineno) from None


def parse_label_tree(text):
    structural = []
    name_lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("name"):
            name_lines.append((lineno, line))
        else:
            structural.append((lineno, line.split()))
    if not structural:
        raise TreeParseError("empty tree file")

    lineno, tokens = structural[0]
    vals = _ints(tokens, lineno)
    if len(vals) != 1 or vals[0] < 1:
        raise TreeParseError("first line must hold the level count K >= 1", lineno)
    K = vals[0]
    if len(structural) != K + 1:
        last = structural[-1][0]
        raise TreeParseError(f"K={K} needs {K + 1} data lines, found {len(structural)}", last)

    lineno, tokens = structural[1]
    counts = _ints(tokens, lineno)
    if len(counts) != K:
        raise TreeParseError(f"expected {K} class counts, got {len(counts)}", lineno)
    if any(c < 1 for c in counts):
        raise TreeParseError("class counts must be positive", lineno)

    parents = []
    for k in range(2, K + 1):
        lineno, tokens = structural[k]
        p = np.asarray(_ints(tokens, lineno), dtype=np.int64)
        _check_parent_map(p, counts[k - 1], counts[k - 2], k, lineno)
        parents.append(p)

    names = [[""] * c for c in counts]
    for lineno, line in name_lines:
        parts = line.split(None, 3)
        if len(parts) < 4 or parts[0] != "name":
            raise TreeParseError("name lines read 'name <level> <index> <label>'", lineno)
        k, i = _ints(parts[1:3], lineno)
        if not 1 <= k <= K or not 0 <= i < counts[k - 1]:
            raise TreeParseError(f"name refers to missing class {k}/{i}", lineno)
        names[k - 1][i] = parts[3].strip()
    return LabelTree(tuple(counts), tuple(parents), tuple(tuple(n) for n in names))


def load_label_tree(path):
    with open(path, encoding="utf-8") as f:
        return parse_label_tree(f.read())


SHIPPED_TREES = ("mnist", "cifar10", "cifar100")


def shipped_tree_text(name):
    if name not in SHIPPED_TREES:
        raise KeyError(f"no shipped tree named {name!r}; choose from {SHIPPED_TREES}")
    return resources.files("bcnn").joinpath("trees").joinpath(f"{name}.tree").read_text(encoding="utf-8")


def shipped_tree(name):
    return parse_label_tree(shipped_tree_text(name))


def check_dataset_consistency(tree, fine_labels, provided_coarse, coarse_level):
    """Count samples whose derived level-``coarse_level`` target disagrees
    with the dataset's own coarse label.  Returns (count, first index or None).
    """
    fine = np.asarray(fine_labels)
    coarse = np.asarray(provided_coarse)
    if fine.shape != coarse.shape:
        raise ValueError(f"label arrays differ in length: {fine.shape} vs {coarse.shape}")
    derived = tree.derive_targets(fine)[coarse_level - 1]
    bad = np.flatnonzero(derived != coarse)
    return int(bad.size), (int(bad[0]) if bad.size else None)
