"""Hierarchical binary decomposition, tree-walk prediction, aggregation and metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DomainError, NotTrainedError

KOA_FIXED = "koa-fixed"
COUNT_BALANCED = "count-balanced"
MODES = (KOA_FIXED, COUNT_BALANCED)


@dataclass
class HierarchyNode:
    node_id: str
    left_classes: tuple[int, ...]
    right_classes: tuple[int, ...]
    depth: int
    left_child: str | None = None  # None: the left side is a single class leaf
    right_child: str | None = None
    model: object = None

    @property
    def classes(self) -> tuple[int, ...]:
        return self.left_classes + self.right_classes

    @property
    def weight(self) -> float:
        return math.log(self.depth + 1)

    @property
    def trained(self) -> bool:
        return self.model is not None


@dataclass
class HierarchyTree:
    nodes: dict[str, HierarchyNode]
    root: str = "root"

    def __iter__(self):
        return iter(self.nodes.values())

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def classes(self) -> tuple[int, ...]:
        return self.nodes[self.root].classes

    @property
    def depths(self) -> list[int]:
        return [n.depth for n in self]


def _node(tree: dict, node_id: str, left, right, depth: int, left_child=None, right_child=None) -> None:
    tree[node_id] = HierarchyNode(node_id, tuple(left), tuple(right), depth, left_child, right_child)


def _koa_tree(classes: list[int]) -> dict:
    c0, c1, c2, c3, c4 = classes
    tree: dict = {}
    _node(tree, "root", (c0, c1), (c2, c3, c4), 1, "2L", "2R")
    _node(tree, "2L", (c0,), (c1,), 2)
    _node(tree, "2R", (c2,), (c3, c4), 2, None, "3")
    _node(tree, "3", (c3,), (c4,), 3)
    return tree


def _best_split(counts: list[int]) -> int:
    """Index ``s`` so that ``counts[:s]`` vs ``counts[s:]`` is the least imbalanced; first wins ties."""
    total = sum(counts)
    best, best_gap = 1, None
    run = 0
    for s in range(1, len(counts)):
        run += counts[s - 1]
        gap = abs(run - (total - run))
        if best_gap is None or gap < best_gap:
            best, best_gap = s, gap
    return best


def _balanced_tree(classes: list[int], counts: list[int]) -> dict:
    tree: dict = {}

    def build(cls: list[int], cnt: list[int], node_id: str, depth: int) -> str:
        s = _best_split(cnt)
        left, right = cls[:s], cls[s:]
        lc = build(left, cnt[:s], node_id + "L" if node_id != "root" else "L", depth + 1) if len(left) > 1 else None
        rc = build(right, cnt[s:], node_id + "R" if node_id != "root" else "R", depth + 1) if len(right) > 1 else None
        _node(tree, node_id, left, right, depth, lc, rc)
        return node_id

    build(classes, counts, "root", 1)
    return tree


def decompose(classes, mode: str = KOA_FIXED, counts=None) -> HierarchyTree:
    """Split ordered severity classes into a tree of binary nodes.

    ``koa-fixed`` needs five classes (or two, giving a single root);
    ``count-balanced`` recursively picks the contiguous split with the
    smallest difference in sample count.
    """
    classes = list(classes)
    if len(classes) < 2:
        raise ValueError("decomposition needs at least two classes")
    if len(set(classes)) != len(classes):
        raise ValueError("classes must be distinct")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if len(classes) == 2:
        tree: dict = {}
        _node(tree, "root", classes[:1], classes[1:], 1)
        return HierarchyTree(tree)
    if mode == KOA_FIXED:
        if len(classes) != 5:
            raise ValueError("koa-fixed decomposition is defined for five classes")
        return HierarchyTree(_koa_tree(classes))
    counts = [1] * len(classes) if counts is None else [int(c) for c in counts]
    if len(counts) != len(classes):
        raise ValueError("one count per class is required")
    return HierarchyTree(_balanced_tree(classes, counts))


def assemble_node_dataset(node: HierarchyNode, x, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Keep samples whose class is in the node; relabel left -> 0, right -> 1.

    Returns ``(x_sel, y_binary, index)``.  Discarded proxies (label -1) never match.
    """
    y = np.asarray(y)
    idx = np.flatnonzero(np.isin(y, node.classes))
    return np.asarray(x)[idx], np.isin(y[idx], node.right_classes).astype(np.int64), idx


def route(tree: HierarchyTree, node_probs: dict[str, np.ndarray]) -> np.ndarray:
    """Walk every sample from the root using precomputed ``[N, 2]`` probabilities per node.

    Ties (``p0 == p1``) go left.
    """
    root_probs = node_probs[tree.root]
    n = len(root_probs)
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = tree.nodes[tree.root]
        while True:
            p = node_probs[node.node_id][i]
            go_right = p[1] > p[0]
            child = node.right_child if go_right else node.left_child
            if child is None:
                out[i] = (node.right_classes if go_right else node.left_classes)[0]
                break
            node = tree.nodes[child]
    return out


def predict(tree: HierarchyTree, x, prob_fn) -> np.ndarray:
    """Class index per image; ``prob_fn(node, x)`` returns ``[N, 2]`` side probabilities."""
    for node in tree:
        if not node.trained:
            raise NotTrainedError(f"node {node.node_id} has not been trained")
    return route(tree, {node.node_id: np.asarray(prob_fn(node, x)) for node in tree})


def aggregate_accuracy(accuracies, depths) -> float:
    """Depth-weighted mean with weights ``ln(depth + 1)``."""
    a = np.asarray(accuracies, dtype=np.float64)
    d = np.asarray(depths, dtype=np.float64)
    if a.size == 0:
        raise ValueError("no node accuracies given")
    if a.shape != d.shape:
        raise ValueError("accuracies and depths differ in length")
    if np.any(a < 0) or np.any(a > 1):
        raise ValueError("accuracies must lie in [0, 1]")
    if np.any(d < 1):
        raise ValueError("depths must be positive")
    w = np.log(d + 1.0)
    return float(np.sum(w * a) / np.sum(w))


@dataclass
class ConfusionCounts:
    """Per-class one-vs-rest counts."""

    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=np.int64))
            if np.any(arr < 0):
                raise ValueError(f"{name} counts must be nonnegative")
            setattr(self, name, arr)
        totals = self.tp + self.fp + self.tn + self.fn
        if np.any(totals != totals[0]):
            raise ValueError("per-class totals are inconsistent")

    @property
    def total(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.tn[0] + self.fn[0])

    @classmethod
    def from_predictions(cls, y_true, y_pred, class_count: int) -> "ConfusionCounts":
        y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
        if y_true.shape != y_pred.shape:
            raise ValueError("label and prediction arrays differ in shape")
        cm = np.zeros((class_count, class_count), dtype=np.int64)
        np.add.at(cm, (y_true, y_pred), 1)
        tp = np.diag(cm)
        fp = cm.sum(axis=0) - tp
        fn = cm.sum(axis=1) - tp
        tn = cm.sum() - tp - fp - fn
        return cls(tp, fp, tn, fn)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def compute_metrics(counts: ConfusionCounts) -> dict[str, float]:
    """Accuracy plus macro precision, recall and F1.

    A single-entry ``counts`` is read as a binary problem seen from the
    positive class.  Undefined per-class values count as 0.
    """
    n = counts.total
    if n == 0:
        raise DataError("metrics need at least one sample")
    if len(counts.tp) == 1:
        acc = (counts.tp[0] + counts.tn[0]) / n
    else:
        acc = counts.tp.sum() / n
    pre = _ratio(counts.tp, counts.tp + counts.fp)
    rec = _ratio(counts.tp, counts.tp + counts.fn)
    f1 = _ratio(2 * pre * rec, pre + rec)
    return {"acc": float(acc), "pre": float(pre.mean()), "rec": float(rec.mean()), "f1": float(f1.mean())}


@dataclass(frozen=True)
class AdccComponents:
    avg_drop: float
    coherency: float
    complexity: float


def adcc(avg_drop, coherency: float | None = None, complexity: float | None = None) -> float:
    """``3 / (1/(1 - AvD) + 1/Co + 1/(1 - Cx))``; accepts an :class:`AdccComponents`."""
    if isinstance(avg_drop, AdccComponents):
        avg_drop, coherency, complexity = avg_drop.avg_drop, avg_drop.coherency, avg_drop.complexity
    if not 0.0 <= avg_drop < 1.0:
        raise DomainError(f"average drop must lie in [0, 1), got {avg_drop}")
    if not 0.0 < coherency <= 1.0:
        raise DomainError(f"coherency must lie in (0, 1], got {coherency}")
    if not 0.0 <= complexity < 1.0:
        raise DomainError(f"complexity must lie in [0, 1), got {complexity}")
    return 3.0 / (1.0 / (1.0 - avg_drop) + 1.0 / coherency + 1.0 / (1.0 - complexity))


@dataclass
class NodeReport:
    node_id: str
    accuracy: float
    depth: int
    train_size: int
    history: list[dict] = field(default_factory=list)
