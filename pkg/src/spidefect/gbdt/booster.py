"""Second-order gradient boosting with logistic loss for binary targets."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.special import expit

from ..core import FeatureTable
from ..errors import ConfigError, TrainingError
from . import kernels

MAX_DEPTH_CAP = 12


@dataclass
class TrainConfig:
    max_depth: int = 6
    num_rounds: int = 100
    learning_rate: float = 0.1
    l2_leaf_reg: float = 1.0
    min_split_gain: float = 0.0
    min_child_hessian: float = 1.0
    positive_class_weight: float | None = None  # None: N_neg / N_pos
    feature_top_k: int | None = None
    subsample: float = 1.0
    colsample: float = 1.0
    histogram_bins: int | None = None
    seed: int = 0

    def validate(self) -> None:
        if not 1 <= self.max_depth <= MAX_DEPTH_CAP:
            raise ConfigError(f"max_depth must be in [1, {MAX_DEPTH_CAP}], got {self.max_depth}")
        if self.num_rounds < 0:
            raise ConfigError("num_rounds must be nonnegative")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.l2_leaf_reg < 0 or self.min_split_gain < 0 or self.min_child_hessian < 0:
            raise ConfigError("l2_leaf_reg, min_split_gain and min_child_hessian must be nonnegative")
        if self.positive_class_weight is not None and not self.positive_class_weight > 0:
            raise ConfigError("positive_class_weight must be positive")
        if self.feature_top_k is not None and self.feature_top_k <= 0:
            raise ConfigError("feature_top_k must be positive")
        if not (0 < self.subsample <= 1 and 0 < self.colsample <= 1):
            raise ConfigError("subsample and colsample must lie in (0, 1]")
        if self.histogram_bins is not None and not 2 <= self.histogram_bins <= 65536:
            raise ConfigError("histogram_bins must be in [2, 65536]")


@dataclass(frozen=True)
class Leaf:
    weight: float


@dataclass(frozen=True)
class Split:
    feature_index: int
    threshold: float
    left: "Split | Leaf"
    right: "Split | Leaf"
    gain: float = 0.0


@dataclass(eq=False)
class Tree:
    """Flat node arrays; ``feature[i] < 0`` marks a leaf. Node 0 is the root.

    A row goes left when ``x[feature] < threshold``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def root(self) -> Split | Leaf:
        def build(i):
            if self.feature[i] < 0:
                return Leaf(float(self.value[i]))
            return Split(int(self.feature[i]), float(self.threshold[i]), build(self.left[i]),
                         build(self.right[i]), float(self.gain[i]))
        return build(0)

    def depth(self) -> int:
        def walk(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))
        return walk(0)

    def structure_equals(self, other: "Tree") -> bool:
        return all(np.array_equal(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))

    @classmethod
    def from_root(cls, root: Split | Leaf) -> "Tree":
        feature, threshold, left, right, value, gain = [], [], [], [], [], []

        def add(node):
            i = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            gain.append(0.0)
            if isinstance(node, Leaf):
                value[i] = node.weight
            else:
                feature[i] = node.feature_index
                threshold[i] = node.threshold
                gain[i] = node.gain
                left[i] = add(node.left)
                right[i] = add(node.right)
            return i

        add(root)
        return cls(np.array(feature, dtype=np.int32), np.array(threshold, dtype=np.float64),
                   np.array(left, dtype=np.int32), np.array(right, dtype=np.int32),
                   np.array(value, dtype=np.float64), np.array(gain, dtype=np.float64))


@dataclass(eq=False)
class BoostedModel:
    trees: list[Tree]
    base_score: float
    learning_rate: float
    feature_names: tuple[str, ...]
    config: TrainConfig = field(default_factory=TrainConfig)
    train_loss: list[float] = field(default_factory=list)

    def raw_score(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.feature_names):
            raise ValueError(f"expected {len(self.feature_names)} features, got shape {X.shape}")
        return self.base_score + self.learning_rate * _forest_sum(self.trees, X)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return expit(self.raw_score(X))


def _forest_sum(trees, X):
    if not trees:
        return np.zeros(X.shape[0])
    offsets = np.cumsum([0] + [t.n_nodes for t in trees[:-1]]).astype(np.int64)
    feature = np.concatenate([t.feature for t in trees]).astype(np.int32)
    threshold = np.concatenate([t.threshold for t in trees])
    left = np.concatenate([t.left + off for t, off in zip(trees, offsets)]).astype(np.int32)
    right = np.concatenate([t.right + off for t, off in zip(trees, offsets)]).astype(np.int32)
    value = np.concatenate([t.value for t in trees])
    return kernels.predict_sum(X, feature, threshold, left, right, value, offsets)


def weighted_logloss(margin, y, w) -> float:
    return float(np.sum(w * (np.logaddexp(0.0, margin) - y * margin)))


def class_weights(y: np.ndarray, positive_class_weight: float | None) -> np.ndarray:
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    wpos = n_neg / n_pos if positive_class_weight is None else float(positive_class_weight)
    return np.where(y == 1, wpos, 1.0)


def presort(X: np.ndarray):
    """Per-feature ascending row order (stable) and the matching sorted values."""
    order = np.argsort(X, axis=0, kind="stable")
    sorted_vals = np.take_along_axis(X, order, axis=0)
    return (np.ascontiguousarray(order.T, dtype=np.int32),
            np.ascontiguousarray(sorted_vals.T, dtype=np.float64))


def quantile_bins(X: np.ndarray, n_bins: int):
    """Equal-frequency binning; returns (binned X, per-feature cut points).

    ``bin = #cuts <= x``, so ``x < cuts[k]`` iff ``bin <= k``.
    """
    qs = np.linspace(0.0, 1.0, n_bins + 1)[1:-1]
    cuts = []
    binned = np.empty_like(X)
    for j in range(X.shape[1]):
        c = np.unique(np.quantile(X[:, j], qs, method="lower"))
        c = c[c > X[:, j].min()]
        cuts.append(c)
        binned[:, j] = np.searchsorted(c, X[:, j], side="right")
    return binned, cuts


def _grow_tree(X, order, sorted_vals, g, h, row_active, feature_mask, cfg: TrainConfig) -> Tree:
    lam = cfg.l2_leaf_reg
    feature, threshold, left, right, value, gain = [], [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        gain.append(0.0)
        return len(feature) - 1

    node_of = np.where(row_active, 0, -1).astype(np.int16)
    sorted_g, sorted_h = kernels.gather_sorted(order, g, h)
    level = [new_node()]
    for depth in range(cfg.max_depth + 1):
        m = len(level)
        G, H = kernels.node_sums(node_of, g, h, m)
        if depth < cfg.max_depth:
            bf, bt, bg = kernels.find_splits(order, sorted_vals, sorted_g, sorted_h, node_of, G, H,
                                             feature_mask, lam, cfg.min_split_gain,
                                             cfg.min_child_hessian)
        else:
            bf, bt, bg = np.full(m, -1, dtype=np.int64), np.zeros(m), np.zeros(m)
        to_left = np.full(m, -1, dtype=np.int16)
        to_right = np.full(m, -1, dtype=np.int16)
        nxt = []
        for s, nid in enumerate(level):
            if bf[s] < 0:
                value[nid] = -G[s] / (H[s] + lam)
                continue
            feature[nid] = int(bf[s])
            threshold[nid] = float(bt[s])
            gain[nid] = float(bg[s])
            left[nid] = new_node()
            right[nid] = new_node()
            to_left[s] = len(nxt)
            nxt.append(left[nid])
            to_right[s] = len(nxt)
            nxt.append(right[nid])
        if not nxt:
            break
        kernels.route(node_of, X, bf, bt, to_left, to_right)
        level = nxt
    return Tree(np.array(feature, dtype=np.int32), np.array(threshold, dtype=np.float64),
                np.array(left, dtype=np.int32), np.array(right, dtype=np.int32),
                np.array(value, dtype=np.float64), np.array(gain, dtype=np.float64))


def train(table: FeatureTable, config: TrainConfig | None = None) -> BoostedModel:
    """Fit a boosted ensemble on ``table.rows`` against ``table.target``."""
    cfg = config or TrainConfig()
    cfg.validate()
    if table.target is None:
        raise TrainingError("table has no target column")
    y = table.target.astype(np.float64)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise TrainingError("training target has a single class")
    X = np.ascontiguousarray(table.rows, dtype=np.float64)
    n, n_feat = X.shape
    w = class_weights(y, cfg.positive_class_weight)
    base = math.log(float(w[y == 1].sum()) / float(w[y == 0].sum()))

    cuts = None
    Xfit = X
    if cfg.histogram_bins is not None:
        Xfit, cuts = quantile_bins(X, cfg.histogram_bins)
    order, sorted_vals = presort(Xfit)

    rng = np.random.default_rng(cfg.seed)
    acc = np.zeros(n)
    margin = base + cfg.learning_rate * acc
    history = [weighted_logloss(margin, y, w)]
    trees = []
    all_rows = np.ones(n, dtype=bool)
    all_feats = np.ones(n_feat, dtype=np.uint8)
    n_cols = max(1, int(round(cfg.colsample * n_feat)))
    for r in range(cfg.num_rounds):
        p = expit(margin)
        g = w * (p - y)
        h = w * p * (1.0 - p)
        rows = all_rows if cfg.subsample >= 1.0 else rng.random(n) < cfg.subsample
        feats = all_feats
        if cfg.colsample < 1.0:
            feats = np.zeros(n_feat, dtype=np.uint8)
            feats[np.sort(rng.choice(n_feat, n_cols, replace=False))] = 1
        tree = _grow_tree(Xfit, order, sorted_vals, g, h, rows, feats, cfg)
        acc += _forest_sum([tree], Xfit)
        if cuts is not None:
            split = tree.feature >= 0
            bins = tree.threshold[split]
            # a binned threshold lies strictly between two occupied bins a < b
            tree.threshold[split] = [cuts[f][int(math.floor(b))] for f, b in zip(tree.feature[split], bins)]
        trees.append(tree)
        margin = base + cfg.learning_rate * acc
        loss = weighted_logloss(margin, y, w)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite training loss at round {r}")
        history.append(loss)
    return BoostedModel(trees, base, cfg.learning_rate, table.column_names, cfg, history)


def predict(model: BoostedModel, table: FeatureTable) -> np.ndarray:
    """Probabilities for every row of ``table`` (columns must match the model)."""
    if tuple(table.column_names) != tuple(model.feature_names):
        want, got = set(model.feature_names), set(table.column_names)
        missing = sorted(want - got)
        extra = sorted(got - want)
        detail = f"missing={missing[:10]} extra={extra[:10]}" if (missing or extra) else "order differs"
        raise ValueError(f"table columns do not match model features: {detail}")
    return model.predict_proba(table.rows)


def feature_importance(model: BoostedModel) -> dict[str, float]:
    """Total realised split gain per feature (0 for features never used)."""
    totals = np.zeros(len(model.feature_names))
    for tree in model.trees:
        split = tree.feature >= 0
        np.add.at(totals, tree.feature[split], tree.gain[split])
    return {name: float(v) for name, v in zip(model.feature_names, totals)}


def rank_features(importance: dict[str, float], names) -> list[str]:
    pos = {n: i for i, n in enumerate(names)}
    return sorted(names, key=lambda n: (-importance[n], pos[n]))


def select_top_k_features(table: FeatureTable, config: TrainConfig, k: int | None = None):
    """Keep the ``k`` columns with the largest gain in a probe model.

    Returns ``(reduced table, kept names by descending importance)``; the
    reduced table keeps the original column order.
    """
    k = config.feature_top_k if k is None else k
    if k is None or k <= 0:
        raise ConfigError("k must be a positive integer")
    if k > table.width:
        raise ConfigError(f"k={k} exceeds the table width {table.width}")
    if k == table.width:
        return table, list(table.column_names)
    probe = train(table, config)
    ranked = rank_features(feature_importance(probe), table.column_names)[:k]
    keep = set(ranked)
    return table.select_columns([c for c in table.column_names if c in keep]), ranked


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
