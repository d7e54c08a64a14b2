"""Tree-based and linear prior models.

The tree grower is exact greedy: for each node, every feature's sorted
values are scanned and the split with the largest reduction in squared
error (of the current targets) wins. Ties go to the lowest feature index,
then the lowest threshold. Feature orderings are computed once per fit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .nn import SGD, DenseNetwork, Layer, softmax, softmax_cross_entropy


@dataclass
class DecisionTree:
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (n_nodes, n_outputs)
    max_depth: int
    target_class: int | None = None

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    @property
    def n_features_in(self) -> int:
        used = self.feature[self.feature >= 0]
        return int(used.max()) + 1 if used.size else 0

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row of ``X``."""
        node = np.zeros(X.shape[0], dtype=int)
        for _ in range(self.max_depth + 1):
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                break
            rows = np.flatnonzero(internal)
            go_left = X[rows, f[rows]] <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]], self.right[node[rows]])
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(np.atleast_2d(X))]

    def split_counts(self, n_features: int) -> np.ndarray:
        f = self.feature[self.feature >= 0]
        return np.bincount(f, minlength=n_features)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "max_depth": self.max_depth,
            "target_class": self.target_class,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        return cls(
            np.array(d["feature"], dtype=int),
            np.array(d["threshold"], dtype=float),
            np.array(d["left"], dtype=int),
            np.array(d["right"], dtype=int),
            np.array(d["value"], dtype=float).reshape(len(d["feature"]), -1),
            d["max_depth"],
            d.get("target_class"),
        )


class _Grower:
    def __init__(self, X: np.ndarray):
        self.X = X
        self.XT = np.ascontiguousarray(X.T)
        self.orderT = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)

    def grow(
        self,
        targets: np.ndarray,
        weights: np.ndarray,
        max_depth: int,
        min_leaf: float,
        max_features: int | None = None,
        rng: np.random.Generator | None = None,
        hess: np.ndarray | None = None,
        min_hess: float = 0.0,
    ) -> tuple[DecisionTree, np.ndarray]:
        """Grow one tree; leaves hold weighted target means.

        With ``hess`` given, every child must also keep a hessian sum of at
        least ``min_hess``. Returns the tree and each training row's leaf index
        (-1 where weight is 0).
        """
        n, n_feat = self.X.shape
        targets = targets.reshape(n, -1)
        feature, threshold, left, right, value = [], [], [], [], []
        leaf_of = np.full(n, -1, dtype=int)

        def new_node(mask) -> int:
            w = weights[mask]
            value.append((w[:, None] * targets[mask]).sum(0) / w.sum())
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            return len(feature) - 1

        root_mask = weights > 0
        stack = [(new_node(root_mask), root_mask, 0)]
        while stack:
            node, mask, depth = stack.pop()
            best = None
            if (depth < max_depth and weights[mask].sum() >= 2 * min_leaf
                    and (hess is None or hess[mask].sum() >= 2 * min_hess)):
                allowed = None
                if max_features is not None and max_features < n_feat:
                    allowed = np.sort(rng.choice(n_feat, size=max_features, replace=False))
                best = self._best_split(targets, weights, mask, min_leaf, allowed, hess, min_hess)
            if best is None:
                leaf_of[mask] = node
                continue
            f, thr = best
            go_left = mask & (self.X[:, f] <= thr)
            go_right = mask & ~go_left
            feature[node], threshold[node] = f, thr
            l_id = new_node(go_left)
            r_id = new_node(go_right)
            left[node], right[node] = l_id, r_id
            # right pushed first so the left subtree gets lower node ids
            stack.append((r_id, go_right, depth + 1))
            stack.append((l_id, go_left, depth + 1))
        tree = DecisionTree(
            np.array(feature, dtype=int),
            np.array(threshold, dtype=float),
            np.array(left, dtype=int),
            np.array(right, dtype=int),
            np.array(value, dtype=float),
            max_depth,
        )
        return tree, leaf_of

    def _best_split(self, targets, weights, mask, min_leaf, allowed, hess=None, min_hess=0.0):
        orderT = self.orderT if allowed is None else self.orderT[allowed]
        feats = np.arange(self.X.shape[1]) if allowed is None else allowed
        sel = mask[orderT]
        m = int(mask.sum())
        if m < 2:
            return None
        o = orderT[sel].reshape(len(feats), m)
        xs = self.XT[feats[:, None], o]
        w = weights[o]
        wr = w[..., None] * targets[o]
        cw = np.cumsum(w, axis=1)[:, :-1]
        cr = np.cumsum(wr, axis=1)[:, :-1, :]
        tw = w.sum(axis=1, keepdims=True)
        tr = wr.sum(axis=1, keepdims=True)
        rw = tw - cw
        valid = (xs[:, :-1] < xs[:, 1:]) & (cw >= min_leaf) & (rw >= min_leaf)
        if hess is not None:
            h = hess[o]
            ch = np.cumsum(h, axis=1)[:, :-1]
            valid &= (ch >= min_hess) & (h.sum(axis=1, keepdims=True) - ch >= min_hess)
        if not valid.any():
            return None
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = (cr**2).sum(-1) / cw + ((tr - cr) ** 2).sum(-1) / rw - (tr**2).sum(-1) / tw
        gain = np.where(valid, gain, -np.inf)
        flat = int(np.argmax(gain))
        fi, j = divmod(flat, m - 1)
        scale = max(1.0, float(np.abs(tr).sum()))
        if not gain[fi, j] > 1e-12 * scale:
            return None
        lo, hi = xs[fi, j], xs[fi, j + 1]
        thr = 0.5 * (lo + hi)
        if not lo <= thr < hi:
            thr = lo
        return int(feats[fi]), float(thr)


def _check_X(X: np.ndarray, n_features: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    X2 = np.atleast_2d(X)
    if X2.shape[1] != n_features:
        raise DimensionError(f"expected {n_features} features, got {X2.shape[1]}")
    return X2


def _log_loss(F: np.ndarray, Y: np.ndarray) -> float:
    z = F - F.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-(Y * logp).sum() / F.shape[0])


@dataclass
class GBDTConfig:
    n_trees: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    min_leaf: int = 5
    min_child_weight: float = 0.0

    def validate(self):
        if (self.n_trees < 0 or self.max_depth < 1 or self.min_leaf < 1 or not self.learning_rate > 0
                or self.min_child_weight < 0):
            raise ConfigError(f"invalid GBDT config {self}")


@dataclass
class GBDTModel:
    """Multi-class boosted trees: probs = softmax(base_score + lr * sum of tree scores).

    Each round adds one single-output tree per class (``tree.target_class``).
    """

    trees: list[DecisionTree]
    learning_rate: float
    base_score: np.ndarray
    n_features: int
    train_log_loss: list[float] = field(default_factory=list)
    kind: str = "gbdt"

    @property
    def n_classes(self) -> int:
        return self.base_score.size

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X2 = _check_X(X, self.n_features)
        F = np.tile(self.base_score, (X2.shape[0], 1))
        for tree in self.trees:
            F[:, tree.target_class] += self.learning_rate * tree.predict(X2)[:, 0]
        return F

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        P = softmax(self.decision_function(X))
        return P[0] if np.asarray(X).ndim == 1 else P

    def split_counts(self) -> np.ndarray:
        counts = np.zeros(self.n_features, dtype=int)
        for t in self.trees:
            counts += t.split_counts(self.n_features)
        return counts

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "learning_rate": self.learning_rate,
            "base_score": self.base_score.tolist(),
            "n_features": self.n_features,
            "train_log_loss": self.train_log_loss,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GBDTModel":
        return cls(
            [DecisionTree.from_dict(t) for t in d["trees"]],
            d["learning_rate"],
            np.array(d["base_score"], dtype=float),
            d["n_features"],
            list(d.get("train_log_loss", [])),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "GBDTModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def train_gbdt(
    X: np.ndarray, y: np.ndarray, n_classes: int | None = None, cfg: GBDTConfig | None = None
) -> GBDTModel:
    """Stagewise softmax boosting with Newton leaf values.

    A round whose update would raise the training log-loss is shrunk by
    halving until it does not, so the recorded loss never increases.
    """
    cfg = cfg or GBDTConfig()
    cfg.validate()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    k = int(n_classes if n_classes is not None else y.max() + 1)
    if k < 2:
        raise DataError("GBDT needs at least two classes")
    n = X.shape[0]
    Y = np.eye(k)[y]
    prior = (Y.sum(0) + 1.0) / (n + k)
    base = np.log(prior)
    base -= base.mean()
    F = np.tile(base, (n, 1))
    grower = _Grower(X)
    ones = np.ones(n)
    trees: list[DecisionTree] = []
    losses = [_log_loss(F, Y)]
    for _ in range(cfg.n_trees):
        P = softmax(F)
        round_trees, update = [], np.zeros_like(F)
        for c in range(k):
            resid = Y[:, c] - P[:, c]
            hess = P[:, c] * (1.0 - P[:, c])
            tree, leaf_of = grower.grow(resid, ones, cfg.max_depth, cfg.min_leaf,
                                        hess=hess, min_hess=cfg.min_child_weight)
            num = np.bincount(leaf_of, weights=resid, minlength=tree.n_nodes)
            den = np.bincount(leaf_of, weights=hess, minlength=tree.n_nodes)
            vals = (k - 1) / k * num / np.maximum(den, 1e-12)
            tree.value = np.clip(vals, -10.0, 10.0)[:, None]
            tree.target_class = c
            update[:, c] = tree.value[leaf_of, 0]
            round_trees.append(tree)
        scale = 1.0
        new_loss = _log_loss(F + cfg.learning_rate * update, Y)
        for _ in range(30):
            if new_loss <= losses[-1]:
                break
            scale *= 0.5
            new_loss = _log_loss(F + cfg.learning_rate * scale * update, Y)
        else:
            scale = 0.0
            new_loss = losses[-1]
        if scale != 1.0:
            for tree in round_trees:
                tree.value = tree.value * scale
        F = F + cfg.learning_rate * scale * update
        trees.extend(round_trees)
        losses.append(new_loss)
    return GBDTModel(trees, cfg.learning_rate, base, X.shape[1], losses)


@dataclass
class RandomForest:
    trees: list[DecisionTree]
    n_features: int
    n_classes: int
    kind: str = "random_forest"

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X2 = _check_X(X, self.n_features)
        P = np.mean([t.predict(X2) for t in self.trees], axis=0)
        return P[0] if np.asarray(X).ndim == 1 else P

    def split_counts(self) -> np.ndarray:
        return np.sum([t.split_counts(self.n_features) for t in self.trees], axis=0)


def train_random_forest(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int | None = None,
    n_trees: int = 100,
    max_depth: int = 12,
    min_leaf: int = 1,
    max_features: str | int = "sqrt",
    seed: int = 0,
) -> RandomForest:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    k = int(n_classes if n_classes is not None else y.max() + 1)
    if k < 2:
        raise DataError("random forest needs at least two classes")
    n, d = X.shape
    mf = max(1, int(math.sqrt(d))) if max_features == "sqrt" else int(max_features)
    rng = np.random.default_rng(seed)
    Y = np.eye(k)[y]
    grower = _Grower(X)
    trees = []
    for _ in range(n_trees):
        counts = np.bincount(rng.integers(0, n, size=n), minlength=n).astype(float)
        tree, leaf_of = grower.grow(Y, counts, max_depth, min_leaf, max_features=mf, rng=rng)
        # Laplace-smoothed leaf class distributions keep probabilities inside (0, 1)
        num = np.stack([np.bincount(leaf_of[counts > 0], weights=(counts[:, None] * Y)[counts > 0, c],
                                    minlength=tree.n_nodes) for c in range(k)], axis=1)
        tot = num.sum(1, keepdims=True)
        leaf = tree.feature < 0
        tree.value[leaf] = (num[leaf] + 1.0 / k) / (tot[leaf] + 1.0)
        trees.append(tree)
    return RandomForest(trees, d, k)


@dataclass
class LogisticModel:
    net: DenseNetwork
    kind: str = "logistic"

    @property
    def n_classes(self) -> int:
        return self.net.output_dim

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.net.forward(X))


def train_logistic(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int | None = None,
    epochs: int = 300,
    lr: float = 0.5,
    l2: float = 1e-3,
) -> LogisticModel:
    """Multinomial logistic regression: one linear layer, full-batch SGD on softmax CE."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    k = int(n_classes if n_classes is not None else y.max() + 1)
    if k < 2:
        raise DataError("logistic regression needs at least two classes")
    net = DenseNetwork([Layer(np.zeros((k, X.shape[1])), np.zeros(k), "identity")])
    opt = SGD(lr, momentum=0.9, weight_decay=l2)
    Y = np.eye(k)[y]
    for _ in range(epochs):
        _, grad = softmax_cross_entropy(net.forward(X, keep=True), Y)
        opt.step(net, net.backward(grad))
    return LogisticModel(net)


def train_baselines(X, y, n_classes=None, seed: int = 0) -> dict:
    return {
        "logistic": train_logistic(X, y, n_classes),
        "random_forest": train_random_forest(X, y, n_classes, seed=seed),
    }


def player_split_frequency(model, groups: list[np.ndarray]) -> np.ndarray:
    """Fraction of all tree splits made on each player's encoded columns."""
    counts = model.split_counts()
    per_player = np.array([counts[g].sum() for g in groups], dtype=float)
    total = per_player.sum()
    return per_player / total if total else per_player


@dataclass
class PriorMember:
    prior: object
    surrogate: object
    weight: float
    name: str = "prior"


@dataclass
class PriorEnsemble:
    members: list[PriorMember]

    def __post_init__(self):
        if not self.members:
            raise ConfigError("an ensemble needs at least one member")
        total = sum(m.weight for m in self.members)
        if abs(total - 1.0) > 1e-12:
            raise ConfigError(f"ensemble weights must sum to 1, got {total}")

    @property
    def weights(self) -> np.ndarray:
        return np.array([m.weight for m in self.members])

    def __len__(self) -> int:
        return len(self.members)


def make_ensemble(models: list, weights: list[float] | None = None, names: list[str] | None = None) -> PriorEnsemble:
    """``models`` are (prior, surrogate) pairs; weights are normalized to sum to 1."""
    if not models:
        raise ConfigError("make_ensemble needs at least one model")
    weights = [1.0] * len(models) if weights is None else list(weights)
    if len(weights) != len(models):
        raise ConfigError("models and weights differ in length")
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or not w.sum() > 0:
        raise ConfigError("weights must be non-negative and not all zero")
    w = w / w.sum()
    # absorb rounding so the stored weights sum to 1 within 1e-12
    w[-1] = 1.0 - w[:-1].sum()
    names = names or [f"prior_{i}" for i in range(len(models))]
    members = [PriorMember(p, s, float(wi), nm) for (p, s), wi, nm in zip(models, w, names)]
    return PriorEnsemble(members)
