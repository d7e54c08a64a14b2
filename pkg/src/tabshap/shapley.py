"""Coalitions, masking, exact and kernel Shapley values, masked surrogates, FastSHAP loss.

Players are semantic input columns. A one-hot categorical spans several
encoded columns but is one player; ``groups[i]`` lists player ``i``'s
encoded column indices and masking replaces them together.

Value functions are callables taking a boolean mask matrix ``(M, N)`` and
returning ``(M,)`` (one class) or ``(M, K)`` (every class) values.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapabilityError, ConfigError, DimensionError, DivergenceError, NumericError, UsageError
from .nn import SGD, DenseNetwork, softmax, softmax_cross_entropy

MAX_EXACT_PLAYERS = 20


class SubsetMask:
    """Boolean coalition over ``N`` players."""

    __slots__ = ("bits",)

    def __init__(self, bits):
        self.bits = np.asarray(bits, dtype=bool).copy()
        if self.bits.ndim != 1:
            raise DimensionError("a subset mask is a 1-D vector")

    def __len__(self) -> int:
        return self.bits.size

    def __eq__(self, other) -> bool:
        return isinstance(other, SubsetMask) and np.array_equal(self.bits, other.bits)

    def __hash__(self) -> int:
        return hash(self.bits.tobytes())

    def __repr__(self) -> str:
        return f"SubsetMask({self.bits.astype(int).tolist()})"

    @property
    def cardinality(self) -> int:
        return int(self.bits.sum())

    def complement(self) -> "SubsetMask":
        return SubsetMask(~self.bits)

    def with_player(self, i: int) -> "SubsetMask":
        bits = self.bits.copy()
        bits[i] = True
        return SubsetMask(bits)


@dataclass
class FeatureSpace:
    """Player layout over encoded columns plus masking defaults."""

    groups: list[np.ndarray]
    background: np.ndarray
    player_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64)
        cols = np.concatenate(self.groups) if self.groups else np.array([], dtype=int)
        if cols.size != self.background.size or np.unique(cols).size != cols.size:
            raise DimensionError("player groups must partition the encoded columns")
        if not self.player_names:
            self.player_names = [f"x{i}" for i in range(len(self.groups))]
        self._membership = np.zeros((len(self.groups), self.background.size))
        for i, g in enumerate(self.groups):
            self._membership[i, g] = 1.0

    @property
    def n_players(self) -> int:
        return len(self.groups)

    @property
    def n_columns(self) -> int:
        return self.background.size

    @classmethod
    def from_dataset(cls, ds) -> "FeatureSpace":
        return cls(list(ds.groups), ds.background(), list(ds.player_names))

    @classmethod
    def identity(cls, n: int, background=None) -> "FeatureSpace":
        bg = np.zeros(n) if background is None else background
        return cls([np.array([j]) for j in range(n)], bg)

    def column_mask(self, masks: np.ndarray) -> np.ndarray:
        """Expand player masks ``(..., N)`` to encoded-column masks ``(..., C)``."""
        return np.asarray(masks, dtype=np.float64) @ self._membership

    def apply(self, X: np.ndarray, masks: np.ndarray) -> np.ndarray:
        """Masked inputs. ``X`` is (n, C) and ``masks`` (n, N) or (n, M, N)."""
        cm = self.column_mask(masks)
        if cm.ndim == 3:
            X = X[:, None, :]
        return cm * X + (1.0 - cm) * self.background

    def to_dict(self) -> dict:
        return {
            "groups": [g.tolist() for g in self.groups],
            "background": self.background.tolist(),
            "player_names": self.player_names,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpace":
        return cls([np.array(g, dtype=int) for g in d["groups"]], np.array(d["background"]), d["player_names"])


def mask_input(x, S, background, groups=None) -> np.ndarray:
    """Keep features in ``S``; replace the rest (whole one-hot groups) by background."""
    x = np.asarray(x, dtype=np.float64)
    bits = S.bits if isinstance(S, SubsetMask) else np.asarray(S, dtype=bool)
    background = np.asarray(background, dtype=np.float64)
    if groups is None:
        groups = [np.array([j]) for j in range(x.size)]
    if x.shape != background.shape or bits.size != len(groups):
        raise DimensionError(
            f"x has {x.size} columns, background {background.size}, mask {bits.size} players "
            f"for {len(groups)} groups"
        )
    out = background.copy()
    for i, g in enumerate(groups):
        if bits[i]:
            out[g] = x[g]
    return out


# ----------------------------------------------------------------------------
# Shapley kernel sampling


def kernel_weight(n: int, s) -> np.ndarray:
    """Unnormalized Shapley kernel ``(n-1) / (C(n,s) s (n-s))`` for 0 < s < n."""
    s = np.asarray(s)
    return (n - 1) / (np.vectorize(math.comb)(n, s) * s * (n - s))


def kernel_size_distribution(n: int) -> np.ndarray:
    """Probability of each coalition size 1..n-1 under the normalized kernel."""
    sizes = np.arange(1, n)
    p = 1.0 / (sizes * (n - sizes))
    return p / p.sum()


def subset_probabilities(n: int) -> dict[tuple[int, ...], float]:
    """Exact normalized kernel probability of every proper, non-empty subset."""
    out = {}
    for bits in itertools.product((0, 1), repeat=n):
        s = sum(bits)
        if 0 < s < n:
            out[bits] = float(kernel_weight(n, s))
    total = sum(out.values())
    return {k: v / total for k, v in out.items()}


def sample_subsets(n: int, rng: np.random.Generator, size) -> np.ndarray:
    """Boolean masks of shape ``(*size, n)`` drawn from the normalized Shapley kernel.

    Size ``s`` is drawn with probability proportional to ``1 / (s (n - s))``,
    then a uniform subset of that size; this equals drawing each subset with
    probability proportional to its kernel weight.
    """
    if n < 2:
        raise ConfigError("kernel sampling needs at least 2 players")
    shape = (size,) if np.isscalar(size) else tuple(size)
    count = int(np.prod(shape))
    sizes = rng.choice(np.arange(1, n), size=count, p=kernel_size_distribution(n))
    keys = rng.random((count, n))
    # the `sizes` smallest keys in each row form a uniform subset of that size
    ranks = np.argsort(np.argsort(keys, axis=1), axis=1)
    masks = ranks < sizes[:, None]
    return masks.reshape(*shape, n)


def sample_subset(n: int, rng: np.random.Generator) -> SubsetMask:
    return SubsetMask(sample_subsets(n, rng, 1)[0])


def sample_uniform_cardinality(n: int, rng: np.random.Generator, size) -> np.ndarray:
    """Masks whose size is uniform on {0..n}, then a uniform subset of that size."""
    shape = (size,) if np.isscalar(size) else tuple(size)
    count = int(np.prod(shape))
    sizes = rng.integers(0, n + 1, size=count)
    ranks = np.argsort(np.argsort(rng.random((count, n)), axis=1), axis=1)
    return (ranks < sizes[:, None]).reshape(*shape, n)


# ----------------------------------------------------------------------------
# Games


def all_masks(n: int) -> np.ndarray:
    """All ``2**n`` masks; row ``r`` has player ``i`` present iff bit ``i`` of ``r`` is set."""
    idx = np.arange(2**n)
    return ((idx[:, None] >> np.arange(n)) & 1).astype(bool)


class TableGame:
    """Explicit game from a table of ``2**n`` values indexed by bitmask."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)
        n = int(round(math.log2(self.values.shape[0])))
        if 2**n != self.values.shape[0]:
            raise DimensionError("table length must be a power of two")
        self.n_players = n
        self._pow = 1 << np.arange(n)

    def __call__(self, masks: np.ndarray) -> np.ndarray:
        masks = np.atleast_2d(np.asarray(masks, dtype=bool))
        return self.values[masks.astype(np.int64) @ self._pow]

    @classmethod
    def from_function(cls, n: int, fn) -> "TableGame":
        return cls(np.array([fn(m) for m in all_masks(n)], dtype=np.float64))

    def to_json(self) -> str:
        return json.dumps({"n_players": self.n_players, "values": self.values.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "TableGame":
        data = json.loads(text)
        game = cls(data["values"])
        if game.n_players != data["n_players"]:
            raise DimensionError("n_players disagrees with table length")
        return game

    @classmethod
    def load(cls, path) -> "TableGame":
        return cls.from_json(Path(path).read_text())


def exact_shapley(v, n: int) -> np.ndarray:
    """Shapley values by enumerating all ``2**n`` coalitions.

    ``phi_i = sum_{S not containing i} |S|! (n-|S|-1)! / n! * (v(S+i) - v(S))``.
    Returns ``(n,)`` or ``(n, K)`` matching the value function's output.
    """
    if n > MAX_EXACT_PLAYERS:
        raise CapabilityError(f"exact Shapley enumeration is limited to {MAX_EXACT_PLAYERS} players, got {n}")
    if n < 1:
        raise ConfigError("need at least one player")
    masks = all_masks(n)
    values = np.asarray(v(masks), dtype=np.float64)
    sizes = masks.sum(1)
    weight = np.array([math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) if s < n else 0.0
                       for s in range(n + 1)])
    idx = np.arange(2**n)
    phi = []
    for i in range(n):
        without = idx[((idx >> i) & 1) == 0]
        w = weight[sizes[without]]
        diff = values[without | (1 << i)] - values[without]
        phi.append(np.tensordot(w, diff, axes=(0, 0)))
    return np.array(phi)


def kernel_shap(
    v,
    n: int,
    n_samples: int = 128,
    exhaustive: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """KernelSHAP: Shapley-kernel weighted least squares with the efficiency constraint.

    ``exhaustive`` uses every proper non-empty coalition with its kernel
    weight and recovers exact Shapley values. Otherwise ``n_samples``
    coalitions are drawn from the normalized kernel and weighted equally.
    """
    if n < 2:
        raise ConfigError("KernelSHAP needs at least 2 players")
    if exhaustive:
        masks = all_masks(n)
        sizes = masks.sum(1)
        masks = masks[(sizes > 0) & (sizes < n)]
        weights = kernel_weight(n, masks.sum(1)).astype(float)
    else:
        rng = rng or np.random.default_rng(0)
        masks = sample_subsets(n, rng, n_samples)
        weights = np.ones(n_samples)
    ends = np.zeros((2, n), dtype=bool)
    ends[1] = True
    values = np.asarray(v(np.vstack([ends, masks])), dtype=np.float64)
    v_empty, v_full, vs = values[0], values[1], values[2:]
    gap = v_full - v_empty
    Z = masks.astype(np.float64)
    # eliminate the last player through the constraint sum(phi) = gap
    A = Z[:, :-1] - Z[:, -1:]
    b = vs - v_empty - np.multiply.outer(Z[:, -1], gap)
    sw = np.sqrt(weights)
    Aw = A * sw[:, None]
    bw = b * (sw[:, None] if b.ndim == 2 else sw)
    if np.linalg.matrix_rank(Aw) < n - 1:
        raise NumericError(
            f"KernelSHAP system is singular with {len(np.unique(masks, axis=0))} distinct "
            f"coalitions for {n} players; increase n_samples"
        )
    head, *_ = np.linalg.lstsq(Aw, bw, rcond=None)
    last = gap - head.sum(axis=0)
    return np.concatenate([head, last[None] if np.ndim(last) else np.array([last])], axis=0)


# ----------------------------------------------------------------------------
# Efficient normalization and the FastSHAP regression loss


def efficient_normalize(phi: np.ndarray, v_full, v_empty) -> np.ndarray:
    """Shift each class column so attributions sum exactly to ``v_full - v_empty``.

    ``phi`` is ``(..., N, K)``, or ``(N,)`` with scalar values.
    """
    phi = np.asarray(phi, dtype=np.float64)
    gap = np.asarray(v_full, dtype=np.float64) - np.asarray(v_empty, dtype=np.float64)
    if phi.ndim == 1:
        return phi + (gap - phi.sum()) / phi.size
    n = phi.shape[-2]
    if gap.shape != phi.shape[:-2] + phi.shape[-1:]:
        raise DimensionError(f"value gap shape {gap.shape} incompatible with phi {phi.shape}")
    return phi + ((gap - phi.sum(axis=-2)) / n)[..., None, :]


def fastshap_loss(phi, v, y: int | None, subsets) -> tuple[float, np.ndarray]:
    """Mean over ``subsets`` of ``(v(S) - v(empty) - S . phi[:, y])**2`` and its gradient.

    ``phi`` is ``(N, K)`` (column ``y`` is scored) or ``(N,)``.
    """
    phi = np.asarray(phi, dtype=np.float64)
    masks = np.array([s.bits if isinstance(s, SubsetMask) else s for s in subsets], dtype=bool)
    if masks.ndim != 2 or masks.shape[0] == 0:
        raise ConfigError("fastshap_loss needs at least one subset")
    n = masks.shape[1]
    col = phi if phi.ndim == 1 else phi[:, y]
    vals = np.asarray(v(np.vstack([np.zeros((1, n), dtype=bool), masks])), dtype=np.float64)
    if vals.ndim == 2:
        vals = vals[:, y]
    resid = vals[1:] - vals[0] - masks.astype(float) @ col
    loss = float(np.mean(resid**2))
    g = -2.0 * (resid @ masks.astype(float)) / masks.shape[0]
    grad = np.zeros_like(phi)
    if phi.ndim == 1:
        grad[:] = g
    else:
        grad[:, y] = g
    return loss, grad


def fastshap_batch_loss(phi: np.ndarray, masks: np.ndarray, v_s: np.ndarray, v_empty: np.ndarray):
    """Batched FastSHAP loss averaged over samples, coalitions and classes.

    Averaging over every class equals the expectation over a uniformly drawn
    class. Shapes: ``phi`` (n, N, K), ``masks`` (n, M, N), ``v_s`` (n, M, K),
    ``v_empty`` (n, K). Returns (loss, d loss / d phi).
    """
    Z = masks.astype(np.float64)
    pred = np.einsum("bmn,bnk->bmk", Z, phi)
    resid = v_s - v_empty[:, None, :] - pred
    denom = resid.size
    loss = float((resid**2).sum() / denom)
    grad = -2.0 * np.einsum("bmn,bmk->bnk", Z, resid) / denom
    return loss, grad


# ----------------------------------------------------------------------------
# Masked surrogate (FastSHAP step 2)


@dataclass
class SurrogateConfig:
    hidden: tuple[int, ...] = (128, 128)
    epochs: int = 60
    masks_per_sample: int = 4
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    min_steps: int = 1500
    seed: int = 0


@dataclass
class SurrogateModel:
    """Network over (masked features, player mask) returning class probabilities."""

    net: DenseNetwork
    space: FeatureSpace
    n_classes: int
    trained: bool = False
    history: list[float] = field(default_factory=list)
    val_loss: float | None = None

    def _inputs(self, X: np.ndarray, masks: np.ndarray) -> np.ndarray:
        return np.concatenate([self.space.apply(X, masks), masks.astype(np.float64)], axis=-1)

    def predict(self, X: np.ndarray, masks: np.ndarray) -> np.ndarray:
        """``X`` (n, C) with ``masks`` (n, N) -> (n, K); (n, M, N) -> (n, M, K)."""
        if not self.trained:
            raise UsageError("surrogate has not been trained")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        masks = np.asarray(masks, dtype=bool)
        inp = self._inputs(X, masks)
        flat = inp.reshape(-1, inp.shape[-1])
        return softmax(self.net.forward(flat)).reshape(*inp.shape[:-1], self.n_classes)

    def endpoints(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(v_full, v_empty) for every row and class: two evaluations per sample."""
        X = np.atleast_2d(X)
        n, p = X.shape[0], self.space.n_players
        masks = np.zeros((n, 2, p), dtype=bool)
        masks[:, 0] = True
        out = self.predict(X, masks)
        return out[:, 0], out[:, 1]

    def value_function(self, x: np.ndarray, y: int | None = None) -> "SurrogateValueFunction":
        return SurrogateValueFunction(self, x, y)

    def to_dict(self) -> dict:
        return {
            "net": self.net.to_dict(),
            "space": self.space.to_dict(),
            "n_classes": self.n_classes,
            "trained": self.trained,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SurrogateModel":
        return cls(DenseNetwork.from_dict(d["net"]), FeatureSpace.from_dict(d["space"]), d["n_classes"], d["trained"])


class SurrogateValueFunction:
    """``v(S)`` = surrogate probability of class ``y`` (or all classes) given only ``S`` observed."""

    def __init__(self, surrogate: SurrogateModel, x: np.ndarray, y: int | None = None):
        self.surrogate = surrogate
        self.x = np.asarray(x, dtype=np.float64)
        self.y = y
        self.n_players = surrogate.space.n_players

    def __call__(self, masks: np.ndarray) -> np.ndarray:
        masks = np.atleast_2d(np.asarray(masks, dtype=bool))
        out = self.surrogate.predict(self.x[None, :], masks[None])[0]
        return out if self.y is None else out[:, self.y]


def train_surrogate(
    prior,
    X: np.ndarray,
    space: FeatureSpace,
    cfg: SurrogateConfig | None = None,
    X_val: np.ndarray | None = None,
    targets: np.ndarray | None = None,
) -> SurrogateModel:
    """Distill ``prior.predict_proba`` into a network that accepts masked inputs.

    Loss is soft cross-entropy between the surrogate on (masked x, mask) and
    the prior on the unmasked x. Masks have uniform cardinality on {0..N}.
    """
    cfg = cfg or SurrogateConfig()
    X = np.asarray(X, dtype=np.float64)
    P = np.asarray(prior.predict_proba(X) if targets is None else targets, dtype=np.float64)
    k = P.shape[1]
    n_players = space.n_players
    rng = np.random.default_rng([cfg.seed, 31])
    net = DenseNetwork.create([space.n_columns + n_players, *cfg.hidden, k], rng)
    surr = SurrogateModel(net, space, k, trained=True)
    opt = SGD(cfg.lr, cfg.momentum)
    rows_per_epoch = X.shape[0] * cfg.masks_per_sample
    steps_per_epoch = max(1, math.ceil(rows_per_epoch / cfg.batch_size))
    epochs = max(cfg.epochs, math.ceil(cfg.min_steps / steps_per_epoch))
    stable = net.copy()
    for epoch in range(epochs):
        idx = rng.permutation(np.repeat(np.arange(X.shape[0]), cfg.masks_per_sample))
        masks = sample_uniform_cardinality(n_players, rng, idx.size)
        Xe, Pe = X[idx], P[idx]
        total = 0.0
        for start in range(0, idx.size, cfg.batch_size):
            sl = slice(start, start + cfg.batch_size)
            inp = surr._inputs(Xe[sl], masks[sl])
            loss, grad = softmax_cross_entropy(net.forward(inp, keep=True), Pe[sl])
            if not np.isfinite(loss):
                raise DivergenceError(f"surrogate loss diverged in epoch {epoch}", checkpoint=stable)
            opt.step(net, net.backward(grad))
            total += loss * inp.shape[0]
        surr.history.append(total / idx.size)
        stable = net.copy()
    if X_val is not None and len(X_val):
        vrng = np.random.default_rng([cfg.seed, 97])
        Pv = np.asarray(prior.predict_proba(X_val))
        vm = sample_uniform_cardinality(n_players, vrng, X_val.shape[0])
        surr.val_loss = softmax_cross_entropy(net.forward(surr._inputs(X_val, vm)), Pv)[0]
    return surr

