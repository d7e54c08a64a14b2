"""Concatenation network: backbone features plus normalized attributions feed a linear head.

::

    x --> backbone (relu MLP) ---------------------------> h  --+
    x --> explainer (2-layer MLP) --> phi (N x K) --> phi_eff --+--> linear head --> logits

``phi_eff`` is the explainer output shifted so each class column sums to
``v_full - v_empty`` of the prior ensemble's surrogates. Training adds the
weighted FastSHAP regression loss of every prior to the cross-entropy.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DimensionError, DivergenceError
from .metrics import multiclass_auroc
from .nn import SGD, DenseNetwork, softmax, softmax_cross_entropy
from .shapley import FeatureSpace, SurrogateModel, efficient_normalize, fastshap_batch_loss, sample_subsets
from .trees import PriorEnsemble, PriorMember


@dataclass
class ModelConfig:
    backbone: tuple[int, ...] = (512, 512, 512)
    explainer_hidden: int = 128
    use_explainer: bool = True
    shap_weight: float = 1.0
    detach_explainer: bool = False
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs: int = 100
    patience: int = 16
    subsets_per_sample: int = 8
    seed: int = 0

    def validate(self) -> None:
        if not self.backbone or any(d < 1 for d in self.backbone):
            raise ConfigError(f"invalid backbone dims {self.backbone}")
        if self.explainer_hidden < 1 or self.batch_size < 1 or self.subsets_per_sample < 1:
            raise ConfigError("explainer_hidden, batch_size and subsets_per_sample must be >= 1")
        if not self.lr > 0 or self.epochs < 0 or self.patience < 0 or self.shap_weight < 0:
            raise ConfigError("lr must be > 0; epochs, patience and shap_weight must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "backbone" in d:
            d["backbone"] = tuple(d["backbone"])
        return cls(**d)


@dataclass
class JointLossReport:
    total: float
    ce: float
    fastshap: list[tuple[str, float]] = field(default_factory=list)
    weights: list[float] = field(default_factory=list)

    @property
    def shap(self) -> float:
        return float(sum(w * l for w, (_, l) in zip(self.weights, self.fastshap)))


class ShapNNModel:
    def __init__(
        self,
        backbone: DenseNetwork,
        explainer: DenseNetwork | None,
        head: DenseNetwork,
        space: FeatureSpace,
        n_classes: int,
        config: ModelConfig,
    ):
        self.backbone = backbone
        self.explainer = explainer
        self.head = head
        self.space = space
        self.n_classes = n_classes
        self.config = config
        self.calls: Counter = Counter()
        hidden = backbone.output_dim
        extra = self.n_players * n_classes if explainer is not None else 0
        if head.input_dim != hidden + extra:
            raise DimensionError(f"head expects {head.input_dim} inputs, wiring gives {hidden + extra}")
        if explainer is not None and explainer.output_dim != self.n_players * n_classes:
            raise DimensionError("explainer output must be n_players * n_classes")

    @property
    def n_players(self) -> int:
        return self.space.n_players

    @property
    def has_explainer(self) -> bool:
        return self.explainer is not None

    def networks(self) -> list[DenseNetwork]:
        return [n for n in (self.backbone, self.explainer, self.head) if n is not None]

    def copy(self) -> "ShapNNModel":
        return ShapNNModel(
            self.backbone.copy(),
            None if self.explainer is None else self.explainer.copy(),
            self.head.copy(),
            self.space,
            self.n_classes,
            self.config,
        )

    def load_state(self, other: "ShapNNModel") -> None:
        for dst, src in zip(self.networks(), other.networks()):
            for a, b in zip(dst.parameters(), src.parameters()):
                a[...] = b

    def checksum(self) -> str:
        return "".join(n.checksum()[:16] for n in self.networks())

    # -- forward ------------------------------------------------------------

    def _forward(self, X: np.ndarray, gap: np.ndarray | None, keep: bool = False):
        X = np.asarray(X, dtype=np.float64)
        n = X.shape[0]
        h = self.backbone.forward(X, keep=keep)
        self.calls["backbone"] += 1
        phi = phi_eff = None
        z = h
        if self.explainer is not None:
            if gap is None:
                raise ConfigError("an explainer model needs v_full - v_empty to normalize attributions")
            phi = self.explainer.forward(X, keep=keep).reshape(n, self.n_players, self.n_classes)
            self.calls["explainer"] += 1
            phi_eff = efficient_normalize(phi, gap, np.zeros_like(gap))
            z = np.concatenate([h, phi_eff.reshape(n, -1)], axis=1)
        logits = self.head.forward(z, keep=keep)
        self.calls["head"] += 1
        return logits, phi, phi_eff, h

    def predict_proba(self, X: np.ndarray, ensemble: PriorEnsemble | SurrogateModel | None = None) -> np.ndarray:
        X = np.atleast_2d(X)
        gap = None
        if self.explainer is not None:
            v_full, v_empty = ensemble_endpoints(_as_ensemble(ensemble), X)
            gap = v_full - v_empty
        return softmax(self._forward(X, gap)[0])


def build_shapnn(
    n_features: int,
    space: FeatureSpace,
    n_classes: int,
    config: ModelConfig | None = None,
) -> ShapNNModel:
    """Wire backbone, explainer and head; initialization is a function of ``config.seed``."""
    config = config or ModelConfig()
    config.validate()
    if n_classes < 2:
        raise ConfigError("need at least two classes")
    if n_features < 1 or space.n_players < 1:
        raise ConfigError("need at least one feature and one player")
    if space.n_columns != n_features:
        raise DimensionError(f"feature space has {space.n_columns} columns, model expects {n_features}")
    rng = np.random.default_rng([config.seed, 1])
    dims = [n_features, *config.backbone]
    backbone = DenseNetwork.create(dims, rng, output_activation="relu")
    explainer = None
    width = config.backbone[-1]
    if config.use_explainer:
        explainer = DenseNetwork.create(
            [n_features, config.explainer_hidden, space.n_players * n_classes], rng
        )
        width += space.n_players * n_classes
    head = DenseNetwork.create([width, n_classes], rng)
    return ShapNNModel(backbone, explainer, head, space, n_classes, config)


def _as_ensemble(prior) -> PriorEnsemble:
    if isinstance(prior, PriorEnsemble):
        return prior
    if isinstance(prior, SurrogateModel):
        return PriorEnsemble([PriorMember(None, prior, 1.0, "prior_0")])
    raise ConfigError("expected a PriorEnsemble or a trained SurrogateModel")


def ensemble_endpoints(ensemble: PriorEnsemble, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weighted ``v_full`` and ``v_empty`` over the members' surrogates."""
    v_full = v_empty = 0.0
    for m in ensemble.members:
        f, e = m.surrogate.endpoints(X)
        v_full = v_full + m.weight * f
        v_empty = v_empty + m.weight * e
    return v_full, v_empty


def forward_explain(model: ShapNNModel, x: np.ndarray, v_full, v_empty):
    """Prediction and efficient attributions in a single pass of each sub-network.

    Returns ``(probs (K,), phi_eff (N, K))`` for a vector ``x``, or batched
    arrays for a matrix.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None] if single else x
    v_full = np.atleast_2d(v_full)
    v_empty = np.atleast_2d(v_empty)
    if model.explainer is None:
        raise ConfigError("model was built without an explainer head")
    logits, _, phi_eff, _ = model._forward(X, v_full - v_empty)
    probs = softmax(logits)
    return (probs[0], phi_eff[0]) if single else (probs, phi_eff)


def _member_values(model: ShapNNModel, X: np.ndarray, ensemble: PriorEnsemble, masks: np.ndarray):
    n = X.shape[0]
    ends = np.zeros((n, 2, model.n_players), dtype=bool)
    ends[:, 0] = True
    all_masks = np.concatenate([ends, masks], axis=1)
    return [(masks, m.surrogate.predict(X, all_masks)) for m in ensemble.members]


def joint_backward(model: ShapNNModel, X: np.ndarray, targets: np.ndarray, ensemble: PriorEnsemble | None, member_values):
    """Loss report and per-network gradient tapes ``{"head", "backbone", "explainer"}``."""
    cfg = model.config
    n = X.shape[0]
    use_shap = ensemble is not None
    gaps = [v[:, 0] - v[:, 1] for _, v in member_values] if use_shap else []
    gap = sum(m.weight * g for m, g in zip(ensemble.members, gaps)) if use_shap else None

    logits, phi, _, h = model._forward(X, gap, keep=True)
    ce, g_logits = softmax_cross_entropy(logits, targets)
    head_tape = model.head.backward(g_logits, need_input_grad=True)
    width = h.shape[1]
    tapes = {"head": head_tape, "backbone": model.backbone.backward(head_tape.input_grad[:, :width])}

    parts, weights = [], []
    if use_shap:
        g_phi = np.zeros_like(phi)
        if not cfg.detach_explainer:
            g_phi += head_tape.input_grad[:, width:].reshape(phi.shape)
        for m, (masks, v), g in zip(ensemble.members, member_values, gaps):
            phi_k = efficient_normalize(phi, g, np.zeros_like(g))
            loss_k, grad_k = fastshap_batch_loss(phi_k, masks, v[:, 2:], v[:, 1])
            parts.append((m.name, loss_k))
            weights.append(cfg.shap_weight * m.weight)
            g_phi += cfg.shap_weight * m.weight * grad_k
        # normalization subtracts the player-mean, so its Jacobian centres the gradient
        g_phi -= g_phi.mean(axis=1, keepdims=True)
        tapes["explainer"] = model.explainer.backward(g_phi.reshape(n, -1))
    total = ce + float(sum(w * l for w, (_, l) in zip(weights, parts)))
    return JointLossReport(total, ce, parts, weights), tapes


def train_step(
    model: ShapNNModel,
    X: np.ndarray,
    targets: np.ndarray,
    prior: PriorEnsemble | SurrogateModel | None,
    rng: np.random.Generator,
    optimizer: SGD,
    member_values: list[tuple[np.ndarray, np.ndarray]] | None = None,
) -> JointLossReport:
    """One SGD step on ``shap_weight * sum_k w_k L_k + CE``.

    ``targets`` are class probabilities (one-hot or soft). ``member_values``
    optionally supplies precomputed ``(masks, values)`` per member, where
    values has shape (n, M + 2, K) ordered full, empty, coalitions.
    """
    X = np.asarray(X, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise DataError("empty batch")
    ensemble = _as_ensemble(prior) if model.explainer is not None else None
    if ensemble is not None and member_values is None:
        masks = sample_subsets(model.n_players, rng, (n, model.config.subsets_per_sample))
        member_values = _member_values(model, X, ensemble, masks)
    report, tapes = joint_backward(model, X, targets, ensemble, member_values)
    if not np.isfinite(report.total):
        raise DivergenceError("joint loss is not finite", report=report)
    for name, tape in tapes.items():
        optimizer.step(getattr(model, name), tape)
    return report


def joint_loss(model: ShapNNModel, X, targets, prior, masks) -> float:
    """Joint loss for fixed coalitions, computed without touching any gradient path."""
    X = np.asarray(X, dtype=np.float64)
    gap = None
    vals = []
    ensemble = _as_ensemble(prior) if model.explainer is not None else None
    if ensemble is not None:
        vals = [v for _, v in _member_values(model, X, ensemble, masks)]
        gap = sum(m.weight * (v[:, 0] - v[:, 1]) for m, v in zip(ensemble.members, vals))
    logits, phi, _, _ = model._forward(X, gap)
    total, _ = softmax_cross_entropy(logits, targets)
    if ensemble is not None:
        for m, v in zip(ensemble.members, vals):
            phi_k = efficient_normalize(phi, v[:, 0] - v[:, 1], np.zeros_like(v[:, 0]))
            loss_k, _ = fastshap_batch_loss(phi_k, masks, v[:, 2:], v[:, 1])
            total += model.config.shap_weight * m.weight * loss_k
    return float(total)


def joint_gradient_check(model: ShapNNModel, X, targets, prior, masks, eps: float = 1e-6, atol: float = 1e-7) -> float:
    """Max relative error between ``joint_backward`` and central differences of ``joint_loss``.

    Probes every parameter of all three sub-networks; meant for tiny models.
    """
    X = np.asarray(X, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    ensemble = _as_ensemble(prior) if model.explainer is not None else None
    vals = _member_values(model, X, ensemble, masks) if ensemble is not None else None
    _, tapes = joint_backward(model, X, targets, ensemble, vals)
    worst = 0.0
    for name, tape in tapes.items():
        net = getattr(model, name)
        analytic = [g for pair in zip(tape.weights, tape.biases) for g in pair]
        for param, ana in zip(net.parameters(), analytic):
            flat, ana_flat = param.reshape(-1), ana.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                up = joint_loss(model, X, targets, prior, masks)
                flat[j] = orig - eps
                down = joint_loss(model, X, targets, prior, masks)
                flat[j] = orig
                num = (up - down) / (2 * eps)
                worst = max(worst, abs(num - ana_flat[j]) / max(abs(num), abs(ana_flat[j]), atol))
    return worst


def evaluate_auroc(model: ShapNNModel, X, y, prior=None) -> float:
    return multiclass_auroc(model.predict_proba(X, prior), y)[0]


def fit(
    model: ShapNNModel,
    train,
    val,
    prior: PriorEnsemble | SurrogateModel | None,
    epochs: int | None = None,
    patience: int | None = None,
    rng: np.random.Generator | None = None,
    targets: np.ndarray | None = None,
) -> tuple[ShapNNModel, list[dict]]:
    """Mini-batch training with early stopping on validation AUROC (ties broken by log-loss).

    Stops once ``patience`` epochs pass without improvement (``patience=0``
    runs exactly one epoch) and restores the best checkpoint.
    """
    cfg = model.config
    epochs = cfg.epochs if epochs is None else epochs
    patience = cfg.patience if patience is None else patience
    if train.n_samples == 0 or val.n_samples == 0:
        raise DataError("training and validation splits must be non-empty")
    rng = rng or np.random.default_rng([cfg.seed, 2])
    opt = SGD(cfg.lr, cfg.momentum, cfg.weight_decay)
    Y = train.one_hot() if targets is None else targets
    ensemble = _as_ensemble(prior) if model.explainer is not None else None
    best_score, best_state, since = (-np.inf, -np.inf), model.copy(), 0
    history = []
    for epoch in range(epochs):
        order = rng.permutation(train.n_samples)
        sums = Counter()
        for start in range(0, order.size, cfg.batch_size):
            b = order[start : start + cfg.batch_size]
            rep = train_step(model, train.X[b], Y[b], ensemble, rng, opt)
            sums["ce"] += rep.ce * len(b)
            sums["shap"] += rep.shap * len(b)
            sums["total"] += rep.total * len(b)
        probs = model.predict_proba(val.X, ensemble)
        score = multiclass_auroc(probs, val.y)[0]
        val_loss = float(-np.log(np.clip(probs[np.arange(val.n_samples), val.y], 1e-300, None)).mean())
        row = {k: v / train.n_samples for k, v in sums.items()}
        row.update(epoch=epoch, val_auroc=score, val_loss=val_loss)
        history.append(row)
        # AUROC saturates on small validation sets; log-loss breaks the tie
        if (score, -val_loss) > best_score:
            best_score, since = (score, -val_loss), 0
            best_state = model.copy()
        else:
            since += 1
        if since >= patience:
            break
    model.load_state(best_state)
    return model, history


# -- explanations -------------------------------------------------------------


@dataclass
class Attribution:
    player: int
    name: str
    class_index: int
    phi: float
    polarity: int


def _explain_batch(model: ShapNNModel, X, prior):
    v_full, v_empty = ensemble_endpoints(_as_ensemble(prior), np.atleast_2d(X))
    return forward_explain(model, np.atleast_2d(X), v_full, v_empty)


def rank_attributions(phi_eff: np.ndarray, cls: int, names: list[str]) -> list[Attribution]:
    col = phi_eff[:, cls]
    order = np.argsort(-np.abs(col), kind="stable")
    return [Attribution(int(i), names[i], int(cls), float(col[i]), int(np.sign(col[i]))) for i in order]


def explain_sample(model: ShapNNModel, x: np.ndarray, prior) -> list[Attribution]:
    """Players ranked by |phi| for the predicted class; ties keep player order."""
    probs, phi = _explain_batch(model, x, prior)
    cls = int(np.argmax(probs[0]))
    return rank_attributions(phi[0], cls, model.space.player_names)


def feature_values(ds, i: int, player: int):
    if ds.raw is not None:
        return ds.raw[i][player]
    cols = ds.groups[player]
    return float(ds.X[i, cols[0]]) if cols.size == 1 else int(np.argmax(ds.X[i, cols]))


def explain_population(model: ShapNNModel, ds, prior, batch_size: int = 1024) -> dict:
    """Mean |phi| per player (predicted-class column) and plot-ready (value, phi) pairs."""
    if ds.n_samples == 0:
        raise DataError("cannot explain an empty dataset")
    names = model.space.player_names
    phis, preds = [], []
    for start in range(0, ds.n_samples, batch_size):
        probs, phi = _explain_batch(model, ds.X[start : start + batch_size], prior)
        phis.append(phi)
        preds.append(probs.argmax(1))
    phi = np.concatenate(phis)
    pred = np.concatenate(preds)
    chosen = phi[np.arange(ds.n_samples), :, pred]  # (n, N)
    mean_abs = np.abs(chosen).mean(axis=0)
    pairs = [
        {"sample_id": i, "player": names[p], "class": int(pred[i]),
         "feature_value": feature_values(ds, i, p), "phi": float(chosen[i, p])}
        for i in range(ds.n_samples) for p in range(len(names))
    ]
    summary = [
        {"player": names[p], "mean_abs_phi": float(mean_abs[p])}
        for p in np.argsort(-mean_abs, kind="stable")
    ]
    return {"summary": summary, "mean_abs_phi": mean_abs, "pairs": pairs, "phi": phi, "predicted": pred}


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(model: ShapNNModel, path: str | Path, ensemble: PriorEnsemble | None = None) -> Path:
    """Directory with the three networks, config, feature space and ensemble descriptor."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": "shapnn-checkpoint",
        "version": 1,
        "config": asdict(model.config),
        "n_classes": model.n_classes,
        "space": model.space.to_dict(),
        "has_explainer": model.has_explainer,
    }
    model.backbone.save(out / "backbone.json")
    model.head.save(out / "head.json")
    if model.explainer is not None:
        model.explainer.save(out / "explainer.json")
    if ensemble is not None:
        meta["ensemble"] = []
        for k, m in enumerate(ensemble.members):
            fname = f"surrogate_{k}.json"
            (out / fname).write_text(json.dumps(m.surrogate.to_dict()))
            entry = {"name": m.name, "weight": m.weight, "surrogate": fname}
            if hasattr(m.prior, "to_dict"):
                pname = f"prior_{k}.json"
                (out / pname).write_text(json.dumps(m.prior.to_dict()))
                entry["prior"] = pname
            meta["ensemble"].append(entry)
    (out / "model.json").write_text(json.dumps(meta, indent=2))
    return out


def load_checkpoint(path: str | Path) -> tuple[ShapNNModel, PriorEnsemble | None]:
    from .trees import GBDTModel

    src = Path(path)
    if not (src / "model.json").exists():
        raise DataError(f"no checkpoint at {src}")
    meta = json.loads((src / "model.json").read_text())
    cfg = ModelConfig.from_dict(meta["config"])
    explainer = DenseNetwork.load(src / "explainer.json") if meta["has_explainer"] else None
    model = ShapNNModel(
        DenseNetwork.load(src / "backbone.json"),
        explainer,
        DenseNetwork.load(src / "head.json"),
        FeatureSpace.from_dict(meta["space"]),
        meta["n_classes"],
        cfg,
    )
    ensemble = None
    if meta.get("ensemble"):
        members = []
        for e in meta["ensemble"]:
            surr = SurrogateModel.from_dict(json.loads((src / e["surrogate"]).read_text()))
            prior = GBDTModel.load(src / e["prior"]) if "prior" in e else None
            members.append(PriorMember(prior, surr, e["weight"], e["name"]))
        ensemble = PriorEnsemble(members)
    return model, ensemble
