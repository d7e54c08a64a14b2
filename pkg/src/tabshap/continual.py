"""Continual training over a drifting stream.

At step ``t`` the harness sees only batch ``t``. It first scores the batch
with the model from step ``t-1`` (forward test), then trains on it with

* pseudo-labels mixing the true labels with the mean prediction of frozen
  predictors retained from earlier steps, and
* FastSHAP losses against the value functions (masked surrogates of
  per-step GBDT priors) of recent steps, weighted by a geometric discount.

The baseline is the same loop with no explainer, no priors and ``alpha=1``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .metrics import multiclass_auroc
from .model import ModelConfig, ShapNNModel, build_shapnn, save_checkpoint, train_step
from .nn import SGD
from .shapley import FeatureSpace, SurrogateConfig, train_surrogate
from .streams import ConceptStream, StreamBatch
from .trees import GBDTConfig, PriorEnsemble, PriorMember, train_gbdt


def mixup_pseudo_label(y_true: np.ndarray, past_preds: list[np.ndarray], alpha: float) -> np.ndarray:
    """``alpha * y + (1 - alpha) * mean(past_preds)``; just ``y`` without history."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    y_true = np.asarray(y_true, dtype=np.float64)
    if not past_preds:
        return y_true.copy()
    past = np.mean(np.asarray(past_preds, dtype=np.float64), axis=0)
    return alpha * y_true + (1.0 - alpha) * past


def discount_schedule(t: int, rho: float = 0.5) -> np.ndarray:
    """Weights for steps 1..t-1, proportional to ``rho**(t-1-i)`` and summing to 1."""
    if t < 2:
        raise ConfigError("discount schedule needs t >= 2")
    if not 0.0 < rho <= 1.0:
        raise ConfigError(f"rho must be in (0, 1], got {rho}")
    i = np.arange(1, t)
    w = rho ** (t - 1 - i).astype(float)
    w = w / w.sum()
    w[-1] = 1.0 - w[:-1].sum()
    return w


@dataclass
class ContinualConfig:
    use_shapley: bool = True
    alpha: float = 0.5
    rho: float = 0.5
    history_cap: int = 10
    epochs: int = 5
    model: ModelConfig = field(default_factory=lambda: ModelConfig(lr=0.01, batch_size=32))
    prior: GBDTConfig = field(default_factory=lambda: GBDTConfig(n_trees=30, max_depth=3, min_leaf=5))
    surrogate: SurrogateConfig = field(
        default_factory=lambda: SurrogateConfig(hidden=(64, 64), epochs=20, min_steps=400, batch_size=64)
    )
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.alpha <= 1.0 or not 0.0 < self.rho <= 1.0:
            raise ConfigError("alpha must be in [0, 1] and rho in (0, 1]")
        if self.history_cap < 1 or self.epochs < 0:
            raise ConfigError("history_cap must be >= 1 and epochs >= 0")
        self.model.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ContinualConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d.get("model", {}))
        d["prior"] = GBDTConfig(**d.get("prior", {}))
        sc = dict(d.get("surrogate", {}))
        if "hidden" in sc:
            sc["hidden"] = tuple(sc["hidden"])
        d["surrogate"] = SurrogateConfig(**sc)
        return cls(**d)


@dataclass(frozen=True)
class RetainedStep:
    """Frozen artifacts of one past step."""

    t: int
    predictor: ShapNNModel
    normalizer: PriorEnsemble | None
    member: PriorMember | None
    checksum: str

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.predictor.predict_proba(X, self.normalizer)


@dataclass
class StepMetrics:
    t: int
    concept_id: int
    forward_auroc: float | None
    retrospective_auroc: float | None
    ce: float
    shap: float
    lambdas: list[float] = field(default_factory=list)


@dataclass
class ContinualState:
    model: ShapNNModel
    config: ContinualConfig
    space: FeatureSpace
    mean: np.ndarray
    std: np.ndarray
    n_classes: int = 2
    retained: list[RetainedStep] = field(default_factory=list)
    lambdas: np.ndarray = field(default_factory=lambda: np.zeros(0))
    normalizer: PriorEnsemble | None = None
    t: int = 0
    optimizer: SGD | None = None
    rng: np.random.Generator | None = None

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std

    def predict(self, X_raw: np.ndarray) -> np.ndarray:
        return self.model.predict_proba(self.transform(X_raw), self.normalizer)


def init_state(
    config: ContinualConfig,
    space: FeatureSpace,
    mean: np.ndarray,
    std: np.ndarray,
    n_classes: int = 2,
) -> ContinualState:
    config.validate()
    mcfg = ModelConfig.from_dict({**asdict(config.model), "use_explainer": config.use_shapley,
                                  "seed": config.seed})
    model = build_shapnn(space.n_columns, space, n_classes, mcfg)
    return ContinualState(
        model, config, space, np.asarray(mean, float), np.asarray(std, float), n_classes,
        optimizer=SGD(mcfg.lr, mcfg.momentum, mcfg.weight_decay),
        rng=np.random.default_rng([config.seed, 3]),
    )


def init_state_for_stream(kind: str, config: ContinualConfig, stream_seed: int = 0) -> ContinualState:
    gen = ConceptStream(kind, stream_seed)
    mean, std = gen.standardization()
    space = FeatureSpace(gen.player_groups, (gen.background() - mean) / std, gen.player_names)
    return init_state(config, space, mean, std)


def _safe_auroc(probs: np.ndarray, y: np.ndarray) -> float | None:
    if np.unique(y).size < 2:
        return None
    return multiclass_auroc(probs, y)[0]


def continual_step(state: ContinualState, batch: StreamBatch, epochs: int | None = None) -> tuple[ContinualState, StepMetrics]:
    """Forward-test on ``batch``, then train on it alone and retain frozen artifacts."""
    cfg = state.config
    epochs = cfg.epochs if epochs is None else epochs
    if batch.X.shape[0] == 0:
        raise DataError("empty stream batch")
    X = state.transform(batch.X)
    y = np.asarray(batch.y, dtype=int)
    Y = np.eye(state.n_classes)[y]

    forward = None
    if state.t > 0:
        forward = _safe_auroc(state.model.predict_proba(X, state.normalizer), y)

    targets = Y
    ensemble = None
    if cfg.use_shapley:
        past = [r.predict(X) for r in state.retained]
        targets = mixup_pseudo_label(Y, past, cfg.alpha)
        prior = train_gbdt(X, y, state.n_classes, cfg.prior)
        surr_cfg = SurrogateConfig(**{**asdict(cfg.surrogate), "seed": cfg.seed * 100_003 + state.t})
        surrogate = train_surrogate(prior, X, state.space, surr_cfg)
        current = PriorMember(prior, surrogate, 1.0, f"step_{state.t}")
        members = [r.member for r in state.retained] + [current]
        lambdas = discount_schedule(len(members) + 1, cfg.rho)
        ensemble = PriorEnsemble(
            [PriorMember(m.prior, m.surrogate, float(w), m.name) for m, w in zip(members, lambdas)]
        )
        state.lambdas = lambdas
    else:
        current = None

    ce_sum = shap_sum = 0.0
    bs = state.model.config.batch_size
    n = X.shape[0]
    for _ in range(epochs):
        order = state.rng.permutation(n)
        for start in range(0, n, bs):
            b = order[start : start + bs]
            rep = train_step(state.model, X[b], targets[b], ensemble, state.rng, state.optimizer)
            ce_sum += rep.ce * len(b)
            shap_sum += rep.shap * len(b)
    scale = max(1, epochs * n)
    state.normalizer = ensemble

    frozen = state.model.copy()
    state.retained.append(RetainedStep(state.t, frozen, ensemble, current, frozen.checksum()))
    if len(state.retained) > cfg.history_cap:
        state.retained = state.retained[-cfg.history_cap :]
    state.t += 1
    metrics = StepMetrics(batch.t, batch.concept_id, forward, None, ce_sum / scale, shap_sum / scale,
                          [float(v) for v in state.lambdas])
    return state, metrics


def retrospective_eval(state: ContinualState, history: list[StreamBatch]) -> float:
    """Mean AUROC of the current model over every earlier batch (single-class batches skipped)."""
    if state.t < 2:
        raise ConfigError("retrospective evaluation needs at least two trained steps")
    past = [b for b in history if b.t < state.t]
    scores = [s for s in (_safe_auroc(state.predict(b.X), b.y) for b in past) if s is not None]
    if not scores:
        raise DataError("no past batch has both classes")
    return float(np.mean(scores))


@dataclass
class StreamRun:
    name: str
    steps: list[StepMetrics]
    retrospective: dict[int, float]
    state: ContinualState | None = None

    @property
    def forward_series(self) -> np.ndarray:
        return np.array([s.forward_auroc for s in self.steps[1:]], dtype=float)

    def summary(self) -> dict:
        f = self.forward_series
        f = f[np.isfinite(f)]
        return {
            "forward_mean": float(f.mean()),
            "forward_std": float(f.std()),
            "retrospective": {str(k): v for k, v in self.retrospective.items()},
        }


def run_stream(
    batches: list[StreamBatch],
    kind: str,
    config: ContinualConfig,
    stream_seed: int = 0,
    checkpoints: tuple[int, ...] = (10, 50),
    every_step: bool = False,
    name: str = "shapnn",
) -> StreamRun:
    """Sequentially train over ``batches``; retrospective AUROC at ``checkpoints`` (or every step)."""
    state = init_state_for_stream(kind, config, stream_seed)
    steps, retro = [], {}
    for b in batches:
        state, m = continual_step(state, b)
        if state.t >= 2 and (every_step or state.t in checkpoints):
            m.retrospective_auroc = retrospective_eval(state, batches)
            if state.t in checkpoints:
                retro[state.t] = m.retrospective_auroc
        steps.append(m)
    return StreamRun(name, steps, retro, state)


def online_adaptation_eval(
    batches: list[StreamBatch],
    kind: str,
    config: ContinualConfig,
    stream_seed: int = 0,
    checkpoints: tuple[int, ...] = (10, 50),
    every_step: bool = False,
) -> dict[str, StreamRun]:
    """Run the regularized model and the vanilla fine-tuned baseline on the same stream."""
    if len(batches) < 2:
        raise ConfigError("online adaptation needs at least two batches")
    base_cfg = ContinualConfig.from_dict({**config.to_dict(), "use_shapley": False, "alpha": 1.0})
    return {
        "shapnn": run_stream(batches, kind, config, stream_seed, checkpoints, every_step, "shapnn"),
        "mlp": run_stream(batches, kind, base_cfg, stream_seed, checkpoints, every_step, "mlp"),
    }


def write_stream_outputs(
    runs: dict[str, StreamRun], out_dir: str | Path, manifest: dict, checkpoints: bool = False
) -> Path:
    """Per-step CSV and manifest; ``checkpoints`` also saves every retained step's frozen model."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "stream_metrics.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "t", "concept_id", "forward_auroc", "retrospective_auroc", "ce", "shap"])
        for name, run in runs.items():
            for s in run.steps:
                w.writerow([name, s.t, s.concept_id,
                            "" if s.forward_auroc is None else repr(s.forward_auroc),
                            "" if s.retrospective_auroc is None else repr(s.retrospective_auroc),
                            repr(s.ce), repr(s.shap)])
    for name, run in runs.items():
        if not checkpoints or run.state is None:
            continue
        for r in run.state.retained:
            save_checkpoint(r.predictor, out / "checkpoints" / name / f"step_{r.t}", r.normalizer)
    full = dict(manifest)
    full["summary"] = {name: run.summary() for name, run in runs.items()}
    (out / "manifest.json").write_text(json.dumps(full, indent=2, default=str))
    return out
