"""Run configuration and experiment pipelines behind the command line.

Every pipeline is a plain function of a :class:`RunConfig` and returns
plain dictionaries; writing files is left to the ``write_*`` helpers so the
acceptance tests can call the pipelines directly.
"""

from __future__ import annotations

import csv
import json
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .continual import ContinualConfig, online_adaptation_eval, write_stream_outputs
from .data import EncodedDataset, encoding_to_dict, inject_noise_features, load_csv, split, stratified_subsample
from .errors import ConfigError
from .metrics import MetricReport
from .model import (
    ModelConfig,
    ShapNNModel,
    build_shapnn,
    ensemble_endpoints,
    explain_population,
    fit,
    forward_explain,
    save_checkpoint,
)
from .shapley import FeatureSpace, SurrogateConfig, kernel_shap, train_surrogate
from .streams import KINDS, stream_generate
from .trees import GBDTConfig, PriorEnsemble, make_ensemble, train_baselines, train_gbdt


@dataclass
class DatasetSpec:
    path: str = "data/iris.csv"
    label: str = "species"
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    subsample: int | None = None
    noise_fraction: float = 0.0


@dataclass
class PriorSpec:
    gbdt: list[GBDTConfig] = field(default_factory=lambda: [GBDTConfig()])
    weights: list[float] | None = None
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)


@dataclass
class StreamSpec:
    kind: str = "STA"
    steps: int = 50
    batch_size: int = 200
    # concepts hold for several batches so the forward test is not pure guessing
    drift_period: int = 5
    label_noise: float = 0.0
    checkpoints: tuple[int, ...] = (10, 50)


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    priors: PriorSpec = field(default_factory=PriorSpec)
    stream: StreamSpec = field(default_factory=StreamSpec)
    continual: ContinualConfig = field(default_factory=ContinualConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        fr = self.dataset.fractions
        if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"dataset.fractions must be three non-negative numbers summing to 1, got {fr}")
        if self.dataset.noise_fraction < 0:
            raise ConfigError("dataset.noise_fraction must be >= 0")
        if self.dataset.subsample is not None and self.dataset.subsample < 2:
            raise ConfigError("dataset.subsample must be >= 2")
        if not self.priors.gbdt:
            raise ConfigError("at least one GBDT prior is required")
        for g in self.priors.gbdt:
            g.validate()
        if self.priors.weights is not None and len(self.priors.weights) != len(self.priors.gbdt):
            raise ConfigError("priors.weights must match priors.gbdt in length")
        if self.stream.kind not in KINDS:
            raise ConfigError(f"stream.kind must be one of {KINDS}, got {self.stream.kind!r}")
        if min(self.stream.steps, self.stream.batch_size, self.stream.drift_period) < 1:
            raise ConfigError("stream steps, batch_size and drift_period must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        self.model.validate()
        self.continual.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    def with_overrides(self, overrides: dict[str, object]) -> "RunConfig":
        """Apply dotted-key overrides such as ``{"model.lr": 0.02}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            node = d
            *parents, leaf = key.split(".")
            for p in parents:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = value
        return RunConfig.from_dict(d)


def _build(cls, d):
    """Recursively construct nested config dataclasses from plain dicts."""
    if not isinstance(d, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(d).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in d.items():
        current = getattr(defaults, name)
        if is_dataclass(current) and isinstance(value, dict):
            value = _build(type(current), value)
        elif name == "gbdt":
            value = [_build(GBDTConfig, g) if isinstance(g, dict) else g for g in value]
        elif isinstance(current, tuple) and value is not None:
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def manifest(cfg: RunConfig, command: str, **extra) -> dict:
    return {
        "command": command,
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": cfg.to_dict(),
        **extra,
    }


# ----------------------------------------------------------------------------
# Static-table pipeline


def load_dataset(spec: DatasetSpec, seed: int) -> EncodedDataset:
    ds = load_csv(spec.path, spec.label)
    if spec.subsample is not None:
        ds = stratified_subsample(ds, spec.subsample, seed)
    if spec.noise_fraction > 0:
        ds = inject_noise_features(ds, spec.noise_fraction, seed)
    return ds


def train_priors(train: EncodedDataset, spec: PriorSpec, seed: int, val: EncodedDataset | None = None) -> PriorEnsemble:
    """One GBDT per config, each distilled into its own masked surrogate."""
    space = FeatureSpace.from_dataset(train)
    pairs, names = [], []
    for k, gcfg in enumerate(spec.gbdt):
        prior = train_gbdt(train.X, train.y, train.n_classes, gcfg)
        scfg = replace(spec.surrogate, seed=seed * 1000 + k)
        surr = train_surrogate(prior, train.X, space, scfg, None if val is None else val.X)
        pairs.append((prior, surr))
        names.append(f"gbdt_{k}")
    return make_ensemble(pairs, spec.weights, names)


def train_network(
    cfg: RunConfig,
    train: EncodedDataset,
    val: EncodedDataset,
    ensemble: PriorEnsemble | None,
    seed: int,
    use_explainer: bool,
) -> tuple[ShapNNModel, list[dict]]:
    mcfg = replace(cfg.model, use_explainer=use_explainer, seed=seed)
    model = build_shapnn(train.X.shape[1], FeatureSpace.from_dataset(train), train.n_classes, mcfg)
    return fit(model, train, val, ensemble if use_explainer else None, rng=np.random.default_rng([seed, 2]))


@dataclass
class SeedResult:
    seed: int
    reports: dict[str, MetricReport]
    shapnn: ShapNNModel
    mlp: ShapNNModel
    ensemble: PriorEnsemble
    test: EncodedDataset
    histories: dict[str, list[dict]]


def run_table(cfg: RunConfig, seed: int, baselines: bool = True) -> SeedResult:
    """Train priors, a vanilla MLP and SHAPNN(MLP) on one seeded split; report test metrics."""
    ds = load_dataset(cfg.dataset, seed)
    train, val, test = split(ds, cfg.dataset.fractions, seed)
    ensemble = train_priors(train, cfg.priors, seed, val)
    reports = {}
    for m in ensemble.members:
        reports[m.name] = MetricReport.from_predictions(m.prior.predict_proba(test.X), test.y, seed)
    if baselines:
        for name, model in train_baselines(train.X, train.y, train.n_classes, seed).items():
            reports[name] = MetricReport.from_predictions(model.predict_proba(test.X), test.y, seed)
    mlp, h_mlp = train_network(cfg, train, val, None, seed, use_explainer=False)
    shapnn, h_shap = train_network(cfg, train, val, ensemble, seed, use_explainer=True)
    reports["mlp"] = MetricReport.from_predictions(mlp.predict_proba(test.X), test.y, seed)
    reports["shapnn"] = MetricReport.from_predictions(shapnn.predict_proba(test.X, ensemble), test.y, seed)
    return SeedResult(seed, reports, shapnn, mlp, ensemble, test, {"mlp": h_mlp, "shapnn": h_shap})


def median_auroc(results: list[SeedResult]) -> dict[str, float]:
    names = results[0].reports.keys()
    return {n: statistics.median(r.reports[n].auroc for r in results) for n in names}


def write_metrics_csv(results: list[SeedResult], path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "model", "auroc", "accuracy", "n_samples"])
        for r in results:
            for name, rep in r.reports.items():
                w.writerow([r.seed, name, repr(rep.auroc), repr(rep.accuracy), rep.n_samples])


ATTRIBUTION_COLUMNS = ["sample_id", "player_name", "class", "phi"]


def write_attributions_csv(phi: np.ndarray, names: list[str], path: Path, sample_ids=None) -> None:
    """``phi`` has shape (n, N, K); one row per sample, player and class."""
    ids = range(phi.shape[0]) if sample_ids is None else sample_ids
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ATTRIBUTION_COLUMNS)
        for sid, sample in zip(ids, phi):
            for p, name in enumerate(names):
                for k in range(sample.shape[1]):
                    w.writerow([sid, name, k, repr(float(sample[p, k]))])


def cmd_train(cfg: RunConfig, compare: bool = False) -> dict:
    """Table pipeline over ``cfg.seeds``; writes metrics, attributions, checkpoints and a manifest."""
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = [run_table(cfg, s) for s in cfg.seeds]
    write_metrics_csv(results, out / "metrics.csv")
    last = results[-1]
    pop = explain_population(last.shapnn, last.test, last.ensemble)
    write_attributions_csv(pop["phi"], last.shapnn.space.player_names, out / "attributions.csv")
    for r in results:
        ck = save_checkpoint(r.shapnn, out / "checkpoints" / f"seed_{r.seed}", r.ensemble)
        (ck / "encoding.json").write_text(json.dumps(encoding_to_dict(r.test)))
    medians = median_auroc(results)
    meta = manifest(cfg, "train", median_auroc=medians,
                    histories={r.seed: r.histories for r in results})
    (out / "manifest.json").write_text(json.dumps(meta, indent=2, default=str))
    summary = {"median_auroc": medians, "output_dir": str(out)}
    if compare:
        summary["comparison"] = {"shapnn": medians["shapnn"], "mlp": medians["mlp"],
                                 "delta": medians["shapnn"] - medians["mlp"]}
    return summary


# ----------------------------------------------------------------------------
# Noise study


def noise_study(cfg: RunConfig, fractions=(0.0, 0.5, 1.0)) -> list[dict]:
    """Accuracy of GBDT / MLP / SHAPNN and attribution mass on real vs synthetic players."""
    if any(f < 0 for f in fractions):
        raise ConfigError("noise fractions must be >= 0")
    rows = []
    for frac in fractions:
        for seed in cfg.seeds:
            c = replace(cfg, dataset=replace(cfg.dataset, noise_fraction=frac))
            res = run_table(c, seed, baselines=False)
            synth = res.test.synthetic_players
            pop = explain_population(res.shapnn, res.test, res.ensemble)
            mass = pop["mean_abs_phi"]
            row = {"fraction": frac, "seed": seed}
            for name in ("gbdt_0", "mlp", "shapnn"):
                row[f"{name}_accuracy"] = res.reports[name].accuracy
                row[f"{name}_auroc"] = res.reports[name].auroc
            row["real_mean_abs_phi"] = float(mass[~synth].mean())
            row["synthetic_mean_abs_phi"] = float(mass[synth].mean()) if synth.any() else float("nan")
            rows.append(row)
    return rows


def noise_drops(rows: list[dict], model: str, high: float = 1.0) -> float:
    """Mean accuracy at fraction 0 minus mean accuracy at ``high``."""
    def acc(f):
        return float(np.mean([r[f"{model}_accuracy"] for r in rows if r["fraction"] == f]))
    return acc(0.0) - acc(high)


def write_rows_csv(rows: list[dict], path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def cmd_noise_study(cfg: RunConfig, fractions=(0.0, 0.5, 1.0)) -> list[dict]:
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = noise_study(cfg, fractions)
    write_rows_csv(rows, out / "metrics.csv")
    meta = manifest(cfg, "noise-study", fractions=list(fractions))
    (out / "manifest.json").write_text(json.dumps(meta, indent=2, default=str))
    return rows


# ----------------------------------------------------------------------------
# Speed comparison


def synthetic_dataset(n_samples: int = 1000, n_features: int = 50, seed: int = 0) -> EncodedDataset:
    """Standard-normal features with a sparse linear-plus-interaction binary label."""
    from .data import ColumnSchema, ColumnSpec

    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n_samples, n_features))
    w = np.zeros(n_features)
    w[:10] = rng.normal(size=10)
    score = X @ w + X[:, 0] * X[:, 1]
    y = (score > np.median(score)).astype(int)
    schema = ColumnSchema([ColumnSpec(f"x{j}", "numeric") for j in range(n_features)])
    return EncodedDataset(X, y, schema, ["0", "1"], np.zeros(n_features), np.ones(n_features))


def speed_bench(
    cfg: RunConfig,
    n_samples: int = 100,
    n_subsets: int = 128,
    n_features: int = 50,
    warmup: int = 10,
    seed: int = 0,
) -> dict:
    """Per-sample wall time of forward_explain vs KernelSHAP on the same surrogate value function.

    Both methods run single-threaded. The first ``warmup`` samples are timed
    but discarded.
    """
    from threadpoolctl import threadpool_limits

    ds = synthetic_dataset(1000, n_features, seed)
    train, val, test = split(ds, (0.6, 0.2, 0.2), seed)
    ensemble = train_priors(train, cfg.priors, seed)
    mcfg = replace(cfg.model, use_explainer=True, seed=seed)
    model = build_shapnn(n_features, FeatureSpace.from_dataset(train), 2, mcfg)
    model, _ = fit(model, train, val, ensemble, rng=np.random.default_rng([seed, 2]))
    surr = ensemble.members[0].surrogate
    single = make_ensemble([(ensemble.members[0].prior, surr)])
    rng = np.random.default_rng([seed, 5])
    pick = rng.choice(test.n_samples, size=warmup + n_samples, replace=test.n_samples < warmup + n_samples)
    fast, slow = [], []
    with threadpool_limits(limits=1):
        for i in pick:
            x = test.X[i : i + 1]
            t0 = time.perf_counter()
            v_full, v_empty = ensemble_endpoints(single, x)
            forward_explain(model, x[0], v_full[0], v_empty[0])
            fast.append(time.perf_counter() - t0)
            vf = surr.value_function(test.X[i])
            t0 = time.perf_counter()
            kernel_shap(vf, surr.space.n_players, n_samples=n_subsets, rng=rng)
            slow.append(time.perf_counter() - t0)
    fast, slow = np.array(fast[warmup:]), np.array(slow[warmup:])
    return {
        "n_samples": n_samples,
        "n_features": n_features,
        "kernel_subsets": n_subsets,
        "shapnn_mean_s": float(fast.mean()),
        "shapnn_std_s": float(fast.std()),
        "kernelshap_mean_s": float(slow.mean()),
        "kernelshap_std_s": float(slow.std()),
        "speedup": float(slow.mean() / fast.mean()),
    }


def cmd_speed_bench(cfg: RunConfig, n_samples: int = 100, n_subsets: int = 128, n_features: int = 50) -> dict:
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = speed_bench(cfg, n_samples, n_subsets, n_features, seed=cfg.seeds[0])
    write_rows_csv([res], out / "metrics.csv")
    meta = manifest(cfg, "speed-bench", result=res)
    (out / "manifest.json").write_text(json.dumps(meta, indent=2, default=str))
    return res


# ----------------------------------------------------------------------------
# Streams


def stream_runs(cfg: RunConfig, seed: int, every_step: bool = False):
    s = cfg.stream
    batches = stream_generate(s.kind, s.steps, s.batch_size, s.drift_period, seed, s.label_noise)
    ccfg = replace(cfg.continual, seed=seed)
    runs = online_adaptation_eval(batches, s.kind, ccfg, seed, tuple(s.checkpoints), every_step)
    return batches, runs


def cmd_stream(cfg: RunConfig, every_step: bool = False, checkpoints: bool = False) -> dict:
    cfg.validate()
    out = Path(cfg.output_dir)
    summaries = {}
    for seed in cfg.seeds:
        batches, runs = stream_runs(cfg, seed, every_step)
        run_dir = out if len(cfg.seeds) == 1 else out / f"seed_{seed}"
        meta = manifest(cfg, "stream", seed=seed, concept_ids=[b.concept_id for b in batches])
        write_stream_outputs(runs, run_dir, meta, checkpoints)
        summaries[seed] = {name: r.summary() for name, r in runs.items()}
    return summaries
