"""Synthetic concept-drift streams: STAGGER (STA), SEA and rotating hyperplane (ROT).

Each stream has a fixed pool of concepts. Every ``drift_period`` steps a new
concept is drawn uniformly from the pool, excluding the current one, so
drift is abrupt and earlier concepts recur.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

KINDS = ("STA", "SEA", "ROT")

SEA_THRESHOLDS = (7.0, 8.0, 9.0, 9.5)

STAGGER_VALUES = {
    "size": ("small", "medium", "large"),
    "color": ("red", "green", "blue"),
    "shape": ("square", "circle", "triangle"),
}

ROT_DIM = 10
ROT_POOL = 4


@dataclass
class StreamBatch:
    t: int
    X: np.ndarray
    y: np.ndarray
    concept_id: int


def sea_concept(X: np.ndarray, theta: float) -> np.ndarray:
    return (X[:, 0] + X[:, 1] <= theta).astype(int)


def stagger_concept(X: np.ndarray, concept: int) -> np.ndarray:
    """``X`` is the 9-column one-hot (size, color, shape) encoding."""
    size, color, shape = X[:, 0:3].argmax(1), X[:, 3:6].argmax(1), X[:, 6:9].argmax(1)
    if concept == 0:
        out = (size == 0) & (color == 0)
    elif concept == 1:
        out = (color == 1) | (shape == 1)
    elif concept == 2:
        out = (size == 1) | (size == 2)
    else:
        raise ConfigError(f"STAGGER has concepts 0..2, got {concept}")
    return out.astype(int)


def rot_pool(seed: int) -> np.ndarray:
    """Unit normals rotated in 45 degree steps within a random plane of R^10."""
    rng = np.random.default_rng([seed, 7919])
    q, _ = np.linalg.qr(rng.normal(size=(ROT_DIM, 2)))
    angles = np.arange(ROT_POOL) * (np.pi / 4)
    return np.cos(angles)[:, None] * q[:, 0] + np.sin(angles)[:, None] * q[:, 1]


def rot_concept(X: np.ndarray, w: np.ndarray) -> np.ndarray:
    center = np.full(X.shape[1], 0.5)
    return (X @ w >= center @ w).astype(int)


class ConceptStream:
    """Feature sampler and concept pool for one stream kind."""

    def __init__(self, kind: str, seed: int = 0):
        if kind not in KINDS:
            raise ConfigError(f"unknown stream kind {kind!r}; expected one of {KINDS}")
        self.kind = kind
        self._rot = rot_pool(seed) if kind == "ROT" else None

    @property
    def n_concepts(self) -> int:
        return {"STA": 3, "SEA": len(SEA_THRESHOLDS), "ROT": ROT_POOL}[self.kind]

    @property
    def n_features(self) -> int:
        return {"STA": 9, "SEA": 3, "ROT": ROT_DIM}[self.kind]

    @property
    def player_groups(self) -> list[np.ndarray]:
        if self.kind == "STA":
            return [np.arange(0, 3), np.arange(3, 6), np.arange(6, 9)]
        return [np.array([j]) for j in range(self.n_features)]

    @property
    def player_names(self) -> list[str]:
        if self.kind == "STA":
            return list(STAGGER_VALUES)
        return [f"x{j + 1}" for j in range(self.n_features)]

    @property
    def column_names(self) -> list[str]:
        if self.kind == "STA":
            return [f"{k}={v}" for k, vals in STAGGER_VALUES.items() for v in vals]
        return self.player_names

    def sample_features(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "SEA":
            return rng.uniform(0.0, 10.0, size=(n, 3))
        if self.kind == "ROT":
            return rng.uniform(0.0, 1.0, size=(n, ROT_DIM))
        X = np.zeros((n, 9))
        for a in range(3):
            X[np.arange(n), 3 * a + rng.integers(0, 3, size=n)] = 1.0
        return X

    def label(self, X: np.ndarray, concept_id: int) -> np.ndarray:
        if self.kind == "SEA":
            return sea_concept(X, SEA_THRESHOLDS[concept_id])
        if self.kind == "ROT":
            return rot_concept(X, self._rot[concept_id])
        return stagger_concept(X, concept_id)

    def standardization(self) -> tuple[np.ndarray, np.ndarray]:
        """Known feature mean/std of the generating distribution."""
        if self.kind == "SEA":
            return np.full(3, 5.0), np.full(3, 10.0 / np.sqrt(12.0))
        if self.kind == "ROT":
            return np.full(ROT_DIM, 0.5), np.full(ROT_DIM, 1.0 / np.sqrt(12.0))
        return np.zeros(9), np.ones(9)

    def background(self) -> np.ndarray:
        return np.zeros(self.n_features)


def concept_schedule(steps: int, drift_period: int, n_concepts: int, rng) -> list[int]:
    schedule, current = [], int(rng.integers(n_concepts))
    for t in range(steps):
        if t > 0 and t % drift_period == 0:
            choices = [c for c in range(n_concepts) if c != current]
            current = int(choices[rng.integers(len(choices))])
        schedule.append(current)
    return schedule


def stream_generate(
    kind: str,
    steps: int,
    batch_size: int,
    drift_period: int,
    seed: int = 0,
    label_noise: float = 0.0,
) -> list[StreamBatch]:
    if steps < 1 or batch_size < 1 or drift_period < 1:
        raise ConfigError("steps, batch_size and drift_period must all be >= 1")
    if not 0.0 <= label_noise < 0.5:
        raise ConfigError("label_noise must be in [0, 0.5)")
    gen = ConceptStream(kind, seed)
    rng = np.random.default_rng([seed, KINDS.index(kind)])
    schedule = concept_schedule(steps, drift_period, gen.n_concepts, rng)
    batches = []
    for t, cid in enumerate(schedule):
        X = gen.sample_features(batch_size, rng)
        y = gen.label(X, cid)
        if label_noise:
            flip = rng.random(batch_size) < label_noise
            y = np.where(flip, 1 - y, y)
        batches.append(StreamBatch(t, X, y, cid))
    return batches


def export_stream(batches: list[StreamBatch], out_dir: str | Path, manifest: dict) -> Path:
    """Write ``step_XXXX.csv`` files plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gen = ConceptStream(manifest["kind"], manifest.get("seed", 0))
    for b in batches:
        with (out / f"step_{b.t:04d}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(gen.column_names + ["label"])
            for row, lab in zip(b.X, b.y):
                w.writerow([repr(float(v)) for v in row] + [int(lab)])
    full = dict(manifest)
    full["concept_ids"] = [b.concept_id for b in batches]
    full["steps"] = len(batches)
    (out / "manifest.json").write_text(json.dumps(full, indent=2))
    return out
