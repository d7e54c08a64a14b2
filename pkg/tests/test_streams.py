import json

import numpy as np
import pytest

from tabshap.errors import ConfigError
from tabshap.streams import (
    KINDS,
    SEA_THRESHOLDS,
    ConceptStream,
    concept_schedule,
    export_stream,
    rot_pool,
    sea_concept,
    stagger_concept,
    stream_generate,
)


class TestConcepts:
    def test_sea_boundary_example(self):
        # theta = 8 and x1 + x2 = 7 lies below the threshold
        assert sea_concept(np.array([[3.0, 4.0, 9.0]]), 8.0).tolist() == [1]
        assert sea_concept(np.array([[5.0, 4.0, 0.0]]), 8.0).tolist() == [0]

    def test_sea_ignores_third_feature(self):
        X = np.random.default_rng(0).uniform(0, 10, size=(200, 3))
        Y = X.copy()
        Y[:, 2] = 0
        assert np.array_equal(sea_concept(X, 9.0), sea_concept(Y, 9.0))

    def test_stagger_truth_tables(self):
        def row(size, color, shape):
            x = np.zeros(9)
            x[size], x[3 + color], x[6 + shape] = 1, 1, 1
            return x

        X = np.array([row(s, c, h) for s in range(3) for c in range(3) for h in range(3)])
        size, color, shape = X[:, :3].argmax(1), X[:, 3:6].argmax(1), X[:, 6:].argmax(1)
        assert np.array_equal(stagger_concept(X, 0), ((size == 0) & (color == 0)).astype(int))
        assert np.array_equal(stagger_concept(X, 1), ((color == 1) | (shape == 1)).astype(int))
        assert np.array_equal(stagger_concept(X, 2), (size >= 1).astype(int))
        with pytest.raises(ConfigError):
            stagger_concept(X, 3)

    def test_rot_pool_unit_and_distinct(self):
        pool = rot_pool(0)
        np.testing.assert_allclose(np.linalg.norm(pool, axis=1), 1.0, atol=1e-12)
        # consecutive normals are 45 degrees apart
        np.testing.assert_allclose(np.sum(pool[:-1] * pool[1:], 1), np.cos(np.pi / 4), atol=1e-12)

    @pytest.mark.parametrize("kind", KINDS)
    def test_drift_changes_labels(self, kind):
        gen = ConceptStream(kind, 0)
        X = gen.sample_features(1000, np.random.default_rng(1))
        for a in range(gen.n_concepts):
            for b in range(a + 1, gen.n_concepts):
                assert np.mean(gen.label(X, a) != gen.label(X, b)) > 0

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            ConceptStream("XYZ")


class TestGenerate:
    def test_single_concept_without_drift(self):
        batches = stream_generate("SEA", 6, 20, drift_period=10, seed=0)
        assert len({b.concept_id for b in batches}) == 1

    @pytest.mark.parametrize("kind", KINDS)
    def test_deterministic(self, kind):
        a = stream_generate(kind, 5, 30, 2, seed=4)
        b = stream_generate(kind, 5, 30, 2, seed=4)
        assert all(x.X.tobytes() == y.X.tobytes() and np.array_equal(x.y, y.y) for x, y in zip(a, b))

    @pytest.mark.parametrize("kind", KINDS)
    def test_labels_follow_concept(self, kind):
        gen = ConceptStream(kind, 3)
        for b in stream_generate(kind, 8, 50, 3, seed=3):
            assert np.array_equal(b.y, gen.label(b.X, b.concept_id))

    def test_schedule_changes_every_period(self):
        sched = concept_schedule(20, 4, 3, np.random.default_rng(0))
        for t in range(1, 20):
            if t % 4 == 0:
                assert sched[t] != sched[t - 1]
            else:
                assert sched[t] == sched[t - 1]

    def test_concepts_recur(self):
        ids = [b.concept_id for b in stream_generate("SEA", 60, 5, 1, seed=0)]
        assert set(ids) == set(range(len(SEA_THRESHOLDS)))

    def test_label_noise(self):
        clean = stream_generate("SEA", 1, 5000, 1, seed=0)[0]
        noisy = stream_generate("SEA", 1, 5000, 1, seed=0, label_noise=0.1)[0]
        assert np.array_equal(clean.X, noisy.X)
        assert 0.08 < np.mean(clean.y != noisy.y) < 0.12

    @pytest.mark.parametrize("args", [(0, 10, 1), (5, 0, 1), (5, 10, 0)])
    def test_preconditions(self, args):
        with pytest.raises(ConfigError):
            stream_generate("STA", *args)

    def test_export(self, tmp_path):
        batches = stream_generate("STA", 3, 4, 1, seed=2)
        export_stream(batches, tmp_path, {"kind": "STA", "seed": 2, "drift_period": 1})
        meta = json.loads((tmp_path / "manifest.json").read_text())
        assert meta["concept_ids"] == [b.concept_id for b in batches]
        lines = (tmp_path / "step_0001.csv").read_text().splitlines()
        assert lines[0].startswith("size=small,") and lines[0].endswith(",label") and len(lines) == 5
