import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from cslkit import csl
from cslkit import neuralnet as nn
from cslkit.errors import ConfigError, InvalidInputError, NumericError
from cslkit.geometry import axis_angle_to_rotation, random_rotation_matrices

from conftest import MICRO_SETTINGS
from oracles import angle_deg, rotation_from_axis_angle

X = np.array([1.0, 0.0, 0.0])


def micro_params(seed=0):
    p = nn.init_params(seed, 17, (8, 4), 3, dtype=np.float64)
    rng = np.random.default_rng(seed + 7)
    return nn.MlpParams(p.weights, [rng.normal(0, 0.1, b.shape) for b in p.biases])


def constant_params(v=X):
    """A network whose sensor output is ``v`` for every input."""
    p = micro_params()
    p.weights[-1][:] = 0.0
    p.biases[-1][:] = v
    return p


def rotation_to(u):
    """A rotation taking +x onto the unit vector ``u``."""
    u = np.asarray(u, dtype=float) / np.linalg.norm(u)
    axis = np.cross(X, u)
    s = np.linalg.norm(axis)
    if s < 1e-12:
        return np.eye(3) if u[0] > 0 else rotation_from_axis_angle([0, 0, 1], np.pi)
    return rotation_from_axis_angle(axis, np.arctan2(s, X @ u))


def features(n, seed):
    x = np.random.default_rng(seed).standard_normal((n, 17))
    x[:, :16] /= np.linalg.norm(x[:, :16], axis=1, keepdims=True)
    x[:, 16] = np.abs(x[:, 16]) % 1
    return x


def random_batch(n_intervals=2, n_bins=20, seed=0):
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n_intervals):
        labels = np.r_[np.zeros(n_bins // 2 - 3, int), np.ones(n_bins - n_bins // 2 + 3, int)]
        items.append((features(n_bins, seed * 10 + i), random_rotation_matrices(rng, n_bins), labels))
    return csl.LossBatch.build(items)


def world_batch(groups):
    """Batch for ``constant_params()`` whose world vectors are the given unit
    directions; ``groups`` is a list of ``(sub1_dirs, sub2_dirs)``."""
    items = []
    for i, (a, b) in enumerate(groups):
        dirs = list(a) + list(b)
        rots = np.array([rotation_to(u) for u in dirs])
        labels = np.r_[np.zeros(len(a), int), np.ones(len(b), int)]
        items.append((features(len(dirs), i), rots, labels))
    return csl.LossBatch.build(items)


class TestWorldTransform:
    def test_identity(self):
        v = np.random.default_rng(0).standard_normal((10, 3))
        assert np.array_equal(csl.world_transform(v, np.tile(np.eye(3), (4, 1, 1)), np.arange(10) % 4), v)

    def test_norms_preserved(self):
        rng = np.random.default_rng(1)
        v = rng.standard_normal((500, 3))
        R = random_rotation_matrices(rng, 50)
        w = csl.world_transform(v, R, rng.integers(0, 50, 500))
        assert np.abs(np.linalg.norm(w, axis=1) - np.linalg.norm(v, axis=1)).max() < 1e-12

    def test_quarter_turn(self):
        R = axis_angle_to_rotation([0, 0, 1], np.pi / 2)[None]
        assert np.allclose(csl.world_transform(X[None], R, [0]), [[0, 1, 0]], atol=1e-15)

    def test_missing_rotation(self):
        with pytest.raises(InvalidInputError):
            csl.world_transform(np.ones((2, 3)), np.tile(np.eye(3), (3, 1, 1)), [0, 3])


class TestCentroid:
    def test_cases(self):
        assert np.allclose(csl.centroid([[0, 0, 1.0], [0, 0, 1.0]]).direction.xyz, [0, 0, 1])
        c = csl.centroid([[1.0, 0, 0], [0, 1.0, 0]])
        assert np.allclose(c.direction.xyz, [2 ** -0.5, 2 ** -0.5, 0])
        assert c.direction.frame == "world"
        d = csl.centroid([[0.3, 0.4, 0.5], [-0.3, -0.4, -0.5]])
        assert d.degenerate and d.direction is None

    def test_confidence_weighting(self):
        c = csl.centroid([[3.0, 0, 0], [0, 1.0, 0]])
        assert angle_deg(c.direction.xyz, [1, 0, 0]) == pytest.approx(np.degrees(np.arctan2(1, 3)))

    def test_empty(self):
        with pytest.raises(InvalidInputError):
            csl.centroid(np.zeros((0, 3)))


def sub_loss(batch, params):
    return csl.sub_contrastive_loss(batch, params, grad=False)[0]


class TestSubContrastive:
    def test_constant_world_prediction_zero_loss_and_gradient(self):
        batch = world_batch([([X] * 4, [X] * 6), ([X] * 5, [X] * 5)])
        loss, grads, _ = csl.sub_contrastive_loss(batch, constant_params())
        assert loss < 1e-24
        assert max(np.abs(g).max() for g in grads.arrays()) < 1e-12

    def test_right_angle_gives_two(self):
        batch = world_batch([([X] * 3, [[0, 1.0, 0]] * 4)])
        assert sub_loss(batch, constant_params()) == pytest.approx(2.0, abs=1e-12)

    def test_matches_direct_centroid_formula(self):
        batch = random_batch(3, 30, 2)
        p = micro_params(1)
        rw = csl.world_transform(nn.forward(p, batch.features)[0].vectors, batch.rotations)
        ref = 0.0
        for i in range(3):
            a = csl.centroid(rw[batch.group == 2 * i]).direction.xyz
            b = csl.centroid(rw[batch.group == 2 * i + 1]).direction.xyz
            ref += np.sum((np.array(a) - np.array(b)) ** 2)
        assert sub_loss(batch, p) == pytest.approx(ref, rel=1e-12)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_finite_differences(self, seed):
        batch = random_batch(2, 20, seed)
        p = micro_params(seed)
        _, grads, _ = csl.sub_contrastive_loss(batch, p)
        rng = np.random.default_rng(seed)
        worst = 0.0
        for a, (arr, g) in enumerate(zip(p.arrays(), grads.arrays())):
            for flat in rng.choice(arr.size, min(arr.size, 12), replace=False):
                idx = np.unravel_index(flat, arr.shape)
                plus, minus = p.copy(), p.copy()
                plus.arrays()[a][idx] += 1e-5
                minus.arrays()[a][idx] -= 1e-5
                num = (sub_loss(batch, plus) - sub_loss(batch, minus)) / 2e-5
                worst = max(worst, abs(num - g[idx]) / max(abs(num), abs(g[idx]), 1e-6))
        assert worst < 1e-5

    def test_reflection_invariance(self):
        batch = random_batch(2, 20, 3)
        for seed in range(100):
            p = micro_params(seed)
            a, b = sub_loss(batch, p), sub_loss(batch, p.negated())
            assert abs(a - b) <= 1e-9 * max(abs(a), 1e-300)

    def test_rotation_equivariance(self):
        batch = random_batch(2, 20, 4)
        Q = random_rotation_matrices(np.random.default_rng(9), 1)[0]
        moved = csl.LossBatch(batch.features, Q @ batch.rotations, batch.group, batch.n_intervals)
        p = micro_params(2)
        assert sub_loss(moved, p) == pytest.approx(sub_loss(batch, p), rel=1e-9)

    def test_degenerate_interval_dropped(self):
        y = np.array([0, 1.0, 0])
        batch = world_batch([([X, -X], [X] * 2), ([X] * 2, [y] * 2)])
        loss, grads, info = csl.sub_contrastive_loss(batch, constant_params())
        assert list(info["valid"]) == [False, True]
        assert loss == pytest.approx(2.0)
        assert grads is not None

    def test_all_degenerate_skips(self):
        batch = world_batch([([X, -X], [X] * 2)])
        loss, grads, info = csl.sub_contrastive_loss(batch, constant_params())
        assert loss == 0.0 and grads is None and not info["valid"].any()

    def test_bad_labels(self):
        with pytest.raises(InvalidInputError):
            csl.LossBatch.build([(features(3, 0), np.tile(np.eye(3), (3, 1, 1)), [0, 1, 2])])


class TestFullContrastive:
    def test_cases(self):
        assert csl.full_contrastive_loss(np.tile([0.2, 0.3, 0.1], (6, 1))) == 0.0
        assert csl.full_contrastive_loss([[1.0, 0, 0], [0, 1.0, 0]]) == pytest.approx(2.0)
        assert csl.full_contrastive_loss([[1.0, 0, 0]]) == 0.0

    def test_matches_pair_enumeration(self):
        v = np.random.default_rng(0).standard_normal((15, 3))
        ref = sum(np.sum((v[a] - v[b]) ** 2) for a in range(15) for b in range(a + 1, 15))
        assert csl.full_contrastive_loss(v) == pytest.approx(ref, rel=1e-12)

    def test_zero_full_implies_zero_sub(self):
        rng = np.random.default_rng(0)
        for trial in range(100):
            v = rng.standard_normal(3)
            p = constant_params(v)
            n = int(rng.integers(4, 30))
            labels = np.r_[np.zeros(n // 2, int), np.ones(n - n // 2, int)]
            batch = csl.LossBatch.build([(features(n, trial), np.tile(np.eye(3), (n, 1, 1)), labels)])
            rw = csl.world_transform(nn.forward(p, batch.features)[0].vectors, batch.rotations)
            assert csl.full_contrastive_loss(rw) < 1e-20
            assert sub_loss(batch, p) < 1e-20

    def test_weaker_form_counterexample(self):
        # both halves scattered, both centred on the same direction
        d = np.array([1.0, 1.0, 0]) / np.sqrt(2)
        z = np.array([0, 0, 1.0])
        half1 = [np.array([1.0, 0, 0]), np.array([0, 1.0, 0])]
        half2 = [(d + 0.8 * z) / np.linalg.norm(d + 0.8 * z), (d - 0.8 * z) / np.linalg.norm(d - 0.8 * z)]
        batch = world_batch([(half1, half2)])
        p = constant_params()
        rw = csl.world_transform(nn.forward(p, batch.features)[0].vectors, batch.rotations)
        assert sub_loss(batch, p) < 1e-12
        assert csl.full_contrastive_loss(rw) > 0.1


class TestConfig:
    def test_defaults(self):
        c = csl.TrainConfig()
        assert (c.batch_size, c.lr, c.c1, c.c2, c.eps_pool) == (8, 1e-5, 0.2, 0.8, 1e-8)

    @pytest.mark.parametrize("kw", [dict(c1=0.9, c2=0.8), dict(c1=0.0), dict(batch_size=0), dict(lr=0),
                                    dict(sign_method="coin")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            csl.TrainConfig(**kw)


class TestTraining:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_micro_run_loss_decreases(self, micro_intervals, seed):
        cfg = csl.TrainConfig(epochs=5, seed=seed, sign_method="none", **MICRO_SETTINGS)
        res = csl.train(micro_intervals["train"], micro_intervals["val"], cfg)
        loss = [h["train_loss"] for h in res.history]
        assert sum(b < a for a, b in zip(loss, loss[1:])) >= 3

    def test_log_checkpoint_and_determinism(self, micro_intervals, tmp_path):
        cfg = csl.TrainConfig(epochs=2, seed=3, sign_method="oracle", **MICRO_SETTINGS)
        for tag in ("a", "b"):
            csl.train(micro_intervals["train"], micro_intervals["val"], cfg,
                      log_path=tmp_path / f"{tag}.jsonl", checkpoint_path=tmp_path / f"{tag}.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        recs = [json.loads(line) for line in (tmp_path / "a.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in recs] == [1, 2]
        assert set(recs[0]) == {"epoch", "train_loss", "val_error_deg", "wall_time"}
        _, header = csl.load_model(tmp_path / "a.ckpt")
        tc = header["meta"]["train_config"]
        assert tc["batch_size"] == 4 and tc["lr"] == 1e-3
        assert header["adam"]["lr"] == 1e-3 and header["adam"]["step"] == 2 * 5
        assert header["meta"]["sign"]["method"] == "oracle"
        assert csl.feature_settings(header)["phase_ref"] == "mic1"

    def test_default_hyperparameters_logged(self, micro_intervals, tmp_path):
        cfg = csl.TrainConfig(epochs=1, hidden=(8,), sign_method="none", max_bins=64)
        csl.train(micro_intervals["train"], [], cfg, checkpoint_path=tmp_path / "m.ckpt")
        _, header = csl.load_model(tmp_path / "m.ckpt")
        assert header["meta"]["train_config"]["batch_size"] == 8
        assert header["adam"]["lr"] == 1e-5

    def test_too_few_sessions(self, micro_intervals):
        with pytest.raises(InvalidInputError):
            csl.train(micro_intervals["train"][:3], [], csl.TrainConfig(epochs=1))

    def test_non_finite_loss_dumps_batch(self, micro_intervals, tmp_path, monkeypatch):
        def broken(batch, params, eps=1e-8, grad=True):
            return float("nan"), None, {}
        monkeypatch.setattr(csl, "sub_contrastive_loss", broken)
        cfg = csl.TrainConfig(epochs=1, sign_method="none", **MICRO_SETTINGS)
        with pytest.raises(NumericError, match="dumped"):
            csl.train(micro_intervals["train"], [], cfg, dump_dir=tmp_path)
        dump = np.load(next(tmp_path.glob("nonfinite_e1_s0.npz")))
        assert dump["features"].shape[1] == 17


def truth_predictions(monkeypatch, scale=1.0, planted=None):
    """Replace the network output by the true sensor-frame direction of each bin
    (or by a planted world direction per session id)."""
    def fake(params, data):
        w = data.truth[0] if planted is None else planted[data.session_id]
        rs = scale * np.einsum("bji,j->bi", data.rotations[data.n], w)
        return rs, csl.world_transform(rs, data.rotations, data.n)
    monkeypatch.setattr(csl, "interval_predictions", fake)


class TestSign:
    def test_oracle_keeps_or_flips(self, micro_intervals, monkeypatch):
        ev = micro_intervals["val"]
        p = micro_params()
        truth_predictions(monkeypatch)
        q, d = csl.disambiguate_sign(p, "oracle", ev)
        assert not d.flipped and d.agree == 1.0 and q is p
        truth_predictions(monkeypatch, -1.0)
        q, d = csl.disambiguate_sign(p, "oracle", ev)
        assert d.flipped
        x = features(10, 0)
        assert np.allclose(nn.forward(q.negated(), x)[0].vectors, nn.forward(p, x)[0].vectors, atol=1e-12)

    @pytest.mark.parametrize("scale,flipped", [(1.0, False), (-1.0, True)])
    def test_mic_pair_vote(self, micro_intervals, monkeypatch, scale, flipped):
        truth_predictions(monkeypatch, scale)
        _, d = csl.disambiguate_sign(micro_params(), "mic-pair", micro_intervals["val"], mic_pair=(4, 0))
        assert d.flipped == flipped and not d.ambiguous
        assert max(d.agree, 1 - d.agree) > 0.9 and d.n_votes > 50

    def test_initial_orientation(self, micro_intervals, monkeypatch):
        truth_predictions(monkeypatch)
        ev = micro_intervals["val"]
        _, d = csl.disambiguate_sign(micro_params(), "initial-orientation", ev)
        first_x = [(d_.rotations[0].T @ d_.truth[0])[0] > 0 for d_ in ev]
        assert d.agree == pytest.approx(np.mean(first_x))

    def test_ambiguous_vote(self, micro_intervals, monkeypatch):
        ev = micro_intervals["val"][:2]
        truth_predictions(monkeypatch, planted={d.session_id: d.truth[0] for d in ev})
        # same predictions, but the second session's recorded truth points the other way
        flipped_copy = [csl.IntervalData(ev[1].features, ev[1].k, ev[1].n, ev[1].rotations, -ev[1].truth,
                                         ev[1].session_id)]
        p = micro_params()
        q, d = csl.disambiguate_sign(p, "oracle", ev[:1] + flipped_copy)
        assert d.ambiguous and not d.flipped and q is p and d.agree == 0.5

    def test_loss_unchanged_by_flip(self):
        batch = random_batch(2, 20, 5)
        p = micro_params(4)
        assert sub_loss(batch, p) == pytest.approx(sub_loss(batch, p.negated()), rel=1e-12)

    def test_unknown_method(self):
        with pytest.raises(ConfigError):
            csl.disambiguate_sign(micro_params(), "coin", [])


class TestInfer:
    def identity_interval(self, n_frames=20, seed=0):
        rng = np.random.default_rng(seed)
        n = np.repeat(np.arange(n_frames), 3)
        return csl.IntervalData(features(len(n), seed), n % 7 + 20, n, np.tile(np.eye(3), (n_frames, 1, 1)),
                                rng.standard_normal((1, 3)))

    def test_identity_rotations_constant_sensor(self):
        data = self.identity_interval()
        est = csl.infer(micro_params(), data, [(0, 20), (3, 9)])
        for e in est:
            assert np.allclose(e.sensor, e.sensor[0]) and np.allclose(e.sensor[0], e.world)

    def test_back_transform_and_additivity(self):
        data = self.identity_interval(30, 1)
        data.rotations = random_rotation_matrices(np.random.default_rng(2), 30)
        p = micro_params(3)
        whole, a, b = csl.infer(p, data, [(0, 30), (0, 12), (12, 30)])
        assert whole.confidence_mass == pytest.approx(a.confidence_mass + b.confidence_mass)
        assert whole.n_bins == a.n_bins + b.n_bins == 90
        for k, n in enumerate(range(12, 30)):
            assert np.allclose(b.sensor[k], data.rotations[n].T @ b.world)
        rw = csl.world_transform(nn.forward(p, data.features)[0].vectors, data.rotations, data.n)
        assert np.allclose(whole.world, csl.centroid(rw).direction.xyz)
        assert whole.center == 14 and np.allclose(whole.center_sensor, data.rotations[14].T @ whole.world)

    def test_empty_window(self):
        data = self.identity_interval()
        keep = data.n != 5
        data = csl.IntervalData(data.features[keep], data.k[keep], data.n[keep], data.rotations)
        (e,) = csl.infer(micro_params(), data, [(5, 6)])
        assert e.empty and e.n_bins == 0 and e.center_sensor is None

    def test_window_bounds(self):
        with pytest.raises(InvalidInputError):
            csl.infer(micro_params(), self.identity_interval(), [(0, 21)])

    def test_prepare_interval(self, micro_sessions):
        s = micro_sessions["train"][0]
        d = csl.prepare_interval(s, phase_ref="mic1")
        assert d.features.shape[1] == 17 and d.features.dtype == np.float32
        assert d.n_frames == s.n_frames and d.mic_positions.shape == (8, 3)
        assert np.allclose(d.truth, s.truth_world_dirs)


def test_scipy_rotation_helper_agrees():
    u = np.array([0.2, -0.5, 0.8])
    u /= np.linalg.norm(u)
    assert np.allclose(rotation_to(u) @ X, u)
    assert np.allclose(Rotation.from_matrix(rotation_to(u)).apply(X), u)
