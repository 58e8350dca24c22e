import csv
import json

import numpy as np
import pytest

from cslkit import csl, evalkit
from cslkit.errors import InvalidInputError
from cslkit.geometry import build_grid
from cslkit.simkit.dataset import make_session

from oracles import angle_deg


@pytest.fixture(scope="module")
def grid():
    return build_grid(3000)


@pytest.fixture(scope="module")
def fine_grid():
    return evalkit.default_grid()


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def cluster(center, n, spread_deg, rng, norm=1.0):
    c = unit(center)
    v = c + np.radians(spread_deg) * rng.standard_normal((n, 3))
    return norm * unit(v)


class TestHelpers:
    def test_mean_ci(self):
        e = np.array([1.0, 2.0, 4.0, 7.0])
        mu, ci = evalkit.mean_ci(e)
        assert mu == 3.5
        assert ci == pytest.approx(1.96 * np.sqrt(np.sum((e - 3.5) ** 2) / 3) / 2)
        assert evalkit.mean_ci([5.0]) == (5.0, 0.0)
        with pytest.raises(InvalidInputError):
            evalkit.mean_ci([])

    def test_window_frames(self):
        assert [evalkit.window_frames(L) for L in (0.05, 0.2, 0.5, 1.0)] == [5, 20, 50, 100]
        assert evalkit.window_frames("full") is None
        with pytest.raises(InvalidInputError):
            evalkit.window_frames(0)

    def test_parse_windows(self):
        assert evalkit.parse_windows("0.05, 0.2,Full") == [0.05, 0.2, "full"]
        assert [evalkit.window_label(x) for x in (0.05, 1.0, "full")] == ["0.05", "1", "full"]
        with pytest.raises(InvalidInputError):
            evalkit.parse_windows(" , ")


class TestWindowSweep:
    def test_single_window_single_session(self, micro_sessions, grid):
        s = micro_sessions["val"][0]
        rep = evalkit.window_sweep("srp-phat", [s], ["full"], grid)
        row = rep.row("srp-phat", "full")
        assert row.n == 1 and row.ci_deg == 0.0
        assert row.mean_deg == rep.records[0].error_deg
        assert row.condition == "anechoic"

    def test_records_and_truth_at_centre(self, micro_sessions, grid):
        s = micro_sessions["val"][1]
        rep = evalkit.window_sweep("lsdd", [s], [0.2], grid)
        caches = evalkit.session_caches([s])
        wins = caches[0].windows(0.2)
        assert len(rep.records) == len(wins) == rep.row("lsdd", 0.2).n
        est = caches[0].estimates("lsdd", wins, grid)
        for (a, b), e, r in zip(wins, est, rep.records):
            assert r.window == f"{a}:{b}"
            truth = s.rotations[(a + b - 1) // 2].T @ s.truth_world_dirs[0]
            assert r.error_deg == pytest.approx(angle_deg(e, truth), abs=1e-9)

    def test_half_overlap_tiling(self, micro_sessions, grid):
        s = micro_sessions["val"][0]
        wins = evalkit.session_caches([s])[0].windows(0.2)
        starts = [a for a, _ in wins]
        assert all(b - a == 20 for a, b in wins)
        assert all((x - starts[0]) % 10 == 0 for x in starts)

    def test_bit_exact_repeat(self, micro_sessions, grid):
        ss = micro_sessions["val"][:2]
        a = evalkit.window_sweep("all", ss, [0.05, "full"], grid)
        b = evalkit.window_sweep("all", ss, [0.05, "full"], grid)
        assert [r.error_deg for r in a.records] == [r.error_deg for r in b.records]
        # without parameters only the two baselines run
        assert {r.method for r in a.rows} == {"srp-phat", "lsdd"}

    def test_unknown_method(self, micro_sessions, grid):
        with pytest.raises(InvalidInputError):
            evalkit.window_sweep("music", micro_sessions["val"][:1], ["full"], grid)

    def test_csl_with_planted_predictions(self, micro_sessions, grid, monkeypatch):
        def truth(params, data):
            rs = np.einsum("bji,j->bi", data.rotations[data.n], data.truth[0])
            return rs, csl.world_transform(rs, data.rotations, data.n)
        monkeypatch.setattr(csl, "interval_predictions", truth)
        rep = evalkit.window_sweep("csl", micro_sessions["val"], [0.05, "full"], grid, params=object())
        assert rep.row("csl", "full").mean_deg < 1e-6
        assert rep.row("csl", 0.05).mean_deg < 1e-6


class TestConfidence:
    def test_calibrated_field_strictly_decreasing(self):
        rng = np.random.default_rng(0)
        conf = rng.uniform(0.1, 5, 4000)
        err = 90.0 / (1.0 + conf)
        edges, mean, counts = evalkit.confidence_curve(conf, err, 20)
        assert len(mean) == 20 and counts.sum() == 4000
        assert np.all(np.diff(mean) < 0)
        assert evalkit.nonincreasing_fraction(mean) == 1.0
        assert np.all(np.abs(counts - 200) <= 1)

    def test_constant_norm_single_bin(self):
        edges, mean, counts = evalkit.confidence_curve(np.ones(50), np.arange(50.0), 20)
        assert len(mean) == 1 and counts[0] == 50 and mean[0] == pytest.approx(24.5)

    def test_bad_input(self):
        with pytest.raises(InvalidInputError):
            evalkit.confidence_curve(np.ones(3), np.ones(4))

    def test_analysis_with_planted_network(self, micro_sessions, monkeypatch):
        # confident bins point at the truth, weak bins are noise
        def planted(params, data):
            rng = np.random.default_rng(len(data))
            t = np.einsum("bji,j->bi", data.rotations[data.n], data.truth[0])
            c = rng.uniform(0.05, 2, len(t))
            noise = rng.standard_normal(t.shape) / c[:, None]
            rs = c[:, None] * unit(t + noise)
            return rs, csl.world_transform(rs, data.rotations, data.n)
        monkeypatch.setattr(csl, "interval_predictions", planted)
        rep = evalkit.confidence_analysis(None, micro_sessions["val"], features={"phase_ref": "mic1"})
        assert len(rep.mean_error) == 20
        assert rep.nonincreasing_fraction() >= 0.8
        assert np.all((rep.mean_error >= 0) & (rep.mean_error <= 180))
        total = rep.counts.sum()
        assert 0.04 * total <= len(rep.high_confidence) <= 0.06 * total


def brute_density(v, directions, alpha=1.0):
    w = np.linalg.norm(v, axis=1)
    ang = angle_deg(directions[:, None, :], v[None, :, :])
    return np.sum(w[None, :] * np.exp(-ang / alpha), axis=1)


class TestKde:
    def test_exact_grid_direction(self, fine_grid):
        g = 777
        v = np.tile(fine_grid.directions[g], (12, 1))
        peaks = evalkit.kde_multi_source(v, evalkit.KdeConfig(n_src=2), fine_grid)
        assert list(peaks.indices) == [g] and peaks.short
        assert peaks.psi[0] == pytest.approx(12.0, rel=1e-12)

    def test_matches_untruncated_oracle(self, grid):
        rng = np.random.default_rng(1)
        v = cluster([0.2, 0.5, 0.8], 200, 10, rng) * rng.uniform(0.2, 2, (200, 1))
        cfg = evalkit.KdeConfig(bandwidth_deg=5.0)
        psi = evalkit.kde_density(v, grid, cfg)
        ref = brute_density(v, grid.directions, 5.0)
        # truncation at 15 bandwidths drops at most e^-15 of the total weight per grid point
        assert np.abs(psi - ref).max() <= np.exp(-15) * np.linalg.norm(v, axis=1).sum() + 1e-9

    def test_per_frame_densities_sum(self, grid):
        rng = np.random.default_rng(2)
        v = cluster([1, 0, 0], 60, 5, rng)
        frames = rng.integers(0, 6, 60)
        cfg = evalkit.KdeConfig(bandwidth_deg=4.0)
        per = evalkit.kde_density(v, grid, cfg, frames=frames, n_frames=8)
        assert per.shape == (8, len(grid)) and not per[6:].any()
        assert np.allclose(per.sum(axis=0), evalkit.kde_density(v, grid, cfg))

    def test_two_clusters(self, fine_grid):
        rng = np.random.default_rng(3)
        a, b = unit([1, 1, 0.2]), unit([-1, 1, -0.2])
        assert angle_deg(a, b) == pytest.approx(np.degrees(np.arccos(a @ b)))
        ca, cb = cluster(a, 100, 1.0, rng), cluster(b, 100, 1.0, rng)
        peaks = evalkit.kde_multi_source(np.vstack([ca, cb]), evalkit.KdeConfig(n_src=2), fine_grid)
        assert len(peaks.indices) == 2 and not peaks.short
        d = angle_deg(peaks.directions[:, None, :], np.stack([a, b])[None])
        assert d[:, 0].min() <= 2.5 and d[:, 1].min() <= 2.5

    def test_single_source_returns_denser(self, fine_grid):
        rng = np.random.default_rng(4)
        a, b = unit([0, 0, 1]), unit([1, 0, 0])
        v = np.vstack([cluster(a, 60, 1.0, rng), cluster(b, 150, 1.0, rng)])
        peaks = evalkit.kde_multi_source(v, evalkit.KdeConfig(n_src=1), fine_grid)
        assert angle_deg(peaks.directions[0], b) <= 2.5

    def test_peaks_invariant_to_norm_scaling(self, fine_grid):
        rng = np.random.default_rng(5)
        v = np.vstack([cluster([0, 1, 0], 40, 2, rng), cluster([0, 0, -1], 30, 2, rng)])
        v *= rng.uniform(0.5, 1.5, (70, 1))
        a = evalkit.kde_multi_source(v, evalkit.KdeConfig(n_src=2), fine_grid)
        b = evalkit.kde_multi_source(3.7 * v, evalkit.KdeConfig(n_src=2), fine_grid)
        assert np.array_equal(a.indices, b.indices)
        assert np.allclose(b.psi, 3.7 * a.psi)

    def test_local_maxima_ties_and_zero(self):
        g = build_grid(12)
        psi = np.zeros(12)
        assert len(evalkit.local_maxima(psi, g)) == 0
        i = 0
        j = int(g.neighbors[i][0])
        psi[[i, j]] = 1.0
        assert list(evalkit.local_maxima(psi, g)) == [min(i, j)]

    def test_config_validation(self):
        with pytest.raises(InvalidInputError):
            evalkit.KdeConfig(bandwidth_deg=0)
        with pytest.raises(InvalidInputError):
            evalkit.KdeConfig(n_src=0)
        with pytest.raises(InvalidInputError):
            evalkit.kde_multi_source(np.zeros((0, 3)))


class TestChamfer:
    def test_cases(self):
        r = unit([0.3, 0.1, 0.9])
        assert evalkit.weighted_chamfer([r], [5.0], [r]) == pytest.approx(0.0, abs=1e-6)
        assert evalkit.weighted_chamfer([[0, 1.0, 0]], [1.0], [[1.0, 0, 0]]) == pytest.approx(180.0)

    def test_identity_and_scale_invariance(self):
        rng = np.random.default_rng(0)
        S = unit(rng.standard_normal((4, 3)))
        psi = rng.uniform(0.1, 3, 4)
        assert evalkit.weighted_chamfer(S, psi, S) == pytest.approx(0.0, abs=1e-6)
        P = unit(rng.standard_normal((3, 3)))
        w = rng.uniform(0.1, 3, 3)
        assert evalkit.weighted_chamfer(P, 9 * w, S) == pytest.approx(evalkit.weighted_chamfer(P, w, S), rel=1e-12)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(1)
        P, T = unit(rng.standard_normal((3, 3))), unit(rng.standard_normal((2, 3)))
        w = rng.uniform(0.1, 1, 3)
        D = angle_deg(T[:, None], P[None])
        ref = D.min(axis=1).mean() + np.sum(w * D.min(axis=0)) / w.sum()
        assert evalkit.weighted_chamfer(P, w, T) == pytest.approx(ref, rel=1e-10)

    def test_spurious_low_weight(self):
        t = unit([1, 0, 0])
        base = evalkit.weighted_chamfer([t], [1.0], [t])
        for eps in (1e-2, 1e-4, 1e-6):
            out = evalkit.weighted_chamfer([t, unit([0, 0, 1])], [1.0, eps], [t])
            assert out - base <= 90 * eps * 1.0001

    def test_errors(self):
        with pytest.raises(InvalidInputError):
            evalkit.weighted_chamfer([[1.0, 0, 0]], [0.0], [[1.0, 0, 0]])
        with pytest.raises(InvalidInputError):
            evalkit.weighted_chamfer(np.zeros((0, 3)), [], [[1.0, 0, 0]])


class TestTwoSource:
    def test_active_sources(self):
        meta = {"source_frame_energy_db": [[0, 0, -100, -100], [-100, -100, -100, 0]]}
        assert list(evalkit.active_sources(meta, 0, 2)) == [0]
        assert list(evalkit.active_sources(meta, 1, 4)) == [0, 1]
        assert list(evalkit.active_sources(meta, 2, 3)) == []
        with pytest.raises(InvalidInputError):
            evalkit.active_sources({}, 0, 1)

    def test_planted_two_source(self, fine_grid, monkeypatch):
        sessions = [make_session(i, "anechoic", 21, n_sources=2, duration_range=(1.0, 1.2)) for i in range(2)]

        def planted(params, data):
            # even frames follow source 0, odd frames source 1
            src = data.truth[data.n % 2]
            rs = np.einsum("bji,bj->bi", data.rotations[data.n], src)
            return rs, csl.world_transform(rs, data.rotations, data.n)
        monkeypatch.setattr(csl, "interval_predictions", planted)
        rows, records = evalkit.two_source_eval(None, sessions, [0.2, 1.0], grid=fine_grid)
        assert [r.L_win for r in rows] == ["0.2", "1"]
        assert all(r.method == "csl-kde" and r.n > 0 for r in rows)
        assert rows[1].mean_deg < 3.0

    def test_single_source_spurious_peak_filtered(self, micro_sessions, fine_grid, monkeypatch):
        def planted(params, data):
            rng = np.random.default_rng(0)
            rs = np.einsum("bji,j->bi", data.rotations[data.n], data.truth[0])
            rs = unit(rs + 0.01 * rng.standard_normal(rs.shape))
            junk = rng.random(len(rs)) < 0.05
            rs[junk] = 0.05 * unit(rng.standard_normal((junk.sum(), 3)))
            return rs, csl.world_transform(rs, data.rotations, data.n)
        monkeypatch.setattr(csl, "interval_predictions", planted)
        rows, _ = evalkit.two_source_eval(None, micro_sessions["val"][:2], ["full"], grid=fine_grid)
        assert rows[0].mean_deg < 5.0


class TestWriters:
    def test_csv_and_json(self, tmp_path):
        rows = [evalkit.SweepRow("lsdd", "anechoic", "0.05", 1.234567891, 0.1, 10)]
        evalkit.write_rows_csv(tmp_path / "r.csv", rows)
        got = list(csv.reader((tmp_path / "r.csv").open()))
        assert got == [["method", "condition", "L_win", "mean_deg", "ci_deg", "n"],
                       ["lsdd", "anechoic", "0.05", "1.234568", "0.100000", "10"]]
        evalkit.write_records_csv(tmp_path / "w.csv", [evalkit.WindowRecord("csl", "s1", "0:5", "0.05", 2.0)])
        assert (tmp_path / "w.csv").read_text().splitlines()[1] == "csl,s1,0.05,0:5,2.000000"
        evalkit.write_json(tmp_path / "r.json", {"rows": rows, "x": np.arange(2)})
        assert json.loads((tmp_path / "r.json").read_text())["rows"][0]["n"] == 10

    def test_density_and_overlay(self, tmp_path):
        evalkit.write_density_csv(tmp_path / "d.csv", [1.0, 0.0])
        lines = (tmp_path / "d.csv").read_text().splitlines()
        assert lines == ["grid_index,log_psi", "0,0.000000", "1,-inf"]
        evalkit.write_overlay_csv(tmp_path / "o.csv", [("s1", 30, 4, 2.5)])
        assert (tmp_path / "o.csv").read_text().splitlines()[1] == "s1,30,4,2.500000"
        rep = evalkit.ConfidenceReport(np.array([0.0, 1.0, 2.0]), np.array([5.0, 3.0]), np.array([4, 4]))
        evalkit.write_confidence_csv(tmp_path / "c.csv", rep)
        assert (tmp_path / "c.csv").read_text().splitlines()[2] == "1,1.000000,2.000000,3.000000,4"
