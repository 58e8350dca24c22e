"""Evaluation: moving-window error sweeps, confidence calibration, KDE-based
multi-source peaks and a density-weighted Chamfer distance."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import baselines, csl, dsp
from . import neuralnet as nn
from .errors import InvalidInputError
from .geometry import SphericalGrid, angular_error, build_grid, normalize

WINDOW_LENGTHS = (0.05, 0.2, 0.5, 1.0, "full")
METHODS = ("csl", "srp-phat", "lsdd")
CI_Z = 1.96
PRESENCE_DB = -40.0

_GRID_CACHE: dict = {}
_STEER_CACHE: dict = {}
_STEER_CACHE_SIZE = 2


def default_grid() -> SphericalGrid:
    if "default" not in _GRID_CACHE:
        _GRID_CACHE["default"] = build_grid()
    return _GRID_CACHE["default"]


def mean_ci(errors) -> tuple[float, float]:
    """Mean and 95% half-width ``1.96 * std / sqrt(n)`` (0 for a single value)."""
    e = np.asarray(errors, dtype=float)
    if len(e) == 0:
        raise InvalidInputError("no errors to aggregate")
    if len(e) == 1:
        return float(e[0]), 0.0
    return float(e.mean()), float(CI_Z * e.std(ddof=1) / np.sqrt(len(e)))


def window_label(L) -> str:
    return "full" if L in (None, "full") else f"{float(L):g}"


def window_frames(L, hop_s: float = dsp.HOP / dsp.FS) -> int | None:
    """Frames per window for ``L`` seconds; ``None`` for the whole session."""
    if L in (None, "full"):
        return None
    L = float(L)
    if L <= 0:
        raise InvalidInputError("window length must be positive")
    return max(1, int(round(L / hop_s)))


def parse_windows(text: str) -> list:
    out = []
    for tok in str(text).split(","):
        tok = tok.strip().lower()
        if not tok:
            continue
        out.append("full" if tok == "full" else float(tok))
    if not out:
        raise InvalidInputError("no window lengths given")
    return out


# ---------------------------------------------------------------------------
# window sweep


@dataclass
class SweepRow:
    method: str
    condition: str
    L_win: str
    mean_deg: float
    ci_deg: float
    n: int


@dataclass
class WindowRecord:
    method: str
    session: str
    window: str  # "start:stop"
    L_win: str
    error_deg: float


@dataclass
class WindowSweepReport:
    rows: list = field(default_factory=list)
    records: list = field(default_factory=list)

    def row(self, method: str, L) -> SweepRow:
        lab = window_label(L)
        for r in self.rows:
            if r.method == method and r.L_win == lab:
                return r
        raise KeyError((method, lab))

    def errors(self, method: str, L) -> np.ndarray:
        lab = window_label(L)
        return np.array([r.error_deg for r in self.records if r.method == method and r.L_win == lab])


class _SessionCache:
    """Per-session STFT, active frames and truth shared by every method."""

    def __init__(self, session):
        self.session = session
        self.Y = dsp.stft(session.audio, session.fs)
        sel = dsp.select_bins(self.Y)
        self.active = np.zeros(self.Y.n_frames, dtype=bool)
        self.active[sel.n] = True
        self.truth_sensor = session.sensor_truth()  # (N, S, 3)
        self.mics = np.asarray(session.meta.get("mic_positions"), dtype=float) if session.meta.get(
            "mic_positions") is not None else None
        self._lsdd = None
        self._csl = None

    @property
    def condition(self) -> str:
        return str(self.session.meta.get("condition", ""))

    def windows(self, L, overlap=0.5):
        wins = baselines.tile_windows(self.Y.n_frames, window_frames(L), overlap)
        c = np.concatenate([[0], np.cumsum(self.active)])
        return [(s, e) for s, e in wins if c[e] > c[s]]

    def steering(self, grid, band):
        if self.mics is None:
            raise InvalidInputError(f"session {self.session.session_id} lacks microphone positions")
        # sessions share one array, so the large tables are kept once per geometry
        key = (self.mics.tobytes(), id(grid), len(grid.directions), band, self.Y.frame_len, self.Y.sample_rate)
        hit = _STEER_CACHE.get(key)
        if hit is None or hit[0] is not grid:
            if len(_STEER_CACHE) >= _STEER_CACHE_SIZE:
                _STEER_CACHE.pop(next(iter(_STEER_CACHE)))
            hit = (grid, baselines.steering_for(self.Y, self.mics, grid, band))
            _STEER_CACHE[key] = hit
        return hit[1]

    def estimates(self, method, windows, grid, params=None, features=None):
        """Sensor-frame direction at each window's centre frame."""
        if method == "srp-phat":
            est = baselines.srp_phat(self.Y, self.steering(grid, baselines.SRP_BAND), grid, windows)
            return [e.direction for e in est]
        if method == "lsdd":
            st = self.steering(grid, baselines.LSDD_BAND)
            if self._lsdd is None:
                self._lsdd = baselines.lsdd_frame_costs(self.Y, st)
            est = baselines.lsdd(self.Y, st, grid, windows, frame_costs=self._lsdd)
            return [None if e.index < 0 else e.direction for e in est]
        if method == "csl":
            if params is None:
                raise InvalidInputError("C-SL evaluation needs model parameters")
            if self._csl is None:
                data = csl.prepare_interval(self.session, **(features or {}))
                self._csl = (data, csl.frame_sums(params, data))
            data, sums = self._csl
            return [d.center_sensor for d in csl.infer(params, data, windows, sums)]
        raise InvalidInputError(f"unknown method {method!r}; expected one of {METHODS}")


def window_sweep(method: str, sessions, window_lengths=WINDOW_LENGTHS, grid: SphericalGrid | None = None,
                 params: nn.MlpParams | None = None, features: dict | None = None,
                 condition: str | None = None, overlap: float = 0.5, caches=None) -> WindowSweepReport:
    """Mean angular error of one method over moving windows of each length.

    Windows tile each session with ``overlap``; windows without any selected
    bin (silence) are skipped for every method alike. The truth of a window is
    the sensor-frame source direction at its centre frame.
    """
    methods = METHODS if method == "all" else (method,)
    for m in methods:
        if m not in METHODS:
            raise InvalidInputError(f"unknown method {m!r}; expected one of {METHODS}")
    grid = grid or default_grid()
    caches = caches if caches is not None else [_SessionCache(s) for s in sessions]
    report = WindowSweepReport()
    for m in methods:
        if m == "csl" and params is None:
            continue
        for L in window_lengths:
            lab = window_label(L)
            errs = []
            for c in caches:
                wins = c.windows(L, overlap)
                if not wins:
                    continue
                for (s, e), est in zip(wins, c.estimates(m, wins, grid, params, features)):
                    if est is None:
                        continue
                    truth = c.truth_sensor[(s + e - 1) // 2, 0]
                    err = angular_error(est, truth)
                    errs.append(err)
                    report.records.append(WindowRecord(m, c.session.session_id, f"{s}:{e}", lab, err))
            if not errs:
                continue
            mu, ci = mean_ci(errs)
            cond = condition if condition is not None else (caches[0].condition if caches else "")
            report.rows.append(SweepRow(m, cond, lab, mu, ci, len(errs)))
    return report


def session_caches(sessions) -> list:
    return [_SessionCache(s) for s in sessions]


# ---------------------------------------------------------------------------
# confidence analysis


@dataclass
class ConfidenceReport:
    edges: np.ndarray  # quantile bin edges of the confidence
    mean_error: np.ndarray  # per bin, degrees
    counts: np.ndarray
    high_confidence: list = field(default_factory=list)  # (session, k, n, confidence) above the 95th percentile

    def nonincreasing_fraction(self) -> float:
        return nonincreasing_fraction(self.mean_error)


def nonincreasing_fraction(values) -> float:
    v = np.asarray(values, dtype=float)
    if len(v) < 2:
        return 1.0
    return float(np.mean(np.diff(v) <= 0))


def confidence_curve(confidence, errors, n_bins: int = 20):
    """Mean error per confidence quantile bin ``(edges, mean_error, counts)``.

    Duplicate quantile edges are merged, so constant confidences give a single bin.
    """
    conf = np.asarray(confidence, dtype=float)
    err = np.asarray(errors, dtype=float)
    if conf.shape != err.shape or conf.ndim != 1 or len(conf) == 0:
        raise InvalidInputError("confidence and error must be equal-length non-empty vectors")
    edges = np.unique(np.quantile(conf, np.linspace(0.0, 1.0, n_bins + 1)))
    if len(edges) == 1:
        return edges, np.array([err.mean()]), np.array([len(err)])
    idx = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, len(edges) - 2)
    counts = np.bincount(idx, minlength=len(edges) - 1)
    sums = np.bincount(idx, weights=err, minlength=len(edges) - 1)
    keep = counts > 0
    mean = np.full(len(counts), np.nan)
    mean[keep] = sums[keep] / counts[keep]
    return edges, mean, counts


def confidence_analysis(params: nn.MlpParams, sessions, n_bins: int = 20, features: dict | None = None,
                        high_quantile: float = 0.95) -> ConfidenceReport:
    """Per-bin error of the normalised raw prediction against the sensor-frame
    truth, binned by the prediction norm."""
    confs, errs, keys = [], [], []
    for s in sessions:
        data = csl.prepare_interval(s, **(features or {}))
        rs, _ = csl.interval_predictions(params, data)
        truth = np.einsum("nji,j->ni", data.rotations[data.n], data.truth[0])
        c = np.linalg.norm(rs, axis=1)
        cos = np.sum(rs * truth, axis=1) / np.where(c > 0, c, 1.0)
        confs.append(c)
        errs.append(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
        keys.append((s.session_id, data.k, data.n))
    conf = np.concatenate(confs)
    edges, mean, counts = confidence_curve(conf, np.concatenate(errs), n_bins)
    thr = np.quantile(conf, high_quantile)
    dump = []
    for (sid, k, n), c in zip(keys, confs):
        for i in np.flatnonzero(c > thr):
            dump.append((sid, int(k[i]), int(n[i]), float(c[i])))
    return ConfidenceReport(edges, mean, counts, dump)


# ---------------------------------------------------------------------------
# KDE on the sphere


@dataclass
class KdeConfig:
    bandwidth_deg: float = 1.0
    n_src: int = 2
    cutoff: float = 15.0  # kernel truncated at cutoff * bandwidth (e^-15 ~ 3e-7)

    def __post_init__(self):
        if self.bandwidth_deg <= 0 or self.n_src < 1 or self.cutoff <= 0:
            raise InvalidInputError("KDE needs bandwidth > 0, n_src >= 1 and cutoff > 0")


@dataclass
class KdePeaks:
    indices: np.ndarray
    directions: np.ndarray  # (P, 3) in the frame of the input vectors
    psi: np.ndarray
    n_requested: int

    @property
    def short(self) -> bool:
        """Fewer peaks than requested."""
        return len(self.indices) < self.n_requested


def kde_density(vectors, grid: SphericalGrid, cfg: KdeConfig | None = None, frames=None,
                n_frames: int | None = None, chunk: int = 4096) -> np.ndarray:
    """``psi_j = sum_b |r_b| exp(-angle(g_j, r_b) / bandwidth)`` on the grid.

    With ``frames`` (one per vector) the result is per frame ``(n_frames, J)``,
    so window densities are sums over frames. Contributions beyond
    ``cutoff * bandwidth`` degrees are dropped.
    """
    cfg = cfg or KdeConfig()
    v = np.asarray(vectors, dtype=float)
    w = np.linalg.norm(v, axis=1)
    live = w > 0
    J = len(grid.directions)
    if frames is None:
        f = np.zeros(len(v), dtype=np.int64)
        n_out = 1
    else:
        f = np.asarray(frames, dtype=np.int64)
        n_out = int(n_frames if n_frames is not None else (f.max() + 1 if len(f) else 0))
    v, w, f = v[live], w[live], f[live]
    u = v / w[:, None]
    max_deg = min(cfg.cutoff * cfg.bandwidth_deg, 180.0)
    chord = 2.0 * np.sin(np.radians(max_deg) / 2.0) + 1e-12
    psi = np.zeros(n_out * J)
    for s in range(0, len(u), chunk):
        tree = cKDTree(u[s:s + chunk])
        pairs = tree.sparse_distance_matrix(grid.tree, chord, output_type="ndarray")
        if len(pairs) == 0:
            continue
        b = pairs["i"] + s
        ang = np.degrees(2.0 * np.arcsin(np.clip(pairs["v"] / 2.0, 0.0, 1.0)))
        psi += np.bincount(f[b] * J + pairs["j"], weights=w[b] * np.exp(-ang / cfg.bandwidth_deg),
                           minlength=n_out * J)
    psi = psi.reshape(n_out, J)
    return psi[0] if frames is None else psi


def local_maxima(psi, grid: SphericalGrid) -> np.ndarray:
    """Grid indices whose density is at least every neighbour's; equal
    neighbours go to the lower index. Zero-density points never count."""
    psi = np.asarray(psi, dtype=float)
    owner, other = _adjacency_pairs(grid)
    beats = (psi[owner] > psi[other]) | ((psi[owner] == psi[other]) & (owner < other))
    losses = np.bincount(owner[~beats], minlength=len(psi))
    return np.flatnonzero((losses == 0) & (psi > 0))


def _adjacency_pairs(grid: SphericalGrid):
    key = id(grid.neighbors)
    hit = _GRID_CACHE.get(("adj", key))
    if hit is None or hit[0] is not grid.neighbors:
        lens = np.array([len(n) for n in grid.neighbors])
        owner = np.repeat(np.arange(len(grid.neighbors)), lens)
        other = np.concatenate(grid.neighbors).astype(np.int64)
        hit = (grid.neighbors, owner, other)
        _GRID_CACHE[("adj", key)] = hit
    return hit[1], hit[2]


def kde_peaks(psi, grid: SphericalGrid, n_src: int) -> KdePeaks:
    """The ``n_src`` densest local maxima, densest first (ties: lower index)."""
    psi = np.asarray(psi, dtype=float)
    m = local_maxima(psi, grid)
    order = np.lexsort((m, -psi[m]))[:n_src]
    sel = m[order]
    return KdePeaks(sel, grid.directions[sel], psi[sel], n_src)


def kde_multi_source(world_vectors, cfg: KdeConfig | None = None, grid: SphericalGrid | None = None) -> KdePeaks:
    cfg = cfg or KdeConfig()
    grid = grid or default_grid()
    v = np.asarray(world_vectors, dtype=float)
    if len(v) == 0:
        raise InvalidInputError("no predictions in the window")
    return kde_peaks(kde_density(v, grid, cfg), grid, cfg.n_src)


def weighted_chamfer(pred_dirs, psi, truth_dirs) -> float:
    """Mean nearest-prediction error over the truth plus the density-weighted
    mean nearest-truth error over the predictions (degrees)."""
    P = np.atleast_2d(np.asarray(pred_dirs, dtype=float))
    T = np.atleast_2d(np.asarray(truth_dirs, dtype=float))
    w = np.atleast_1d(np.asarray(psi, dtype=float))
    if len(P) == 0 or len(T) == 0:
        raise InvalidInputError("both direction sets must be non-empty")
    if len(w) != len(P) or np.any(w < 0):
        raise InvalidInputError("need one non-negative weight per predicted direction")
    if w.sum() <= 0:
        raise InvalidInputError("total prediction weight is zero")
    cos = normalize(T) @ normalize(P).T
    D = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))  # (|T|, |P|)
    return float(D.min(axis=1).mean() + np.sum(w * D.min(axis=0)) / w.sum())


# ---------------------------------------------------------------------------
# two sources


def active_sources(meta: dict, start: int, stop: int, threshold_db: float = PRESENCE_DB) -> np.ndarray:
    """Sources whose dry-signal frame energy in ``[start, stop)`` reaches
    ``threshold_db`` relative to their own session maximum."""
    energies = meta.get("source_frame_energy_db")
    if energies is None:
        raise InvalidInputError("session metadata lacks per-source frame energies")
    out = []
    for i, e in enumerate(energies):
        e = np.asarray(e, dtype=float)
        seg = e[start:min(stop, len(e))]
        out.append(len(seg) > 0 and seg.max() >= e.max() + threshold_db)
    return np.flatnonzero(out)


def two_source_eval(params: nn.MlpParams, sessions, window_lengths=(0.05, 0.2, 0.5, 1.0),
                    cfg: KdeConfig | None = None, grid: SphericalGrid | None = None,
                    features: dict | None = None, overlap: float = 0.5, condition: str | None = None):
    """Weighted Chamfer distance of KDE peaks against the active sources.

    Returns ``(rows, records)`` shaped like :func:`window_sweep` output.
    """
    cfg = cfg or KdeConfig()
    grid = grid or default_grid()
    prepared = []
    for s in sessions:
        data = csl.prepare_interval(s, **(features or {}))
        _, rw = csl.interval_predictions(params, data)
        dens = kde_density(rw, grid, cfg, frames=data.n, n_frames=data.n_frames)
        cum = np.vstack([np.zeros((1, dens.shape[1])), np.cumsum(dens, axis=0)])
        cnt = np.concatenate([[0], np.cumsum(np.bincount(data.n, minlength=data.n_frames))])
        prepared.append((s, data, cum, cnt))
    rows, records = [], []
    for L in window_lengths:
        lab = window_label(L)
        errs = []
        for s, data, cum, cnt in prepared:
            for a, b in baselines.tile_windows(data.n_frames, window_frames(L), overlap):
                present = active_sources(s.meta, a, b)
                if len(present) == 0 or cnt[b] == cnt[a]:
                    continue
                peaks = kde_peaks(cum[b] - cum[a], grid, cfg.n_src)
                if len(peaks.indices) == 0:
                    continue
                c = (a + b - 1) // 2
                R = data.rotations[c]
                pred = peaks.directions @ R  # world -> sensor at the centre frame
                truth = data.truth[present] @ R
                err = weighted_chamfer(pred, peaks.psi, truth)
                errs.append(err)
                records.append(WindowRecord("csl-kde", s.session_id, f"{a}:{b}", lab, err))
        if errs:
            mu, ci = mean_ci(errs)
            cond = condition if condition is not None else str(sessions[0].meta.get("condition", ""))
            rows.append(SweepRow("csl-kde", cond, lab, mu, ci, len(errs)))
    return rows, records


# ---------------------------------------------------------------------------
# report files


def _fmt(x) -> str:
    return f"{x:.6f}" if isinstance(x, float) else str(x)


def write_rows_csv(path, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "condition", "L_win", "mean_deg", "ci_deg", "n"])
        for r in rows:
            w.writerow([r.method, r.condition, r.L_win, _fmt(r.mean_deg), _fmt(r.ci_deg), r.n])
    return path


def write_records_csv(path, records) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "session", "L_win", "window", "error_deg"])
        for r in records:
            w.writerow([r.method, r.session, r.L_win, r.window, _fmt(r.error_deg)])
    return path


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def enc(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if hasattr(o, "__dataclass_fields__"):
            return asdict(o)
        raise TypeError(type(o))

    path.write_text(json.dumps(obj, default=enc, indent=1, sort_keys=True))
    return path


def write_confidence_csv(path, report: ConfidenceReport) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "lo", "hi", "mean_error_deg", "count"])
        for i, (m, c) in enumerate(zip(report.mean_error, report.counts)):
            hi = report.edges[min(i + 1, len(report.edges) - 1)]
            w.writerow([i, _fmt(float(report.edges[i])), _fmt(float(hi)), _fmt(float(m)), int(c)])
    return path


def write_overlay_csv(path, entries) -> Path:
    """High-confidence bins as ``session, k, n, confidence``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["session", "k", "n", "confidence"])
        for sid, k, n, c in entries:
            w.writerow([sid, k, n, _fmt(float(c))])
    return path


def write_density_csv(path, psi) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    psi = np.asarray(psi, dtype=float)
    with np.errstate(divide="ignore"):
        logp = np.log(psi)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["grid_index", "log_psi"])
        for j, v in enumerate(logp):
            w.writerow([j, _fmt(float(v))])
    return path
