"""Contrastive sound localisation: loss, training loop, sign resolution, inference.

Each session is one interval during which the source is fixed in the world
frame. The network maps every selected time-frequency bin to a sensor-frame
3-vector; rotating those into the world frame and pooling them over two
time-contiguous halves of the interval gives two centroids whose squared
distance is the training loss.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

from . import dsp
from . import neuralnet as nn
from .errors import ConfigError, InvalidInputError, NumericError
from .geometry import UnitVector3, angular_error

log = logging.getLogger(__name__)

EPS_POOL = 1e-8
SIGN_METHODS = ("mic-pair", "initial-orientation", "oracle")
SIGN_MARGIN = 0.6


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 300
    lr: float = 1e-5
    c1: float = 0.2
    c2: float = 0.8
    seed: int = 0
    eps_pool: float = EPS_POOL
    hidden: tuple = nn.HIDDEN
    gain: bool = False
    max_bins: int | None = None  # per interval and step; None keeps every selected bin
    threshold_db: float = -40.0
    band: tuple = (340.0, 8000.0)
    phase_ref: str = "none"
    sign_method: str = "mic-pair"
    mic_pair: tuple = (4, 0)
    val_max_sessions: int | None = None

    def __post_init__(self):
        if not 0 < self.c1 <= self.c2:
            raise ConfigError("need 0 < c1 <= c2")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.sign_method not in SIGN_METHODS + ("none",):
            raise ConfigError(f"unknown sign method {self.sign_method!r}")
        self.hidden = tuple(int(h) for h in self.hidden)
        self.band = tuple(float(b) for b in self.band)
        self.mic_pair = tuple(int(m) for m in self.mic_pair)


@dataclass
class IntervalData:
    """Cached per-bin features of one interval plus its rotations."""

    features: np.ndarray  # (B, 2M + 1)
    k: np.ndarray
    n: np.ndarray  # frame index per bin
    rotations: np.ndarray  # (n_frames, 3, 3)
    truth: np.ndarray | None = None  # world-frame source direction(s), (S, 3)
    session_id: str = ""
    mic_positions: np.ndarray | None = None
    stft: dsp.StftTensor | None = None

    def __len__(self):
        return len(self.n)

    @property
    def n_frames(self) -> int:
        return len(self.rotations)

    @property
    def frames(self) -> np.ndarray:
        return np.unique(self.n)


@dataclass
class PooledDirection:
    direction: UnitVector3 | None  # world frame, None when degenerate
    sum: np.ndarray
    interval_id: int = 0
    sub_interval: str = "all"  # "1", "2" or "all"
    degenerate: bool = False


@dataclass
class DoaEstimate:
    start: int
    stop: int
    world: np.ndarray | None  # (3,) unit, None when the window has no bins
    sensor: np.ndarray | None  # (stop - start, 3), R_n^T world per frame
    confidence_mass: float
    n_bins: int

    @property
    def empty(self) -> bool:
        return self.world is None

    @property
    def center(self) -> int:
        return (self.start + self.stop - 1) // 2

    @property
    def center_sensor(self) -> np.ndarray | None:
        return None if self.sensor is None else self.sensor[self.center - self.start]


@dataclass
class SignDecision:
    method: str
    flipped: bool
    agree: float  # fraction of votes for the current sign
    n_votes: int
    ambiguous: bool


@dataclass
class TrainResult:
    params: nn.MlpParams
    history: list
    sign: SignDecision | None
    config: TrainConfig


# ---------------------------------------------------------------------------
# data preparation


def prepare_interval(session, threshold_db: float = -40.0, band=(340.0, 8000.0), phase_ref: str = "none",
                     dtype=np.float32, keep_stft: bool = False) -> IntervalData:
    """STFT, bin selection and features of a :class:`SessionData`."""
    Y = dsp.stft(session.audio, session.fs)
    sel = dsp.select_bins(Y, threshold_db, band)
    feats = dsp.extract_features(Y, sel, phase_ref=phase_ref, dtype=dtype)
    mics = session.meta.get("mic_positions") if session.meta else None
    return IntervalData(feats.features, feats.k, feats.n, np.asarray(session.rotations, dtype=float),
                        np.atleast_2d(session.truth_world_dirs), session.session_id,
                        None if mics is None else np.asarray(mics, dtype=float), Y if keep_stft else None)


# ---------------------------------------------------------------------------
# geometry of predictions


def world_transform(pred, rotations, n=None) -> np.ndarray:
    """``r_w = R_n r_s`` for every bin; ``n`` defaults to ``pred.n``."""
    if isinstance(pred, nn.PredictionField):
        n = pred.n if n is None else n
        pred = pred.vectors
    v = np.asarray(pred)
    R = np.asarray(rotations)
    if n is None:
        if len(R) != len(v):
            raise InvalidInputError("need a frame index per bin or one rotation per bin")
        return np.einsum("bij,bj->bi", R, v)
    n = np.asarray(n)
    if len(n) and (n.min() < 0 or n.max() >= len(R)):
        raise InvalidInputError(f"frame index {n.max()} has no rotation ({len(R)} available)")
    return np.einsum("bij,bj->bi", R[n], v)


def centroid(world_vectors, eps: float = EPS_POOL, interval_id: int = 0, sub_interval: str = "all") -> PooledDirection:
    """Normalised vector sum; longer vectors weigh more."""
    v = np.asarray(world_vectors, dtype=float)
    if v.ndim != 2 or len(v) == 0:
        raise InvalidInputError("centroid needs a non-empty set of 3-vectors")
    s = v.sum(axis=0)
    nrm = np.linalg.norm(s)
    if nrm <= eps:
        return PooledDirection(None, s, interval_id, sub_interval, True)
    return PooledDirection(UnitVector3(tuple(s / nrm), "world"), s, interval_id, sub_interval, False)


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossBatch:
    """Bins of several split intervals stacked for one forward pass."""

    features: np.ndarray  # (B, d)
    rotations: np.ndarray  # (B, 3, 3), rotation of each bin's frame
    group: np.ndarray  # 2 * interval + sub-interval (0 or 1)
    n_intervals: int
    session_ids: list = field(default_factory=list)

    @classmethod
    def build(cls, items) -> "LossBatch":
        """``items`` is a sequence of ``(IntervalData, labels)`` or ``(features, rotations_per_bin, labels)``."""
        X, R, G, ids = [], [], [], []
        for i, it in enumerate(items):
            if isinstance(it[0], IntervalData):
                data, labels = it
                X.append(data.features)
                R.append(data.rotations[data.n])
                ids.append(data.session_id)
            else:
                feats, rot, labels = it
                X.append(np.asarray(feats))
                R.append(np.asarray(rot))
                ids.append(str(i))
            labels = np.asarray(labels, dtype=np.int64)
            if labels.min(initial=0) < 0 or labels.max(initial=0) > 1:
                raise InvalidInputError("sub-interval labels must be 0 or 1")
            G.append(2 * i + labels)
        return cls(np.concatenate(X), np.concatenate(R), np.concatenate(G), len(items), ids)


def _group_sums(vectors, group, n_groups):
    # bincount keeps a fixed summation order, unlike np.add.at on some builds
    return np.stack([np.bincount(group, weights=vectors[:, j], minlength=n_groups) for j in range(3)], axis=1)


def sub_contrastive_loss(batch: LossBatch, params: nn.MlpParams, eps: float = EPS_POOL, grad: bool = True):
    """``sum_i |c_i1 - c_i2|^2`` over intervals with two non-degenerate centroids.

    Returns ``(loss, grads, info)``; ``grads`` is ``None`` when ``grad`` is false
    or every interval is degenerate. ``info`` carries per-interval losses and the
    validity mask.
    """
    pred, cache = nn.forward(params, batch.features, keep_cache=grad)
    rs = pred.vectors.astype(float)
    rw = np.einsum("bij,bj->bi", batch.rotations, rs)
    G = 2 * batch.n_intervals
    S = _group_sums(rw, batch.group, G)
    norms = np.linalg.norm(S, axis=1)
    ok = norms > eps
    valid = ok[0::2] & ok[1::2]
    if not valid.all():
        log.warning("dropping %d degenerate interval(s) from the loss", int((~valid).sum()))
    C = S / np.where(ok, norms, 1.0)[:, None]
    diff = C[0::2] - C[1::2]
    per = np.where(valid, np.sum(diff ** 2, axis=1), 0.0)
    loss = float(per.sum())
    info = {"per_interval": per, "valid": valid}
    if not grad or not valid.any():
        return loss, None, info
    dC = np.zeros_like(C)
    dC[0::2] = 2.0 * diff * valid[:, None]
    dC[1::2] = -dC[0::2]
    # d(s/|s|)/ds = (I - c c^T) / |s|
    dS = (dC - C * np.sum(C * dC, axis=1, keepdims=True)) / np.where(ok, norms, 1.0)[:, None]
    drw = dS[batch.group]
    drs = np.einsum("bji,bj->bi", batch.rotations, drw)
    grads = nn.backward(params, cache, drs)
    return loss, grads, info


def full_contrastive_loss(world_vectors) -> float:
    """``sum over unordered bin pairs |r_a - r_b|^2`` within one interval (quadratic cost)."""
    v = np.asarray(world_vectors, dtype=float)
    if len(v) < 2:
        return 0.0
    return float(np.sum(pdist(v, "sqeuclidean")))


# ---------------------------------------------------------------------------
# training


def _draw_split_batch(data: IntervalData, rng, cfg: TrainConfig):
    idx = np.arange(len(data))
    if cfg.max_bins is not None and len(idx) > cfg.max_bins:
        idx = np.sort(rng.choice(len(idx), cfg.max_bins, replace=False))
    n = data.n[idx]
    split = dsp.split_interval(n, rng, cfg.c1, cfg.c2)
    sub = IntervalData(data.features[idx], data.k[idx], n, data.rotations, data.truth, data.session_id)
    return sub, split.labels(n)


def interval_predictions(params: nn.MlpParams, data: IntervalData):
    """Sensor- and world-frame predictions for every bin of ``data``."""
    pred = nn.predict(params, data.features)
    rs = pred.vectors.astype(float)
    return rs, world_transform(rs, data.rotations, data.n)


def pooled_error(params: nn.MlpParams, data: IntervalData, sign_free: bool = True) -> float:
    """Angle (deg) between the all-bin world centroid and the truth.

    With ``sign_free`` the smaller of the errors of ``c`` and ``-c`` is taken,
    since the training loss cannot tell them apart.
    """
    _, rw = interval_predictions(params, data)
    c = centroid(rw)
    if c.degenerate:
        return 90.0
    v = c.direction.xyz
    truth = data.truth[0]
    e = angular_error(v, truth)
    return min(e, 180.0 - e) if sign_free else e


def _dump_batch(path: Path, batch: LossBatch, epoch: int, step: int):
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, features=batch.features, rotations=batch.rotations, group=batch.group,
             session_ids=np.array(batch.session_ids), epoch=epoch, step=step)


def train(train_data, val_data, config: TrainConfig, log_path=None, checkpoint_path=None,
          evidence=None, dump_dir=None, init=None) -> TrainResult:
    """Mini-batch Adam on the sub-contrastive loss.

    ``train_data`` and ``val_data`` are lists of :class:`IntervalData`. Every
    epoch visits the training intervals once in a fresh random order and
    redraws the break points. One JSON line per epoch is appended to
    ``log_path``. After the last epoch the output sign is fixed with
    ``config.sign_method`` using ``evidence`` (default: the validation set).
    """
    cfg = config
    if len(train_data) < cfg.batch_size:
        raise InvalidInputError(f"{len(train_data)} training intervals is fewer than one batch of {cfg.batch_size}")
    rng = np.random.default_rng([cfg.seed, 1])
    d_in = train_data[0].features.shape[1]
    params = init if init is not None else nn.init_params(cfg.seed, d_in, cfg.hidden, gain=cfg.gain)
    state = nn.AdamState.zeros_like(params, lr=cfg.lr)
    val = list(val_data)[: cfg.val_max_sessions] if cfg.val_max_sessions else list(val_data)
    history = []
    fh = open(log_path, "w") if log_path else None
    t0 = time.perf_counter()
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(train_data))
            losses = []
            for step, s in enumerate(range(0, len(order), cfg.batch_size)):
                items = [_draw_split_batch(train_data[i], rng, cfg) for i in order[s:s + cfg.batch_size]]
                batch = LossBatch.build(items)
                try:
                    loss, grads, info = sub_contrastive_loss(batch, params, cfg.eps_pool)
                    finite = np.isfinite(loss) and (grads is None or
                                                    all(np.all(np.isfinite(g)) for g in grads.arrays()))
                except NumericError:
                    finite = False
                if not finite:
                    where = None
                    if dump_dir is not None:
                        where = Path(dump_dir) / f"nonfinite_e{epoch}_s{step}.npz"
                        _dump_batch(where, batch, epoch, step)
                    raise NumericError(f"non-finite loss at epoch {epoch}, step {step}"
                                       + (f"; batch dumped to {where}" if where else ""))
                if grads is None:
                    log.warning("epoch %d step %d: every interval degenerate, batch skipped", epoch, step)
                    continue
                params, state = nn.adam_step(params, grads, state)
                losses.extend(info["per_interval"][info["valid"]].tolist())
            val_err = float(np.mean([pooled_error(params, d) for d in val])) if val else float("nan")
            rec = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"),
                   "val_error_deg": val_err, "wall_time": round(time.perf_counter() - t0, 3)}
            history.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            log.info("epoch %d loss %.5f val %.2f deg", epoch, rec["train_loss"], val_err)
    finally:
        if fh:
            fh.close()
    decision = None
    if cfg.sign_method != "none":
        params, decision = disambiguate_sign(params, cfg.sign_method, evidence if evidence is not None else val,
                                             mic_pair=cfg.mic_pair)
    if checkpoint_path is not None:
        save_trained(checkpoint_path, params, cfg, state, decision, history)
    return TrainResult(params, history, decision, cfg)


def save_trained(path, params, cfg: TrainConfig, state: nn.AdamState | None = None,
                 decision: SignDecision | None = None, history=None):
    meta = {
        "train_config": _jsonable(asdict(cfg)),
        "sign": asdict(decision) if decision else None,
        # wall time stays in the log only, so reruns give identical bytes
        "final": {k: v for k, v in history[-1].items() if k != "wall_time"} if history else None,
    }
    return nn.save_checkpoint(path, params, meta, state)


def _jsonable(d):
    return json.loads(json.dumps(d, default=lambda o: list(o) if isinstance(o, tuple) else str(o)))


# ---------------------------------------------------------------------------
# sign ambiguity


def _mic_pair_votes(params, data: IntervalData, pair, window_frames: int = 10, top_fraction: float = 0.2,
                    c: float = 343.0):
    """Agreement votes between predicted and measured side of the source.

    The delay between the two microphones is measured with GCC-PHAT in short
    windows; bins in the most confident ``top_fraction`` vote on whether the
    prediction points to the same side of the pair's axis.
    """
    if data.stft is None or data.mic_positions is None:
        raise InvalidInputError("mic-pair evidence needs the STFT and microphone positions")
    a, b = pair
    base = data.mic_positions[a] - data.mic_positions[b]
    spacing = np.linalg.norm(base)
    u = base / spacing
    rs, _ = interval_predictions(params, data)
    conf = np.linalg.norm(rs, axis=1)
    strong = conf >= np.quantile(conf, 1.0 - top_fraction)
    side = np.sign(rs @ u)
    votes = []
    max_tau = 1.5 * spacing / c
    for s in range(0, data.n_frames, window_frames):
        in_win = (data.n >= s) & (data.n < s + window_frames) & strong
        if not in_win.any():
            continue
        tau = dsp.gcc_phat_tdoa(data.stft, a, b, frames=slice(s, s + window_frames), max_tau=max_tau)
        # mic b hears a source on mic a's side later
        if abs(tau) < 0.1 * spacing / c:
            continue
        votes.append(side[in_win] == np.sign(tau))
    return np.concatenate(votes) if votes else np.zeros(0, dtype=bool)


def disambiguate_sign(params: nn.MlpParams, method: str, evidence, mic_pair=(4, 0),
                      margin: float = SIGN_MARGIN) -> tuple[nn.MlpParams, SignDecision]:
    """Decide whether ``f`` or ``-f`` is the right mapping and return that one.

    * ``oracle``: pooled world direction vs ground truth (evaluation only).
    * ``initial-orientation``: sessions are assumed recorded with the source
      on the sensor's +x side at frame 0.
    * ``mic-pair``: GCC-PHAT delay sign between two microphones vs the side
      predicted by confident bins.

    A vote share below ``margin`` for either sign leaves ``params`` unchanged
    and flags the decision as ambiguous.
    """
    if method not in SIGN_METHODS:
        raise ConfigError(f"unknown sign method {method!r}")
    votes = []
    for data in evidence:
        if method == "mic-pair":
            votes.append(_mic_pair_votes(params, data, mic_pair))
            continue
        _, rw = interval_predictions(params, data)
        c = centroid(rw)
        if c.degenerate:
            continue
        v = np.asarray(c.direction.xyz)
        if method == "oracle":
            if data.truth is None:
                raise InvalidInputError("oracle sign resolution needs ground truth")
            votes.append(np.array([v @ data.truth[0] > 0]))
        else:
            first = data.rotations[0].T @ v
            votes.append(np.array([first[0] > 0]))
    votes = np.concatenate(votes) if votes else np.zeros(0, dtype=bool)
    if len(votes) == 0:
        log.warning("no usable evidence for sign resolution; keeping the current sign")
        return params, SignDecision(method, False, 0.5, 0, True)
    agree = float(np.mean(votes))
    if max(agree, 1.0 - agree) < margin:
        log.warning("ambiguous sign vote (%.0f%% agree); keeping the current sign", 100 * agree)
        return params, SignDecision(method, False, agree, len(votes), True)
    if agree < 0.5:
        return params.negated(), SignDecision(method, True, agree, len(votes), False)
    return params, SignDecision(method, False, agree, len(votes), False)


# ---------------------------------------------------------------------------
# inference


def frame_sums(params: nn.MlpParams, data: IntervalData):
    """Per-frame sums of world predictions ``(N, 3)``, confidence ``(N,)`` and bin counts."""
    rs, rw = interval_predictions(params, data)
    N = data.n_frames
    S = _group_sums(rw, data.n, N)
    conf = np.bincount(data.n, weights=np.linalg.norm(rs, axis=1), minlength=N)
    count = np.bincount(data.n, minlength=N)
    return S, conf, count


def infer(params: nn.MlpParams, data: IntervalData, windows=None, sums=None) -> list[DoaEstimate]:
    """Denoised DOA per window: one world centroid over the window's bins,
    rotated back into the sensor frame at every frame of the window."""
    S, conf, count = frame_sums(params, data) if sums is None else sums
    N = data.n_frames
    windows = [(0, N)] if windows is None else windows
    cS = np.vstack([np.zeros((1, 3)), np.cumsum(S, axis=0)])
    cC = np.concatenate([[0.0], np.cumsum(conf)])
    cN = np.concatenate([[0], np.cumsum(count)])
    out = []
    for s, e in windows:
        if not 0 <= s < e <= N:
            raise InvalidInputError(f"window ({s}, {e}) outside 0..{N}")
        nb = int(cN[e] - cN[s])
        total = cS[e] - cS[s]
        nrm = np.linalg.norm(total)
        if nb == 0 or nrm <= EPS_POOL:
            out.append(DoaEstimate(s, e, None, None, float(cC[e] - cC[s]), nb))
            continue
        w = total / nrm
        sensor = np.einsum("nji,j->ni", data.rotations[s:e], w)
        out.append(DoaEstimate(s, e, w, sensor, float(cC[e] - cC[s]), nb))
    return out


def load_model(path) -> tuple[nn.MlpParams, dict]:
    """Checkpoint parameters and header; the saved feature settings live in
    ``header['meta']['train_config']``."""
    params, header = nn.load_checkpoint(path)
    return params, header


def feature_settings(header: dict) -> dict:
    tc = (header.get("meta") or {}).get("train_config") or {}
    return {"threshold_db": tc.get("threshold_db", -40.0), "band": tuple(tc.get("band", (340.0, 8000.0))),
            "phase_ref": tc.get("phase_ref", "none")}


__all__ = [
    "TrainConfig", "IntervalData", "PooledDirection", "DoaEstimate", "SignDecision", "TrainResult", "LossBatch",
    "prepare_interval", "world_transform", "centroid", "sub_contrastive_loss", "full_contrastive_loss", "train",
    "disambiguate_sign", "infer", "frame_sums", "interval_predictions", "pooled_error", "save_trained",
    "load_model", "feature_settings",
]
