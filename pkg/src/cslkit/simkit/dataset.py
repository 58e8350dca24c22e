"""Dataset generation and the on-disk session layout.

Layout::

    <root>/manifest.json
    <root>/<session_id>/audio.wav       M-channel float32 PCM
    <root>/<session_id>/rotations.csv   n, r00 .. r22 (row-major)
    <root>/<session_id>/meta.json
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .. import dsp
from ..errors import InvalidInputError
from ..geometry import random_rotation, random_unit_vectors
from .render import (
    DEFAULT_BLOCK_FRAMES,
    ArraySpec,
    MotionTrajectory,
    SessionData,
    add_white_noise,
    frame_energy_db,
    render_source,
)
from .rir import RoomSpec
from .speech import list_wavs, load_wav_source, synth_speech

CONDITIONS = {"anechoic": 0.0, "t250": 0.25, "t500": 0.5, "t750": 0.75, "mixed": None}
MIXED_T60_RANGE = (0.0, 0.75)
SPLITS = ("train", "val", "test")
MANIFEST = "manifest.json"


def condition_t60(condition: str, rng: np.random.Generator) -> float:
    if condition not in CONDITIONS:
        raise InvalidInputError(f"unknown condition {condition!r}")
    t60 = CONDITIONS[condition]
    if t60 is None:
        t60 = float(rng.uniform(*MIXED_T60_RANGE))
    return t60


def assign_splits(n_sessions: int, fractions, seed: int) -> list[str]:
    fr = np.asarray(fractions, dtype=float)
    if len(fr) != 3 or np.any(fr < 0) or fr.sum() <= 0:
        raise InvalidInputError("split fractions must be three non-negative numbers")
    fr = fr / fr.sum()
    counts = np.floor(fr * n_sessions).astype(int)
    counts[0] += n_sessions - counts.sum()
    labels = np.repeat(np.array(SPLITS), counts)
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n_sessions)
    return [str(labels[p]) for p in perm]


def make_session(index: int, condition: str, seed: int, n_sources: int = 1, split: str = "train",
                 duration_range=(2.5, 3.5), block_frames: int = DEFAULT_BLOCK_FRAMES,
                 snr_db: float | None = None, wav_files=None, room_dims=(4.0, 4.0, 4.0),
                 distance: float = 1.0, angular_speed: float = np.pi / 2,
                 array: ArraySpec | None = None) -> SessionData:
    """Render session ``index``; everything is drawn from ``SeedSequence([seed, index])``."""
    rng = np.random.default_rng([seed, index])
    array = array or ArraySpec.cube()
    t60 = condition_t60(condition, rng)
    room = RoomSpec(room_dims, t60)
    q0, axis = random_rotation(rng)
    motion = MotionTrajectory(q0, axis, angular_speed)
    dirs, signals, kinds = [], [], []
    for _ in range(n_sources):
        dirs.append(random_unit_vectors(rng))
        if wav_files:
            src = load_wav_source(wav_files[int(rng.integers(len(wav_files)))])
        else:
            src = synth_speech(float(rng.uniform(*duration_range)), rng.integers(2**63))
        signals.append(src.samples)
        kinds.append(src.kind)
    render_seed = rng.integers(2**63)
    n = max(len(x) for x in signals)
    audio = np.zeros((array.M, n))
    energies = []
    for d, x in zip(dirs, signals):
        x = np.pad(x, (0, n - len(x)))
        pos = room.center + distance * d
        audio += render_source(x, room, array, motion, pos, np.random.default_rng([render_seed, len(energies)]),
                               block_frames)
        energies.append(np.round(frame_energy_db(x), 3).tolist())
    if snr_db is not None:
        audio = add_white_noise(audio, snr_db, np.random.default_rng([render_seed, 99]))
    nf = dsp.n_frames(n)
    meta = {
        "session_id": f"s{index:05d}",
        "index": index,
        "split": split,
        "seed": seed,
        "condition": condition,
        "t60": t60,
        "n_sources": n_sources,
        "truth_world_dirs": [list(map(float, d)) for d in dirs],
        "motion": {
            "initial_orientation": list(map(float, q0)),
            "axis": list(map(float, motion.axis)),
            "angular_speed": float(angular_speed),
            "frame_hop": motion.frame_hop,
        },
        "room": list(room.dimensions),
        "distance": distance,
        "block_frames": block_frames,
        "snr_db": snr_db,
        "fs": dsp.FS,
        "n_frames": nf,
        "source_kind": kinds,
        "mic_positions": array.mic_positions.tolist(),
        "source_frame_energy_db": energies,
    }
    return SessionData(audio.astype(np.float32), motion.rotations(nf), np.array(dirs), t60,
                       meta["session_id"], split, dsp.FS, meta)


def save_session(session: SessionData, root) -> Path:
    d = Path(root) / session.session_id
    d.mkdir(parents=True, exist_ok=True)
    wavfile.write(d / "audio.wav", session.fs, np.ascontiguousarray(session.audio.T.astype(np.float32)))
    with open(d / "rotations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n"] + [f"r{i}{j}" for i in range(3) for j in range(3)])
        for n, R in enumerate(session.rotations):
            w.writerow([n] + [repr(float(v)) for v in R.ravel()])
    with open(d / "meta.json", "w") as fh:
        json.dump(session.meta, fh, indent=1, sort_keys=True)
    return d


def load_session(path) -> SessionData:
    d = Path(path)
    fs, audio = wavfile.read(d / "audio.wav")
    with open(d / "rotations.csv") as fh:
        rows = list(csv.reader(fh))[1:]
    rotations = np.array([[float(v) for v in r[1:]] for r in rows]).reshape(-1, 3, 3)
    meta = json.loads((d / "meta.json").read_text())
    audio = np.atleast_2d(audio.T)
    return SessionData(audio, rotations, np.array(meta["truth_world_dirs"]), float(meta["t60"]),
                       meta["session_id"], meta["split"], int(fs), meta)


def _worker(args):
    kwargs, out_dir = args
    session = make_session(**kwargs)
    save_session(session, out_dir)
    m = session.meta
    return {"id": m["session_id"], "split": m["split"], "t60": m["t60"],
            "truth_world_dirs": m["truth_world_dirs"], "n_frames": m["n_frames"]}


def gen_dataset(condition: str, n_sessions: int, out_dir, n_sources: int = 1,
                split_fractions=(0.8, 0.1, 0.1), seed: int = 0, workers: int = 1,
                block_frames: int = DEFAULT_BLOCK_FRAMES, snr_db: float | None = None,
                wav_dir=None, duration_range=(2.5, 3.5)) -> dict:
    """Generate and persist ``n_sessions`` sessions; returns the manifest dict."""
    if n_sessions < 1:
        raise InvalidInputError("n_sessions must be >= 1")
    if n_sources not in (1, 2):
        raise InvalidInputError("n_sources must be 1 or 2")
    if condition not in CONDITIONS:
        raise InvalidInputError(f"unknown condition {condition!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"cannot write to {out}")
    wav_files = [str(p) for p in list_wavs(wav_dir)] if wav_dir else None
    splits = assign_splits(n_sessions, split_fractions, seed)
    jobs = [(dict(index=i, condition=condition, seed=seed, n_sources=n_sources, split=splits[i],
                  duration_range=tuple(duration_range), block_frames=block_frames, snr_db=snr_db,
                  wav_files=wav_files), str(out)) for i in range(n_sessions)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            entries = list(ex.map(_worker, jobs))
    else:
        entries = [_worker(j) for j in jobs]
    manifest = {
        "version": 1,
        "condition": condition,
        "n_sources": n_sources,
        "seed": seed,
        "split_fractions": list(map(float, split_fractions)),
        "block_frames": block_frames,
        "snr_db": snr_db,
        "sessions": entries,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    return json.loads(path.read_text())


def session_paths(root, split: str | None = None) -> list[Path]:
    m = load_manifest(root)
    return [Path(root) / s["id"] for s in m["sessions"] if split is None or s["split"] == split]


def load_split(root, split: str | None = None) -> list[SessionData]:
    return [load_session(p) for p in session_paths(root, split)]
