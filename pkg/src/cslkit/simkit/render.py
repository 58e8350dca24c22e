"""Rotating-array rendering of a dry source in a shoebox room."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .. import dsp
from ..errors import InvalidInputError
from ..geometry import axis_angle_to_rotation, normalize, quat_to_rotation
from .rir import (
    RoomSpec,
    complete_radius,
    diffuse_tail,
    early_length,
    early_rirs,
    image_order,
    image_sources,
    tail_gain,
)
from .speech import SourceSignal

DEFAULT_BLOCK_FRAMES = 1


@dataclass(frozen=True)
class ArraySpec:
    mic_positions: np.ndarray  # (M, 3) sensor frame, metres

    def __post_init__(self):
        p = np.asarray(self.mic_positions, dtype=float)
        if p.ndim != 2 or p.shape[1] != 3 or len(p) < 2:
            raise InvalidInputError("an array needs at least two 3-D microphone positions")
        if np.abs(p.mean(axis=0)).max() > 1e-9:
            raise InvalidInputError("microphone centroid must sit at the sensor origin")
        p.setflags(write=False)
        object.__setattr__(self, "mic_positions", p)

    @property
    def M(self) -> int:
        return len(self.mic_positions)

    @property
    def radius(self) -> float:
        return float(np.linalg.norm(self.mic_positions, axis=1).max())

    @classmethod
    def cube(cls, edge: float = 0.05) -> "ArraySpec":
        """Eight microphones on the corners of a cube; mic ``i`` has sign bits
        ``(x, y, z)`` of ``i`` read as a 3-bit number (mic 4 is +x of mic 0)."""
        corners = np.array(list(itertools.product((-1.0, 1.0), repeat=3)))
        return cls(corners * edge / 2.0)


@dataclass(frozen=True)
class MotionTrajectory:
    """Constant-rate rotation about a fixed sensor-frame axis.

    Rotation ``n`` is ``R(q0) @ Rot(axis, omega * n * hop)``; it is the array
    orientation at the centre of STFT frame ``n``.
    """

    initial_orientation: np.ndarray  # quaternion (w, x, y, z)
    axis: np.ndarray
    angular_speed: float = np.pi / 2
    frame_hop: float = dsp.HOP / dsp.FS

    def __post_init__(self):
        if self.angular_speed < 0:
            raise InvalidInputError("angular speed must be non-negative")
        object.__setattr__(self, "initial_orientation", np.asarray(self.initial_orientation, dtype=float))
        object.__setattr__(self, "axis", normalize(self.axis))

    def orientation(self, tau) -> np.ndarray:
        """Rotation matrices at trajectory times ``tau`` (seconds)."""
        R0 = quat_to_rotation(self.initial_orientation)
        return R0 @ axis_angle_to_rotation(self.axis, self.angular_speed * np.asarray(tau, dtype=float))

    def rotations(self, n_frames: int) -> np.ndarray:
        return self.orientation(np.arange(n_frames) * self.frame_hop)

    @classmethod
    def static(cls, initial_orientation=(1.0, 0.0, 0.0, 0.0)) -> "MotionTrajectory":
        return cls(np.asarray(initial_orientation, dtype=float), np.array([0.0, 0.0, 1.0]), 0.0)


@dataclass
class SessionData:
    audio: np.ndarray  # (M, N)
    rotations: np.ndarray  # (n_frames, 3, 3), sensor -> world
    truth_world_dirs: np.ndarray  # (n_sources, 3)
    t60: float
    session_id: str = ""
    split: str = "train"
    fs: int = dsp.FS
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        nf = dsp.n_frames(self.audio.shape[1])
        if len(self.rotations) != nf:
            raise InvalidInputError(f"{len(self.rotations)} rotations for {nf} STFT frames")

    @property
    def n_frames(self) -> int:
        return len(self.rotations)

    def sensor_truth(self, frames=None) -> np.ndarray:
        """Ground-truth sensor-frame directions ``(n_frames, n_sources, 3)``."""
        R = self.rotations if frames is None else self.rotations[np.asarray(frames)]
        return np.einsum("nji,sj->nsi", R, self.truth_world_dirs)


def _block_weights(n_samples: int, n_blocks: int, block_frames: int, frame_len: int, hop: int):
    """Cross-fade weights ``(n_blocks, n_samples)``; linear ramps one hop wide
    centred on block boundaries, summing to one everywhere."""
    u = (np.arange(n_samples) - frame_len / 2.0) / hop + 0.5  # boundaries at multiples of B
    W = np.empty((n_blocks, n_samples))
    prev = np.zeros(n_samples)
    for b in range(n_blocks):
        if b == n_blocks - 1:
            cur = np.ones(n_samples)
        else:
            cur = np.clip(u - (b + 1) * block_frames + 0.5, 0.0, 1.0)
            cur = 1.0 - cur  # weight of blocks 0..b
        W[b] = cur - prev
        prev = cur
    return W


def render_source(x, room: RoomSpec, array: ArraySpec, motion: MotionTrajectory, source_pos,
                  rng: np.random.Generator, block_frames: int = DEFAULT_BLOCK_FRAMES,
                  fs: int = dsp.FS, frame_len: int = dsp.FRAME_LEN, hop: int = dsp.HOP) -> np.ndarray:
    """Time-varying convolution of ``x`` to every microphone ``(M, len(x))``.

    Early responses are recomputed per block of ``block_frames`` frames at the
    block's centre orientation and cross-faded; the diffuse tail is
    orientation independent and applied as one static convolution.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    nf = dsp.n_frames(n, frame_len, hop)
    if nf == 0:
        raise InvalidInputError("source shorter than one analysis frame")
    centre = room.center
    order = image_order(room)
    images, counts = image_sources(room, source_pos, order)
    cutoff = complete_radius(room, order) if order > 0 else None
    direct = np.linalg.norm(np.asarray(source_pos) - centre)
    reach = (max(cutoff, direct) if cutoff else direct) + array.radius
    Lh = early_length(room, reach, fs)

    static = motion.angular_speed == 0.0 or nf <= block_frames
    n_blocks = 1 if static else int(np.ceil(nf / block_frames))
    starts = np.arange(n_blocks) * block_frames
    sizes = np.minimum(block_frames, nf - starts)
    tau = (starts + (sizes - 1) / 2.0) * motion.frame_hop
    Rb = motion.orientation(tau).reshape(-1, 3, 3)

    out = np.zeros((array.M, n))
    if static:
        mics = centre + array.mic_positions @ Rb[0].T
        H = early_rirs(room, images, counts, mics, Lh, fs, cutoff)
        out += fftconvolve(x[None, :], H, axes=1)[:, :n]
        H_ref = H
    else:
        W = _block_weights(n, n_blocks, block_frames, frame_len, hop)
        for b in range(n_blocks):
            live = np.flatnonzero(W[b] > 0)
            s0, s1 = live[0], live[-1] + 1
            mics = centre + array.mic_positions @ Rb[b].T
            H = early_rirs(room, images, counts, mics, Lh, fs, cutoff)
            start = max(0, s0 - Lh + 1)
            seg = fftconvolve(x[None, start:s1], H, axes=1)
            out[:, s0:s1] += W[b, s0:s1] * seg[:, s0 - start:s1 - start]
        H_ref = early_rirs(room, images, counts, centre[None, :], Lh, fs, cutoff)

    if room.t60 > 0 and cutoff:
        gain = tail_gain(room, order, H_ref, fs)
        t0, tail = diffuse_tail(room, order, rng, fs, n_channels=array.M, gain=gain)
        kernel = np.concatenate([np.zeros((array.M, t0)), tail], axis=1)
        out += fftconvolve(x[None, :], kernel, axes=1)[:, :n]
    return out


def spatialize(source: SourceSignal, room: RoomSpec, array: ArraySpec, motion: MotionTrajectory,
               source_world_dir, seed=None, distance: float = 1.0,
               block_frames: int = DEFAULT_BLOCK_FRAMES, snr_db: float | None = None,
               session_id: str = "", split: str = "train") -> SessionData:
    """Render a single-source session with the array centred in the room."""
    direction = normalize(np.asarray(source_world_dir, dtype=float))
    src_pos = room.center + distance * direction
    if not room.contains(src_pos):
        raise InvalidInputError("source position falls outside the room")
    rng = np.random.default_rng(seed)
    audio = render_source(source.samples, room, array, motion, src_pos, rng, block_frames, source.fs)
    if snr_db is not None:
        audio = add_white_noise(audio, snr_db, rng)
    nf = dsp.n_frames(audio.shape[1])
    return SessionData(
        audio=audio.astype(np.float32),
        rotations=motion.rotations(nf),
        truth_world_dirs=direction[None, :],
        t60=room.t60,
        session_id=session_id,
        split=split,
        fs=source.fs,
    )


def add_white_noise(audio, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    power = np.mean(np.asarray(audio, dtype=float) ** 2)
    sigma = np.sqrt(power / 10.0 ** (snr_db / 10.0))
    return audio + sigma * rng.standard_normal(audio.shape)


def frame_energy_db(x, frame_len: int = dsp.FRAME_LEN, hop: int = dsp.HOP) -> np.ndarray:
    """Per-frame energy of a mono signal in dB (floor at -200 dB)."""
    x = np.asarray(x, dtype=float)
    nf = dsp.n_frames(len(x), frame_len, hop)
    frames = np.lib.stride_tricks.sliding_window_view(x, frame_len)[::hop][:nf]
    e = np.sum(frames ** 2, axis=1)
    return 10.0 * np.log10(np.maximum(e, 1e-20))
