"""Shoebox room impulse responses: image sources plus a diffuse late tail.

The image-source part is complete up to a cut-off distance that depends on the
reflection order; past that point an exponentially decaying noise tail with the
target T60 takes over, the same hybrid that GPU simulators use.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInputError

FS = 16000
SINC_TAPS = 81
MAX_ORDER = 12
_HALF = SINC_TAPS // 2
_LN1000 = np.log(1000.0)


@dataclass(frozen=True)
class RoomSpec:
    dimensions: tuple = (4.0, 4.0, 4.0)
    t60: float = 0.0
    speed_of_sound: float = 343.0

    def __post_init__(self):
        dims = tuple(float(d) for d in self.dimensions)
        if len(dims) != 3 or min(dims) <= 0:
            raise InvalidInputError("room dimensions must be three positive lengths")
        if self.t60 < 0:
            raise InvalidInputError("t60 must be non-negative")
        object.__setattr__(self, "dimensions", dims)

    @property
    def dims(self) -> np.ndarray:
        return np.array(self.dimensions)

    @property
    def center(self) -> np.ndarray:
        return self.dims / 2.0

    @property
    def volume(self) -> float:
        return float(np.prod(self.dims))

    @property
    def surface(self) -> float:
        x, y, z = self.dimensions
        return 2.0 * (x * y + y * z + x * z)

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p > 0) and np.all(p < self.dims))


def reflection_coefficient(room: RoomSpec) -> float:
    """Uniform wall pressure reflection coefficient giving ``room.t60`` (Eyring)."""
    if room.t60 == 0:
        return 0.0
    alpha = 1.0 - np.exp(-0.161 * room.volume / (room.surface * room.t60))
    return float(np.sqrt(1.0 - alpha))


def image_order(room: RoomSpec) -> int:
    """Reflection order from the Sabine reflection rate over one T60, capped."""
    if room.t60 == 0:
        return 0
    mean_free_path = 4.0 * room.volume / room.surface
    n = int(np.ceil(room.speed_of_sound * room.t60 / mean_free_path))
    return int(np.clip(n, 3, MAX_ORDER))


def complete_radius(room: RoomSpec, order: int) -> float:
    """Distance below which the order-limited image set contains every image.

    Any image needing more than ``order`` reflections lies at least
    ``(order - 2) * min(L) / sqrt(3)`` away from every point in the room.
    """
    if order <= 2:
        return 0.0
    return (order - 2) * min(room.dimensions) / np.sqrt(3.0)


def image_sources(room: RoomSpec, source_pos, order: int):
    """Positions ``(I, 3)`` and reflection counts ``(I,)`` of all images up to ``order``."""
    s = np.asarray(source_pos, dtype=float)
    L = room.dims
    u = np.arange(-(order // 2 + 1), order // 2 + 2)
    per_axis = []
    for a in range(3):
        pos, cnt = [], []
        for q in (0, 1):
            pos.append((1 - 2 * q) * s[a] + 2 * u * L[a])
            cnt.append(np.abs(2 * u - q))
        per_axis.append((np.concatenate(pos), np.concatenate(cnt)))
    (px, cx), (py, cy), (pz, cz) = per_axis
    P = np.stack(np.meshgrid(px, py, pz, indexing="ij"), axis=-1).reshape(-1, 3)
    C = (cx[:, None, None] + cy[None, :, None] + cz[None, None, :]).reshape(-1)
    keep = C <= order
    return P[keep], C[keep]


REFLECTION_TAPS = 21


def sinc_taps(delays, half: int = _HALF) -> tuple[np.ndarray, np.ndarray]:
    """Hann-windowed sinc taps ``(I, 2*half+1)`` and their first sample per delay.

    sinc(o + f) = (-1)^o sin(pi f) / (pi (o + f)) and the window cosine splits
    the same way, so only one sin/cos pair is evaluated per delay.
    """
    offs = np.arange(-half, half + 1)
    sign = np.where(offs % 2 == 0, 1.0, -1.0)
    delays = np.asarray(delays, dtype=float)
    centre = np.round(delays)
    f = (centre - delays)[:, None]  # in [-0.5, 0.5]
    x = offs[None, :] + f
    num = sign * (np.sin(np.pi * f) / np.pi)
    taps = np.divide(num, x, where=x != 0, out=np.ones_like(x))
    a = np.pi * f / (half + 1)
    w = np.cos(np.pi * offs / (half + 1)) * np.cos(a)
    w -= np.sin(np.pi * offs / (half + 1)) * np.sin(a)
    w += 1.0
    w *= 0.5
    taps *= w
    return taps, centre.astype(np.int64) - half


def _scatter_sinc(delays, amps, rows, n_rows, length, half=_HALF):
    """Accumulate Hann-windowed sinc fractional delays into ``(n_rows, length)``."""
    out = np.zeros(n_rows * length)
    if len(delays) == 0:
        return out.reshape(n_rows, length)
    taps, first = sinc_taps(delays, half)
    taps *= amps[:, None]
    idx = first[:, None] + np.arange(2 * half + 1)[None, :]
    flat = rows[:, None] * length + idx
    if first.min() < 0 or first.max() + 2 * half >= length:
        ok = (idx >= 0) & (idx < length)
        flat, taps = flat[ok], taps[ok]
    out += np.bincount(flat.ravel(), weights=taps.ravel(), minlength=n_rows * length)
    return out.reshape(n_rows, length)


def early_length(room: RoomSpec, max_dist: float, fs: int = FS) -> int:
    return int(np.ceil(max_dist / room.speed_of_sound * fs)) + _HALF + 2


def early_rirs(room: RoomSpec, images, counts, mic_positions, length: int, fs: int = FS,
               cutoff: float | None = None) -> np.ndarray:
    """Image-source responses ``(M, length)`` for precomputed images.

    Images farther than ``cutoff`` metres are dropped (the diffuse tail covers them).
    """
    mics = np.atleast_2d(np.asarray(mic_positions, dtype=float))
    beta = reflection_coefficient(room)
    d = np.linalg.norm(images[None, :, :] - mics[:, None, :], axis=-1)  # (M, I)
    gain = np.where(counts == 0, 1.0, beta ** counts.astype(float))[None, :] / (4 * np.pi * d)
    keep = (counts[None, :] == 0) | ((gain != 0) & (d < cutoff if cutoff is not None else True))
    rows = np.broadcast_to(np.arange(len(mics))[:, None], d.shape)
    delays = d / room.speed_of_sound * fs
    direct = keep & (counts[None, :] == 0)
    refl = keep & (counts[None, :] > 0)
    # full-length filter for the direct path; reflections use a shorter kernel
    h = _scatter_sinc(delays[direct], gain[direct], rows[direct], len(mics), length)
    h += _scatter_sinc(delays[refl], gain[refl], rows[refl], len(mics), length, REFLECTION_TAPS // 2)
    return h


def tail_start(room: RoomSpec, order: int) -> float:
    """Time (s) where the diffuse tail begins."""
    return complete_radius(room, order) / room.speed_of_sound


def _envelope(room: RoomSpec, t, fs: int = FS):
    # mean image-source energy per sample for an Eyring decay
    return room.speed_of_sound / (4 * np.pi * room.volume * fs) * np.exp(-2 * _LN1000 * t / room.t60)


def tail_gain(room: RoomSpec, order: int, early: np.ndarray, fs: int = FS) -> float:
    """Level match of the tail to the last 20 ms of the early response.

    Grazing image paths decay slower than the Eyring average, so the measured
    early energy near the cut-off is used instead of the analytic envelope.
    """
    stop = int(np.ceil(tail_start(room, order) * fs))
    start = max(0, stop - int(0.02 * fs))
    if stop <= start:
        return 1.0
    t = np.arange(start, stop) / fs
    measured = np.mean(np.asarray(early)[..., start:stop] ** 2)
    return float(np.sqrt(measured / np.mean(_envelope(room, t, fs))))


def diffuse_tail(room: RoomSpec, order: int, rng: np.random.Generator, fs: int = FS,
                 n_channels: int = 1, gain: float = 1.0) -> tuple[int, np.ndarray]:
    """Decaying Gaussian noise from the early cut-off to one T60 beyond it.

    The variance follows ``gain**2 * c / (4 pi V fs) * 10^(-6 t / T60)``.
    Returns ``(start_sample, tail)`` with ``tail`` of shape ``(n_channels, n)``.
    """
    if room.t60 == 0:
        return 0, np.zeros((n_channels, 0))
    start = int(np.ceil(tail_start(room, order) * fs))
    stop = start + int(np.ceil(room.t60 * fs))
    t = np.arange(start, stop) / fs
    std = gain * np.sqrt(_envelope(room, t, fs))
    return start, rng.standard_normal((n_channels, len(t))) * std


def _pair_seed(a, b) -> int:
    key = repr(sorted([tuple(np.round(a, 9)), tuple(np.round(b, 9))])).encode()
    return zlib.crc32(key)


def compute_rir(room: RoomSpec, source_pos, mic_pos, max_order: int | None = None,
                fs: int = FS, tail: bool = True, seed=None) -> np.ndarray:
    """Impulse response from ``source_pos`` to ``mic_pos`` (both in metres).

    With ``room.t60 == 0`` only the fractionally delayed direct path remains.
    The tail noise seed defaults to a symmetric hash of the two positions, so
    swapping source and microphone gives the same response.
    """
    src = np.asarray(source_pos, dtype=float)
    mic = np.asarray(mic_pos, dtype=float)
    if not (room.contains(src) and room.contains(mic)):
        raise InvalidInputError("source and microphone must lie strictly inside the room")
    order = image_order(room) if max_order is None else int(max_order)
    if room.t60 == 0:
        order = 0
    images, counts = image_sources(room, src, order)
    direct = np.linalg.norm(src - mic)
    if order == 0:
        length = early_length(room, direct, fs)
        return early_rirs(room, images, counts, mic, length, fs)[0]
    cutoff = complete_radius(room, order)
    use_tail = tail and cutoff > 0
    early_dist = max(cutoff, direct) if use_tail else np.linalg.norm(images - mic, axis=1).max()
    length = early_length(room, early_dist, fs)
    h = early_rirs(room, images, counts, mic, length, fs, cutoff=cutoff if use_tail else None)[0]
    if not use_tail:
        return h
    rng = np.random.default_rng(_pair_seed(src, mic) if seed is None else seed)
    start, noise = diffuse_tail(room, order, rng, fs, gain=tail_gain(room, order, h, fs))
    out = np.zeros(max(length, start + noise.shape[1]))
    out[:length] += h
    out[start:start + noise.shape[1]] += noise[0]
    return out
