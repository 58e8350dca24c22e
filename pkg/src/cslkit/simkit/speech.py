"""Dry source signals: a speech-like synthesiser and a WAV-directory reader."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

from ..errors import InvalidInputError

FS = 16000


@dataclass
class SourceSignal:
    samples: np.ndarray
    fs: int = FS
    kind: str = "synthetic-speech"

    @property
    def duration(self) -> float:
        return len(self.samples) / self.fs


def _voiced(rng, n, fs):
    # harmonic stack with a wandering pitch contour and -6 dB/octave tilt
    f0_start, f0_end = rng.uniform(80.0, 250.0, size=2)
    wobble = rng.uniform(0.0, 0.15)
    t = np.arange(n) / fs
    f0 = np.linspace(f0_start, f0_end, n) * (1.0 + wobble * np.sin(2 * np.pi * rng.uniform(2, 6) * t))
    phase = 2 * np.pi * np.cumsum(f0) / fs
    out = np.zeros(n)
    n_harm = int(7600 // min(f0_start, f0_end))
    for h in range(1, n_harm + 1):
        amp = 1.0 / h  # -6 dB/octave
        fh = h * f0
        live = fh < 7900.0
        out += np.where(live, amp * np.sin(h * phase + rng.uniform(0, 2 * np.pi)), 0.0)
    # crude formant colouring so the spectrum is not perfectly smooth
    for fc in rng.uniform([300, 900, 2000], [900, 2000, 3500]):
        b, a = signal.iirpeak(fc, Q=4.0, fs=fs)
        out = out + 0.5 * signal.lfilter(b, a, out)
    return out


def _unvoiced(rng, n, fs):
    lo = rng.uniform(2000.0, 3500.0)
    hi = rng.uniform(6000.0, 7900.0)
    sos = signal.butter(4, [lo, hi], btype="bandpass", fs=fs, output="sos")
    return signal.sosfilt(sos, rng.standard_normal(n))


def synth_speech(duration: float, seed, fs: int = FS) -> SourceSignal:
    """Speech surrogate: voiced/unvoiced segments separated by short silences.

    Deterministic for a given ``seed`` (int or SeedSequence-compatible value).
    """
    if not 1.0 <= duration <= 10.0:
        raise InvalidInputError("duration must lie in [1, 10] s")
    rng = np.random.default_rng(seed)
    n_total = int(round(duration * fs))
    out = np.zeros(n_total)
    pos = int(rng.uniform(0.0, 0.05) * fs)
    while pos < n_total:
        if rng.random() < 0.7:
            n = int(rng.uniform(0.12, 0.35) * fs)
            seg = _voiced(rng, n, fs)
        else:
            n = int(rng.uniform(0.05, 0.15) * fs)
            seg = _unvoiced(rng, n, fs)
        n = min(n, n_total - pos)
        seg = seg[:n]
        env = np.ones(n)
        ramp = min(n // 2, int(0.01 * fs))
        if ramp:
            env[:ramp] = np.hanning(2 * ramp)[:ramp]
            env[n - ramp:] = np.hanning(2 * ramp)[ramp:]
        seg = seg / (np.std(seg) + 1e-12) * rng.uniform(0.3, 1.0)
        out[pos:pos + n] = seg * env
        pos += n + int(rng.uniform(0.05, 0.2) * fs)
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= 0.9 / peak
    return SourceSignal(out, fs, "synthetic-speech")


def list_wavs(wav_dir) -> list[Path]:
    files = sorted(Path(wav_dir).rglob("*.wav")) + sorted(Path(wav_dir).rglob("*.WAV"))
    if not files:
        raise InvalidInputError(f"no WAV files found under {wav_dir}")
    return files


def load_wav_source(path, fs: int = FS, max_duration: float = 10.0) -> SourceSignal:
    """Read a mono (or first channel of a multi-channel) WAV, resample to ``fs``."""
    sr, data = wavfile.read(path)
    data = np.asarray(data)
    if data.ndim > 1:
        data = data[:, 0]
    if np.issubdtype(data.dtype, np.integer):
        data = data / float(np.iinfo(data.dtype).max)
    data = data.astype(float)
    if sr != fs:
        g = np.gcd(int(sr), int(fs))
        data = signal.resample_poly(data, fs // g, sr // g)
    data = data[: int(max_duration * fs)]
    if len(data) < fs:
        data = np.pad(data, (0, fs - len(data)))
    peak = np.max(np.abs(data))
    if peak > 0:
        data = data * (0.9 / peak)
    return SourceSignal(data, fs, "wav-file")
