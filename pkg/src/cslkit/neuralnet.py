"""MLP mapping from per-bin features to a 3-vector, with hand-written backprop.

Hidden layers apply row-wise unit-norm weights (no learnable gain unless
``gain=True``) followed by ReLU; the output layer is a plain affine map to R^3.
The norm of the output is read as the bin's confidence.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import FeatureTensor
from .errors import InvalidInputError, NumericError

INPUT_DIM = 17
HIDDEN = (1024, 512, 256)
OUTPUT_DIM = 3
OUTPUT_SCALE = 0.1

MAGIC = b"CSLCKPT\x01"
FORMAT_VERSION = 1


@dataclass
class MlpParams:
    weights: list  # hidden layers then output, W_l of shape (out, in)
    biases: list
    gains: list | None = None  # per-row gains of the hidden layers (optional variant)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or len(self.weights) < 1:
            raise InvalidInputError("weights and biases must pair up")
        for W, b in zip(self.weights, self.biases):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise InvalidInputError(f"bad layer shapes {W.shape} / {b.shape}")
        for W0, W1 in zip(self.weights[:-1], self.weights[1:]):
            if W1.shape[1] != W0.shape[0]:
                raise InvalidInputError("consecutive layers do not chain")
        if self.gains is not None and [g.shape for g in self.gains] != [(W.shape[0],) for W in self.weights[:-1]]:
            raise InvalidInputError("one gain per hidden unit is required")

    @property
    def sizes(self) -> tuple:
        return (self.weights[0].shape[1],) + tuple(W.shape[0] for W in self.weights)

    @property
    def dtype(self):
        return self.weights[0].dtype

    def arrays(self) -> list:
        """Flat list of every tensor in a fixed order (weights, biases, gains)."""
        return list(self.weights) + list(self.biases) + (list(self.gains) if self.gains is not None else [])

    @classmethod
    def from_arrays(cls, arrays, n_layers: int, has_gain: bool) -> "MlpParams":
        arrays = list(arrays)
        W, b = arrays[:n_layers], arrays[n_layers:2 * n_layers]
        g = arrays[2 * n_layers:] if has_gain else None
        return cls(W, b, g)

    def map(self, fn) -> "MlpParams":
        return MlpParams.from_arrays([fn(a) for a in self.arrays()], len(self.weights), self.gains is not None)

    def copy(self) -> "MlpParams":
        return self.map(np.array)

    def astype(self, dtype) -> "MlpParams":
        return self.map(lambda a: a.astype(dtype))

    def negated(self) -> "MlpParams":
        """Same network with the output layer sign flipped, so ``f -> -f``."""
        p = self.copy()
        p.weights[-1] = -p.weights[-1]
        p.biases[-1] = -p.biases[-1]
        return p

    @property
    def n_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays()))


@dataclass
class PredictionField:
    """Per-bin output vectors in the sensor frame."""

    vectors: np.ndarray  # (B, 3)
    k: np.ndarray | None = None
    n: np.ndarray | None = None

    @property
    def confidence(self) -> np.ndarray:
        return np.linalg.norm(self.vectors, axis=1)

    def __len__(self):
        return len(self.vectors)


@dataclass
class ForwardCache:
    inputs: list  # input to every layer
    pre: list  # hidden pre-activations z
    w_hat: list  # normalised hidden weights (gain applied)
    row_norms: list
    unit_rows: list  # hidden weights divided by their row norms
    n_layers: int
    has_gain: bool


def init_params(seed=0, input_dim: int = INPUT_DIM, hidden=HIDDEN, output_dim: int = OUTPUT_DIM,
                gain: bool = False, dtype=np.float32) -> MlpParams:
    """He-uniform weights, zero biases, output layer scaled by 0.1."""
    rng = np.random.default_rng(seed)
    sizes = (input_dim,) + tuple(hidden) + (output_dim,)
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / fan_in)
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        if i == len(sizes) - 2:
            W *= OUTPUT_SCALE
        weights.append(W.astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    gains = [np.ones(h, dtype=dtype) for h in hidden] if gain else None
    return MlpParams(weights, biases, gains)


def _check_finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite values in {name}")


def forward(params: MlpParams, features, keep_cache: bool = True):
    """Evaluate the network on a ``(B, d)`` array or a :class:`FeatureTensor`.

    Returns ``(PredictionField, cache)``; ``cache`` is ``None`` when
    ``keep_cache`` is false.
    """
    k = n = None
    if isinstance(features, FeatureTensor):
        k, n = features.k, features.n
        features = features.features
    x = np.asarray(features)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[1]:
        raise InvalidInputError(f"expected features of width {params.weights[0].shape[1]}, got {x.shape}")
    x = x.astype(params.dtype, copy=False)
    _check_finite("input features", x)
    _check_finite("parameters", *params.arrays())

    L = len(params.weights)
    inputs, pre, w_hat, norms, units = [], [], [], [], []
    h = x
    for l in range(L - 1):
        W = params.weights[l]
        nrm = np.linalg.norm(W, axis=1)
        if np.any(nrm == 0):
            # a zero row normalises to zero rather than NaN
            unit = W / np.where(nrm > 0, nrm, 1)[:, None]
        else:
            unit = W / nrm[:, None]
        Wh = unit * params.gains[l][:, None] if params.gains is not None else unit
        z = h @ Wh.T + params.biases[l]
        if keep_cache:
            inputs.append(h)
            pre.append(z)
            w_hat.append(Wh)
            norms.append(nrm)
            units.append(unit)
        h = np.maximum(z, 0)
    out = h @ params.weights[-1].T + params.biases[-1]
    if keep_cache:
        inputs.append(h)
    cache = ForwardCache(inputs, pre, w_hat, norms, units, L, params.gains is not None) if keep_cache else None
    return PredictionField(out, k, n), cache


def backward(params: MlpParams, cache: ForwardCache, upstream) -> MlpParams:
    """Gradients of a scalar loss w.r.t. every parameter given ``dL/d output``."""
    if cache is None:
        raise InvalidInputError("backward needs the cache of a forward call")
    g = np.asarray(upstream, dtype=params.dtype)
    B = cache.inputs[0].shape[0]
    if g.shape != (B, params.weights[-1].shape[0]):
        raise InvalidInputError(f"upstream gradient shape {g.shape} does not match output ({B}, "
                                f"{params.weights[-1].shape[0]})")
    L = cache.n_layers
    dW = [None] * L
    db = [None] * L
    dg = [None] * (L - 1) if cache.has_gain else None

    dW[-1] = g.T @ cache.inputs[-1]
    db[-1] = g.sum(axis=0)
    dh = g @ params.weights[-1]
    for l in range(L - 2, -1, -1):
        dz = dh * (cache.pre[l] > 0)  # ReLU subgradient 0 at exactly 0
        dWh = dz.T @ cache.inputs[l]
        db[l] = dz.sum(axis=0)
        if l > 0:
            dh = dz @ cache.w_hat[l]
        unit = cache.unit_rows[l]
        nrm = cache.row_norms[l]
        if cache.has_gain:
            dg[l] = np.sum(dWh * unit, axis=1)
            dWh = dWh * params.gains[l][:, None]
        # project out the radial part: d(w/|w|)/dw = (I - u u^T) / |w|
        radial = np.sum(dWh * unit, axis=1, keepdims=True)
        safe = np.where(nrm > 0, nrm, 1)[:, None]
        dW[l] = (dWh - radial * unit) / safe
    return MlpParams(dW, db, dg)


def predict(params: MlpParams, features, batch: int = 65536) -> PredictionField:
    """Forward pass without a cache, chunked to bound memory."""
    k = n = None
    if isinstance(features, FeatureTensor):
        k, n = features.k, features.n
        features = features.features
    x = np.asarray(features)
    outs = [forward(params, x[i:i + batch], keep_cache=False)[0].vectors for i in range(0, len(x), batch)]
    vec = np.concatenate(outs, axis=0) if outs else np.zeros((0, params.weights[-1].shape[0]), params.dtype)
    return PredictionField(vec, k, n)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: MlpParams, lr: float = 1e-5, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> "AdamState":
        arrs = params.arrays()
        return cls([np.zeros_like(a) for a in arrs], [np.zeros_like(a) for a in arrs], 0, lr, beta1, beta2, eps)

    def hyperparameters(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def adam_step(params: MlpParams, grads: MlpParams, state: AdamState) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    P, G = params.arrays(), grads.arrays()
    if len(P) != len(G) or len(P) != len(state.m) or any(p.shape != q.shape for p, q in zip(P, G)):
        raise InvalidInputError("parameter, gradient and optimiser shapes differ")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(P, G, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_p.append((p - step).astype(p.dtype))
        new_m.append(m.astype(p.dtype))
        new_v.append(v.astype(p.dtype))
    out = MlpParams.from_arrays(new_p, len(params.weights), params.gains is not None)
    return out, AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, params: MlpParams, meta: dict | None = None, adam: AdamState | None = None) -> Path:
    """Atomically write magic, a JSON header and little-endian float32 tensors.

    The header records the layer sizes, the gain flag, optimiser
    hyperparameters and step count, plus any caller metadata.
    """
    path = Path(path)
    tensors = params.arrays()
    header = {
        "version": FORMAT_VERSION,
        "sizes": list(params.sizes),
        "gain": params.gains is not None,
        "shapes": [list(a.shape) for a in tensors],
        "adam": (dict(adam.hyperparameters(), step=adam.step) if adam is not None else None),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for a in tensors:
                fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> tuple[MlpParams, dict]:
    """Read a checkpoint written by :func:`save_checkpoint`; returns ``(params, header)``."""
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise InvalidInputError(f"{path} is not a checkpoint (bad magic)")
    (n,) = struct.unpack("<I", raw[len(MAGIC):len(MAGIC) + 4])
    off = len(MAGIC) + 4
    header = json.loads(raw[off:off + n].decode())
    if header.get("version") != FORMAT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {header.get('version')}")
    off += n
    arrays = []
    for shape in header["shapes"]:
        count = int(np.prod(shape))
        a = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        arrays.append(a)
        off += 4 * count
    if off != len(raw):
        raise InvalidInputError(f"{path} has {len(raw) - off} trailing bytes")
    n_layers = len(header["sizes"]) - 1
    params = MlpParams.from_arrays(arrays, n_layers, header["gain"])
    _check_finite("checkpoint", *params.arrays())
    return params, header
