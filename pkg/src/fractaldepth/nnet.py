"""Noise predictor network with hand-derived gradients, plus optimizer bits.

The predictor is a small fully-connected net (SiLU hidden layers, linear
output).  Backward passes are written out explicitly and validated against
central finite differences; no autodiff framework is involved.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericsError, ShapeError
from .rng import RngStream


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def time_embed(t, dim: int) -> np.ndarray:
    """Interleaved sin/cos features of the timestep.

    Frequencies form a geometric series from 1 down to 1/10000.  ``t`` may
    be a scalar or an array; one embedding row is produced per entry.
    """
    if dim % 2 != 0 or dim < 2:
        raise ConfigError(f"time embedding dim must be even and >= 2, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = 10000.0 ** (-np.arange(half) / (half - 1))
    ang = t[..., None] * freqs
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


@dataclass
class MlpParams:
    """Per-layer weights (in x out) and biases; hidden layers use SiLU."""

    weights: list
    biases: list

    @property
    def sizes(self) -> list:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def named(self, prefix: str) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out


def init_mlp(sizes, rng: RngStream, final_scale: float = 1.0) -> MlpParams:
    """He-style scaled-uniform fan-in initialization."""
    weights, biases = [], []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform((fan_in, fan_out), "w", i, low=-bound, high=bound)
        if i == len(sizes) - 2:
            w = w * final_scale
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MlpParams(weights=weights, biases=biases)


def mlp_forward(params: MlpParams, x: np.ndarray):
    """Returns (output, cache); accepts a vector or a (batch, dim) matrix."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != params.weights[0].shape[0]:
        raise ShapeError(f"input dim {x.shape[1]} != first layer {params.weights[0].shape[0]}")
    inputs, preacts = [], []
    h = x
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        a = h @ w + b
        preacts.append(a)
        h = a if i == n_layers - 1 else silu(a)
    cache = (inputs, preacts, squeeze)
    return (h[0] if squeeze else h), cache


@dataclass
class MlpGrads:
    weights: list
    biases: list
    x: np.ndarray

    def named(self, prefix: str) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out


def mlp_backward(params: MlpParams, cache, grad_out: np.ndarray) -> MlpGrads:
    """Exact reverse-mode gradients for :func:`mlp_forward`."""
    inputs, preacts, squeeze = cache
    g = np.asarray(grad_out, dtype=np.float64)
    if squeeze:
        g = g[None, :]
    if g.shape != preacts[-1].shape:
        raise ShapeError(f"output grad shape {g.shape} != {preacts[-1].shape}")
    n_layers = len(params.weights)
    dws = [None] * n_layers
    dbs = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        if i != n_layers - 1:
            g = g * silu_grad(preacts[i])
        dws[i] = inputs[i].T @ g
        dbs[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return MlpGrads(weights=dws, biases=dbs, x=(g[0] if squeeze else g))


# --- AdamW ----------------------------------------------------------------

@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float,
               betas=(0.9, 0.95), weight_decay: float = 0.05, eps: float = 1e-8) -> None:
    """One decoupled-weight-decay Adam step over a dict of parameter arrays.

    Rejects the whole step (state untouched) if any gradient is non-finite.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for {name!r}; step rejected")
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise ShapeError(f"{name}: param shape {p.shape} != grad shape {g.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        # decoupled decay applied before the moment update
        p *= (1.0 - lr * weight_decay)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 5e-5
    warmup_steps: int = 0
    total_steps: int = 1
    final_lr: float = 5e-7


def lr_at(step: int, sched: LrSchedule) -> float:
    """Linear warmup 0 -> base, then cosine base -> final; clamps past total."""
    if step >= sched.total_steps:
        return sched.final_lr
    if sched.warmup_steps > 0 and step < sched.warmup_steps:
        return sched.base_lr * step / sched.warmup_steps
    span = sched.total_steps - sched.warmup_steps
    frac = (step - sched.warmup_steps) / span
    return sched.final_lr + (sched.base_lr - sched.final_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))


# --- Gradient verification ------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tolerance: float


def grad_check(params: MlpParams, x: np.ndarray, tolerance: float = 1e-4,
               h: float = 1e-5) -> GradCheckReport:
    """Analytic vs central-finite-difference gradients of L = 0.5*||y||^2."""
    x = np.asarray(x, dtype=np.float64)
    y, cache = mlp_forward(params, x)
    grads = mlp_backward(params, cache, y)
    analytic = grads.named("p")
    tensors = params.named("p")
    max_rel = 0.0
    for name, p in tensors.items():
        a = analytic[name]
        flat = p.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            yp, _ = mlp_forward(params, x)
            flat[idx] = orig - h
            ym, _ = mlp_forward(params, x)
            flat[idx] = orig
            num = (0.5 * np.sum(yp * yp) - 0.5 * np.sum(ym * ym)) / (2 * h)
            ana = a.reshape(-1)[idx]
            denom = max(abs(num), abs(ana), 1e-8)
            rel = abs(num - ana) / denom if (num != 0.0 or ana != 0.0) else 0.0
            max_rel = max(max_rel, rel)
    return GradCheckReport(max_rel_error=max_rel, passed=max_rel <= tolerance,
                           tolerance=tolerance)


# --- Checkpoint container -------------------------------------------------

_MAGIC = b"FADN1"


def save_checkpoint(path, named_params: dict, meta: dict = None) -> None:
    """Binary container: magic, JSON manifest, little-endian float64 blobs."""
    manifest = {
        "meta": meta or {},
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in named_params.items()],
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(mbytes)))
        f.write(mbytes)
        for v in named_params.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (named_params, meta); round-trips bit-exactly."""
    with open(path, "rb") as f:
        if f.read(5) != _MAGIC:
            raise ConfigError(f"{path}: bad checkpoint magic")
        (mlen,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        params = {}
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            params[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return params, manifest["meta"]
