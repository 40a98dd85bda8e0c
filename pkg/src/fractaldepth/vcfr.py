"""Scale-specific visual-depth conditioning.

A fixed two-layer 3x3 convolutional pyramid (edge-padded, SiLU) produces a
feature map at the finest resolution which is average-pooled down to every
level.  Per level, the features are fused with the current depth state by
a scalar sigmoid gate with a residual path, pooled per token, and extended
with a guidance scalar equal to the mean log-depth of the current state.
All gradients are hand-derived so the extractor and fusion parameters can
be trained jointly with the noise predictors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ScaleConfig, latent_to_log_depth
from .errors import ShapeError
from .nnet import silu, silu_grad
from .rng import RngStream


# --- 3x3 convolution with edge padding ------------------------------------

def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x: (H, W, Cin), w: (3, 3, Cin, Cout), b: (Cout). Edge padding keeps
    constant inputs constant. Returns (pre-activation, windows cache)."""
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    win = sliding_window_view(xp, (3, 3), axis=(0, 1))  # (H, W, Cin, 3, 3)
    a = np.einsum("hwcij,ijcd->hwd", win, w, optimize=True) + b
    return a, win


def conv3x3_backward(grad_a: np.ndarray, win: np.ndarray, w: np.ndarray, x_shape):
    """Gradients of the pre-activation wrt (x, w, b)."""
    dw = np.einsum("hwcij,hwd->ijcd", win, grad_a, optimize=True)
    db = grad_a.sum(axis=(0, 1))
    h, wd, cin = x_shape
    dxp = np.zeros((h + 2, wd + 2, cin))
    for di in range(3):
        for dj in range(3):
            # grad wrt padded x at offset (di, dj) of each window
            dxp[di:di + h, dj:dj + wd] += grad_a @ w[di, dj].T
    # fold edge-replicated borders back onto the interior
    dx = dxp[1:-1, 1:-1].copy()
    dx[0, :] += dxp[0, 1:-1]
    dx[-1, :] += dxp[-1, 1:-1]
    dx[:, 0] += dxp[1:-1, 0]
    dx[:, -1] += dxp[1:-1, -1]
    dx[0, 0] += dxp[0, 0]
    dx[0, -1] += dxp[0, -1]
    dx[-1, 0] += dxp[-1, 0]
    dx[-1, -1] += dxp[-1, -1]
    return dx, dw, db


@dataclass
class ConvPyramidParams:
    w1: np.ndarray  # (3, 3, 3, F)
    b1: np.ndarray
    w2: np.ndarray  # (3, 3, F, F)
    b2: np.ndarray

    def named(self, prefix: str = "conv") -> dict:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


def init_conv_pyramid(feature_dim: int, rng: RngStream) -> ConvPyramidParams:
    def he(shape, fan_in, *ids):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(shape, *ids, low=-bound, high=bound)

    return ConvPyramidParams(
        w1=he((3, 3, 3, feature_dim), 27, "conv", "w1"),
        b1=np.zeros(feature_dim),
        w2=he((3, 3, feature_dim, feature_dim), 9 * feature_dim, "conv", "w2"),
        b2=np.zeros(feature_dim),
    )


def _pool_to(x: np.ndarray, res: int) -> np.ndarray:
    h = x.shape[0]
    b = h // res
    return x.reshape(res, b, res, b, -1).mean(axis=(1, 3))


def extract_features(image: np.ndarray, cfg: ScaleConfig, params: ConvPyramidParams,
                     want_cache: bool = False):
    """Per-level feature grids from an (H, W, 3) image in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    res_final = cfg.final_resolution
    if image.shape != (res_final, res_final, 3):
        raise ShapeError(f"image shape {image.shape} != ({res_final}, {res_final}, 3)")
    a1, win1 = conv3x3_forward(image, params.w1, params.b1)
    h1 = silu(a1)
    a2, win2 = conv3x3_forward(h1, params.w2, params.b2)
    f = silu(a2)
    feats = [_pool_to(f, res) for res, _ in cfg.levels]
    if not want_cache:
        return feats
    cache = (image, a1, win1, h1, a2, win2, f.shape)
    return feats, cache


def extract_features_backward(grad_feats, cfg: ScaleConfig, params: ConvPyramidParams, cache) -> dict:
    """Accumulate per-level feature-grid gradients into conv parameter grads."""
    image, a1, win1, h1, a2, win2, f_shape = cache
    res_final = cfg.final_resolution
    df = np.zeros(f_shape)
    for (res, _), g in zip(cfg.levels, grad_feats):
        if g is None:
            continue
        b = res_final // res
        # average pooling spreads each output grad uniformly over its block
        df += np.repeat(np.repeat(g, b, axis=0), b, axis=1) / (b * b)
    da2 = df * silu_grad(a2)
    dh1, dw2, db2 = conv3x3_backward(da2, win2, params.w2, h1.shape)
    da1 = dh1 * silu_grad(a1)
    _, dw1, db1 = conv3x3_backward(da1, win1, params.w1, image.shape)
    return {"conv.w1": dw1, "conv.b1": db1, "conv.w2": dw2, "conv.b2": db2}


# --- Gated fusion + token pooling -----------------------------------------

def refine_condition(f: np.ndarray, z: np.ndarray, gate_w: float, gate_b: float,
                     patch: int, want_cache: bool = False):
    """Per-cell gated fusion g = f * sigmoid(w z + b) + f, pooled per token.

    ``f`` is (res, res, F), ``z`` is (res, res); tokens follow the level's
    row-major patch partition.  Returns (n_tokens, F).
    """
    f = np.asarray(f, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if f.shape[:2] != z.shape:
        raise ShapeError(f"feature grid {f.shape[:2]} != depth state {z.shape}")
    res = z.shape[0]
    s = 1.0 / (1.0 + np.exp(-(gate_w * z + gate_b)))
    g = f * (1.0 + s)[:, :, None]
    n = res // patch
    pooled = g.reshape(n, patch, n, patch, -1).mean(axis=(1, 3)).reshape(n * n, -1)
    if not want_cache:
        return pooled
    return pooled, (f, z, s, patch)


def refine_condition_backward(grad_tokens: np.ndarray, cache):
    """Gradients wrt (f, gate_w, gate_b); the depth state is not trained."""
    f, z, s, patch = cache
    res = z.shape[0]
    n = res // patch
    gt = grad_tokens.reshape(n, n, -1)
    dg = np.repeat(np.repeat(gt, patch, axis=0), patch, axis=1) / (patch * patch)
    df = dg * (1.0 + s)[:, :, None]
    ds = (dg * f).sum(axis=2)
    dpre = ds * s * (1.0 - s)
    dw = float((dpre * z).sum())
    db = float(dpre.sum())
    return df, dw, db


def append_guidance_token(cond_tokens: np.ndarray, z: np.ndarray, cfg: ScaleConfig) -> np.ndarray:
    """Append the mean log-depth (ln meters) of the state to every token."""
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise ShapeError("empty depth state grid")
    guidance = float(np.mean(latent_to_log_depth(z, cfg)))
    col = np.full((cond_tokens.shape[0], 1), guidance)
    return np.concatenate([cond_tokens, col], axis=1)
