"""Uncertainty-aware robust consensus aggregation.

Stochastic depth samples are first brought into a common affine frame by
minimizing a Charbonnier-smoothed pairwise L1 energy with a quadratic
scale regularizer (IRLS block coordinate descent, shift gauge fixed by
mean(beta) = 0).  Fusion then minimizes, per pixel, a strictly convex
robust energy over the aligned samples plus a weighted recursive
cross-scale consistency term; the minimizer is the consensus depth and
the minimum energy is the uncertainty proxy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DepthMap
from .errors import InputError, ShapeError


@dataclass(frozen=True)
class URCAConfig:
    lam: float = 1.0            # scale-regularizer weight
    gamma: float = 0.5          # recursive-term weight
    level_weights: tuple = None  # w_k, normalized; None -> uniform
    tau_s: float = 0.1          # sample residual normalization (meters)
    tau_r: float = 0.1          # recursive residual normalization (meters)
    delta_stab: float = 1e-6    # stabilizer (meters)
    eps_c: float = 1e-3         # Charbonnier smoothing
    tol: float = 1e-8           # alignment stopping tolerance
    max_iter: int = 100
    z_tol: float = 1e-6         # per-pixel search tolerance

    def __post_init__(self):
        if self.lam <= 0 or self.gamma < 0 or self.tau_s <= 0 or self.tau_r <= 0:
            raise InputError("need lam > 0, gamma >= 0, tau_s > 0, tau_r > 0")
        if self.delta_stab < 0 or self.eps_c <= 0:
            raise InputError("need delta_stab >= 0, eps_c > 0")
        if self.level_weights is not None:
            w = np.asarray(self.level_weights, dtype=np.float64)
            if np.any(w < 0) or not np.isclose(w.sum(), 1.0):
                raise InputError("level weights must be >= 0 and sum to 1")
            object.__setattr__(self, "level_weights", tuple(float(x) for x in w))

    def weights_for(self, k: int) -> np.ndarray:
        if self.level_weights is not None:
            if len(self.level_weights) != k:
                raise InputError(f"{len(self.level_weights)} level weights for {k} levels")
            return np.asarray(self.level_weights)
        return np.full(k, 1.0 / k)


def charbonnier(x, eps_c: float):
    """rho(x) = sqrt(x^2 + eps^2) - eps: even, convex, rho(0) = 0."""
    if eps_c <= 0:
        raise InputError("eps_c must be positive")
    x = np.asarray(x, dtype=np.float64)
    out = np.sqrt(x * x + eps_c * eps_c) - eps_c
    return float(out) if out.ndim == 0 else out


@dataclass
class AlignmentParams:
    alpha: np.ndarray   # (N,) scales
    beta: np.ndarray    # (N,) shifts, gauge mean(beta) = 0
    objective_trace: list = field(default_factory=list)


def _pairwise_objective(stack: np.ndarray, alpha, beta, cfg: URCAConfig) -> float:
    aligned = alpha[:, None] * stack + beta[:, None]
    n = len(alpha)
    total = cfg.lam * float(np.sum((alpha - 1.0) ** 2))
    for a in range(n):
        for b in range(a + 1, n):
            total += float(np.sum(charbonnier(aligned[a] - aligned[b], cfg.eps_c)))
    return total


def align_samples(samples, cfg: URCAConfig = URCAConfig()) -> AlignmentParams:
    """Estimate per-sample affine parameters by IRLS block coordinate descent."""
    if len(samples) < 2:
        raise InputError(f"need at least 2 samples, got {len(samples)}")
    if any(s.values.shape != samples[0].values.shape for s in samples):
        raise ShapeError("samples must share one resolution")
    stack = np.stack([s.values.reshape(-1) for s in samples])
    n = stack.shape[0]
    alpha = np.ones(n)
    beta = np.zeros(n)
    if np.all(stack == stack[0]):
        return AlignmentParams(alpha=alpha, beta=beta,
                               objective_trace=[_pairwise_objective(stack, alpha, beta, cfg)])
    trace = [_pairwise_objective(stack, alpha, beta, cfg)]
    for _ in range(cfg.max_iter):
        for i in range(n):
            # IRLS weights from current residuals majorize the Charbonnier
            # objective, so each 2x2 weighted LS solve cannot increase it
            a_lhs = np.zeros((2, 2))
            a_rhs = np.zeros(2)
            di = stack[i]
            for m in range(n):
                if m == i:
                    continue
                tgt = alpha[m] * stack[m] + beta[m]
                r = alpha[i] * di + beta[i] - tgt
                w = 0.5 / np.sqrt(r * r + cfg.eps_c * cfg.eps_c)
                sw = w.sum()
                swd = (w * di).sum()
                a_lhs += np.array([[(w * di * di).sum(), swd], [swd, sw]])
                a_rhs += np.array([(w * di * tgt).sum(), (w * tgt).sum()])
            a_lhs[0, 0] += cfg.lam
            a_rhs[0] += cfg.lam
            sol = np.linalg.solve(a_lhs, a_rhs)
            alpha[i], beta[i] = sol
        beta -= beta.mean()  # shift gauge; leaves the objective unchanged
        obj = _pairwise_objective(stack, alpha, beta, cfg)
        trace.append(obj)
        if trace[-2] - obj < cfg.tol:
            break
    return AlignmentParams(alpha=alpha, beta=beta, objective_trace=trace)


def apply_affine(sample: DepthMap, alpha: float, beta: float) -> DepthMap:
    if not (np.isfinite(alpha) and np.isfinite(beta)):
        raise InputError("affine parameters must be finite")
    return DepthMap(values=alpha * sample.values + beta,
                    valid_mask=sample.valid_mask.copy())


# --- Per-pixel robust consensus -------------------------------------------

def _energy(z, s, r, w_k, cfg: URCAConfig):
    """E(z) for stacked samples s (N, ...) and recursive values r (K, ...)."""
    cs = cfg.tau_s + cfg.delta_stab
    cr = cfg.tau_r + cfg.delta_stab
    e = charbonnier((s - z) / cs, cfg.eps_c).sum(axis=0)
    if r is not None and len(r) > 0 and cfg.gamma != 0.0:
        rho = charbonnier((r - z) / cr, cfg.eps_c)
        e = e + cfg.gamma * np.tensordot(w_k, rho, axes=(0, 0))
    return e


def _energy_derivs(z, s, r, w_k, cfg: URCAConfig):
    cs = cfg.tau_s + cfg.delta_stab
    cr = cfg.tau_r + cfg.delta_stab
    eps2 = cfg.eps_c * cfg.eps_c

    def d1d2(vals, c, w):
        u = (vals - z) / c
        root = np.sqrt(u * u + eps2)
        d1 = (-(u / root) / c * w).sum(axis=0)
        d2 = ((eps2 / root ** 3) / (c * c) * w).sum(axis=0)
        return d1, d2

    d1, d2 = d1d2(s, cs, np.ones(len(s))[(...,) + (None,) * (s.ndim - 1)])
    if r is not None and len(r) > 0 and cfg.gamma != 0.0:
        wk = cfg.gamma * w_k[(...,) + (None,) * (r.ndim - 1)]
        e1, e2 = d1d2(r, cr, wk)
        d1, d2 = d1 + e1, d2 + e2
    return d1, d2


def _consensus_minimize(s: np.ndarray, r, w_k, cfg: URCAConfig):
    """Vectorized ternary search plus one Newton polish over the last axes."""
    lo = s.min(axis=0).astype(np.float64)
    hi = s.max(axis=0).astype(np.float64)
    if r is not None and len(r) > 0 and cfg.gamma != 0.0:
        lo = np.minimum(lo, r.min(axis=0))
        hi = np.maximum(hi, r.max(axis=0))
    span = float(np.max(hi - lo))
    it = 0
    while span > cfg.z_tol and it < 200:
        m1 = lo + (hi - lo) / 3.0
        m2 = hi - (hi - lo) / 3.0
        e1 = _energy(m1, s, r, w_k, cfg)
        e2 = _energy(m2, s, r, w_k, cfg)
        take_left = e1 <= e2
        hi = np.where(take_left, m2, hi)
        lo = np.where(take_left, lo, m1)
        span = float(np.max(hi - lo))
        it += 1
    z = (lo + hi) / 2.0
    d1, d2 = _energy_derivs(z, s, r, w_k, cfg)
    step = np.where(d2 > 0, d1 / np.where(d2 > 0, d2, 1.0), 0.0)
    z = z - np.clip(step, -cfg.z_tol * 10, cfg.z_tol * 10)
    return z, _energy(z, s, r, w_k, cfg)


def consensus_pixel(s, r=None, cfg: URCAConfig = URCAConfig()):
    """Consensus value M and uncertainty U = E(M) for one pixel."""
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise InputError("need at least one sample value")
    r = None if r is None else np.asarray(r, dtype=np.float64).reshape(-1)
    w_k = cfg.weights_for(len(r)) if r is not None and len(r) else None
    z, u = _consensus_minimize(s, r, w_k, cfg)
    return float(z), float(u)


@dataclass
class ConsensusOutput:
    consensus: DepthMap
    uncertainty: np.ndarray     # per-pixel minimum energy, >= 0
    alignment: AlignmentParams = None


def fuse(samples, trace_depths=None, cfg: URCAConfig = URCAConfig()) -> ConsensusOutput:
    """Align, then run the per-pixel consensus over a full map.

    ``samples`` are DepthMaps from repeated stochastic generation;
    ``trace_depths`` are the per-level decoded maps (coarse -> fine) of one
    generation run, each affine-fitted to the aligned sample mean before
    entering the recursive term.
    """
    if len(samples) == 0:
        raise InputError("need at least one sample")
    shape = samples[0].values.shape
    if any(s.values.shape != shape for s in samples):
        raise ShapeError("sample resolutions differ")
    if len(samples) >= 2:
        align = align_samples(samples, cfg)
        aligned = np.stack([align.alpha[i] * samples[i].values + align.beta[i]
                            for i in range(len(samples))])
    else:
        align = AlignmentParams(alpha=np.ones(1), beta=np.zeros(1))
        aligned = np.stack([samples[0].values])
    r = None
    if trace_depths is not None and len(trace_depths) > 0 and cfg.gamma != 0.0:
        if any(d.values.shape != shape for d in trace_depths):
            raise ShapeError("trace depth resolutions differ from samples")
        ref = aligned.mean(axis=0).reshape(-1)
        fitted = []
        for d in trace_depths:
            x = d.values.reshape(-1)
            a_mat = np.stack([x, np.ones_like(x)], axis=1)
            coef, *_ = np.linalg.lstsq(a_mat, ref, rcond=None)
            fitted.append(coef[0] * d.values + coef[1])
        r = np.stack(fitted)
    w_k = cfg.weights_for(len(r)) if r is not None else None
    m, u = _consensus_minimize(aligned, r, w_k, cfg)
    mask = np.logical_and.reduce([s.valid_mask for s in samples])
    return ConsensusOutput(consensus=DepthMap(values=m, valid_mask=mask),
                           uncertainty=u, alignment=align)


def uncertainty_stats(u_map: np.ndarray, threshold: float = 1.0, bins: int = 64):
    """Fixed-bin histogram over [0, max] and the exceedance fraction."""
    u = np.asarray(u_map, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(u)):
        raise InputError("uncertainty map must be finite")
    top = float(u.max()) if u.size else 0.0
    edges = np.linspace(0.0, top if top > 0 else 1.0, bins + 1)
    hist, _ = np.histogram(u, bins=edges)
    exceedance = float(np.mean(u > threshold)) if u.size else 0.0
    return hist, edges, exceedance
