"""Coarse-to-fine recursive depth generation.

Each level owns a noise-predictor MLP sized for its token layout; the
level condition is built by the VCFR fusion from the image features and
the depth state handed down from the previous level (teacher-forced
targets during training, sampled latents during generation).  The finest
level additionally receives the center patch and its 4-neighborhood
context of the upsampled previous latent.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import vcfr
from .core import (DepthMap, ScaleConfig, SchedulePlan, build_schedule_plan, denormalize,
                   downsample_mean, log_normalize, reassemble_patches, split_patches,
                   split_patches_with_context, upsample_bilinear)
from .diffusion import NoiseSchedule, forward_noise, make_linear_schedule, reverse_step
from .errors import ConfigError, NumericsError, ShapeError
from .nnet import (AdamWState, MlpParams, adamw_step, init_mlp, mlp_backward, mlp_forward,
                   time_embed)
from .rng import RngStream


@dataclass
class FractalModel:
    cfg: ScaleConfig
    plan: SchedulePlan
    sched: NoiseSchedule
    conv: vcfr.ConvPyramidParams
    gate_w: np.ndarray          # (L,) fusion gate scales
    gate_b: np.ndarray          # (L,) fusion gate shifts
    mlps: list                  # per-level MlpParams
    feature_dim: int = 16
    time_dim: int = 16
    timestep_reuse: int = 4     # timestep draws per condition per example
    train_features: bool = True
    opt_state: AdamWState = field(default_factory=AdamWState)

    @property
    def n_levels(self) -> int:
        return len(self.plan.levels)

    def cond_dim(self, level: int) -> int:
        base = self.feature_dim + 1
        if level == self.n_levels - 1:
            base += 5 * self.plan.levels[level].token_dim
        return base

    def named_params(self) -> dict:
        out = dict(self.conv.named())
        out["gate_w"] = self.gate_w
        out["gate_b"] = self.gate_b
        for i, mlp in enumerate(self.mlps):
            out.update(mlp.named(f"mlp{i}"))
        return out


def init_model(cfg: ScaleConfig, seed: int = 0, sched: NoiseSchedule = None,
               hidden=(256, 256, 256), feature_dim: int = 16, time_dim: int = 16,
               timestep_reuse: int = 4, train_features: bool = True) -> FractalModel:
    plan = build_schedule_plan(cfg)
    if sched is None:
        sched = make_linear_schedule(100)
    rng = RngStream(seed, ("init",))
    conv = vcfr.init_conv_pyramid(feature_dim, rng.child("conv"))
    mlps = []
    model = FractalModel(cfg=cfg, plan=plan, sched=sched, conv=conv,
                         gate_w=np.ones(len(plan.levels)),
                         gate_b=np.zeros(len(plan.levels)),
                         mlps=mlps, feature_dim=feature_dim, time_dim=time_dim,
                         timestep_reuse=timestep_reuse, train_features=train_features)
    for i, lv in enumerate(plan.levels):
        in_dim = lv.token_dim + time_dim + model.cond_dim(i)
        sizes = [in_dim, *hidden, lv.token_dim]
        # small final layer keeps the initial loss near the unit noise variance
        mlps.append(init_mlp(sizes, rng.child("mlp", i), final_scale=0.01))
    return model


def encode_targets(gt: DepthMap, model: FractalModel) -> list:
    """Scale-wise target latents: block means of the normalized log-depth."""
    res_final = model.cfg.final_resolution
    if gt.values.shape != (res_final, res_final):
        raise ShapeError(f"gt resolution {gt.values.shape} != ({res_final}, {res_final})")
    z_fine = log_normalize(gt, model.cfg)
    return [downsample_mean(z_fine, lv.resolution) for lv in model.plan.levels]


def _level_state(model: FractalModel, level: int, prev_latent) -> np.ndarray:
    res = model.plan.levels[level].resolution
    if level == 0 or prev_latent is None:
        return np.zeros((res, res))
    return upsample_bilinear(prev_latent, res)


def _build_condition(model: FractalModel, feats: list, state: np.ndarray, level: int,
                     want_cache: bool = False):
    lv = model.plan.levels[level]
    out = vcfr.refine_condition(feats[level], state, model.gate_w[level],
                                model.gate_b[level], lv.patch_size, want_cache=want_cache)
    pooled, fuse_cache = out if want_cache else (out, None)
    cond = vcfr.append_guidance_token(pooled, state, model.cfg)
    if level == model.n_levels - 1:
        center, ctx = split_patches_with_context(state, lv.patch_size)
        n = center.shape[0]
        cond = np.concatenate([cond, center.reshape(n, -1), ctx.reshape(n, -1)], axis=1)
    return (cond, fuse_cache) if want_cache else cond


def _predict(model: FractalModel, level: int, z_tokens: np.ndarray, t: int,
             cond: np.ndarray):
    emb = np.broadcast_to(time_embed(float(t), model.time_dim), (z_tokens.shape[0], model.time_dim))
    x = np.concatenate([z_tokens, emb, cond], axis=1)
    return mlp_forward(model.mlps[level], x)


def train_step(model: FractalModel, image: np.ndarray, gt: DepthMap, rng: RngStream,
               lr: float, weight_decay: float = 0.05) -> list:
    """One teacher-forced optimizer step; returns the per-level losses."""
    targets = encode_targets(gt, model)
    feats, feat_cache = vcfr.extract_features(image, model.cfg, model.conv, want_cache=True)
    grads = {name: np.zeros_like(p) for name, p in model.named_params().items()}
    feat_grads = [None] * model.n_levels
    losses = []
    R = model.timestep_reuse
    T = model.sched.T
    for level, lv in enumerate(model.plan.levels):
        state = _level_state(model, level, targets[level - 1] if level > 0 else None)
        cond, fuse_cache = _build_condition(model, feats, state, level, want_cache=True)
        z_star = split_patches(targets[level], lv.patch_size).reshape(lv.token_count, lv.token_dim)
        level_loss = 0.0
        dcond_total = np.zeros_like(cond)
        for r in range(R):
            t = int(rng.integers(1, T + 1, "t", level, r))
            eps = rng.normal(z_star.shape, "eps", level, r)
            z_t = forward_noise(z_star, t, eps, model.sched)
            y, cache = _predict(model, level, z_t, t, cond)
            diff = y - eps
            level_loss += float(np.mean(diff * diff)) / R
            dy = 2.0 * diff / (diff.size * R)
            g = mlp_backward(model.mlps[level], cache, dy)
            for name, gv in g.named(f"mlp{level}").items():
                grads[name] += gv
            dcond_total += g.x[:, lv.token_dim + model.time_dim:]
        losses.append(level_loss)
        if not np.isfinite(level_loss):
            raise NumericsError(f"non-finite loss at level {level}; step rejected")
        # condition gradient: only the pooled feature block trains upstream
        # parameters (guidance and patch context come from fixed targets)
        df, dw, db = vcfr.refine_condition_backward(dcond_total[:, :model.feature_dim], fuse_cache)
        grads[f"gate_w"][level] += dw
        grads[f"gate_b"][level] += db
        feat_grads[level] = df
    if model.train_features:
        conv_grads = vcfr.extract_features_backward(feat_grads, model.cfg, model.conv, feat_cache)
        for name, gv in conv_grads.items():
            grads[name] += gv
    adamw_step(model.named_params(), grads, model.opt_state, lr, weight_decay=weight_decay)
    return losses


@dataclass
class GenerationTrace:
    latents: list      # per-level sampled latent grids, coarse -> fine
    depths: list       # per-level DepthMap decoded at the final resolution
    final: DepthMap


def decode_level_depth(latent: np.ndarray, model: FractalModel, level: int) -> DepthMap:
    if not (0 <= level < model.n_levels):
        raise ConfigError(f"unknown level {level}")
    return denormalize(upsample_bilinear(latent, model.cfg.final_resolution), model.cfg)


def generate(model: FractalModel, image: np.ndarray, rng: RngStream, tau: float = 0.0,
             predictor=None) -> GenerationTrace:
    """Full coarse-to-fine generation pass.

    ``predictor(level, z_tokens, t, cond)`` overrides the trained MLPs when
    given (used by the analytic-noise oracle tests).
    """
    feats = vcfr.extract_features(image, model.cfg, model.conv)
    latents, depths = [], []
    prev = None
    for level, lv in enumerate(model.plan.levels):
        state = _level_state(model, level, prev)
        cond = _build_condition(model, feats, state, level)
        lrng = rng.child("level", level)
        z = lrng.normal((lv.token_count, lv.token_dim), "tokens", "init")
        for t in range(model.sched.T, 0, -1):
            if predictor is not None:
                eps = np.asarray(predictor(level, z, t, cond), dtype=np.float64)
            else:
                eps, _ = _predict(model, level, z, t, cond)
            if eps.shape != z.shape:
                raise ShapeError(f"predictor output {eps.shape} != {z.shape}")
            noise = None
            if tau != 0.0 and model.sched.sigma[t - 1] != 0.0:
                noise = lrng.normal(z.shape, "tokens", t, "step")
            z = reverse_step(z, t, eps, model.sched, tau, noise)
        latent = reassemble_patches(z.reshape(lv.token_count, lv.patch_size, lv.patch_size),
                                    lv.resolution)
        latents.append(latent)
        depths.append(decode_level_depth(latent, model, level))
        prev = latent
    return GenerationTrace(latents=latents, depths=depths, final=depths[-1])


# --- Checkpoint + trace persistence ---------------------------------------

def model_meta(model: FractalModel) -> dict:
    return {
        "levels": [list(l) for l in model.cfg.levels],
        "d_min": model.cfg.d_min,
        "d_max": model.cfg.d_max,
        "T": model.sched.T,
        "beta_start": float(model.sched.beta[0]),
        "beta_end": float(model.sched.beta[-1]),
        "feature_dim": model.feature_dim,
        "time_dim": model.time_dim,
        "timestep_reuse": model.timestep_reuse,
        "hidden": [int(s) for s in model.mlps[0].sizes[1:-1]],
        "level_index": list(range(len(model.plan.levels))),
    }


def save_model(path, model: FractalModel) -> None:
    from .nnet import save_checkpoint
    save_checkpoint(path, model.named_params(), meta=model_meta(model))


def load_model(path) -> FractalModel:
    from .nnet import load_checkpoint
    params, meta = load_checkpoint(path)
    cfg = ScaleConfig(levels=tuple(tuple(l) for l in meta["levels"]),
                      d_min=meta["d_min"], d_max=meta["d_max"])
    sched = make_linear_schedule(meta["T"], meta["beta_start"], meta["beta_end"])
    model = init_model(cfg, sched=sched, hidden=tuple(meta["hidden"]),
                       feature_dim=meta["feature_dim"], time_dim=meta["time_dim"],
                       timestep_reuse=meta["timestep_reuse"])
    for name, p in model.named_params().items():
        p[...] = params[name]
    return model


def save_trace(trace: GenerationTrace, out_dir, manifest: dict) -> None:
    """Per-level PFM latents, final PGM/PFM depth and a key=value manifest."""
    from .imgio import write_depth_pfm, write_pfm, write_pgm16
    os.makedirs(out_dir, exist_ok=True)
    for i, latent in enumerate(trace.latents):
        write_pfm(os.path.join(out_dir, f"latent_level{i}.pfm"), latent)
    write_depth_pfm(os.path.join(out_dir, "depth.pfm"), trace.final)
    write_pgm16(os.path.join(out_dir, "depth.pgm"), trace.final)
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        for k, v in manifest.items():
            f.write(f"{k}={v}\n")
