"""Synthetic scenes, depth metrics, cost accounting and experiment runners."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, fields

import numpy as np

from .core import DepthMap, ScaleConfig, SchedulePlan, named_scale_config
from .diffusion import make_linear_schedule
from .errors import ConfigError, InputError, ShapeError
from .fractal import (FractalModel, generate, init_model, load_model, save_model,
                      train_step)
from .nnet import LrSchedule, lr_at
from .rng import RngStream
from .urca import URCAConfig, fuse, uncertainty_stats


# --- Scene generation ------------------------------------------------------

@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    resolution: int = 64
    min_objects: int = 2
    max_objects: int = 6
    depth_min: float = 0.5
    depth_max: float = 8.0
    noise: float = 0.02


def _hue_to_rgb(h: float) -> np.ndarray:
    """Fully saturated hue (in [0,1)) to an RGB triple."""
    x = h * 6.0
    r = np.clip(abs(x - 3.0) - 1.0, 0.0, 1.0)
    g = np.clip(2.0 - abs(x - 2.0), 0.0, 1.0)
    b = np.clip(2.0 - abs(x - 4.0), 0.0, 1.0)
    return np.array([r, g, b])


def gen_scene(spec: SceneSpec):
    """Procedural RGB/depth pair: gradient background plus occluding shapes.

    Depth at a pixel is the minimum over covering surfaces (nearer objects
    occlude); brightness is proportional to inverse depth.
    """
    res = spec.resolution
    rng = RngStream(spec.seed, ("scene",))
    g = rng.generator("draws")
    yy, xx = np.meshgrid(np.arange(res), np.arange(res), indexing="ij")
    u, v = xx / max(res - 1, 1), yy / max(res - 1, 1)

    d0, d1 = sorted(g.uniform(spec.depth_min, spec.depth_max, 2))
    theta = g.uniform(0, 2 * math.pi)
    proj = u * math.cos(theta) + v * math.sin(theta)
    # normalize the directional ramp to [0, 1] so depth stays in [d0, d1]
    ramp = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-12)
    depth = d0 + (d1 - d0) * ramp
    hue_map = np.full((res, res), g.uniform(0, 1))

    k = int(g.integers(spec.min_objects, spec.max_objects + 1))
    for _ in range(k):
        od = g.uniform(spec.depth_min, spec.depth_max)
        hue = g.uniform(0, 1)
        cx, cy = g.uniform(0.1, 0.9, 2)
        rx, ry = g.uniform(0.05, 0.3, 2)
        if g.uniform(0, 1) < 0.5:
            inside = (np.abs(u - cx) < rx) & (np.abs(v - cy) < ry)
        else:
            inside = ((u - cx) / rx) ** 2 + ((v - cy) / ry) ** 2 < 1.0
        nearer = inside & (od < depth)
        depth = np.where(nearer, od, depth)
        hue_map = np.where(nearer, hue, hue_map)

    brightness = np.clip(spec.depth_min / depth, 0.0, 1.0)
    image = np.empty((res, res, 3))
    # per-pixel hue -> rgb, vectorized over the three channel formulas
    x6 = hue_map * 6.0
    image[:, :, 0] = np.clip(np.abs(x6 - 3.0) - 1.0, 0.0, 1.0)
    image[:, :, 1] = np.clip(2.0 - np.abs(x6 - 2.0), 0.0, 1.0)
    image[:, :, 2] = np.clip(2.0 - np.abs(x6 - 4.0), 0.0, 1.0)
    image *= brightness[:, :, None]
    if spec.noise > 0:
        image += spec.noise * g.standard_normal(image.shape)
    image = np.clip(image, 0.0, 1.0)
    return image, DepthMap(values=depth)


# --- Metrics ---------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float


def metrics(pred: DepthMap, gt: DepthMap) -> MetricsReport:
    """Standard monocular depth metrics over the joint valid mask."""
    if pred.values.shape != gt.values.shape:
        raise ShapeError(f"resolution mismatch {pred.values.shape} vs {gt.values.shape}")
    mask = pred.valid_mask & gt.valid_mask
    if not mask.any():
        raise InputError("empty valid mask")
    p = pred.values[mask]
    g = gt.values[mask]
    if np.any(g <= 0) or np.any(p <= 0):
        raise InputError("metrics require positive depths on the valid mask")
    thresh = np.maximum(p / g, g / p)
    diff = p - g
    return MetricsReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff * diff / g)),
        rmse=float(np.sqrt(np.mean(diff * diff))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(thresh < 1.25)),
        delta2=float(np.mean(thresh < 1.25 ** 2)),
        delta3=float(np.mean(thresh < 1.25 ** 3)),
    )


# --- Cost accounting -------------------------------------------------------

def cost_report(plan: SchedulePlan) -> dict:
    """Per-level sequence lengths vs a token-wise AR at the finest scale."""
    final_res = plan.levels[-1].resolution
    rows = [{"level": f"g{len(plan.levels) - i}", "resolution": lv.resolution,
             "patch": lv.patch_size, "sequence": lv.token_count,
             "token_dim": lv.token_dim}
            for i, lv in enumerate(plan.levels)]
    return {
        "rows": rows,
        "sequential_stages": len(plan.levels),
        "tokenwise_ar_steps": final_res * final_res,
    }


# --- Run configuration -----------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    scale_config: str = "desk"
    seed: int = 0
    # schedule
    timesteps: int = 60
    beta_start: float = 1e-4
    beta_end: float = 0.12
    # training
    train_scenes: int = 512
    epochs: int = 2
    base_lr: float = 2e-3
    final_lr: float = 1e-5
    warmup_epochs: int = 5
    weight_decay: float = 0.05
    hidden_width: int = 256
    hidden_depth: int = 3
    feature_dim: int = 16
    time_dim: int = 16
    timestep_reuse: int = 4
    val_scenes: int = 8
    val_every: int = 256
    # inference
    n_samples: int = 1
    tau: float = 0.0
    multisample_tau: float = 1.0
    # urca; the scale regularizer must be commensurate with the per-pixel
    # data term (pixels x pairs) or alignment of noisy runs drifts toward
    # the all-constant scale collapse
    urca_lambda: float = 1e5
    urca_gamma: float = 0.5
    urca_tau_s: float = 0.1
    urca_tau_r: float = 0.1
    urca_delta: float = 1e-6
    urca_eps_c: float = 1e-3
    uncertainty_threshold: float = 1.0
    # scenes
    scene_objects_min: int = 2
    scene_objects_max: int = 6
    scene_depth_min: float = 0.5
    scene_depth_max: float = 8.0
    scene_noise: float = 0.02

    def scale(self) -> ScaleConfig:
        return named_scale_config(self.scale_config)

    def schedule(self):
        return make_linear_schedule(self.timesteps, self.beta_start, self.beta_end)

    def urca(self) -> URCAConfig:
        return URCAConfig(lam=self.urca_lambda, gamma=self.urca_gamma,
                          tau_s=self.urca_tau_s, tau_r=self.urca_tau_r,
                          delta_stab=self.urca_delta, eps_c=self.urca_eps_c)

    def scene_spec(self, seed: int) -> SceneSpec:
        return SceneSpec(seed=seed, resolution=self.scale().final_resolution,
                         min_objects=self.scene_objects_min,
                         max_objects=self.scene_objects_max,
                         depth_min=self.scene_depth_min,
                         depth_max=self.scene_depth_max,
                         noise=self.scene_noise)


def load_run_config(path) -> RunConfig:
    """Plain-text key=value config, one entry per line, '#' comments."""
    values = {}
    valid = {f.name: f.type for f in fields(RunConfig)}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            if key not in valid:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            ftype = valid[key]
            if ftype in ("int", int):
                values[key] = int(val)
            elif ftype in ("float", float):
                values[key] = float(val)
            else:
                values[key] = val
    cfg = RunConfig(**values)
    cfg.scale()      # validate eagerly
    cfg.schedule()
    cfg.urca()
    return cfg


def build_model(cfg: RunConfig) -> FractalModel:
    return init_model(cfg.scale(), seed=cfg.seed, sched=cfg.schedule(),
                      hidden=(cfg.hidden_width,) * cfg.hidden_depth,
                      feature_dim=cfg.feature_dim, time_dim=cfg.time_dim,
                      timestep_reuse=cfg.timestep_reuse)


# --- Runners ---------------------------------------------------------------

def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _metrics_row(report: MetricsReport):
    return [f"{report.abs_rel:.6f}", f"{report.sq_rel:.6f}", f"{report.rmse:.6f}",
            f"{report.rmse_log:.6f}", f"{report.delta1:.6f}", f"{report.delta2:.6f}",
            f"{report.delta3:.6f}"]

_METRIC_HEADER = ["abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3"]


def eval_scenes(model: FractalModel, cfg: RunConfig, scene_seeds, tau: float,
                rng: RngStream):
    """Single-sample evaluation; returns (mean MetricsReport, per-scene list)."""
    reports = []
    for s in scene_seeds:
        image, gt = gen_scene(cfg.scene_spec(s))
        trace = generate(model, image, rng.child("eval", s), tau=tau)
        reports.append(metrics(trace.final, gt))
    mean = MetricsReport(*[float(np.mean([getattr(r, f.name) for r in reports]))
                           for f in fields(MetricsReport)])
    return mean, reports


def run_train(cfg: RunConfig, out_dir) -> str:
    """Train on generated scenes; writes checkpoint + loss/validation CSVs."""
    os.makedirs(out_dir, exist_ok=True)
    model = build_model(cfg)
    rng = RngStream(cfg.seed, ("train",))
    steps_per_epoch = cfg.train_scenes
    total = cfg.epochs * steps_per_epoch
    lr_sched = LrSchedule(base_lr=cfg.base_lr,
                          warmup_steps=min(cfg.warmup_epochs * steps_per_epoch, total // 10),
                          total_steps=total, final_lr=cfg.final_lr)
    loss_rows = []
    val_rows = []
    val_seeds = [10_000_000 + i for i in range(cfg.val_scenes)]
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.generator("order", epoch).permutation(cfg.train_scenes)
        for scene_idx in order:
            image, gt = gen_scene(cfg.scene_spec(int(scene_idx)))
            lr = lr_at(step, lr_sched)
            losses = train_step(model, image, gt, rng.child("step", step), lr,
                                weight_decay=cfg.weight_decay)
            loss_rows.append([step, f"{lr:.8f}"] + [f"{l:.6f}" for l in losses])
            step += 1
            if cfg.val_every > 0 and step % cfg.val_every == 0:
                mean, _ = eval_scenes(model, cfg, val_seeds, cfg.tau, rng.child("val", step))
                val_rows.append([step] + _metrics_row(mean))
    ckpt = os.path.join(out_dir, "checkpoint.fadn")
    save_model(ckpt, model)
    n_levels = len(model.plan.levels)
    _write_csv(os.path.join(out_dir, "loss_curve.csv"),
               ["step", "lr"] + [f"loss_level{i}" for i in range(n_levels)], loss_rows)
    _write_csv(os.path.join(out_dir, "validation.csv"), ["step"] + _METRIC_HEADER, val_rows)
    return ckpt


def run_eval(cfg: RunConfig, checkpoint, out_csv, n_scenes: int = 16,
             scene_seed_base: int = 20_000_000, model: FractalModel = None):
    """Held-out single-sample evaluation; writes one CSV row per scene."""
    if model is None:
        model = load_model(checkpoint)
    rng = RngStream(cfg.seed, ("evalrun",))
    seeds = [scene_seed_base + i for i in range(n_scenes)]
    mean, reports = eval_scenes(model, cfg, seeds, cfg.tau, rng)
    rows = [[s] + _metrics_row(r) for s, r in zip(seeds, reports)]
    rows.append(["mean"] + _metrics_row(mean))
    if out_csv:
        _write_csv(out_csv, ["scene"] + _METRIC_HEADER, rows)
    return mean, reports


def multisample_scene(model: FractalModel, cfg: RunConfig, scene_seed: int, n: int,
                      rng: RngStream):
    """N stochastic generations + URCA fusion for one scene.

    Sample k reuses the RNG path ("sample", k) regardless of n, so results
    for smaller N are prefixes of larger-N runs.
    """
    image, gt = gen_scene(cfg.scene_spec(scene_seed))
    srng = rng.child("scene", scene_seed)
    traces = [generate(model, image, srng.child("sample", k), tau=cfg.multisample_tau)
              for k in range(n)]
    out = fuse([t.final for t in traces], traces[0].depths, cfg.urca())
    # fixed normalization: energy per unit weight (N + gamma) gives the mean
    # disagreement; the extra 1/N converts ensemble spread into uncertainty
    # about the consensus itself, which shrinks as runs accumulate
    u_norm = out.uncertainty / (n * (n + cfg.urca_gamma))
    return out, u_norm, gt


def run_multisample(cfg: RunConfig, checkpoint, n_list, out_csv, n_scenes: int = 10,
                    scene_seed_base: int = 30_000_000, model: FractalModel = None):
    """Per-N fused metrics and uncertainty exceedance; one CSV row per N."""
    if any(n < 1 for n in n_list):
        raise InputError("sample counts must be >= 1")
    if model is None:
        model = load_model(checkpoint)
    rng = RngStream(cfg.seed, ("multisample",))
    rows = []
    summaries = []
    for n in n_list:
        reports = []
        exceed = []
        for i in range(n_scenes):
            out, u_norm, gt = multisample_scene(model, cfg, scene_seed_base + i, n, rng)
            reports.append(metrics(out.consensus, gt))
            _, _, frac = uncertainty_stats(u_norm, cfg.uncertainty_threshold)
            exceed.append(frac)
        mean = MetricsReport(*[float(np.mean([getattr(r, f.name) for r in reports]))
                               for f in fields(MetricsReport)])
        frac = float(np.mean(exceed))
        rows.append([n] + _metrics_row(mean) + [f"{frac:.6f}"])
        summaries.append((n, mean, frac))
    if out_csv:
        _write_csv(out_csv, ["n"] + _METRIC_HEADER + ["u_exceedance"], rows)
    return summaries
