"""Distilling a 3D neural field from the view-synthesis diffusion model.

Each iteration renders the field from a random camera around the anchored
origin, noises the rendering, lets the frozen diffusion model denoise it
over several DDIM steps and regresses the rendering onto that denoised
image. The input views themselves are never used as a rendering target.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, asdict, field as dc_field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .diffusion import LatentCodec, ddim_loop, guided_epsilon, q_sample
from .exceptions import BadConfig
from .geometry import CameraPose, camera_rays, look_at

log = logging.getLogger(__name__)

BOUND = 1.0
_PRIMES = (1, 2654435761, 805459861)
ALLOWED_LOSS_TERMS = ("sds_data", "entropy", "sparsity")


# ------------------------------------------------------------------ field


class HashGrid(nn.Module):
    """Multiresolution hash encoding of points in ``[-BOUND, BOUND]^3``."""

    def __init__(self, n_levels=12, n_features=2, log2_table=17, base_res=16, scale=1.5):
        super().__init__()
        self.n_levels = n_levels
        self.n_features = n_features
        self.table_size = 2**log2_table
        self.resolutions = [int(math.floor(base_res * scale**lvl)) for lvl in range(n_levels)]
        self.tables = nn.Parameter(torch.empty(n_levels, self.table_size, n_features).uniform_(-1e-4, 1e-4))
        corners = torch.tensor([[(i >> 2) & 1, (i >> 1) & 1, i & 1] for i in range(8)])
        self.register_buffer("corners", corners, persistent=False)

    @property
    def out_dim(self):
        return self.n_levels * self.n_features

    def level_index(self, level: int, cells: torch.Tensor) -> torch.Tensor:
        """Table rows of integer lattice points ``(..., 3)`` at one level."""
        res = self.resolutions[level]
        if (res + 1) ** 3 <= self.table_size:
            return cells[..., 0] * (res + 1) ** 2 + cells[..., 1] * (res + 1) + cells[..., 2]
        h = cells[..., 0] * _PRIMES[0]
        h = torch.bitwise_xor(h, cells[..., 1] * _PRIMES[1])
        h = torch.bitwise_xor(h, cells[..., 2] * _PRIMES[2])
        return h & (self.table_size - 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        u = ((x + BOUND) / (2 * BOUND)).clamp(0, 1)
        feats = []
        for lvl, res in enumerate(self.resolutions):
            pos = u * res
            base = pos.floor().clamp(max=res - 1)
            frac = pos - base
            cells = base.long()[:, None, :] + self.corners[None]  # (M, 8, 3)
            w = torch.where(self.corners[None].bool(), frac[:, None, :], 1 - frac[:, None, :]).prod(-1)
            vals = self.tables[lvl][self.level_index(lvl, cells)]  # (M, 8, F)
            feats.append((w[..., None] * vals).sum(1))
        return torch.cat(feats, -1)


class NeuralField(nn.Module):
    """Hash grid plus small MLPs; returns density >= 0 and colour in [0, 1]."""

    def __init__(self, n_levels=12, n_features=2, log2_table=17, base_res=16, scale=1.5, width=64,
                 blob_density=5.0, blob_radius=0.5):
        super().__init__()
        self.grid = HashGrid(n_levels, n_features, log2_table, base_res, scale)
        self.sigma_net = nn.Sequential(nn.Linear(self.grid.out_dim, width), nn.ReLU(), nn.Linear(width, 16))
        self.color_net = nn.Sequential(nn.Linear(15, width), nn.ReLU(), nn.Linear(width, 3))
        self.blob_density = blob_density
        self.blob_radius = blob_radius

    def density_prior(self, x):
        if not self.blob_density:
            return torch.zeros(x.shape[:-1], dtype=x.dtype, device=x.device)
        return self.blob_density * torch.exp(-(x**2).sum(-1) / (2 * self.blob_radius**2))

    def forward(self, x: torch.Tensor):
        h = self.sigma_net(self.grid(x))
        sigma = F.softplus(h[:, 0] + self.density_prior(x))
        inside = (x.abs() <= BOUND).all(-1)
        sigma = torch.where(inside, sigma, torch.zeros_like(sigma))
        rgb = torch.sigmoid(self.color_net(h[:, 1:]))
        return sigma, rgb


# -------------------------------------------------------------- rendering


@dataclass
class RenderOutput:
    rgb: torch.Tensor  # (H, W, 3)
    opacity: torch.Tensor  # (H, W)
    depth: torch.Tensor  # (H, W)
    background: torch.Tensor  # (H, W) transmittance left after the last sample


def ray_box(origins: torch.Tensor, dirs: torch.Tensor, bound: float = BOUND):
    """Entry/exit distances of rays against the cube; ``near > far`` means a miss."""
    safe = torch.where(dirs.abs() < 1e-12, torch.full_like(dirs, 1e-12), dirs)
    t0 = (-bound - origins) / safe
    t1 = (bound - origins) / safe
    near = torch.minimum(t0, t1).amax(-1).clamp(min=0.0)
    far = torch.maximum(t0, t1).amin(-1)
    return near, far


def volume_render(field, pose: CameraPose, samples_per_ray: int = 64, *, generator: torch.Generator | None = None,
                  dtype=torch.float32, device="cpu", bound: float = BOUND) -> RenderOutput:
    """Quadrature of emission-absorption along every pixel ray of ``pose``.

    ``field`` is any callable mapping ``(M, 3)`` points to ``(sigma (M,), rgb (M, 3))``.
    Samples are stratified when a ``generator`` is given and bin midpoints otherwise.
    """
    grid = camera_rays(pose)
    H, W = grid.shape
    o = torch.from_numpy(grid.origins.reshape(-1, 3)).to(device, dtype)
    d = torch.from_numpy(grid.directions.reshape(-1, 3)).to(device, dtype)
    near, far = ray_box(o, d, bound)
    hit = far > near
    far = torch.where(hit, far, near)
    R, S = o.shape[0], samples_per_ray
    delta = (far - near) / S
    if generator is None:
        jitter = torch.full((R, S), 0.5, dtype=dtype, device=device)
    else:
        jitter = torch.rand((R, S), generator=generator, dtype=dtype).to(device)
    ts = near[:, None] + (torch.arange(S, dtype=dtype, device=device)[None] + jitter) * delta[:, None]
    pts = o[:, None] + ts[..., None] * d[:, None]
    sigma, rgb = field(pts.reshape(-1, 3))
    sigma = sigma.reshape(R, S) * hit[:, None]
    rgb = rgb.reshape(R, S, 3)
    tau = sigma * delta[:, None]
    alpha = 1 - torch.exp(-tau)
    trans = torch.exp(-torch.cumsum(torch.cat([torch.zeros_like(tau[:, :1]), tau[:, :-1]], 1), 1))
    weights = trans * alpha
    background = torch.exp(-tau.sum(1))
    opacity = weights.sum(1)
    color = (weights[..., None] * rgb).sum(1) + (1 - opacity)[:, None]
    depth = (weights * ts).sum(1)
    return RenderOutput(color.reshape(H, W, 3), opacity.reshape(H, W), depth.reshape(H, W),
                        background.reshape(H, W))


# ---------------------------------------------------------------- config


@dataclass
class DistillConfig:
    total_iters: int = 3000
    warmup_iters: int = 300
    ddim_steps: int = 30
    guidance_weight: float = 9.0
    views_per_iter: int = 1
    lambda_entropy: float = 1e-3
    lambda_sparsity: float = 1e-3
    lr: float = 1e-2
    render_size: int = 64
    samples_per_ray: int = 64
    warm_band: tuple = (0.70, 0.98)
    final_band: tuple = (0.02, 0.30)
    elevation_deg: tuple = (-15.0, 45.0)
    radius: tuple = (0.8, 1.5)

    def __post_init__(self):
        for key in ("total_iters", "ddim_steps", "views_per_iter", "render_size", "samples_per_ray"):
            if int(getattr(self, key)) < 1:
                raise BadConfig(key, "must be a positive integer")
        if not 0 <= self.warmup_iters < self.total_iters:
            raise BadConfig("warmup_iters", f"must lie in [0, total_iters={self.total_iters}), "
                                            f"got {self.warmup_iters}")


def anneal_t_range(it: int, cfg: DistillConfig) -> tuple[float, float]:
    """Noise band (fractions of T) for iteration ``it``."""
    if it < cfg.warmup_iters:
        return tuple(cfg.warm_band)
    span = max(cfg.total_iters - 1 - cfg.warmup_iters, 1)
    frac = min((it - cfg.warmup_iters) / span, 1.0)
    lo = cfg.warm_band[0] + (cfg.final_band[0] - cfg.warm_band[0]) * frac
    hi = cfg.warm_band[1] + (cfg.final_band[1] - cfg.warm_band[1]) * frac
    return lo, hi


ANCHORED_UP = (0.0, -1.0, 0.0)  # image "up" of the anchor camera


def orbit_pose(azimuth: float, elevation: float, radius: float, intrinsics, size: int) -> CameraPose:
    """Camera on a sphere around the anchored origin; ``(0, 0, 1)`` is the anchor."""
    ce = math.cos(elevation)
    eye = radius * np.array([math.sin(azimuth) * ce, -math.sin(elevation), -math.cos(azimuth) * ce])
    fx, fy, cx, cy = (float(v) * size for v in intrinsics)
    return look_at(eye, np.zeros(3), ANCHORED_UP, fx=fx, fy=fy, cx=cx, cy=cy, width=size, height=size)


def sample_query_pose(rng: np.random.Generator, cfg: DistillConfig, intrinsics) -> CameraPose:
    az = rng.uniform(0, 2 * math.pi)
    el = math.radians(rng.uniform(*cfg.elevation_deg))
    r = math.exp(rng.uniform(math.log(cfg.radius[0]), math.log(cfg.radius[1])))
    return orbit_pose(az, el, r, intrinsics, cfg.render_size)


def turntable_poses(intrinsics, size: int, n: int = 24, elevation_deg: float = 15.0, radius: float = 1.0):
    return [orbit_pose(2 * math.pi * k / n, math.radians(elevation_deg), radius, intrinsics, size)
            for k in range(n)]


# -------------------------------------------------------------- objective


def opacity_regularizers(opacity: torch.Tensor, eps: float = 1e-5):
    o = opacity.clamp(eps, 1 - eps)
    entropy = (-o * torch.log(o) - (1 - o) * torch.log(1 - o)).mean()
    return entropy, opacity.mean()


def data_term(render_rgb: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """``||render - target||^2`` averaged over pixels; ``target`` carries no gradient."""
    return ((render_rgb - target.detach()) ** 2).mean()


def sds_step(field, optimizer, denoise, it: int, cfg: DistillConfig, rng: np.random.Generator,
             intrinsics, T: int, schedule, image_size: int, generator=None) -> dict:
    """One optimizer update of ``field``.

    ``denoise(x_t, t, poses, n_steps)`` returns the multi-step clean estimate
    in working space for ``x_t`` at step ``t``.
    """
    t_lo, t_hi = anneal_t_range(it, cfg)
    renders, targets, opac = [], [], []
    ts = []
    for _ in range(cfg.views_per_iter):
        pose = sample_query_pose(rng, cfg, intrinsics)
        out = volume_render(field, pose, cfg.samples_per_ray, generator=generator)
        img = out.rgb.permute(2, 0, 1)[None]
        if img.shape[-1] != image_size:
            img = F.interpolate(img, size=(image_size, image_size), mode="bilinear", align_corners=False)
        t = int(np.clip(round(rng.uniform(t_lo, t_hi) * T), 1, T))
        n = max(1, math.ceil(cfg.ddim_steps * t / T))
        with torch.no_grad():
            x0 = LatentCodec.encode(img.detach())
            eps = torch.from_numpy(rng.standard_normal(x0.shape).astype(np.float32)).to(x0)
            x_t = q_sample(schedule, x0, t, eps)
            target = LatentCodec.decode(denoise(x_t, t, [pose], n))
        renders.append(img)
        targets.append(target)
        opac.append(out.opacity)
        ts.append(t)
    data = data_term(torch.cat(renders), torch.cat(targets))
    entropy, sparsity = opacity_regularizers(torch.stack(opac))
    loss = data + cfg.lambda_entropy * entropy + cfg.lambda_sparsity * sparsity
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return {"iter": it, "t": ts, "loss": loss.item(), "sds_data": data.item(), "entropy": entropy.item(),
            "sparsity": sparsity.item(), "terms": list(ALLOWED_LOSS_TERMS)}


def make_denoiser(diffusion, context, w: float, cond_mode: str | None = None):
    """Closure running the frozen diffusion estimator for :func:`sds_step`."""
    model, schedule = diffusion.model_, diffusion.schedule_
    for p in model.parameters():
        p.requires_grad_(False)

    def denoise(x_t, t, poses, n_steps):
        cond = diffusion.conditioning(context, poses)
        return ddim_loop(model, schedule, x_t, t, cond, n_steps, w)

    return denoise


def distill(context, diffusion, cfg: DistillConfig | None = None, *, seed: int = 0, field_kwargs=None,
            callback=None):
    """Fit a :class:`NeuralField` to the diffusion model's views of ``context``.

    Returns ``(field, audit)`` where ``audit`` has one record per iteration.
    """
    from .srt import ImageSet

    cfg = cfg or DistillConfig()
    ctx = ImageSet.coerce(context)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    field = NeuralField(**(field_kwargs or {}))
    opt = torch.optim.Adam(field.parameters(), lr=cfg.lr, betas=(0.9, 0.99), eps=1e-15)
    denoise = make_denoiser(diffusion, ctx, cfg.guidance_weight)
    audit = []
    for it in range(cfg.total_iters):
        rec = sds_step(field, opt, denoise, it, cfg, rng, ctx.intrinsics[0], diffusion.schedule_.T,
                       diffusion.schedule_, diffusion.image_size, gen)
        audit.append(rec)
        if callback is not None:
            callback(rec)
        if it % 100 == 0:
            log.info("distill iter %d loss %.5f t=%s", it, rec["loss"], rec["t"])
    return field, audit


def render_images(field, poses: Sequence[CameraPose], samples_per_ray: int = 64) -> np.ndarray:
    with torch.no_grad():
        return np.stack([volume_render(field, p, samples_per_ray).rgb.cpu().numpy() for p in poses])


def write_turntable(field, out_dir, intrinsics, size: int = 64, n_frames: int = 24, samples_per_ray: int = 64):
    """PNG frames plus ``index.json`` describing each frame's pose; returns the index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    poses = turntable_poses(intrinsics, size, n_frames)
    frames = []
    with torch.no_grad():
        for k, pose in enumerate(poses):
            r = volume_render(field, pose, samples_per_ray)
            name = f"frame_{k:03d}.png"
            rgb = (np.clip(r.rgb.cpu().numpy(), 0, 1) * 255).round().astype(np.uint8)
            Image.fromarray(rgb).save(out / name)
            frames.append({"file": name, "pose": pose.to_dict(),
                           "opacity_fraction": float((r.opacity > 0.5).float().mean())})
    index = {"n_frames": n_frames, "size": size, "frames": frames}
    (out / "index.json").write_text(json.dumps(index, indent=2))
    return index


class FieldDistiller(BaseEstimator):
    """Estimator wrapper: ``fit(context_images)`` distills, ``predict(poses)`` renders."""

    def __init__(self, diffusion=None, total_iters=3000, warmup_iters=300, ddim_steps=30, guidance_weight=9.0,
                 views_per_iter=1, lambda_entropy=1e-3, lambda_sparsity=1e-3, lr=1e-2, render_size=64,
                 samples_per_ray=64, n_levels=12, n_features=2, log2_table=17, base_res=16, level_scale=1.5,
                 width=64, blob_density=5.0, random_state=0):
        self.diffusion = diffusion
        self.total_iters = total_iters
        self.warmup_iters = warmup_iters
        self.ddim_steps = ddim_steps
        self.guidance_weight = guidance_weight
        self.views_per_iter = views_per_iter
        self.lambda_entropy = lambda_entropy
        self.lambda_sparsity = lambda_sparsity
        self.lr = lr
        self.render_size = render_size
        self.samples_per_ray = samples_per_ray
        self.n_levels = n_levels
        self.n_features = n_features
        self.log2_table = log2_table
        self.base_res = base_res
        self.level_scale = level_scale
        self.width = width
        self.blob_density = blob_density
        self.random_state = random_state

    def config(self) -> DistillConfig:
        return DistillConfig(self.total_iters, self.warmup_iters, self.ddim_steps, self.guidance_weight,
                             self.views_per_iter, self.lambda_entropy, self.lambda_sparsity, self.lr,
                             self.render_size, self.samples_per_ray)

    def field_kwargs(self) -> dict:
        return dict(n_levels=self.n_levels, n_features=self.n_features, log2_table=self.log2_table,
                    base_res=self.base_res, scale=self.level_scale, width=self.width,
                    blob_density=self.blob_density)

    def fit(self, X, y=None, callback=None):
        from .srt import ImageSet

        if self.diffusion is None or not hasattr(self.diffusion, "model_"):
            raise BadConfig("diffusion", "a fitted diffusion model is required")
        self.context_ = ImageSet.coerce(X)
        self.field_, self.audit_ = distill(self.context_, self.diffusion, self.config(), seed=self.random_state,
                                           field_kwargs=self.field_kwargs(), callback=callback)
        self.field_.eval()
        return self

    def predict(self, poses: Sequence[CameraPose]) -> np.ndarray:
        check_is_fitted(self, "field_")
        return render_images(self.field_, poses, self.samples_per_ray)

    def anchor_pose(self, size: int | None = None) -> CameraPose:
        check_is_fitted(self, "field_")
        return orbit_pose(0.0, 0.0, 1.0, self.context_.intrinsics[0], size or self.render_size)

    def turntable(self, out_dir, n_frames=24, size=None):
        check_is_fitted(self, "field_")
        return write_turntable(self.field_, out_dir, self.context_.intrinsics[0], size or self.render_size,
                               n_frames, self.samples_per_ray)

    def loss_curve(self) -> np.ndarray:
        check_is_fitted(self, "audit_")
        return np.array([r["loss"] for r in self.audit_])
