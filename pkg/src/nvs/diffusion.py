"""Conditional image diffusion driven by the scene transformer.

The denoiser sees two conditioning signals: per-pixel decoder features of
the query view (fed through a zero-initialized control branch that adds
residuals to the UNet skips) and the set latent (keys of every
cross-attention block). Either can be swapped for zeros, which is how the
model learns its unconditional modes for classifier-free guidance.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, asdict, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import BadConfig, ShapeError
from .geometry import CameraPose, camera_rays
from .layers import Attention, resolve_device, timestep_embedding, zero_module

log = logging.getLogger(__name__)

P_DROP = 0.05
COND_MODES = ("df+slt", "df_only", "slt_only")


# --------------------------------------------------------------- schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule; index 0 is the clean image (``alpha_bar = 1``)."""

    T: int
    betas: np.ndarray  # (T,), betas[t-1] is the beta of step t
    alphas_cumprod: np.ndarray  # (T + 1,)

    def alpha_bar(self, t):
        return self.alphas_cumprod[np.asarray(t)]

    def torch_alpha_bar(self, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        ab = torch.as_tensor(self.alphas_cumprod, dtype=like.dtype, device=like.device)[t.long()]
        return ab.view(-1, *([1] * (like.dim() - 1)))


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise BadConfig("T", f"need at least 2 diffusion steps, got {T!r}")
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    ab = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(int(T), betas, ab)


def q_sample(schedule: NoiseSchedule, x0, t, eps):
    """Forward noising ``sqrt(ab) x0 + sqrt(1 - ab) eps``; works on tensors or arrays."""
    if isinstance(x0, torch.Tensor):
        t = torch.as_tensor(t, device=x0.device).reshape(-1).expand(x0.shape[0])
        ab = schedule.torch_alpha_bar(t, x0)
        return ab.sqrt() * x0 + (1 - ab).sqrt() * eps
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1 - ab) * np.asarray(eps)


def predict_x0(schedule: NoiseSchedule, x_t, t, eps_hat, clip: bool = True):
    if isinstance(x_t, torch.Tensor):
        t = torch.as_tensor(t, device=x_t.device).reshape(-1).expand(x_t.shape[0])
        ab = schedule.torch_alpha_bar(t, x_t)
        x0 = (x_t - (1 - ab).sqrt() * eps_hat) / ab.sqrt()
        return x0.clamp(-1, 1) if clip else x0
    ab = schedule.alpha_bar(t)
    x0 = (np.asarray(x_t) - np.sqrt(1 - ab) * np.asarray(eps_hat)) / np.sqrt(ab)
    return np.clip(x0, -1, 1) if clip else x0


def cfg_epsilon(eps_cond, eps_uncond, w: float):
    if tuple(eps_cond.shape) != tuple(eps_uncond.shape):
        raise ShapeError(f"{tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}")
    # same as uncond + w * (cond - uncond), but exact at w = 0 and w = 1
    return (1 - w) * eps_uncond + w * eps_cond


class LatentCodec:
    """Identity codec: the working space is the image rescaled to [-1, 1]."""

    @staticmethod
    def encode(images):
        return images * 2 - 1

    @staticmethod
    def decode(x):
        if isinstance(x, torch.Tensor):
            return ((x + 1) / 2).clamp(0, 1)
        return np.clip((x + 1) / 2, 0, 1)


# ------------------------------------------------------------ conditioning


@dataclass
class Conditioning:
    """Batched conditioning.

    ``c_d`` is ``(B, D + 6, H, W)``: upsampled decoder features followed by the
    Plücker coordinates of the query rays. ``c_s`` is ``(B, T, D)``. ``rays``
    holds the query Plücker map ``(B, 6, H, W)`` that is appended to the
    cross-attention queries; it is not part of either branch and carries no
    information once ``c_s`` is zeroed (all keys are then identical).
    """

    c_d: torch.Tensor
    c_s: torch.Tensor
    rays: torch.Tensor

    @property
    def batch_size(self):
        return self.c_d.shape[0]

    def null(self, drop_d=True, drop_s=True) -> "Conditioning":
        return self.masked(torch.full((self.batch_size,), bool(drop_d)),
                           torch.full((self.batch_size,), bool(drop_s)))

    def masked(self, drop_d, drop_s) -> "Conditioning":
        """Zero the branches selected per sample by boolean vectors."""
        dd = torch.as_tensor(drop_d, device=self.c_d.device).view(-1, 1, 1, 1)
        ds = torch.as_tensor(drop_s, device=self.c_s.device).view(-1, 1, 1)
        return Conditioning(torch.where(dd, torch.zeros_like(self.c_d), self.c_d),
                            torch.where(ds, torch.zeros_like(self.c_s), self.c_s), self.rays)

    def repeat(self, n: int) -> "Conditioning":
        return Conditioning(self.c_d.repeat(n, 1, 1, 1), self.c_s.repeat(n, 1, 1), self.rays.repeat(n, 1, 1, 1))

    def to(self, device=None, dtype=None):
        return Conditioning(self.c_d.to(device, dtype), self.c_s.to(device, dtype), self.rays.to(device, dtype))

    @staticmethod
    def cat(items: Sequence["Conditioning"]) -> "Conditioning":
        return Conditioning(torch.cat([c.c_d for c in items]), torch.cat([c.c_s for c in items]),
                            torch.cat([c.rays for c in items]))


def sample_dropout(rng: np.random.Generator, n: int, p: float = P_DROP):
    """Per-sample (drop c_d, drop c_s) flags: only-d, only-s and both each with probability ``p``."""
    u = rng.random(n)
    only_d = u < p
    only_s = (u >= p) & (u < 2 * p)
    both = (u >= 2 * p) & (u < 3 * p)
    return only_d | both, only_s | both


def apply_cond_mode(cond: Conditioning, mode: str) -> Conditioning:
    if mode == "df+slt":
        return cond
    if mode == "df_only":
        return cond.null(drop_d=False, drop_s=True)
    if mode == "slt_only":
        return cond.null(drop_d=True, drop_s=False)
    raise BadConfig("cond", f"unknown conditioning mode {mode!r}; expected one of {COND_MODES}")


# ------------------------------------------------------------------ model


def _groups(ch: int) -> int:
    g = max(1, min(32, ch // 4))
    while ch % g:
        g -= 1
    return g


class ResBlock(nn.Module):
    def __init__(self, cin, cout, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, 2 * cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.emb(F.silu(emb))[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class SpatialCrossAttention(nn.Module):
    """Pixels (with the query ray appended) attend to set-latent tokens."""

    def __init__(self, ch, ctx_dim, zero_out=False):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        heads = max(1, ch // 32)
        self.attn = Attention(ch, heads, kv_dim=ctx_dim, q_dim=ch + 6)
        self.ctx_norm = nn.LayerNorm(ctx_dim)
        if zero_out:
            zero_module(self.attn.out)

    def forward(self, x, rays, ctx):
        B, C, H, W = x.shape
        r = rays if rays.shape[-1] == W else F.adaptive_avg_pool2d(rays, (H, W))
        q = torch.cat([self.norm(x), r], 1).flatten(2).transpose(1, 2)
        out = self.attn(q, self.ctx_norm(ctx))
        return x + out.transpose(1, 2).reshape(B, C, H, W)


@dataclass
class DenoiserConfig:
    image_size: int = 64
    channels: int = 64
    channel_mult: tuple = (1, 2, 2)
    cd_dim: int = 256 + 6
    cs_dim: int = 256
    attn_min_level: int = 1  # cross-attention at levels >= this


class _Encoder(nn.Module):
    """Down path shared in structure by the UNet and its control branch."""

    def __init__(self, cfg: DenoiserConfig, emb_dim, zero_attn):
        super().__init__()
        C = cfg.channels
        self.conv_in = nn.Conv2d(3, C, 3, padding=1)
        self.blocks = nn.ModuleList()
        self.attns = nn.ModuleList()
        self.downs = nn.ModuleList()
        ch = C
        self.out_channels = []
        for lvl, m in enumerate(cfg.channel_mult):
            self.blocks.append(ResBlock(ch, C * m, emb_dim))
            ch = C * m
            self.attns.append(SpatialCrossAttention(ch, cfg.cs_dim, zero_attn)
                              if lvl >= cfg.attn_min_level else nn.Identity())
            self.out_channels.append(ch)
            last = lvl == len(cfg.channel_mult) - 1
            self.downs.append(nn.Identity() if last else nn.Conv2d(ch, ch, 3, stride=2, padding=1))
        self.mid1 = ResBlock(ch, ch, emb_dim)
        self.mid_attn = SpatialCrossAttention(ch, cfg.cs_dim, zero_attn)
        self.mid2 = ResBlock(ch, ch, emb_dim)
        self.mid_channels = ch

    def forward(self, h, emb, rays, ctx, add_in=None):
        h = self.conv_in(h)
        if add_in is not None:
            h = h + add_in
        skips = []
        for blk, attn, down in zip(self.blocks, self.attns, self.downs):
            h = blk(h, emb)
            if not isinstance(attn, nn.Identity):
                h = attn(h, rays, ctx)
            skips.append(h)
            h = down(h)
        h = self.mid1(h, emb)
        h = self.mid_attn(h, rays, ctx)
        h = self.mid2(h, emb)
        return skips, h


class DenoiserNet(nn.Module):
    """3-level UNet with a zero-initialized control branch for ``c_d``."""

    def __init__(self, cfg: DenoiserConfig | None = None, **overrides):
        super().__init__()
        cfg = replace(cfg or DenoiserConfig(), **overrides)
        cfg.channel_mult = tuple(cfg.channel_mult)
        self.cfg = cfg
        C = cfg.channels
        emb_dim = 4 * C
        self.time_mlp = nn.Sequential(nn.Linear(C, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.encoder = _Encoder(cfg, emb_dim, zero_attn=True)
        self.ups = nn.ModuleList()
        self.up_attns = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        ch = self.encoder.mid_channels
        n = len(cfg.channel_mult)
        for lvl in reversed(range(n)):
            skip = self.encoder.out_channels[lvl]
            out = C * cfg.channel_mult[lvl]
            self.ups.append(ResBlock(ch + skip, out, emb_dim))
            self.up_attns.append(SpatialCrossAttention(out, cfg.cs_dim, True)
                                 if lvl >= cfg.attn_min_level else nn.Identity())
            self.upsamples.append(nn.Conv2d(out, out, 3, padding=1) if lvl > 0 else nn.Identity())
            ch = out
        self.out = nn.Sequential(nn.GroupNorm(_groups(ch), ch), nn.SiLU(), zero_module(nn.Conv2d(ch, 3, 3, padding=1)))
        # control branch
        self.hint = nn.Sequential(
            nn.Conv2d(cfg.cd_dim, C, 3, padding=1), nn.SiLU(),
            nn.Conv2d(C, C, 3, padding=1), nn.SiLU(),
            zero_module(nn.Conv2d(C, C, 3, padding=1)),
        )
        self.control = _Encoder(cfg, emb_dim, zero_attn=False)
        self.control_skips = nn.ModuleList(zero_module(nn.Conv2d(c, c, 1)) for c in self.control.out_channels)
        self.control_mid = zero_module(nn.Conv2d(self.control.mid_channels, self.control.mid_channels, 1))

    def forward(self, x_t, t, cond: Conditioning):
        B, _, H, W = x_t.shape
        emb = self.time_mlp(timestep_embedding(t, self.cfg.channels).to(x_t.dtype))
        c_d = cond.c_d
        if c_d.shape[-2:] != (H, W):
            c_d = F.interpolate(c_d, size=(H, W), mode="bilinear", align_corners=False)
        c_skips, c_mid = self.control(x_t, emb, cond.rays, cond.c_s, add_in=self.hint(c_d))
        skips, h = self.encoder(x_t, emb, cond.rays, cond.c_s)
        h = h + self.control_mid(c_mid)
        skips = [s + z(c) for s, z, c in zip(skips, self.control_skips, c_skips)]
        for blk, attn, up, skip in zip(self.ups, self.up_attns, self.upsamples, reversed(skips)):
            h = blk(torch.cat([h, skip], 1), emb)
            if not isinstance(attn, nn.Identity):
                h = attn(h, cond.rays, cond.c_s)
            if not isinstance(up, nn.Identity):
                h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.out(h)


# --------------------------------------------------------------- training


def diffusion_loss(model: DenoiserNet, schedule: NoiseSchedule, x0, cond: Conditioning,
                   generator: torch.Generator | None = None):
    B = x0.shape[0]
    t = torch.randint(1, schedule.T + 1, (B,), generator=generator).to(x0.device)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype).to(x0.device)
    x_t = q_sample(schedule, x0, t, eps)
    return F.mse_loss(model(x_t, t, cond), eps)


def train_step(model, optimizer, schedule, images, cond: Conditioning, rng: np.random.Generator,
               cond_mode: str = "df+slt", p_drop: float = P_DROP, grad_clip: float | None = 1.0):
    """One optimizer update on ``images`` (``(B, 3, H, W)`` in [0, 1]); returns the loss."""
    drop_d, drop_s = sample_dropout(rng, images.shape[0], p_drop)
    cond = apply_cond_mode(cond.masked(torch.from_numpy(drop_d), torch.from_numpy(drop_s)), cond_mode)
    gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    loss = diffusion_loss(model, schedule, LatentCodec.encode(images), cond, gen)
    optimizer.zero_grad()
    loss.backward()
    if grad_clip:
        nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return loss.item()


# --------------------------------------------------------------- sampling


def guided_epsilon(model, x, t, cond: Conditioning, w: float):
    """Classifier-free guided noise estimate; the unconditional pass nulls both branches."""
    B = x.shape[0]
    tt = torch.as_tensor(t, device=x.device).reshape(-1).expand(B)
    if w == 1.0:
        return model(x, tt, cond)
    both = Conditioning.cat([cond, cond.null()])
    eps = model(torch.cat([x, x]), torch.cat([tt, tt]), both)
    return cfg_epsilon(eps[:B], eps[B:], w)


def ddim_timesteps(t_start: int, steps: int) -> np.ndarray:
    ts = np.round(np.linspace(t_start, 1, steps)).astype(int)
    return ts


def ddim_loop(model, schedule: NoiseSchedule, x_t, t_start: int, cond: Conditioning, steps: int, w: float,
              eps_fn=None):
    """Deterministic DDIM from ``x_t`` at ``t_start`` down to a clean estimate in working space."""
    if steps < 1:
        raise BadConfig("steps", "need at least one DDIM step")
    if steps > t_start:
        raise BadConfig("steps", f"{steps} DDIM steps exceed the {t_start} available timesteps")
    eps_fn = eps_fn or (lambda x, t: guided_epsilon(model, x, t, cond, w))
    ts = ddim_timesteps(t_start, steps)
    x = x_t
    x0 = x_t
    for i, t in enumerate(ts):
        eps = eps_fn(x, int(t))
        x0 = predict_x0(schedule, x, int(t), eps)
        ab_prev = schedule.alphas_cumprod[ts[i + 1]] if i + 1 < len(ts) else 1.0
        x = math.sqrt(ab_prev) * x0 + math.sqrt(1 - ab_prev) * eps
    return x0


def ddim_sample(model, schedule: NoiseSchedule, cond: Conditioning, steps: int = 30, w: float = 9.0,
                seed: int = 0, eps_fn=None, shape=None) -> torch.Tensor:
    """Images in [0, 1], ``(B, 3, H, W)``, from pure noise with eta = 0."""
    if steps > schedule.T:
        raise BadConfig("steps", f"{steps} DDIM steps exceed T={schedule.T}")
    if shape is None:
        B, _, H, W = cond.rays.shape
        shape = (B, 3, H, W)
    gen = torch.Generator().manual_seed(int(seed))
    dev = cond.rays.device if cond is not None else "cpu"
    dt = cond.rays.dtype if cond is not None else torch.float32
    x = torch.randn(shape, generator=gen, dtype=dt).to(dev)
    with torch.no_grad():
        x0 = ddim_loop(model, schedule, x, schedule.T, cond, steps, w, eps_fn)
    return LatentCodec.decode(x0)


# ------------------------------------------------------------ data plumbing


def query_rays(poses: Sequence[CameraPose], size: int) -> np.ndarray:
    """``(B, 6, size, size)`` Plücker maps of poses resized to ``size``."""
    out = [camera_rays(p.resized(size, size)).plucker().transpose(2, 0, 1) for p in poses]
    return np.stack(out).astype(np.float32)


def build_conditioning(srt_model, ctx_images: torch.Tensor, intrinsics: torch.Tensor,
                       poses: Sequence[CameraPose], image_size: int, feature_size: int) -> Conditioning:
    """Run the frozen transformer for a batch sharing one context size.

    ``ctx_images`` is ``(B, N, 3, H, W)`` in [0, 1]; ``poses`` are the query
    cameras in each sample's anchored frame.
    """
    dev = ctx_images.device
    with torch.no_grad():
        c_s = srt_model.encode_tokens(srt_model.patch_tokens(ctx_images, intrinsics))
        pl_feat = torch.from_numpy(query_rays(poses, feature_size)).to(dev)
        B = pl_feat.shape[0]
        feats = srt_model.decode_rays(pl_feat.flatten(2).transpose(1, 2), c_s)
        feats = feats.transpose(1, 2).reshape(B, -1, feature_size, feature_size)
        feats = F.interpolate(feats, size=(image_size, image_size), mode="bilinear", align_corners=False)
        rays = torch.from_numpy(query_rays(poses, image_size)).to(dev)
    return Conditioning(torch.cat([feats, rays], 1), c_s, rays)


def sample_diffusion_batch(bank, rng: np.random.Generator, batch_size: int, n_context: int):
    """Context images, intrinsics, anchored query poses and target images."""
    from .srt import normalized_intrinsics

    imgs, intr, poses, tgts = [], [], [], []
    for _ in range(batch_size):
        s = bank.ids[rng.integers(len(bank.ids))]
        perm = rng.permutation(bank.n_views(s))
        ctx, q = perm[:n_context], int(perm[n_context % len(perm)])
        anchored = bank.anchored(s, int(ctx[0]))
        imgs.append(bank.images[s][ctx])
        intr.append(np.stack([normalized_intrinsics(bank.poses[s][i]) for i in ctx]))
        poses.append(anchored[q])
        tgts.append(bank.images[s][q])
    return (np.stack(imgs).transpose(0, 1, 4, 2, 3), np.stack(intr).astype(np.float32), poses,
            np.stack(tgts).transpose(0, 3, 1, 2))


class ViewDiffusion(BaseEstimator):
    """Estimator for the conditional denoiser.

    ``srt`` is a fitted :class:`~nvs.srt.SceneTransformer`; it stays frozen.
    ``cond`` selects the conditioning ablation and is applied both while
    training and while sampling.
    """

    def __init__(self, srt=None, image_size=64, feature_size=32, channels=64, channel_mult=(1, 2, 2),
                 T=1000, lr=1e-4, n_steps=50_000, batch_size=8, max_context=3, cond="df+slt",
                 p_drop=P_DROP, steps=30, guidance_weight=9.0, grad_clip=1.0, log_every=500,
                 random_state=0, device="auto"):
        self.srt = srt
        self.image_size = image_size
        self.feature_size = feature_size
        self.channels = channels
        self.channel_mult = channel_mult
        self.T = T
        self.lr = lr
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.max_context = max_context
        self.cond = cond
        self.p_drop = p_drop
        self.steps = steps
        self.guidance_weight = guidance_weight
        self.grad_clip = grad_clip
        self.log_every = log_every
        self.random_state = random_state
        self.device = device

    def _config(self) -> DenoiserConfig:
        D = self.srt.dim
        return DenoiserConfig(self.image_size, self.channels, tuple(self.channel_mult), D + 6, D)

    def _validate(self):
        if self.cond not in COND_MODES:
            raise BadConfig("cond", f"unknown conditioning mode {self.cond!r}; expected one of {COND_MODES}")
        if self.srt is None or not hasattr(self.srt, "model_"):
            raise BadConfig("srt", "a fitted scene transformer is required")
        if self.steps > self.T:
            raise BadConfig("steps", f"{self.steps} DDIM steps exceed T={self.T}")

    def _init_model(self):
        self._validate()
        torch.manual_seed(self.random_state)
        self.schedule_ = make_schedule(self.T)
        self.model_ = DenoiserNet(self._config()).to(resolve_device(self.device))
        self.history_ = []
        self.n_steps_done_ = 0
        return self

    def fit(self, X, y=None, callback=None):
        from .srt import SceneBank

        bank = X if isinstance(X, SceneBank) else (
            SceneBank(X) if isinstance(X, dict) else SceneBank.from_dataset(X))
        if not hasattr(self, "model_"):
            self._init_model()
        return self.partial_fit(bank, self.n_steps, callback=callback)

    def _frozen_srt(self):
        m = self.srt.model_
        m.eval()
        for p in m.parameters():
            p.requires_grad_(False)
        return m

    def partial_fit(self, bank, n_steps: int, callback=None):
        if not hasattr(self, "model_"):
            self._init_model()
        srt_model = self._frozen_srt()
        model = self.model_
        dev = next(model.parameters()).device
        if not hasattr(self, "optimizer_"):
            self.optimizer_ = torch.optim.Adam(model.parameters(), lr=self.lr)
            self.rng_ = np.random.default_rng(self.random_state)
        model.train()
        t0 = time.time()
        for _ in range(n_steps):
            n_ctx = int(self.rng_.integers(1, self.max_context + 1))
            imgs, intr, poses, tgt = sample_diffusion_batch(bank, self.rng_, self.batch_size, n_ctx)
            cond = build_conditioning(srt_model, torch.from_numpy(imgs).to(dev), torch.from_numpy(intr).to(dev),
                                      poses, self.image_size, self.feature_size)
            target = torch.from_numpy(tgt).to(dev)
            if target.shape[-1] != self.image_size:
                target = F.interpolate(target, size=(self.image_size,) * 2, mode="bilinear", align_corners=False)
            loss = train_step(model, self.optimizer_, self.schedule_, target, cond, self.rng_,
                              self.cond, self.p_drop, self.grad_clip)
            self.history_.append(loss)
            self.n_steps_done_ += 1
            if self.log_every and self.n_steps_done_ % self.log_every == 0:
                log.info("diffusion step %d loss %.5f (%.1fs)", self.n_steps_done_,
                         np.mean(self.history_[-self.log_every:]), time.time() - t0)
            if callback is not None:
                callback(self.n_steps_done_, loss)
        model.eval()
        return self

    # --- inference

    def conditioning(self, context, poses: Sequence[CameraPose]) -> Conditioning:
        """Conditioning for query ``poses`` (anchored frame) given one context ``ImageSet``."""
        from .srt import ImageSet

        check_is_fitted(self, "model_")
        ctx = ImageSet.coerce(context)
        dev = next(self.model_.parameters()).device
        imgs = torch.from_numpy(ctx.images).permute(0, 3, 1, 2)[None].to(dev)
        intr = torch.from_numpy(ctx.intrinsics)[None].to(dev)
        imgs = imgs.expand(len(poses), -1, -1, -1, -1)
        intr = intr.expand(len(poses), -1, -1)
        cond = build_conditioning(self._frozen_srt(), imgs, intr, poses, self.image_size, self.feature_size)
        return apply_cond_mode(cond, self.cond)

    def denoise_fn(self):
        """``(x_t, t, cond) -> eps`` closure over the frozen network."""
        return lambda x, t, cond: self.model_(x, t, cond)

    def sample(self, cond: Conditioning, steps=None, w=None, seed=None) -> np.ndarray:
        check_is_fitted(self, "model_")
        out = ddim_sample(self.model_, self.schedule_, cond, self.steps if steps is None else steps,
                          self.guidance_weight if w is None else w,
                          self.random_state if seed is None else seed)
        return out.permute(0, 2, 3, 1).cpu().numpy()

    def predict(self, X, poses: Sequence[CameraPose], steps=None, w=None, seed=None) -> np.ndarray:
        """Sampled ``(len(poses), H, W, 3)`` images of the query poses."""
        return self.sample(self.conditioning(X, poses), steps, w, seed)

    def hyperparameters(self) -> dict:
        d = asdict(self._config())
        d.update(T=self.T, cond=self.cond, feature_size=self.feature_size)
        return d
