"""Unposed set-latent scene transformer.

Images of one object are cut into patch tokens and encoded jointly into an
unordered set latent. Query rays, expressed in the frame anchored on the
first image, cross-attend to that set to produce per-ray features, which a
small MLP turns into colours. Only the first (anchor) image receives a
camera encoding; the others contribute their pixels, patch positions and
intrinsics but never their poses.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import ShapeError
from .geometry import CameraPose, RayGrid, anchor_frame, camera_rays
from .layers import (
    CrossAttentionBlock,
    SelfAttentionBlock,
    resolve_device,
    sinusoidal,
    sinusoidal_dim,
)
from .validation import check_image_set

log = logging.getLogger(__name__)

ANCHOR_CENTER = np.array([0.0, 0.0, -1.0])


@dataclass
class SrtConfig:
    image_size: int = 64
    patch_size: int = 8
    dim: int = 256
    heads: int = 8
    enc_depth: int = 8
    dec_depth: int = 4
    mlp_ratio: int = 4
    n_freqs: int = 6


# ------------------------------------------------------------------ types


@dataclass
class ImageSet:
    """Context images with the anchor first; background composited to white."""

    images: np.ndarray
    masks: np.ndarray | None = None
    intrinsics: np.ndarray | None = None  # (N, 4): fx/W, fy/H, cx/W, cy/H
    anchor_index: int = 0

    def __post_init__(self):
        self.images, self.masks = check_image_set(self.images, self.masks)
        if self.anchor_index != 0:
            raise ValueError("the anchor must be the first image")
        if self.intrinsics is None:
            from .data import FOCAL_FRACTION

            self.intrinsics = np.tile([FOCAL_FRACTION, FOCAL_FRACTION, 0.5, 0.5], (len(self), 1))
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float32).reshape(len(self), 4)

    def __len__(self):
        return self.images.shape[0]

    @classmethod
    def from_records(cls, records) -> "ImageSet":
        imgs = np.stack([r.image_float() for r in records])
        masks = np.stack([r.mask.astype(np.float32) for r in records])
        return cls(imgs, masks, np.stack([normalized_intrinsics(r.pose) for r in records]))

    @classmethod
    def coerce(cls, X) -> "ImageSet":
        """Accept an ``ImageSet``, a list of view records or an ``(N, H, W, 3)`` array."""
        if isinstance(X, cls):
            return X
        if isinstance(X, (list, tuple)) and X and hasattr(X[0], "image_float"):
            return cls.from_records(X)
        return cls(X)


@dataclass
class SetLatent:
    tokens: torch.Tensor  # (T, D) or (B, T, D)
    provenance: np.ndarray  # (T, 3): image index, patch row, patch col


@dataclass
class DecoderFeatures:
    features: torch.Tensor  # (h, w, D)


def normalized_intrinsics(pose: CameraPose) -> np.ndarray:
    return np.array([pose.fx / pose.width, pose.fy / pose.height,
                     pose.cx / pose.width, pose.cy / pose.height], dtype=np.float32)


def anchor_camera(intrinsics_norm, size: int) -> CameraPose:
    """The anchor camera as it appears in its own anchored frame."""
    fx, fy, cx, cy = (float(v) * size for v in intrinsics_norm)
    return CameraPose(np.eye(3), -ANCHOR_CENTER, fx, fy, cx, cy, size, size)


# ------------------------------------------------------------------ model


class SrtModel(nn.Module):
    def __init__(self, cfg: SrtConfig | None = None, **overrides):
        super().__init__()
        cfg = cfg or SrtConfig()
        for k, v in overrides.items():
            setattr(cfg, k, v)
        self.cfg = cfg
        D, P = cfg.dim, cfg.patch_size
        if P not in (2, 4, 8, 16):
            raise ValueError("patch_size must be a power of two between 2 and 16")
        n_down = int(np.log2(P))
        chans = [3] + [max(D // 2 ** (n_down - 1 - i), 8) for i in range(n_down)]
        chans[-1] = D
        layers = []
        for i in range(n_down):
            layers.append(nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1))
            if i < n_down - 1:
                layers.append(nn.GELU())
        self.patchifier = nn.Sequential(*layers)
        nf = cfg.n_freqs
        self.patch_pos = nn.Linear(sinusoidal_dim(2, nf), D)
        self.intrinsics_enc = nn.Linear(sinusoidal_dim(4, nf), D)
        self.camera_enc = nn.Linear(sinusoidal_dim(6, nf), D)
        self.view_id = nn.Embedding(2, D)
        self.encoder = nn.ModuleList(SelfAttentionBlock(D, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.enc_depth))
        self.ray_enc = nn.Linear(sinusoidal_dim(6, nf), D)
        self.decoder = nn.ModuleList(CrossAttentionBlock(D, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.dec_depth))
        self.dec_norm = nn.LayerNorm(D)
        self.rgb_head = nn.Sequential(nn.Linear(D, D), nn.GELU(), nn.Linear(D, 3))

    # --- pieces of the forward pass

    def patch_tokens(self, images: torch.Tensor, intrinsics: torch.Tensor) -> torch.Tensor:
        """``(B, N, 3, H, W)`` images in [0, 1] -> ``(B, N*h*w, D)`` tokens."""
        B, N, _, H, W = images.shape
        P = self.cfg.patch_size
        if H % P or W % P:
            raise ShapeError(f"image size {H}x{W} not divisible by patch size {P}")
        h, w = H // P, W // P
        feats = self.patchifier(images.reshape(B * N, 3, H, W) * 2 - 1)
        feats = feats.flatten(2).transpose(1, 2).reshape(B, N, h * w, -1)
        dt = feats.dtype
        nf = self.cfg.n_freqs
        rows, cols = torch.meshgrid(torch.arange(h, device=images.device), torch.arange(w, device=images.device),
                                    indexing="ij")
        pos = torch.stack([(cols + 0.5) / w * 2 - 1, (rows + 0.5) / h * 2 - 1], -1).reshape(-1, 2).to(dt)
        feats = feats + self.patch_pos(sinusoidal(pos, nf))[None, None]
        feats = feats + self.intrinsics_enc(sinusoidal(intrinsics.to(dt), nf))[:, :, None]
        ids = torch.ones(N, dtype=torch.long, device=images.device)
        ids[0] = 0
        feats = feats + self.view_id(ids)[None, :, None]
        cam = self.camera_enc(sinusoidal(self._anchor_patch_plucker(intrinsics[:, 0], h, w, P).to(dt), nf))
        feats = torch.cat([feats[:, :1] + cam[:, None], feats[:, 1:]], dim=1)
        return feats.reshape(B, N * h * w, -1)

    @staticmethod
    def _anchor_patch_plucker(intr: torch.Tensor, h: int, w: int, P: int) -> torch.Tensor:
        """Plücker coordinates of the anchor's patch-center rays, ``(B, h*w, 6)``."""
        W, H = w * P, h * P
        fx, fy, cx, cy = intr[:, 0] * W, intr[:, 1] * H, intr[:, 2] * W, intr[:, 3] * H
        dev = intr.device
        u = (torch.arange(w, device=dev, dtype=intr.dtype) + 0.5) * P
        v = (torch.arange(h, device=dev, dtype=intr.dtype) + 0.5) * P
        vv, uu = torch.meshgrid(v, u, indexing="ij")
        x = (uu[None] - cx[:, None, None]) / fx[:, None, None]
        y = (vv[None] - cy[:, None, None]) / fy[:, None, None]
        d = torch.stack([x, y, torch.ones_like(x)], -1)
        d = d / d.norm(dim=-1, keepdim=True)
        o = torch.tensor(ANCHOR_CENTER, dtype=intr.dtype, device=dev).expand_as(d)
        return torch.cat([d, torch.cross(o, d, dim=-1)], -1).reshape(intr.shape[0], h * w, 6)

    def encode_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        x = tokens
        for blk in self.encoder:
            x = blk(x)
        return x

    def decode_rays(self, plucker: torch.Tensor, set_latent: torch.Tensor) -> torch.Tensor:
        """``(B, R, 6)`` Plücker rays -> ``(B, R, D)`` features."""
        q = self.ray_enc(sinusoidal(plucker.to(set_latent.dtype), self.cfg.n_freqs))
        for blk in self.decoder:
            q = blk(q, set_latent)
        return self.dec_norm(q)

    def rgb(self, features: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.rgb_head(features))

    def forward(self, images, intrinsics, plucker):
        c_s = self.encode_tokens(self.patch_tokens(images, intrinsics))
        return self.rgb(self.decode_rays(plucker, c_s))


# ------------------------------------------------------- functional ops


def _device(model):
    return next(model.parameters()).device


def _dtype(model):
    return next(model.parameters()).dtype


def patchify(model: SrtModel, images: ImageSet):
    """Per-patch tokens ``(T, D)`` and their provenance ``(T, 3)``."""
    dev, dt = _device(model), _dtype(model)
    x = torch.from_numpy(images.images).to(dev, dt).permute(0, 3, 1, 2)[None]
    intr = torch.from_numpy(images.intrinsics).to(dev, dt)[None]
    tokens = model.patch_tokens(x, intr)[0]
    P = model.cfg.patch_size
    N, H, W = images.images.shape[:3]
    h, w = H // P, W // P
    idx, rows, cols = np.meshgrid(np.arange(N), np.arange(h), np.arange(w), indexing="ij")
    prov = np.stack([idx, rows, cols], -1).reshape(-1, 3)
    return tokens, prov


def encode(model: SrtModel, tokens, provenance=None) -> SetLatent:
    if isinstance(tokens, tuple):
        tokens, provenance = tokens
    if not torch.isfinite(tokens).all():
        raise ValueError("tokens must be finite")
    out = model.encode_tokens(tokens[None])[0]
    return SetLatent(out, provenance)


def decode(model: SrtModel, query: RayGrid, c_s: SetLatent) -> DecoderFeatures:
    """Per-ray features; every ray is decoded independently of the others."""
    h, w = query.shape
    pl = torch.from_numpy(query.plucker().reshape(1, h * w, 6)).to(_device(model), _dtype(model))
    tokens = c_s.tokens if c_s.tokens.dim() == 3 else c_s.tokens[None]
    feats = model.decode_rays(pl, tokens)
    return DecoderFeatures(feats.reshape(h, w, -1))


def render_rgb(model: SrtModel, c_d: DecoderFeatures) -> torch.Tensor:
    f = c_d.features if isinstance(c_d, DecoderFeatures) else c_d
    if not torch.isfinite(f).all():
        raise ValueError("features must be finite")
    return model.rgb(f)


def srt_loss(pred_rgb, gt_rgb, mask=None):
    """Mean squared error against the white-composited target."""
    if tuple(pred_rgb.shape) != tuple(gt_rgb.shape):
        raise ShapeError(f"prediction {tuple(pred_rgb.shape)} vs target {tuple(gt_rgb.shape)}")
    if mask is not None:
        if tuple(mask.shape) != tuple(gt_rgb.shape[:-1]):
            raise ShapeError(f"mask {tuple(mask.shape)} vs target {tuple(gt_rgb.shape[:-1])}")
        m = mask[..., None]
        gt_rgb = gt_rgb * m + (1 - m)
    return ((pred_rgb - gt_rgb) ** 2).mean()


# --------------------------------------------------------------- training


class SceneBank:
    """In-memory training scenes with cached anchored poses."""

    def __init__(self, scenes: dict[int, list]):
        if not scenes:
            raise ValueError("no scenes")
        self.ids = sorted(scenes)
        first = scenes[self.ids[0]]
        self.size = first[0].image.shape[0]
        self.images = {s: np.stack([r.image_float() for r in scenes[s]]) for s in self.ids}
        self.masks = {s: np.stack([r.mask for r in scenes[s]]).astype(np.float32) for s in self.ids}
        self.poses = {s: [r.pose for r in scenes[s]] for s in self.ids}
        self._anchored: dict[tuple[int, int], list[CameraPose]] = {}

    @classmethod
    def from_dataset(cls, dataset, scene_ids=None):
        ids = dataset.split("train") if scene_ids is None else scene_ids
        return cls({s: dataset.load_scene(s) for s in ids})

    def n_views(self, s):
        return len(self.poses[s])

    def anchored(self, s: int, anchor: int) -> list[CameraPose]:
        key = (s, anchor)
        if key not in self._anchored:
            self._anchored[key] = anchored_poses(self.poses[s], anchor)
        return self._anchored[key]


def anchored_poses(poses: Sequence[CameraPose], anchor: int) -> list[CameraPose]:
    """All poses re-expressed in the frame anchored on ``poses[anchor]``.

    The origin is solved from every available view; output keeps the input order.
    """
    order = [anchor] + [i for i in range(len(poses)) if i != anchor]
    _, out = anchor_frame([poses[i] for i in order])
    result = [None] * len(poses)
    for i, p in zip(order, out):
        result[i] = p
    return result


def sample_batch(bank: SceneBank, rng: np.random.Generator, batch_size: int, n_context: int,
                 rays_per_view: int | None):
    """Random (context, query rays, target colours) batch with a shared context size."""
    imgs, intr, pls, tgts = [], [], [], []
    for _ in range(batch_size):
        s = bank.ids[rng.integers(len(bank.ids))]
        V = bank.n_views(s)
        perm = rng.permutation(V)
        ctx = perm[:n_context]
        rest = perm[n_context:]
        q = int(rest[0]) if len(rest) else int(perm[0])
        poses = bank.anchored(s, int(ctx[0]))
        ctx_imgs = bank.images[s][ctx]
        grid = camera_rays(poses[q])
        pl = grid.plucker().reshape(-1, 6)
        tgt = bank.images[s][q].reshape(-1, 3)
        if rays_per_view is not None and rays_per_view < len(pl):
            sel = rng.choice(len(pl), rays_per_view, replace=False)
            pl, tgt = pl[sel], tgt[sel]
        imgs.append(ctx_imgs)
        intr.append(np.stack([normalized_intrinsics(bank.poses[s][i]) for i in ctx]))
        pls.append(pl)
        tgts.append(tgt)
    return (np.stack(imgs).transpose(0, 1, 4, 2, 3), np.stack(intr), np.stack(pls), np.stack(tgts))


class SceneTransformer(BaseEstimator):
    """Estimator around :class:`SrtModel`.

    ``fit`` trains on a dataset handle (or ``{scene_id: [ViewRecord]}``),
    ``transform`` maps context images to a set latent and ``predict``
    renders query poses given in the anchored frame.
    """

    def __init__(self, image_size=64, patch_size=8, dim=256, heads=8, enc_depth=8, dec_depth=4,
                 mlp_ratio=4, n_freqs=6, lr=1e-4, n_steps=50_000, batch_size=8, rays_per_view=1024,
                 max_context=3, warmup_steps=1000, grad_clip=1.0, log_every=500, random_state=0,
                 device="auto"):
        self.image_size = image_size
        self.patch_size = patch_size
        self.dim = dim
        self.heads = heads
        self.enc_depth = enc_depth
        self.dec_depth = dec_depth
        self.mlp_ratio = mlp_ratio
        self.n_freqs = n_freqs
        self.lr = lr
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.rays_per_view = rays_per_view
        self.max_context = max_context
        self.warmup_steps = warmup_steps
        self.grad_clip = grad_clip
        self.log_every = log_every
        self.random_state = random_state
        self.device = device

    def _config(self) -> SrtConfig:
        return SrtConfig(self.image_size, self.patch_size, self.dim, self.heads, self.enc_depth,
                         self.dec_depth, self.mlp_ratio, self.n_freqs)

    def _init_model(self):
        torch.manual_seed(self.random_state)
        self.model_ = SrtModel(self._config()).to(resolve_device(self.device))
        self.history_ = []
        self.n_steps_done_ = 0
        return self

    def fit(self, X, y=None, callback=None):
        bank = X if isinstance(X, SceneBank) else (
            SceneBank(X) if isinstance(X, dict) else SceneBank.from_dataset(X))
        if not hasattr(self, "model_"):
            self._init_model()
        self.partial_fit(bank, self.n_steps, callback=callback)
        return self

    def partial_fit(self, bank: SceneBank, n_steps: int, callback=None):
        if not hasattr(self, "model_"):
            self._init_model()
        model = self.model_
        dev = _device(model)
        if not hasattr(self, "optimizer_"):
            self.optimizer_ = torch.optim.Adam(model.parameters(), lr=self.lr)
            self.rng_ = np.random.default_rng(self.random_state)
        model.train()
        t0 = time.time()
        for _ in range(n_steps):
            step = self.n_steps_done_
            for g in self.optimizer_.param_groups:
                g["lr"] = self.lr * min(1.0, (step + 1) / max(self.warmup_steps, 1))
            n_ctx = int(self.rng_.integers(1, self.max_context + 1))
            imgs, intr, pl, tgt = sample_batch(bank, self.rng_, self.batch_size, n_ctx, self.rays_per_view)
            imgs, intr, pl, tgt = (torch.from_numpy(a).float().to(dev) for a in (imgs, intr, pl, tgt))
            pred = model(imgs, intr, pl)
            loss = srt_loss(pred, tgt)
            self.optimizer_.zero_grad()
            loss.backward()
            if self.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), self.grad_clip)
            self.optimizer_.step()
            self.history_.append(loss.item())
            self.n_steps_done_ += 1
            if self.log_every and self.n_steps_done_ % self.log_every == 0:
                recent = np.mean(self.history_[-self.log_every:])
                log.info("srt step %d loss %.5f (%.1fs)", self.n_steps_done_, recent, time.time() - t0)
            if callback is not None:
                callback(self.n_steps_done_, self.history_[-1])
        model.eval()
        return self

    # --- inference

    def transform(self, X) -> SetLatent:
        """Context images (``ImageSet`` or ``(N, H, W, 3)`` array) -> set latent."""
        check_is_fitted(self, "model_")
        images = ImageSet.coerce(X)
        with torch.no_grad():
            return encode(self.model_, patchify(self.model_, images))

    def decode_features(self, set_latent: SetLatent, pose: CameraPose) -> DecoderFeatures:
        check_is_fitted(self, "model_")
        with torch.no_grad():
            return decode(self.model_, camera_rays(pose), set_latent)

    def predict(self, X, poses: Sequence[CameraPose]) -> np.ndarray:
        """Render each anchored-frame pose; returns ``(len(poses), H, W, 3)``."""
        c_s = self.transform(X)
        out = []
        with torch.no_grad():
            for p in poses:
                feats = self.decode_features(c_s, p)
                out.append(render_rgb(self.model_, feats).cpu().numpy())
        return np.stack(out)

    def score(self, X, poses, y) -> float:
        """Negative render MSE against ``y`` (so that higher is better)."""
        pred = self.predict(X, poses)
        return -float(np.mean((pred - np.asarray(y, dtype=np.float32)) ** 2))

    def hyperparameters(self) -> dict:
        return asdict(self._config())
