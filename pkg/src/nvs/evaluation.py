"""Image metrics for unposed view synthesis.

Predictions of an unposed method live in a coordinate frame that is only
determined up to scale and shift, so besides plain PSNR/SSIM we report
aligned variants: a single affine image warp is fitted to minimize the L2
error between prediction and ground truth, and the metrics are computed on
the warped prediction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .validation import check_image, check_image_pair

PSNR_CAP = 100.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def psnr(x, y) -> float:
    x, y = check_image_pair(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    return g / g.sum()


def _to_gray(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=-1) if x.ndim == 3 else x


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim_map(x, y) -> np.ndarray:
    x, y = check_image_pair(x, y)
    x, y = _to_gray(x), _to_gray(y)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels on each side")
    g = gaussian_window()
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx**2 + my**2 + c1) * (sxx + syy + c2))


def ssim(x, y) -> float:
    """Mean SSIM over all valid 11x11 Gaussian windows of the gray images."""
    return float(ssim_map(x, y).mean())


@dataclass(frozen=True)
class AffineWarp:
    """Pull-back warp on normalized coordinates in [-1, 1].

    ``warped(u) = image(A @ u + b)`` with ``u = (x, y)`` and the corners of
    the image at +-1 (pixel centers). Samples falling outside the image read
    as white.
    """

    A: np.ndarray = field(default_factory=lambda: np.eye(2))
    b: np.ndarray = field(default_factory=lambda: np.zeros(2))

    @classmethod
    def identity(cls) -> "AffineWarp":
        return cls()

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.A).reshape(-1), np.asarray(self.b).reshape(-1)])

    def offset_pixels(self, width: int, height: int) -> np.ndarray:
        return np.asarray(self.b) * np.array([(width - 1) / 2, (height - 1) / 2])

    def apply(self, image) -> np.ndarray:
        img = check_image(image)
        gray = img.ndim == 2
        if gray:
            img = img[..., None]
        t = torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1)[None]
        theta = torch.from_numpy(np.concatenate([self.A, np.asarray(self.b)[:, None]], axis=1))[None]
        out = warp_images(t, theta.to(t.dtype))[0].permute(1, 2, 0).numpy()
        return out[..., 0] if gray else out


def warp_images(images: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    """Batched pull-back affine warp with white padding.

    ``images`` is ``(B, C, H, W)`` and ``theta`` is ``(B, 2, 3)``.
    """
    grid = F.affine_grid(theta, list(images.shape), align_corners=True)
    return F.grid_sample(images - 1.0, grid, mode="bilinear", padding_mode="zeros",
                         align_corners=True) + 1.0


def fit_affine_warp(pred, gt, *, n_iter=500, lr=1e-2, n_starts=5, jitter=0.02, seed=0) -> AffineWarp:
    """L2-optimal affine warp from ``pred`` to ``gt``.

    Runs Adam with cosine-decayed step size from ``n_starts`` initializations
    (the first is exactly the identity, the rest are jittered around it) and
    keeps the best. The identity is always a candidate, so the returned warp
    never scores worse than leaving the prediction alone.
    """
    pred, gt = check_image_pair(pred, gt)
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    src = torch.from_numpy(np.ascontiguousarray(pred)).permute(2, 0, 1)[None]
    dst = torch.from_numpy(np.ascontiguousarray(gt)).permute(2, 0, 1)[None]
    gen = torch.Generator().manual_seed(int(seed))
    eye = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=torch.float64)
    init = eye.repeat(n_starts, 1, 1)
    if n_starts > 1:
        init[1:] += jitter * torch.randn(n_starts - 1, 2, 3, generator=gen, dtype=torch.float64)
    theta = init.clone().requires_grad_(True)
    srcb = src.expand(n_starts, -1, -1, -1)
    dstb = dst.expand(n_starts, -1, -1, -1)
    opt = torch.optim.Adam([theta], lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(n_iter, 1))

    def losses(th):
        return ((warp_images(srcb[: th.shape[0]], th) - dstb[: th.shape[0]]) ** 2).flatten(1).mean(1)

    for _ in range(n_iter):
        opt.zero_grad()
        losses(theta).sum().backward()
        opt.step()
        sched.step()
    with torch.no_grad():
        final = losses(theta)
        ident = losses(eye[None])[0]
    k = int(torch.argmin(final))
    if final[k] < ident:
        best = theta[k].detach().numpy()
    else:
        best = eye.numpy()
    return AffineWarp(A=best[:, :2].copy(), b=best[:, 2].copy())


def warp_l2(warp: AffineWarp, pred, gt) -> float:
    return float(np.mean((warp.apply(pred) - check_image(gt)) ** 2))


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    psnr_a: float
    ssim_a: float
    warp: AffineWarp
    lpips_a: float | None = None  # needs a pretrained perceptual net; not computed
    per_view: list = field(default_factory=list)


def aligned_metrics(pred, gt, **fit_kwargs) -> MetricReport:
    """Plain and aligned PSNR/SSIM sharing one L2-fitted warp.

    Aligned scores are the best of the fitted warp and the identity, which
    keeps ``psnr_a >= psnr`` and ``ssim_a >= ssim``.
    """
    pred, gt = check_image_pair(pred, gt)
    warp = fit_affine_warp(pred, gt, **fit_kwargs)
    warped = np.clip(warp.apply(pred), 0.0, 1.0)
    p, s = psnr(pred, gt), ssim(pred, gt)
    return MetricReport(
        psnr=p,
        ssim=s,
        psnr_a=max(p, psnr(warped, gt)),
        ssim_a=max(s, ssim(warped, gt)),
        warp=warp,
    )


class AffineAligner(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit(pred, gt)`` learns the warp, ``transform`` applies it."""

    def __init__(self, n_iter=500, lr=1e-2, n_starts=5, jitter=0.02, random_state=0):
        self.n_iter = n_iter
        self.lr = lr
        self.n_starts = n_starts
        self.jitter = jitter
        self.random_state = random_state

    def fit(self, X, y):
        self.warp_ = fit_affine_warp(
            X, y, n_iter=self.n_iter, lr=self.lr, n_starts=self.n_starts,
            jitter=self.jitter, seed=self.random_state,
        )
        return self

    def transform(self, X):
        check_is_fitted(self, "warp_")
        return self.warp_.apply(X)

    def score(self, X, y):
        """PSNR of the aligned prediction."""
        return psnr(np.clip(self.transform(X), 0, 1), y)


# ----------------------------------------------------------------- reports

CSV_COLUMNS = [
    "instance", "bucket", "method", "n_views", "view_id",
    "psnr", "ssim", "psnr_a", "ssim_a",
    "a11", "a12", "a21", "a22", "b1", "b2",
]


def report_row(instance, bucket, method, n_views, view_id, rep: MetricReport) -> dict:
    A = np.asarray(rep.warp.A)
    b = np.asarray(rep.warp.b)
    return {
        "instance": instance, "bucket": bucket, "method": method,
        "n_views": int(n_views), "view_id": view_id,
        "psnr": rep.psnr, "ssim": rep.ssim, "psnr_a": rep.psnr_a, "ssim_a": rep.ssim_a,
        "a11": A[0, 0], "a12": A[0, 1], "a21": A[1, 0], "a22": A[1, 1],
        "b1": b[0], "b2": b[1],
    }


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def summary_rows(rows: Iterable[dict]) -> list[dict]:
    """Per-(bucket, method, n_views) means plus an overall mean per (method, n_views)."""
    rows = list(rows)
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["bucket"], r["method"], int(r["n_views"])), []).append(r)
        groups.setdefault(("all", r["method"], int(r["n_views"])), []).append(r)
    out = []
    for (bucket, method, n), rs in sorted(groups.items(), key=lambda kv: (kv[0][0] != "all", kv[0])):
        row = {"instance": "mean", "bucket": bucket, "method": method, "n_views": n, "view_id": "mean"}
        for col in CSV_COLUMNS[5:]:
            row[col] = float(np.mean([float(r[col]) for r in rs]))
        out.append(row)
    return out


def write_metrics_csv(rows: Iterable[dict], path) -> None:
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows + summary_rows(rows):
            w.writerow({k: _fmt(r[k]) for k in CSV_COLUMNS})


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for col in CSV_COLUMNS[5:]:
            r[col] = float(r[col])
        r["n_views"] = int(r["n_views"])
    return rows
