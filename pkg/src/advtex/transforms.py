"""Differentiable placement, warping, and regularization losses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import torch
import torch.nn.functional as F

from .core import BoundingBox, LatentTextureMap, PatchSpec, as_pixels


def compute_patch_edge(box: BoundingBox, c0: float, kappa: float) -> float:
    """Side length of the square patch worn on `box`: kappa * c0 * diagonal."""
    d = box.diagonal
    if not math.isfinite(d) or d <= 0.0:
        raise ValueError(f"degenerate bounding box (diagonal {d})")
    if c0 <= 0.0 or kappa <= 0.0:
        raise ValueError(f"c0 and kappa must be positive (got c0={c0}, kappa={kappa})")
    return kappa * c0 * d


@dataclass(frozen=True)
class EotParams:
    """One sampled appearance/placement transform."""

    dx_frac: float = 0.0  # translation as a fraction of the patch edge
    dy_frac: float = 0.0
    rotation_deg: float = 0.0
    brightness_delta: float = 0.0
    contrast_factor: float = 1.0
    noise_sigma: float = 0.0

    @classmethod
    def identity(cls) -> "EotParams":
        return cls()


@dataclass(frozen=True)
class EotRanges:
    """Uniform sampling ranges for EotParams."""

    translate: float = 0.1
    rotation_deg: float = 20.0
    brightness: float = 0.1
    contrast: tuple[float, float] = (0.8, 1.2)
    noise_sigma: float = 0.02

    def sample(self, rng: torch.Generator) -> EotParams:
        def u(lo: float, hi: float) -> float:
            return float(torch.empty(1).uniform_(lo, hi, generator=rng))

        return EotParams(
            dx_frac=u(-self.translate, self.translate),
            dy_frac=u(-self.translate, self.translate),
            rotation_deg=u(-self.rotation_deg, self.rotation_deg),
            brightness_delta=u(-self.brightness, self.brightness),
            contrast_factor=u(self.contrast[0], self.contrast[1]),
            noise_sigma=self.noise_sigma,
        )

    @classmethod
    def none(cls) -> "EotRanges":
        return cls(translate=0.0, rotation_deg=0.0, brightness=0.0, contrast=(1.0, 1.0), noise_sigma=0.0)


def color_jitter(pixels: torch.Tensor, params: EotParams, rng: torch.Generator | None = None) -> torch.Tensor:
    """Contrast/brightness/noise part of EoT, clamped back to [0, 1]."""
    out = pixels * params.contrast_factor + params.brightness_delta
    if params.noise_sigma > 0.0:
        if rng is None:
            raise ValueError("noise_sigma > 0 requires an explicit generator")
        noise = torch.randn(pixels.shape, generator=rng, dtype=pixels.dtype)
        out = out + params.noise_sigma * noise
    return out.clamp(0.0, 1.0)


def composite_patch(
    image: torch.Tensor,
    patch_pixels: torch.Tensor,
    center: tuple[float, float],
    edge: float,
    rotation_deg: float = 0.0,
) -> torch.Tensor:
    """Paste a square patch of side `edge` at `center`, rotated, via bilinear warp.

    Differentiable in both image and patch pixels. The warp inverse-maps each
    canvas pixel into patch coordinates, so gradients flow through the same
    bilinear weights used for rendering.
    """
    h, w = int(image.shape[0]), int(image.shape[1])
    if edge > min(h, w):
        raise ValueError(f"patch edge {edge:.2f} exceeds canvas {w}x{h}")
    ph, pw = int(patch_pixels.shape[0]), int(patch_pixels.shape[1])
    dtype = image.dtype
    cx, cy = center
    half = edge / 2.0
    # keep the axis-aligned footprint on the canvas
    cx = min(max(cx, half), w - half)
    cy = min(max(cy, half), h - half)

    ys = torch.arange(h, dtype=dtype) + 0.5
    xs = torch.arange(w, dtype=dtype) + 0.5
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    rx, ry = gx - cx, gy - cy
    theta = math.radians(rotation_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    # rotate by -theta to undo the patch's rotation on the canvas
    u = (cos_t * rx + sin_t * ry) / half
    v = (-sin_t * rx + cos_t * ry) / half
    grid = torch.stack((u, v), dim=-1).unsqueeze(0)

    src = patch_pixels.to(dtype).permute(2, 0, 1).unsqueeze(0)
    warped = F.grid_sample(src, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    ones = torch.ones((1, 1, ph, pw), dtype=dtype)
    alpha = F.grid_sample(ones, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    out = image * (1.0 - alpha[0, 0].unsqueeze(-1)) + warped[0].permute(1, 2, 0)
    return out.clamp(0.0, 1.0)


def apply_eot_patch(
    image,
    patch: PatchSpec | torch.Tensor,
    box: BoundingBox,
    params: EotParams = EotParams(),
    rng: torch.Generator | None = None,
    c0: float | None = None,
    kappa: float | None = None,
) -> torch.Tensor:
    """Composite a patch onto the wearer's box under one EoT sample.

    Sizing follows the patch's own (c0, kappa) unless overridden. Color jitter
    and pixel noise are applied to the patch before warping so the canvas
    outside the patch is untouched.
    """
    pixels = as_pixels(image)
    if isinstance(patch, PatchSpec):
        p, use_c0, use_kappa = patch.pixels, patch.c0, patch.kappa
    else:
        p = patch
        use_c0, use_kappa = 0.2, 1.0
    if c0 is not None:
        use_c0 = c0
    if kappa is not None:
        use_kappa = kappa
    edge = compute_patch_edge(box, use_c0, use_kappa)
    p = color_jitter(p, params, rng)
    bx, by = box.center
    cx = bx + params.dx_frac * edge
    cy = by + params.dy_frac * edge
    return composite_patch(pixels, p, (cx, cy), edge, params.rotation_deg)


# --- thin-plate spline -------------------------------------------------------

def _tps_kernel(r2: torch.Tensor) -> torch.Tensor:
    # U(r) = r^2 log r, with U(0) = 0
    return torch.where(r2 > 0, 0.5 * r2 * torch.log(r2.clamp_min(1e-30)), torch.zeros_like(r2))


@dataclass(frozen=True)
class TpsWarp:
    """Inverse map for a thin-plate-spline warp, fitted in float64.

    Control points are given as (x, y) pixel coordinates: `src` positions move
    to `dst` positions. Internally we fit dst -> src, because rendering pulls
    each output pixel back to its source location.
    """

    sites: torch.Tensor  # (N, 2) float64, the dst control points
    coeffs: torch.Tensor  # (N + 3, 2) float64, kernel weights then affine part

    @classmethod
    def fit(cls, src: torch.Tensor, dst: torch.Tensor) -> "TpsWarp":
        src = torch.as_tensor(src, dtype=torch.float64)
        dst = torch.as_tensor(dst, dtype=torch.float64)
        if src.shape != dst.shape or src.dim() != 2 or src.shape[1] != 2 or src.shape[0] < 3:
            raise ValueError("control points must be matching (N, 2) arrays with N >= 3")
        n = src.shape[0]
        d2 = torch.cdist(dst, dst).pow(2)
        k = _tps_kernel(d2)
        p = torch.cat([dst, torch.ones(n, 1, dtype=torch.float64)], dim=1)
        top = torch.cat([k, p], dim=1)
        bottom = torch.cat([p.t(), torch.zeros(3, 3, dtype=torch.float64)], dim=1)
        lhs = torch.cat([top, bottom], dim=0)
        rhs = torch.cat([src, torch.zeros(3, 2, dtype=torch.float64)], dim=0)
        try:
            coeffs = torch.linalg.solve(lhs, rhs)
        except RuntimeError as exc:
            raise ValueError(f"degenerate control grid: {exc}") from exc
        if not torch.isfinite(coeffs).all():
            raise ValueError("degenerate control grid: non-finite solution")
        return cls(sites=dst, coeffs=coeffs)

    def map_points(self, pts: torch.Tensor) -> torch.Tensor:
        """Map output-space (x, y) points to their source locations."""
        pts = torch.as_tensor(pts, dtype=torch.float64)
        d2 = torch.cdist(pts, self.sites).pow(2)
        k = _tps_kernel(d2)
        n = self.sites.shape[0]
        w, a = self.coeffs[:n], self.coeffs[n:]
        return k @ w + pts @ a[:2] + a[2]


def tps_grid(image_shape: tuple[int, int], grid: tuple[int, int] = (4, 4), margin: float = 0.0) -> torch.Tensor:
    """Regular (rows x cols) control-point grid over an image, (N, 2) xy pixels."""
    h, w = image_shape
    rows, cols = grid
    ys = torch.linspace(margin, h - 1 - margin, rows, dtype=torch.float64)
    xs = torch.linspace(margin, w - 1 - margin, cols, dtype=torch.float64)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=1)


def tps_warp(image, warp: TpsWarp) -> torch.Tensor:
    """Resample an image through a fitted TPS map (bilinear, border padding)."""
    pixels = as_pixels(image)
    h, w = int(pixels.shape[0]), int(pixels.shape[1])
    ys = torch.arange(h, dtype=torch.float64)
    xs = torch.arange(w, dtype=torch.float64)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    pts = torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=1)
    mapped = warp.map_points(pts).reshape(h, w, 2)
    # pixel index -> normalized align_corners=False coordinate
    u = (2.0 * (mapped[..., 0] + 0.5) / w - 1.0).to(pixels.dtype)
    v = (2.0 * (mapped[..., 1] + 0.5) / h - 1.0).to(pixels.dtype)
    grid = torch.stack((u, v), dim=-1).unsqueeze(0)
    src = pixels.permute(2, 0, 1).unsqueeze(0)
    out = F.grid_sample(src, grid, mode="bilinear", padding_mode="border", align_corners=False)
    return out[0].permute(1, 2, 0)


def random_tps(
    image_shape: tuple[int, int],
    rng: torch.Generator,
    grid: tuple[int, int] = (4, 4),
    jitter_frac: float = 0.05,
) -> TpsWarp:
    """TPS with control points nudged by at most jitter_frac of the short side."""
    src = tps_grid(image_shape, grid)
    amp = jitter_frac * min(image_shape)
    delta = (torch.rand(src.shape, generator=rng, dtype=torch.float32) * 2.0 - 1.0) * amp
    return TpsWarp.fit(src, src + delta.to(torch.float64))


# --- crops -------------------------------------------------------------------

def toroidal_crop(texture: torch.Tensor, top_left: tuple[int, int], size: tuple[int, int]) -> torch.Tensor:
    """Crop with wraparound on both axes; differentiable (pure indexing)."""
    th, tw = int(texture.shape[0]), int(texture.shape[1])
    ch, cw = size
    if ch < 1 or cw < 1:
        raise ValueError(f"crop size must be positive, got {size}")
    i, j = top_left
    rows = (torch.arange(ch) + int(i)) % th
    cols = (torch.arange(cw) + int(j)) % tw
    return texture[rows][:, cols]


def jitter_offset(latent: LatentTextureMap, mode: str, rng: torch.Generator | None = None) -> tuple[int, int]:
    """Crop origin (row, col) for a latent texture.

    Training draws uniformly over the full jitter margin; evaluation uses the
    fixed centered origin (floor(0.5 * gamma * base)).
    """
    mh, mw = latent.margin
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode jitter requires an explicit generator")
        i = int(torch.randint(0, mh + 1, (1,), generator=rng))
        j = int(torch.randint(0, mw + 1, (1,), generator=rng))
        return (i, j)
    if mode == "eval":
        return (math.floor(0.5 * latent.gamma * latent.base_h), math.floor(0.5 * latent.gamma * latent.base_w))
    raise ValueError(f"unknown jitter mode {mode!r} (expected 'train' or 'eval')")


def jitter_crop(latent: LatentTextureMap, mode: str, rng: torch.Generator | None = None) -> torch.Tensor:
    """(base_h, base_w, 3) crop of the latent map at the mode's origin."""
    i, j = jitter_offset(latent, mode, rng)
    return latent.pixels[i : i + latent.base_h, j : j + latent.base_w]


# --- losses ------------------------------------------------------------------

TV_EPS = 1e-8


def tv_loss(texture: torch.Tensor, eps: float = TV_EPS) -> torch.Tensor:
    """Isotropic total variation, smoothed so the gradient exists everywhere.

    Mean over the (H-1) x (W-1) interior of sqrt(dh^2 + dv^2 + eps^2), where
    dh/dv are forward differences (summed over channels via the norm).
    """
    if texture.dim() == 2:
        texture = texture.unsqueeze(-1)
    h, w = texture.shape[0], texture.shape[1]
    if h < 2 or w < 2:
        raise ValueError(f"texture must be at least 2x2, got {h}x{w}")
    dh = texture[:-1, 1:] - texture[:-1, :-1]
    dv = texture[1:, :-1] - texture[:-1, :-1]
    mag = torch.sqrt(dh.pow(2).sum(-1) + dv.pow(2).sum(-1) + eps * eps)
    return mag.mean()


def nps_loss(pixels: torch.Tensor, printable: torch.Tensor) -> torch.Tensor:
    """Mean distance from each pixel to its nearest printable color (RGB L2)."""
    if printable.dim() != 2 or printable.shape[1] != 3 or printable.shape[0] == 0:
        raise ValueError("printable set must be a non-empty (K, 3) array")
    flat = pixels.reshape(-1, 3)
    dists = torch.cdist(flat, printable.to(flat.dtype))
    return dists.min(dim=1).values.mean()


def load_printable_colors(path: Path | str | None = None) -> torch.Tensor:
    """Printable-color set as a (K, 3) float tensor in [0, 1].

    File format: one 'r g b' triple per line, 0..255 integers, '#' comments.
    Defaults to the 30-color set shipped with the package.
    """
    if path is None:
        text = resources.files("advtex.data").joinpath("printable_colors.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 'r g b', got {line!r}")
        rows.append([float(p) for p in parts])
    if not rows:
        raise ValueError("printable color file contains no colors")
    return torch.tensor(rows, dtype=torch.float32) / 255.0
