"""Grad-CAM and Grad-CAM++ over captured token activations.

Both methods reduce the captured [tokens, channels] activation/gradient pair
to a g x g relevance grid: tokens (minus CLS) map to the patch grid in raster
order, channels are weighted by gradient statistics, and the weighted sum is
rectified and min-max normalized.  A constant map carries no ranking
information, so it normalizes to all zeros rather than dividing by zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .model import CaptureBundle, VitConfig


@dataclass
class Heatmap:
    """Single-channel relevance map with values in [0, 1]."""

    values: np.ndarray  # [height, width]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class SpatialActivation:
    """Token activations and gradients reshaped onto the patch grid (CLS dropped)."""

    grid: np.ndarray      # [g, g, channels]
    gradient: np.ndarray  # same shape


def minmax_normalize(values: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a constant map becomes all zeros."""
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def tokens_to_grid(capture: CaptureBundle, config: VitConfig) -> SpatialActivation:
    """Map tokens 1..g*g of the captured activation/gradient to a row-major grid."""
    if capture.gradient is None:
        raise ValueError("tokens_to_grid: run backward() before building the spatial activation")
    g = config.grid
    tokens = capture.captured.shape[0]
    if tokens != 1 + g * g:
        raise ShapeError(f"tokens_to_grid: {tokens} tokens do not match grid {g}x{g} + CLS")
    channels = capture.captured.shape[1]
    return SpatialActivation(
        grid=capture.captured[1:].reshape(g, g, channels).copy(),
        gradient=capture.gradient[1:].reshape(g, g, channels).copy(),
    )


def grad_cam(sa: SpatialActivation) -> Heatmap:
    """Channel weights = spatial mean of the gradient; map = ReLU of the weighted sum."""
    weights = sa.gradient.mean(axis=(0, 1))
    cam = np.maximum((sa.grid * weights).sum(axis=2), 0.0)
    return Heatmap(values=minmax_normalize(cam))


def grad_cam_pp(sa: SpatialActivation) -> Heatmap:
    """Second-order weighting under the exponential-score closed form.

    Per channel c and position ij, with g the first-order gradient:
        alpha_ij = g_ij^2 / (2 g_ij^2 + (sum_ab A_ab) * g_ij^3)
    (alpha = 0 where the denominator vanishes), and the channel weight is
    sum_ij alpha_ij * ReLU(g_ij).
    """
    g = sa.gradient
    g2 = g * g
    g3 = g2 * g
    sum_act = sa.grid.sum(axis=(0, 1))  # [channels]
    denom = 2.0 * g2 + sum_act * g3
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(denom != 0.0, g2 / denom, 0.0)
    weights = (alpha * np.maximum(g, 0.0)).sum(axis=(0, 1))
    cam = np.maximum((sa.grid * weights).sum(axis=2), 0.0)
    return Heatmap(values=minmax_normalize(cam))


def upsample_bilinear(h: Heatmap, target: int | tuple[int, int],
                      renormalize: bool = True) -> Heatmap:
    """Bilinear upsampling at pixel centers (align-corners=false semantics).

    Output pixel (i, j) samples the source at ((i+0.5)*sh/th - 0.5,
    (j+0.5)*sw/tw - 0.5) with edge clamping.  The result is min-max
    renormalized unless told otherwise.
    """
    th, tw = (target, target) if isinstance(target, int) else target
    sh, sw = h.values.shape
    if th < sh or tw < sw:
        raise ShapeError(f"upsample_bilinear: target {th}x{tw} smaller than source {sh}x{sw}")
    return resize_bilinear(h, (th, tw), renormalize=renormalize)


def resize_bilinear(h: Heatmap, target: int | tuple[int, int],
                    renormalize: bool = True) -> Heatmap:
    """Bilinear resampling in either direction (no antialiasing on downscale)."""
    th, tw = (target, target) if isinstance(target, int) else target
    sh, sw = h.values.shape
    if th < 1 or tw < 1:
        raise ShapeError(f"resize_bilinear: bad target {th}x{tw}")

    src_y = (np.arange(th) + 0.5) * (sh / th) - 0.5
    src_x = (np.arange(tw) + 0.5) * (sw / tw) - 0.5
    y0 = np.clip(np.floor(src_y).astype(int), 0, sh - 1)
    x0 = np.clip(np.floor(src_x).astype(int), 0, sw - 1)
    y1 = np.minimum(y0 + 1, sh - 1)
    x1 = np.minimum(x0 + 1, sw - 1)
    fy = np.clip(src_y - np.floor(src_y), 0.0, 1.0)
    fx = np.clip(src_x - np.floor(src_x), 0.0, 1.0)
    # clamp the fractional part where the sample lies outside the source
    fy = np.where(src_y < 0, 0.0, np.where(src_y > sh - 1, 1.0, fy))
    fx = np.where(src_x < 0, 0.0, np.where(src_x > sw - 1, 1.0, fx))

    v = h.values
    top = v[y0][:, x0] * (1 - fx) + v[y0][:, x1] * fx
    bot = v[y1][:, x0] * (1 - fx) + v[y1][:, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    if renormalize:
        out = minmax_normalize(out)
    return Heatmap(values=out)


def write_pgm(h: Heatmap, path) -> None:
    """8-bit binary PGM (P5)."""
    data = np.round(np.clip(h.values, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{h.width} {h.height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_raw_f32(h: Heatmap, path, sidecar_path=None, extra: dict | None = None) -> None:
    """Raw little-endian float32 payload plus a JSON sidecar with the geometry."""
    h.values.astype("<f4").tofile(path)
    sidecar = {"width": h.width, "height": h.height}
    if extra:
        sidecar.update(extra)
    if sidecar_path is None:
        sidecar_path = str(path) + ".json"
    with open(sidecar_path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_raw_f32(path, sidecar_path=None) -> Heatmap:
    if sidecar_path is None:
        sidecar_path = str(path) + ".json"
    with open(sidecar_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    values = np.fromfile(path, dtype="<f4").astype(np.float64)
    w, hgt = int(meta["width"]), int(meta["height"])
    if values.size != w * hgt:
        raise ShapeError(f"{path}: payload has {values.size} values, sidecar says {w}x{hgt}")
    return Heatmap(values=values.reshape(hgt, w))
