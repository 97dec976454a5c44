"""Deterministic image operations applied before depth inference."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu


@dataclass(eq=False)
class ImageFrame:
    """``channels`` is C x H x W with values in [0, 1]."""

    channels: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        c = np.asarray(self.channels, dtype=np.float64)
        if c.ndim == 2:
            c = c[None]
        if c.ndim != 3:
            raise ValueError("channels must be C x H x W")
        if not np.all(np.isfinite(c)):
            raise ValueError("image values must be finite")
        self.channels = c
        if self.mask is not None:
            self.mask = np.asarray(self.mask, bool)
            if self.mask.shape != c.shape[1:]:
                raise ValueError("mask shape must match image H x W")

    @property
    def shape(self):
        return self.channels.shape

    @property
    def luminance(self) -> np.ndarray:
        return self.channels.mean(axis=0)

    @classmethod
    def from_hwc(cls, arr) -> "ImageFrame":
        a = np.asarray(arr)
        scale = 255.0 if a.dtype == np.uint8 else (65535.0 if a.dtype == np.uint16 else 1.0)
        a = a.astype(np.float64) / scale
        return cls(a if a.ndim == 2 else np.moveaxis(a, -1, 0))

    def to_hwc(self) -> np.ndarray:
        c = self.channels
        return c[0] if c.shape[0] == 1 else np.moveaxis(c, 0, -1)


def _frame(img) -> ImageFrame:
    return img if isinstance(img, ImageFrame) else ImageFrame(img)


def specular_mask(img, patch: int = 16, sigma_k: float = 3.0) -> np.ndarray:
    """Flag pixels brighter than ``mean + sigma_k * std`` of their block.

    Blocks are non-overlapping ``patch x patch`` tiles (smaller at the right
    and bottom edges); std is the population standard deviation.  Blocks
    with zero spread flag nothing.
    """
    if patch < 2:
        raise ValueError("patch must be >= 2")
    lum = _frame(img).luminance
    h, w = lum.shape
    out = np.zeros((h, w), bool)
    for y in range(0, h, patch):
        for x in range(0, w, patch):
            blk = lum[y:y + patch, x:x + patch]
            sd = blk.std()
            if sd > 0:
                out[y:y + patch, x:x + patch] = blk > blk.mean() + sigma_k * sd
    return out


def inpaint_masked(img, mask, tol: float = 1e-6) -> ImageFrame:
    """Fill masked pixels with the discrete harmonic interpolant of their surroundings.

    Each masked pixel equals the mean of its in-image 4-neighbours (zero
    flux across the image border).  The sparse system is solved directly;
    the solution's residual is checked against ``tol``.
    """
    f = _frame(img)
    mask = np.asarray(mask, bool)
    c, h, w = f.shape
    if mask.shape != (h, w):
        raise ValueError("mask shape must match image")
    if mask.all():
        raise ValueError("cannot inpaint a fully masked image")
    out = f.channels.copy()
    if not mask.any():
        return ImageFrame(out, f.mask)
    ys, xs = np.nonzero(mask)
    n = len(ys)
    index = -np.ones((h, w), int)
    index[ys, xs] = np.arange(n)
    rows, cols, vals = [], [], []
    rhs = np.zeros((n, c))
    deg = np.zeros(n)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ny, nx = ys + dy, xs + dx
        inside = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        deg += inside
        k = np.flatnonzero(inside)
        nb = index[ny[k], nx[k]]
        unknown = nb >= 0
        rows.append(k[unknown])
        cols.append(nb[unknown])
        vals.append(-np.ones(unknown.sum()))
        known = k[~unknown]
        rhs[known] += f.channels[:, ny[known], nx[known]].T
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(deg)
    a = sparse.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    lu = splu(a)
    sol = lu.solve(rhs)
    res = np.abs(a @ sol - rhs).max()
    if res > tol:
        raise RuntimeError(f"harmonic inpainting residual {res:.3g} exceeds {tol}")
    out[:, ys, xs] = sol.T
    return ImageFrame(out, f.mask)


def adain(content, style) -> ImageFrame:
    """Re-centre and re-scale each content channel to the style's mean and std."""
    cf, sf = _frame(content), _frame(style)
    if cf.shape[0] != sf.shape[0]:
        raise ValueError("content and style must have the same channel count")
    out = np.empty_like(cf.channels)
    for i in range(cf.shape[0]):
        x = cf.channels[i]
        mu_c, sd_c = x.mean(), x.std()
        mu_s, sd_s = sf.channels[i].mean(), sf.channels[i].std()
        out[i] = mu_s if sd_c == 0 else sd_s * (x - mu_c) / sd_c + mu_s
    return ImageFrame(out, cf.mask)


# -- local histogram matching -------------------------------------------------

def _cdf(values: np.ndarray, bins: int, prior: float) -> np.ndarray:
    """Piecewise-linear CDF at the ``bins + 1`` edges of [0, 1]."""
    counts, _ = np.histogram(np.clip(values, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    counts = counts + prior * max(values.size, 1) / bins
    c = np.concatenate([[0.0], np.cumsum(counts)])
    return c / c[-1]


def tile_maps(img: np.ndarray, ref: np.ndarray, tile: int, bins: int = 256, prior: float = 1e-3,
              lut_size: int = 4097) -> np.ndarray:
    """Lookup tables ``(ny, nx, lut_size)`` mapping img intensities to ref per tile."""
    h, w = img.shape
    ny, nx = math.ceil(h / tile), math.ceil(w / tile)
    edges = np.linspace(0.0, 1.0, bins + 1)
    grid = np.linspace(0.0, 1.0, lut_size)
    luts = np.empty((ny, nx, lut_size))
    for ty in range(ny):
        for tx in range(nx):
            sl = (slice(ty * tile, (ty + 1) * tile), slice(tx * tile, (tx + 1) * tile))
            f_img = _cdf(img[sl], bins, prior)
            f_ref = _cdf(ref[sl], bins, prior)
            luts[ty, tx] = np.interp(np.interp(grid, edges, f_img), f_ref, edges)
    return luts


def _lut_eval(luts, ty, tx, v):
    n = luts.shape[-1] - 1
    pos = np.clip(v, 0.0, 1.0) * n
    i0 = np.minimum(pos.astype(int), n - 1)
    a = pos - i0
    return (1 - a) * luts[ty, tx, i0] + a * luts[ty, tx, i0 + 1]


def local_hist_match(img, reference, tile: int = 64, bins: int = 256, blend: bool = True,
                     prior: float = 1e-3) -> ImageFrame:
    """Tile-wise quantile mapping of ``img`` onto ``reference``, per channel.

    Each tile's map is ``F_ref^-1(F_img(v))`` with 256-bin piecewise-linear
    CDFs (a small uniform prior keeps them invertible).  With ``blend``, each
    pixel bilinearly mixes the maps of the four nearest tile centres.
    """
    if tile < 8:
        raise ValueError("tile must be >= 8")
    f, r = _frame(img), _frame(reference)
    if f.shape != r.shape:
        raise ValueError("image and reference must have the same shape")
    c, h, w = f.shape
    out = np.empty_like(f.channels)
    yy, xx = np.mgrid[0:h, 0:w]
    ty_raw, tx_raw = yy // tile, xx // tile
    if blend:
        ny, nx = math.ceil(h / tile), math.ceil(w / tile)
        cy = (np.arange(ny) + 0.5) * tile
        cx = (np.arange(nx) + 0.5) * tile
        fy = np.clip((yy + 0.5 - cy[0]) / tile, 0.0, ny - 1)
        fx = np.clip((xx + 0.5 - cx[0]) / tile, 0.0, nx - 1)
        y0 = np.minimum(fy.astype(int), max(ny - 2, 0))
        x0 = np.minimum(fx.astype(int), max(nx - 2, 0))
        y1 = np.minimum(y0 + 1, ny - 1)
        x1 = np.minimum(x0 + 1, nx - 1)
        wy = fy - y0
        wx = fx - x0
    for ch in range(c):
        luts = tile_maps(f.channels[ch], r.channels[ch], tile, bins, prior)
        v = f.channels[ch]
        if not blend:
            out[ch] = _lut_eval(luts, ty_raw, tx_raw, v)
            continue
        out[ch] = ((1 - wy) * ((1 - wx) * _lut_eval(luts, y0, x0, v) + wx * _lut_eval(luts, y0, x1, v))
                   + wy * ((1 - wx) * _lut_eval(luts, y1, x0, v) + wx * _lut_eval(luts, y1, x1, v)))
    return ImageFrame(np.clip(out, 0.0, 1.0), f.mask)


def attenuate(img, factor: float) -> ImageFrame:
    if not 0 < factor <= 1:
        raise ValueError("factor must lie in (0, 1]")
    f = _frame(img)
    return ImageFrame(np.clip(f.channels * factor, 0.0, 1.0), f.mask)


def truncated_steps(total_steps: int, alpha: float) -> int:
    """Number of inversion steps kept: floor(alpha * T), at least 1."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    # the epsilon keeps products like 0.29 * 100 from flooring to 28
    return max(1, int(math.floor(alpha * total_steps + 1e-9)))
