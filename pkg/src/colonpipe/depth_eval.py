"""Trajectory-global scale/shift alignment, depth metrics and bootstrap CIs.

A single affine map is fitted per sequence (never per frame), either on
depth or on disparity (1/depth).  Metrics follow the usual Eigen et al.
conventions: AbsRel, SqRel, RMSE (mm) and delta1 with the strict
``max(d'/d, d/d') < 1.25`` test.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

DOMAINS = ("depth", "disparity")
METRICS = ("delta1", "abs_rel", "sq_rel", "rmse_mm")
DELTA1_THRESHOLD = 1.25


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DepthFrame:
    values: np.ndarray
    mask: np.ndarray


@dataclass(frozen=True, eq=False)
class DepthSequence:
    """``values`` and ``mask`` are stacked ``(F, H, W)`` arrays."""

    values: np.ndarray
    mask: np.ndarray
    n_excluded: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        m = np.asarray(self.mask, dtype=bool)
        if v.ndim == 2:
            v, m = v[None], m[None]
        if v.ndim != 3 or v.shape != m.shape:
            raise ValueError(f"values {v.shape} and mask {m.shape} must be matching (F, H, W)")
        if v.shape[0] < 1:
            raise ValueError("sequence must have at least one frame")
        sel = v[m]
        if not (np.all(np.isfinite(sel)) and np.all(sel > 0)):
            raise ValueError("masked-in depths must be finite and positive")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "mask", m)

    @classmethod
    def from_arrays(cls, values, mask=None) -> "DepthSequence":
        """Build a sequence, deriving the mask from finite positive values."""
        v = np.asarray(values, dtype=np.float64)
        valid = np.isfinite(v) & (v > 0)
        m = valid if mask is None else (np.asarray(mask, bool) & valid)
        return cls(np.where(m, v, 0.0), m)

    @classmethod
    def from_frames(cls, frames: Sequence[DepthFrame]) -> "DepthSequence":
        if not frames:
            raise ValueError("sequence must have at least one frame")
        return cls(np.stack([f.values for f in frames]), np.stack([f.mask for f in frames]))

    @property
    def frames(self) -> list[DepthFrame]:
        return [DepthFrame(v, m) for v, m in zip(self.values, self.mask)]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def __len__(self) -> int:
        return self.values.shape[0]

    def subset(self, idx) -> "DepthSequence":
        return DepthSequence(self.values[idx], self.mask[idx])


@dataclass(frozen=True)
class AlignmentParams:
    alpha: float
    beta: float
    domain: str = "depth"
    degenerate: bool = False
    n_pixels: int = 0

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}")
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise ValueError("alignment parameters must be finite")
        if self.alpha <= 0:
            log.warning("non-positive alignment scale alpha=%g", self.alpha)


@dataclass
class MetricReport:
    delta1: float
    abs_rel: float
    sq_rel: float
    rmse_mm: float
    n_pixels: int
    ci_low: dict = field(default_factory=dict)
    ci_high: dict = field(default_factory=dict)
    n_resamples: int = 0
    seed: int | None = None
    resample_unit: str = "frame"
    degenerate_ci: bool = False
    n_excluded: int = 0

    def value(self, name: str) -> float:
        return getattr(self, name)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _check_pair(pred: DepthSequence, gt: DepthSequence) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")


def _to_domain(values: np.ndarray, domain: str) -> np.ndarray:
    return values if domain == "depth" else 1.0 / values


def align_scale_shift(pred: DepthSequence, gt: DepthSequence, domain: str = "depth") -> AlignmentParams:
    """Least-squares (alpha, beta) minimising sum (alpha*x_pred + beta - x_gt)^2.

    ``x`` is depth or disparity per ``domain``; the sum runs over every
    jointly valid pixel of the whole sequence.  Sums are accumulated per
    frame in extended precision and reduced in frame order.
    """
    _check_pair(pred, gt)
    if domain not in DOMAINS:
        raise ValueError(f"domain must be one of {DOMAINS}")
    joint = pred.mask & gt.mask
    n = int(joint.sum())
    if n == 0:
        raise AlignmentError("joint valid mask is empty")
    ld = np.longdouble
    xs_hat, xs = [], []
    s_hat = ld(0)
    s = ld(0)
    for f in range(len(pred)):
        m = joint[f]
        xh = _to_domain(pred.values[f][m], domain).astype(ld)
        x = _to_domain(gt.values[f][m], domain).astype(ld)
        xs_hat.append(xh)
        xs.append(x)
        s_hat += xh.sum()
        s += x.sum()
    mean_hat = s_hat / n
    mean = s / n
    sxx = ld(0)
    sxy = ld(0)
    for xh, x in zip(xs_hat, xs):
        dh = xh - mean_hat
        sxx += (dh * dh).sum()
        sxy += (dh * (x - mean)).sum()
    scale = max(float(abs(mean_hat)), 1e-300)
    if float(sxx) <= (1e-12 * scale) ** 2 * n:
        log.warning("prediction has zero variance; alignment is rank-deficient")
        return AlignmentParams(1.0, float(mean - mean_hat), domain, degenerate=True, n_pixels=n)
    alpha = sxy / sxx
    beta = mean - alpha * mean_hat
    return AlignmentParams(float(alpha), float(beta), domain, n_pixels=n)


def alignment_objective(pred: DepthSequence, gt: DepthSequence, alpha: float, beta: float,
                        domain: str = "depth") -> float:
    joint = pred.mask & gt.mask
    xh = _to_domain(pred.values[joint], domain)
    x = _to_domain(gt.values[joint], domain)
    r = alpha * xh + beta - x
    return float(np.dot(r, r))


def apply_alignment(pred: DepthSequence, params: AlignmentParams) -> DepthSequence:
    """Map predictions through the fitted affine map, back to depth.

    Pixels whose aligned depth is non-positive or non-finite are dropped
    from the mask and counted in ``n_excluded``.
    """
    v = pred.values
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if params.domain == "depth":
            out = params.alpha * v + params.beta
        else:
            out = 1.0 / (params.alpha / v + params.beta)
    ok = pred.mask & np.isfinite(out) & (out > 0)
    excluded = int(pred.mask.sum() - ok.sum())
    if excluded:
        log.info("%d aligned pixels are non-positive and were excluded", excluded)
    return DepthSequence(np.where(ok, out, 0.0), ok, n_excluded=excluded + pred.n_excluded)


def _frame_sums(pred: DepthSequence, gt: DepthSequence) -> np.ndarray:
    """Per-frame ``[n, sum absrel, sum sqrel, sum sq err, count delta1]``."""
    joint = pred.mask & gt.mask
    out = np.zeros((len(pred), 5))
    for f in range(len(pred)):
        m = joint[f]
        d_hat = pred.values[f][m]
        d = gt.values[f][m]
        err = d_hat - d
        ratio = np.maximum(d_hat / d, d / d_hat)
        out[f] = (m.sum(), np.sum(np.abs(err) / d), np.sum(err * err / d),
                  np.sum(err * err), np.count_nonzero(ratio < DELTA1_THRESHOLD))
    return out


def _metrics_from_totals(tot: np.ndarray) -> np.ndarray:
    """``tot`` is ``(..., 5)``; returns ``(..., 4)`` in METRICS order."""
    n = tot[..., 0]
    return np.stack([tot[..., 4] / n, tot[..., 1] / n, tot[..., 2] / n,
                     np.sqrt(tot[..., 3] / n)], axis=-1)


def compute_metrics(pred_aligned: DepthSequence, gt: DepthSequence) -> MetricReport:
    _check_pair(pred_aligned, gt)
    sums = _frame_sums(pred_aligned, gt)
    tot = sums.sum(axis=0)
    if tot[0] == 0:
        raise ValueError("joint valid mask is empty")
    vals = _metrics_from_totals(tot)
    return MetricReport(*map(float, vals), n_pixels=int(tot[0]), n_excluded=pred_aligned.n_excluded)


def bootstrap_ci(pred_aligned: DepthSequence, gt: DepthSequence, n_resamples: int = 1000,
                 seed: int = 0, unit: str = "frame", level: float = 0.95) -> MetricReport:
    """Percentile bootstrap over frames (or pixels, with ``unit="pixel"``).

    Each resample draws frames with replacement and pools their pixels.
    Percentile bounds are widened if needed so they always bracket the
    point estimate.
    """
    if n_resamples < 1:
        raise ValueError("n_resamples must be >= 1")
    report = compute_metrics(pred_aligned, gt)
    if unit == "frame":
        sums = _frame_sums(pred_aligned, gt)
    elif unit == "pixel":
        joint = pred_aligned.mask & gt.mask
        d_hat = pred_aligned.values[joint]
        d = gt.values[joint]
        err = d_hat - d
        sums = np.stack([np.ones_like(d), np.abs(err) / d, err * err / d, err * err,
                         (np.maximum(d_hat / d, d / d_hat) < DELTA1_THRESHOLD).astype(float)], axis=1)
    else:
        raise ValueError("unit must be 'frame' or 'pixel'")
    k = len(sums)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, k, size=(n_resamples, k))
    weights = np.stack([np.bincount(row, minlength=k) for row in idx]).astype(float)
    tot = weights @ sums
    with np.errstate(invalid="ignore", divide="ignore"):
        boot = _metrics_from_totals(tot)
    boot = boot[np.isfinite(boot).all(axis=1)]
    lo_q, hi_q = 100 * (1 - level) / 2, 100 * (1 + level) / 2
    point = np.array([report.value(m) for m in METRICS])
    lo = np.minimum(np.percentile(boot, lo_q, axis=0), point)
    hi = np.maximum(np.percentile(boot, hi_q, axis=0), point)
    report.ci_low = {m: float(x) for m, x in zip(METRICS, lo)}
    report.ci_high = {m: float(x) for m, x in zip(METRICS, hi)}
    report.n_resamples = n_resamples
    report.seed = seed
    report.resample_unit = unit
    report.degenerate_ci = k < 2
    if k < 2:
        log.warning("bootstrap over a single %s: confidence intervals are degenerate", unit)
    return report


def evaluate(pred: DepthSequence, gt: DepthSequence, domain: str = "depth",
             n_resamples: int = 1000, seed: int = 0) -> tuple[AlignmentParams, MetricReport]:
    """Align, score and bootstrap in one call."""
    params = align_scale_shift(pred, gt, domain)
    aligned = apply_alignment(pred, params)
    if n_resamples > 0:
        report = bootstrap_ci(aligned, gt, n_resamples, seed)
    else:
        report = compute_metrics(aligned, gt)
    return params, report
