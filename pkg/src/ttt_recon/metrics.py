"""SSIM, normalized l1, and distribution-shift gap bookkeeping.

Evaluation-only code: operates on plain float arrays in double precision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .diffcore import Tensor
from .errors import DegenerateError, ShapeError

SSIM_WINDOW = 7
_K1 = 0.01
_K2 = 0.03

# At or below this, gap_before is treated as zero and fraction_closed is
# undefined (the adversarially-filtered regime, where the reference tables
# report no fraction for a 4e-4 gap).
GAP_EPS = 1e-3


def _as_f64(x) -> np.ndarray:
    if isinstance(x, Tensor):
        x = x.data
    return np.asarray(x, dtype=np.float64)


def ssim(x, ref, data_range: float) -> float:
    """Mean SSIM over all fully interior 7x7 uniform windows.

    C1 = (0.01 * data_range)^2, C2 = (0.03 * data_range)^2; variances and
    covariance are biased window moments.
    """
    xv, rv = _as_f64(x), _as_f64(ref)
    if xv.shape != rv.shape:
        raise ShapeError(f"ssim shapes differ: {xv.shape} vs {rv.shape}")
    if xv.ndim != 2:
        raise ShapeError(f"ssim expects 2-D images, got {xv.shape}")
    if xv.shape[0] < SSIM_WINDOW or xv.shape[1] < SSIM_WINDOW:
        raise ShapeError(f"ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {xv.shape}")
    if not data_range > 0:
        raise DegenerateError(f"data_range must be positive, got {data_range}")

    c1 = (_K1 * data_range) ** 2
    c2 = (_K2 * data_range) ** 2

    def wmean(a):
        return sliding_window_view(a, (SSIM_WINDOW, SSIM_WINDOW)).mean(axis=(2, 3))

    mx = wmean(xv)
    mr = wmean(rv)
    vx = wmean(xv * xv) - mx * mx
    vr = wmean(rv * rv) - mr * mr
    cov = wmean(xv * rv) - mx * mr
    num = (2 * mx * mr + c1) * (2 * cov + c2)
    den = (mx * mx + mr * mr + c1) * (vx + vr + c2)
    return float((num / den).mean())


def nl1(x, ref) -> float:
    """Normalized l1 distance ||x - ref||_1 / ||ref||_1."""
    xv, rv = _as_f64(x), _as_f64(ref)
    if xv.shape != rv.shape:
        raise ShapeError(f"nl1 shapes differ: {xv.shape} vs {rv.shape}")
    denom = np.abs(rv).sum()
    if denom == 0:
        raise DegenerateError("nl1 reference has zero l1 norm")
    return float(np.abs(xv - rv).sum() / denom)


@dataclass(frozen=True)
class GapReport:
    """Distribution-shift performance gap before/after test-time training."""

    ssim_QQ: float
    ssim_PQ: float
    ssim_QQ_ttt: float
    ssim_PQ_ttt: float
    gap_before: float
    gap_after: float
    fraction_closed: float | None  # None when gap_before <= GAP_EPS

    def to_json(self) -> str:
        return json.dumps(
            {
                "ssim_QQ": self.ssim_QQ,
                "ssim_PQ": self.ssim_PQ,
                "ssim_QQ_ttt": self.ssim_QQ_ttt,
                "ssim_PQ_ttt": self.ssim_PQ_ttt,
                "gap_before": self.gap_before,
                "gap_after": self.gap_after,
                "fraction_closed": self.fraction_closed,
            },
            indent=2,
            sort_keys=True,
        )

    def csv_row(self) -> str:
        frac = "" if self.fraction_closed is None else f"{self.fraction_closed:.6f}"
        return (
            f"{self.ssim_QQ:.6f},{self.ssim_PQ:.6f},{self.ssim_QQ_ttt:.6f},"
            f"{self.ssim_PQ_ttt:.6f},{self.gap_before:.6f},{self.gap_after:.6f},{frac}"
        )

    CSV_HEADER = "ssim_QQ,ssim_PQ,ssim_QQ_ttt,ssim_PQ_ttt,gap_before,gap_after,fraction_closed"


def gap_metrics(ssim_QQ: float, ssim_PQ: float, ssim_QQ_ttt: float, ssim_PQ_ttt: float) -> GapReport:
    """Gap arithmetic from the four mean SSIM scores.

    gap_before = SSIM(train on Q, test on Q) - SSIM(train on P, test on Q),
    gap_after the same with test-time training, fraction_closed their relative
    reduction; undefined (None) when gap_before <= GAP_EPS.
    """
    for v in (ssim_QQ, ssim_PQ, ssim_QQ_ttt, ssim_PQ_ttt):
        if not -1.0 <= v <= 1.0:
            raise DegenerateError(f"SSIM means must lie in [-1, 1], got {v}")
    gap_before = ssim_QQ - ssim_PQ
    gap_after = ssim_QQ_ttt - ssim_PQ_ttt
    if gap_before > GAP_EPS:
        fraction = (gap_before - gap_after) / gap_before
    else:
        fraction = None
    return GapReport(
        ssim_QQ=ssim_QQ,
        ssim_PQ=ssim_PQ,
        ssim_QQ_ttt=ssim_QQ_ttt,
        ssim_PQ_ttt=ssim_PQ_ttt,
        gap_before=gap_before,
        gap_after=gap_after,
        fraction_closed=fraction,
    )
