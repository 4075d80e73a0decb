"""Per-night digital biomarkers over the sleep depth index series, plus
whole-night summary metrics (total sleep time, sleep efficiency, area under
the SDI curve).

Biomarkers: RB (shallow-sleep ratio), CV, AP (average depth per sleep
epoch), SK (skewness), MDR (mean REM depth), PR (REM proportion), ApEn
(approximate entropy), and the DFA scaling exponent.
"""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass

import numpy as np

from .annotate import REM_THRESHOLD, SdiNight

EPOCH_MINUTES = 0.5
RB_THRESHOLD = 0.2
SLEEP_SDI_THRESHOLD = 0.2

FEATURE_COLUMNS = ("RB", "CV", "AP", "SK", "MDR", "PR", "APPe", "DETRf")
METRIC_COLUMNS = ("TST", "SE", "AUC")


def rb(sdi, threshold: float = RB_THRESHOLD) -> float:
    """Fraction of epochs with sdi below the shallow-sleep threshold."""
    sdi = np.asarray(sdi, dtype=np.float64)
    if sdi.size == 0:
        raise ValueError("empty sdi series")
    return float(np.count_nonzero(sdi < threshold) / sdi.size)


def ap(sdi, tst_epochs: int) -> float:
    """Sum of sdi over all epochs divided by the sleep-epoch count."""
    sdi = np.asarray(sdi, dtype=np.float64)
    if tst_epochs <= 0:
        raise ValueError("average depth undefined without sleep epochs")
    return float(sdi.sum() / tst_epochs)


def cv(sdi) -> float:
    """Coefficient of variation, sample (n-1) standard deviation over mean."""
    sdi = np.asarray(sdi, dtype=np.float64)
    if sdi.size < 3:
        raise ValueError("cv needs at least 3 epochs")
    mean = sdi.mean()
    if mean == 0:
        raise ValueError("cv undefined for zero-mean series")
    return float(sdi.std(ddof=1) / mean)


def skewness(sdi) -> float:
    """Adjusted Fisher-Pearson sample skewness; nan for a constant series."""
    sdi = np.asarray(sdi, dtype=np.float64)
    n = sdi.size
    if n < 3:
        raise ValueError("skewness needs at least 3 epochs")
    s = sdi.std(ddof=1)
    if s == 0:
        return float("nan")
    g1 = np.mean((sdi - sdi.mean()) ** 3) / sdi.std(ddof=0) ** 3
    return float(g1 * math.sqrt(n * (n - 1)) / (n - 2))


def mdr(sdi, rem_mask) -> float:
    """Mean sdi over REM epochs; nan (missing) when the night has no REM."""
    sdi = np.asarray(sdi, dtype=np.float64)
    rem_mask = np.asarray(rem_mask, dtype=bool)
    if sdi.shape != rem_mask.shape:
        raise ValueError("sdi and REM mask lengths differ")
    if not rem_mask.any():
        return float("nan")
    return float(sdi[rem_mask].mean())


def pr(rem_mask, tst_epochs: int) -> float:
    rem_mask = np.asarray(rem_mask, dtype=bool)
    if tst_epochs <= 0:
        raise ValueError("REM proportion undefined without sleep epochs")
    return float(rem_mask.sum() / tst_epochs)


def _phi(x: np.ndarray, m: int, r: float) -> float:
    """Mean log correlation integral for embedding dimension m (self-matches in)."""
    n = len(x)
    windows = np.lib.stride_tricks.sliding_window_view(x, m)
    # Chebyshev distance between all window pairs
    dist = np.abs(windows[:, None, :] - windows[None, :, :]).max(axis=-1)
    counts = (dist <= r).sum(axis=1) / (n - m + 1)
    return float(np.mean(np.log(counts)))


def apen(sdi, m: int = 2, r_factor: float = 0.2, sample_entropy: bool = False) -> float:
    """Approximate entropy with tolerance r = r_factor * population std.

    With sample_entropy=True, self-matches are excluded and the statistic is
    -log(A/B) over template matches of lengths m+1 and m.
    """
    x = np.asarray(sdi, dtype=np.float64)
    if x.size < 16:
        raise ValueError("entropy needs at least 16 epochs")
    sigma = x.std(ddof=0)
    if sigma == 0:
        return 0.0
    r = r_factor * sigma
    if sample_entropy:
        w_m = np.lib.stride_tricks.sliding_window_view(x[:-1], m)
        w_m1 = np.lib.stride_tricks.sliding_window_view(x, m + 1)
        d_m = np.abs(w_m[:, None, :] - w_m[None, :, :]).max(axis=-1)
        d_m1 = np.abs(w_m1[:, None, :] - w_m1[None, :, :]).max(axis=-1)
        b = ((d_m <= r).sum() - len(w_m)) / 2
        a = ((d_m1 <= r).sum() - len(w_m1)) / 2
        if a == 0 or b == 0:
            return float("inf")
        return float(-math.log(a / b))
    return _phi(x, m, r) - _phi(x, m + 1, r)


def dfa(sdi, min_box: int = 4, n_boxes: int = 12) -> float:
    """Detrended fluctuation scaling exponent (order-1 detrend).

    The mean-centered series is integrated; for log-spaced box sizes in
    [min_box, n/4], RMS fluctuations around per-box linear fits are computed
    over forward and reverse segmentations and averaged; the exponent is the
    least-squares slope of log F(s) against log s.
    """
    x = np.asarray(sdi, dtype=np.float64)
    n = x.size
    if n < 64:
        raise ValueError("dfa needs at least 64 epochs")
    profile = np.cumsum(x - x.mean())
    sizes = np.unique(np.round(np.geomspace(min_box, n // 4, n_boxes)).astype(int))
    t_full = np.arange(n, dtype=np.float64)
    fluct = []
    for s in sizes:
        n_seg = n // s
        rms = []
        for segs, prof in (
            (profile[: n_seg * s].reshape(n_seg, s), t_full[:s]),
            (profile[n - n_seg * s:].reshape(n_seg, s), t_full[:s]),
        ):
            # order-1 polynomial detrend per box
            coeffs = np.polynomial.polynomial.polyfit(prof, segs.T, 1)
            trend = coeffs[0][:, None] + coeffs[1][:, None] * prof[None, :]
            rms.append(np.mean((segs - trend) ** 2, axis=1))
        fluct.append(math.sqrt(np.mean(np.concatenate(rms))))
    slope = np.polynomial.polynomial.polyfit(np.log(sizes), np.log(fluct), 1)[1]
    return float(slope)


@dataclass
class BiomarkerVector:
    RB: float
    CV: float
    AP: float
    SK: float
    MDR: float  # nan when the night has no REM epochs
    PR: float
    APPe: float
    DETRf: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in FEATURE_COLUMNS])


@dataclass
class NightMetrics:
    TST: float  # minutes
    SE: float
    AUC: float  # index-minutes


def sleep_mask(night: SdiNight) -> np.ndarray:
    """Sleep epochs: staged non-W when labels exist, else sdi >= 0.2."""
    if night.stages is not None:
        return np.asarray(night.stages) != 0
    return night.sdi >= SLEEP_SDI_THRESHOLD


def night_metrics(night: SdiNight) -> NightMetrics:
    n = night.n_epochs
    if n < 1:
        raise ValueError("empty night")
    tst_epochs = int(sleep_mask(night).sum())
    tst = tst_epochs * EPOCH_MINUTES
    return NightMetrics(TST=tst, SE=tst / (n * EPOCH_MINUTES),
                        AUC=float(night.sdi.sum() * EPOCH_MINUTES))


def biomarker_vector(night: SdiNight, sample_entropy: bool = False) -> BiomarkerVector:
    """All eight biomarkers for one night.

    REM epochs come from stage labels when present, else from thresholded
    REM probabilities. MDR is nan for nights without REM.
    """
    sdi = night.sdi
    if night.stages is not None:
        rem_mask = np.asarray(night.stages) == 4
    else:
        rem_mask = night.rem_prob >= REM_THRESHOLD
    tst_epochs = int(sleep_mask(night).sum())
    return BiomarkerVector(
        RB=rb(sdi),
        CV=cv(sdi),
        AP=ap(sdi, tst_epochs) if tst_epochs else float("nan"),
        SK=skewness(sdi),
        MDR=mdr(sdi, rem_mask),
        PR=pr(rem_mask, tst_epochs) if tst_epochs else float("nan"),
        APPe=apen(sdi, sample_entropy=sample_entropy),
        DETRf=dfa(sdi),
    )


def feature_table_csv(rows: list[tuple[str, BiomarkerVector, NightMetrics]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("recording_id",) + FEATURE_COLUMNS + METRIC_COLUMNS)
    for rec_id, vec, met in rows:
        w.writerow([rec_id]
                   + [repr(float(getattr(vec, k))) for k in FEATURE_COLUMNS]
                   + [repr(float(getattr(met, k))) for k in METRIC_COLUMNS])
    return buf.getvalue()


def parse_feature_table(text: str) -> tuple[list[str], np.ndarray]:
    """Feature CSV -> (recording ids, (n, 11) value matrix, nan for missing)."""
    rows = list(csv.reader(io.StringIO(text)))
    expected = ("recording_id",) + FEATURE_COLUMNS + METRIC_COLUMNS
    if not rows or tuple(rows[0]) != expected:
        raise ValueError("not a biomarker feature table")
    ids = [r[0] for r in rows[1:]]
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return ids, values


def write_feature_table(rows, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(feature_table_csv(rows))
    os.replace(tmp, path)
