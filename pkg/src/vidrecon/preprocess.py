"""Temporal alignment, voxel selection and noise ceilings."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .simulator import FmriSeries, HrfKernel, VideoClip, convolve_causal

log = logging.getLogger(__name__)

SNR_CAP = 1e6


class UndefinedCorrelation(ValueError):
    """Raised when a correlation involves a constant vector."""


class NoValidShift(ValueError):
    pass


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson expects two 1-D vectors of equal length")
    if x.size < 2:
        raise ValueError("need at least 2 samples")
    xc = x - x.mean()
    yc = y - y.mean()
    nx = np.sqrt(xc @ xc)
    ny = np.sqrt(yc @ yc)
    if nx == 0 or ny == 0:
        raise UndefinedCorrelation("constant input")
    return float(np.clip((xc @ yc) / (nx * ny), -1.0, 1.0))


def columnwise_pearson(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pearson r of matching columns of two (T, K) arrays.

    Returns (r, valid); columns where either side is constant get r = 0 and
    valid = False.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    na = np.sqrt((ac ** 2).sum(axis=0))
    nb = np.sqrt((bc ** 2).sum(axis=0))
    valid = (na > 1e-12 * np.maximum(1.0, np.abs(a).max(axis=0))) & \
            (nb > 1e-12 * np.maximum(1.0, np.abs(b).max(axis=0)))
    r = np.zeros(a.shape[1])
    r[valid] = (ac[:, valid] * bc[:, valid]).sum(axis=0) / (na[valid] * nb[valid])
    return np.clip(r, -1.0, 1.0), valid


def cross_pearson(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(Ka, Kb) matrix of correlations between columns; constant columns -> nan."""
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    na = np.sqrt((ac ** 2).sum(axis=0))
    nb = np.sqrt((bc ** 2).sum(axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (ac.T @ bc) / np.outer(na, nb)
    r[~np.isfinite(r)] = np.nan
    r[na < 1e-12, :] = np.nan
    r[:, nb < 1e-12] = np.nan
    return r


# --------------------------------------------------------------------------
# Alignment
# --------------------------------------------------------------------------

@dataclass
class AlignmentResult:
    best_shift_trs: int
    per_shift_median_corr: dict[int, float]
    hrf_lag_trs: int = 0

    @property
    def pairing_offset_trs(self) -> int:
        """Offset from a clip's TR index to the fMRI sample it is paired with."""
        return self.best_shift_trs + self.hrf_lag_trs

    def to_json(self) -> dict:
        return {"best_shift_trs": self.best_shift_trs,
                "hrf_lag_trs": self.hrf_lag_trs,
                "per_shift_median_corr": {str(k): v for k, v in self.per_shift_median_corr.items()}}

    @classmethod
    def from_json(cls, d) -> "AlignmentResult":
        return cls(d["best_shift_trs"], {int(k): v for k, v in d["per_shift_median_corr"].items()},
                   d.get("hrf_lag_trs", 0))


def sample_every_tr(video: VideoClip, tr_seconds: float, n: int | None = None) -> np.ndarray:
    """Middle frame of each TR window: (n, H, W, C)."""
    k = int(round(video.frame_rate_hz * tr_seconds))
    total = video.n_frames // k
    n = total if n is None else min(n, total)
    return video.frames[np.arange(n) * k + k // 2]


def find_temporal_alignment(fmri: FmriSeries | Sequence[FmriSeries],
                            video: VideoClip | Sequence[VideoClip],
                            shifts: Sequence[int],
                            feature_fn: Callable[[np.ndarray], np.ndarray],
                            hrf: HrfKernel | None = None,
                            min_overlap: int = 4) -> AlignmentResult:
    """Pick the fMRI lag that maximizes the median best-feature correlation.

    ``feature_fn`` maps (N, H, W, C) frames to (N, F) features. If ``hrf`` is
    given, feature series are first convolved with it, so the returned shift
    is the residual delay beyond the kernel; ``hrf_lag_trs`` records the
    kernel's peak so ``pairing_offset_trs`` is the full clip-to-sample lag.
    Several (fmri, video) segments may be passed; they are pooled per shift.
    """
    if not len(shifts):
        raise ValueError("no shifts to search")
    if isinstance(fmri, FmriSeries):
        fmri, video = [fmri], [video]
    segs = []
    for f, v in zip(fmri, video):
        feats = np.asarray(feature_fn(sample_every_tr(v, f.tr_seconds, f.n_samples)), dtype=np.float64)
        if hrf is not None:
            feats = convolve_causal(feats, hrf.taps)
        segs.append((f.samples, feats))

    medians: dict[int, float] = {}
    for s in shifts:
        ys, xs = [], []
        for y, x in segs:
            # response at sample t is driven by features at t - s
            t0, t1 = max(0, s), min(len(y), len(x) + s)
            if t1 - t0 < min_overlap:
                continue
            ys.append(y[t0:t1])
            xs.append(x[t0 - s:t1 - s])
        if not ys or sum(len(a) for a in ys) < min_overlap:
            log.warning("shift %d skipped: overlap too short", s)
            continue
        r = cross_pearson(np.concatenate(ys), np.concatenate(xs))
        with np.errstate(all="ignore"):
            best = np.where(np.all(np.isnan(r), axis=1), -np.inf,
                            np.nanmax(np.where(np.isnan(r), -np.inf, r), axis=1))
        medians[int(s)] = float(np.median(best))
    if not medians:
        raise NoValidShift("every shift was skipped")
    top = max(medians.values())
    best_shift = min(s for s, m in medians.items() if m == top)
    return AlignmentResult(best_shift, medians, hrf.peak_lag_trs if hrf is not None else 0)


# --------------------------------------------------------------------------
# Voxel reliability
# --------------------------------------------------------------------------

def _stack(repeats: Sequence[FmriSeries]) -> np.ndarray:
    if len(repeats) < 2:
        raise ValueError("need at least 2 repeats")
    shapes = {r.samples.shape for r in repeats}
    if len(shapes) != 1:
        raise ValueError(f"repeat shapes differ: {shapes}")
    return np.stack([r.samples for r in repeats])


def reproducibility_scores(repeats: Sequence[FmriSeries]) -> np.ndarray:
    """Mean inter-repeat Pearson r per voxel (constant traces score 0)."""
    data = _stack(repeats)
    k = len(data)
    acc = np.zeros(data.shape[2])
    n = 0
    for i in range(k):
        for j in range(i + 1, k):
            r, _ = columnwise_pearson(data[i], data[j])
            acc += r
            n += 1
    return acc / n


def voxel_snr(repeats: Sequence[FmriSeries]) -> np.ndarray:
    """Signal variance (over time, of the repeat mean) over noise variance
    (across repeats, averaged over time)."""
    data = _stack(repeats)
    signal = data.mean(axis=0).var(axis=0)
    noise = data.var(axis=0, ddof=1).mean(axis=0)
    out = np.empty_like(signal)
    tiny = noise < 1e-12
    out[~tiny] = signal[~tiny] / noise[~tiny]
    out[tiny] = np.where(signal[tiny] > 1e-12, SNR_CAP, 0.0)
    return np.minimum(out, SNR_CAP)


@dataclass
class VoxelSelection:
    reproducibility_scores: np.ndarray
    snr_scores: np.ndarray
    selected_indices: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "selected_indices": [int(i) for i in self.selected_indices],
            "reproducibility_scores": [float(x) for x in self.reproducibility_scores],
            "snr_scores": [float(x) for x in self.snr_scores],
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "VoxelSelection":
        d = json.loads(text)
        return cls(np.array(d["reproducibility_scores"]), np.array(d["snr_scores"]),
                   list(d["selected_indices"]))

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "VoxelSelection":
        return cls.from_json(Path(path).read_text())


def _top(scores: np.ndarray, candidates: np.ndarray, k: int) -> np.ndarray:
    # stable: ties resolved toward lower voxel index
    order = np.lexsort((candidates, -scores[candidates]))
    return candidates[order[:k]]


def select_voxels(repeats: Sequence[FmriSeries] | Sequence[Sequence[FmriSeries]],
                  reproducibility_top_k: int, snr_fraction: float = 0.5) -> VoxelSelection:
    """Top-k voxels by reproducibility, then the top fraction of those by SNR.

    ``repeats`` may be one list of repeats or several (one per segment);
    scores are then averaged over segments. Selected count is
    round(snr_fraction * k) (Python rounding, half to even).
    """
    groups = repeats if isinstance(repeats[0], (list, tuple)) else [repeats]
    rep = np.mean([reproducibility_scores(g) for g in groups], axis=0)
    snr = np.mean([voxel_snr(g) for g in groups], axis=0)
    v = rep.shape[0]
    if not 1 <= reproducibility_top_k <= v:
        raise ValueError(f"reproducibility_top_k={reproducibility_top_k} outside [1, {v}]")
    if not 0 < snr_fraction <= 1:
        raise ValueError("snr_fraction must be in (0, 1]")
    # constant traces are never selected
    moving = np.any([np.ptp(np.stack([r.samples for r in g]), axis=(0, 1)) > 1e-12 for g in groups], axis=0)
    usable = np.flatnonzero(moving)
    if len(usable) < reproducibility_top_k:
        usable = np.arange(v)
    stage1 = _top(rep, usable, reproducibility_top_k)
    n_keep = max(1, int(round(snr_fraction * len(stage1))))
    stage2 = _top(snr, stage1, n_keep)
    return VoxelSelection(rep, snr, sorted(int(i) for i in stage2))


def noise_ceiling(repeats: Sequence[FmriSeries]) -> np.ndarray:
    """Split-half reliability with Spearman-Brown correction, clipped to [0, 1].

    Repeats are split into even- and odd-indexed halves.
    """
    if len(repeats) < 2:
        raise ValueError("noise ceiling unavailable with a single repeat")
    data = _stack(repeats)
    a = data[0::2].mean(axis=0)
    b = data[1::2].mean(axis=0)
    r, valid = columnwise_pearson(a, b)
    # identical noiseless halves of a time-varying voxel
    same = np.all(np.isclose(a, b), axis=0) & (a.std(axis=0) > 1e-12)
    r[same] = 1.0
    sb = np.where(r > -1, 2 * r / (1 + r), 0.0)
    return np.clip(sb, 0.0, 1.0)
