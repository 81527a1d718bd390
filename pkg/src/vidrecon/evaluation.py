"""Quantitative evaluation: identification ranks, image metrics, and the
significance machinery (block permutations, BH-FDR, Wilcoxon tests)."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
from scipy import stats

from .features import FeatureStack, normalized_features, pairwise_distances
from .preprocess import columnwise_pearson

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def to_luminance(frames) -> np.ndarray:
    """Grayscale copy with the channel count preserved."""
    frames = np.asarray(frames, dtype=np.float32)
    y = frames @ LUMA
    return np.repeat(y[..., None], frames.shape[-1], axis=-1)


# --------------------------------------------------------------------------
# n-way identification
# --------------------------------------------------------------------------

@dataclass
class IdentificationResult:
    ranks: list[int]
    n: int
    m: int
    seed: int
    distance_tag: str = "perceptual"

    @property
    def mean_rank(self) -> float:
        return float(np.mean(self.ranks))

    def to_dict(self) -> dict:
        return asdict(self) | {"mean_rank": self.mean_rank}


@dataclass
class DistractorPool:
    """Candidate m-frame clips drawn from one frame array.

    ``clips[q]`` holds frame indices into ``frames``; ``times`` gives each
    frame's timestamp (seconds) for overlap checks, or None to skip them.
    """
    frames: np.ndarray
    clips: np.ndarray
    times: np.ndarray | None = None

    def spans(self) -> np.ndarray:
        t = self.times[self.clips]
        return np.stack([t.min(axis=1), t.max(axis=1)], axis=1)


def build_distractor_pool(video_frames, m: int, spacing: int, frame_rate_hz: float) -> DistractorPool:
    """Every window of ``m`` frames ``spacing`` apart, at every start offset."""
    frames = np.asarray(video_frames, dtype=np.float32)
    starts = np.arange(frames.shape[0] - (m - 1) * spacing)
    clips = starts[:, None] + spacing * np.arange(m)[None, :]
    return DistractorPool(frames, clips, np.arange(frames.shape[0]) / frame_rate_hz)


def identification_test(recon_frames, gt_frames, distractor_pool: DistractorPool,
                        stack: FeatureStack, n: int = 100, m: int = 4, seed: int = 0,
                        gt_times=None, luminance: bool = False,
                        distance_tag: str = "perceptual") -> IdentificationResult:
    """Rank of each ground-truth clip among ``n`` candidates.

    Reconstructed frames are split into consecutive clips of ``m`` frames.
    Clip distance is the mean per-frame perceptual distance. Ties count
    against the ground truth.
    """
    recon = np.asarray(recon_frames, dtype=np.float32)
    gt = np.asarray(gt_frames, dtype=np.float32)
    if recon.shape != gt.shape:
        raise ValueError(f"recon {recon.shape} and gt {gt.shape} differ")
    n_clips = recon.shape[0] // m
    if n_clips < 1:
        raise ValueError("fewer than m reconstructed frames")
    pool_frames = distractor_pool.frames
    if luminance:
        recon, gt, pool_frames = to_luminance(recon), to_luminance(gt), to_luminance(pool_frames)
    rf = normalized_features(stack, recon[:n_clips * m])
    gf = normalized_features(stack, gt[:n_clips * m])
    pf = normalized_features(stack, pool_frames)
    d_pool = pairwise_distances(rf, pf).numpy()  # (K*m, P)
    d_gt = torch.stack([sum((a - b).norm(dim=1) for a, b in zip(rf, gf))]).numpy()[0]

    spans = distractor_pool.spans() if (gt_times is not None and distractor_pool.times is not None) else None
    gt_times = None if gt_times is None else np.asarray(gt_times, dtype=np.float64)
    rng = np.random.default_rng(seed)
    ranks = []
    for j in range(n_clips):
        sl = slice(j * m, (j + 1) * m)
        cand = np.arange(len(distractor_pool.clips))
        if spans is not None:
            lo, hi = gt_times[sl].min(), gt_times[sl].max()
            cand = cand[(spans[:, 1] < lo) | (spans[:, 0] > hi)]
        if len(cand) < n - 1:
            raise ValueError(f"only {len(cand)} non-overlapping distractors for n={n}")
        pick = rng.choice(cand, size=n - 1, replace=False)
        idx = distractor_pool.clips[pick]  # (n-1, m)
        dist = d_pool[np.arange(j * m, (j + 1) * m)[None, :], idx].mean(axis=1)
        own = d_gt[sl].mean()
        ranks.append(int(1 + np.sum(dist <= own)))
    return IdentificationResult(ranks, n, m, seed, distance_tag)


# --------------------------------------------------------------------------
# Image metrics
# --------------------------------------------------------------------------

def frame_metrics(a, b, luminance: bool = False) -> dict:
    from skimage.metrics import structural_similarity

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if luminance:
        a, b = a @ LUMA, b @ LUMA
    mse = float(np.mean((a - b) ** 2))
    psnr = math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)
    ssim = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                 use_sample_covariance=False,
                                 channel_axis=-1 if a.ndim == 3 else None)
    return {"mse": mse, "psnr_db": psnr, "ssim": float(ssim)}


def format_metrics(m: dict) -> str:
    psnr = "inf" if math.isinf(m["psnr_db"]) else f"{m['psnr_db']:.3f}"
    return f"SSIM {m['ssim']:.3f} | PSNR {psnr} | MSE {m['mse']:.4f}"


def mean_frame_metrics(recon, gt, luminance: bool = False) -> dict:
    rows = [frame_metrics(a, b, luminance) for a, b in zip(recon, gt)]
    return {k: float(np.mean([r[k] for r in rows])) for k in ("mse", "psnr_db", "ssim")}


# --------------------------------------------------------------------------
# Permutation significance
# --------------------------------------------------------------------------

def block_permutation(t: int, block_len: int, rng: np.random.Generator) -> np.ndarray:
    """Index permutation that shuffles contiguous blocks (last may be short)."""
    starts = np.arange(0, t, block_len)
    order = rng.permutation(len(starts))
    return np.concatenate([np.arange(starts[i], min(starts[i] + block_len, t)) for i in order])


def pvalue_from_null(null, r: float) -> float:
    """Fraction of null correlations at least as large as ``r``."""
    null = np.asarray(null, dtype=np.float64)
    return float(np.sum(null >= r) / null.size)


def permutation_null(true_series, pred_series, n_perm: int, block_len: int, seed: int) -> np.ndarray:
    """(n_perm, V) null correlations; both series block-permuted independently."""
    y = np.asarray(true_series, dtype=np.float64)
    x = np.asarray(pred_series, dtype=np.float64)
    if y.ndim == 1:
        y, x = y[:, None], x[:, None]
    if y.shape != x.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {x.shape}")
    t = y.shape[0]
    if not 1 <= block_len < t:
        raise ValueError(f"block_len must be in [1, {t}), got {block_len}")
    if n_perm < 1:
        raise ValueError("n_perm must be positive")
    rng = np.random.default_rng(seed)
    null = np.empty((n_perm, y.shape[1]))
    for i in range(n_perm):
        py = block_permutation(t, block_len, rng)
        px = block_permutation(t, block_len, rng)
        null[i], _ = columnwise_pearson(y[py], x[px])
    return null


def block_permutation_pvalues(true_series, pred_series, n_perm: int = 1000, block_len: int = 10,
                              seed: int = 0) -> np.ndarray:
    """Per-voxel permutation p-values.

    p = #{null >= r} / n_perm. A zero count is reported as 1 / (n_perm + 1),
    i.e. strictly below the 1 / n_perm resolution rather than zero.
    """
    if n_perm < 100:
        raise ValueError("n_perm must be >= 100")
    y = np.asarray(true_series, dtype=np.float64)
    x = np.asarray(pred_series, dtype=np.float64)
    if y.ndim == 1:
        y, x = y[:, None], x[:, None]
    r, _ = columnwise_pearson(y, x)
    null = permutation_null(y, x, n_perm, block_len, seed)
    counts = (null >= r[None, :] - 1e-12).sum(axis=0)
    return np.where(counts == 0, 1.0 / (n_perm + 1), counts / n_perm)


def bh_adjust(pvalues) -> np.ndarray:
    """Benjamini-Hochberg adjusted p-values (q-values)."""
    p = np.asarray(pvalues, dtype=np.float64)
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    q = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(q, 1.0)
    return out


def fdr_bh(pvalues, alpha: float = 0.05) -> np.ndarray:
    """Benjamini-Hochberg step-up rejection mask."""
    p = np.asarray(pvalues, dtype=np.float64)
    m = p.size
    if m == 0:
        return np.zeros(0, bool)
    order = np.argsort(p, kind="stable")
    below = p[order] <= alpha * np.arange(1, m + 1) / m
    mask = np.zeros(m, bool)
    if below.any():
        k = np.flatnonzero(below).max()
        mask[order[:k + 1]] = True
    return mask


@dataclass
class SignificanceReport:
    r: np.ndarray
    p: np.ndarray
    q: np.ndarray
    significant: np.ndarray
    n_perm: int
    block_len: int
    alpha: float
    constant_pred: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))

    @property
    def n_significant(self) -> int:
        return int(self.significant.sum())

    def summary_line(self) -> str:
        return f"{self.n_significant} (out of {len(self.significant)}) voxels had significant correlation"

    def to_dict(self) -> dict:
        return {"r": self.r.tolist(), "p": self.p.tolist(), "q": self.q.tolist(),
                "significant": self.significant.astype(bool).tolist(), "n_perm": self.n_perm,
                "block_len": self.block_len, "alpha": self.alpha,
                "n_significant": self.n_significant, "p_floor": 1.0 / (self.n_perm + 1)}


def significance_report(true_series, pred_series, n_perm: int = 1000, block_len: int = 10,
                        alpha: float = 0.05, seed: int = 0) -> SignificanceReport:
    y = np.asarray(true_series, dtype=np.float64)
    x = np.asarray(pred_series, dtype=np.float64)
    if not 1 <= block_len < y.shape[0]:
        raise ValueError(f"block_len must be in [1, {y.shape[0]})")
    r, valid = columnwise_pearson(y, x)
    p = block_permutation_pvalues(y, x, n_perm, block_len, seed)
    return SignificanceReport(r, p, bh_adjust(p), fdr_bh(p, alpha), n_perm, block_len, alpha, ~valid)


# --------------------------------------------------------------------------
# Wilcoxon tests
# --------------------------------------------------------------------------

class TestResult(NamedTuple):
    statistic: float  # standardized; sign follows the first sample / positive diffs
    pvalue: float
    method: str  # "exact" | "normal" | "degenerate"


def _doubled_ranks(x: np.ndarray) -> np.ndarray:
    return np.rint(2 * stats.rankdata(x)).astype(np.int64)


def _subset_sum_counts(values: Sequence[int], k: int | None) -> np.ndarray | dict:
    """Counts of subset sums; with ``k`` only subsets of size k (2-D DP)."""
    total = int(sum(values))
    if k is None:
        dp = np.zeros(total + 1, dtype=np.float64)
        dp[0] = 1
        for v in values:
            dp[v:] = dp[v:] + dp[:total + 1 - v].copy()
        return dp
    dp = np.zeros((k + 1, total + 1), dtype=np.float64)
    dp[0, 0] = 1
    for v in values:
        dp[1:, v:] = dp[1:, v:] + dp[:-1, :total + 1 - v].copy()
    return dp[k]


def wilcoxon_rank_sums(a, b, exact_max: int = 20) -> TestResult:
    """Two-sided rank-sum test.

    Exact (enumerated null over all splits of the pooled midranks) when both
    samples have at most ``exact_max`` observations, normal otherwise.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    n1, n2 = a.size, b.size
    n = n1 + n2
    r2 = _doubled_ranks(np.concatenate([a, b]))
    w2 = int(r2[:n1].sum())
    e2 = n1 * (n + 1)  # doubled expectation
    # tie-corrected variance of the (undoubled) rank sum
    _, tcounts = np.unique(np.concatenate([a, b]), return_counts=True)
    var = n1 * n2 / 12.0 * ((n + 1) - np.sum(tcounts ** 3 - tcounts) / (n * (n - 1)))
    z = 0.0 if var <= 0 else (w2 / 2 - e2 / 2) / math.sqrt(var)
    if var <= 0:
        return TestResult(0.0, 1.0, "degenerate")
    if n1 <= exact_max and n2 <= exact_max:
        counts = _subset_sum_counts(r2.tolist(), n1)
        sums = np.arange(counts.size)
        extreme = np.abs(sums - e2) >= abs(w2 - e2)
        p = counts[extreme].sum() / counts.sum()
        return TestResult(z, float(min(1.0, p)), "exact")
    return TestResult(z, float(min(1.0, 2 * stats.norm.sf(abs(z)))), "normal")


def wilcoxon_signed_rank(paired_diffs, exact_max: int = 15) -> TestResult:
    """Two-sided signed-rank test on paired differences.

    Zero differences are dropped before ranking. Exact enumeration of the
    2^n sign patterns for n <= ``exact_max``, normal approximation above.
    """
    d = np.asarray(paired_diffs, dtype=np.float64).ravel()
    d = d[d != 0]
    if d.size == 0:
        return TestResult(0.0, 1.0, "degenerate")
    r2 = _doubled_ranks(np.abs(d))
    w2 = int(r2[d > 0].sum())
    e2 = r2.sum() / 2
    var = np.sum((r2 / 2.0) ** 2) / 4.0
    z = (w2 / 2 - e2 / 2) / math.sqrt(var)
    if d.size <= exact_max:
        counts = _subset_sum_counts(r2.tolist(), None)
        sums = np.arange(counts.size)
        extreme = np.abs(sums - e2) >= abs(w2 - e2) - 1e-9
        p = counts[extreme].sum() / counts.sum()
        return TestResult(z, float(min(1.0, p)), "exact")
    return TestResult(z, float(min(1.0, 2 * stats.norm.sf(abs(z)))), "normal")


# --------------------------------------------------------------------------
# Interpolation baseline
# --------------------------------------------------------------------------

def interpolation_baseline(frames, factor: int) -> np.ndarray:
    """Per-pixel linear interpolation inserting ``factor - 1`` frames per gap."""
    f = np.asarray(frames, dtype=np.float32)
    if f.shape[0] < 2:
        raise ValueError("need at least 2 frames to interpolate")
    if factor < 2:
        raise ValueError("factor must be >= 2")
    out = [f[0]]
    for a, b in zip(f[:-1], f[1:]):
        for k in range(1, factor + 1):
            w = k / factor
            out.append((1 - w) * a + w * b)
    return np.stack(out)


def dump_json(obj, path):
    from pathlib import Path
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))
