"""Unpaired clip streams for self-supervised decoder training.

Internal clips are 2 s windows of the training videos at arbitrary offsets.
Synthetic clips pan a frame-sized window across a still image. A mixer
combines the two at a fixed ratio per batch.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .simulator import VideoClip, _texture

log = logging.getLogger(__name__)

DIRECTIONS = ("up", "down", "left", "right")
# per-frame (dy, dx) unit steps of the crop window
_STEP = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}


@dataclass
class UnpairedBatchSpec:
    batch_size: int = 16
    internal_fraction: float = 0.8
    augment_hflip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.internal_fraction <= 1:
            raise ValueError("internal_fraction must be in [0, 1]")

    @property
    def n_internal(self) -> int:
        # Python round: half to even, so 7 * 0.8 = 5.6 -> 6 and 5 * 0.5 -> 2
        return int(round(self.internal_fraction * self.batch_size))

    @property
    def n_synthetic(self) -> int:
        return self.batch_size - self.n_internal


@dataclass
class PanSpec:
    window: tuple[int, int] = (32, 32)
    speed_px_per_frame: int = 1
    n_frames: int = 16
    directions: tuple[str, ...] = DIRECTIONS
    # top-left corner of the first window; None centres it in the image
    start: tuple[int, int] | None = None

    def __post_init__(self):
        self.window = tuple(self.window)
        self.directions = tuple(self.directions)
        if int(self.speed_px_per_frame) != self.speed_px_per_frame or self.speed_px_per_frame < 1:
            raise ValueError("speed_px_per_frame must be a positive integer")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        bad = set(self.directions) - set(DIRECTIONS)
        if bad or not self.directions:
            raise ValueError(f"directions must be a non-empty subset of {DIRECTIONS}, got {self.directions}")

    @property
    def travel(self) -> int:
        return self.speed_px_per_frame * (self.n_frames - 1)

    def min_image_size(self) -> tuple[int, int]:
        """Smallest image that fits every requested path from a centred start."""
        vert = any(d in ("up", "down") for d in self.directions)
        horiz = any(d in ("left", "right") for d in self.directions)
        return (self.window[0] + (2 * self.travel if vert else 0),
                self.window[1] + (2 * self.travel if horiz else 0))


# --------------------------------------------------------------------------
# Internal clips
# --------------------------------------------------------------------------

class SampledClips(list):
    """List of clips plus sampling bookkeeping."""

    def __init__(self, clips, starts, flipped, with_replacement: bool):
        super().__init__(clips)
        self.starts = starts
        self.flipped = flipped
        self.with_replacement = with_replacement


def sample_internal_clips(train_videos: Sequence[VideoClip], count: int, augment_hflip: bool = True,
                          seed: int = 0, duration_s: float = 2.0) -> SampledClips:
    """Uniformly sampled windows at any frame offset, optionally flipped.

    ``starts`` holds (video index, first frame) per clip. Draws are without
    replacement unless ``count`` exceeds the number of distinct windows, in
    which case ``with_replacement`` is set and a warning is logged.
    """
    if not train_videos:
        raise ValueError("no training videos")
    rate = train_videos[0].frame_rate_hz
    length = int(round(duration_s * rate))
    windows = [(v, s) for v, vid in enumerate(train_videos) for s in range(vid.n_frames - length + 1)]
    if not windows:
        raise ValueError(f"no video is at least {duration_s}s long")
    rng = np.random.default_rng(seed)
    replace = count > len(windows)
    if replace:
        log.warning("requested %d clips from %d windows: sampling with replacement", count, len(windows))
    pick = rng.choice(len(windows), size=count, replace=replace)
    flips = rng.random(count) < 0.5 if augment_hflip else np.zeros(count, bool)
    clips, starts = [], []
    for p, f in zip(pick, flips):
        v, s = windows[p]
        c = train_videos[v].window(s, length)
        clips.append(c.hflip() if f else c)
        starts.append((v, s))
    return SampledClips(clips, starts, flips.tolist(), replace)


# --------------------------------------------------------------------------
# Synthetic panning clips
# --------------------------------------------------------------------------

def pan_path(image_shape, spec: PanSpec) -> dict[str, np.ndarray]:
    """(n_frames, 2) top-left corners per direction; checked against bounds."""
    h, w = image_shape[:2]
    wh, ww = spec.window
    y0, x0 = spec.start if spec.start is not None else ((h - wh) // 2, (w - ww) // 2)
    t = np.arange(spec.n_frames)[:, None]
    paths = {}
    for d in spec.directions:
        p = np.array([y0, x0]) + t * spec.speed_px_per_frame * np.array(_STEP[d])
        if p.min() < 0 or p[:, 0].max() + wh > h or p[:, 1].max() + ww > w:
            raise ValueError(f"{d} pan leaves the {h}x{w} image (window {spec.window}, "
                             f"speed {spec.speed_px_per_frame}, {spec.n_frames} frames)")
        paths[d] = p
    return paths


def synthesize_pan_clips(image, spec: PanSpec, frame_rate_hz: float = 8.0) -> list[VideoClip]:
    """One sliding-window clip per requested direction, in ``spec`` order."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[..., None]
    wh, ww = spec.window
    out = []
    for d, path in pan_path(image.shape, spec).items():
        frames = np.stack([image[y:y + wh, x:x + ww] for y, x in path])
        out.append(VideoClip(frames, frame_rate_hz, "synthetic"))
    return out


def procedural_image(seed: int, size: tuple[int, int], channels: int = 3, n_shapes: int = 12) -> np.ndarray:
    """Still image in the style of the training scenes: texture plus shapes."""
    rng = np.random.default_rng(seed)
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = _texture(rng, h, w, channels)(yy, xx)
    for _ in range(n_shapes):
        r = rng.uniform(3, 7)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        if rng.integers(2):
            d = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
        else:
            d = np.hypot(yy - cy, xx - cx)
        a = np.clip(r + 0.5 - d, 0, 1)[..., None]
        img = img * (1 - a) + rng.uniform(0, 1, channels) * a
    return np.clip(img, 0, 1).astype(np.float32)


def load_image_dir(path, size: tuple[int, int] | None = None) -> list[np.ndarray]:
    """Read PNG/PPM images from a directory as float RGB arrays in [0, 1]."""
    from PIL import Image

    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in (".png", ".ppm", ".pnm"))
    if not files:
        raise ValueError(f"no PNG/PPM images in {path}")
    out = []
    for f in files:
        im = Image.open(f).convert("RGB")
        if size is not None:
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        out.append(np.asarray(im, dtype=np.float32) / 255.0)
    return out


def frame_displacement(a, b, max_shift: int = 4) -> tuple[int, int]:
    """Integer (dy, dx) that best aligns frame ``b`` to ``a``, by the peak of
    the cross-correlation of mean-removed grayscale frames."""
    ga = np.asarray(a, dtype=np.float64).mean(-1)
    gb = np.asarray(b, dtype=np.float64).mean(-1)
    ga = ga - ga.mean()
    gb = gb - gb.mean()
    best, arg = -np.inf, (0, 0)
    h, w = ga.shape
    for dy in range(-max_shift, max_shift + 1):
        for dx in range(-max_shift, max_shift + 1):
            pa = ga[max(0, dy):h + min(0, dy), max(0, dx):w + min(0, dx)]
            pb = gb[max(0, -dy):h + min(0, -dy), max(0, -dx):w + min(0, -dx)]
            score = float((pa * pb).mean())
            if score > best:
                best, arg = score, (dy, dx)
    return arg


def empirical_speed_range(videos: Sequence[VideoClip], n_samples: int = 64, seed: int = 0,
                          frame_step: int = 4) -> tuple[int, int]:
    """Integer pan-speed range (px/frame) matching the training videos.

    Measures the displacement between frames ``frame_step`` apart at random
    positions and returns the 10th-90th percentile range of its per-frame
    magnitude, rounded and floored at 1.
    """
    rng = np.random.default_rng(seed)
    mags = []
    for _ in range(n_samples):
        v = videos[rng.integers(len(videos))]
        t = rng.integers(0, v.n_frames - frame_step)
        dy, dx = frame_displacement(v.frames[t], v.frames[t + frame_step])
        mags.append(np.hypot(dy, dx) / frame_step)
    lo, hi = np.percentile(mags, [10, 90])
    lo = max(1, int(round(lo)))
    return lo, max(lo, int(round(hi)))


def synthetic_clip_bank(n_images: int, n_frames: int, speed_range: tuple[int, int], seed: int,
                        window=(32, 32), frame_rate_hz: float = 8.0,
                        images: Sequence[np.ndarray] | None = None) -> list[list[VideoClip]]:
    """Pan clips grouped by source image (all four directions share a group).

    Speeds are drawn uniformly from ``speed_range``. Images are procedural
    unless ``images`` (e.g. from ``load_image_dir``) is given.
    """
    rng = np.random.default_rng(seed)
    groups = []
    for i in range(n_images):
        speed = int(rng.integers(speed_range[0], speed_range[1] + 1))
        spec = PanSpec(tuple(window), speed, n_frames)
        need = spec.min_image_size()
        if images is not None:
            img = images[i % len(images)]
            if img.shape[0] < need[0] or img.shape[1] < need[1]:
                raise ValueError(f"image {i} is {img.shape[:2]}, need at least {need}")
        else:
            img = procedural_image(int(rng.integers(2**31)), need)
        groups.append(synthesize_pan_clips(img, spec, frame_rate_hz))
    return groups


# --------------------------------------------------------------------------
# Mixing
# --------------------------------------------------------------------------

def mix_batches(internal_stream: Iterable | None, synthetic_stream: Iterable | None,
                spec: UnpairedBatchSpec) -> Iterator[list]:
    """Endless batches with exactly ``spec.n_internal`` internal items.

    Items within a batch are interleaved by a seeded shuffle. A stream that
    the ratio never draws from is never touched.
    """
    n_int, n_syn = spec.n_internal, spec.n_synthetic
    if (n_int and internal_stream is None) or (n_syn and synthetic_stream is None):
        raise ValueError("a stream required by internal_fraction is missing")
    it_int = iter(internal_stream) if n_int else None
    it_syn = iter(synthetic_stream) if n_syn else None
    rng = np.random.default_rng(spec.seed)

    def take(it, k, name):
        out = []
        for _ in range(k):
            try:
                out.append(next(it))
            except StopIteration:
                raise ValueError(f"{name} stream is empty") from None
        return out

    while True:
        batch = (take(it_int, n_int, "internal") if n_int else []) + \
                (take(it_syn, n_syn, "synthetic") if n_syn else [])
        yield [batch[i] for i in rng.permutation(len(batch))]


def window_stream(lengths: Sequence[int], span: int, seed: int, hflip: bool = True) -> Iterator[tuple[int, int, bool]]:
    """Endless uniform draws of (source, start, flipped) for windows of
    ``span`` frames over sources of the given lengths."""
    lengths = np.asarray(lengths)
    counts = np.maximum(0, lengths - span + 1)
    if counts.sum() == 0:
        raise ValueError(f"no source has {span} frames")
    p = counts / counts.sum()
    rng = np.random.default_rng(seed)
    while True:
        src = int(rng.choice(len(lengths), p=p))
        start = int(rng.integers(counts[src]))
        yield src, start, bool(hflip and rng.random() < 0.5)


# --------------------------------------------------------------------------
# Overlapping pairs
# --------------------------------------------------------------------------

@dataclass
class OverlapPair:
    """Two consecutive 2 s clips cut from one ``span`` of twice that length.

    With ``delta`` = 1 s of frames, the frame ``delta`` after v1's middle is
    the frame ``delta`` before v2's middle (v2's first frame).
    """
    span: VideoClip
    clip_frames: int
    start: int = 0

    def __post_init__(self):
        if self.span.n_frames < 2 * self.clip_frames:
            raise ValueError("span shorter than two clips")
        a = self.span.frames[self.v1_mid + self.delta]
        b = self.v2.frames[self.v2.mid_index - self.delta]
        if not np.array_equal(a, b):
            raise AssertionError("overlap frame identity violated")

    @property
    def delta(self) -> int:
        return self.clip_frames // 2

    @property
    def v1(self) -> VideoClip:
        return self.span.window(0, self.clip_frames)

    @property
    def v2(self) -> VideoClip:
        return self.span.window(self.clip_frames, self.clip_frames)

    @property
    def v1_mid(self) -> int:
        return self.clip_frames // 2

    def target_indices(self, n: int) -> list[int]:
        """Span indices of ``n`` evenly spaced frames from v1's to v2's middle."""
        return [self.v1_mid + o for o in hfr_offsets(n, self.clip_frames)]

    def targets(self, n: int) -> np.ndarray:
        return self.span.frames[self.target_indices(n)]


def hfr_offsets(n: int, clip_frames: int) -> list[int]:
    """Frame offsets k * clip_frames / (n - 1), k = 0..n-1; must be integers."""
    if n < 2:
        raise ValueError("need at least 2 output frames")
    if clip_frames % (n - 1):
        raise ValueError(f"{n} frames do not evenly divide a {clip_frames}-frame gap")
    return [k * clip_frames // (n - 1) for k in range(n)]


def overlapping_clip_pairs(video: VideoClip, count: int, seed: int = 0,
                           duration_s: float = 2.0) -> list[OverlapPair]:
    """``count`` pairs with v2 starting exactly ``duration_s`` after v1.

    Start offsets are distinct while the video has enough of them.
    """
    k = int(round(duration_s * video.frame_rate_hz))
    n_starts = video.n_frames - 2 * k + 1
    if n_starts < 1:
        raise ValueError(f"video of {video.duration_s}s is shorter than {2 * duration_s}s")
    rng = np.random.default_rng(seed)
    starts = rng.choice(n_starts, size=count, replace=count > n_starts)
    return [OverlapPair(video.window(int(s), 2 * k), k, int(s)) for s in starts]
