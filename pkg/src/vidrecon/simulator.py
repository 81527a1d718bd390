"""Virtual-subject benchmark: procedural videos and the fMRI they evoke.

A :class:`VirtualSubject` turns a video into an fMRI-like series in four
steps: pooled per-TR stimulus features, a linear voxel readout, causal
convolution with a difference-of-gammas HRF, a whole-TR delay, then i.i.d.
Gaussian measurement noise.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from . import blobs

log = logging.getLogger(__name__)

ORIGIN_TAGS = ("internal", "synthetic", "external")


# --------------------------------------------------------------------------
# Domain types
# --------------------------------------------------------------------------

@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, C) in [0, 1]
    frame_rate_hz: float
    origin_tag: str = "internal"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be (T, H, W, C) with T >= 1, got {self.frames.shape}")
        if not self.frame_rate_hz > 0:
            raise ValueError("frame_rate_hz must be positive")
        if self.origin_tag not in ORIGIN_TAGS:
            raise ValueError(f"unknown origin tag {self.origin_tag!r}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration_s(self) -> float:
        return self.n_frames / self.frame_rate_hz

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return tuple(self.frames.shape[1:])

    def window(self, start: int, length: int) -> "VideoClip":
        if start < 0 or start + length > self.n_frames:
            raise IndexError(f"window [{start}, {start + length}) outside clip of {self.n_frames} frames")
        return VideoClip(self.frames[start:start + length], self.frame_rate_hz, self.origin_tag)

    def hflip(self) -> "VideoClip":
        return VideoClip(self.frames[:, :, ::-1, :].copy(), self.frame_rate_hz, self.origin_tag)

    def reversed(self) -> "VideoClip":
        return VideoClip(self.frames[::-1].copy(), self.frame_rate_hz, self.origin_tag)

    @property
    def mid_index(self) -> int:
        return self.n_frames // 2

    @property
    def mid_frame(self) -> np.ndarray:
        return self.frames[self.mid_index]


@dataclass
class HrfKernel:
    taps: np.ndarray
    tr_seconds: float
    peak_seconds: float

    @property
    def peak_lag_trs(self) -> int:
        return int(np.argmax(self.taps))


@dataclass
class VirtualSubject:
    readout_weights: np.ndarray  # (V, F)
    hrf: HrfKernel
    delay_trs: int = 0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.readout_weights = np.asarray(self.readout_weights, dtype=np.float64)
        if self.readout_weights.ndim != 2 or min(self.readout_weights.shape) < 1:
            raise ValueError("readout_weights must be a non-empty (V, F) matrix")
        if self.delay_trs < 0 or int(self.delay_trs) != self.delay_trs:
            raise ValueError("delay_trs must be a non-negative integer")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    @property
    def n_voxels(self) -> int:
        return self.readout_weights.shape[0]

    @property
    def n_features(self) -> int:
        return self.readout_weights.shape[1]


@dataclass
class FmriSeries:
    samples: np.ndarray  # (T_fmri, V)
    tr_seconds: float = 2.0
    repeat_index: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ValueError("samples must be (T, V)")
        if not self.tr_seconds > 0:
            raise ValueError("tr_seconds must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("fMRI samples must be finite")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_voxels(self) -> int:
        return self.samples.shape[1]


@dataclass
class SegmentEntry:
    video: str
    fmri: list[str]


@dataclass
class BenchmarkManifest:
    train_segments: list[SegmentEntry]
    test_segment: SegmentEntry
    tr_seconds: float
    frame_rate_hz: float
    seed: int
    root: Path | None = field(default=None, compare=False, repr=False)

    def to_json(self) -> str:
        d = {
            "train_segments": [asdict(s) for s in self.train_segments],
            "test_segment": asdict(self.test_segment),
            "tr_seconds": self.tr_seconds,
            "frame_rate_hz": self.frame_rate_hz,
            "seed": self.seed,
        }
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "BenchmarkManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        m = cls(
            train_segments=[SegmentEntry(**s) for s in d["train_segments"]],
            test_segment=SegmentEntry(**d["test_segment"]),
            tr_seconds=d["tr_seconds"],
            frame_rate_hz=d["frame_rate_hz"],
            seed=d["seed"],
            root=path.parent,
        )
        m.validate()
        return m

    def resolve(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel

    def validate(self):
        frames_per_tr = self.tr_seconds * self.frame_rate_hz
        for seg in [*self.train_segments, self.test_segment]:
            for rel in [seg.video, *seg.fmri]:
                if not self.resolve(rel).exists():
                    raise FileNotFoundError(self.resolve(rel))
            n_frames = _blob_dims(self.resolve(seg.video))[0]
            for rel in seg.fmri:
                t = _blob_dims(self.resolve(rel))[0]
                if t != int(n_frames // frames_per_tr):
                    raise ValueError(f"{rel}: {t} samples but video has {n_frames} frames")

    def load_segment(self, seg: SegmentEntry) -> tuple[VideoClip, list[FmriSeries]]:
        video = VideoClip(blobs.load(self.resolve(seg.video)), self.frame_rate_hz)
        series = [FmriSeries(blobs.load(self.resolve(p)), self.tr_seconds, k)
                  for k, p in enumerate(seg.fmri)]
        return video, series


def _blob_dims(path) -> tuple[int, ...]:
    with open(path, "rb") as fh:
        head = fh.read(len(blobs.MAGIC) + 4)
        rank = int.from_bytes(head[-4:], "little")
        dims = fh.read(4 * rank)
    return tuple(int.from_bytes(dims[4 * i:4 * i + 4], "little") for i in range(rank))


# --------------------------------------------------------------------------
# HRF
# --------------------------------------------------------------------------

def hrf_curve(t, peak_seconds: float = 5.0):
    """Continuous difference-of-gammas HRF (unnormalized).

    Main lobe peaks at ``peak_seconds``; the undershoot sits 7 s later.
    """
    t = np.asarray(t, dtype=np.float64)
    main = stats.gamma.pdf(t, peak_seconds + 1.0, scale=1.0)
    under = stats.gamma.pdf(t, peak_seconds + 8.0, scale=1.0)
    return main - under / 6.0


def canonical_hrf(tr_seconds: float = 2.0, duration_seconds: float = 20.0,
                  peak_seconds: float = 5.0) -> HrfKernel:
    if not tr_seconds > 0:
        raise ValueError("tr_seconds must be positive")
    if not duration_seconds > 0:
        raise ValueError("duration_seconds must be positive")
    if not peak_seconds > 0:
        raise ValueError("peak_seconds must be positive")
    if duration_seconds < peak_seconds:
        raise ValueError("duration_seconds must cover the peak")
    n = int(math.floor(duration_seconds / tr_seconds + 1e-9)) + 1
    taps = hrf_curve(np.arange(n) * tr_seconds, peak_seconds)
    taps = taps / taps.sum()
    return HrfKernel(taps=taps, tr_seconds=tr_seconds, peak_seconds=peak_seconds)


def convolve_causal(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Causal convolution along axis 0 with zero history."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for k, h in enumerate(taps):
        if k >= x.shape[0]:
            break
        out[k:] += h * x[:x.shape[0] - k]
    return out


# --------------------------------------------------------------------------
# Procedural video
# --------------------------------------------------------------------------

@dataclass
class SceneSpec:
    height: int = 32
    width: int = 32
    channels: int = 3
    frame_rate_hz: float = 8.0
    n_sprites: int = 2
    sprite_speed: float = 1.5  # px/frame, upper bound
    pan_speed: float = 0.5  # px/frame, background drift

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ValueError("canvas must be non-empty")
        if not self.frame_rate_hz > 0:
            raise ValueError("frame_rate_hz must be positive")


def _texture(rng, h, w, c):
    """Random smooth colour field, returned as a callable of pixel coords."""
    n_waves = 4
    freqs = rng.uniform(0.05, 0.35, size=(n_waves, 2)) * rng.choice([-1, 1], size=(n_waves, 2))
    phases = rng.uniform(0, 2 * np.pi, size=n_waves)
    amps = rng.uniform(0.05, 0.2, size=(n_waves, c))
    base = rng.uniform(0.15, 0.85, size=c)

    def render(yy, xx):
        out = np.broadcast_to(base, yy.shape + (c,)).copy()
        for f, p, a in zip(freqs, phases, amps):
            out += np.sin(f[0] * yy + f[1] * xx + p)[..., None] * a
        return out

    return render


def generate_video(spec: SceneSpec, duration_s: float, seed: int,
                   origin_tag: str = "internal") -> VideoClip:
    """Render one shot of moving sprites over a drifting texture.

    Sprites are soft-edged discs or squares that bounce off the canvas
    walls; positions are continuous so sub-pixel motion is visible.
    """
    if spec.height < 1 or spec.width < 1:
        raise ValueError("zero canvas")
    n_float = duration_s * spec.frame_rate_hz
    n = int(round(n_float))
    if n < 1 or abs(n - n_float) > 1e-6:
        raise ValueError(f"duration {duration_s}s does not give an integer frame count at {spec.frame_rate_hz} Hz")
    rng = np.random.default_rng(seed)
    h, w, c = spec.height, spec.width, spec.channels
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    texture = _texture(rng, h, w, c)

    ang = rng.uniform(0, 2 * np.pi)
    pan_v = spec.pan_speed * np.array([np.sin(ang), np.cos(ang)])

    sprites = []
    for _ in range(spec.n_sprites):
        radius = rng.uniform(0.1, 0.22) * min(h, w)
        pos = np.array([rng.uniform(radius, h - radius), rng.uniform(radius, w - radius)])
        a = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(0.5, 1.0) * spec.sprite_speed
        vel = speed * np.array([np.sin(a), np.cos(a)])
        color = rng.uniform(0, 1, size=c)
        square = bool(rng.integers(2))
        sprites.append([pos, vel, radius, color, square])

    frames = np.empty((n, h, w, c), dtype=np.float32)
    for t in range(n):
        off = pan_v * t
        img = texture(yy + off[0], xx + off[1])
        for sp in sprites:
            pos, vel, radius, color, square = sp
            if square:
                d = np.maximum(np.abs(yy - pos[0]), np.abs(xx - pos[1]))
            else:
                d = np.hypot(yy - pos[0], xx - pos[1])
            alpha = np.clip(radius + 0.5 - d, 0.0, 1.0)[..., None]
            img = img * (1 - alpha) + color * alpha
        frames[t] = np.clip(img, 0.0, 1.0)
        for sp in sprites:
            pos, vel, radius = sp[0], sp[1], sp[2]
            pos += vel
            for ax, lim in ((0, h), (1, w)):
                if pos[ax] < radius:
                    pos[ax] = 2 * radius - pos[ax]
                    vel[ax] = abs(vel[ax])
                elif pos[ax] > lim - radius:
                    pos[ax] = 2 * (lim - radius) - pos[ax]
                    vel[ax] = -abs(vel[ax])
    return VideoClip(frames, spec.frame_rate_hz, origin_tag)


def generate_segment(spec: SceneSpec, duration_s: float, mean_shot_s: float,
                     seed: int) -> VideoClip:
    """Concatenate shots of random length (uniform in [0.5, 1.5] x mean)."""
    rng = np.random.default_rng(seed)
    total = int(round(duration_s * spec.frame_rate_hz))
    parts, done = [], 0
    while done < total:
        shot = int(round(rng.uniform(0.5, 1.5) * mean_shot_s * spec.frame_rate_hz))
        shot = max(1, min(shot, total - done))
        clip = generate_video(spec, shot / spec.frame_rate_hz, int(rng.integers(2**31)))
        parts.append(clip.frames)
        done += shot
    return VideoClip(np.concatenate(parts), spec.frame_rate_hz)


# --------------------------------------------------------------------------
# Stimulus features and the forward model
# --------------------------------------------------------------------------

GRID = 4
# Fixed affine normalization per feature family (luminance, edge, motion),
# measured once on default-scene segments.
FEATURE_CENTER = np.array([0.52, 0.05, 0.023])
FEATURE_SCALE = np.array([0.15, 0.017, 0.011])


def frame_features(frames: np.ndarray, grid: int = GRID) -> np.ndarray:
    """Per-frame pooled luminance, edge energy and motion energy.

    Returns (T, 3 * grid * grid): luminance cells, then edge cells, then
    motion cells, each family affinely normalized by fixed constants. The
    luminance family is linear in pixel values.
    """
    frames = np.asarray(frames, dtype=np.float64)
    t, h, w, _ = frames.shape
    if h % grid or w % grid:
        raise ValueError(f"frame {h}x{w} not divisible into a {grid}x{grid} grid")
    g = frames.mean(axis=3)
    gy = np.zeros_like(g)
    gx = np.zeros_like(g)
    gy[:, 1:, :] = np.diff(g, axis=1)
    gx[:, :, 1:] = np.diff(g, axis=2)
    edge = np.sqrt(gx ** 2 + gy ** 2)
    motion = np.zeros_like(g)
    motion[1:] = np.abs(np.diff(g, axis=0))

    def pool(x):
        return x.reshape(t, grid, h // grid, grid, w // grid).mean(axis=(2, 4)).reshape(t, -1)

    fams = [pool(g), pool(edge), pool(motion)]
    return np.concatenate(
        [(f - FEATURE_CENTER[i]) / FEATURE_SCALE[i] for i, f in enumerate(fams)], axis=1)


def tr_features(video: VideoClip, tr_seconds: float, grid: int = GRID) -> np.ndarray:
    """Frame features averaged within each TR window: (T_fmri, F)."""
    per_tr = video.frame_rate_hz * tr_seconds
    k = int(round(per_tr))
    if abs(k - per_tr) > 1e-6:
        raise ValueError("TR must span an integer number of frames")
    n_tr = video.n_frames // k
    if n_tr < 1:
        raise ValueError("video shorter than one TR")
    f = frame_features(video.frames[:n_tr * k], grid)
    return f.reshape(n_tr, k, -1).mean(axis=1)


def make_subject(n_voxels: int = 256, n_features: int = 3 * GRID * GRID,
                 delay_trs: int = 0, noise_sigma: float = 0.5, seed: int = 0,
                 tr_seconds: float = 2.0, peak_seconds: float = 5.0,
                 gain_range: tuple[float, float] = (0.1, 1.5),
                 signal_gain: float = 1.0, selectivity: float = 0.3) -> VirtualSubject:
    """Random voxel readouts with local receptive fields.

    Each voxel reads a Dirichlet(``selectivity``) mix of feature families
    over a 2x2 block of spatial cells (small values make voxels prefer one
    family); its row is scaled to a per-voxel gain so voxels span a
    range of SNRs. ``signal_gain=0`` gives a signal-free subject.
    """
    rng = np.random.default_rng(seed)
    n_cells = GRID * GRID
    W = np.zeros((n_voxels, n_features))
    if n_features == 3 * n_cells:
        for v in range(n_voxels):
            cy, cx = rng.integers(0, GRID - 1, size=2)
            cells = [(cy + dy) * GRID + cx + dx for dy in (0, 1) for dx in (0, 1)]
            mix = rng.dirichlet(np.full(3, selectivity))
            for fam in range(3):
                W[v, [fam * n_cells + cc for cc in cells]] = mix[fam] * rng.uniform(0.5, 1.0, size=4)
    else:
        W = rng.standard_normal((n_voxels, n_features))
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    gains = rng.uniform(*gain_range, size=n_voxels) * signal_gain
    W *= gains[:, None]
    hrf = canonical_hrf(tr_seconds, 20.0, peak_seconds)
    return VirtualSubject(W, hrf, delay_trs, noise_sigma, seed)


def noiseless_response(subject: VirtualSubject, video: VideoClip,
                       features: np.ndarray | None = None) -> np.ndarray:
    if features is None:
        features = tr_features(video, subject.hrf.tr_seconds)
    if features.shape[1] != subject.n_features:
        raise ValueError(
            f"feature dimension {features.shape[1]} does not match readout ({subject.n_features})")
    drive = features @ subject.readout_weights.T
    bold = convolve_causal(drive, subject.hrf.taps)
    d = subject.delay_trs
    if d:
        shifted = np.empty_like(bold)
        shifted[d:] = bold[:-d] if d < len(bold) else bold[:0]
        shifted[:min(d, len(bold))] = bold[0]
        bold = shifted
    return bold


def simulate_fmri(subject: VirtualSubject, video: VideoClip, noise_seed: int | None = None,
                  repeat_index: int = 0, features: np.ndarray | None = None) -> FmriSeries:
    clean = noiseless_response(subject, video, features)
    if noise_seed is None:
        noise_seed = subject.seed * 1000003 + repeat_index
    rng = np.random.default_rng(noise_seed)
    noisy = clean + subject.noise_sigma * rng.standard_normal(clean.shape)
    return FmriSeries(noisy, subject.hrf.tr_seconds, repeat_index)


def simulate_repeats(subject: VirtualSubject, video: VideoClip, k: int,
                     base_seed: int | None = None) -> list[FmriSeries]:
    if k < 1:
        raise ValueError("k must be >= 1")
    if base_seed is None:
        base_seed = subject.seed * 1000003
    clean = noiseless_response(subject, video)
    out = []
    for i in range(k):
        seed = int(np.random.SeedSequence([base_seed, i]).generate_state(1)[0])
        log.debug("repeat %d noise seed %d", i, seed)
        rng = np.random.default_rng(seed)
        out.append(FmriSeries(clean + subject.noise_sigma * rng.standard_normal(clean.shape),
                              subject.hrf.tr_seconds, i))
    return out


# --------------------------------------------------------------------------
# Benchmark on disk
# --------------------------------------------------------------------------

@dataclass
class BenchmarkConfig:
    n_train_segments: int = 18
    train_segment_s: float = 48.0
    test_segment_s: float = 192.0
    train_repeats: int = 2
    test_repeats: int = 10
    train_mean_shot_s: float = 14.5
    test_mean_shot_s: float = 4.0
    tr_seconds: float = 2.0
    n_voxels: int = 256
    delay_trs: int = 1
    noise_sigma: float = 0.5
    signal_gain: float = 1.0
    scene: SceneSpec = field(default_factory=SceneSpec)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.scene, dict):
            self.scene = SceneSpec(**self.scene)
        if self.n_train_segments < 1 or self.train_repeats < 1 or self.test_repeats < 2:
            raise ValueError("need >= 1 train segment, >= 1 train repeat and >= 2 test repeats")

    def subject(self) -> VirtualSubject:
        return make_subject(self.n_voxels, delay_trs=self.delay_trs,
                            noise_sigma=self.noise_sigma, seed=self.seed,
                            tr_seconds=self.tr_seconds, signal_gain=self.signal_gain)


def _seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def make_benchmark(config: BenchmarkConfig, out_dir) -> BenchmarkManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    subject = config.subject()
    blobs.save(out / "subject_readout.nvrd", subject.readout_weights)
    (out / "subject.json").write_text(json.dumps({
        "delay_trs": subject.delay_trs, "noise_sigma": subject.noise_sigma,
        "seed": subject.seed, "hrf_taps": subject.hrf.taps.tolist(),
        "tr_seconds": subject.hrf.tr_seconds, "peak_seconds": subject.hrf.peak_seconds,
    }, indent=2))

    def write_segment(name, duration, shot_s, repeats, idx):
        video = generate_segment(config.scene, duration, shot_s, _seed(config.seed, 1, idx))
        vrel = f"{name}_video.nvrd"
        blobs.save(out / vrel, video.frames)
        series = simulate_repeats(subject, video, repeats, _seed(config.seed, 2, idx))
        frel = []
        for s in series:
            rel = f"{name}_fmri_r{s.repeat_index}.nvrd"
            blobs.save(out / rel, s.samples)
            frel.append(rel)
        return SegmentEntry(vrel, frel)

    train = [write_segment(f"train_{i:02d}", config.train_segment_s, config.train_mean_shot_s,
                           config.train_repeats, i) for i in range(config.n_train_segments)]
    test = write_segment("test", config.test_segment_s, config.test_mean_shot_s,
                         config.test_repeats, 10_000)
    manifest = BenchmarkManifest(train, test, config.tr_seconds, config.scene.frame_rate_hz,
                                 config.seed, root=out)
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


def scale_video(video: VideoClip, a: float) -> VideoClip:
    return replace(video, frames=np.clip(video.frames * a, 0, 1))
