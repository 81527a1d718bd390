"""fMRI-to-video decoders (0.5 Hz and higher frame rate), their losses,
the joint supervised + self-supervised training loop, and the optional
temporal prior network."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .data import PairedSegment
from .encoder import EncoderModel, predict
from .features import FeatureStack, make_extractor, motion_spec, spatial_spec
from .ssl_data import OverlapPair, UnpairedBatchSpec, hfr_offsets, mix_batches, window_stream
from .simulator import VideoClip

log = logging.getLogger(__name__)

MODES = ("rate_0p5hz", "hfr")


# --------------------------------------------------------------------------
# Models
# --------------------------------------------------------------------------

class DecoderModel(nn.Module):
    """Dense map to a coarse grid, then a shared conv/upsample stack.

    In HFR mode the input is two consecutive samples (2V) and every output
    frame has its own dense map; frames are folded into the batch axis
    before the shared 2D stack.
    """

    def __init__(self, n_voxels: int, mode: str = "rate_0p5hz", n_frames: int = 1,
                 frame_shape: tuple[int, int, int] = (32, 32, 3), width: int = 32, seed: int = 0):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if mode == "rate_0p5hz" and n_frames != 1:
            raise ValueError("the 0.5 Hz decoder outputs one frame")
        if mode == "hfr" and n_frames < 3:
            raise ValueError("HFR decoders output at least 3 frames")
        h, w, c = frame_shape
        if h % 4 or w % 4:
            raise ValueError("frame size must be divisible by 4")
        self.n_voxels, self.mode, self.n_frames = n_voxels, mode, n_frames
        self.frame_shape, self.width, self.seed = tuple(frame_shape), width, seed
        self.coarse = (h // 4, w // 4)
        self.in_dim = n_voxels * (2 if mode == "hfr" else 1)
        half = max(1, width // 2)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.dense = nn.Linear(self.in_dim, n_frames * width * self.coarse[0] * self.coarse[1])
            self.conv0 = nn.Conv2d(width, width, 3, padding=1)
            self.conv1 = nn.Conv2d(width, half, 3, padding=1)
            self.conv2 = nn.Conv2d(half, half, 3, padding=1)
            self.out = nn.Conv2d(half, c, 3, padding=1)
        self.register_buffer("in_mean", torch.zeros(n_voxels))
        self.register_buffer("in_std", torch.ones(n_voxels))

    def hyper(self) -> dict:
        return {"n_voxels": self.n_voxels, "mode": self.mode, "n_frames": self.n_frames,
                "frame_shape": list(self.frame_shape), "width": self.width, "seed": self.seed}

    def forward(self, r: torch.Tensor) -> torch.Tensor:
        """(N, in_dim) responses -> (N, n_frames, H, W, C) frames in [0, 1]."""
        if r.ndim != 2 or r.shape[1] != self.in_dim:
            raise ValueError(f"expected (N, {self.in_dim}) input, got {tuple(r.shape)}")
        n = r.shape[0]
        z = (r.reshape(n, -1, self.n_voxels) - self.in_mean) / self.in_std
        x = self.dense(z.reshape(n, -1)).reshape(n * self.n_frames, self.width, *self.coarse)
        x = F.relu(self.conv0(F.relu(x)))
        x = F.relu(self.conv1(F.interpolate(x, scale_factor=2, mode="nearest")))
        x = F.relu(self.conv2(F.interpolate(x, scale_factor=2, mode="nearest")))
        x = torch.sigmoid(self.out(x))
        return x.reshape(n, self.n_frames, *x.shape[1:]).permute(0, 1, 3, 4, 2)

    def group_lasso(self) -> torch.Tensor:
        """Mean over (input, frame, location) of the channel-group L2 norm of
        the dense weights."""
        w = self.dense.weight.reshape(self.n_frames, self.width, -1, self.in_dim)
        return torch.sqrt((w ** 2).sum(1) + 1e-12).mean()

    def frame_times(self, t0: float = 0.0, gap_s: float = 2.0) -> np.ndarray:
        if self.n_frames == 1:
            return np.array([t0])
        return t0 + np.arange(self.n_frames) * gap_s / (self.n_frames - 1)

    def save(self, directory, extra: dict | None = None) -> dict:
        return checkpoint.save_module(self, directory, {"kind": "decoder", "hyper": self.hyper(), **(extra or {})})

    @classmethod
    def load(cls, directory) -> "DecoderModel":
        h = checkpoint.read_meta(directory)["hyper"]
        model = cls(h["n_voxels"], h["mode"], h["n_frames"], tuple(h["frame_shape"]), h["width"], h["seed"])
        checkpoint.load_state(model, directory)
        return model


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float32))


def decoder_forward_05(model: DecoderModel, r) -> np.ndarray:
    if model.mode != "rate_0p5hz":
        raise ValueError("not a 0.5 Hz decoder")
    r = _as_tensor(r)
    if tuple(r.shape) != (model.n_voxels,):
        raise ValueError(f"expected a length-{model.n_voxels} vector, got {tuple(r.shape)}")
    with torch.no_grad():
        return model(r[None])[0, 0].numpy()


def decoder_forward_hfr(model: DecoderModel, r_pair, n_frames: int | None = None) -> np.ndarray:
    if model.mode != "hfr":
        raise ValueError("not an HFR decoder")
    if n_frames is not None and n_frames != model.n_frames:
        raise ValueError(f"model outputs {model.n_frames} frames, not {n_frames}")
    r = _as_tensor(r_pair)
    if tuple(r.shape) != (model.in_dim,):
        raise ValueError(f"expected a length-{model.in_dim} vector, got {tuple(r.shape)}")
    with torch.no_grad():
        return model(r[None])[0].numpy()


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------

@dataclass
class DecoderLossWeights:
    spatial: float = 0.35  # L_s
    action: float = 0.35  # L_a
    regularization: float = 0.3  # total variation + group lasso
    supervised: float = 1.0
    cycle: float = 1.0
    consistency: float = 0.0
    temporal: float = 0.0
    group_lasso_scale: float = 0.1

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"weight {k} must be finite and >= 0, got {v}")

    @classmethod
    def rate_0p5hz(cls) -> "DecoderLossWeights":
        return cls()

    @classmethod
    def hfr(cls) -> "DecoderLossWeights":
        # the consistency term is an unsquared pixel norm (~sqrt(H*W*C) scale),
        # so its weight is small next to the feature losses
        return cls(spatial=0.25, action=0.25, regularization=0.35, cycle=2.0,
                   consistency=0.005, temporal=0.15)


@dataclass
class LossStacks:
    spatial: FeatureStack
    motion: FeatureStack

    @classmethod
    def default(cls, frame_shape=(32, 32, 3)) -> "LossStacks":
        return cls(make_extractor(spatial_spec(input_shape=frame_shape)),
                   make_extractor(motion_spec(input_shape=frame_shape)))


def _frames_nchw(x) -> torch.Tensor:
    x = _as_tensor(x)
    if x.ndim == 3:
        x = x[None]
    return x.reshape(-1, *x.shape[-3:]).permute(0, 3, 1, 2)


def _feature_mse(maps_a, maps_b) -> torch.Tensor:
    """Per-sample sum over stages of the mean squared map difference."""
    return sum(((a - b) ** 2).flatten(1).mean(1) for a, b in zip(maps_a, maps_b))


def loss_spatial(x, x_hat, stacks: LossStacks) -> torch.Tensor:
    """L_s per frame: squared distance of spatial-proxy feature maps."""
    a, b = _frames_nchw(x), _frames_nchw(x_hat)
    return _feature_mse(stacks.spatial(a.to(b.dtype)), stacks.spatial(b))


def loss_action(x, x_hat, stacks: LossStacks) -> torch.Tensor:
    """L_a per frame: motion-proxy features of (frame, zero motion)."""
    a, b = _frames_nchw(x), _frames_nchw(x_hat)
    a = a.to(b.dtype)
    za, zb = torch.cat([a, torch.zeros_like(a)], 1), torch.cat([b, torch.zeros_like(b)], 1)
    return _feature_mse(stacks.motion(za), stacks.motion(zb))


def _check_same(x, x_hat):
    if tuple(np.shape(x)) != tuple(np.shape(x_hat)):
        raise ValueError(f"shape mismatch {tuple(np.shape(x))} vs {tuple(np.shape(x_hat))}")


def loss_supervised_frame(x, x_hat, stacks: LossStacks,
                          weights: DecoderLossWeights = DecoderLossWeights()) -> torch.Tensor:
    """Weighted L_s + L_a, averaged over a leading batch axis if present."""
    _check_same(x, x_hat)
    per = weights.spatial * loss_spatial(x, x_hat, stacks) + weights.action * loss_action(x, x_hat, stacks)
    return per.mean()


def loss_supervised_hfr(frames, recon, stacks: LossStacks,
                        weights: DecoderLossWeights = DecoderLossWeights()) -> torch.Tensor:
    """Sum over the n frames of the per-frame loss; (n, H, W, C) or batched."""
    _check_same(frames, recon)
    x, xh = _as_tensor(frames), _as_tensor(recon)
    if x.ndim == 4:
        x, xh = x[None], xh[None]
    n = x.shape[1]
    per = weights.spatial * loss_spatial(x, xh, stacks) + weights.action * loss_action(x, xh, stacks)
    return per.reshape(-1, n).sum(1).mean()


def total_variation(x) -> torch.Tensor:
    """Mean absolute difference between neighbouring pixels."""
    x = _frames_nchw(x)
    return (x[..., 1:, :] - x[..., :-1, :]).abs().mean() + (x[..., 1:] - x[..., :-1]).abs().mean()


def regularization(x_hat, model: DecoderModel | None, weights: DecoderLossWeights) -> torch.Tensor:
    reg = total_variation(x_hat)
    if model is not None:
        reg = reg + weights.group_lasso_scale * model.group_lasso()
    return reg


def loss_recon_consistency(recon_a_last, recon_b_first) -> torch.Tensor:
    """Pixel L2 distance between the shared frame of two overlapping
    reconstructions; averaged over a leading batch axis if present."""
    _check_same(recon_a_last, recon_b_first)
    a, b = _as_tensor(recon_a_last), _as_tensor(recon_b_first)
    if a.ndim == 3:
        return (a - b).norm()
    return (a - b).flatten(1).norm(dim=1).mean()


def _clips_tensor(v) -> torch.Tensor:
    if isinstance(v, VideoClip):
        return torch.as_tensor(v.frames)[None]
    if isinstance(v, (list, tuple)):
        return torch.stack([torch.as_tensor(c.frames) for c in v])
    return _as_tensor(v)


def loss_cycle(encoder: EncoderModel, decoder: DecoderModel, v, stacks: LossStacks,
               weights: DecoderLossWeights = DecoderLossWeights()) -> torch.Tensor:
    """Frame loss between each clip's middle frame and D(E(clip))."""
    clips = _clips_tensor(v)
    with torch.no_grad():
        r = encoder(clips)
    x_hat = decoder(r.to(next(decoder.parameters()).dtype))[:, 0]
    return loss_supervised_frame(clips[:, clips.shape[1] // 2].to(x_hat.dtype), x_hat, stacks, weights)


def loss_cycle_hfr(encoder: EncoderModel, decoder: DecoderModel, pair, stacks: LossStacks,
                   weights: DecoderLossWeights = DecoderLossWeights()) -> torch.Tensor:
    """HFR cycle loss on one or more OverlapPairs: E on both halves, D on the
    concatenated responses, targets evenly spaced between the two middles."""
    pairs = [pair] if isinstance(pair, OverlapPair) else list(pair)
    v1 = torch.stack([torch.as_tensor(p.v1.frames) for p in pairs])
    v2 = torch.stack([torch.as_tensor(p.v2.frames) for p in pairs])
    targets = torch.stack([torch.as_tensor(p.targets(decoder.n_frames)) for p in pairs])
    with torch.no_grad():
        r = torch.cat([encoder(v1), encoder(v2)], dim=1)
    recon = decoder(r.to(next(decoder.parameters()).dtype))
    return loss_supervised_hfr(targets.to(recon.dtype), recon, stacks, weights)


# --------------------------------------------------------------------------
# Temporal prior
# --------------------------------------------------------------------------

class TemporalPriorNet(nn.Module):
    """Ordered-vs-shuffled clip classifier; T_emb is its last conv output.

    Input (N, T, H, W, C) clips of any length T; the embedding max-pools over
    time, giving (7, 7, 32) for 32x32 frames.
    """

    def __init__(self, channels: int = 3, seed: int = 0):
        super().__init__()
        self.seed = seed
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.c1 = nn.Conv3d(channels, 16, 3, stride=(1, 2, 2), padding=1)
            self.c2 = nn.Conv3d(16, 32, 3, stride=(1, 2, 2), padding=(1, 0, 0))
            self.fc = nn.Linear(32, 1)

    def embed(self, clips: torch.Tensor) -> torch.Tensor:
        """(N, T, H, W, C) -> (N, 7, 7, 32) for 32x32 input."""
        x = clips.permute(0, 4, 1, 2, 3)
        x = F.relu(self.c1(x))
        x = F.relu(self.c2(x))
        # a single out-of-order jump is a local event, so pool with max
        return x.amax(2).permute(0, 2, 3, 1)

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        """Logit of "shuffled" (label 1); ordered clips have label 0."""
        return self.fc(self.embed(clips).amax((1, 2)))[:, 0]


def loss_temporal_prior(net: TemporalPriorNet, v, v_hat) -> torch.Tensor:
    """Mean absolute difference of temporal embeddings."""
    _check_same(v, v_hat)
    a, b = _as_tensor(v), _as_tensor(v_hat)
    if a.ndim == 4:
        a, b = a[None], b[None]
    return (net.embed(a.to(b.dtype)) - net.embed(b)).abs().mean()


@dataclass
class PriorHyper:
    steps: int = 400
    batch: int = 16
    lr: float = 2e-3
    n_frames: tuple[int, int] = (5, 9)
    rates_hz: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    val_size: int = 128
    seed: int = 0


def _shuffled_order(n: int, rng: np.random.Generator) -> np.ndarray:
    while True:
        p = rng.permutation(n)
        if not np.array_equal(p, np.arange(n)) and not np.array_equal(p, np.arange(n)[::-1]):
            return p


def prior_examples(videos, count: int, hyper: PriorHyper, rng: np.random.Generator):
    """``count`` clips, half ordered (label 0) and half shuffled (label 1),
    with a shared frame count per call."""
    rate = videos[0].frame_rate_hz
    n = int(rng.integers(hyper.n_frames[0], hyper.n_frames[1] + 1))
    steps = [int(round(rate / r)) for r in hyper.rates_hz]
    clips, labels = [], []
    for i in range(count):
        step = steps[rng.integers(len(steps))]
        usable = [v for v in videos if v.n_frames > (n - 1) * step]
        while not usable and step > 1:
            step //= 2
            usable = [v for v in videos if v.n_frames > (n - 1) * step]
        if not usable:
            raise ValueError("videos too short for prior clips")
        v = usable[rng.integers(len(usable))]
        s = int(rng.integers(v.n_frames - (n - 1) * step))
        idx = s + step * np.arange(n)
        label = i % 2
        if label:
            idx = idx[_shuffled_order(n, rng)]
        clips.append(v.frames[idx])
        labels.append(label)
    return torch.as_tensor(np.stack(clips)), torch.as_tensor(labels, dtype=torch.float32)


def train_temporal_prior(videos, hyper: PriorHyper = PriorHyper()) -> tuple[TemporalPriorNet, float]:
    """BCE training on ordered vs shuffled clips; returns (net, val accuracy)."""
    if len(videos) < 2:
        raise ValueError("need at least 2 videos for the prior pool")
    net = TemporalPriorNet(videos[0].frame_shape[2], hyper.seed)
    rng = np.random.default_rng(hyper.seed)
    val_rng = np.random.default_rng(hyper.seed + 1)
    opt = torch.optim.Adam(net.parameters(), lr=hyper.lr)
    for _ in range(hyper.steps):
        x, y = prior_examples(videos, hyper.batch, hyper, rng)
        loss = F.binary_cross_entropy_with_logits(net(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    correct = total = 0
    with torch.no_grad():
        for _ in range(max(1, hyper.val_size // hyper.batch)):
            x, y = prior_examples(videos, hyper.batch, hyper, val_rng)
            correct += int(((net(x) > 0).float() == y).sum())
            total += len(y)
    for p in net.parameters():
        p.requires_grad_(False)
    return net.eval(), correct / total


# --------------------------------------------------------------------------
# Encoded clip pools (frozen encoder responses, computed once)
# --------------------------------------------------------------------------

@dataclass
class EncodedPool:
    """Source videos with E(v) precomputed for every window start that is a
    multiple of ``stride`` (and for the mirrored copy when ``hflip``)."""
    sources: list[np.ndarray]
    responses: list[np.ndarray]
    responses_flip: list[np.ndarray] | None
    stride: int
    clip_frames: int

    @classmethod
    def build(cls, encoder: EncoderModel, videos, stride: int = 2, hflip: bool = True) -> "EncodedPool":
        k = encoder.frames_per_clip
        if k % stride:
            raise ValueError("stride must divide the clip length")
        srcs, resp, resp_f = [], [], []
        for v in videos:
            frames = v.frames if isinstance(v, VideoClip) else np.asarray(v, dtype=np.float32)
            starts = np.arange(0, frames.shape[0] - k + 1, stride)
            if len(starts) == 0:
                continue
            clips = frames[starts[:, None] + np.arange(k)]
            srcs.append(frames)
            resp.append(predict(encoder, clips).astype(np.float32))
            if hflip:
                resp_f.append(predict(encoder, clips[:, :, :, ::-1].copy()).astype(np.float32))
        if not srcs:
            raise ValueError("no source long enough for one clip")
        return cls(srcs, resp, resp_f if hflip else None, stride, k)

    def n_windows(self) -> list[int]:
        return [len(r) for r in self.responses]

    def response(self, src: int, window: int, flip: bool) -> np.ndarray:
        table = self.responses_flip if flip else self.responses
        return table[src][window]

    def frames(self, src: int, idx, flip: bool) -> np.ndarray:
        f = self.sources[src][idx]
        return f[..., ::-1, :] if flip else f


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

@dataclass
class DecoderHyper:
    steps: int = 1200
    batch_paired: int = 16
    batch_unpaired: int = 16
    lr: float = 1e-3
    lr_decay: float = 0.2
    decay_every: int | None = None  # default: a quarter of the steps
    width: int = 32
    internal_fraction: float = 0.8
    augment_hflip: bool = True
    seed: int = 0


@dataclass
class Switches:
    supervised_only: bool = False
    no_consistency: bool = False
    synthetic_only_ssl: bool = False


@dataclass
class DecoderTrainLog:
    curves: dict[str, list[float]] = field(default_factory=dict)
    n_unpaired_batches: int = 0

    def add(self, name, value):
        self.curves.setdefault(name, []).append(float(value))

    def to_dict(self):
        return asdict(self)


def _paired_arrays(segments: list[PairedSegment], n_frames: int, hfr: bool):
    """Stacked inputs and target frames for paired training.

    0.5 Hz: (r_i, mid frame i). HFR: triples (r_i, r_{i+1}, r_{i+2}) with
    target frames for both consecutive pairs.
    """
    rs, tg = [], []
    for s in segments:
        t = s.targets()
        k = s.frames_per_tr
        if not hfr:
            if s.n_pairs:
                rs.append(t)
                tg.append(s.mid_frames())
            continue
        offs = np.array(hfr_offsets(n_frames, k))
        for i in range(s.n_pairs - 2):
            rs.append(t[i:i + 3][None])
            idx = np.stack([i * k + k // 2 + offs, (i + 1) * k + k // 2 + offs])
            tg.append(s.video.frames[idx][None])
    if not rs:
        raise ValueError("no paired training examples")
    return np.concatenate(rs).astype(np.float32), np.concatenate(tg).astype(np.float32)


def train_decoder(encoder: EncoderModel, segments: list[PairedSegment],
                  internal: EncodedPool | None, synthetic: EncodedPool | None,
                  mode: str = "rate_0p5hz", n_frames: int = 1,
                  weights: DecoderLossWeights | None = None, hyper: DecoderHyper = DecoderHyper(),
                  switches: Switches = Switches(), stacks: LossStacks | None = None,
                  prior: TemporalPriorNet | None = None) -> tuple[DecoderModel, DecoderTrainLog]:
    """Joint training: every step takes one paired batch and, unless
    ``supervised_only``, one mixed unpaired batch through the frozen encoder.

    HFR steps work on triples of consecutive samples (or windows): both
    overlapping pairs are decoded, supervised or cycle losses apply to each,
    and the reconstruction-consistency term ties their shared frame.
    """
    hfr = mode == "hfr"
    weights = weights or (DecoderLossWeights.hfr() if hfr else DecoderLossWeights.rate_0p5hz())
    stacks = stacks or LossStacks.default(encoder.frame_shape)
    enc_state = checkpoint.parameter_checksum(encoder)
    r_all, tgt_all = _paired_arrays(segments, n_frames, hfr)
    n_vox = r_all.shape[-1]
    model = DecoderModel(n_vox, mode, n_frames, encoder.frame_shape, hyper.width, hyper.seed)
    flat = r_all.reshape(-1, n_vox)
    model.in_mean.copy_(torch.as_tensor(flat.mean(0)))
    model.in_std.copy_(torch.as_tensor(flat.std(0)).clamp_min(1e-6))

    use_cons = hfr and weights.consistency > 0 and not switches.no_consistency
    use_prior = hfr and prior is not None and weights.temporal > 0
    k = encoder.frames_per_clip
    mixer = None
    if not switches.supervised_only:
        frac = 0.0 if switches.synthetic_only_ssl else hyper.internal_fraction
        spec = UnpairedBatchSpec(hyper.batch_unpaired, frac, hyper.augment_hflip, hyper.seed)
        pools = {"internal": internal, "synthetic": synthetic}
        # windows needed per draw: one clip, or three consecutive clips for HFR
        span = (2 * k // internal_stride(internal, synthetic) + 1) if hfr else 1
        streams = {}
        for j, name in enumerate(("internal", "synthetic")):
            p = pools[name]
            need = spec.n_internal if name == "internal" else spec.n_synthetic
            if need and p is None:
                raise ValueError(f"{name} pool required by the batch mix is missing")
            streams[name] = None if p is None else _tagged(
                name, window_stream(p.n_windows(), span, hyper.seed * 7 + j,
                                    hyper.augment_hflip and p.responses_flip is not None))
        mixer = mix_batches(streams["internal"], streams["synthetic"], spec)

    opt = torch.optim.RMSprop(model.parameters(), lr=hyper.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, hyper.decay_every or max(1, hyper.steps // 4), hyper.lr_decay)
    gen = torch.Generator().manual_seed(hyper.seed)
    tlog = DecoderTrainLog()
    r_t, tgt_t = torch.as_tensor(r_all), torch.as_tensor(tgt_all)
    offs = hfr_offsets(n_frames, k) if hfr else [0]

    def decode_triples(r3):
        """Decode both overlapping pairs of (N, 3, V) responses."""
        a = model(torch.cat([r3[:, 0], r3[:, 1]], 1))
        b = model(torch.cat([r3[:, 1], r3[:, 2]], 1))
        return a, b

    for step in range(hyper.steps):
        idx = torch.randint(len(r_t), (hyper.batch_paired,), generator=gen)
        total = 0.0
        if hfr:
            a, b = decode_triples(r_t[idx])
            recon = torch.cat([a, b])
            target = torch.cat([tgt_t[idx, 0], tgt_t[idx, 1]])
            sup = loss_supervised_hfr(target, recon, stacks, weights)
            cons_p = loss_recon_consistency(a[:, -1], b[:, 0])
        else:
            recon = model(r_t[idx])
            target = tgt_t[idx][:, None]
            sup = loss_supervised_hfr(target, recon, stacks, weights)
        sup = sup + weights.regularization * regularization(recon, model, weights)
        if use_prior:
            sup = sup + weights.temporal * loss_temporal_prior(prior, target, recon)
        total = weights.supervised * sup
        tlog.add("supervised", sup.item())
        if use_cons:
            total = total + weights.consistency * cons_p
        if hfr:
            tlog.add("consistency_paired", cons_p.item())

        if mixer is not None:
            batch = next(mixer)
            tlog.n_unpaired_batches += 1
            pools = {"internal": internal, "synthetic": synthetic}
            if hfr:
                step_w = k // pools[batch[0][0]].stride
                r3, tg = [], []
                for name, src, w, flip in batch:
                    p = pools[name]
                    r3.append(np.stack([p.response(src, w + j * step_w, flip) for j in range(3)]))
                    base = w * p.stride + k // 2
                    tg.append(np.stack([p.frames(src, [base + o for o in offs], flip),
                                        p.frames(src, [base + k + o for o in offs], flip)]))
                r3 = torch.as_tensor(np.stack(r3))
                tg = torch.as_tensor(np.ascontiguousarray(np.stack(tg)))
                a, b = decode_triples(r3)
                recon_u = torch.cat([a, b])
                target_u = torch.cat([tg[:, 0], tg[:, 1]])
                cons_u = loss_recon_consistency(a[:, -1], b[:, 0])
                tlog.add("consistency_unpaired", cons_u.item())
                if use_cons:
                    total = total + weights.consistency * cons_u
            else:
                rr, tg = [], []
                for name, src, w, flip in batch:
                    p = pools[name]
                    rr.append(p.response(src, w, flip))
                    tg.append(p.frames(src, [w * p.stride + k // 2], flip))
                recon_u = model(torch.as_tensor(np.stack(rr)))
                target_u = torch.as_tensor(np.ascontiguousarray(np.stack(tg)))
            cyc = loss_supervised_hfr(target_u, recon_u, stacks, weights)
            cyc = cyc + weights.regularization * total_variation(recon_u)
            if use_prior:
                cyc = cyc + weights.temporal * loss_temporal_prior(prior, target_u, recon_u)
            total = total + weights.cycle * cyc
            tlog.add("cycle", cyc.item())

        opt.zero_grad()
        total.backward()
        opt.step()
        sched.step()
        tlog.add("total", total.item())
        if step % 100 == 0:
            log.info("decoder %s step %d loss %.4f", mode, step, total.item())

    if checkpoint.parameter_checksum(encoder) != enc_state:
        raise RuntimeError("encoder parameters changed during decoder training")
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, tlog


def _tagged(name, stream):
    for item in stream:
        yield (name, *item)


def internal_stride(*pools) -> int:
    strides = {p.stride for p in pools if p is not None}
    if len(strides) != 1:
        raise ValueError(f"pools must share one window stride, got {strides}")
    return strides.pop()


# --------------------------------------------------------------------------
# Reconstruction
# --------------------------------------------------------------------------

@dataclass
class Reconstruction:
    frames: np.ndarray  # (K, H, W, C) flattened in time order
    times_s: np.ndarray  # timestamp of each frame in the segment video
    source_fmri: list[list[int]]  # fMRI sample indices used for each call

    def timing(self) -> dict:
        return {"times_s": self.times_s.tolist(), "source_fmri": self.source_fmri}


def reconstruct_05(model: DecoderModel, segment: PairedSegment) -> Reconstruction:
    with torch.no_grad():
        frames = model(torch.as_tensor(segment.targets(), dtype=torch.float32))[:, 0].numpy()
    src = [[i + segment.offset] for i in range(segment.n_pairs)]
    return Reconstruction(frames, segment.mid_frame_times(), src)


def decode_consecutive(model: DecoderModel, segment: PairedSegment) -> np.ndarray:
    """HFR output for every consecutive pair: (n_pairs - 1, n, H, W, C)."""
    t = torch.as_tensor(segment.targets(), dtype=torch.float32)
    with torch.no_grad():
        return model(torch.cat([t[:-1], t[1:]], 1)).numpy()


def reconstruct_hfr(model: DecoderModel, segment: PairedSegment) -> Reconstruction:
    """Frames from every consecutive pair, each pair's last frame dropped
    except for the final pair (it equals the next pair's first)."""
    out = decode_consecutive(model, segment)
    n = model.n_frames
    mids = segment.mid_frame_times()
    frames, times, src = [], [], []
    for i, block in enumerate(out):
        keep = n if i == len(out) - 1 else n - 1
        frames.append(block[:keep])
        times.extend(model.frame_times(mids[i], segment.frames_per_tr / segment.video.frame_rate_hz)[:keep])
        src.append([i + segment.offset, i + 1 + segment.offset])
    return Reconstruction(np.concatenate(frames), np.array(times), src)


def overlap_discrepancy(model: DecoderModel, segment: PairedSegment) -> np.ndarray:
    """Per shared frame: L2 distance between the last frame decoded from
    (r_i, r_{i+1}) and the first decoded from (r_{i+1}, r_{i+2})."""
    out = decode_consecutive(model, segment)
    d = out[:-1, -1] - out[1:, 0]
    return np.sqrt((d.reshape(len(d), -1).astype(np.float64) ** 2).sum(1))
