"""Video-to-fMRI encoder: frozen motion stem, learned temporal collapse,
two spatial convolutions and a dense voxel readout."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .data import PairedSegment, stack_pairs
from .evaluation import SignificanceReport, significance_report
from .features import FeatureStack, FeatureStackSpec, make_extractor, stem_spec
from .preprocess import columnwise_pearson
from .simulator import VideoClip

log = logging.getLogger(__name__)

N_TEMPORAL_KERNELS = 8


class DegenerateInput(ValueError):
    pass


def temporal_collapse(features, kernels):
    """Linear combinations over time, one per kernel, stacked on channels.

    ``features`` is (T, H, W, C) or (N, T, H, W, C); ``kernels`` is (K, T).
    Output channel ``k * C + c`` holds sum_t features[t, ..., c] * kernels[k, t].
    Accepts numpy arrays or tensors and returns the same kind.
    """
    is_np = not isinstance(features, torch.Tensor)
    x = torch.as_tensor(np.asarray(features)) if is_np else features
    k = torch.as_tensor(np.asarray(kernels)) if not isinstance(kernels, torch.Tensor) else kernels
    k = k.to(x.dtype)
    if k.ndim != 2 or x.ndim not in (4, 5):
        raise ValueError("expected (T,H,W,C) or (N,T,H,W,C) features and (K,T) kernels")
    t_axis = x.ndim - 4
    if k.shape[1] != x.shape[t_axis]:
        raise ValueError(f"kernel length {k.shape[1]} != time steps {x.shape[t_axis]}")
    out = torch.einsum("...thwc,kt->...hwkc", x, k)
    out = out.reshape(*out.shape[:-2], -1)
    return out.numpy() if is_np else out


class EncoderModel(nn.Module):
    def __init__(self, n_voxels: int, frames_per_clip: int = 16,
                 frame_shape: tuple[int, int, int] = (32, 32, 3),
                 stem: FeatureStackSpec | None = None, conv_channels: int = 16, seed: int = 0,
                 use_motion: bool = True):
        super().__init__()
        # False gives the spatial-only encoder: the stem never sees frame differences
        self.use_motion = use_motion
        self.n_voxels = n_voxels
        self.frames_per_clip = frames_per_clip
        self.frame_shape = tuple(frame_shape)
        self.seed = seed
        self.stem_spec = stem or stem_spec(input_shape=frame_shape)
        self.stem = make_extractor(self.stem_spec)
        sh, sw, sc = self.stem_spec.output_shapes()[-1]
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            init = torch.full((N_TEMPORAL_KERNELS, frames_per_clip), 1.0 / frames_per_clip)
            self.temporal_kernels = nn.Parameter(init + 0.1 / frames_per_clip * torch.randn(init.shape))
            self.conv1 = nn.Conv2d(N_TEMPORAL_KERNELS * sc, conv_channels, 3, stride=2, padding=1)
            self.conv2 = nn.Conv2d(conv_channels, conv_channels, 3, stride=2, padding=1)
            flat = conv_channels * ((sh + 3) // 4) * ((sw + 3) // 4)
            self.readout = nn.Linear(flat, n_voxels)
        # per-channel standardization of the frozen stem, set from training clips
        self.register_buffer("stem_mean", torch.zeros(sc))
        self.register_buffer("stem_std", torch.ones(sc))
        self.register_buffer("out_mean", torch.zeros(n_voxels))
        self.register_buffer("out_std", torch.ones(n_voxels))

    def hyper(self) -> dict:
        return {"n_voxels": self.n_voxels, "frames_per_clip": self.frames_per_clip,
                "frame_shape": list(self.frame_shape), "stem": self.stem_spec.to_dict(),
                "conv_channels": self.conv1.out_channels, "seed": self.seed,
                "use_motion": self.use_motion}

    def stem_features(self, clips: torch.Tensor) -> torch.Tensor:
        """(N, T, H, W, C) clips -> (N, T, C', H', W') frozen stem maps.

        The stem sees each frame together with its difference from the
        previous frame (zero for the first frame).
        """
        n, t = clips.shape[:2]
        x = clips.permute(0, 1, 4, 2, 3)
        diff = torch.zeros_like(x)
        if self.use_motion:
            diff[:, 1:] = x[:, 1:] - x[:, :-1]
        inp = torch.cat([x, diff], dim=2).reshape(n * t, -1, *x.shape[-2:])
        with torch.no_grad():
            m = self.stem(inp)[-1]
        m = (m - self.stem_mean[:, None, None]) / self.stem_std[:, None, None]
        return m.reshape(n, t, *m.shape[1:])

    def head(self, stem_maps: torch.Tensor) -> torch.Tensor:
        """Trainable part: stem maps (N, T, C, H, W) -> voxel responses (N, V)."""
        x = torch.einsum("ntchw,kt->nkchw", stem_maps, self.temporal_kernels.to(stem_maps.dtype))
        x = x.reshape(x.shape[0], -1, *x.shape[-2:])
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        z = self.readout(x.flatten(1))
        return z * self.out_std + self.out_mean

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        if tuple(clips.shape[1:]) != (self.frames_per_clip, *self.frame_shape):
            raise ValueError(f"clips {tuple(clips.shape[1:])} do not match "
                             f"({self.frames_per_clip}, {self.frame_shape})")
        return self.head(self.stem_features(clips))

    def freeze(self) -> "EncoderModel":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def save(self, directory, extra: dict | None = None) -> dict:
        return checkpoint.save_module(self, directory, {"kind": "encoder", "hyper": self.hyper(), **(extra or {})})

    @classmethod
    def load(cls, directory) -> "EncoderModel":
        meta = checkpoint.read_meta(directory)
        h = meta["hyper"]
        model = cls(h["n_voxels"], h["frames_per_clip"], tuple(h["frame_shape"]),
                    FeatureStackSpec.from_dict(h["stem"]), h["conv_channels"], h["seed"],
                    h.get("use_motion", True))
        checkpoint.load_state(model, directory)
        return model


def encoder_forward(model: EncoderModel, clip: VideoClip) -> np.ndarray:
    if clip.n_frames != model.frames_per_clip or clip.frame_shape != model.frame_shape:
        raise ValueError(f"clip {clip.frames.shape} does not match encoder input "
                         f"({model.frames_per_clip}, {model.frame_shape})")
    with torch.no_grad():
        out = model(torch.as_tensor(clip.frames)[None])
    return out[0].double().numpy()


def predict(model: EncoderModel, clips, batch: int = 64) -> np.ndarray:
    """Responses for an (N, T, H, W, C) clip array."""
    out = []
    with torch.no_grad():
        for i in range(0, len(clips), batch):
            out.append(model(torch.as_tensor(np.asarray(clips[i:i + batch], dtype=np.float32))))
    return torch.cat(out).double().numpy()


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------

@dataclass
class EncoderLossConfig:
    alpha: float = 0.5
    # "aligned": alpha * (1 - cos); "paper": the literal + alpha * cos form
    cosine_sign: str = "aligned"

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError("alpha must be finite and >= 0")
        if self.cosine_sign not in ("aligned", "paper"):
            raise ValueError(f"unknown cosine_sign {self.cosine_sign!r}")


def encoder_loss(r, r_hat, cfg: EncoderLossConfig = EncoderLossConfig()):
    """L2 distance plus an angular term; batched inputs are averaged.

    Tensors in give a tensor out (differentiable); arrays give a float.
    """
    as_float = not isinstance(r_hat, torch.Tensor)
    r_t = torch.as_tensor(np.asarray(r, dtype=np.float64)) if not isinstance(r, torch.Tensor) else r
    h_t = torch.as_tensor(np.asarray(r_hat, dtype=np.float64)) if as_float else r_hat
    if r_t.shape != h_t.shape:
        raise ValueError(f"shape mismatch {tuple(r_t.shape)} vs {tuple(h_t.shape)}")
    r_t = r_t.to(h_t.dtype)
    h_norm = h_t.norm(dim=-1)
    if torch.any(h_norm == 0):
        raise DegenerateInput("predicted response is the zero vector")
    l2 = (r_t - h_t).norm(dim=-1)
    cos = (r_t * h_t).sum(-1) / (r_t.norm(dim=-1) * h_norm).clamp_min(1e-12)
    ang = 1 - cos if cfg.cosine_sign == "aligned" else cos
    loss = (l2 + cfg.alpha * ang).mean()
    return float(loss) if as_float else loss


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

@dataclass
class EncoderHyper:
    epochs: int = 20
    batch: int = 8
    lr: float = 1e-3
    lr_decay: float = 0.2
    decay_every: int = 8
    loss: EncoderLossConfig = field(default_factory=EncoderLossConfig)
    conv_channels: int = 16
    weight_decay: float = 0.0
    use_motion: bool = True
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = EncoderLossConfig(**self.loss)


@dataclass
class EncoderTrainLog:
    epoch_loss: list[float]
    initial_loss: float

    def to_dict(self):
        return asdict(self)


def train_encoder(segments: list[PairedSegment], hyper: EncoderHyper = EncoderHyper(),
                  ) -> tuple[EncoderModel, EncoderTrainLog]:
    """Supervised training on paired (clip, response) examples."""
    clips, targets = stack_pairs(segments)
    if len(clips) == 0:
        raise ValueError("empty training set")
    model = EncoderModel(targets.shape[1], clips.shape[1], clips.shape[2:],
                         conv_channels=hyper.conv_channels, seed=hyper.seed, use_motion=hyper.use_motion)
    y = torch.as_tensor(targets, dtype=torch.float32)
    model.out_mean.copy_(y.mean(0))
    model.out_std.copy_(y.std(0).clamp_min(1e-6))
    raw = torch.cat([model.stem_features(torch.as_tensor(clips[i:i + 64]))
                     for i in range(0, len(clips), 64)])
    model.stem_mean.copy_(raw.mean(dim=(0, 1, 3, 4)))
    model.stem_std.copy_(raw.std(dim=(0, 1, 3, 4)).clamp_min(1e-6))
    feats = (raw - model.stem_mean[:, None, None]) / model.stem_std[:, None, None]

    def full_loss():
        with torch.no_grad():
            return float(encoder_loss(y, model.head(feats), hyper.loss))

    initial = full_loss()
    opt = torch.optim.RMSprop(model.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, hyper.decay_every, hyper.lr_decay)
    gen = torch.Generator().manual_seed(hyper.seed)
    curve = []
    for epoch in range(hyper.epochs):
        order = torch.randperm(len(feats), generator=gen)
        total = 0.0
        for i in range(0, len(order), hyper.batch):
            idx = order[i:i + hyper.batch]
            loss = encoder_loss(y[idx], model.head(feats[idx]), hyper.loss)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        curve.append(total / len(order))
        log.info("encoder epoch %d loss %.4f", epoch, curve[-1])
    model.freeze()
    return model, EncoderTrainLog(curve, initial)


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

def predict_segment(model: EncoderModel, segment: PairedSegment) -> np.ndarray:
    return predict(model, segment.clips())


def temporal_correlation(model: EncoderModel, segment: PairedSegment) -> tuple[np.ndarray, np.ndarray]:
    """Per-voxel Pearson r between recorded and predicted sequences.

    Returns (r, valid); a constant predicted voxel gets r = 0, valid = False.
    """
    r, valid = columnwise_pearson(segment.targets(), predict_segment(model, segment))
    return r, valid


def encoder_significance(model: EncoderModel, segment: PairedSegment, n_perm: int = 1000,
                         block_len: int = 10, alpha: float = 0.05, seed: int = 0) -> SignificanceReport:
    return significance_report(segment.targets(), predict_segment(model, segment),
                               n_perm, block_len, alpha, seed)
