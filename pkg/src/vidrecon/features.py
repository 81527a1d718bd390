"""Frozen random-convolution feature stacks.

These stand in for pretrained image (VGG/AlexNet) and action-recognition
(P3D/MARS) backbones. Weights are a deterministic function of the spec and
are registered as buffers, so no optimizer ever sees them.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

NONLINEARITIES = {
    "relu": torch.relu,
    "tanh": torch.tanh,
    "abs": torch.abs,
    "linear": lambda x: x,
}


@dataclass(frozen=True)
class Stage:
    kernel: int
    channels: int
    stride: int = 1
    nonlinearity: str = "relu"


@dataclass
class FeatureStackSpec:
    seed: int
    stages: list[Stage]
    input_shape: tuple[int, int, int] = (32, 32, 3)
    backbone: str = "random"  # name of the pretrained net this proxies
    # first-stage colour independence: 0 = same kernel for every colour
    # channel (achromatic), 1 = independent per channel
    color_mix: float = 1.0
    color_groups: int = 1

    def __post_init__(self):
        self.stages = [s if isinstance(s, Stage) else Stage(*s) if isinstance(s, (list, tuple)) else Stage(**s)
                       for s in self.stages]
        self.input_shape = tuple(self.input_shape)
        if not self.stages:
            raise ValueError("need at least one stage")
        for s in self.stages:
            if s.channels < 1 or s.kernel < 1 or s.stride < 1:
                raise ValueError(f"bad stage {s}")
            if s.nonlinearity not in NONLINEARITIES:
                raise ValueError(f"unknown nonlinearity {s.nonlinearity!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d) -> "FeatureStackSpec":
        return cls(**d)

    def output_shapes(self) -> list[tuple[int, int, int]]:
        h, w, _ = self.input_shape
        out = []
        for s in self.stages:
            pad = s.kernel // 2
            h = (h + 2 * pad - s.kernel) // s.stride + 1
            w = (w + 2 * pad - s.kernel) // s.stride + 1
            out.append((h, w, s.channels))
        return out


class FeatureStack(nn.Module):
    def __init__(self, spec: FeatureStackSpec):
        super().__init__()
        self.spec = spec
        gen = torch.Generator().manual_seed(int(spec.seed))
        c_in = spec.input_shape[2]
        for i, s in enumerate(spec.stages):
            fan_in = c_in * s.kernel * s.kernel
            w = torch.randn(s.channels, c_in, s.kernel, s.kernel, generator=gen, dtype=torch.float64)
            if i == 0 and spec.color_mix < 1:
                g = spec.color_groups
                shared = torch.randn(s.channels, g, 1, s.kernel, s.kernel, generator=gen, dtype=torch.float64)
                shared = shared.expand(-1, -1, c_in // g, -1, -1).reshape(w.shape)
                w = np.sqrt(1 - spec.color_mix ** 2) * shared + spec.color_mix * w
            self.register_buffer(f"w{i}", (w * np.sqrt(2.0 / fan_in)).float())
            c_in = s.channels

    def weights(self) -> list[torch.Tensor]:
        return [getattr(self, f"w{i}") for i in range(len(self.spec.stages))]

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """x: (N, C, H, W) -> list of (N, C_i, H_i, W_i)."""
        if tuple(x.shape[1:]) != (self.spec.input_shape[2], *self.spec.input_shape[:2]):
            raise ValueError(f"input {tuple(x.shape[1:])} does not match spec {self.spec.input_shape}")
        maps = []
        for s, w in zip(self.spec.stages, self.weights()):
            x = F.conv2d(x, w.to(x.dtype), stride=s.stride, padding=s.kernel // 2)
            x = NONLINEARITIES[s.nonlinearity](x)
            maps.append(x)
        return maps

    def checksum(self) -> str:
        h = hashlib.sha256()
        for w in self.weights():
            h.update(w.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def make_extractor(spec: FeatureStackSpec) -> FeatureStack:
    stack = FeatureStack(spec)
    stack.eval()
    return stack


# default proxies -----------------------------------------------------------

def spatial_spec(seed: int = 11, input_shape=(32, 32, 3)) -> FeatureStackSpec:
    return FeatureStackSpec(seed, [Stage(3, 16, 1), Stage(3, 32, 2), Stage(3, 32, 2)],
                            input_shape, backbone="vgg", color_mix=0.4)


def motion_spec(seed: int = 23, input_shape=(32, 32, 3)) -> FeatureStackSpec:
    h, w, c = input_shape
    return FeatureStackSpec(seed, [Stage(3, 16, 1), Stage(3, 32, 2)], (h, w, 2 * c),
                            backbone="p3d", color_mix=0.4, color_groups=2)


def eval_spec(seed: int = 37, input_shape=(32, 32, 3)) -> FeatureStackSpec:
    return FeatureStackSpec(seed, [Stage(5, 16, 2), Stage(3, 32, 2), Stage(3, 64, 2)],
                            input_shape, backbone="alexnet", color_mix=0.4)


def stem_spec(seed: int = 41, input_shape=(32, 32, 3)) -> FeatureStackSpec:
    h, w, c = input_shape
    return FeatureStackSpec(seed, [Stage(3, 16, 2)], (h, w, 2 * c), backbone="mars",
                            color_mix=0.4, color_groups=2)


# frame-level API ----------------------------------------------------------

def to_nchw(frames) -> torch.Tensor:
    """(..., H, W, C) array or tensor -> (N, C, H, W) float tensor."""
    t = frames if isinstance(frames, torch.Tensor) else torch.as_tensor(np.asarray(frames, dtype=np.float32))
    if t.ndim == 3:
        t = t[None]
    return t.reshape(-1, *t.shape[-3:]).permute(0, 3, 1, 2)


def _check_frame(stack: FeatureStack, frame):
    shape = tuple(np.shape(frame))[-3:]
    if shape != stack.spec.input_shape:
        raise ValueError(f"frame shape {shape} does not match {stack.spec.input_shape}")


def spatial_features(stack: FeatureStack, frame) -> list[np.ndarray]:
    """Per-stage feature maps of one (H, W, C) frame, each (H_i, W_i, C_i)."""
    _check_frame(stack, frame)
    with torch.no_grad():
        maps = stack(to_nchw(frame))
    return [m[0].permute(1, 2, 0).numpy() for m in maps]


def motion_input(first: torch.Tensor, second: torch.Tensor) -> torch.Tensor:
    """Stack (frame, frame difference) along channels, NCHW."""
    return torch.cat([first, second - first], dim=1)


def motion_features(stack: FeatureStack, pair) -> np.ndarray:
    """Last-stage features of two consecutive frames ``pair = (a, b)``."""
    a, b = pair
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.shape != b.shape:
        raise ValueError("pair frames differ in shape")
    h, w, c = a.shape
    if stack.spec.input_shape != (h, w, 2 * c):
        raise ValueError(f"pair frame shape {a.shape} does not fit stack input {stack.spec.input_shape}")
    with torch.no_grad():
        maps = stack(motion_input(to_nchw(a), to_nchw(b)))
    return maps[-1][0].permute(1, 2, 0).numpy()


def _unit(m: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    flat = m.reshape(m.shape[0], -1)
    return flat / (flat.norm(dim=1, keepdim=True) + eps)


def normalized_features(stack: FeatureStack, frames) -> list[torch.Tensor]:
    """Unit-normalized flattened maps per stage for a batch of frames."""
    with torch.no_grad():
        return [_unit(m) for m in stack(to_nchw(frames))]


def perceptual_distance(stack: FeatureStack, a, b) -> float:
    """Sum over stages of the L2 distance between unit-normalized maps."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.shape != b.shape:
        raise ValueError("frames differ in shape")
    _check_frame(stack, a)
    fa = normalized_features(stack, a)
    fb = normalized_features(stack, b)
    return float(sum((x - y).norm() for x, y in zip(fa, fb)))


def pairwise_distances(feats_a: list[torch.Tensor], feats_b: list[torch.Tensor]) -> torch.Tensor:
    """(Na, Nb) perceptual distances from precomputed normalized features."""
    total = 0
    for x, y in zip(feats_a, feats_b):
        d2 = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2 * x @ y.T
        total = total + d2.clamp_min(0).sqrt()
    return total


def grid_pooled_fn(stack: FeatureStack, stage: int = 1, grid: int = 4):
    """Feature function for alignment: one stage's map pooled on a grid.

    Returns a callable (N, H, W, C) -> (N, channels * grid * grid).
    """
    def fn(frames):
        with torch.no_grad():
            m = stack(to_nchw(frames))[stage]
            p = F.adaptive_avg_pool2d(m, grid)
        return p.reshape(p.shape[0], -1).double().numpy()
    return fn


def spec_json(spec: FeatureStackSpec) -> str:
    return json.dumps(spec.to_dict(), sort_keys=True)
