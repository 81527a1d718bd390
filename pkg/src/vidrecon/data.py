"""Paired (clip, fMRI sample) data assembled from a benchmark on disk."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .preprocess import AlignmentResult, VoxelSelection
from .simulator import BenchmarkManifest, SegmentEntry, VideoClip


@dataclass
class PairedSegment:
    """One recording: its video and repeat-averaged responses of selected voxels.

    Clip ``i`` covers frames ``[i * k, (i + 1) * k)`` with ``k`` frames per TR
    and is paired with fMRI sample ``i + offset``.
    """
    video: VideoClip
    fmri: np.ndarray  # (T, V)
    offset: int
    frames_per_tr: int

    @property
    def n_pairs(self) -> int:
        by_video = self.video.n_frames // self.frames_per_tr
        return max(0, min(by_video, self.fmri.shape[0] - self.offset))

    def clip_frames(self, i: int) -> np.ndarray:
        k = self.frames_per_tr
        return self.video.frames[i * k:(i + 1) * k]

    def clips(self) -> np.ndarray:
        """(n_pairs, k, H, W, C)"""
        k = self.frames_per_tr
        n = self.n_pairs
        return self.video.frames[:n * k].reshape(n, k, *self.video.frame_shape)

    def mid_frames(self) -> np.ndarray:
        """Middle frame of every paired clip: (n_pairs, H, W, C)."""
        k = self.frames_per_tr
        return self.video.frames[np.arange(self.n_pairs) * k + k // 2]

    def targets(self) -> np.ndarray:
        return self.fmri[self.offset:self.offset + self.n_pairs]

    def mid_frame_times(self) -> np.ndarray:
        k = self.frames_per_tr
        return (np.arange(self.n_pairs) * k + k // 2) / self.video.frame_rate_hz


def load_paired(manifest: BenchmarkManifest, selection: VoxelSelection,
                alignment: AlignmentResult, split: str = "train") -> list[PairedSegment]:
    """Paired segments for ``split`` in {"train", "test"}; repeats are averaged."""
    if split == "train":
        entries: list[SegmentEntry] = manifest.train_segments
    elif split == "test":
        entries = [manifest.test_segment]
    else:
        raise ValueError(f"unknown split {split!r}")
    k = int(round(manifest.tr_seconds * manifest.frame_rate_hz))
    idx = np.asarray(selection.selected_indices, dtype=int)
    out = []
    for e in entries:
        video, series = manifest.load_segment(e)
        mean = np.mean([s.samples[:, idx] for s in series], axis=0)
        out.append(PairedSegment(video, mean, alignment.pairing_offset_trs, k))
    return out


def stack_pairs(segments: list[PairedSegment]) -> tuple[np.ndarray, np.ndarray]:
    """All clips and targets of several segments concatenated."""
    clips = [s.clips() for s in segments if s.n_pairs]
    if not clips:
        raise ValueError("no paired examples")
    return np.concatenate(clips), np.concatenate([s.targets() for s in segments if s.n_pairs])
