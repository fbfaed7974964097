"""Audio-driven rhythmic module.

Three dilated 1-D convolutions over audio feature frames produce per-frame
landmark offsets. The training target is the ground-truth motion's deviation
from the mean motion, so the offsets carry timing and amplitude rather than
semantic content; composing them onto the semantic motion restores natural
rhythm without changing which cue is shown.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .audio import AudioFeatures
from .errors import ShapeMismatch
from .motion import MeanMotion, MotionSequence


@dataclass
class RhythmOffset:
    """Per-frame landmark offsets in mm, shaped like motion frames."""

    offsets: np.ndarray

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        if self.offsets.ndim != 3 or self.offsets.shape[2] != 3:
            raise ValueError(f"offsets must be (L, J, 3), got {self.offsets.shape}")
        if not np.isfinite(self.offsets).all():
            raise ValueError("offsets contain non-finite values")


class RhythmGenerator(nn.Module):
    """Audio features (T_a, d_a) -> offsets (L, J, 3).

    The conv stack runs at the audio frame rate with widening dilation, then
    the channel output is linearly resampled along time to the requested
    motion length. Output units are mm, scaled by ``output_scale`` from the
    network's natural O(1) range.
    """

    def __init__(self, audio_dim: int, n_joints: int, hidden: int = 64,
                 kernel_size: int = 9, dilations: tuple[int, int, int] = (1, 4, 16),
                 output_scale: float = 100.0):
        super().__init__()
        self.audio_dim = audio_dim
        self.n_joints = n_joints
        self.output_scale = output_scale
        pads = [d * (kernel_size - 1) // 2 for d in dilations]
        self.conv1 = nn.Conv1d(audio_dim, hidden, kernel_size, padding=pads[0], dilation=dilations[0])
        self.conv2 = nn.Conv1d(hidden, hidden, kernel_size, padding=pads[1], dilation=dilations[1])
        self.conv3 = nn.Conv1d(hidden, n_joints * 3, kernel_size, padding=pads[2], dilation=dilations[2])
        self.act = nn.GELU()

    def forward(self, features: torch.Tensor, n_frames: int) -> torch.Tensor:
        """(B, T_a, d_a) -> (B, n_frames, J*3) in scaled units."""
        h = features.transpose(1, 2)
        h = self.act(self.conv1(h))
        h = self.act(self.conv2(h))
        h = self.conv3(h)
        h = nn.functional.interpolate(h, size=n_frames, mode="linear", align_corners=True)
        return h.transpose(1, 2)

    @torch.no_grad()
    def generate(self, features: AudioFeatures, n_frames: int) -> RhythmOffset:
        self.eval()
        feats = torch.as_tensor(features.frames, dtype=torch.float32)[None]
        out = self.forward(feats, n_frames)[0].cpu().numpy() * self.output_scale
        return RhythmOffset(offsets=out.reshape(n_frames, self.n_joints, 3))


def rhythm_generate(generator: RhythmGenerator, features: AudioFeatures,
                    n_frames: int) -> RhythmOffset:
    return generator.generate(features, n_frames)


def rhythm_loss_arrays(offsets: np.ndarray, gt_frames: np.ndarray,
                       mean_frames: np.ndarray) -> float:
    """Mean L1 norm of (offsets - (gt - mean)) over all elements."""
    if offsets.shape != gt_frames.shape or gt_frames.shape != mean_frames.shape:
        raise ShapeMismatch(
            f"shapes differ: offsets {offsets.shape}, gt {gt_frames.shape}, "
            f"mean {mean_frames.shape}"
        )
    return float(np.mean(np.abs(offsets - (gt_frames - mean_frames))))


def rhythm_loss(offset: RhythmOffset, gt: MotionSequence, mean: MeanMotion) -> float:
    return rhythm_loss_arrays(offset.offsets, gt.frames, mean.mean_frames)


def rhythm_loss_tensor(offsets: torch.Tensor, gt: torch.Tensor,
                       mean: torch.Tensor) -> torch.Tensor:
    """Differentiable variant over (B, L, J*3) tensors in scaled units."""
    if offsets.shape != gt.shape or gt.shape != mean.shape:
        raise ShapeMismatch("tensor shapes differ in rhythm loss")
    return (offsets - (gt - mean)).abs().mean()


def compose(semantic: MotionSequence, offset: RhythmOffset) -> MotionSequence:
    """M* = semantic motion plus rhythm offsets, validated as a motion."""
    if offset.offsets.shape != semantic.frames.shape:
        raise ShapeMismatch(
            f"offsets {offset.offsets.shape} vs motion {semantic.frames.shape}"
        )
    return semantic.with_frames(semantic.frames + offset.offsets)


def save_rhythm_checkpoint(generator: RhythmGenerator, path) -> None:
    torch.save({
        "schema_version": 1,
        "kind": "rhythm_generator",
        "audio_dim": generator.audio_dim,
        "n_joints": generator.n_joints,
        "output_scale": generator.output_scale,
        "state_dict": generator.state_dict(),
    }, path)


def load_rhythm_checkpoint(path) -> RhythmGenerator:
    doc = torch.load(path, map_location="cpu", weights_only=False)
    if doc.get("kind") != "rhythm_generator" or doc.get("schema_version") != 1:
        raise ValueError(f"{path} is not a rhythm_generator checkpoint")
    generator = RhythmGenerator(
        audio_dim=doc["audio_dim"], n_joints=doc["n_joints"],
        output_scale=doc["output_scale"],
    )
    generator.load_state_dict(doc["state_dict"])
    generator.eval()
    return generator
