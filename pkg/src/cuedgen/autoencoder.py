"""Motion autoencoder defining the latent space the diffusion model runs in.

The encoder is a strided 1-D conv stack (x4 temporal downsampling, 32-dim
codes). The decoder cross-attends from learned per-frame time queries to the
latent codes through a banded attention window: frame t may only read latent
steps k with |t/downsample - k| <= window + 1/2, so perturbing one latent
step moves only the frames within (window + 1/2) * downsample = 10 frames of
its center under the defaults. There is no query self-attention, which makes
that locality bound exact rather than empirical.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DivergenceDetected
from .motion import DEFAULT_JOINT_MAP, MotionSequence
from .encoders import COORD_SCALE_MM

DEFAULT_LATENT_DIM = 32
DEFAULT_MODEL_DIM = 64
DOWNSAMPLE = 4
ATTN_WINDOW = 2
MAX_FRAMES = 512


@dataclass
class LatentSequence:
    """Latent motion codes (T_z, d_z); ``num_frames`` remembers the source
    frame count so decoding can unpad to the exact original length."""

    codes: np.ndarray
    num_frames: Optional[int] = None

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float32)
        if self.codes.ndim != 2 or self.codes.shape[0] < 1:
            raise ValueError(f"codes must be (T_z, d_z) with T_z >= 1, got {self.codes.shape}")
        if not np.isfinite(self.codes).all():
            raise ValueError("latent codes contain non-finite values")

    @property
    def length(self) -> int:
        return self.codes.shape[0]


class _CrossAttentionBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim))
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, queries: torch.Tensor, memory: torch.Tensor,
                mask: Optional[torch.Tensor]) -> torch.Tensor:
        attended, _ = self.attn(queries, memory, memory, attn_mask=mask, need_weights=False)
        queries = self.norm1(queries + attended)
        return self.norm2(queries + self.ff(queries))


def banded_cross_mask(n_frames: int, n_codes: int, downsample: int,
                      window: int) -> torch.Tensor:
    """(L, T_z) additive mask: -inf outside the +/-window latent-step band."""
    frame_pos = torch.arange(n_frames, dtype=torch.float32)[:, None] / downsample
    code_pos = torch.arange(n_codes, dtype=torch.float32)[None, :]
    allowed = (frame_pos - code_pos).abs() <= window + 0.5
    mask = torch.zeros(n_frames, n_codes)
    mask[~allowed] = float("-inf")
    return mask


class MotionAutoencoder(nn.Module):
    """Conv encoder and windowed cross-attention decoder over landmark frames."""

    def __init__(self, n_joints: int, latent_dim: int = DEFAULT_LATENT_DIM,
                 model_dim: int = DEFAULT_MODEL_DIM, heads: int = 4,
                 decoder_layers: int = 2, fps: float = 30.0,
                 joint_map: Optional[dict] = None,
                 attn_window: int = ATTN_WINDOW):
        super().__init__()
        self.n_joints = n_joints
        self.latent_dim = latent_dim
        self.downsample = DOWNSAMPLE
        self.attn_window = attn_window
        self.fps = fps
        self.joint_map = dict(joint_map or DEFAULT_JOINT_MAP)
        feat = n_joints * 3
        self.encoder = nn.Sequential(
            nn.Conv1d(feat, model_dim, kernel_size=5, padding=2), nn.GELU(),
            nn.Conv1d(model_dim, model_dim, kernel_size=4, stride=2, padding=1), nn.GELU(),
            nn.Conv1d(model_dim, model_dim, kernel_size=4, stride=2, padding=1), nn.GELU(),
            nn.Conv1d(model_dim, latent_dim, kernel_size=3, padding=1),
        )
        self.code_input = nn.Linear(latent_dim, model_dim)
        self.queries = nn.Parameter(torch.randn(MAX_FRAMES, model_dim) * 0.02)
        self.blocks = nn.ModuleList(
            [_CrossAttentionBlock(model_dim, heads) for _ in range(decoder_layers)]
        )
        self.output = nn.Linear(model_dim, feat)
        # static pose offset (scaled coords) subtracted before encoding and
        # added back after decoding; set from data by the trainer
        self.register_buffer("center", torch.zeros(feat))

    def set_center_from(self, batches: Sequence[torch.Tensor]) -> None:
        total = torch.zeros_like(self.center)
        count = 0
        for batch in batches:
            total += batch.sum(dim=(0, 1))
            count += batch.shape[0] * batch.shape[1]
        self.center.copy_(total / max(1, count))

    def pad_length(self, length: int) -> int:
        rem = length % self.downsample
        return length if rem == 0 else length + (self.downsample - rem)

    def encode_frames(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, L, J*3) scaled coords -> (B, T_z, d_z); L must be a multiple
        of the downsampling factor."""
        if frames.shape[1] % self.downsample != 0:
            raise ValueError("frame count must be a multiple of the downsampling factor")
        frames = frames - self.center
        return self.encoder(frames.transpose(1, 2)).transpose(1, 2)

    def decode_codes(self, codes: torch.Tensor, n_frames: Optional[int] = None) -> torch.Tensor:
        """(B, T_z, d_z) -> (B, L, J*3) scaled coords."""
        n_codes = codes.shape[1]
        if n_frames is None:
            n_frames = n_codes * self.downsample
        if n_frames > MAX_FRAMES:
            raise ValueError(f"decode length {n_frames} exceeds the query table ({MAX_FRAMES})")
        mask = banded_cross_mask(n_frames, n_codes, self.downsample, self.attn_window)
        mask = mask.to(codes.device, dtype=codes.dtype)
        memory = self.code_input(codes)
        h = self.queries[None, :n_frames, :].to(codes.dtype).expand(codes.shape[0], -1, -1)
        for block in self.blocks:
            h = block(h, memory, mask)
        return self.output(h) + self.center

    def _to_tensor(self, motion: MotionSequence) -> tuple[torch.Tensor, int]:
        frames = motion.frames / COORD_SCALE_MM
        length = frames.shape[0]
        padded = self.pad_length(length)
        if padded != length:
            pad = np.repeat(frames[-1:], padded - length, axis=0)
            frames = np.concatenate([frames, pad], axis=0)
        tensor = torch.as_tensor(frames.reshape(padded, -1), dtype=torch.float32)[None]
        return tensor, length

    @torch.no_grad()
    def encode(self, motion: MotionSequence) -> LatentSequence:
        """Deterministic latent codes; pads (replicating the last frame) when
        the length is not a multiple of the downsampling factor."""
        self.eval()
        tensor, length = self._to_tensor(motion)
        codes = self.encode_frames(tensor)[0]
        return LatentSequence(codes=codes.cpu().numpy(), num_frames=length)

    @torch.no_grad()
    def decode(self, latent: LatentSequence, n_frames: Optional[int] = None) -> MotionSequence:
        self.eval()
        target = n_frames if n_frames is not None else latent.num_frames
        codes = torch.as_tensor(latent.codes, dtype=torch.float32)[None]
        padded_target = None if target is None else self.pad_length(target)
        out = self.decode_codes(codes, padded_target)[0].cpu().numpy()
        frames = out.reshape(out.shape[0], self.n_joints, 3) * COORD_SCALE_MM
        if target is not None:
            frames = frames[:target]
        return MotionSequence(frames=frames, fps=self.fps, joint_map=dict(self.joint_map))

    def reconstruct(self, motion: MotionSequence) -> MotionSequence:
        return self.decode(self.encode(motion), n_frames=motion.length)


def train_autoencoder(
    model: MotionAutoencoder,
    motions: Sequence[MotionSequence],
    epochs: int,
    batch_size: int = 32,
    learning_rate: float = 1e-3,
    seed: int = 0,
) -> list[float]:
    """MSE reconstruction training; returns the per-epoch mean loss.

    Items are bucketed by padded length so every batch is rectangular.
    """
    if len(motions) < 2:
        raise ValueError("training needs at least 2 sequences")
    tensors: dict[int, list[torch.Tensor]] = {}
    for m in motions:
        tensor, _ = model._to_tensor(m)
        tensors.setdefault(tensor.shape[1], []).append(tensor[0])
    buckets = {k: torch.stack(v) for k, v in tensors.items()}
    model.set_center_from(list(buckets.values()))

    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(1, epochs))
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(epochs):
        model.train()
        epoch_losses = []
        for length in sorted(buckets):
            data = buckets[length]
            order = rng.permutation(len(data))
            for start in range(0, len(data), batch_size):
                batch = data[order[start:start + batch_size]]
                recon = model.decode_codes(model.encode_frames(batch), batch.shape[1])
                loss = F.mse_loss(recon, batch)
                if not torch.isfinite(loss):
                    raise DivergenceDetected("autoencoder loss is non-finite")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                epoch_losses.append(float(loss.detach()))
        scheduler.step()
        losses.append(float(np.mean(epoch_losses)))
    return losses


def save_ae_checkpoint(model: MotionAutoencoder, path) -> None:
    torch.save({
        "schema_version": 1,
        "kind": "motion_autoencoder",
        "n_joints": model.n_joints,
        "latent_dim": model.latent_dim,
        "attn_window": model.attn_window,
        "fps": model.fps,
        "joint_map": {k: list(v) for k, v in model.joint_map.items()},
        "state_dict": model.state_dict(),
    }, path)


def load_ae_checkpoint(path) -> MotionAutoencoder:
    doc = torch.load(path, map_location="cpu", weights_only=False)
    if doc.get("kind") != "motion_autoencoder" or doc.get("schema_version") != 1:
        raise ValueError(f"{path} is not a motion_autoencoder checkpoint")
    model = MotionAutoencoder(
        n_joints=doc["n_joints"],
        latent_dim=doc["latent_dim"],
        fps=doc["fps"],
        joint_map={k: tuple(v) for k, v in doc["joint_map"].items()},
        attn_window=doc["attn_window"],
    )
    model.load_state_dict(doc["state_dict"])
    model.eval()
    return model
