"""Dual motion/gloss encoders with CLIP-style contrastive fine-tuning.

Both encoders are small transformers (2 layers, 4 heads, model dim 64)
trained from scratch on the synthetic corpus; embeddings are L2-normalized
so the temperature-scaled dot product in the contrastive loss is a cosine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DivergenceDetected, InvalidTemperature
from .motion import MotionSequence, resample_frames
from .rules import Gloss, MappingTable

DEFAULT_EMBED_DIM = 64
DEFAULT_TEMPERATURE = 0.07
MOTION_ENCODER_FRAMES = 32
COORD_SCALE_MM = 100.0

PAD_TOKEN = "[pad]"
UNK_TOKEN = "[unk]"


class GlossTokenizer:
    """Whitespace tokenizer over the template-fragment vocabulary."""

    def __init__(self, vocab: Sequence[str]):
        self.vocab = list(vocab)
        if self.vocab[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError("vocab must start with the pad and unk tokens")
        self.index = {tok: i for i, tok in enumerate(self.vocab)}

    @classmethod
    def from_table(cls, table: MappingTable) -> "GlossTokenizer":
        words = set()
        for frag in list(table.shape_templates.values()) + list(table.position_templates.values()) \
                + list(table.lip_templates.values()):
            words.update(cls._words(frag))
        words.add("and")
        return cls([PAD_TOKEN, UNK_TOKEN] + sorted(words))

    @staticmethod
    def _words(text: str) -> list[str]:
        cleaned = "".join(ch if ch.isalnum() else " " for ch in text.lower())
        return cleaned.split()

    def encode(self, text: str) -> list[int]:
        ids = [self.index.get(w, 1) for w in self._words(text)]
        return ids or [1]

    def batch(self, texts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        """Pad token ids to a rectangle; returns (ids, pad_mask) with the mask
        True at padded positions."""
        encoded = [self.encode(t) for t in texts]
        width = max(len(e) for e in encoded)
        ids = torch.zeros(len(encoded), width, dtype=torch.long)
        mask = torch.ones(len(encoded), width, dtype=torch.bool)
        for i, e in enumerate(encoded):
            ids[i, : len(e)] = torch.tensor(e, dtype=torch.long)
            mask[i, : len(e)] = False
        return ids, mask

    def __len__(self) -> int:
        return len(self.vocab)


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float32)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32) * (-math.log(10000.0) / dim))
    enc = torch.zeros(length, dim)
    enc[:, 0::2] = torch.sin(pos * div)
    enc[:, 1::2] = torch.cos(pos * div)
    return enc


def _transformer(dim: int, heads: int, layers: int) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        d_model=dim, nhead=heads, dim_feedforward=dim * 2,
        dropout=0.0, activation="gelu", batch_first=True,
    )
    return nn.TransformerEncoder(layer, num_layers=layers)


class MotionEncoder(nn.Module):
    """Frames -> unit embedding. Inputs are resampled to a fixed internal
    length and coordinates scaled to ~O(1) before entering the network."""

    def __init__(self, n_joints: int, dim: int = DEFAULT_EMBED_DIM,
                 heads: int = 4, layers: int = 2,
                 n_frames: int = MOTION_ENCODER_FRAMES):
        super().__init__()
        self.n_joints = n_joints
        self.n_frames = n_frames
        self.input = nn.Linear(n_joints * 3, dim)
        self.register_buffer("positions", sinusoidal_positions(n_frames, dim))
        self.encoder = _transformer(dim, heads, layers)
        self.head = nn.Linear(dim, dim)

    def preprocess(self, motions: Sequence[MotionSequence]) -> torch.Tensor:
        batch = np.stack([
            resample_frames(m.frames, self.n_frames).reshape(self.n_frames, -1)
            for m in motions
        ]) / COORD_SCALE_MM
        return torch.as_tensor(batch, dtype=torch.float32)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        h = self.input(frames) + self.positions[None, :, :].to(frames.dtype)
        h = self.encoder(h)
        z = self.head(h.mean(dim=1))
        return F.normalize(z, dim=-1)

    @torch.no_grad()
    def encode(self, motion: MotionSequence) -> np.ndarray:
        self.eval()
        z = self.forward(self.preprocess([motion]))
        return z[0].cpu().numpy()


class GlossEncoder(nn.Module):
    """Token ids -> unit embedding with masked mean pooling."""

    def __init__(self, vocab_size: int, dim: int = DEFAULT_EMBED_DIM,
                 heads: int = 4, layers: int = 2, max_tokens: int = 256):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, dim, padding_idx=0)
        self.register_buffer("positions", sinusoidal_positions(max_tokens, dim))
        self.encoder = _transformer(dim, heads, layers)
        self.head = nn.Linear(dim, dim)

    def forward(self, ids: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        h = self.embedding(ids) + self.positions[None, : ids.shape[1], :].to(ids.device)
        h = self.encoder(h, src_key_padding_mask=pad_mask)
        keep = (~pad_mask).float()[:, :, None]
        pooled = (h * keep).sum(dim=1) / keep.sum(dim=1).clamp(min=1.0)
        z = self.head(pooled)
        return F.normalize(z, dim=-1)


@dataclass
class PairBatch:
    """Aligned motions and glosses; index i pairs motions[i] with glosses[i]."""

    motions: list[MotionSequence]
    glosses: list[str]

    def __post_init__(self):
        if len(self.motions) != len(self.glosses):
            raise ValueError("motions and glosses must have equal lengths")
        if len(self.motions) < 2:
            raise ValueError("a contrastive batch needs at least 2 pairs")

    def __len__(self) -> int:
        return len(self.motions)


def contrastive_loss(z_motion: torch.Tensor, z_gloss: torch.Tensor,
                     temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """Symmetric cross entropy over temperature-scaled similarity rows.

    Row i of the similarity matrix is scored against the diagonal pairing in
    both the motion-to-gloss and gloss-to-motion directions; the two
    direction losses (each a batch mean) are averaged.
    """
    if temperature <= 0:
        raise InvalidTemperature(f"temperature must be > 0, got {temperature}")
    if z_motion.shape[0] < 2:
        raise ValueError("a contrastive batch needs at least 2 pairs")
    if z_motion.shape != z_gloss.shape:
        raise ValueError("embedding batches must have matching shapes")
    sims = z_motion @ z_gloss.T / temperature
    labels = torch.arange(sims.shape[0], device=sims.device)
    loss_m = F.cross_entropy(sims, labels)
    loss_g = F.cross_entropy(sims.T, labels)
    return 0.5 * (loss_m + loss_g)


class GlossClip(nn.Module):
    """The encoder pair plus its tokenizer and temperature."""

    def __init__(self, tokenizer: GlossTokenizer, n_joints: int,
                 dim: int = DEFAULT_EMBED_DIM,
                 temperature: float = DEFAULT_TEMPERATURE):
        super().__init__()
        self.tokenizer = tokenizer
        self.dim = dim
        self.temperature = temperature
        self.motion_encoder = MotionEncoder(n_joints, dim=dim)
        self.gloss_encoder = GlossEncoder(len(tokenizer), dim=dim)

    def embed_batch(self, batch: PairBatch) -> tuple[torch.Tensor, torch.Tensor]:
        frames = self.motion_encoder.preprocess(batch.motions)
        ids, mask = self.tokenizer.batch(batch.glosses)
        return self.motion_encoder(frames), self.gloss_encoder(ids, mask)

    @torch.no_grad()
    def encode_motion(self, motion: MotionSequence) -> np.ndarray:
        return self.motion_encoder.encode(motion)

    @torch.no_grad()
    def encode_gloss(self, gloss) -> np.ndarray:
        self.eval()
        text = gloss.text if isinstance(gloss, Gloss) else str(gloss)
        ids, mask = self.tokenizer.batch([text])
        return self.gloss_encoder(ids, mask)[0].cpu().numpy()

    def gloss_embedding_tensor(self, texts: Sequence[str]) -> torch.Tensor:
        ids, mask = self.tokenizer.batch(texts)
        return self.gloss_encoder(ids, mask)


class GlossClipTrainer:
    """Holds the model and optimizer state for fine-tuning steps."""

    def __init__(self, model: GlossClip, learning_rate: float = 1e-3):
        self.model = model
        self.learning_rate = learning_rate
        self.optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)

    def finetune_step(self, batch: PairBatch,
                      temperature: Optional[float] = None) -> float:
        """One gradient step on the contrastive loss; returns the loss value."""
        self.model.train()
        temperature = temperature if temperature is not None else self.model.temperature
        z_m, z_g = self.model.embed_batch(batch)
        loss = contrastive_loss(z_m, z_g, temperature)
        if not torch.isfinite(loss):
            raise DivergenceDetected("contrastive loss is non-finite")
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        return float(loss.detach())


def save_clip_checkpoint(model: GlossClip, path) -> None:
    torch.save({
        "schema_version": 1,
        "kind": "gloss_clip",
        "dim": model.dim,
        "temperature": model.temperature,
        "vocab": model.tokenizer.vocab,
        "n_joints": model.motion_encoder.n_joints,
        "state_dict": model.state_dict(),
    }, path)


def load_clip_checkpoint(path) -> GlossClip:
    doc = torch.load(path, map_location="cpu", weights_only=False)
    if doc.get("kind") != "gloss_clip" or doc.get("schema_version") != 1:
        raise ValueError(f"{path} is not a gloss_clip checkpoint")
    model = GlossClip(
        tokenizer=GlossTokenizer(doc["vocab"]),
        n_joints=doc["n_joints"],
        dim=doc["dim"],
        temperature=doc["temperature"],
    )
    model.load_state_dict(doc["state_dict"])
    model.eval()
    return model
