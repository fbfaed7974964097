"""Training orchestration and end-to-end generation.

Stages run in dependency order: the motion autoencoder is trained first and
frozen (the diffusion model needs a fixed latent space), then the gloss/motion
encoder pair, then the noise predictor jointly with the rhythm generator
under the weighted total loss. The latent pipeline operates at one canonical
frame count (timing is normalized by linear resampling on the way in and
restored from the audio duration on the way out), which keeps every batch
rectangular; the rhythm pathway sees the same normalized time base.

Every run writes a manifest: config echo, seeds, checkpoint hashes and
metric report paths, so any reported number can be reproduced.
"""

from __future__ import annotations

import datetime
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import audio as audio_mod
from . import diffusion as diff_mod
from . import metrics as metrics_mod
from . import rhythm as rhythm_mod
from .autoencoder import (
    LatentSequence,
    MotionAutoencoder,
    load_ae_checkpoint,
    save_ae_checkpoint,
    train_autoencoder,
)
from .encoders import (
    COORD_SCALE_MM,
    GlossClip,
    GlossClipTrainer,
    GlossTokenizer,
    PairBatch,
    load_clip_checkpoint,
    save_clip_checkpoint,
)
from .errors import (
    DivergenceDetected,
    MissingCheckpoint,
    TooFewItems,
    ZeroVector,
)
from .motion import (
    MeanMotion,
    MotionSequence,
    load_motion,
    load_segments,
    mean_motion,
    resample_frames,
    save_motion,
    save_segments,
)
from .rules import MappingTable, compile_gloss, gloss_via_llm
from .synthetic import (
    CanonicalPoses,
    SyntheticItem,
    estimate_gesture_segments,
    make_corpus,
    sample_sentences,
    synth_audio,
    SyntheticSpec,
)

logger = logging.getLogger("cuedgen")


@dataclass
class TrainConfig:
    """Hyperparameters and paths for one training run."""

    # loss weights
    alpha: float = 1.0
    beta: float = 0.2
    gamma: float = 0.1
    # optimization
    batch_size: int = 128
    epochs: int = 100
    learning_rate: float = 1e-3
    # diffusion
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    p_drop: float = 0.1
    guidance: float = 2.5
    x0_clamp: Optional[float] = 4.0
    # data
    split_ratio: float = 0.8
    seed: int = 0
    fps: float = 30.0
    canonical_length: int = 48
    audio_frames: int = 96
    audio_backend: str = "mfcc"
    # model sizes
    latent_dim: int = 32
    model_dim: int = 64
    predictor_dim: int = 128
    predictor_layers: int = 3
    embed_dim: int = 64
    temperature: float = 0.07
    diffusion_batch_size: Optional[int] = None
    # ablation switches
    use_gloss: bool = True
    use_rhythm: bool = True
    arm_training: str = "joint"  # or "separate"
    # synthetic corpus (used when data_dir is unset)
    n_sentences: int = 200
    corpus_seed: int = 1
    min_units: int = 2
    max_units: int = 4
    duration_range: tuple[float, float] = (0.35, 0.85)
    hand_lead_s: float = 0.2
    oracle_noise_mm: float = 0.5
    oracle_rhythm_mm: tuple[float, float] = (5.0, 16.0)
    # paths
    data_dir: Optional[str] = None
    out_dir: str = "runs/default"
    table_path: Optional[str] = None
    gloss_backend: str = "rules"

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError("split_ratio must be in (0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.canonical_length % 4 != 0:
            raise ValueError("canonical_length must be a multiple of 4")
        if self.arm_training not in ("joint", "separate"):
            raise ValueError("arm_training must be 'joint' or 'separate'")
        if isinstance(self.duration_range, list):
            self.duration_range = tuple(self.duration_range)
        if isinstance(self.oracle_rhythm_mm, list):
            self.oracle_rhythm_mm = tuple(self.oracle_rhythm_mm)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=1)

    def table(self) -> MappingTable:
        if self.table_path:
            return MappingTable.load(self.table_path)
        return MappingTable.default()


def total_loss(noise_loss: float, semantic_loss: float, rhythm_loss: float,
               alpha: float = 1.0, beta: float = 0.2, gamma: float = 0.1):
    """Weighted sum of the three training loss components."""
    return alpha * noise_loss + beta * semantic_loss + gamma * rhythm_loss


def semantic_loss(z0, z0_star) -> float:
    """One minus the cosine between the flattened latent sequences."""
    a = np.asarray(z0, dtype=np.float64).ravel()
    b = np.asarray(z0_star, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("semantic loss needs nonzero latent vectors")
    return float(1.0 - (a @ b) / (na * nb))


def semantic_loss_tensor(z0: torch.Tensor, z0_star: torch.Tensor) -> torch.Tensor:
    """Differentiable batch mean of 1 - cos over flattened latents."""
    flat_a = z0.reshape(z0.shape[0], -1)
    flat_b = z0_star.reshape(z0_star.shape[0], -1)
    cos = torch.nn.functional.cosine_similarity(flat_a, flat_b, dim=1, eps=1e-12)
    return (1.0 - cos).mean()


def split_dataset(items: Sequence, ratio: float = 0.8, seed: int = 0):
    """Deterministic shuffled split into (train, test) of sizes
    ceil(ratio*n) / n - ceil(ratio*n)."""
    items = list(items)
    n = len(items)
    if n < 5:
        raise TooFewItems(f"need at least 5 items to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = math.ceil(ratio * n)
    train = [items[i] for i in order[:n_train]]
    test = [items[i] for i in order[n_train:]]
    return train, test


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    """Reproducibility record for one training or generation run."""

    kind: str
    created_at: str
    config: dict
    seed: int
    checkpoints: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    losses: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, kind: str, config: dict, seed: int) -> "RunManifest":
        return cls(kind=kind,
                   created_at=datetime.datetime.now(datetime.timezone.utc).isoformat(),
                   config=config, seed=seed)

    def add_artifact(self, group: str, name: str, path) -> None:
        entry = {"path": str(path), "sha256": file_sha256(path)}
        getattr(self, group)[name] = entry

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=1)

    @staticmethod
    def load(path) -> "RunManifest":
        with open(path, "r", encoding="utf-8") as fh:
            return RunManifest(**json.load(fh))

    def verify(self) -> None:
        """Check every referenced artifact exists and hash-matches."""
        for group in ("checkpoints", "outputs", "reports"):
            for name, entry in getattr(self, group).items():
                path = entry["path"]
                if not os.path.exists(path):
                    raise FileNotFoundError(f"manifest {group}/{name}: {path} is missing")
                actual = file_sha256(path)
                if actual != entry["sha256"]:
                    raise ValueError(
                        f"manifest {group}/{name}: {path} hash mismatch "
                        f"({actual[:12]} != {entry['sha256'][:12]})"
                    )


# ---------------------------------------------------------------------------
# corpus handling


def build_corpus(config: TrainConfig, table: Optional[MappingTable] = None,
                 poses: Optional[CanonicalPoses] = None) -> list[SyntheticItem]:
    table = table or config.table()
    sentences = sample_sentences(config.n_sentences, seed=config.corpus_seed,
                                 min_units=config.min_units, max_units=config.max_units)
    return make_corpus(
        sentences, table=table, poses=poses, seed=config.corpus_seed,
        duration_range=config.duration_range, offset=config.hand_lead_s,
        noise=config.oracle_noise_mm, fps=config.fps,
        rhythm_mm=tuple(config.oracle_rhythm_mm),
    )


def save_corpus(items: Sequence[SyntheticItem], out_dir, motion_format: str = "json") -> None:
    out_dir = Path(out_dir)
    (out_dir / "items").mkdir(parents=True, exist_ok=True)
    index = []
    for i, item in enumerate(items):
        stem = f"item{i:04d}"
        save_motion(item.motion, out_dir / "items" / f"{stem}.motion.{motion_format}")
        audio_mod.save_wav(item.audio, out_dir / "items" / f"{stem}.audio.wav")
        save_segments(item.gesture_segs, out_dir / "items" / f"{stem}.gesture_segs.json")
        save_segments(item.audio_segs, out_dir / "items" / f"{stem}.audio_segs.json")
        index.append({"stem": stem, "text": item.text})
    with open(out_dir / "corpus.json", "w", encoding="utf-8") as fh:
        json.dump({"schema_version": 1, "items": index}, fh, indent=1)


def load_corpus(data_dir, table: Optional[MappingTable] = None) -> list[SyntheticItem]:
    from .rules import parse_pinyin, syllable_to_unit, units_to_gloss

    table = table or MappingTable.default()
    data_dir = Path(data_dir)
    with open(data_dir / "corpus.json", "r", encoding="utf-8") as fh:
        index = json.load(fh)["items"]
    items = []
    for entry in index:
        stem, text = entry["stem"], entry["text"]
        base = data_dir / "items" / stem
        motion_path = f"{base}.motion.json"
        if not os.path.exists(motion_path):
            motion_path = f"{base}.motion.bin"
        units = [syllable_to_unit(s, table) for s in parse_pinyin(text)]
        items.append(SyntheticItem(
            text=text,
            units=units,
            spec=None,
            motion=load_motion(motion_path),
            gesture_segs=load_segments(f"{base}.gesture_segs.json"),
            audio_segs=load_segments(f"{base}.audio_segs.json"),
            audio=audio_mod.load_wav(f"{base}.audio.wav"),
            gloss_text=units_to_gloss(units, table).text,
        ))
    return items


# ---------------------------------------------------------------------------
# training


def _canonical_tensor(motion: MotionSequence, length: int) -> torch.Tensor:
    frames = resample_frames(motion.frames, length) / COORD_SCALE_MM
    return torch.as_tensor(frames.reshape(length, -1), dtype=torch.float32)


def _audio_tensor(features: audio_mod.AudioFeatures, n_frames: int) -> torch.Tensor:
    return torch.as_tensor(audio_mod.resample_features(features, n_frames),
                           dtype=torch.float32)


class Pipeline:
    """A trained (or loading) bundle of the four model stages."""

    def __init__(self, config: TrainConfig,
                 table: Optional[MappingTable] = None,
                 poses: Optional[CanonicalPoses] = None):
        self.config = config
        self.table = table or config.table()
        self.poses = poses or CanonicalPoses.default()
        self.ae: Optional[MotionAutoencoder] = None
        self.clip: Optional[GlossClip] = None
        self.predictor: Optional[diff_mod.NoisePredictor] = None
        self.schedule: Optional[diff_mod.DiffusionSchedule] = None
        self.rhythm: Optional[rhythm_mod.RhythmGenerator] = None
        self.mean: Optional[MeanMotion] = None
        # per-dim affine normalization of the AE latents so diffusion runs
        # over roughly unit-scale codes; fit on the training split
        self.latent_shift: Optional[np.ndarray] = None
        self.latent_scale: Optional[np.ndarray] = None
        self._trainer_state: Optional[dict] = None

    def _normalize_latents(self, z0: torch.Tensor) -> torch.Tensor:
        shift = torch.as_tensor(self.latent_shift, dtype=z0.dtype)
        scale = torch.as_tensor(self.latent_scale, dtype=z0.dtype)
        return (z0 - shift) / scale

    def _denormalize_latents(self, z0: torch.Tensor) -> torch.Tensor:
        shift = torch.as_tensor(self.latent_shift, dtype=z0.dtype)
        scale = torch.as_tensor(self.latent_scale, dtype=z0.dtype)
        return z0 * scale + shift

    # -- stage: autoencoder -------------------------------------------------

    def train_ae(self, items: Sequence[SyntheticItem], epochs: int) -> list[float]:
        config = self.config
        n_joints = items[0].motion.n_joints
        torch.manual_seed(config.seed)
        self.ae = MotionAutoencoder(
            n_joints=n_joints, latent_dim=config.latent_dim,
            model_dim=config.model_dim, fps=config.fps,
            joint_map=dict(items[0].motion.joint_map),
        )
        canonical = [
            MotionSequence(resample_frames(it.motion.frames, config.canonical_length),
                           fps=config.fps, joint_map=dict(it.motion.joint_map))
            for it in items
        ]
        batch = min(config.batch_size, len(items))
        if batch < config.batch_size:
            logger.warning("clamping batch size %d to dataset size %d", config.batch_size, batch)
        losses = train_autoencoder(self.ae, canonical, epochs=epochs, batch_size=batch,
                                   learning_rate=config.learning_rate, seed=config.seed)
        self.ae.eval()
        return losses

    # -- stage: gloss clip --------------------------------------------------

    def train_clip(self, items: Sequence[SyntheticItem], epochs: int) -> list[float]:
        config = self.config
        torch.manual_seed(config.seed + 1)
        tokenizer = GlossTokenizer.from_table(self.table)
        self.clip = GlossClip(tokenizer, n_joints=items[0].motion.n_joints,
                              dim=config.embed_dim, temperature=config.temperature)
        trainer = GlossClipTrainer(self.clip, learning_rate=config.learning_rate)
        batch = min(config.batch_size, len(items))
        rng = np.random.default_rng(config.seed + 1)
        losses = []
        for _ in range(epochs):
            order = rng.permutation(len(items))
            epoch_losses = []
            for start in range(0, len(items), batch):
                chunk = [items[i] for i in order[start:start + batch]]
                if len(chunk) < 2:
                    continue
                pair = PairBatch(motions=[c.motion for c in chunk],
                                 glosses=[c.gloss_text for c in chunk])
                epoch_losses.append(trainer.finetune_step(pair))
            losses.append(float(np.mean(epoch_losses)))
        self.clip.eval()
        return losses

    # -- stage: diffusion + rhythm -------------------------------------------

    def _prepare_diffusion_data(self, items: Sequence[SyntheticItem]) -> dict:
        config = self.config
        assert self.ae is not None and self.clip is not None
        length = config.canonical_length
        frames = torch.stack([_canonical_tensor(it.motion, length) for it in items])
        with torch.no_grad():
            z0 = self.ae.encode_frames(frames)
            if self.latent_shift is None:
                self.latent_shift = z0.mean(dim=(0, 1)).numpy()
                self.latent_scale = np.maximum(z0.std(dim=(0, 1)).numpy(), 1e-3)
            z0 = self._normalize_latents(z0)
            gloss_emb = self.clip.gloss_embedding_tensor([it.gloss_text for it in items])
        feats = torch.stack([
            _audio_tensor(audio_mod.extract_audio_features(it.audio, config.audio_backend),
                          config.audio_frames)
            for it in items
        ])
        mean = torch.as_tensor(
            self.mean.mean_frames.reshape(length, -1) / COORD_SCALE_MM,
            dtype=torch.float32,
        )
        return {"frames": frames, "z0": z0, "gloss": gloss_emb, "audio": feats, "mean": mean}

    def _prepare_rhythm_data(self, items: Sequence[SyntheticItem]) -> list[dict]:
        """Native-rate pairs for the rhythm generator: audio features at
        their own frame rate and deviation targets at each item's own
        length. The sway the generator must pick up lives at a fixed
        frequency in real time, so no duration normalization here."""
        config = self.config
        out = []
        for it in items:
            feats = audio_mod.extract_audio_features(it.audio, config.audio_backend)
            length = it.motion.length
            mean = resample_frames(self.mean.mean_frames, length)
            dev = (it.motion.frames - mean).reshape(length, -1) / COORD_SCALE_MM
            out.append({
                "features": torch.as_tensor(feats.frames, dtype=torch.float32)[None],
                "target": torch.as_tensor(dev, dtype=torch.float32)[None],
            })
        return out

    def train_diffusion(self, items: Sequence[SyntheticItem], epochs: int,
                        start_epoch: int = 0) -> dict[str, list[float]]:
        """Train the noise predictor (and, when joint, the rhythm generator)
        under the weighted total loss. Per-epoch RNG streams are derived from
        (seed, epoch) so resumed runs replay the same batches."""
        config = self.config
        if self.ae is None or self.clip is None:
            raise MissingCheckpoint("train the autoencoder and gloss encoders first")
        if self.mean is None:
            self.mean = mean_motion([it.motion for it in items],
                                    length=config.canonical_length)
        if self.schedule is None:
            self.schedule = diff_mod.DiffusionSchedule.linear(
                config.diffusion_steps, config.beta_start, config.beta_end)
        data = self._prepare_diffusion_data(items)
        audio_dim = data["audio"].shape[2]

        if self.predictor is None:
            torch.manual_seed(config.seed + 2)
            self.predictor = diff_mod.NoisePredictor(
                latent_dim=config.latent_dim, model_dim=config.predictor_dim,
                layers=config.predictor_layers,
                embed_dim=config.embed_dim, audio_dim=audio_dim,
                schedule=self.schedule,
            )
        if self.rhythm is None:
            torch.manual_seed(config.seed + 3)
            self.rhythm = rhythm_mod.RhythmGenerator(
                audio_dim=audio_dim, n_joints=items[0].motion.n_joints,
                output_scale=COORD_SCALE_MM,
            )

        params = list(self.predictor.parameters())
        optimizer = torch.optim.Adam(params, lr=config.learning_rate)
        if self._trainer_state is not None:
            optimizer.load_state_dict(self._trainer_state["optimizer"])

        n_items = len(items)
        requested = config.diffusion_batch_size or config.batch_size
        batch = min(requested, n_items)
        if batch < requested:
            logger.warning("clamping batch size %d to dataset size %d", requested, batch)
        history = {"noise": [], "semantic": [], "rhythm": [], "total": []}
        self.predictor.train()
        self.rhythm.train()
        horizon = max(1, config.epochs)
        for epoch in range(start_epoch, start_epoch + epochs):
            # cosine decay tied to the absolute epoch index so a resumed run
            # applies the same learning rate the straight run would have
            progress = min(1.0, epoch / horizon)
            lr = config.learning_rate * (0.1 + 0.45 * (1.0 + math.cos(math.pi * progress)))
            for group in optimizer.param_groups:
                group["lr"] = lr
            epoch_seed = config.seed * 1000003 + epoch
            rng = np.random.default_rng(epoch_seed)
            gen = torch.Generator("cpu").manual_seed(epoch_seed)
            order = rng.permutation(n_items)
            sums = {"noise": 0.0, "semantic": 0.0, "rhythm": 0.0, "total": 0.0}
            n_batches = 0
            for start in range(0, n_items, batch):
                idx = torch.as_tensor(order[start:start + batch].copy())
                z0 = data["z0"][idx]
                b = z0.shape[0]
                n = torch.as_tensor(
                    rng.integers(1, self.schedule.n_steps + 1, size=b), dtype=torch.long)
                gloss = data["gloss"][idx]
                if config.use_gloss:
                    cond_mask = torch.as_tensor(rng.random(b) >= config.p_drop)
                else:
                    cond_mask = torch.zeros(b, dtype=torch.bool)
                audio = data["audio"][idx]

                noise = torch.randn(z0.shape, generator=gen)
                z_n = diff_mod.forward_noise(self.schedule, z0, n, noise)
                pred = self.predictor(z_n, n, z_g=gloss, cond_mask=cond_mask, audio=audio)
                loss_noise = torch.nn.functional.mse_loss(pred, noise)

                ab = torch.as_tensor(self.schedule.alpha_bars, dtype=z0.dtype)[n - 1]
                ab = ab[:, None, None]
                z0_hat = (z_n - torch.sqrt(1.0 - ab) * pred) / torch.sqrt(ab)
                loss_sem = semantic_loss_tensor(z0_hat, z0)

                loss = config.alpha * loss_noise + config.beta * loss_sem
                if not torch.isfinite(loss):
                    raise DivergenceDetected(f"total loss non-finite at epoch {epoch}")
                optimizer.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(params, 1.0)
                optimizer.step()
                for key, val in (("noise", loss_noise), ("semantic", loss_sem)):
                    sums[key] += float(val.detach())
                sums["total"] += float(loss.detach())
                n_batches += 1
            for key in ("noise", "semantic", "total"):
                history[key].append(sums[key] / max(1, n_batches))
        self.predictor.eval()
        self._trainer_state = {"optimizer": optimizer.state_dict(),
                               "next_epoch": start_epoch + epochs}

        # The rhythm generator owns a disjoint parameter set, so optimizing
        # the weighted total decomposes exactly into this separate pass; it
        # runs at native frame rate where the audio-locked dynamics live.
        if config.use_rhythm and epochs > 0:
            rhythm_data = self._prepare_rhythm_data(items)
            history["rhythm"] = self._train_rhythm_native(
                rhythm_data, epochs, start_epoch=start_epoch)
            # fold gamma-weighted rhythm means into the logged total
            history["total"] = [
                t + config.gamma * r for t, r in zip(history["total"], history["rhythm"])
            ]
        else:
            history["rhythm"] = [0.0] * epochs
        return history

    def _train_rhythm_native(self, rhythm_data: list[dict], epochs: int,
                             start_epoch: int = 0) -> list[float]:
        config = self.config
        optimizer = torch.optim.Adam(self.rhythm.parameters(), lr=config.learning_rate)
        if self._trainer_state and self._trainer_state.get("rhythm_optimizer"):
            optimizer.load_state_dict(self._trainer_state["rhythm_optimizer"])
        losses = []
        horizon = max(1, config.epochs)
        self.rhythm.train()
        for epoch in range(start_epoch, start_epoch + epochs):
            progress = min(1.0, epoch / horizon)
            lr = config.learning_rate * (0.1 + 0.45 * (1.0 + math.cos(math.pi * progress)))
            for group in optimizer.param_groups:
                group["lr"] = lr
            rng = np.random.default_rng(config.seed * 999983 + epoch)
            epoch_losses = []
            for i in rng.permutation(len(rhythm_data)):
                entry = rhythm_data[int(i)]
                offsets = self.rhythm(entry["features"], entry["target"].shape[1])
                loss = rhythm_mod.rhythm_loss_tensor(offsets, entry["target"],
                                                     torch.zeros_like(entry["target"]))
                if not torch.isfinite(loss):
                    raise DivergenceDetected(f"rhythm loss non-finite at epoch {epoch}")
                optimizer.zero_grad()
                (config.gamma * loss).backward()
                torch.nn.utils.clip_grad_norm_(self.rhythm.parameters(), 1.0)
                optimizer.step()
                epoch_losses.append(float(loss.detach()))
            losses.append(float(np.mean(epoch_losses)))
        self.rhythm.eval()
        if self._trainer_state is not None:
            self._trainer_state["rhythm_optimizer"] = optimizer.state_dict()
        return losses

    # -- persistence ----------------------------------------------------------

    def save(self, out_dir, manifest: RunManifest) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if self.ae is not None:
            save_ae_checkpoint(self.ae, out_dir / "ae.pt")
            manifest.add_artifact("checkpoints", "autoencoder", out_dir / "ae.pt")
        if self.clip is not None:
            save_clip_checkpoint(self.clip, out_dir / "clip.pt")
            manifest.add_artifact("checkpoints", "gloss_clip", out_dir / "clip.pt")
        if self.predictor is not None:
            extra = {
                "trainer_state": self._trainer_state,
                "latent_shift": None if self.latent_shift is None else self.latent_shift.tolist(),
                "latent_scale": None if self.latent_scale is None else self.latent_scale.tolist(),
            }
            diff_mod.save_predictor_checkpoint(self.predictor, self.schedule,
                                               out_dir / "diffusion.pt", extra=extra)
            manifest.add_artifact("checkpoints", "diffusion", out_dir / "diffusion.pt")
        if self.rhythm is not None:
            rhythm_mod.save_rhythm_checkpoint(self.rhythm, out_dir / "rhythm.pt")
            manifest.add_artifact("checkpoints", "rhythm", out_dir / "rhythm.pt")
        if self.mean is not None:
            mean_seq = MotionSequence(self.mean.mean_frames, fps=self.mean.fps)
            save_motion(mean_seq, out_dir / "mean_motion.json")
            manifest.add_artifact("checkpoints", "mean_motion", out_dir / "mean_motion.json")

    @classmethod
    def load(cls, run_dir, config: Optional[TrainConfig] = None) -> "Pipeline":
        run_dir = Path(run_dir)
        if config is None:
            config_path = run_dir / "config.json"
            if not config_path.exists():
                raise MissingCheckpoint(f"no config.json under {run_dir}")
            config = TrainConfig.load(config_path)
        pipe = cls(config)
        for name, loader, attr in (
            ("ae.pt", load_ae_checkpoint, "ae"),
            ("clip.pt", load_clip_checkpoint, "clip"),
            ("rhythm.pt", rhythm_mod.load_rhythm_checkpoint, "rhythm"),
        ):
            path = run_dir / name
            if not path.exists():
                raise MissingCheckpoint(f"missing checkpoint {path}")
            setattr(pipe, attr, loader(path))
        diff_path = run_dir / "diffusion.pt"
        if not diff_path.exists():
            raise MissingCheckpoint(f"missing checkpoint {diff_path}")
        pipe.predictor, pipe.schedule, extra = diff_mod.load_predictor_checkpoint(diff_path)
        pipe._trainer_state = extra.get("trainer_state")
        if extra.get("latent_shift") is not None:
            pipe.latent_shift = np.asarray(extra["latent_shift"], dtype=np.float32)
            pipe.latent_scale = np.asarray(extra["latent_scale"], dtype=np.float32)
        mean_path = run_dir / "mean_motion.json"
        if mean_path.exists():
            mean_seq = load_motion(mean_path)
            pipe.mean = MeanMotion(mean_frames=mean_seq.frames, fps=mean_seq.fps,
                                   n_sequences=0)
        return pipe

    # -- generation -----------------------------------------------------------

    def generate(
        self,
        text: str,
        audio_track: Optional[audio_mod.AudioTrack] = None,
        seed: int = 0,
        guidance: Optional[float] = None,
        use_gloss: Optional[bool] = None,
        use_rhythm: Optional[bool] = None,
    ) -> tuple[MotionSequence, dict]:
        """Run gloss -> embedding -> diffusion sample -> decode -> rhythm ->
        compose for one sentence. Returns (motion, stage record)."""
        config = self.config
        for name in ("ae", "clip", "predictor", "schedule", "rhythm"):
            if getattr(self, name) is None:
                raise MissingCheckpoint(f"pipeline stage {name!r} is not loaded")
        guidance = config.guidance if guidance is None else guidance
        use_gloss = config.use_gloss if use_gloss is None else use_gloss
        use_rhythm = config.use_rhythm if use_rhythm is None else use_rhythm

        if config.gloss_backend == "llm":
            gloss = gloss_via_llm(text, table=self.table)
        else:
            gloss = compile_gloss(text, self.table)
        if audio_track is None:
            units = gloss.units
            spec = SyntheticSpec(units=list(units), unit_durations=0.5,
                                 offset=config.hand_lead_s, fps=config.fps)
            audio_track = synth_audio(spec)
        features = audio_mod.extract_audio_features(audio_track, config.audio_backend)
        audio_tensor = _audio_tensor(features, config.audio_frames)[None]

        z_g = None
        if use_gloss:
            z_g = torch.as_tensor(self.clip.encode_gloss(gloss), dtype=torch.float32)[None]
        t_lat = config.canonical_length // self.ae.downsample
        z0 = diff_mod.sample(
            self.predictor, self.schedule, (t_lat, config.latent_dim),
            z_g=z_g, audio=audio_tensor, guidance_scale=guidance, seed=seed,
            x0_clamp=config.x0_clamp,
        )
        if self.latent_shift is not None:
            z0 = self._denormalize_latents(z0)
        latent = LatentSequence(codes=z0[0].numpy(), num_frames=config.canonical_length)
        semantic = self.ae.decode(latent)

        # stretch the semantic motion to the audio duration first; rhythm
        # offsets are generated at native rate where the audio dynamics live
        target_len = max(2, int(round(audio_track.duration * config.fps)))
        semantic = MotionSequence(
            frames=resample_frames(semantic.frames, target_len),
            fps=config.fps, joint_map=dict(semantic.joint_map),
        )
        if use_rhythm:
            offset = self.rhythm.generate(features, target_len)
            composed = rhythm_mod.compose(semantic, offset)
        else:
            composed = semantic

        final = MotionSequence(
            frames=composed.frames,
            fps=config.fps, joint_map=dict(composed.joint_map),
            units=[[u.consonant_group, u.vowel_group] for u in gloss.units] or None,
        )
        record = {
            "text": text, "gloss": gloss.text, "gloss_backend": gloss.backend,
            "seed": seed, "guidance": guidance,
            "use_gloss": use_gloss, "use_rhythm": use_rhythm,
            "frames": target_len,
        }
        return final, record

    def latent_extractor(self):
        """Frozen embedding extractor for FGD: canonical resample, AE encode,
        flatten."""
        assert self.ae is not None
        length = self.config.canonical_length

        def extract(motion: MotionSequence) -> np.ndarray:
            frames = resample_frames(motion.frames, length)
            seq = MotionSequence(frames, fps=motion.fps, joint_map=dict(motion.joint_map))
            return self.ae.encode(seq).codes.ravel()

        return extract


def run_train(config: TrainConfig, epochs: Optional[int] = None) -> tuple[Pipeline, RunManifest]:
    """Train all stages per the config and write checkpoints plus a manifest
    under ``config.out_dir``. ``epochs`` overrides ``config.epochs`` for every
    stage. With zero epochs only the manifest is written."""
    epochs = config.epochs if epochs is None else epochs
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = config.table()
    if config.data_dir:
        items = load_corpus(config.data_dir, table=table)
    else:
        items = build_corpus(config, table=table)
    train_items, _ = split_dataset(items, ratio=config.split_ratio, seed=config.seed)

    pipe = Pipeline(config, table=table)
    manifest = RunManifest.fresh("train", asdict(config), config.seed)
    if epochs > 0:
        ae_losses = pipe.train_ae(train_items, epochs)
        clip_losses = pipe.train_clip(train_items, epochs)
        pipe.mean = mean_motion([it.motion for it in train_items],
                                length=config.canonical_length)
        diff_losses = pipe.train_diffusion(train_items, epochs)
        manifest.losses = {"autoencoder": ae_losses, "gloss_clip": clip_losses,
                           **{f"diffusion_{k}": v for k, v in diff_losses.items()}}
        config.save(out_dir / "config.json")
        pipe.save(out_dir, manifest)
    else:
        config.save(out_dir / "config.json")
    manifest.save(out_dir / "manifest.json")
    return pipe, manifest


def run_generate(
    text: str,
    run_dir,
    out_path,
    audio_path: Optional[str] = None,
    seed: int = 0,
    guidance: Optional[float] = None,
) -> tuple[MotionSequence, RunManifest]:
    """Load a trained run, generate one sentence and write the landmark file
    plus a generation manifest next to it."""
    pipe = Pipeline.load(run_dir)
    track = audio_mod.load_wav(audio_path) if audio_path else None
    motion, record = pipe.generate(text, audio_track=track, seed=seed, guidance=guidance)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_motion(motion, out_path)
    manifest = RunManifest.fresh("generate", {**asdict(pipe.config), **record}, seed)
    manifest.add_artifact("outputs", "motion", out_path)
    manifest.save(out_path.with_suffix(out_path.suffix + ".manifest.json"))
    return motion, manifest


def evaluate_generated(
    pipe: Pipeline,
    items: Sequence[SyntheticItem],
    seed: int = 0,
    guidance: Optional[float] = None,
    use_gloss: Optional[bool] = None,
    use_rhythm: Optional[bool] = None,
    tau_s: float = metrics_mod.DEFAULT_GAD_TAU_S,
    pck_threshold_mm: float = metrics_mod.DEFAULT_PCK_THRESHOLD_MM,
) -> metrics_mod.MetricReport:
    """Generate every item with its own audio and score against the oracle.

    The generated motion is resampled to the ground-truth length before
    frame metrics; GAD pairs estimated gesture events in the generated
    motion against the oracle's audio segments.
    """
    pairs = []
    seg_pairs = []
    for i, item in enumerate(items):
        motion, _ = pipe.generate(item.text, audio_track=item.audio,
                                  seed=seed + i, guidance=guidance,
                                  use_gloss=use_gloss, use_rhythm=use_rhythm)
        if motion.length != item.motion.length:
            motion = motion.with_frames(resample_frames(motion.frames, item.motion.length))
        pairs.append((motion, item.motion))
        est = estimate_gesture_segments(motion, item.units, item.audio_segs, pipe.poses)
        seg_pairs.append((est, item.audio_segs))
    return metrics_mod.evaluate_pairs(
        pairs, pck_threshold_mm=pck_threshold_mm, gad_tau_s=tau_s,
        seg_pairs=seg_pairs, extractor=pipe.latent_extractor(),
    )


def mean_pose_baseline(
    mean: MeanMotion,
    items: Sequence[SyntheticItem],
    pck_threshold_mm: float = metrics_mod.DEFAULT_PCK_THRESHOLD_MM,
) -> metrics_mod.MetricReport:
    """Score predicting the mean motion (resampled per item) for every input."""
    pairs = []
    for item in items:
        frames = resample_frames(mean.mean_frames, item.motion.length)
        pred = MotionSequence(frames, fps=item.motion.fps,
                              joint_map=dict(item.motion.joint_map))
        pairs.append((pred, item.motion))
    return metrics_mod.evaluate_pairs(pairs, pck_threshold_mm=pck_threshold_mm)


def dump_embeddings(pipe_or_clip, items: Sequence[SyntheticItem], out_path) -> None:
    """Write raw embedding matrices (motion and gloss) for visualization."""
    clip = pipe_or_clip.clip if isinstance(pipe_or_clip, Pipeline) else pipe_or_clip
    motion_emb = np.stack([clip.encode_motion(it.motion) for it in items])
    gloss_emb = np.stack([clip.encode_gloss(it.gloss_text) for it in items])
    labels = np.array([
        "-".join(f"{u.consonant_group or 0}.{u.vowel_group}" for u in it.units)
        for it in items
    ])
    np.savez(out_path, motion_embeddings=motion_emb, gloss_embeddings=gloss_emb,
             labels=labels)
