"""Gloss-prompted latent diffusion.

A linear-beta DDPM over latent motion codes. The noise predictor is a small
transformer whose latent tokens are modulated by AdaIN layers driven by the
gloss embedding; audio feature frames are linearly projected, pooled to the
latent length and attended as extra context tokens. Classifier-free guidance
mixes the conditional and unconditional predictions as
``s * cond + (1 - s) * uncond``; the unconditional pathway uses identity
modulation (scale 1, shift 0) in every AdaIN layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import sinusoidal_positions
from .errors import NonFiniteState, ScheduleError, StepOutOfRange

DEFAULT_STEPS = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
DEFAULT_GUIDANCE = 2.5
DEFAULT_DROPOUT = 0.1
ADAIN_EPS = 1e-8


class DiffusionSchedule:
    """Beta schedule with cached alpha products; steps are 1-based."""

    def __init__(self, betas: Sequence[float]):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ScheduleError("schedule needs at least one beta")
        if not ((betas > 0) & (betas < 1)).all():
            raise ScheduleError("every beta must lie strictly in (0, 1)")
        if (np.diff(betas) < -1e-12).any():
            raise ScheduleError("betas must be non-decreasing")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = np.cumprod(self.alphas)
        if self.alpha_bars[-1] >= 0.01:
            raise ScheduleError(
                f"terminal alpha_bar {self.alpha_bars[-1]:.4f} >= 0.01; "
                "increase the step count or the beta range"
            )

    @classmethod
    def linear(cls, n_steps: int = DEFAULT_STEPS,
               beta_start: float = DEFAULT_BETA_START,
               beta_end: float = DEFAULT_BETA_END) -> "DiffusionSchedule":
        if n_steps < 1:
            raise ScheduleError("n_steps must be >= 1")
        return cls(np.linspace(beta_start, beta_end, n_steps))

    @property
    def n_steps(self) -> int:
        return len(self.betas)

    def _check(self, n: int) -> None:
        if not 1 <= n <= self.n_steps:
            raise StepOutOfRange(f"step {n} outside [1, {self.n_steps}]")

    def beta(self, n: int) -> float:
        self._check(n)
        return float(self.betas[n - 1])

    def alpha(self, n: int) -> float:
        self._check(n)
        return float(self.alphas[n - 1])

    def alpha_bar(self, n: int) -> float:
        self._check(n)
        return float(self.alpha_bars[n - 1])

    def alpha_bar_prev(self, n: int) -> float:
        self._check(n)
        return 1.0 if n == 1 else float(self.alpha_bars[n - 2])

    def posterior_variance(self, n: int) -> float:
        """beta-tilde: posterior variance of the ancestral reverse step."""
        self._check(n)
        ab, ab_prev = self.alpha_bar(n), self.alpha_bar_prev(n)
        return float((1.0 - ab_prev) / (1.0 - ab) * self.beta(n))


def forward_noise(schedule: DiffusionSchedule, z0: torch.Tensor, n,
                  noise: torch.Tensor) -> torch.Tensor:
    """Closed-form forward marginal: sqrt(ab_n) z0 + sqrt(1 - ab_n) eps.

    ``n`` is an int (applied to the whole batch) or a per-item LongTensor.
    """
    if noise.shape != z0.shape:
        raise ValueError("noise must match z0's shape")
    if isinstance(n, int):
        ab = schedule.alpha_bar(n)
        return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * noise
    n = torch.as_tensor(n, dtype=torch.long)
    if ((n < 1) | (n > schedule.n_steps)).any():
        raise StepOutOfRange(f"steps outside [1, {schedule.n_steps}]")
    ab = torch.as_tensor(schedule.alpha_bars, dtype=z0.dtype, device=z0.device)[n - 1]
    extra = (1,) * (z0.ndim - 1)
    ab = ab.reshape(-1, *extra)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * noise


@dataclass
class AdaINParams:
    """Per-channel modulation; scale is 1 + predicted delta."""

    scale: torch.Tensor
    shift: torch.Tensor

    @classmethod
    def identity(cls, batch: int, channels: int, dtype=torch.float32,
                 device=None) -> "AdaINParams":
        return cls(
            scale=torch.ones(batch, channels, dtype=dtype, device=device),
            shift=torch.zeros(batch, channels, dtype=dtype, device=device),
        )


def adain_apply(h: torch.Tensor, params: AdaINParams, eps: float = ADAIN_EPS) -> torch.Tensor:
    """Instance-normalize (B, T, C) over T and modulate per channel.

    The output channel c of item b has mean shift[b, c] and (population)
    std scale[b, c], up to the stabilizing eps.
    """
    mean = h.mean(dim=1, keepdim=True)
    var = h.var(dim=1, keepdim=True, unbiased=False)
    normed = (h - mean) / torch.sqrt(var + eps)
    return params.scale[:, None, :] * normed + params.shift[:, None, :]


def timestep_embedding(n: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(torch.arange(half, dtype=torch.float32, device=n.device)
                      * (-math.log(10000.0) / half))
    args = n.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _AdaINHead(nn.Module):
    """Maps the gloss embedding to per-channel (delta-scale, shift); the
    final layer is zero-initialized so training starts at identity."""

    def __init__(self, embed_dim: int, channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(embed_dim, channels), nn.GELU(),
            nn.Linear(channels, 2 * channels),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)
        self.channels = channels

    def forward(self, z_g: Optional[torch.Tensor], cond_mask: Optional[torch.Tensor],
                batch: int, dtype, device) -> AdaINParams:
        if z_g is None:
            return AdaINParams.identity(batch, self.channels, dtype=dtype, device=device)
        raw = self.net(z_g)
        if cond_mask is not None:
            raw = raw * cond_mask.to(raw.dtype)[:, None]
        delta, shift = raw.chunk(2, dim=1)
        return AdaINParams(scale=1.0 + delta, shift=shift)


class _PredictorBlock(nn.Module):
    def __init__(self, dim: int, heads: int, embed_dim: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ff = nn.Sequential(nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim))
        self.adain_attn = _AdaINHead(embed_dim, dim)
        self.adain_ff = _AdaINHead(embed_dim, dim)
        self.audio_norm_attn = nn.LayerNorm(dim)
        self.audio_norm_ff = nn.LayerNorm(dim)

    def forward(self, h_lat, h_aud, z_g, cond_mask):
        batch, t_lat = h_lat.shape[0], h_lat.shape[1]
        x = torch.cat([h_lat, h_aud], dim=1)
        attended, _ = self.attn(x, x, x, need_weights=False)
        x = x + attended
        h_lat, h_aud = x[:, :t_lat], x[:, t_lat:]
        params = self.adain_attn(z_g, cond_mask, batch, h_lat.dtype, h_lat.device)
        h_lat = adain_apply(h_lat, params)
        h_aud = self.audio_norm_attn(h_aud)

        x = torch.cat([h_lat, h_aud], dim=1)
        x = x + self.ff(x)
        h_lat, h_aud = x[:, :t_lat], x[:, t_lat:]
        params = self.adain_ff(z_g, cond_mask, batch, h_lat.dtype, h_lat.device)
        h_lat = adain_apply(h_lat, params)
        h_aud = self.audio_norm_ff(h_aud)
        return h_lat, h_aud


class NoisePredictor(nn.Module):
    """Transformer noise estimator over latent tokens with gloss AdaIN
    conditioning and pooled audio context tokens.

    Internally the network regresses the clean latent and the exposed noise
    estimate is recovered analytically from it, eps = (z_n - sqrt(ab) x0)
    / sqrt(1 - ab). That keeps the estimate exactly scale-consistent with
    z_n at every step (the normalization inside the blocks is scale-blind),
    so reverse trajectories self-correct instead of drifting. A time-gated
    linear skip from z_n feeds the clean-latent head, since how much of z_n
    is signal depends on the step.
    """

    def __init__(self, latent_dim: int = 32, model_dim: int = 64, heads: int = 4,
                 layers: int = 2, embed_dim: int = 64, audio_dim: int = 39,
                 schedule: Optional[DiffusionSchedule] = None):
        super().__init__()
        self.latent_dim = latent_dim
        self.model_dim = model_dim
        self.embed_dim = embed_dim
        self.audio_dim = audio_dim
        self.input = nn.Linear(latent_dim, model_dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(model_dim, model_dim * 2), nn.GELU(), nn.Linear(model_dim * 2, model_dim)
        )
        self.audio_proj = nn.Linear(audio_dim, model_dim)
        self.audio_tag = nn.Parameter(torch.zeros(model_dim))
        self.blocks = nn.ModuleList(
            [_PredictorBlock(model_dim, heads, embed_dim) for _ in range(layers)]
        )
        self.output = nn.Linear(model_dim, latent_dim)
        self.skip = nn.Linear(latent_dim, latent_dim)
        self.skip_gate = nn.Linear(model_dim, latent_dim)
        nn.init.zeros_(self.skip_gate.weight)
        nn.init.zeros_(self.skip_gate.bias)
        # token positions: without these the latent tokens are exchangeable
        # at high noise and the net could only predict a position-free blur
        self.register_buffer("positions", sinusoidal_positions(512, model_dim),
                             persistent=False)
        if schedule is None:
            schedule = DiffusionSchedule.linear()
        self.set_schedule(schedule)

    def set_schedule(self, schedule: DiffusionSchedule) -> None:
        self.register_buffer(
            "alpha_bars",
            torch.as_tensor(schedule.alpha_bars, dtype=torch.float32),
            persistent=False,
        )

    def pool_audio(self, audio: torch.Tensor, t_lat: int) -> torch.Tensor:
        """(B, T_a, d_a) -> (B, t_lat, model_dim) via linear time interpolation."""
        pooled = F.interpolate(audio.transpose(1, 2), size=t_lat,
                               mode="linear", align_corners=True).transpose(1, 2)
        return self.audio_proj(pooled) + self.audio_tag

    def predict_x0(self, z_n: torch.Tensor, n: torch.Tensor,
                   z_g: Optional[torch.Tensor] = None,
                   cond_mask: Optional[torch.Tensor] = None,
                   audio: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Estimate of the clean latent sequence."""
        batch, t_lat, _ = z_n.shape
        if n.ndim == 0:
            n = n.expand(batch)
        t_emb = self.time_mlp(timestep_embedding(n, self.model_dim))
        pos = self.positions[:t_lat].to(z_n.dtype)[None, :, :]
        h_lat = self.input(z_n) + t_emb[:, None, :] + pos
        if audio is None:
            audio = torch.zeros(batch, t_lat, self.audio_dim,
                                dtype=z_n.dtype, device=z_n.device)
        h_aud = self.pool_audio(audio.to(z_n.dtype), t_lat) + pos
        for block in self.blocks:
            h_lat, h_aud = block(h_lat, h_aud, z_g, cond_mask)
        gate = 1.0 + self.skip_gate(t_emb)[:, None, :]
        return self.output(h_lat) + gate * self.skip(z_n)

    def forward(self, z_n: torch.Tensor, n: torch.Tensor,
                z_g: Optional[torch.Tensor] = None,
                cond_mask: Optional[torch.Tensor] = None,
                audio: Optional[torch.Tensor] = None) -> torch.Tensor:
        if n.ndim == 0:
            n = n.expand(z_n.shape[0])
        x0 = self.predict_x0(z_n, n, z_g=z_g, cond_mask=cond_mask, audio=audio)
        ab = self.alpha_bars.to(z_n.dtype)[n - 1][:, None, None]
        return (z_n - torch.sqrt(ab) * x0) / torch.sqrt(1.0 - ab)


def noise_loss(
    predictor: nn.Module,
    schedule: DiffusionSchedule,
    z0: torch.Tensor,
    n,
    z_g: Optional[torch.Tensor] = None,
    cond_mask: Optional[torch.Tensor] = None,
    audio: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Mean squared error between fresh noise and the predictor's estimate."""
    noise = torch.randn(z0.shape, generator=generator, dtype=z0.dtype, device=z0.device)
    z_n = forward_noise(schedule, z0, n, noise)
    n_tensor = torch.as_tensor(n if not isinstance(n, int) else [n] * z0.shape[0],
                               dtype=torch.long, device=z0.device)
    pred = predictor(z_n, n_tensor, z_g=z_g, cond_mask=cond_mask, audio=audio)
    return F.mse_loss(pred, noise)


def guided_noise(
    predictor: nn.Module,
    z_n: torch.Tensor,
    n: torch.Tensor,
    z_g: Optional[torch.Tensor],
    audio: Optional[torch.Tensor],
    guidance_scale: float,
) -> torch.Tensor:
    """s * eps(cond) + (1 - s) * eps(uncond); pure unconditional when no
    gloss embedding is given."""
    eps_uncond = predictor(z_n, n, z_g=None, cond_mask=None, audio=audio)
    if z_g is None:
        return eps_uncond
    cond_mask = torch.ones(z_n.shape[0], dtype=torch.bool, device=z_n.device)
    eps_cond = predictor(z_n, n, z_g=z_g, cond_mask=cond_mask, audio=audio)
    return guidance_scale * eps_cond + (1.0 - guidance_scale) * eps_uncond


def sample(
    predictor: nn.Module,
    schedule: DiffusionSchedule,
    shape: tuple[int, int],
    z_g: Optional[torch.Tensor] = None,
    audio: Optional[torch.Tensor] = None,
    guidance_scale: float = DEFAULT_GUIDANCE,
    seed: int = 0,
    batch: int = 1,
    deterministic: bool = False,
    x0_clamp: Optional[float] = None,
) -> torch.Tensor:
    """DDPM ancestral sampling from Z_N ~ N(0, I) down to Z_0.

    ``deterministic=True`` zeroes the posterior variance (mean-only
    updates); the terminal step never adds noise. Fixed seeds give
    bit-identical samples. ``x0_clamp`` optionally bounds the implied clean
    latent each step (the guided noise is recomputed from the clamped
    estimate), which stops small prediction errors from compounding into
    runaway magnitudes.
    """
    generator = torch.Generator("cpu").manual_seed(seed)
    z = torch.randn((batch,) + tuple(shape), generator=generator)
    was_training = getattr(predictor, "training", False)
    if hasattr(predictor, "eval"):
        predictor.eval()
    with torch.no_grad():
        for n in range(schedule.n_steps, 0, -1):
            n_tensor = torch.full((batch,), n, dtype=torch.long)
            eps_star = guided_noise(predictor, z, n_tensor, z_g, audio, guidance_scale)
            alpha = schedule.alpha(n)
            beta = schedule.beta(n)
            ab = schedule.alpha_bar(n)
            if x0_clamp is not None:
                x0 = (z - math.sqrt(1.0 - ab) * eps_star) / math.sqrt(ab)
                x0 = x0.clamp(-x0_clamp, x0_clamp)
                eps_star = (z - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)
            mean = (z - beta / math.sqrt(1.0 - ab) * eps_star) / math.sqrt(alpha)
            if n > 1 and not deterministic:
                noise = torch.randn(z.shape, generator=generator)
                z = mean + math.sqrt(schedule.posterior_variance(n)) * noise
            else:
                z = mean
            if not torch.isfinite(z).all():
                raise NonFiniteState(n)
    if hasattr(predictor, "train") and was_training:
        predictor.train()
    return z


def train_dropout_condition(gloss, p_drop: float = DEFAULT_DROPOUT,
                            rng: Optional[np.random.Generator] = None):
    """Return the gloss unchanged or None with probability ``p_drop``."""
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError("p_drop must be in [0, 1]")
    if rng is None:
        rng = np.random.default_rng()
    return None if rng.random() < p_drop else gloss


def save_predictor_checkpoint(predictor: NoisePredictor, schedule: DiffusionSchedule,
                              path, extra: Optional[dict] = None) -> None:
    torch.save({
        "schema_version": 1,
        "kind": "noise_predictor",
        "latent_dim": predictor.latent_dim,
        "model_dim": predictor.model_dim,
        "embed_dim": predictor.embed_dim,
        "audio_dim": predictor.audio_dim,
        "layers": len(predictor.blocks),
        "betas": schedule.betas.tolist(),
        "extra": extra or {},
        "state_dict": predictor.state_dict(),
    }, path)


def load_predictor_checkpoint(path) -> tuple[NoisePredictor, DiffusionSchedule, dict]:
    doc = torch.load(path, map_location="cpu", weights_only=False)
    if doc.get("kind") != "noise_predictor" or doc.get("schema_version") != 1:
        raise ValueError(f"{path} is not a noise_predictor checkpoint")
    schedule = DiffusionSchedule(doc["betas"])
    predictor = NoisePredictor(
        latent_dim=doc["latent_dim"], model_dim=doc["model_dim"],
        layers=doc["layers"], embed_dim=doc["embed_dim"], audio_dim=doc["audio_dim"],
        schedule=schedule,
    )
    predictor.load_state_dict(doc["state_dict"])
    predictor.eval()
    return predictor, schedule, doc.get("extra", {})
