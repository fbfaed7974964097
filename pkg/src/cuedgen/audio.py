"""Audio containers and pluggable feature extraction.

The default backend is an offline mel-cepstral pipeline (25 ms window,
10 ms hop, 13 coefficients plus delta and delta-delta, 39 dims total). The
``service`` backend posts WAV bytes to an external feature endpoint and
validates the returned matrix, so a pretrained speech encoder can be swapped
in without vendoring weights.
"""

from __future__ import annotations

import io
import os
import struct
import wave
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.fft

from .errors import BackendUnavailable, FormatError, MalformedResponse, ShapeMismatch

DEFAULT_SAMPLE_RATE = 16000


@dataclass
class AudioTrack:
    """Mono audio samples in [-1, 1] with a declared sample rate."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.isfinite(self.samples).all():
            raise ValueError("audio contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class AudioFeatures:
    """Feature matrix (T_a, d_a) with seconds-per-frame hop and backend tag."""

    frames: np.ndarray
    hop: float
    backend: str = "mfcc"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ShapeMismatch(f"features must be (T_a, d_a) with T_a >= 1, got {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise ValueError("features contain non-finite values")
        if self.hop <= 0:
            raise ValueError("hop must be positive")


def save_wav(track: AudioTrack, path) -> None:
    data = np.clip(track.samples, -1.0, 1.0)
    pcm = (data * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(track.sample_rate)
        fh.writeframes(pcm.tobytes())


def load_wav(path) -> AudioTrack:
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getsampwidth() != 2:
                raise FormatError(f"{path}: only 16-bit PCM WAV is supported")
            n_channels = fh.getnchannels()
            sr = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise FormatError(f"{path}: not a WAV file ({exc})") from exc
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    if n_channels > 1:
        pcm = pcm.reshape(-1, n_channels).mean(axis=1)
    return AudioTrack(samples=pcm, sample_rate=sr)


def wav_bytes(track: AudioTrack) -> bytes:
    buf = io.BytesIO()
    data = np.clip(track.samples, -1.0, 1.0)
    pcm = (data * 32767.0).astype("<i2")
    with wave.open(buf, "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(track.sample_rate)
        fh.writeframes(pcm.tobytes())
    return buf.getvalue()


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def _mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    nyquist = sample_rate / 2.0
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(nyquist), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    bins = np.floor((n_fft + 1) * hz_pts / sample_rate).astype(int)
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(1, n_mels + 1):
        left, center, right = bins[m - 1], bins[m], bins[m + 1]
        for k in range(left, center):
            if center > left:
                fb[m - 1, k] = (k - left) / (center - left)
        for k in range(center, right):
            if right > center:
                fb[m - 1, k] = (right - k) / (right - center)
    return fb


def _delta(feats: np.ndarray, width: int = 2) -> np.ndarray:
    """Standard regression delta over +/- width frames, edge-padded."""
    padded = np.pad(feats, ((width, width), (0, 0)), mode="edge")
    denom = 2.0 * sum(n * n for n in range(1, width + 1))
    out = np.zeros_like(feats)
    for n in range(1, width + 1):
        out += n * (padded[width + n:padded.shape[0] - width + n]
                    - padded[width - n:padded.shape[0] - width - n])
    return out / denom


def mfcc_features(
    track: AudioTrack,
    window_s: float = 0.025,
    hop_s: float = 0.010,
    n_coeffs: int = 13,
    n_mels: int = 26,
    preemphasis: float = 0.97,
    log_floor: float = 1e-10,
) -> AudioFeatures:
    """Mel-cepstral features with delta and delta-delta appended.

    Frame count is 1 + floor((n_samples - window) / hop); audio shorter than
    one window is zero-padded to a single frame. Silence stays finite via the
    log floor.
    """
    sr = track.sample_rate
    win = int(round(window_s * sr))
    hop = int(round(hop_s * sr))
    x = track.samples
    if len(x) < win:
        x = np.pad(x, (0, win - len(x)))
    x = np.append(x[0], x[1:] - preemphasis * x[:-1])

    n_frames = 1 + (len(x) - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hamming(win)

    n_fft = 1
    while n_fft < win:
        n_fft *= 2
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2 / n_fft

    fb = _mel_filterbank(n_mels, n_fft, sr)
    energies = np.log(np.maximum(power @ fb.T, log_floor))
    ceps = scipy.fft.dct(energies, type=2, axis=1, norm="ortho")[:, :n_coeffs]

    d1 = _delta(ceps)
    d2 = _delta(d1)
    feats = np.concatenate([ceps, d1, d2], axis=1)
    return AudioFeatures(frames=feats, hop=hop / sr, backend="mfcc")


class FeatureServiceClient:
    """Client for an external audio feature endpoint.

    POSTs 16-bit PCM WAV bytes; expects JSON ``{"frames": [[...]], "hop": s}``.
    The URL comes from the constructor or ``CUEDGEN_FEATURE_URL``.
    """

    def __init__(self, url: Optional[str] = None, timeout: float = 60.0):
        self.url = url or os.environ.get("CUEDGEN_FEATURE_URL")
        self.timeout = timeout
        if not self.url:
            raise BackendUnavailable(
                "no feature service configured (set CUEDGEN_FEATURE_URL or pass url=)"
            )

    def extract(self, track: AudioTrack) -> AudioFeatures:
        import requests

        try:
            resp = requests.post(
                self.url,
                data=wav_bytes(track),
                headers={"Content-Type": "audio/wav"},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise BackendUnavailable(f"feature service {self.url}: {exc}") from exc
        if resp.status_code != 200:
            raise BackendUnavailable(
                f"feature service {self.url} returned HTTP {resp.status_code}"
            )
        try:
            doc = resp.json()
        except ValueError as exc:
            raise MalformedResponse("feature service response is not JSON") from exc
        if not isinstance(doc, dict) or "frames" not in doc or "hop" not in doc:
            raise MalformedResponse("feature service response lacks 'frames'/'hop'")
        try:
            frames = np.asarray(doc["frames"], dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise ShapeMismatch(f"feature service returned a ragged matrix: {exc}") from exc
        if frames.ndim != 2:
            raise ShapeMismatch(f"feature service frames must be 2-D, got {frames.ndim}-D")
        if not np.isfinite(frames).all():
            raise MalformedResponse("feature service returned non-finite values")
        return AudioFeatures(frames=frames, hop=float(doc["hop"]), backend="pretrained")


def extract_audio_features(
    track: AudioTrack,
    backend: str = "mfcc",
    client: Optional[FeatureServiceClient] = None,
    **mfcc_kwargs,
) -> AudioFeatures:
    """Extract features with the named backend ('mfcc' or 'service')."""
    if backend == "mfcc":
        return mfcc_features(track, **mfcc_kwargs)
    if backend == "service":
        if client is None:
            client = FeatureServiceClient()
        return client.extract(track)
    raise BackendUnavailable(f"unknown audio backend {backend!r}")


def resample_features(features: AudioFeatures, n_frames: int) -> np.ndarray:
    """Linearly resample the feature matrix along time to ``n_frames`` rows."""
    feats = features.frames
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    old = feats.shape[0]
    if old == n_frames:
        return feats.copy()
    if old == 1:
        return np.repeat(feats, n_frames, axis=0)
    old_t = np.linspace(0.0, 1.0, old)
    new_t = np.linspace(0.0, 1.0, n_frames)
    out = np.empty((n_frames, feats.shape[1]))
    for col in range(feats.shape[1]):
        out[:, col] = np.interp(new_t, old_t, feats[:, col])
    return out
