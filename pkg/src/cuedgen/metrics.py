"""Evaluation metrics for generated gestures.

PCK, MAJE and MAD compare a prediction against ground truth frame by frame;
FGD compares Gaussian fits of embedding sets; GAD scores the temporal
alignment of gesture events against audio events. Conventions that the
underlying definitions leave open (PCK threshold, the MAJE norm, the MAD
differencing scheme, the GAD threshold) are pinned here and echoed in the
report so numbers stay comparable across runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import CountMismatch, ShapeMismatch, TooShort
from .motion import MotionSequence, SegmentAnnotation

DEFAULT_PCK_THRESHOLD_MM = 10.0
DEFAULT_GAD_TAU_S = 0.3


def _paired_frames(pred: MotionSequence, gt: MotionSequence) -> tuple[np.ndarray, np.ndarray]:
    if pred.frames.shape != gt.frames.shape:
        raise ShapeMismatch(
            f"pred {pred.frames.shape} vs gt {gt.frames.shape}; align lengths before scoring"
        )
    return pred.frames, gt.frames


def pck(pred: MotionSequence, gt: MotionSequence,
        threshold_mm: float = DEFAULT_PCK_THRESHOLD_MM) -> float:
    """Fraction of (frame, joint) pairs with Euclidean error below threshold."""
    p, g = _paired_frames(pred, gt)
    dist = np.linalg.norm(p - g, axis=2)
    return float(np.mean(dist < threshold_mm))


def maje(pred: MotionSequence, gt: MotionSequence) -> float:
    """Mean absolute joint error in mm, averaged per coordinate."""
    p, g = _paired_frames(pred, gt)
    return float(np.mean(np.abs(p - g)))


def acceleration(frames: np.ndarray, fps: float) -> np.ndarray:
    """Second-order central difference scaled to mm/s^2; shape (L-2, J, 3)."""
    if frames.shape[0] < 3:
        raise TooShort("acceleration needs at least 3 frames")
    return (frames[2:] - 2.0 * frames[1:-1] + frames[:-2]) * (fps ** 2)


def mad(pred: MotionSequence, gt: MotionSequence, fps: Optional[float] = None) -> float:
    """Mean absolute acceleration difference in mm/s^2."""
    p, g = _paired_frames(pred, gt)
    fps = fps if fps is not None else gt.fps
    return float(np.mean(np.abs(acceleration(p, fps) - acceleration(g, fps))))


def gaussian_frechet_distance(
    mu1: np.ndarray, sigma1: np.ndarray,
    mu2: np.ndarray, sigma2: np.ndarray,
    eps: float = 1e-6,
) -> tuple[float, bool]:
    """Fréchet distance between two Gaussians; returns (value, regularized).

    ``regularized`` flags that the covariance product was near-singular and
    an eps ridge was added before the matrix square root.
    """
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    sigma1, sigma2 = np.atleast_2d(sigma1), np.atleast_2d(sigma2)
    diff = mu1 - mu2

    covmean, _ = scipy.linalg.sqrtm(sigma1 @ sigma2, disp=False)
    regularized = False
    if not np.isfinite(covmean).all():
        regularized = True
        ridge = np.eye(sigma1.shape[0]) * eps
        covmean, _ = scipy.linalg.sqrtm((sigma1 + ridge) @ (sigma2 + ridge), disp=False)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    value = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * np.trace(covmean))
    return value, regularized


def fgd(
    pred_set: Sequence[MotionSequence],
    gt_set: Sequence[MotionSequence],
    extractor: Callable[[MotionSequence], np.ndarray],
) -> float:
    value, _ = fgd_with_flags(pred_set, gt_set, extractor)
    return value


def fgd_with_flags(
    pred_set: Sequence[MotionSequence],
    gt_set: Sequence[MotionSequence],
    extractor: Callable[[MotionSequence], np.ndarray],
) -> tuple[float, bool]:
    """Fréchet gesture distance between two motion sets under an embedding
    extractor (normally the frozen autoencoder's encoder, flattened)."""
    pred_set, gt_set = list(pred_set), list(gt_set)
    if len(pred_set) < 2 or len(gt_set) < 2:
        raise ShapeMismatch("fgd needs at least 2 motions per set")
    emb_p = np.stack([np.asarray(extractor(m), dtype=np.float64).ravel() for m in pred_set])
    emb_g = np.stack([np.asarray(extractor(m), dtype=np.float64).ravel() for m in gt_set])
    if emb_p.shape[1] != emb_g.shape[1]:
        raise ShapeMismatch("extractor produced different embedding sizes per set")
    mu_p, mu_g = emb_p.mean(axis=0), emb_g.mean(axis=0)
    sig_p = np.cov(emb_p, rowvar=False)
    sig_g = np.cov(emb_g, rowvar=False)
    return gaussian_frechet_distance(mu_p, sig_p, mu_g, sig_g)


def gad(gesture_segs: SegmentAnnotation, audio_segs: SegmentAnnotation,
        tau_s: float = DEFAULT_GAD_TAU_S) -> float:
    """Fraction of segments whose gesture and audio midpoints fall within tau."""
    if len(gesture_segs) != len(audio_segs):
        raise CountMismatch(
            f"{len(gesture_segs)} gesture segments vs {len(audio_segs)} audio segments"
        )
    if len(gesture_segs) == 0:
        raise CountMismatch("gad needs at least one segment per stream")
    gaps = np.abs(gesture_segs.midpoints() - audio_segs.midpoints())
    return float(np.mean(gaps < tau_s))


@dataclass
class MetricReport:
    """One evaluation run's numbers plus the conventions that produced them."""

    pck: float
    maje: float
    mad: float
    gad: Optional[float]
    fgd: Optional[float]
    pck_threshold_mm: float
    gad_tau_s: float
    fps: float
    n_items: int
    fgd_extractor_sha256: Optional[str] = None
    fgd_regularized: bool = False

    def __post_init__(self):
        if not (0.0 <= self.pck <= 1.0):
            raise ValueError("pck must be in [0, 1]")
        if self.gad is not None and not (0.0 <= self.gad <= 1.0):
            raise ValueError("gad must be in [0, 1]")
        for name in ("maje", "mad"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.fgd is not None and self.fgd < -1e-9:
            raise ValueError("fgd must be >= 0")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())


def evaluate_pairs(
    pairs: Sequence[tuple[MotionSequence, MotionSequence]],
    pck_threshold_mm: float = DEFAULT_PCK_THRESHOLD_MM,
    gad_tau_s: float = DEFAULT_GAD_TAU_S,
    seg_pairs: Optional[Sequence[tuple[SegmentAnnotation, SegmentAnnotation]]] = None,
    extractor: Optional[Callable[[MotionSequence], np.ndarray]] = None,
    extractor_sha256: Optional[str] = None,
) -> MetricReport:
    """Average the frame metrics over (pred, gt) pairs and attach set-level
    FGD and segment-level GAD when their inputs are provided."""
    if not pairs:
        raise ShapeMismatch("evaluate_pairs needs at least one pair")
    pcks, majes, mads = [], [], []
    for pred, gt in pairs:
        pcks.append(pck(pred, gt, pck_threshold_mm))
        majes.append(maje(pred, gt))
        mads.append(mad(pred, gt))
    gad_value = None
    if seg_pairs:
        gad_value = float(np.mean([gad(gs, as_, gad_tau_s) for gs, as_ in seg_pairs]))
    fgd_value, regularized = None, False
    if extractor is not None and len(pairs) >= 2:
        fgd_value, regularized = fgd_with_flags(
            [p for p, _ in pairs], [g for _, g in pairs], extractor
        )
    return MetricReport(
        pck=float(np.mean(pcks)),
        maje=float(np.mean(majes)),
        mad=float(np.mean(mads)),
        gad=gad_value,
        fgd=fgd_value,
        pck_threshold_mm=pck_threshold_mm,
        gad_tau_s=gad_tau_s,
        fps=pairs[0][1].fps,
        n_items=len(pairs),
        fgd_extractor_sha256=extractor_sha256,
        fgd_regularized=regularized,
    )
