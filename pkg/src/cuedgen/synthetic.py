"""Synthetic landmark oracle.

Renders CS unit sequences into deterministic landmark motions with known
segment annotations and a matching marker-tone audio track. The oracle is
the package's stand-in ground truth: every unit holds its canonical finger
shape at its canonical hand position (hand stream), lips articulate on the
audio timeline, and the hand stream leads the audio stream by a configurable
offset. With zero noise the held frames equal the pose constants exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional, Sequence, Union

import numpy as np

from .audio import DEFAULT_SAMPLE_RATE, AudioTrack
from .motion import (
    DEFAULT_FPS,
    DEFAULT_JOINT_MAP,
    N_FINGERS,
    N_JOINTS,
    N_LIPS,
    MotionSequence,
    SegmentAnnotation,
)
from .rules import MappingTable, CSUnit, SYLLABLE_TABLE, parse_pinyin, syllable_to_unit, units_to_gloss


class CanonicalPoses:
    """Shape templates, position anchors and lip rings for the oracle."""

    def __init__(self, doc: dict):
        if doc.get("schema_version") != 1:
            raise ValueError("unsupported canonical poses schema_version")
        self.position_anchors = {int(k): np.asarray(v, dtype=np.float64)
                                 for k, v in doc["position_anchors"].items()}
        self.finger_shapes = {int(k): np.asarray(v, dtype=np.float64)
                              for k, v in doc["finger_shapes"].items()}
        self.lip_shapes = {int(k): np.asarray(v, dtype=np.float64)
                           for k, v in doc["lip_shapes"].items()}
        self.rest_anchor = np.asarray(doc["rest_anchor"], dtype=np.float64)
        for k, arr in self.finger_shapes.items():
            if arr.shape != (N_FINGERS, 3):
                raise ValueError(f"finger shape {k} must be ({N_FINGERS}, 3)")
        for k, arr in self.lip_shapes.items():
            if arr.shape != (N_LIPS, 3):
                raise ValueError(f"lip shape {k} must be ({N_LIPS}, 3)")

    @classmethod
    def default(cls) -> "CanonicalPoses":
        with resources.files("cuedgen.data").joinpath("canonical_poses.json").open(
            "r", encoding="utf-8"
        ) as fh:
            return cls(json.load(fh))

    def hand_pose(self, unit: CSUnit) -> np.ndarray:
        """(10, 3) block: 9 finger landmarks plus hand root, absolute mm."""
        shape_id = unit.finger_shape_id if unit.finger_shape_id is not None else 0
        anchor = self.position_anchors[unit.hand_position_id]
        fingers = self.finger_shapes[shape_id] + anchor
        return np.vstack([fingers, anchor[None, :]])

    def rest_hand_pose(self) -> np.ndarray:
        fingers = self.finger_shapes[0] + self.rest_anchor
        return np.vstack([fingers, self.rest_anchor[None, :]])

    def lip_pose(self, vowel_group: Optional[int]) -> np.ndarray:
        return self.lip_shapes[vowel_group if vowel_group is not None else 0]


@dataclass
class SyntheticSpec:
    """Recipe for one oracle clip.

    ``unit_durations`` is either one duration shared by all units or one
    duration per unit. The hand stream leads the audio stream by ``offset``
    seconds; ``noise`` is the std of seeded landmark jitter in mm.

    ``rhythm_mm`` optionally adds the oracle's rhythm envelope: a vertical
    hand sway at ``rhythm_hz`` during each unit's gesture span, with a
    per-unit amplitude (seeded, uniform in the given range) that is also
    written into the audio as a tremolo of matching phase. The sway is a
    paralinguistic dynamic: content-free, but recoverable from the audio at
    full frame rate. Zero range (the default) disables it.
    """

    units: Sequence[CSUnit]
    unit_durations: Union[float, Sequence[float]] = 0.5
    transition: float = 0.12
    offset: float = 0.2
    noise: float = 0.0
    seed: int = 0
    fps: float = DEFAULT_FPS
    rhythm_mm: tuple[float, float] = (0.0, 0.0)
    rhythm_hz: float = 4.0

    def __post_init__(self):
        self.units = list(self.units)
        if not self.units:
            raise ValueError("spec needs at least one unit")
        if isinstance(self.unit_durations, (int, float)):
            self.unit_durations = [float(self.unit_durations)] * len(self.units)
        else:
            self.unit_durations = [float(d) for d in self.unit_durations]
        if len(self.unit_durations) != len(self.units):
            raise ValueError("unit_durations must match the unit count")
        if any(d <= 0 for d in self.unit_durations):
            raise ValueError("unit durations must be positive")
        if self.offset < 0:
            raise ValueError("offset must be >= 0")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if not 0 <= self.transition < min(self.unit_durations):
            raise ValueError("transition must be >= 0 and shorter than every unit")
        self.rhythm_mm = (float(self.rhythm_mm[0]), float(self.rhythm_mm[1]))
        if self.rhythm_mm[0] < 0 or self.rhythm_mm[1] < self.rhythm_mm[0]:
            raise ValueError("rhythm_mm must be a non-negative (lo, hi) range")

    @property
    def total_duration(self) -> float:
        return self.offset + float(sum(self.unit_durations))

    @property
    def has_rhythm(self) -> bool:
        return self.rhythm_mm[1] > 0.0

    def rhythm_amplitudes(self) -> np.ndarray:
        """Per-unit sway amplitudes in mm; deterministic in the seed."""
        if not self.has_rhythm:
            return np.zeros(len(self.units))
        rng = np.random.default_rng(self.seed ^ 0x5EED_B0B)
        return rng.uniform(self.rhythm_mm[0], self.rhythm_mm[1], size=len(self.units))


def _piecewise_pose(times: np.ndarray, boundaries: list[float], poses: list[np.ndarray],
                    transition: float) -> np.ndarray:
    """Hold each pose over its interval, blending linearly into the next pose
    during the last ``transition`` seconds of the interval.

    ``boundaries`` has one more entry than ``poses``; times outside the span
    clamp to the first/last pose.
    """
    out = np.empty((len(times),) + poses[0].shape)
    n = len(poses)
    for fi, t in enumerate(times):
        if t <= boundaries[0]:
            out[fi] = poses[0]
            continue
        if t >= boundaries[-1]:
            out[fi] = poses[-1]
            continue
        seg = np.searchsorted(boundaries, t, side="right") - 1
        seg = min(seg, n - 1)
        seg_end = boundaries[seg + 1]
        blend_start = seg_end - transition
        if seg < n - 1 and transition > 0 and t > blend_start:
            w = (t - blend_start) / transition
            out[fi] = (1 - w) * poses[seg] + w * poses[seg + 1]
        else:
            out[fi] = poses[seg]
    return out


def synth_generate(
    spec: SyntheticSpec,
    poses: Optional[CanonicalPoses] = None,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> tuple[MotionSequence, SegmentAnnotation, SegmentAnnotation, AudioTrack]:
    """Render one clip: (motion, gesture segments, audio segments, audio).

    Audio segments tile [offset, total]; gesture segments are the same
    intervals shifted earlier by ``spec.offset``, so every gesture midpoint
    precedes its audio midpoint by exactly the offset.
    """
    if poses is None:
        poses = CanonicalPoses.default()

    durations = spec.unit_durations
    n_units = len(spec.units)
    audio_starts = spec.offset + np.concatenate([[0.0], np.cumsum(durations)[:-1]])
    audio_segs = SegmentAnnotation(
        segments=[(i, audio_starts[i], audio_starts[i] + durations[i]) for i in range(n_units)],
        stream="audio",
    )
    gesture_segs = SegmentAnnotation(
        segments=[(i, s - spec.offset, e - spec.offset) for i, s, e in audio_segs.segments],
        stream="gesture",
    )

    total = spec.total_duration
    n_frames = max(2, int(round(total * spec.fps)))
    times = np.arange(n_frames) / spec.fps

    # Hand stream: one pose per unit on the gesture timeline.
    hand_poses = [poses.hand_pose(u) for u in spec.units]
    hand_bounds = [s for _, s, _ in gesture_segs.segments] + [gesture_segs.segments[-1][2]]
    hand = _piecewise_pose(times, hand_bounds, hand_poses, spec.transition)

    if spec.has_rhythm:
        hand = hand + oracle_rhythm_field(spec, n_frames)[:, N_LIPS:, :]

    # Lip stream: closed before speech, per-unit vowel shape on the audio
    # timeline, closing again at the end.
    lip_poses = [poses.lip_pose(None)] + [poses.lip_pose(u.vowel_group) for u in spec.units] \
        + [poses.lip_pose(None)]
    lip_bounds = [0.0] + [s for _, s, _ in audio_segs.segments] \
        + [audio_segs.segments[-1][2], audio_segs.segments[-1][2] + spec.transition]
    if spec.offset == 0.0:
        # no silent lead-in: drop the initial closed-lips interval
        lip_poses = lip_poses[1:]
        lip_bounds = lip_bounds[1:]
    lips = _piecewise_pose(times, lip_bounds, lip_poses, spec.transition)

    frames = np.concatenate([lips, hand], axis=1)
    if spec.noise > 0:
        rng = np.random.default_rng(spec.seed)
        frames = frames + rng.normal(0.0, spec.noise, size=frames.shape)

    motion = MotionSequence(
        frames=frames,
        fps=spec.fps,
        joint_map=dict(DEFAULT_JOINT_MAP),
        units=[[u.consonant_group, u.vowel_group] for u in spec.units],
    )
    audio = synth_audio(spec, sample_rate=sample_rate)
    return motion, gesture_segs, audio_segs, audio


def syllable_carrier_frequency(index: int) -> float:
    """Carrier tone for the unit at this position. Alternating between two
    pitches makes every segment boundary audible without leaking the unit's
    identity into the audio; rhythm is an audio property here, content is
    not."""
    return 320.0 if index % 2 == 0 else 430.0


def oracle_rhythm_field(spec: SyntheticSpec, n_frames: int) -> np.ndarray:
    """The oracle's rhythm deviation field, (n_frames, J, 3) in mm.

    A vertical sway of the whole hand at ``spec.rhythm_hz`` runs through
    each unit's gesture span with that unit's seeded amplitude; lips are
    untouched. Ground-truth motion equals the swayless render plus this
    field, so it is the reference for what a rhythm generator should
    recover from the audio tremolo.
    """
    field = np.zeros((n_frames, N_JOINTS, 3))
    if not spec.has_rhythm:
        return field
    times = np.arange(n_frames) / spec.fps
    amps = spec.rhythm_amplitudes()
    starts = np.concatenate([[0.0], np.cumsum(spec.unit_durations)[:-1]])
    for i, (start, amp) in enumerate(zip(starts, amps)):
        end = starts[i + 1] if i + 1 < len(starts) else np.inf
        mask = (times >= start) & (times < end)
        sway = -amp * np.sin(2 * math.pi * spec.rhythm_hz * (times[mask] - start))
        field[mask, N_LIPS:, 1] += sway[:, None]
    return field


def synth_audio(spec: SyntheticSpec, sample_rate: int = DEFAULT_SAMPLE_RATE) -> AudioTrack:
    """Syllable-rate marker audio: one carrier burst per unit over its audio
    segment, with a 10 ms raised-cosine ramp at both ends and an accented
    onset. When the spec carries a rhythm envelope, each unit's burst is
    amplitude-modulated at the sway frequency with depth proportional to
    the sway amplitude, so the motion dynamic is recoverable from audio."""
    total = spec.total_duration
    n = int(round(total * sample_rate))
    samples = np.zeros(n)
    t_axis = np.arange(n) / sample_rate
    amps = spec.rhythm_amplitudes()
    start = spec.offset
    for index, (dur, amp) in enumerate(zip(spec.unit_durations, amps)):
        end = start + dur
        i0, i1 = int(round(start * sample_rate)), min(n, int(round(end * sample_rate)))
        if i1 <= i0:
            start = end
            continue
        t_local = t_axis[i0:i1] - start
        tone = np.sin(2 * math.pi * syllable_carrier_frequency(index) * t_local)
        ramp = np.minimum(1.0, np.minimum(t_local, dur - t_local) / 0.010)
        ramp = np.clip(ramp, 0.0, 1.0)
        accent = 1.0 + 0.5 * np.exp(-t_local / 0.05)
        tremolo = 1.0
        if spec.has_rhythm:
            tremolo = 1.0 + (amp / 24.0) * np.sin(2 * math.pi * spec.rhythm_hz * t_local)
        samples[i0:i1] += 0.3 * tone * ramp * accent * tremolo
        start = end
    return AudioTrack(samples=np.clip(samples, -1.0, 1.0), sample_rate=sample_rate)


def held_frame_indices(
    gesture_segs: SegmentAnnotation, transition: float, fps: float, n_frames: int,
    onset_skip: float = 0.0,
) -> dict[int, np.ndarray]:
    """Frame indices strictly inside each unit's held-pose window (no blend,
    and no onset transient when ``onset_skip`` covers a bounce)."""
    out = {}
    last = len(gesture_segs.segments) - 1
    for pos, (unit_index, start, end) in enumerate(gesture_segs.segments):
        hold_end = end if pos == last else end - transition
        idx = np.arange(n_frames)
        times = idx / fps
        mask = (times >= start + onset_skip + 1e-9) & (times <= hold_end - 1e-9)
        out[unit_index] = idx[mask]
    return out


@dataclass
class SyntheticItem:
    """One corpus entry: pinyin text, its units, oracle data and gloss text."""

    text: str
    units: list[CSUnit]
    spec: SyntheticSpec
    motion: MotionSequence
    gesture_segs: SegmentAnnotation
    audio_segs: SegmentAnnotation
    audio: AudioTrack
    gloss_text: str


def sample_sentences(n: int, seed: int, min_units: int = 2, max_units: int = 4) -> list[str]:
    """Seeded random pinyin sentences drawn from the syllable grammar."""
    rng = np.random.default_rng(seed)
    inventory = sorted(SYLLABLE_TABLE)
    sentences = []
    for _ in range(n):
        k = int(rng.integers(min_units, max_units + 1))
        words = [inventory[int(i)] for i in rng.integers(0, len(inventory), size=k)]
        sentences.append(" ".join(words))
    return sentences


def make_corpus(
    sentences: Sequence[str],
    table: Optional[MappingTable] = None,
    poses: Optional[CanonicalPoses] = None,
    seed: int = 0,
    duration_range: tuple[float, float] = (0.35, 0.85),
    transition: float = 0.12,
    offset: float = 0.2,
    noise: float = 0.5,
    fps: float = DEFAULT_FPS,
    rhythm_mm: tuple[float, float] = (0.0, 0.0),
) -> list[SyntheticItem]:
    """Render a list of pinyin sentences into oracle items.

    Per-unit durations are drawn uniformly from ``duration_range`` with a
    per-item seeded stream, so the corpus carries genuine rhythm variation.
    """
    if table is None:
        table = MappingTable.default()
    if poses is None:
        poses = CanonicalPoses.default()
    rng = np.random.default_rng(seed)
    items = []
    for text in sentences:
        units = [syllable_to_unit(s, table) for s in parse_pinyin(text)]
        durations = rng.uniform(duration_range[0], duration_range[1], size=len(units))
        spec = SyntheticSpec(
            units=units,
            unit_durations=durations.tolist(),
            transition=transition,
            offset=offset,
            noise=noise,
            seed=int(rng.integers(0, 2**31 - 1)),
            fps=fps,
            rhythm_mm=rhythm_mm,
        )
        motion, gsegs, asegs, audio = synth_generate(spec, poses)
        gloss = units_to_gloss(units, table)
        items.append(SyntheticItem(
            text=text, units=units, spec=spec, motion=motion,
            gesture_segs=gsegs, audio_segs=asegs, audio=audio,
            gloss_text=gloss.text,
        ))
    return items


def estimate_gesture_segments(
    motion: MotionSequence,
    units: Sequence[CSUnit],
    audio_segs: SegmentAnnotation,
    poses: Optional[CanonicalPoses] = None,
    max_lead: float = 0.6,
    flat_tol_mm: float = 1.0,
) -> SegmentAnnotation:
    """Locate each unit's gesture event in a (possibly generated) motion.

    For unit i the hand landmarks are matched against its canonical pose
    over a window reaching ``max_lead`` seconds ahead of the unit's audio
    segment; the event midpoint is the center of the near-minimal match
    region. Search windows are constrained to stay monotone so the result
    is a valid ordered annotation.
    """
    if poses is None:
        poses = CanonicalPoses.default()
    if len(units) != len(audio_segs.segments):
        raise ValueError("units and audio segments must align")
    fps = motion.fps
    a, b = motion.joint_map["fingers"]
    c, d = motion.joint_map["hand_root"]
    hand = np.concatenate([motion.frames[:, a:b, :], motion.frames[:, c:d, :]], axis=1)
    n_frames = motion.length

    segments = []
    prev_frame = 0
    half = 0.5 / fps
    for idx, (unit, (_, a_start, a_end)) in enumerate(zip(units, audio_segs.segments)):
        target = poses.hand_pose(unit)
        lo = max(prev_frame, int(math.floor((a_start - max_lead) * fps)))
        hi = min(n_frames, int(math.ceil(a_end * fps)) + 1)
        if hi <= lo:
            lo, hi = min(prev_frame, n_frames - 1), n_frames
        window = hand[lo:hi]
        dist = np.linalg.norm(window - target[None], axis=2).mean(axis=1)
        near = dist <= dist.min() + flat_tol_mm
        center = int(np.argmin(dist))
        run_lo = run_hi = center
        while run_lo - 1 >= 0 and near[run_lo - 1]:
            run_lo -= 1
        while run_hi + 1 < len(dist) and near[run_hi + 1]:
            run_hi += 1
        mid_frame = lo + (run_lo + run_hi) / 2.0
        mid_t = mid_frame / fps
        segments.append((idx, mid_t - half, mid_t + half))
        prev_frame = int(math.ceil(mid_frame)) + 1
    return SegmentAnnotation(segments=segments, stream="gesture")
