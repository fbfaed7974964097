"""Pinyin to Cued Speech transpiler.

Converts Mandarin pinyin text into per-syllable CS units (consonant group ->
finger shape, vowel group -> hand position) and renders them as instructional
gloss text from a mapping table. The rule backend is a pure function of
(text, table); an optional HTTP client can delegate gloss writing to an
external LLM endpoint instead.

Everything here is stdlib only so the ``gloss`` CLI path starts fast.
"""

from __future__ import annotations

import json
import os
import threading
import unicodedata
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Optional, Sequence

from .errors import (
    EndpointUnavailable,
    MalformedResponse,
    TableError,
    UnknownToken,
    UnmappedPhoneme,
)

GLOSS_SEPARATOR = " "

# Initials, longest first so zh/ch/sh win over z/c/s/h.
INITIALS = [
    "zh", "ch", "sh",
    "b", "p", "m", "f", "d", "t", "n", "l",
    "g", "k", "h", "j", "q", "x", "r", "z", "c", "s",
]

# Finals in their canonical (post-initial) spellings; the front rounded vowel
# is written "v" internally. Grouped by medial row.
FINALS_PLAIN = ["a", "o", "e", "ai", "ei", "ao", "ou", "an", "en", "ang", "eng", "ong", "er"]
FINALS_I = ["i", "ia", "ie", "iao", "iou", "ian", "in", "iang", "ing", "iong"]
FINALS_U = ["u", "ua", "uo", "uai", "uei", "uan", "uen", "uang", "ueng"]
FINALS_V = ["v", "ve", "van", "vn"]
FINALS = FINALS_PLAIN + FINALS_I + FINALS_U + FINALS_V

# iou/uei/uen contract after an initial.
_CONTRACTIONS = {"iou": "iu", "uei": "ui", "uen": "un"}
_EXPANSIONS = {v: k for k, v in _CONTRACTIONS.items()}

# Tone diacritics normalize to the bare vowel; u-umlaut normalizes to "v".
_TONE_MARKS = {}
for base, marked in [
    ("a", "āáǎà"), ("e", "ēéěè"), ("i", "īíǐì"), ("o", "ōóǒò"),
    ("u", "ūúǔù"), ("v", "ǖǘǚǜ"),
]:
    for ch in marked:
        _TONE_MARKS[ch] = base
_TONE_MARKS["ü"] = "v"

# Rough IPA renderings for display and logs.
IPA_INITIALS = {
    "b": "p", "p": "pʰ", "m": "m", "f": "f",
    "d": "t", "t": "tʰ", "n": "n", "l": "l",
    "g": "k", "k": "kʰ", "h": "x",
    "j": "tɕ", "q": "tɕʰ", "x": "ɕ",
    "zh": "ʈʂ", "ch": "ʈʂʰ", "sh": "ʂ", "r": "ʐ",
    "z": "ts", "c": "tsʰ", "s": "s",
}
IPA_FINALS = {
    "a": "a", "o": "o", "e": "ɤ", "i": "i", "u": "u", "v": "y", "er": "ɚ",
    "ai": "ai", "ei": "ei", "ao": "au", "ou": "ou",
}


def _build_syllable_table() -> dict[str, tuple[str, str]]:
    """Canonical pinyin spelling -> (initial, final).

    Generated combinatorially with the standard structural restrictions on
    which medial rows each initial takes. The table covers the common
    Mandarin syllable inventory; a handful of unattested combinations are
    accepted as well, which is harmless for coding purposes.
    """
    rows = {
        # initial -> allowed final rows
        "b": ("plain", "i", "u1"), "p": ("plain", "i", "u1"),
        "m": ("plain", "i", "u1"), "f": ("plain", "u1"),
        "d": ("plain", "i", "u"), "t": ("plain", "i", "u"),
        "n": ("plain", "i", "u", "v1"), "l": ("plain", "i", "u", "v1"),
        "g": ("plain", "u"), "k": ("plain", "u"), "h": ("plain", "u"),
        "j": ("i", "v"), "q": ("i", "v"), "x": ("i", "v"),
        "zh": ("plain", "u", "i0"), "ch": ("plain", "u", "i0"),
        "sh": ("plain", "u", "i0"), "r": ("plain", "u", "i0"),
        "z": ("plain", "u", "i0"), "c": ("plain", "u", "i0"),
        "s": ("plain", "u", "i0"),
    }
    row_finals = {
        "plain": [f for f in FINALS_PLAIN if f != "er"],
        "i": FINALS_I,
        "i0": ["i"],          # apical i only (zhi, chi, shi, ri, zi, ci, si)
        "u": FINALS_U,
        "u1": ["u"],          # labials take only bare u from the u row
        "v": FINALS_V,
        "v1": ["v", "ve"],    # n/l take only v and ve
    }

    table: dict[str, tuple[str, str]] = {}

    def add(spelling: str, initial: str, final: str) -> None:
        if spelling in table and table[spelling] != (initial, final):
            raise TableError(f"ambiguous syllable spelling {spelling!r}")
        table[spelling] = (initial, final)

    for initial, allowed in rows.items():
        for row in allowed:
            for final in row_finals[row]:
                written = _CONTRACTIONS.get(final, final)
                if row in ("v", "v1") and initial in ("j", "q", "x"):
                    written = "u" + final[1:]
                add(initial + written, initial, final)

    # Zero-initial forms.
    for final in FINALS_PLAIN:
        if final != "ong":
            add(final, "", final)
    for final in FINALS_I:
        if final == "i":
            spelled = "yi"
        elif final in ("in", "ing"):
            spelled = "y" + final
        else:
            spelled = "y" + final[1:]
        add(spelled, "", final)
    for final in FINALS_U:
        spelled = "wu" if final == "u" else "w" + final[1:]
        add(spelled, "", final)
    for final in FINALS_V:
        spelled = "yu" + final[1:]
        add(spelled, "", final)

    return table


SYLLABLE_TABLE = _build_syllable_table()


def spell_syllable(initial: str, final: str) -> str:
    """Canonical tone-less spelling of an (initial, final) pair."""
    if not initial:
        if final in FINALS_PLAIN:
            return final
        if final in FINALS_I:
            if final == "i":
                return "yi"
            if final in ("in", "ing"):
                return "y" + final
            return "y" + final[1:]
        if final in FINALS_U:
            return "wu" if final == "u" else "w" + final[1:]
        if final in FINALS_V:
            return "yu" + final[1:]
        raise UnknownToken(final, 0)
    written = _CONTRACTIONS.get(final, final)
    if final.startswith("v") and initial in ("j", "q", "x"):
        written = "u" + final[1:]
    return initial + written


@dataclass(frozen=True)
class Syllable:
    """One pinyin syllable split into initial and final phonemes.

    ``initial`` is empty for zero-initial syllables; ``final`` is never
    empty. ``raw`` keeps the original token (tone digits and marks intact).
    """

    initial: str
    final: str
    raw: str

    def spelled(self) -> str:
        return spell_syllable(self.initial, self.final)

    def ipa(self) -> tuple[str, str]:
        return (
            IPA_INITIALS.get(self.initial, self.initial),
            IPA_FINALS.get(self.final, self.final),
        )


@dataclass(frozen=True)
class CSUnit:
    """One syllable's CS code.

    The finger shape id always equals the consonant group id and the hand
    position id always equals the vowel group id; the table keys its pose
    and gloss templates by those ids.
    """

    consonant_group: Optional[int]
    vowel_group: int
    finger_shape_id: Optional[int] = None
    hand_position_id: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "finger_shape_id",
            self.consonant_group if self.consonant_group is not None else None,
        )
        object.__setattr__(self, "hand_position_id", self.vowel_group)

    def key(self) -> str:
        c = self.consonant_group if self.consonant_group is not None else 0
        return f"{c}-{self.vowel_group}"


@dataclass(frozen=True)
class Gloss:
    """Instructional text describing a CS unit sequence."""

    text: str
    units: tuple[CSUnit, ...] = ()
    backend: str = "rules"


class MappingTable:
    """Phoneme-to-group assignments plus gloss template fragments.

    Loaded from a JSON document with keys ``consonant_to_group``,
    ``vowel_to_group``, ``shape_templates``, ``position_templates``,
    ``lip_templates`` and ``schema_version``. Validation is strict: every
    phoneme of the built-in syllable grammar must be mapped, every group id
    in range and backed by a template, and duplicate keys are an error.
    """

    N_SHAPES = 8
    N_POSITIONS = 5

    def __init__(
        self,
        consonant_to_group: Mapping[str, int],
        vowel_to_group: Mapping[str, int],
        shape_templates: Mapping[int, str],
        position_templates: Mapping[int, str],
        lip_templates: Optional[Mapping[int, str]] = None,
        schema_version: int = 1,
    ):
        self.consonant_to_group = dict(consonant_to_group)
        self.vowel_to_group = dict(vowel_to_group)
        self.shape_templates = {int(k): v for k, v in shape_templates.items()}
        self.position_templates = {int(k): v for k, v in position_templates.items()}
        self.lip_templates = {int(k): v for k, v in (lip_templates or {}).items()}
        self.schema_version = schema_version
        self.validate()

    def validate(self) -> None:
        if self.schema_version != 1:
            raise TableError(f"unsupported mapping table schema_version {self.schema_version}")
        initials = {i for i in INITIALS}
        missing = initials - set(self.consonant_to_group)
        if missing:
            raise TableError(f"consonant_to_group is missing initials: {sorted(missing)}")
        missing = set(FINALS) - set(self.vowel_to_group)
        if missing:
            raise TableError(f"vowel_to_group is missing finals: {sorted(missing)}")
        for phon, group in self.consonant_to_group.items():
            if not (isinstance(group, int) and 1 <= group <= self.N_SHAPES):
                raise TableError(f"consonant group for {phon!r} must be an int in 1..{self.N_SHAPES}")
            if group not in self.shape_templates:
                raise TableError(f"no shape template for consonant group {group}")
        for phon, group in self.vowel_to_group.items():
            if not (isinstance(group, int) and 1 <= group <= self.N_POSITIONS):
                raise TableError(f"vowel group for {phon!r} must be an int in 1..{self.N_POSITIONS}")
            if group not in self.position_templates:
                raise TableError(f"no position template for vowel group {group}")
        for gid, frag in {**self.shape_templates, **self.position_templates}.items():
            if not (isinstance(frag, str) and frag.strip()):
                raise TableError(f"empty gloss template for group {gid}")

    @classmethod
    def from_dict(cls, doc: Mapping) -> "MappingTable":
        required = {"consonant_to_group", "vowel_to_group", "shape_templates",
                    "position_templates", "schema_version"}
        missing = required - set(doc)
        if missing:
            raise TableError(f"mapping table is missing keys: {sorted(missing)}")
        return cls(
            consonant_to_group=doc["consonant_to_group"],
            vowel_to_group=doc["vowel_to_group"],
            shape_templates=doc["shape_templates"],
            position_templates=doc["position_templates"],
            lip_templates=doc.get("lip_templates", {}),
            schema_version=doc["schema_version"],
        )

    @classmethod
    def load(cls, path) -> "MappingTable":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh, object_pairs_hook=_reject_duplicate_keys)
        if not isinstance(doc, dict):
            raise TableError("mapping table file must hold a JSON object")
        return cls.from_dict(doc)

    @classmethod
    def default(cls) -> "MappingTable":
        with resources.files("cuedgen.data").joinpath("mapping_table.json").open(
            "r", encoding="utf-8"
        ) as fh:
            doc = json.load(fh, object_pairs_hook=_reject_duplicate_keys)
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "consonant_to_group": self.consonant_to_group,
            "vowel_to_group": self.vowel_to_group,
            "shape_templates": {str(k): v for k, v in self.shape_templates.items()},
            "position_templates": {str(k): v for k, v in self.position_templates.items()},
            "lip_templates": {str(k): v for k, v in self.lip_templates.items()},
        }


def _reject_duplicate_keys(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise TableError(f"duplicate key {key!r} in table file")
        seen[key] = value
    return seen


def normalize_token(token: str) -> str:
    """Lowercase, strip tone digits and tone marks, fold u-umlaut to v."""
    token = unicodedata.normalize("NFC", token.strip().lower())
    if token and token[-1].isdigit():
        token = token[:-1]
    return "".join(_TONE_MARKS.get(ch, ch) for ch in token)


_PUNCTUATION = set(",.!?;:，。！？；：·-—'\"()（）[]…")


def _tokenize(text: str) -> list[tuple[str, int]]:
    tokens = []
    for pos, word in enumerate(text.split()):
        word = "".join(ch for ch in word if ch not in _PUNCTUATION)
        if word:
            tokens.append((word, pos))
    return tokens


def parse_pinyin(text: str) -> list[Syllable]:
    """Decompose whitespace-separated pinyin into syllables.

    Tone digits and tone marks are accepted and ignored; punctuation is
    dropped. Raises :class:`UnknownToken` (with the token position) for
    anything outside the syllable grammar.
    """
    syllables = []
    for token, pos in _tokenize(text):
        canon = normalize_token(token)
        parts = SYLLABLE_TABLE.get(canon)
        if parts is None:
            raise UnknownToken(token, pos)
        initial, final = parts
        syllables.append(Syllable(initial=initial, final=final, raw=token))
    return syllables


def syllable_to_unit(syllable: Syllable, table: MappingTable) -> CSUnit:
    """Map one syllable to its CS unit under the table."""
    if syllable.initial:
        cgroup = table.consonant_to_group.get(syllable.initial)
        if cgroup is None:
            raise UnmappedPhoneme(syllable.initial, "consonant")
    else:
        cgroup = None
    vgroup = table.vowel_to_group.get(syllable.final)
    if vgroup is None:
        raise UnmappedPhoneme(syllable.final, "vowel")
    return CSUnit(consonant_group=cgroup, vowel_group=vgroup)


def unit_gloss(unit: CSUnit, table: MappingTable) -> str:
    """Single instructional sentence for one unit."""
    position = table.position_templates[unit.hand_position_id]
    if unit.finger_shape_id is not None:
        shape = table.shape_templates[unit.finger_shape_id]
        sentence = f"{shape} and {position}."
    else:
        sentence = f"{position}."
    return sentence[0].upper() + sentence[1:]


def units_to_gloss(units: Sequence[CSUnit], table: MappingTable) -> Gloss:
    """Join per-unit instruction sentences with :data:`GLOSS_SEPARATOR`."""
    text = GLOSS_SEPARATOR.join(unit_gloss(u, table) for u in units)
    return Gloss(text=text, units=tuple(units), backend="rules")


def compile_gloss(text: str, table: MappingTable) -> Gloss:
    """parse_pinyin -> syllable_to_unit -> units_to_gloss in one call."""
    units = [syllable_to_unit(s, table) for s in parse_pinyin(text)]
    return units_to_gloss(units, table)


DEFAULT_PROMPT = (
    "Rewrite the sentence as hand cue instructions. For every syllable, name "
    "the finger shape used for its consonant group and the hand position "
    "used for its vowel group, one short imperative sentence per syllable."
)


class LLMClient:
    """Minimal HTTP client for an external gloss-writing endpoint.

    POSTs ``{"text": ..., "prompt": ...}`` as JSON and expects
    ``{"gloss": "..."}`` back. Endpoint and bearer token come from the
    constructor or the ``CUEDGEN_LLM_URL`` / ``CUEDGEN_LLM_TOKEN``
    environment variables. Requests to one endpoint are serialized.
    """

    def __init__(self, url: Optional[str] = None, token: Optional[str] = None,
                 timeout: float = 30.0):
        self.url = url or os.environ.get("CUEDGEN_LLM_URL")
        self.token = token if token is not None else os.environ.get("CUEDGEN_LLM_TOKEN")
        self.timeout = timeout
        self._lock = threading.Lock()
        if not self.url:
            raise EndpointUnavailable(
                "no LLM endpoint configured (set CUEDGEN_LLM_URL or pass url=)"
            )

    def request_gloss(self, text: str, prompt: str) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        with self._lock:
            try:
                resp = requests.post(
                    self.url,
                    json={"text": text, "prompt": prompt},
                    headers=headers,
                    timeout=self.timeout,
                )
            except requests.RequestException as exc:
                raise EndpointUnavailable(f"LLM endpoint {self.url}: {exc}") from exc
        if resp.status_code != 200:
            raise EndpointUnavailable(
                f"LLM endpoint {self.url} returned HTTP {resp.status_code}"
            )
        try:
            doc = resp.json()
        except ValueError as exc:
            raise MalformedResponse("LLM response is not JSON") from exc
        if not isinstance(doc, dict) or not isinstance(doc.get("gloss"), str) or not doc["gloss"].strip():
            raise MalformedResponse("LLM response lacks a non-empty 'gloss' string")
        return doc["gloss"]


def gloss_via_llm(
    text: str,
    prompt: str = DEFAULT_PROMPT,
    client: Optional[LLMClient] = None,
    table: Optional[MappingTable] = None,
) -> Gloss:
    """Gloss the sentence through the configured LLM endpoint.

    The caller picks the backend explicitly; there is no silent fallback to
    the rule templates. When a table is given the unit sequence is attached
    from the rule grammar so downstream consumers see the same structure as
    the rule backend.
    """
    if client is None:
        client = LLMClient()
    gloss_text = client.request_gloss(text, prompt)
    units: tuple[CSUnit, ...] = ()
    if table is not None:
        units = tuple(syllable_to_unit(s, table) for s in parse_pinyin(text))
    return Gloss(text=gloss_text, units=units, backend="llm")
