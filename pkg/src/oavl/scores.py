"""Structured knee osteoarthritis scores.

An :class:`OaScoreRecord` holds one knee's demographics plus ordinal 0..4
severity grades per feature and compartment, and boolean presence flags.
Records are the single source of truth downstream: captions render from
them and synthetic images encode them pixel by pixel.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

GRADE_MIN = 0
GRADE_MAX = 4

# Ordinal severity 0..4 mapped to descriptive words.
GRADE_WORDS = ("no", "early", "mild", "moderate", "severe")
WORD_TO_GRADE = {word: g for g, word in enumerate(GRADE_WORDS)}

SIDES = ("left", "right")
SEXES = ("male", "female")
ALIGNMENTS = ("varus", "valgus", "neutral")

# Compartment keys: femur/tibia x medial/lateral for bone features,
# joint medial/lateral for joint-space features.
BONE_COMPARTMENTS = ("fm", "fl", "tm", "tl")
JOINT_COMPARTMENTS = ("jm", "jl")
ATTRITION_COMPARTMENTS = ("tm", "tl")

COMPARTMENT_NAMES = {
    "fm": "femur medial",
    "fl": "femur lateral",
    "tm": "tibia medial",
    "tl": "tibia lateral",
    "jm": "joint medial",
    "jl": "joint lateral",
}

AGE_MIN = 0
AGE_MAX = 120
SAMPLE_AGE_MIN = 45
SAMPLE_AGE_MAX = 79

SeveritySignature = Tuple[int, ...]


class ScoreValidationError(ValueError):
    """A record field violates the schema; ``field`` names the first offender."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class OaScoreRecord:
    """One knee's scored exam: demographics, KL grade, and per-compartment features."""

    id: str
    side: str
    age: int
    sex: str
    alignment: str
    kl: int
    osteophytes: Dict[str, int]
    sclerosis: Dict[str, int]
    jsn: Dict[str, int]
    attrition: Dict[str, int]
    cysts: Dict[str, bool]
    chondrocalcinosis: Dict[str, bool]

    def copy(self) -> "OaScoreRecord":
        return copy.deepcopy(self)

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "side": self.side,
            "age": self.age,
            "sex": self.sex,
            "alignment": self.alignment,
            "kl": self.kl,
            "osteophytes": dict(self.osteophytes),
            "sclerosis": dict(self.sclerosis),
            "jsn": dict(self.jsn),
            "attrition": dict(self.attrition),
            "cysts": dict(self.cysts),
            "chondrocalcinosis": dict(self.chondrocalcinosis),
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "OaScoreRecord":
        if not isinstance(obj, dict):
            raise ScoreValidationError("record", "expected a JSON object")
        known = {
            "id", "side", "age", "sex", "alignment", "kl", "osteophytes",
            "sclerosis", "jsn", "attrition", "cysts", "chondrocalcinosis",
        }
        for key in known:
            if key not in obj:
                raise ScoreValidationError(key, "missing key")
        extra = set(obj) - known
        if extra:
            raise ScoreValidationError(sorted(extra)[0], "unknown key")
        record = cls(
            id=obj["id"],
            side=obj["side"],
            age=obj["age"],
            sex=obj["sex"],
            alignment=obj["alignment"],
            kl=obj["kl"],
            osteophytes=dict(obj["osteophytes"]),
            sclerosis=dict(obj["sclerosis"]),
            jsn=dict(obj["jsn"]),
            attrition=dict(obj["attrition"]),
            cysts=dict(obj["cysts"]),
            chondrocalcinosis=dict(obj["chondrocalcinosis"]),
        )
        return validate_record(record)


def _check_grade(field_name: str, value) -> None:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ScoreValidationError(field_name, "grade must be an integer")
    if not GRADE_MIN <= value <= GRADE_MAX:
        raise ScoreValidationError(field_name, "grade out of range")


def _check_grade_map(field_name: str, value, keys) -> None:
    if not isinstance(value, dict):
        raise ScoreValidationError(field_name, "expected a compartment map")
    for key in keys:
        if key not in value:
            raise ScoreValidationError(f"{field_name}[{key}]", "missing key")
        _check_grade(f"{field_name}[{key}]", value[key])
    for key in value:
        if key not in keys:
            raise ScoreValidationError(f"{field_name}[{key}]", "unknown compartment")


def _check_flag_map(field_name: str, value, keys) -> None:
    if not isinstance(value, dict):
        raise ScoreValidationError(field_name, "expected a compartment map")
    for key in keys:
        if key not in value:
            raise ScoreValidationError(f"{field_name}[{key}]", "missing key")
        if not isinstance(value[key], bool):
            raise ScoreValidationError(f"{field_name}[{key}]", "flag must be a boolean")
    for key in value:
        if key not in keys:
            raise ScoreValidationError(f"{field_name}[{key}]", "unknown compartment")


def validate_record(record: OaScoreRecord) -> OaScoreRecord:
    """Check every schema invariant; return the record unchanged if all hold.

    Raises :class:`ScoreValidationError` naming the first violated field.
    """
    if not isinstance(record.id, str) or not record.id:
        raise ScoreValidationError("id", "must be a non-empty string")
    if record.side not in SIDES:
        raise ScoreValidationError("side", f"must be one of {SIDES}")
    if isinstance(record.age, bool) or not isinstance(record.age, int):
        raise ScoreValidationError("age", "must be an integer")
    if not AGE_MIN <= record.age <= AGE_MAX:
        raise ScoreValidationError("age", "out of range")
    if record.sex not in SEXES:
        raise ScoreValidationError("sex", f"must be one of {SEXES}")
    if record.alignment not in ALIGNMENTS:
        raise ScoreValidationError("alignment", f"must be one of {ALIGNMENTS}")
    _check_grade("kl", record.kl)
    _check_grade_map("osteophytes", record.osteophytes, BONE_COMPARTMENTS)
    _check_grade_map("sclerosis", record.sclerosis, BONE_COMPARTMENTS)
    _check_grade_map("jsn", record.jsn, JOINT_COMPARTMENTS)
    _check_grade_map("attrition", record.attrition, ATTRITION_COMPARTMENTS)
    _check_flag_map("cysts", record.cysts, BONE_COMPARTMENTS)
    _check_flag_map("chondrocalcinosis", record.chondrocalcinosis, JOINT_COMPARTMENTS)
    return record


def grade_word(g: int) -> str:
    """Map an ordinal grade to its descriptive word (0 -> "no", ..., 4 -> "severe")."""
    _check_grade("grade", g)
    return GRADE_WORDS[g]


def severity_signature(record: OaScoreRecord) -> SeveritySignature:
    """Tuple of every grade and flag of a record, in fixed field order.

    Excludes id, age, sex, side, and alignment: two records agree on the
    signature iff they agree on every grade and flag. Stable across runs.
    """
    parts = [record.kl]
    parts.extend(record.osteophytes[c] for c in BONE_COMPARTMENTS)
    parts.extend(record.sclerosis[c] for c in BONE_COMPARTMENTS)
    parts.extend(record.jsn[c] for c in JOINT_COMPARTMENTS)
    parts.extend(record.attrition[c] for c in ATTRITION_COMPARTMENTS)
    parts.extend(int(record.cysts[c]) for c in BONE_COMPARTMENTS)
    parts.extend(int(record.chondrocalcinosis[c]) for c in JOINT_COMPARTMENTS)
    return tuple(parts)


def sample_record(rng: np.random.Generator, record_id: str = "sample") -> OaScoreRecord:
    """Draw one synthetic record.

    KL is uniform on 0..4; every graded feature is clamp(kl + delta, 0, 4)
    with delta uniform in {-1, 0, +1} per feature, so feature grades (and
    the rendered image) carry the KL signal. Flags are true with
    probability 0.1 + 0.1 * kl. Demographics are uniform; age 45..79.
    """
    kl = int(rng.integers(GRADE_MIN, GRADE_MAX + 1))

    def coupled_grade() -> int:
        delta = int(rng.integers(-1, 2))
        return int(np.clip(kl + delta, GRADE_MIN, GRADE_MAX))

    def coupled_flag() -> bool:
        return bool(rng.random() < 0.1 + 0.1 * kl)

    record = OaScoreRecord(
        id=record_id,
        side="",  # drawn below, after the graded fields
        age=0,
        sex="",
        alignment="",
        kl=kl,
        osteophytes={c: coupled_grade() for c in BONE_COMPARTMENTS},
        sclerosis={c: coupled_grade() for c in BONE_COMPARTMENTS},
        jsn={c: coupled_grade() for c in JOINT_COMPARTMENTS},
        attrition={c: coupled_grade() for c in ATTRITION_COMPARTMENTS},
        cysts={c: coupled_flag() for c in BONE_COMPARTMENTS},
        chondrocalcinosis={c: coupled_flag() for c in JOINT_COMPARTMENTS},
    )
    record.side = SIDES[int(rng.integers(0, len(SIDES)))]
    record.sex = SEXES[int(rng.integers(0, len(SEXES)))]
    record.alignment = ALIGNMENTS[int(rng.integers(0, len(ALIGNMENTS)))]
    record.age = int(rng.integers(SAMPLE_AGE_MIN, SAMPLE_AGE_MAX + 1))
    return validate_record(record)


def _perturbed_grade(g: int, rng: np.random.Generator) -> int:
    allowed = [v for v in range(GRADE_MIN, GRADE_MAX + 1) if abs(v - g) >= 2]
    return allowed[int(rng.integers(0, len(allowed)))]


def perturb_negative(record: OaScoreRecord, rng: np.random.Generator) -> OaScoreRecord:
    """Build the contrasting negative of a record.

    KL and every graded feature are redrawn uniformly from the grades at
    least 2 levels away; each flag flips with probability 0.5. Demographics
    stay unchanged and the id gets a "-neg" suffix.
    """
    neg = record.copy()
    neg.id = record.id + "-neg"
    neg.kl = _perturbed_grade(record.kl, rng)
    for comp in BONE_COMPARTMENTS:
        neg.osteophytes[comp] = _perturbed_grade(record.osteophytes[comp], rng)
    for comp in BONE_COMPARTMENTS:
        neg.sclerosis[comp] = _perturbed_grade(record.sclerosis[comp], rng)
    for comp in JOINT_COMPARTMENTS:
        neg.jsn[comp] = _perturbed_grade(record.jsn[comp], rng)
    for comp in ATTRITION_COMPARTMENTS:
        neg.attrition[comp] = _perturbed_grade(record.attrition[comp], rng)
    for comp in BONE_COMPARTMENTS:
        if rng.random() < 0.5:
            neg.cysts[comp] = not neg.cysts[comp]
    for comp in JOINT_COMPARTMENTS:
        if rng.random() < 0.5:
            neg.chondrocalcinosis[comp] = not neg.chondrocalcinosis[comp]
    return neg
