import numpy as np
import pytest

from oavl.scores import (
    ATTRITION_COMPARTMENTS,
    BONE_COMPARTMENTS,
    JOINT_COMPARTMENTS,
    OaScoreRecord,
    validate_record,
)


def make_record(
    record_id="r0",
    side="left",
    age=60,
    sex="male",
    alignment="neutral",
    kl=0,
    fill=0,
    **overrides,
):
    """A valid record with every graded field set to ``fill``; overrides are
    dicts like osteophytes={"fm": 2}."""
    record = OaScoreRecord(
        id=record_id,
        side=side,
        age=age,
        sex=sex,
        alignment=alignment,
        kl=kl,
        osteophytes={c: fill for c in BONE_COMPARTMENTS},
        sclerosis={c: fill for c in BONE_COMPARTMENTS},
        jsn={c: fill for c in JOINT_COMPARTMENTS},
        attrition={c: fill for c in ATTRITION_COMPARTMENTS},
        cysts={c: False for c in BONE_COMPARTMENTS},
        chondrocalcinosis={c: False for c in JOINT_COMPARTMENTS},
    )
    for name, values in overrides.items():
        getattr(record, name).update(values)
    return validate_record(record)


@pytest.fixture
def record_factory():
    return make_record


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
