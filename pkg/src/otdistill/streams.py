"""Named, seeded random streams; one per (stage, seed, keys) so stages never share state."""

from __future__ import annotations

import numpy as np

from otdistill.errors import InvalidInput

STAGES = {
    "sample.noise": 1,
    "sample.batch": 2,
    "student": 3,
    "teacher": 4,
}


def stream_id(stage: str, seed: int, *keys: int) -> str:
    return ":".join([stage, str(seed), *(str(k) for k in keys)])


def make_rng(stage: str, seed: int, *keys: int) -> np.random.Generator:
    if stage not in STAGES:
        raise InvalidInput("unknown random stream stage", details={"stage": stage})
    if seed < 0 or any(k < 0 for k in keys):
        raise InvalidInput("stream seeds and keys must be nonnegative", details={"seed": seed, "keys": list(keys)})
    return np.random.default_rng([int(seed), STAGES[stage], *(int(k) for k in keys)])
