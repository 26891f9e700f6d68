"""Input validation helpers for the estimators."""

from __future__ import annotations

from collections.abc import Sequence

from .dataio.records import DIFFICULTIES, GroundingSample
from .geometry import Box

STRATEGIES = ("H", "R", "U")
VARIANTS = ("Q", "Q+K", "Q+K+S")
REGIMES = ("ZS", "LP", "FT")


def check_samples(X, *, require_gt: bool = True, require_difficulty: bool = False) -> list:
    """Return ``X`` as a list of :class:`GroundingSample`, raising on bad input."""
    if isinstance(X, GroundingSample):
        raise TypeError("expected a sequence of GroundingSample, got a single sample")
    if not isinstance(X, Sequence):
        X = list(X)
    if len(X) == 0:
        raise ValueError("empty sample list")
    for i, s in enumerate(X):
        if not isinstance(s, GroundingSample):
            raise TypeError(f"item {i} is {type(s).__name__}, expected GroundingSample")
        if not s.query.strip():
            raise ValueError(f"sample {s.sample_id!r} has an empty query")
        if require_gt:
            if not isinstance(s.bbox, Box) or s.bbox.image_size is None:
                raise ValueError(f"sample {s.sample_id!r} lacks a ground-truth box with image size")
        if require_difficulty and s.difficulty not in DIFFICULTIES:
            raise ValueError(f"sample {s.sample_id!r} has no difficulty label")
    return list(X)


def check_choice(value, allowed, name: str):
    if value not in allowed:
        raise ValueError(f"{name} must be one of {allowed}, got {value!r}")
    return value
