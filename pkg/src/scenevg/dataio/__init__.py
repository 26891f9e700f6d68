"""Synthetic corpus generation, records, splits and statistics."""

from .corpus import by_split, compute_stats, split_dataset
from .generator import GeneratorConfig, SceneGenerator
from .oracle import oracle_solve
from .records import GroundingSample, load_records, save_records

__all__ = ["GeneratorConfig", "GroundingSample", "SceneGenerator", "by_split", "compute_stats",
           "load_records", "oracle_solve", "save_records", "split_dataset"]
