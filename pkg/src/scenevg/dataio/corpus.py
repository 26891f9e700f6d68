"""Image-disjoint splitting and corpus statistics."""

from __future__ import annotations

import json
from collections import Counter, OrderedDict
from dataclasses import replace

import numpy as np

from ..geometry import area_bin
from ..linguistic import extract_head
from .records import DIFFICULTIES

SPLIT_FRACTIONS = (0.6, 0.2, 0.2)
# word-length histogram edges; the 50-70 band is kept as one bucket
LENGTH_EDGES = (0, 10, 30, 50, 70, 90, 110, 150, 10_000)
AREA_BINS = ("small", "medium", "large")


class SplitError(ValueError):
    pass


def split_dataset(samples, seed: int = 0) -> list:
    """Assign 60/20/20 train/val/test by image; no image crosses splits.

    Returns copies of the samples with ``split`` set; input order is kept.
    """
    images = list(OrderedDict.fromkeys(s.image_id for s in samples))
    if len(images) < 5:
        raise SplitError(f"need at least 5 images to split, got {len(images)}")
    order = np.random.default_rng(seed).permutation(len(images))
    n_train = round(SPLIT_FRACTIONS[0] * len(images))
    n_val = round(SPLIT_FRACTIONS[1] * len(images))
    tag = {}
    for rank, i in enumerate(order):
        tag[images[i]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return [replace(s, split=tag[s.image_id], image=s.image, image_root=s.image_root)
            for s in samples]


def by_split(samples, split: str) -> list:
    return [s for s in samples if s.split == split]


def length_bucket(n_words: int) -> str:
    for lo, hi in zip(LENGTH_EDGES, LENGTH_EDGES[1:]):
        if lo <= n_words < hi:
            return f"{lo}-{hi}"
    raise ValueError(f"length {n_words} outside histogram range")


def compute_stats(samples) -> dict:
    """Knowledge length histogram, referred-object noun frequencies, area-bin
    proportions and difficulty mix of a sample collection."""
    samples = list(samples)
    if not samples:
        raise ValueError("statistics of an empty sample set")
    buckets = {f"{lo}-{hi}": 0 for lo, hi in zip(LENGTH_EDGES, LENGTH_EDGES[1:])}
    seen_stories = set()
    for s in samples:
        key = (s.image_id, s.knowledge)
        if key in seen_stories:
            continue
        seen_stories.add(key)
        buckets[length_bucket(len(s.knowledge.split()))] += 1

    nouns = Counter()
    for s in samples:
        try:
            nouns[extract_head(s.query, s.tree).noun] += 1
        except ValueError:
            nouns["<unparsed>"] += 1

    area_counts = Counter(area_bin(s.bbox) for s in samples)
    diff_counts = Counter(s.difficulty for s in samples if s.difficulty is not None)
    n = len(samples)
    return {
        "n_samples": n,
        "n_stories": len(seen_stories),
        "length_edges": list(LENGTH_EDGES),
        "length_histogram": buckets,
        "head_noun_counts": dict(nouns.most_common()),
        "area_bin_counts": {b: area_counts[b] for b in AREA_BINS},
        "area_bin_proportions": {b: area_counts[b] / n for b in AREA_BINS},
        "difficulty_counts": {d: diff_counts[d] for d in DIFFICULTIES},
    }


def format_stats(stats: dict) -> str:
    """Aligned plain-text summary of :func:`compute_stats` output."""
    lines = [f"samples: {stats['n_samples']}  stories: {stats['n_stories']}", "",
             "knowledge length (words)"]
    for bucket, count in stats["length_histogram"].items():
        lines.append(f"  {bucket:>10}  {count:6d}")
    lines += ["", "referred-object area"]
    for b in AREA_BINS:
        lines.append(f"  {b:>10}  {stats['area_bin_counts'][b]:6d}  "
                     f"{stats['area_bin_proportions'][b]:.4f}")
    lines += ["", "difficulty"]
    for d, c in stats["difficulty_counts"].items():
        lines.append(f"  {d:>10}  {c:6d}")
    lines += ["", "head nouns"]
    for noun, c in list(stats["head_noun_counts"].items())[:20]:
        lines.append(f"  {noun:>10}  {c:6d}")
    return "\n".join(lines) + "\n"


def stats_json(stats: dict) -> str:
    return json.dumps(stats, indent=2, sort_keys=True) + "\n"
