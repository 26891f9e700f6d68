"""Grounding samples and their line-delimited JSON persistence."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image

from ..geometry import Box
from ..linguistic import DependencyTree

DIFFICULTIES = ("easy", "medium", "hard")
SPLITS = ("train", "val", "test")


class RecordError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass
class GroundingSample:
    """One (image, knowledge, query) triple with its ground-truth box.

    Gold linguistic fields (``tree``, ``head_span``, ``coref``) and the
    generator's ``scene`` graph are optional; records from real data carry
    none of them.
    """

    sample_id: str
    image_id: str
    knowledge: str
    query: str
    bbox: Box
    difficulty: Optional[str] = None
    split: Optional[str] = None
    image_path: Optional[str] = None
    tree: Optional[DependencyTree] = None
    head_span: Optional[tuple] = None
    coref: Optional[list] = None
    aliases: Optional[dict] = None
    scene: Optional[dict] = None
    image: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    image_root: Optional[str] = field(default=None, compare=False, repr=False)

    @property
    def image_size(self) -> tuple:
        return self.bbox.image_size

    def load_image(self) -> np.ndarray:
        if self.image is None:
            if self.image_path is None:
                raise ValueError(f"sample {self.sample_id} has neither pixels nor an image path")
            path = Path(self.image_root or ".") / self.image_path
            with Image.open(path) as im:
                self.image = np.asarray(im.convert("RGB"))
        return self.image

    def to_json(self) -> dict:
        rec = {
            "sample_id": self.sample_id,
            "image_id": self.image_id,
            "image_path": self.image_path,
            "image_size": list(self.bbox.image_size) if self.bbox.image_size else None,
            "knowledge": self.knowledge,
            "query": self.query,
            "bbox": self.bbox.as_list(),
            "difficulty": self.difficulty,
            "split": self.split,
        }
        gold = {}
        if self.tree is not None:
            gold["tree"] = self.tree.to_json()
        if self.head_span is not None:
            gold["head_span"] = list(self.head_span)
        if self.coref is not None:
            gold["coref"] = [list(s) for s in self.coref]
        if self.aliases is not None:
            gold["aliases"] = self.aliases
        if gold:
            rec["gold"] = gold
        if self.scene is not None:
            rec["scene"] = self.scene
        return rec

    @classmethod
    def from_json(cls, rec: dict, image_root: Optional[str] = None) -> "GroundingSample":
        for key in ("knowledge", "query", "bbox"):
            if key not in rec:
                raise KeyError(key)
        size = rec.get("image_size")
        bbox = Box(*[float(v) for v in rec["bbox"]], tuple(size) if size else None)
        gold = rec.get("gold") or {}
        image_path = rec.get("image_path")
        return cls(
            sample_id=str(rec.get("sample_id", "")),
            image_id=str(rec.get("image_id", image_path or "")),
            knowledge=rec["knowledge"],
            query=rec["query"],
            bbox=bbox,
            difficulty=rec.get("difficulty"),
            split=rec.get("split"),
            image_path=image_path,
            tree=DependencyTree.from_json(gold["tree"]) if "tree" in gold else None,
            head_span=tuple(gold["head_span"]) if "head_span" in gold else None,
            coref=[tuple(s) for s in gold["coref"]] if "coref" in gold else None,
            aliases=gold.get("aliases"),
            scene=rec.get("scene"),
            image_root=image_root,
        )


def save_records(samples: Iterable[GroundingSample], path) -> Path:
    """Write one JSON object per line; in-memory images go to PNG files
    next to the record file under their ``image_path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    written = set()
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            if s.image is not None and s.image_path and s.image_path not in written:
                img_file = path.parent / s.image_path
                img_file.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(s.image).save(img_file, format="PNG")
                written.add(s.image_path)
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")
    return path


def load_records(path) -> list[GroundingSample]:
    path = Path(path)
    root = os.fspath(path.parent)
    out = []
    with open(path, encoding="utf-8") as fh:
        for no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(no, f"malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise RecordError(no, "record is not an object")
            try:
                out.append(GroundingSample.from_json(rec, image_root=root))
            except KeyError as exc:
                raise RecordError(no, f"missing field {exc.args[0]!r}") from None
            except (TypeError, ValueError) as exc:
                raise RecordError(no, str(exc)) from None
    return out
