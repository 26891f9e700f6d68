"""IoU@0.5 accuracy, overall and stratified by difficulty and object area."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataio.records import DIFFICULTIES
from .geometry import area_bin, iou
from .validation import STRATEGIES, check_choice, check_samples

IOU_THRESHOLD = 0.5
AREA_BINS = ("small", "medium", "large")
COLUMNS = ("overall", "easy", "medium", "hard", "small", "medium_area", "large")
HEADERS = ("Overall", "Acc_de", "Acc_dm", "Acc_dh", "Acc_as", "Acc_am", "Acc_al")


@dataclass
class EvalReport:
    overall: float
    difficulty: dict
    area: dict
    strategy: str
    variant: str
    counts: dict = field(default_factory=dict)
    model: str = ""
    regime: str = ""
    n: int = 0

    def row(self) -> list:
        return [self.overall, *(self.difficulty.get(d) for d in DIFFICULTIES),
                *(self.area.get(b) for b in AREA_BINS)]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "EvalReport":
        return cls(**data)


def is_correct(pred, gt) -> bool:
    """A prediction counts when it exists and overlaps ``gt`` with IoU >= 0.5."""
    return pred is not None and iou(pred, gt) >= IOU_THRESHOLD


def _mean(values):
    return float(np.mean(values)) if values else None


def summarize(samples, correct, strategy: str, variant: str, model: str = "",
              regime: str = "") -> EvalReport:
    """Aggregate per-sample correctness (0/1 or fractional) into a report."""
    correct = [float(c) for c in correct]
    diff = {d: [c for c, s in zip(correct, samples) if s.difficulty == d] for d in DIFFICULTIES}
    area = {b: [c for c, s in zip(correct, samples) if area_bin(s.bbox) == b] for b in AREA_BINS}
    counts = {**{f"difficulty_{d}": len(v) for d, v in diff.items()},
              **{f"area_{b}": len(v) for b, v in area.items()}}
    return EvalReport(
        overall=float(np.mean(correct)),
        difficulty={d: _mean(v) for d, v in diff.items()},
        area={b: _mean(v) for b, v in area.items()},
        strategy=strategy, variant=variant, counts=counts, model=model, regime=regime,
        n=len(samples),
    )


def per_sample_correct(model, samples, strategy: str, seed: int = 0, draws: int = 1) -> list:
    """Correctness per sample; ``R`` averages over ``draws`` seeded draws."""
    if strategy == "-":
        return [float(is_correct(p, s.bbox)) for p, s in zip(model.predict(samples), samples)]
    runs = draws if strategy == "R" else 1
    total = np.zeros(len(samples))
    for k in range(runs):
        preds = model.predict(samples, strategy=strategy, random_state=seed + k)
        total += [is_correct(p, s.bbox) for p, s in zip(preds, samples)]
    return list(total / runs)


def evaluate(model, dataset, strategy: str = "H", seed: int = 0, draws: int = 1,
             variant: str | None = None, regime: str = "") -> EvalReport:
    """Evaluate ``model`` on ``dataset`` under a selection strategy.

    Models without region scores (single-box regressors) are evaluated with
    ``strategy="-"``.
    """
    samples = check_samples(dataset, require_difficulty=True)
    check_choice(strategy, (*STRATEGIES, "-"), "strategy")
    correct = per_sample_correct(model, samples, strategy, seed, draws)
    variant = variant if variant is not None else getattr(model, "variant", "")
    return summarize(samples, correct, strategy, variant, type(model).__name__, regime)


# -- reports ----------------------------------------------------------------------


def emit_report(reports, fmt: str = "json") -> str:
    """Render one report or a list of them as ``json`` or an aligned ``table``."""
    if isinstance(reports, EvalReport):
        reports = [reports]
    if fmt == "json":
        return json.dumps([r.to_json() for r in reports], indent=2, sort_keys=True) + "\n"
    if fmt == "table":
        head = ["Model", "Text", "Training", "Criteria", *HEADERS]
        rows = []
        for r in reports:
            cells = ["-" if v is None else f"{100 * v:.2f}" for v in r.row()]
            rows.append([r.model, r.variant, r.regime or "-", r.strategy, *cells])
        widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]
        fmt_row = lambda cols: "  ".join(str(c).rjust(w) for c, w in zip(cols, widths))
        lines = [fmt_row(head), "  ".join("-" * w for w in widths)]
        lines += [fmt_row(r) for r in rows]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def parse_report(text: str) -> list:
    return [EvalReport.from_json(d) for d in json.loads(text)]
