"""Evaluation formulas (IoU, AP, MAP@50, perplexity, bits per character) and
the multi-task scoring harness behind the merge comparison tables."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .toybase import BaseModel, FlatParams, TaskDataset, apply_lora, task_loss, unflatten

__all__ = [
    "Box",
    "Detection",
    "MergeReport",
    "iou",
    "average_precision",
    "map50",
    "mean_average_precision",
    "perplexity",
    "bpc",
    "boxes_from_outputs",
    "micro_detection_map",
    "multitask_report",
    "ORIGINAL_MODEL",
    "ORIGINAL_LORA",
]

ORIGINAL_MODEL = "original_model"
ORIGINAL_LORA = "original_lora"


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("box coordinates must be finite")
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ValueError(f"invalid box {vals}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    class_id: int = 0

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError("detection score must be finite")


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when the union has zero area."""
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(w, 0.0) * max(h, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def _match(dets: Sequence[Detection], gts: Sequence[Box], iou_thresh: float) -> np.ndarray:
    """Greedy matching in descending score order. Each detection takes the
    unmatched ground truth with the highest IoU, if that IoU clears the threshold."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)  # stable on ties
    taken = [False] * len(gts)
    hits = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            o = iou(dets[i].box, g)
            if o > best:
                best, best_j = o, j
        if best_j >= 0 and best >= iou_thresh:
            taken[best_j] = True
            hits[rank] = True
    return hits


def average_precision(dets: Sequence[Detection], gts: Sequence[Box],
                      iou_thresh: float = 0.5) -> float:
    """All-point interpolated AP.

    With no ground truths the AP is defined as 0.
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError("iou_thresh must lie in (0, 1]")
    if not gts or not dets:
        return 0.0
    hits = _match(dets, gts, iou_thresh)
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    recall = tp / len(gts)
    precision = tp / (tp + fp)
    # precision envelope: running max from the right
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * env))


def map50(per_class_ap: Sequence[float]) -> float:
    if len(per_class_ap) == 0:
        raise ValueError("map50 of an empty list")
    return math.fsum(per_class_ap) / len(per_class_ap)


def mean_average_precision(dets: Sequence[Detection], gts: Mapping[int, Sequence[Box]],
                           iou_thresh: float = 0.5) -> float:
    """Class-averaged AP over the classes that have ground truth."""
    classes = sorted(gts)
    aps = [average_precision([d for d in dets if d.class_id == c], gts[c], iou_thresh)
           for c in classes]
    return map50(aps)


def perplexity(token_log_probs: Sequence[float]) -> float:
    lp = np.asarray(token_log_probs, dtype=np.float64)
    if lp.size == 0:
        raise ValueError("perplexity of an empty sequence")
    if np.any(lp > 0):
        raise ValueError("log probabilities must be <= 0")
    m = -math.fsum(lp.tolist()) / lp.size
    ppl = math.exp(m)
    # The log probs carry half an ulp of rounding each, which exp amplifies to
    # roughly (1 + m) ulps of the result. An integer that close is
    # indistinguishable from ppl, so return it (uniform V then gives V).
    nearest = round(ppl)
    if abs(ppl - nearest) <= 4.0 * (1.0 + m) * math.ulp(ppl):
        return float(nearest)
    return ppl


def bpc(ppl: float, chars_per_word: float) -> float:
    if not ppl >= 1.0:
        raise ValueError("perplexity must be >= 1")
    if not chars_per_word > 0:
        raise ValueError("chars_per_word must be positive")
    return math.log2(ppl) / chars_per_word


# --------------------------------------------------------------------------
# synthetic detection task used to exercise the formulas end to end


def boxes_from_outputs(outputs: np.ndarray) -> list[Box]:
    """Read a box from the first four regression outputs: centre (o0, o1),
    half extents |o2| and |o3|."""
    outputs = np.asarray(outputs, dtype=np.float64)
    if outputs.ndim != 2 or outputs.shape[1] < 4:
        raise ValueError("need an (n, >=4) output array")
    cx, cy = outputs[:, 0], outputs[:, 1]
    hw, hh = np.abs(outputs[:, 2]), np.abs(outputs[:, 3])
    return [Box(float(a - w), float(b - h), float(a + w), float(b + h))
            for a, b, w, h in zip(cx, cy, hw, hh)]


def micro_detection_map(pred: np.ndarray, target: np.ndarray, class_ids: Sequence[int] | None = None,
                        iou_thresh: float = 0.5) -> float:
    """MAP of boxes decoded from model outputs against boxes decoded from targets.

    Row ``i`` of ``pred`` predicts the box of row ``i`` of ``target``. The
    detection score is the negative predicted half-extent spread, a
    target-free confidence proxy.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    cls = np.zeros(len(pred), dtype=int) if class_ids is None else np.asarray(class_ids)
    pboxes, gboxes = boxes_from_outputs(pred), boxes_from_outputs(target)
    score = -np.abs(np.abs(pred[:, 2]) - np.abs(pred[:, 3]))
    dets = [Detection(b, float(s), int(c)) for b, s, c in zip(pboxes, score, cls)]
    gts: dict[int, list[Box]] = {}
    for b, c in zip(gboxes, cls):
        gts.setdefault(int(c), []).append(b)
    return mean_average_precision(dets, gts, iou_thresh)


# --------------------------------------------------------------------------
# merge reports


@dataclass
class MergeReport:
    """Long-format table of (method, task_id, metric, value) rows."""

    rows: list[tuple[str, str, str, float]] = field(default_factory=list)

    COLUMNS = ("method", "task_id", "metric", "value")

    def add(self, method: str, task_id: str, metric: str, value: float):
        self.rows.append((str(method), str(task_id), str(metric), float(value)))

    @property
    def methods(self) -> list[str]:
        return sorted({r[0] for r in self.rows})

    def value(self, method: str, task_id: str, metric: str) -> float:
        for r in self.rows:
            if r[:3] == (method, task_id, metric):
                return r[3]
        raise KeyError((method, task_id, metric))

    def averages(self) -> dict[tuple[str, str], float]:
        """Unweighted mean over tasks per (method, metric), summed in task order."""
        groups: dict[tuple[str, str], list[tuple[str, float]]] = {}
        for m, t, k, v in self.rows:
            groups.setdefault((m, k), []).append((t, v))
        return {key: math.fsum(v for _, v in sorted(vals)) / len(vals)
                for key, vals in sorted(groups.items())}

    def average(self, method: str, metric: str = "loss") -> float:
        return self.averages()[(method, metric)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([r[0], r[1], r[2], repr(r[3])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MergeReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if tuple(header or ()) != cls.COLUMNS:
            raise ValueError(f"unexpected report header {header}")
        return cls([(m, t, k, float(v)) for m, t, k, v in reader])

    def to_json(self) -> str:
        avg = [{"method": m, "metric": k, "value": v} for (m, k), v in self.averages().items()]
        rows = [dict(zip(self.COLUMNS, r)) for r in self.rows]
        return json.dumps({"rows": rows, "averages": avg}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MergeReport":
        # stored averages are ignored; they are always recomputed from rows
        doc = json.loads(text)
        return cls([(r["method"], r["task_id"], r["metric"], float(r["value"])) for r in doc["rows"]])


def _score_rows(report: MergeReport, method: str, model, tasks: Mapping[str, TaskDataset]):
    for tid in sorted(tasks):
        loss = task_loss(model, tasks[tid])
        report.add(method, tid, "loss", loss)
        report.add(method, tid, "score", 1.0 / (1.0 + loss))


def multitask_report(base: BaseModel, merged_adapters: Mapping[str, FlatParams],
                     per_task_adapters: Mapping[str, FlatParams],
                     tasks: Mapping[str, TaskDataset]) -> MergeReport:
    """Score every merged adapter on every task, plus the two reference rows:
    the untouched base model and each task's own fine-tuned adapter."""
    flats = [*merged_adapters.values(), *per_task_adapters.values()]
    if flats and any(f.manifest != flats[0].manifest for f in flats):
        raise ValueError("all adapters must share one manifest")
    report = MergeReport()
    _score_rows(report, ORIGINAL_MODEL, base, tasks)
    for tid in sorted(tasks):
        if tid not in per_task_adapters:
            continue
        model = apply_lora(base, unflatten(per_task_adapters[tid]))
        loss = task_loss(model, tasks[tid])
        report.add(ORIGINAL_LORA, tid, "loss", loss)
        report.add(ORIGINAL_LORA, tid, "score", 1.0 / (1.0 + loss))
    for method in sorted(merged_adapters):
        _score_rows(report, method, apply_lora(base, unflatten(merged_adapters[method])), tasks)
    return report
