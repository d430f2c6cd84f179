"""Detection AP, IoGT coverage of distillation proposals, and report files."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import geometry as G
from .dataset import Annotation, DatasetSplit

RECALL_STEPS = 100
IOGT_THRESHOLDS = (0.8, 0.5)


@dataclass
class EvalResult:
    per_category: dict[str, float] = field(default_factory=dict)
    roles: dict[str, str] = field(default_factory=dict)
    iou_threshold: float = 0.5

    def _mean(self, role: str | None) -> float | None:
        vals = [ap for c, ap in self.per_category.items() if role is None or self.roles.get(c) == role]
        return float(np.mean(vals)) if vals else None

    @property
    def base(self) -> float | None:
        return self._mean("base")

    @property
    def novel(self) -> float | None:
        return self._mean("novel")

    @property
    def overall(self) -> float | None:
        return self._mean(None)

    def rows(self) -> list[dict]:
        rows = [{"category": c, "role": self.roles.get(c, ""), "AP": ap} for c, ap in self.per_category.items()]
        if self.per_category:
            for name in ("base", "novel", "overall"):
                v = getattr(self, name)
                if v is not None:
                    rows.append({"category": name, "role": "aggregate", "AP": v})
        return rows


def average_precision(scores: Sequence[float], is_tp: Sequence[bool], num_gt: int) -> float:
    """101-point interpolated AP from ranked detections."""
    if num_gt == 0:
        raise ValueError("AP is undefined without ground truth")
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.asarray(is_tp, dtype=np.float64)[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    precision = ctp / (ctp + cfp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    # recall >= k/100 tested in integers, so points like 0.3 are not lost to float rounding
    hits = np.rint(ctp).astype(np.int64) * RECALL_STEPS
    need = np.arange(RECALL_STEPS + 1) * int(num_gt)
    idx = np.searchsorted(hits, need, side="left")
    vals = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(vals.mean())


def match_detections(dets: Sequence, gts: Mapping[int, np.ndarray], iou_threshold: float) -> list[bool]:
    """Greedy score-ordered matching; each GT is claimed at most once by its best unclaimed overlap.

    ``dets`` are objects with ``image_id``, ``box`` and ``score``; the result is in input order.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    out = [False] * len(dets)
    for i in order:
        d = dets[i]
        g = gts.get(d.image_id)
        if g is None or len(g) == 0:
            continue
        ious = G.pairwise_iou(G.as_boxes([d.box]), g)[0]
        ious[used[d.image_id]] = -1.0
        j = int(ious.argmax())
        if ious[j] >= iou_threshold:
            used[d.image_id][j] = True
            out[i] = True
    return out


def evaluate_detections(detections: Iterable, annotations: Iterable[Annotation], split: DatasetSplit,
                        iou_threshold: float = 0.5) -> EvalResult:
    """Per-category AP at ``iou_threshold`` over the categories that have ground truth."""
    anns = [a for a in annotations if split.role(a.category) is not None]
    dets = list(detections)
    result = EvalResult(iou_threshold=iou_threshold)
    for cat in split.all_categories:
        cat_anns = [a for a in anns if a.category == cat]
        if not cat_anns:
            continue
        gts: dict[int, list] = {}
        for a in cat_anns:
            gts.setdefault(a.image_id, []).append(a.box.as_tuple())
        gts_arr = {k: G.as_boxes(v) for k, v in gts.items()}
        cat_dets = [d for d in dets if d.category == cat]
        tp = match_detections(cat_dets, gts_arr, iou_threshold)
        result.per_category[cat] = average_precision([d.score for d in cat_dets], tp, len(cat_anns))
        result.roles[cat] = split.role(cat)
    return result


# ------------------------------------------------------------------ IoGT

@dataclass
class IoGtReport:
    mean_iogt: float | None
    counts: dict[float, int]
    total_proposals: int
    num_gt: int
    meta: dict = field(default_factory=lambda: {"pair_accounting": "max-IoGT-once",
                                                "mean": "per-GT best proposal"})

    def fraction(self, thr: float) -> float:
        return self.counts[thr] / self.total_proposals if self.total_proposals else 0.0

    def rows(self) -> list[dict]:
        rows = [{"metric": "mean_iogt", "value": self.mean_iogt}]
        for thr in sorted(self.counts, reverse=True):
            rows.append({"metric": f"count_iogt_ge_{thr:g}", "value": self.counts[thr]})
            rows.append({"metric": f"fraction_iogt_ge_{thr:g}", "value": self.fraction(thr)})
        rows.append({"metric": "total_proposals", "value": self.total_proposals})
        rows.append({"metric": "num_novel_gt", "value": self.num_gt})
        return rows


def iogt_statistics(store: Mapping[int, Sequence], annotations: Iterable[Annotation], split: DatasetSplit,
                    thresholds: Sequence[float] = IOGT_THRESHOLDS) -> IoGtReport:
    """Coverage of novel GT boxes by stored proposals.

    The mean takes each novel GT's best proposal in its image. Counts take each
    proposal once, at its maximum IoGT over the novel GT of its image, and are
    relative to every proposal in the store.
    """
    novel: dict[int, list] = {}
    for a in annotations:
        if split.role(a.category) == "novel":
            novel.setdefault(a.image_id, []).append(a.box.as_tuple())
    counts = {float(t): 0 for t in thresholds}
    total = 0
    best_per_gt = []
    for image_id, props in store.items():
        boxes = G.as_boxes([p.box for p in props]) if len(props) else np.zeros((0, 4))
        total += len(boxes)
        gts = G.as_boxes(novel.get(image_id, [])) if novel.get(image_id) else np.zeros((0, 4))
        if len(gts) == 0 or len(boxes) == 0:
            continue
        m = G.pairwise_iogt(boxes, gts)
        per_prop = m.max(axis=1)
        for t in counts:
            counts[t] += int((per_prop >= t).sum())
        best_per_gt.extend(m.max(axis=0).tolist())
    num_gt = sum(len(v) for v in novel.values())
    # novel GT in images without any stored proposal are covered at 0
    missing = sum(len(v) for k, v in novel.items() if k not in store or len(store[k]) == 0)
    best_per_gt.extend([0.0] * missing)
    mean = float(np.mean(best_per_gt)) if num_gt else None
    return IoGtReport(mean, counts, total, num_gt)


# --------------------------------------------------------------- reports

EVAL_COLUMNS = ("category", "role", "AP")
IOGT_COLUMNS = ("metric", "value")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def emit_report(result: EvalResult | IoGtReport, path, fmt: str = "csv") -> Path:
    """Serialize a result as CSV or JSON; the JSON ``rows`` mirror the CSV rows."""
    if isinstance(result, EvalResult):
        columns, rows, extra = EVAL_COLUMNS, result.rows(), {"iou_threshold": result.iou_threshold}
    elif isinstance(result, IoGtReport):
        columns, rows, extra = IOGT_COLUMNS, result.rows(), {"meta": result.meta}
    else:
        raise TypeError(f"cannot report {type(result).__name__}")
    path = Path(path)
    try:
        if fmt == "csv":
            with open(path, "w", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(columns)
                for r in rows:
                    w.writerow([_fmt(r[c]) if c in ("AP", "value") else r[c] for c in columns])
        elif fmt == "json":
            payload = dict(extra, columns=list(columns), rows=rows)
            path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    except OSError as e:
        raise OSError(f"cannot write report {path}: {e}") from e
    return path


def read_report(path) -> list[dict]:
    """Rows of a report written by :func:`emit_report` (either format), numbers as floats."""
    path = Path(path)
    text = path.read_text()
    if text.lstrip().startswith("{"):
        rows = json.loads(text)["rows"]
    else:
        rows = list(csv.DictReader(text.splitlines()))
    out = []
    for r in rows:
        row = {}
        for k, v in r.items():
            if k in ("AP", "value"):
                row[k] = None if v in ("", None) else float(v)
            else:
                row[k] = v
        out.append(row)
    return out
