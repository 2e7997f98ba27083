"""IoU, AuROC and per-category report assembly."""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateLabelsError, EmptyInputError, ShapeError


def iou(pred, gt) -> float:
    """Intersection over union of two binary masks; 1.0 when both are empty."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties
    count one half)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ShapeError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError("AuROC needs both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class ItemResult:
    """Evaluation output for one test image."""

    key: str
    category: str
    is_anomalous: bool
    score: float
    normalized_map: np.ndarray | None = None
    pred_mask: np.ndarray | None = None
    gt_mask: np.ndarray | None = None


@dataclass
class CategoryRecord:
    category: str
    iou: float | None
    pixel_auroc: float | None
    image_auroc: float | None
    n_items: int


def category_record(items: list[ItemResult]) -> CategoryRecord:
    """Pool one category's items.

    IoU and pixel AuROC pool all pixels of the category and need a ground
    truth mask for every anomalous item; image AuROC needs both classes.
    Unavailable metrics are ``None``.
    """
    if not items:
        raise EmptyInputError("no items to score")
    category = items[0].category
    have_pixels = all(it.pred_mask is not None for it in items) and all(
        it.gt_mask is not None for it in items if it.is_anomalous)
    iou_value = pix_auc = None
    if have_pixels:
        gts = [it.gt_mask if it.gt_mask is not None else np.zeros_like(it.pred_mask)
               for it in items]
        gt = np.concatenate([g.ravel() for g in gts])
        iou_value = iou(np.concatenate([it.pred_mask.ravel() for it in items]), gt)
        if gt.any() and not gt.all():
            pix_auc = auroc(np.concatenate([it.normalized_map.ravel() for it in items]), gt)
    labels = [it.is_anomalous for it in items]
    img_auc = auroc([it.score for it in items], labels) if 0 < sum(labels) < len(labels) else None
    return CategoryRecord(category, iou_value, pix_auc, img_auc, len(items))


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


@dataclass
class EvaluationReport:
    categories: list[CategoryRecord]
    mean_iou: float | None
    mean_pixel_auroc: float | None
    mean_image_auroc: float | None
    config_fingerprint: str = ""
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        def fmt(v):
            return "   -  " if v is None else f"{v:6.3f}"

        lines = [f"{'category':<16} {'IoU':>6} {'pxAUC':>6} {'imAUC':>6} {'n':>5}"]
        for r in self.categories:
            lines.append(f"{r.category:<16} {fmt(r.iou)} {fmt(r.pixel_auroc)} "
                         f"{fmt(r.image_auroc)} {r.n_items:>5}")
        lines.append(f"{'mean':<16} {fmt(self.mean_iou)} {fmt(self.mean_pixel_auroc)} "
                     f"{fmt(self.mean_image_auroc)}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["category", "iou", "pixel_auroc", "image_auroc", "n_items"])
        for r in self.categories:
            writer.writerow([r.category, r.iou, r.pixel_auroc, r.image_auroc, r.n_items])
        return buf.getvalue()


def aggregate_report(results, config_fingerprint: str = "") -> EvaluationReport:
    """Unweighted means over categories.

    ``results`` may be per-item :class:`ItemResult` objects (grouped by
    category first) or ready :class:`CategoryRecord` objects.
    """
    results = list(results)
    if not results:
        raise EmptyInputError("nothing to aggregate")
    if isinstance(results[0], ItemResult):
        groups = defaultdict(list)
        for r in results:
            groups[r.category].append(r)
        records = [category_record(groups[c]) for c in sorted(groups)]
    else:
        records = results
    return EvaluationReport(
        categories=records,
        mean_iou=_mean(r.iou for r in records),
        mean_pixel_auroc=_mean(r.pixel_auroc for r in records),
        mean_image_auroc=_mean(r.image_auroc for r in records),
        config_fingerprint=config_fingerprint,
    )
