"""Instance-level detection / segmentation / classification scoring.

A predicted instance is a true positive when its pixel IoU with a ground
truth instance exceeds 0.5, which makes the matching unique. Per image:
P, R, DQ = |TP| / (|TP| + 0.5 (|FP| + |FN|)), SQ = mean matched IoU,
PQ = DQ * SQ. Across a test set, per-class PQ+ aggregates TP/FP/FN and
matched IoUs over all images before forming DQ and SQ, and mPQ+ averages
over the classes present in the ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .labelmap import InstanceLabelMap

IOU_THRESHOLD = 0.5


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]]   # (gt_id, pred_id, iou), iou > 0.5
    fp_ids: list[int]
    fn_ids: list[int]
    n_gt: int
    n_pred: int

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.fp_ids)

    @property
    def fn(self) -> int:
        return len(self.fn_ids)


@dataclass
class ImageMetrics:
    precision: float
    recall: float
    dq: float
    sq: float
    pq: float
    excluded: bool = False   # both maps empty: not counted in dataset means

    def as_tuple(self):
        return (self.precision, self.recall, self.dq, self.sq, self.pq)


@dataclass
class MetricsReport:
    rows: list[tuple[str, ImageMetrics]]
    per_class_pq: dict[int, float]
    mpq_plus: float

    def mean(self, attr: str) -> float:
        vals = [getattr(m, attr) for _, m in self.rows if not m.excluded]
        return float(np.mean(vals)) if vals else 0.0

    def to_csv(self) -> str:
        lines = ["image_id,P,R,DQ,SQ,PQ"]
        for image_id, m in self.rows:
            if m.excluded:
                continue
            lines.append(f"{image_id},{m.precision:.6f},{m.recall:.6f},"
                         f"{m.dq:.6f},{m.sq:.6f},{m.pq:.6f}")
        return "\n".join(lines) + "\n"

    def summary_table(self) -> str:
        """Metric columns as percentages to 2 decimals."""
        header = f"{'P':>8} {'R':>8} {'DQ':>8} {'SQ':>8} {'PQ':>8} {'mPQ+':>8}"
        vals = [self.mean("precision"), self.mean("recall"), self.mean("dq"),
                self.mean("sq"), self.mean("pq"), self.mpq_plus]
        row = " ".join(f"{100.0 * v:8.2f}" for v in vals)
        return f"{header}\n{row}"


def _overlap_table(gt: np.ndarray, pred: np.ndarray):
    """Pairwise intersection counts via a joint label histogram."""
    n_gt = int(gt.max(initial=0))
    n_pred = int(pred.max(initial=0))
    code = gt.astype(np.int64) * (n_pred + 1) + pred.astype(np.int64)
    inter = np.bincount(code.reshape(-1), minlength=(n_gt + 1) * (n_pred + 1))
    return inter.reshape(n_gt + 1, n_pred + 1), n_gt, n_pred


def match_instances(gt: InstanceLabelMap, pred: InstanceLabelMap) -> MatchResult:
    """Match instances at IoU > 0.5 on exact pixel sets."""
    if gt.labels.shape != pred.labels.shape:
        raise ConfigError(f"label map sizes differ: {gt.labels.shape} vs {pred.labels.shape}")
    inter, n_gt, n_pred = _overlap_table(gt.labels, pred.labels)
    gt_area = np.bincount(gt.labels.reshape(-1), minlength=n_gt + 1)
    pred_area = np.bincount(pred.labels.reshape(-1), minlength=n_pred + 1)

    pairs = []
    matched_gt: set[int] = set()
    matched_pred: set[int] = set()
    gs, ps = np.nonzero(inter[1:, 1:])
    for g, p in zip(gs + 1, ps + 1):
        i = inter[g, p]
        union = gt_area[g] + pred_area[p] - i
        iou = i / union
        if iou > IOU_THRESHOLD:
            # IoU > 0.5 admits at most one partner per instance
            assert g not in matched_gt and p not in matched_pred, \
                "matching at IoU > 0.5 must be unique"
            matched_gt.add(int(g))
            matched_pred.add(int(p))
            pairs.append((int(g), int(p), float(iou)))
    pairs.sort()
    present_gt = set(int(i) for i in np.unique(gt.labels) if i > 0)
    present_pred = set(int(i) for i in np.unique(pred.labels) if i > 0)
    fn_ids = sorted(present_gt - matched_gt)
    fp_ids = sorted(present_pred - matched_pred)
    return MatchResult(pairs=pairs, fp_ids=fp_ids, fn_ids=fn_ids,
                       n_gt=len(present_gt), n_pred=len(present_pred))


def image_metrics(match: MatchResult) -> ImageMetrics:
    """Per-image P/R/DQ/SQ/PQ; a both-empty image is flagged excluded."""
    tp, fp, fn = match.tp, match.fp, match.fn
    if tp + fp + fn == 0:
        return ImageMetrics(0.0, 0.0, 0.0, 0.0, 0.0, excluded=True)
    precision = tp / (tp + fp) if (tp + fp) else 0.0
    recall = tp / (tp + fn) if (tp + fn) else 0.0
    dq = tp / (tp + 0.5 * (fp + fn))
    sq = float(np.mean([iou for _, _, iou in match.pairs])) if match.pairs else 0.0
    return ImageMetrics(precision, recall, dq, sq, dq * sq)


def restrict_to_type(m: InstanceLabelMap, cell_type: int) -> InstanceLabelMap:
    """Keep only instances of one type, relabeled consecutively."""
    keep = np.zeros(m.n_instances + 1, dtype=bool)
    for i, t in m.types.items():
        if t == cell_type and 0 < i <= m.n_instances:
            keep[i] = True
    labels = np.where(keep[m.labels], m.labels, 0).astype(m.labels.dtype)
    out = InstanceLabelMap(labels, {int(i): cell_type
                                    for i in np.unique(labels) if i > 0})
    return out.renumbered()


def mpq_plus(image_pairs: list[tuple[InstanceLabelMap, InstanceLabelMap]],
             n_types: int) -> tuple[dict[int, float], float]:
    """Per-class PQ+ from counts aggregated over the whole set, and their mean.

    Classes never present in any ground-truth map are excluded from the mean.
    """
    if n_types < 1:
        raise ConfigError(f"n_types must be >= 1, got {n_types}")
    per_class: dict[int, float] = {}
    included = []
    for t in range(1, n_types + 1):
        tp = fp = fn = 0
        ious: list[float] = []
        present_in_gt = False
        for gt, pred in image_pairs:
            gt_t = restrict_to_type(gt, t)
            pred_t = restrict_to_type(pred, t)
            if gt_t.n_instances > 0:
                present_in_gt = True
            match = match_instances(gt_t, pred_t)
            tp += match.tp
            fp += match.fp
            fn += match.fn
            ious.extend(iou for _, _, iou in match.pairs)
        if tp + fp + fn == 0:
            dq = 0.0
        else:
            dq = tp / (tp + 0.5 * (fp + fn))
        sq = float(np.mean(ious)) if ious else 0.0
        per_class[t] = dq * sq
        if present_in_gt:
            included.append(dq * sq)
    mean = float(np.mean(included)) if included else 0.0
    return per_class, mean


def evaluate_dataset(named_pairs: list[tuple[str, InstanceLabelMap, InstanceLabelMap]],
                     n_types: int) -> MetricsReport:
    rows = [(name, image_metrics(match_instances(gt, pred)))
            for name, gt, pred in named_pairs]
    per_class, mean_pq = mpq_plus([(gt, pred) for _, gt, pred in named_pairs], n_types)
    return MetricsReport(rows=rows, per_class_pq=per_class, mpq_plus=mean_pq)
