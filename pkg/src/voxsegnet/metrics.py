"""Point-level part segmentation metrics.

Shape IoU averages per-part IoU over the category's parts; category IoU
averages shapes; the overall score weights categories by their shape count.
A part absent from both prediction and ground truth scores 1 unless
``strict`` is set, in which case it is left out of the mean.
"""

import csv
from dataclasses import dataclass, field

import numpy as np


def _validate(pred, gt, parts):
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction has {pred.size} labels, ground truth {gt.size}")
    parts = np.asarray(sorted(set(int(p) for p in parts)), dtype=np.int64)
    allowed = set(parts.tolist())
    foreign = (set(np.unique(pred).tolist()) | set(np.unique(gt).tolist())) - allowed
    if foreign:
        raise ValueError(f"labels {sorted(foreign)} are outside the part set {sorted(allowed)}")
    return pred, gt, parts


def part_ious(pred, gt, parts):
    """``{part: IoU or None}``; None marks an empty union."""
    pred, gt, parts = _validate(pred, gt, parts)
    out = {}
    for p in parts:
        inter = np.count_nonzero((pred == p) & (gt == p))
        union = np.count_nonzero((pred == p) | (gt == p))
        out[int(p)] = inter / union if union else None
    return out


def shape_iou(pred, gt, parts, strict=False):
    """Mean part IoU of one shape, in percent."""
    ious = part_ious(pred, gt, parts)
    if strict:
        vals = [v for v in ious.values() if v is not None]
        if not vals:
            raise ValueError("strict IoU undefined: no part present in prediction or ground truth")
    else:
        vals = [1.0 if v is None else v for v in ious.values()]
    return 100.0 * float(np.mean(vals))


def precision_recall(pred, gt, parts):
    """Per-part and macro precision/recall (percent); 0/0 counts as 1."""
    pred, gt, parts = _validate(pred, gt, parts)
    per_part = {}
    for p in parts:
        tp = np.count_nonzero((pred == p) & (gt == p))
        fp = np.count_nonzero((pred == p) & (gt != p))
        fn = np.count_nonzero((pred != p) & (gt == p))
        prec = tp / (tp + fp) if tp + fp else 1.0
        rec = tp / (tp + fn) if tp + fn else 1.0
        per_part[int(p)] = (prec, rec)
    macro_p = 100.0 * float(np.mean([v[0] for v in per_part.values()]))
    macro_r = 100.0 * float(np.mean([v[1] for v in per_part.values()]))
    return per_part, macro_p, macro_r


@dataclass
class ShapeResult:
    category: str
    iou: float
    precision: float = None
    recall: float = None
    shape_id: str = ""


@dataclass
class EvalReport:
    category_iou: dict
    counts: dict
    overall_iou: float
    category_precision: dict = field(default_factory=dict)
    category_recall: dict = field(default_factory=dict)
    shape_iou: dict = field(default_factory=dict)
    strict: bool = False

    def rows(self):
        """CSV rows ``category,count,miou,precision,recall`` plus a TOTAL row."""
        out = []
        for cat in sorted(self.category_iou):
            out.append([cat, self.counts[cat], _fmt(self.category_iou[cat]),
                        _fmt(self.category_precision.get(cat)),
                        _fmt(self.category_recall.get(cat))])
        total_p, total_r = self._pr_total()
        out.append(["TOTAL", sum(self.counts.values()), _fmt(self.overall_iou),
                    _fmt(total_p), _fmt(total_r)])
        return out

    def _pr_total(self):
        cats = [c for c in self.category_precision if self.category_precision[c] is not None]
        if not cats:
            return None, None
        n = sum(self.counts[c] for c in cats)
        p = sum(self.counts[c] * self.category_precision[c] for c in cats) / n
        r = sum(self.counts[c] * self.category_recall[c] for c in cats) / n
        return p, r

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["category", "count", "miou", "precision", "recall"])
            w.writerows(self.rows())


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def aggregate(results, strict=False):
    """Combine per-shape results into category means and the weighted overall IoU."""
    results = list(results)
    if not results:
        raise ValueError("cannot aggregate an empty result set")
    by_cat = {}
    for r in results:
        by_cat.setdefault(r.category, []).append(r)
    cat_iou, counts, cat_p, cat_r = {}, {}, {}, {}
    for cat, rs in by_cat.items():
        counts[cat] = len(rs)
        cat_iou[cat] = float(np.mean(sorted(r.iou for r in rs)))
        if all(r.precision is not None for r in rs):
            cat_p[cat] = float(np.mean(sorted(r.precision for r in rs)))
            cat_r[cat] = float(np.mean(sorted(r.recall for r in rs)))
    total = sum(counts.values())
    overall = sum(counts[c] * cat_iou[c] for c in sorted(cat_iou)) / total
    shapes = {r.shape_id: r.iou for r in results if r.shape_id}
    return EvalReport(cat_iou, counts, overall, cat_p, cat_r, shapes, strict)
