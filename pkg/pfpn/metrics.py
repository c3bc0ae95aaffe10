# -*- coding: utf-8 -*-

"""
metrics.py: Panoptic and Semantic Quality Metrics

This module provides the panoptic quality family (PQ, SQ, RQ, overall and split into
thing and stuff categories) and the confusion-matrix based semantic metrics (per class
IoU, mIoU and frequency weighted fIoU).

Segment matching follows the reference panoptic protocol: a predicted and a ground-truth
segment match when they share a category and their IoU exceeds 0.5, where pixels void
in the ground truth are left out of the union. Crowd segments never match; an unmatched
prediction mostly covering void or a same-category crowd region is not a false positive.
All reported values are percentages.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
from tabulate import tabulate

from pfpn.exceptions import ContractError, DegenerateInputError
from pfpn.fusion import PanopticMap
from pfpn.utils import Utils

__all__ = [
    "PqStatCat",
    "PqStats",
    "PqReport",
    "ConfusionMatrix",
    "MiouReport",
    "Metrics",
]

logger = logging.getLogger(__name__)

OFFSET = 256 * 256 * 256
VOID = 0
MATCH_IOU = 0.5


@dataclass
class PqStatCat:
    """Per-category tallies: sum of matched IoUs and TP / FP / FN counts."""

    iou: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __iadd__(self, other: "PqStatCat") -> "PqStatCat":
        self.iou += other.iou
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    @property
    def present(self) -> bool:
        return self.tp + self.fp + self.fn > 0

    @property
    def sq(self) -> float:
        return self.iou / self.tp if self.tp else 0.0

    @property
    def rq(self) -> float:
        denominator = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.tp / denominator if denominator else 0.0

    @property
    def pq(self) -> float:
        denominator = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.iou / denominator if denominator else 0.0


class PqStats:
    """Category id -> PqStatCat; additive across images."""

    def __init__(self, per_category: Optional[Mapping[int, PqStatCat]] = None) -> None:
        self.per_category: Dict[int, PqStatCat] = defaultdict(PqStatCat)
        for category, stat in (per_category or {}).items():
            self.per_category[category] += stat

    def __getitem__(self, category: int) -> PqStatCat:
        return self.per_category[category]

    def __iadd__(self, other: "PqStats") -> "PqStats":
        for category, stat in other.per_category.items():
            self.per_category[category] += stat
        return self

    def __add__(self, other: "PqStats") -> "PqStats":
        total = PqStats(self.per_category)
        total += other
        return total

    def __eq__(self, other) -> bool:
        if not isinstance(other, PqStats):
            return NotImplemented
        mine = {k: v for k, v in self.per_category.items() if v.present}
        theirs = {k: v for k, v in other.per_category.items() if v.present}
        if mine.keys() != theirs.keys():
            return False
        return all(
            (a.tp, a.fp, a.fn) == (b.tp, b.fp, b.fn) and abs(a.iou - b.iou) <= 1e-9
            for a, b in ((mine[k], theirs[k]) for k in mine)
        )

    def categories(self) -> List[int]:
        return sorted(category for category, stat in self.per_category.items() if stat.present)

    def __repr__(self) -> str:
        return f"PqStats({dict(sorted(self.per_category.items()))})"


@dataclass
class PqReport:
    """
    Averages over the categories present in the stats. Unpacks as (pq, pq_th, pq_st).
    """

    pq: float
    pq_th: float
    pq_st: float
    sq: float
    sq_th: float
    sq_st: float
    rq: float
    rq_th: float
    rq_st: float
    n: int
    n_th: int
    n_st: int
    per_category: List[dict] = field(default_factory=list)

    def __iter__(self):
        return iter((self.pq, self.pq_th, self.pq_st))


@dataclass
class MiouReport:
    """Unpacks as (miou, fiou, per_class)."""

    miou: float
    fiou: float
    per_class: Dict[int, float]

    def __iter__(self):
        return iter((self.miou, self.fiou, self.per_class))


class ConfusionMatrix:
    """
    Pixel tallies, prediction x ground truth.

    Attributes:
        counts (np.ndarray): (K, K) int64; counts[p, g] pixels predicted p with ground truth g.
        missed (np.ndarray): (K,) int64 ground-truth pixels whose prediction is void or out
            of range; they count against recall only.
        classes (list): Category id of every index, for reporting.
    """

    def __init__(self, num_classes: int, classes: Optional[Sequence[int]] = None) -> None:
        if num_classes < 1:
            raise ContractError(f"confusion matrix needs at least one class, got {num_classes}")
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.missed = np.zeros(num_classes, dtype=np.int64)
        self.classes = list(classes) if classes is not None else list(range(num_classes))
        if len(self.classes) != num_classes:
            raise ContractError(f"{len(self.classes)} class ids given for {num_classes} classes")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum() + self.missed.sum())

    def update(self, pred: np.ndarray, gt: np.ndarray, ignore_label: int = 255) -> "ConfusionMatrix":
        """Add one image of class indices; gt pixels equal to `ignore_label` are skipped."""
        pred = np.asarray(pred, dtype=np.int64)
        gt = np.asarray(gt, dtype=np.int64)
        if pred.shape != gt.shape:
            raise ContractError(f"prediction shape {pred.shape} does not match ground truth shape {gt.shape}")
        k = self.num_classes
        valid = (gt != ignore_label) & (gt >= 0)
        if np.any(gt[valid] >= k):
            raise ContractError(f"ground truth labels must be < {k} or {ignore_label}")
        in_range = valid & (pred >= 0) & (pred < k)
        self.counts += np.bincount(pred[in_range] * k + gt[in_range], minlength=k * k).reshape(k, k)
        self.missed += np.bincount(gt[valid & ~in_range], minlength=k)
        return self

    def __iadd__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise ContractError(f"cannot add confusion matrices of shapes {self.counts.shape} and {other.counts.shape}")
        self.counts += other.counts
        self.missed += other.missed
        return self

    @classmethod
    def from_labels(cls, pred, gt, num_classes: int, ignore_label: int = 255) -> "ConfusionMatrix":
        return cls(num_classes).update(pred, gt, ignore_label)

    @classmethod
    def from_panoptic(cls, pred: PanopticMap, gt: PanopticMap, categories: Sequence[int]) -> "ConfusionMatrix":
        """
        Semantic confusion between two panoptic maps over `categories`. Void ground-truth
        pixels are ignored; void predictions count as missed ground-truth pixels.
        """
        categories = list(categories)
        index = {category: i for i, category in enumerate(categories)}

        def to_index(panoptic: PanopticMap) -> np.ndarray:
            out = np.full(panoptic.extent, -1, dtype=np.int64)
            for segment_id, info in panoptic.segments.items():
                if info.category_id not in index:
                    raise ContractError(f"category {info.category_id} is not among the evaluated categories")
                out[panoptic.id_map == segment_id] = index[info.category_id]
            return out

        return cls(len(categories), categories).update(to_index(pred), to_index(gt), ignore_label=-1)


class Metrics:
    """
    A class containing the panoptic and semantic metric functions.

    Methods:
        pq_match(pred, gt):
            Per-category TP / FP / FN and matched IoU sums for one image.
        compute_pq(stats, category_table):
            PQ, SQ and RQ overall and for things / stuff.
        compute_miou(cm):
            Per class IoU, mIoU and fIoU.
        evaluate(pairs, category_table):
            Both of the above over a sequence of (pred, gt) maps.
    """

    @staticmethod
    def pq_match(pred: PanopticMap, gt: PanopticMap) -> PqStats:
        """
        Match the segments of one image.

        Args:
            pred: Predicted map.
            gt: Ground-truth map; crowd segments are flagged in its segment table.

        Returns:
            PqStats for every category touched by either map.
        """
        if pred.extent != gt.extent:
            raise ContractError(f"prediction extent {pred.extent} does not match ground truth extent {gt.extent}")

        combined = gt.id_map.astype(np.uint64) * np.uint64(OFFSET) + pred.id_map.astype(np.uint64)
        pairs, counts = np.unique(combined, return_counts=True)
        intersections = {(int(p) // OFFSET, int(p) % OFFSET): int(c) for p, c in zip(pairs, counts)}
        pred_area = defaultdict(int)
        gt_area = defaultdict(int)
        for (gt_id, pred_id), count in intersections.items():
            pred_area[pred_id] += count
            gt_area[gt_id] += count

        stats = PqStats()
        matched_gt, matched_pred = set(), set()
        for (gt_id, pred_id), inter in intersections.items():
            if gt_id not in gt.segments or pred_id not in pred.segments:
                continue
            g, p = gt.segments[gt_id], pred.segments[pred_id]
            if g.iscrowd or g.category_id != p.category_id:
                continue
            union = pred_area[pred_id] + gt_area[gt_id] - inter - intersections.get((VOID, pred_id), 0)
            iou = inter / union
            if iou > MATCH_IOU:
                stats[g.category_id].tp += 1
                stats[g.category_id].iou += iou
                matched_gt.add(gt_id)
                matched_pred.add(pred_id)

        crowd_by_category = defaultdict(list)
        for gt_id, g in gt.segments.items():
            if gt_id in matched_gt:
                continue
            if g.iscrowd:
                crowd_by_category[g.category_id].append(gt_id)
            else:
                stats[g.category_id].fn += 1

        for pred_id, p in pred.segments.items():
            if pred_id in matched_pred:
                continue
            excused = intersections.get((VOID, pred_id), 0)
            excused += sum(intersections.get((crowd_id, pred_id), 0) for crowd_id in crowd_by_category[p.category_id])
            if excused / pred_area[pred_id] > MATCH_IOU:
                continue
            stats[p.category_id].fp += 1
        return stats

    @staticmethod
    def compute_pq(stats: PqStats, category_table: Mapping[int, bool]) -> PqReport:
        """
        Average per-category PQ / SQ / RQ over categories with at least one TP, FP or FN.

        A category absent from the ground truth but predicted somewhere still counts, with
        PQ 0, as in the reference panoptic protocol; a category seen in neither is left out.

        Args:
            stats: Accumulated stats.
            category_table: category id -> is_thing.

        Returns:
            PqReport in percent; a thing or stuff subset with no categories reports 0.0.

        Raises:
            DegenerateInputError: no category is present at all.
        """
        unknown = [category for category in stats.categories() if category not in category_table]
        if unknown:
            raise ContractError(f"stats contain categories missing from the category table: {unknown}")

        per_category = []
        for category in stats.categories():
            stat = stats[category]
            per_category.append({
                "category_id": category,
                "is_thing": bool(category_table[category]),
                "pq": 100 * stat.pq,
                "sq": 100 * stat.sq,
                "rq": 100 * stat.rq,
                "tp": stat.tp,
                "fp": stat.fp,
                "fn": stat.fn,
            })
        if not per_category:
            raise DegenerateInputError("no category is present in prediction or ground truth")

        def average(rows, key):
            return float(np.mean([row[key] for row in rows])) if rows else 0.0

        things = [row for row in per_category if row["is_thing"]]
        stuff = [row for row in per_category if not row["is_thing"]]
        return PqReport(
            pq=average(per_category, "pq"),
            pq_th=average(things, "pq"),
            pq_st=average(stuff, "pq"),
            sq=average(per_category, "sq"),
            sq_th=average(things, "sq"),
            sq_st=average(stuff, "sq"),
            rq=average(per_category, "rq"),
            rq_th=average(things, "rq"),
            rq_st=average(stuff, "rq"),
            n=len(per_category),
            n_th=len(things),
            n_st=len(stuff),
            per_category=per_category,
        )

    @staticmethod
    def compute_miou(cm: ConfusionMatrix) -> MiouReport:
        """
        IoU_c = tp_c / (tp_c + fp_c + fn_c); mIoU averages over classes with ground-truth
        pixels; fIoU weights each IoU by its class's share of ground-truth pixels.
        """
        total = cm.total
        if total == 0:
            raise DegenerateInputError("confusion matrix has no evaluated pixels")
        tp = np.diag(cm.counts).astype(np.float64)
        predicted = cm.counts.sum(axis=1).astype(np.float64)
        actual = (cm.counts.sum(axis=0) + cm.missed).astype(np.float64)
        union = predicted + actual - tp
        with np.errstate(divide="ignore", invalid="ignore"):
            iou = np.where(union > 0, tp / union, 0.0)
        has_gt = actual > 0
        frequency = actual / total
        per_class = {cm.classes[i]: 100 * float(iou[i]) for i in np.flatnonzero(has_gt)}
        return MiouReport(
            miou=100 * float(iou[has_gt].mean()),
            fiou=100 * float((frequency * iou).sum()),
            per_class=per_class,
        )

    @staticmethod
    def evaluate(pairs: Iterable, category_table: Mapping[int, bool], threads: int = 1,
                 decode: Optional[Callable] = None) -> dict:
        """
        Evaluate (pred, gt) map pairs and build the metric report.

        Pairs are consumed lazily and the statistics are reduced as results arrive, so a
        dataset never has to fit in memory.

        Args:
            pairs: (pred, gt) PanopticMap pairs, or items that `decode` turns into them.
            category_table: category id -> is_thing.
            threads: Worker threads; decoding and matching both run on the workers.
            decode: Optional loader applied to every item on the worker.

        Returns:
            {pq, pq_th, pq_st, sq, rq, miou, fiou, images, per_category: [...]}
        """
        categories = sorted(category_table)

        def one_image(item):
            pred, gt = decode(item) if decode is not None else item
            return Metrics.pq_match(pred, gt), ConfusionMatrix.from_panoptic(pred, gt, categories)

        stats = PqStats()
        cm = ConfusionMatrix(len(categories), categories)
        images = 0
        for image_stats, image_cm in Utils.imap(one_image, pairs, threads):
            stats += image_stats
            cm += image_cm
            images += 1
        return Metrics.report(Metrics.compute_pq(stats, category_table), Metrics.compute_miou(cm), images)

    @staticmethod
    def report(pq: PqReport, miou: MiouReport, images: int) -> dict:
        per_category = []
        for row in pq.per_category:
            row = dict(row)
            row["iou"] = miou.per_class.get(row["category_id"])
            per_category.append(row)
        return {
            "pq": pq.pq,
            "pq_th": pq.pq_th,
            "pq_st": pq.pq_st,
            "sq": pq.sq,
            "rq": pq.rq,
            "miou": miou.miou,
            "fiou": miou.fiou,
            "images": images,
            "per_category": per_category,
        }

    @staticmethod
    def format_table(report: dict) -> str:
        headers = ["", "PQ", "SQ", "RQ", "#categories"]
        things = [row for row in report["per_category"] if row["is_thing"]]
        stuff = [row for row in report["per_category"] if not row["is_thing"]]
        data = [["All", report["pq"], report["sq"], report["rq"], len(report["per_category"])]]
        for name, rows, pq in (("Things", things, report["pq_th"]), ("Stuff", stuff, report["pq_st"])):
            sq = float(np.mean([row["sq"] for row in rows])) if rows else 0.0
            rq = float(np.mean([row["rq"] for row in rows])) if rows else 0.0
            data.append([name, pq, sq, rq, len(rows)])
        table = tabulate(data, headers=headers, tablefmt="pipe", floatfmt=".3f", stralign="center", numalign="center")
        semantic = tabulate([[report["miou"], report["fiou"], report["images"]]], headers=["mIoU", "fIoU", "#images"],
                            tablefmt="pipe", floatfmt=".3f", numalign="center")
        return f"{table}\n\n{semantic}"
