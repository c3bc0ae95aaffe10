# -*- coding: utf-8 -*-

"""
oracles.py: Slow Reference Implementations

Loop-by-loop versions of the kernels, a pixel-by-pixel panoptic fusion, an exhaustive
segment-pair PQ matcher and a finite-difference gradient check. `Oracles.selfcheck`
compares the fast implementations against them on seeded random cases.
"""

import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from pfpn.fusion import FusionConfig, InstancePrediction, PanopticFusion, PanopticMap, SegmentInfo
from pfpn.losses import Losses, SemanticTarget
from pfpn.metrics import VOID, PqStats, Metrics
from pfpn.semantic_branch import SCALES, BranchConfig, PyramidLevels, build_branch
from pfpn.tensor_core import (
    ConvParams,
    Graph,
    GroupNormParams,
    Rng,
    Tensor,
    bilinear_upsample,
    conv2d,
    group_norm,
)

__all__ = [
    "SuiteResult",
    "Oracles",
    "KERNEL_TOLERANCE",
    "GRADIENT_TOLERANCE",
]

logger = logging.getLogger(__name__)

KERNEL_TOLERANCE = 1e-5
GRADIENT_TOLERANCE = 1e-3
FD_STEP = 1e-3

# toy category table shared by the random fusion and PQ cases
OTHER = 0
STUFF = (1, 2, 3)
THINGS = (4, 5)
CATEGORY_TABLE = {**{c: False for c in STUFF}, **{c: True for c in THINGS}}


@dataclass
class SuiteResult:
    name: str
    passed: bool
    cases: int
    max_error: float = 0.0
    seconds: float = 0.0
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "suite": self.name,
            "passed": self.passed,
            "cases": self.cases,
            "max_error": self.max_error,
            "seconds": round(self.seconds, 3),
            "detail": self.detail,
        }


class Oracles:
    """
    Oracles: naive references and the selfcheck suites.
    """

    # kernels

    @staticmethod
    def conv2d_loop(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1, padding: int = 0,
                    dilation: int = 1) -> np.ndarray:
        n, c, h, w = x.shape
        c_out, _, k, _ = weight.shape
        span = (k - 1) * dilation + 1
        oh = (h + 2 * padding - span) // stride + 1
        ow = (w + 2 * padding - span) // stride + 1
        out = np.zeros((n, c_out, oh, ow), dtype=np.float64)
        for b in range(n):
            for o in range(c_out):
                for oy in range(oh):
                    for ox in range(ow):
                        total = float(bias[o])
                        for i in range(c):
                            for ky in range(k):
                                for kx in range(k):
                                    y = oy * stride + ky * dilation - padding
                                    xx = ox * stride + kx * dilation - padding
                                    if 0 <= y < h and 0 <= xx < w:
                                        total += float(x[b, i, y, xx]) * float(weight[o, i, ky, kx])
                        out[b, o, oy, ox] = total
        return out

    @staticmethod
    def group_norm_loop(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, groups: int, eps: float) -> np.ndarray:
        n, c, h, w = x.shape
        size = c // groups
        out = np.zeros(x.shape, dtype=np.float64)
        for b in range(n):
            for g in range(groups):
                values = [float(v) for v in x[b, g * size:(g + 1) * size].ravel()]
                mean = sum(values) / len(values)
                var = sum((v - mean) ** 2 for v in values) / len(values)
                for ch in range(g * size, (g + 1) * size):
                    for y in range(h):
                        for xx in range(w):
                            normalized = (float(x[b, ch, y, xx]) - mean) / (var + eps) ** 0.5
                            out[b, ch, y, xx] = float(gamma[ch]) * normalized + float(beta[ch])
        return out

    @staticmethod
    def bilinear_loop(x: np.ndarray, factor: int) -> np.ndarray:
        """Half-pixel bilinear resize with edge clamping."""
        n, c, h, w = x.shape
        out = np.zeros((n, c, h * factor, w * factor), dtype=np.float64)

        def taps(d, size):
            src = min(max((d + 0.5) / factor - 0.5, 0.0), size - 1)
            lo = int(np.floor(src))
            return lo, min(lo + 1, size - 1), src - lo

        for oy in range(h * factor):
            y0, y1, fy = taps(oy, h)
            for ox in range(w * factor):
                x0, x1, fx = taps(ox, w)
                out[:, :, oy, ox] = (
                    (1 - fy) * (1 - fx) * x[:, :, y0, x0] + (1 - fy) * fx * x[:, :, y0, x1]
                    + fy * (1 - fx) * x[:, :, y1, x0] + fy * fx * x[:, :, y1, x1]
                )
        return out

    # fusion and PQ

    @staticmethod
    def fuse_brute_force(instances: Sequence[InstancePrediction], labels: np.ndarray, config: FusionConfig,
                         category_table: Mapping[int, bool]) -> PanopticMap:
        """Pixel-by-pixel version of instance resolution plus semantic merge."""
        h, w = labels.shape
        order = sorted(
            (i for i, inst in enumerate(instances) if inst.score >= config.score_threshold and inst.area > 0),
            key=lambda i: (-instances[i].score, -instances[i].area, i),
        )
        id_map = [[0] * w for _ in range(h)]
        segments: Dict[int, SegmentInfo] = {}
        next_id = 1
        for i in order:
            inst = instances[i]
            free = [(y, x) for y in range(h) for x in range(w) if inst.mask[y, x] and id_map[y][x] == 0]
            if not free or len(free) / inst.area < config.keep_fraction:
                continue
            for y, x in free:
                id_map[y][x] = next_id
            segments[next_id] = SegmentInfo(inst.category, True, len(free))
            next_id += 1

        areas: Dict[int, int] = {}
        for y in range(h):
            for x in range(w):
                if id_map[y][x] == 0:
                    areas[int(labels[y, x])] = areas.get(int(labels[y, x]), 0) + 1
        for category in sorted(areas):
            if category == config.other_class_id or category_table[category] or areas[category] < config.stuff_area_min:
                continue
            for y in range(h):
                for x in range(w):
                    if id_map[y][x] == 0 and labels[y, x] == category:
                        id_map[y][x] = next_id
            segments[next_id] = SegmentInfo(category, False, areas[category])
            next_id += 1
        return PanopticMap(np.array(id_map, dtype=np.int64), segments)

    @staticmethod
    def pq_exhaustive(pred: PanopticMap, gt: PanopticMap) -> PqStats:
        """Try every (gt, pred) segment pair with boolean masks."""
        stats = PqStats()
        void = gt.id_map == VOID
        matched_gt, matched_pred = set(), set()
        for gt_id, g in gt.segments.items():
            g_mask = gt.id_map == gt_id
            for pred_id, p in pred.segments.items():
                if g.iscrowd or g.category_id != p.category_id:
                    continue
                p_mask = pred.id_map == pred_id
                inter = int((g_mask & p_mask).sum())
                union = int(g_mask.sum()) + int(p_mask.sum()) - inter - int((p_mask & void).sum())
                if union and inter / union > 0.5:
                    stats[g.category_id].tp += 1
                    stats[g.category_id].iou += inter / union
                    matched_gt.add(gt_id)
                    matched_pred.add(pred_id)
        for gt_id, g in gt.segments.items():
            if gt_id not in matched_gt and not g.iscrowd:
                stats[g.category_id].fn += 1
        for pred_id, p in pred.segments.items():
            if pred_id in matched_pred:
                continue
            p_mask = pred.id_map == pred_id
            crowd = np.zeros_like(void)
            for gt_id, g in gt.segments.items():
                if g.iscrowd and g.category_id == p.category_id:
                    crowd |= gt.id_map == gt_id
            if ((p_mask & void).sum() + (p_mask & crowd).sum()) / p_mask.sum() > 0.5:
                continue
            stats[p.category_id].fp += 1
        return stats

    # random cases

    @staticmethod
    def random_fusion_case(rng: Rng, max_extent: int = 16, max_instances: int = 4):
        h, w = (2 + rng.integers(2, max_extent - 1)).tolist()
        labels = rng.integers(h * w, 1 + max(CATEGORY_TABLE)).reshape(h, w)
        instances = []
        for _ in range(int(rng.integers(1, max_instances + 1)[0])):
            mask = rng.uniform(h * w).reshape(h, w) < rng.uniform(1)[0]
            score = float(rng.integers(1, 5)[0]) / 4
            instances.append(InstancePrediction(mask, THINGS[int(rng.integers(1, len(THINGS))[0])], score))
        config = FusionConfig(
            score_threshold=float(rng.integers(1, 3)[0]) / 4,
            keep_fraction=float(rng.uniform(1)[0]),
            stuff_area_min=int(rng.integers(1, 9)[0]),
            other_class_id=OTHER,
        )
        return instances, labels, config

    @staticmethod
    def random_panoptic_pair(rng: Rng, max_extent: int = 12, max_segments: int = 6) -> Tuple[PanopticMap, PanopticMap]:
        h, w = (2 + rng.integers(2, max_extent - 1)).tolist()
        categories = sorted(CATEGORY_TABLE)

        def random_map(crowd: bool) -> PanopticMap:
            count = 1 + int(rng.integers(1, max_segments)[0])
            id_map = rng.integers(h * w, count + 1).reshape(h, w)
            segment_categories = rng.integers(count, len(categories))
            crowds = rng.uniform(count) < (0.2 if crowd else 0.0)
            segments = {}
            for segment_id in range(1, count + 1):
                area = int((id_map == segment_id).sum())
                if area:
                    category = categories[int(segment_categories[segment_id - 1])]
                    segments[segment_id] = SegmentInfo(category, CATEGORY_TABLE[category], area,
                                                       bool(crowds[segment_id - 1]))
            return PanopticMap(id_map, segments)

        gt = random_map(crowd=True)
        # half of the predictions perturb the ground truth instead of being independent
        if rng.uniform(1)[0] < 0.5:
            flips = rng.uniform(h * w).reshape(h, w) < 0.2
            id_map = np.where(flips, 0, gt.id_map)
            segments = {}
            for segment_id, info in gt.segments.items():
                area = int((id_map == segment_id).sum())
                if area:
                    segments[segment_id] = SegmentInfo(info.category_id, info.is_thing, area)
            return PanopticMap(id_map, segments), gt
        return random_map(crowd=False), gt

    # gradient check

    @staticmethod
    def gradient_check(seed: int = 0, extent: int = 32, width: int = 8, num_classes: int = 4, channel_dim: int = 8,
                       samples: int = 6, aggregation: str = "sum") -> float:
        """
        Compare backprop gradients of the semantic loss with central differences on a
        float64 branch.

        Returns:
            The largest relative error ||a - fd|| / max(||a||, ||fd||) over the sampled
            entries of any parameter array.
        """
        rng = Rng(seed)
        config = BranchConfig(num_classes, width, aggregation, True, channel_dim, gn_groups=4, seed=seed)
        branch = build_branch(config, rng).astype(np.float64)
        pyramid = PyramidLevels.from_arrays(
            {s: rng.normal(channel_dim * (extent // s) ** 2).reshape(1, channel_dim, extent // s, extent // s)
             for s in SCALES},
            dtype=np.float64,
        )
        target = SemanticTarget(rng.integers(extent * extent, config.output_channels).reshape(1, extent, extent))

        def loss() -> float:
            return Losses.semantic_loss(branch.logits(pyramid), target).loss

        graph = Graph()
        logits = branch.logits(pyramid, graph)
        branch.zero_grad()
        graph.backward(Losses.semantic_loss(logits, target).grad, output=logits)

        worst = 0.0
        for name, params in branch.named_parameters():
            for (field, array), (_, grad) in zip(params.arrays(), params.grads()):
                flat = array.reshape(-1)
                picks = rng.integers(samples, flat.size)
                analytic, numeric = [], []
                for index in picks:
                    original = flat[index]
                    flat[index] = original + FD_STEP
                    up = loss()
                    flat[index] = original - FD_STEP
                    down = loss()
                    flat[index] = original
                    numeric.append((up - down) / (2 * FD_STEP))
                    analytic.append(grad.reshape(-1)[index])
                analytic, numeric = np.array(analytic), np.array(numeric)
                scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
                error = float(np.linalg.norm(analytic - numeric) / scale)
                logger.debug(f"{name}.{field}: relative error {error:.2e}")
                worst = max(worst, error)
        return worst

    # suites

    @staticmethod
    def _kernel_case(rng: Rng, kind: str) -> float:
        n, c, h, w = 1 + int(rng.integers(1, 2)[0]), 4, *(5 + rng.integers(2, 4)).tolist()
        x = rng.uniform(n * c * h * w, -1, 1).reshape(n, c, h, w).astype(np.float32)
        tensor = Tensor(x)
        if kind == "conv2d":
            k = (1, 3)[int(rng.integers(1, 2)[0])]
            c_out = 1 + int(rng.integers(1, 4)[0])
            stride, dilation = 1 + int(rng.integers(1, 2)[0]), 1 + int(rng.integers(1, 2)[0])
            padding = int(rng.integers(1, 2)[0]) * ((k - 1) * dilation // 2)
            weight = rng.uniform(c_out * c * k * k, -1, 1).reshape(c_out, c, k, k).astype(np.float32)
            params = ConvParams(weight, rng.uniform(c_out, -1, 1).astype(np.float32), stride, padding, dilation)
            fast = conv2d(tensor, params).numpy()
            slow = Oracles.conv2d_loop(x, params.weight, params.bias, stride, padding, dilation)
        elif kind == "group_norm":
            groups = (1, 2, 4)[int(rng.integers(1, 3)[0])]
            params = GroupNormParams(groups, rng.uniform(c, 0.5, 1.5), rng.uniform(c, -1, 1))
            fast = group_norm(tensor, params).numpy()
            slow = Oracles.group_norm_loop(x, params.gamma, params.beta, groups, params.eps)
        else:
            factor = (2, 4)[int(rng.integers(1, 2)[0])]
            fast = bilinear_upsample(tensor, factor).numpy()
            slow = Oracles.bilinear_loop(x, factor)
        return float(np.abs(fast.astype(np.float64) - slow).max())

    @staticmethod
    def _fusion_case(rng: Rng) -> float:
        instances, labels, config = Oracles.random_fusion_case(rng)
        fast = PanopticFusion.merge_semantic(
            PanopticFusion.resolve_instances(instances, config, labels.shape), labels, config, CATEGORY_TABLE
        )
        slow = Oracles.fuse_brute_force(instances, labels, config, CATEGORY_TABLE)
        same = np.array_equal(fast.id_map, slow.id_map) and fast.segments == slow.segments
        return 0.0 if same else 1.0

    @staticmethod
    def _pq_case(rng: Rng) -> float:
        pred, gt = Oracles.random_panoptic_pair(rng)
        return 0.0 if Metrics.pq_match(pred, gt) == Oracles.pq_exhaustive(pred, gt) else 1.0

    @staticmethod
    def run_suite(name: str, case: Callable[[Rng], float], cases: int, seed: int, tolerance: float) -> SuiteResult:
        rng = Rng(seed)
        start = time.perf_counter()
        worst, failures = 0.0, 0
        for _ in range(cases):
            error = case(rng)
            worst = max(worst, error)
            failures += error > tolerance
        result = SuiteResult(name, failures == 0, cases, worst, time.perf_counter() - start,
                             f"{failures} of {cases} cases outside {tolerance:g}" if failures else "")
        logger.info(f"{name}: {'pass' if result.passed else 'FAIL'} ({cases} cases, max error {worst:.2e})")
        return result

    @staticmethod
    def selfcheck(seed: int = 0, cases: int = 100, suites: Optional[Sequence[str]] = None) -> List[SuiteResult]:
        """
        Run the oracle suites.

        Args:
            seed: Seed of every suite's case stream.
            cases: Random cases per suite (the gradient suite runs once).
            suites: Subset of conv2d, group_norm, bilinear_upsample, gradient, fusion, pq.
        """
        available = {
            "conv2d": lambda: Oracles.run_suite("conv2d", lambda r: Oracles._kernel_case(r, "conv2d"), cases, seed,
                                                KERNEL_TOLERANCE),
            "group_norm": lambda: Oracles.run_suite("group_norm", lambda r: Oracles._kernel_case(r, "group_norm"),
                                                    cases, seed, KERNEL_TOLERANCE),
            "bilinear_upsample": lambda: Oracles.run_suite(
                "bilinear_upsample", lambda r: Oracles._kernel_case(r, "bilinear"), cases, seed, KERNEL_TOLERANCE
            ),
            "gradient": lambda: Oracles.run_suite("gradient", lambda r: Oracles.gradient_check(seed), 1, seed,
                                                  GRADIENT_TOLERANCE),
            "fusion": lambda: Oracles.run_suite("fusion", Oracles._fusion_case, cases, seed, 0.0),
            "pq": lambda: Oracles.run_suite("pq", Oracles._pq_case, cases, seed, 0.0),
        }
        names = list(available) if suites is None else list(suites)
        unknown = [name for name in names if name not in available]
        if unknown:
            raise ValueError(f"unknown selfcheck suites {unknown}, expected some of {list(available)}")
        return [available[name]() for name in names]
