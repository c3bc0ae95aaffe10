# -*- coding: utf-8 -*-

"""
losses.py: Joint Panoptic Training Loss

This module provides the loss terms of joint instance + semantic training, each with
its own normalization:

* L_c, classification cross entropy over the R sampled RoIs, divided by R
* L_b, smooth-L1 (transition 1.0) box regression summed over the 4 coordinates of the
  foreground RoIs, divided by R
* L_m, per-pixel binary cross entropy of the mask logits, averaged per foreground RoI,
  then divided by R_fg
* L_s, per-pixel cross entropy of the semantic branch, divided by the number of labeled
  (non-ignored) pixels

and their combination L = lambda_i (L_c + L_b + L_m) + lambda_s L_s. Every term also
returns its gradient with respect to its inputs; the CSV writer and sweep runner cover
lambda grid searches.
"""

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from pfpn.exceptions import ContractError, DegenerateInputError
from pfpn.tensor_core import Tensor

__all__ = [
    "IGNORE_LABEL",
    "SemanticTarget",
    "InstanceLossInputs",
    "LossWeights",
    "SemanticLossResult",
    "InstanceLossResult",
    "SweepRow",
    "Losses",
]

logger = logging.getLogger(__name__)

IGNORE_LABEL = 255
SMOOTH_L1_BETA = 1.0
SWEEP_COLUMNS = ["lambda_i", "lambda_s", "L_c", "L_b", "L_m", "L_s", "L"]


@dataclass
class SemanticTarget:
    """
    Attributes:
        labels (np.ndarray): (n, H, W) integer class map.
        ignore_label (int): Label whose pixels carry no loss.
    """

    labels: np.ndarray
    ignore_label: int = IGNORE_LABEL

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim == 2:
            self.labels = self.labels[None]
        if self.labels.ndim != 3:
            raise ContractError(f"semantic labels must be (n, H, W), got shape {self.labels.shape}")

    @property
    def labeled(self) -> np.ndarray:
        return self.labels != self.ignore_label


@dataclass
class InstanceLossInputs:
    """
    Loss inputs of the instance branch for one minibatch of sampled RoIs.

    Attributes:
        class_logits (np.ndarray): (R, K + 1), column 0 is background.
        class_targets (np.ndarray): (R,) labels in [0, K].
        box_deltas_pred (np.ndarray): (R_fg, 4).
        box_deltas_target (np.ndarray): (R_fg, 4).
        mask_logits (np.ndarray): (R_fg, M, M) logits of the target-class mask.
        mask_targets (np.ndarray): (R_fg, M, M) binary.
    """

    class_logits: np.ndarray
    class_targets: np.ndarray
    box_deltas_pred: np.ndarray
    box_deltas_target: np.ndarray
    mask_logits: np.ndarray
    mask_targets: np.ndarray

    def __post_init__(self) -> None:
        self.class_logits = np.asarray(self.class_logits, dtype=np.float64)
        self.class_targets = np.asarray(self.class_targets, dtype=np.int64)
        self.box_deltas_pred = np.asarray(self.box_deltas_pred, dtype=np.float64).reshape(-1, 4)
        self.box_deltas_target = np.asarray(self.box_deltas_target, dtype=np.float64).reshape(-1, 4)
        self.mask_logits = np.asarray(self.mask_logits, dtype=np.float64)
        self.mask_targets = np.asarray(self.mask_targets, dtype=np.float64)

        if self.class_logits.ndim != 2 or self.class_targets.shape != (self.class_logits.shape[0],):
            raise ContractError(
                f"class logits {self.class_logits.shape} and targets {self.class_targets.shape} disagree"
            )
        if self.class_targets.size and (self.class_targets.min() < 0 or self.class_targets.max() >= self.class_logits.shape[1]):
            raise ContractError(f"class targets must be within [0, {self.class_logits.shape[1]})")
        r_fg = self.box_deltas_pred.shape[0]
        if self.box_deltas_target.shape != self.box_deltas_pred.shape:
            raise ContractError(
                f"box deltas {self.box_deltas_pred.shape} and targets {self.box_deltas_target.shape} disagree"
            )
        if r_fg > self.num_sampled_rois:
            raise ContractError(f"{r_fg} foreground RoIs exceed {self.num_sampled_rois} sampled RoIs")
        if r_fg == 0 and self.mask_logits.ndim != 3 and self.mask_logits.size == 0:
            self.mask_logits = self.mask_logits.reshape(0, 1, 1)
            self.mask_targets = self.mask_targets.reshape(0, 1, 1)
        if self.mask_logits.ndim != 3 or self.mask_logits.shape[0] != r_fg or self.mask_targets.shape != self.mask_logits.shape:
            raise ContractError(
                f"mask logits {self.mask_logits.shape} and targets {self.mask_targets.shape} must be ({r_fg}, M, M)"
            )
        if not np.all((self.mask_targets == 0) | (self.mask_targets == 1)):
            raise ContractError("mask targets must be binary")

    @property
    def num_sampled_rois(self) -> int:
        return self.class_logits.shape[0]

    @property
    def num_foreground_rois(self) -> int:
        return self.box_deltas_pred.shape[0]


@dataclass(frozen=True)
class LossWeights:
    lambda_i: float = 1.0
    lambda_s: float = 1.0

    def __post_init__(self) -> None:
        for name in ("lambda_i", "lambda_s"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ContractError(f"{name} must be finite and non-negative, got {value}")


@dataclass
class SemanticLossResult:
    loss: float
    grad: np.ndarray
    num_labeled: int


@dataclass
class InstanceLossResult:
    """Unpacks as (l_c, l_b, l_m)."""

    l_c: float
    l_b: float
    l_m: float
    grad_class_logits: np.ndarray
    grad_box_deltas: np.ndarray
    grad_mask_logits: np.ndarray

    def __iter__(self):
        return iter((self.l_c, self.l_b, self.l_m))


@dataclass
class SweepRow:
    lambda_i: float
    lambda_s: float
    l_c: float = float("nan")
    l_b: float = float("nan")
    l_m: float = float("nan")
    l_s: float = float("nan")
    loss: float = float("nan")
    metrics: Dict[str, float] = field(default_factory=dict)
    error: Optional[str] = None


def _log_softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


class Losses:
    """
    Losses: the joint loss terms, their combination and lambda sweeps.
    """

    @staticmethod
    def semantic_loss(input, target: SemanticTarget, from_probs: bool = False) -> SemanticLossResult:
        """
        Per-pixel cross entropy over labeled pixels.

        Args:
            input: (n, C, H, W) logits, or probabilities when `from_probs` is set.
            target: Labels with the ignore convention.
            from_probs: Treat `input` as a softmax output.

        Returns:
            The loss and its gradient with respect to `input`; ignored pixels get zero
            gradient.

        Raises:
            DegenerateInputError: every pixel is ignored.
        """
        values = input.data if isinstance(input, Tensor) else np.asarray(input)
        values = values.astype(np.float64)
        if values.ndim != 4:
            raise ContractError(f"semantic input must be (n, C, H, W), got shape {values.shape}")
        n, c, h, w = values.shape
        labels = target.labels
        if labels.shape != (n, h, w):
            raise ContractError(f"semantic input shape {values.shape} does not match labels shape {labels.shape}")
        labeled = target.labeled
        num_labeled = int(labeled.sum())
        if num_labeled == 0:
            raise DegenerateInputError("every pixel carries the ignore label")
        if np.any(labels[labeled] < 0) or np.any(labels[labeled] >= c):
            raise ContractError(f"labels must be < {c} or {target.ignore_label}")

        safe = np.where(labeled, labels, 0)
        one_hot = ((np.arange(c)[None, :, None, None] == safe[:, None]) & labeled[:, None]).astype(np.float64)
        if from_probs:
            probs = np.maximum(values, np.finfo(np.float64).tiny)
            log_probs = np.log(probs)
            grad = -one_hot / probs / num_labeled
        else:
            log_probs = _log_softmax(values, axis=1)
            grad = (np.exp(log_probs) - one_hot) * labeled[:, None] / num_labeled
        loss = -float((log_probs * one_hot).sum()) / num_labeled
        return SemanticLossResult(loss, grad, num_labeled)

    @staticmethod
    def instance_losses(inputs: InstanceLossInputs) -> InstanceLossResult:
        """
        Classification, box and mask losses with their RoI normalizations.

        With no foreground RoIs the box and mask losses are 0.

        Raises:
            DegenerateInputError: no RoI was sampled.
        """
        r = inputs.num_sampled_rois
        r_fg = inputs.num_foreground_rois
        if r == 0:
            raise DegenerateInputError("no sampled RoIs")

        log_probs = _log_softmax(inputs.class_logits, axis=1)
        one_hot = np.eye(inputs.class_logits.shape[1])[inputs.class_targets]
        l_c = -float((log_probs * one_hot).sum()) / r
        grad_class = (np.exp(log_probs) - one_hot) / r

        diff = inputs.box_deltas_pred - inputs.box_deltas_target
        small = np.abs(diff) < SMOOTH_L1_BETA
        smooth = np.where(small, 0.5 * diff ** 2 / SMOOTH_L1_BETA, np.abs(diff) - 0.5 * SMOOTH_L1_BETA)
        l_b = float(smooth.sum()) / r
        grad_box = np.where(small, diff / SMOOTH_L1_BETA, np.sign(diff)) / r

        if r_fg == 0:
            return InstanceLossResult(l_c, 0.0, 0.0, grad_class, np.zeros_like(diff), np.zeros_like(inputs.mask_logits))

        x, t = inputs.mask_logits, inputs.mask_targets
        pixels = x.shape[1] * x.shape[2]
        bce = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
        l_m = float(bce.reshape(r_fg, -1).mean(axis=1).sum()) / r_fg
        sigmoid = 0.5 * (1.0 + np.tanh(0.5 * x))
        grad_mask = (sigmoid - t) / (pixels * r_fg)
        return InstanceLossResult(l_c, l_b, l_m, grad_class, grad_box, grad_mask)

    @staticmethod
    def joint_loss(instance, semantic: float, weights: LossWeights) -> float:
        """L = lambda_i (L_c + L_b + L_m) + lambda_s L_s."""
        l_c, l_b, l_m = instance
        terms = (l_c, l_b, l_m, semantic)
        if not all(math.isfinite(term) for term in terms):
            raise ContractError(f"loss terms must be finite, got {terms}")
        return weights.lambda_i * (l_c + l_b + l_m) + weights.lambda_s * semantic

    @staticmethod
    def joint_gradients(instance: InstanceLossResult, semantic: SemanticLossResult,
                        weights: LossWeights) -> Dict[str, np.ndarray]:
        """Each branch's gradient scaled by its lambda."""
        return {
            "semantic": weights.lambda_s * semantic.grad,
            "class_logits": weights.lambda_i * instance.grad_class_logits,
            "box_deltas": weights.lambda_i * instance.grad_box_deltas,
            "mask_logits": weights.lambda_i * instance.grad_mask_logits,
        }

    @staticmethod
    def grid(values: Sequence[float], lambda_s_values: Optional[Sequence[float]] = None) -> List[Tuple[float, float]]:
        """Cartesian (lambda_i, lambda_s) grid, lambda_i varying slowest."""
        return list(itertools.product(values, values if lambda_s_values is None else lambda_s_values))

    @staticmethod
    def lambda_sweep(runner: Callable[[LossWeights], Mapping[str, float]],
                     grid: Sequence[Tuple[float, float]]) -> List[SweepRow]:
        """
        Run `runner` once per grid point.

        The runner receives the LossWeights and returns a mapping with the loss terms
        "L_c", "L_b", "L_m", "L_s"; any other keys are reported as metrics. A failing cell
        is recorded with its error and the sweep continues.

        Returns:
            One row per grid point, in grid order.
        """
        grid = list(grid)
        if not grid:
            raise ContractError("lambda grid is empty")
        rows = []
        for lambda_i, lambda_s in grid:
            row = SweepRow(float(lambda_i), float(lambda_s))
            try:
                weights = LossWeights(row.lambda_i, row.lambda_s)
                result = dict(runner(weights))
                row.l_c, row.l_b, row.l_m, row.l_s = (float(result.pop(key)) for key in ("L_c", "L_b", "L_m", "L_s"))
                row.loss = Losses.joint_loss((row.l_c, row.l_b, row.l_m), row.l_s, weights)
                row.metrics = {key: float(value) for key, value in result.items()}
            except Exception as err:
                logger.warning(f"sweep cell lambda_i={lambda_i} lambda_s={lambda_s} failed: {err}")
                row.error = f"{type(err).__name__}: {err}"
            rows.append(row)
        return rows

    @staticmethod
    def write_sweep_csv(path_or_file, rows: Iterable[SweepRow]) -> None:
        """Header: lambda_i,lambda_s,L_c,L_b,L_m,L_s,L, then metric columns, then error if any cell failed."""
        rows = list(rows)
        metric_names = []
        for row in rows:
            for name in row.metrics:
                if name not in metric_names:
                    metric_names.append(name)
        with_error = any(row.error for row in rows)
        header = SWEEP_COLUMNS + metric_names + (["error"] if with_error else [])

        def write(f):
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                values = [row.lambda_i, row.lambda_s, row.l_c, row.l_b, row.l_m, row.l_s, row.loss]
                values += [row.metrics.get(name, "") for name in metric_names]
                if with_error:
                    values.append(row.error or "")
                writer.writerow(values)

        if hasattr(path_or_file, "write"):
            write(path_or_file)
        else:
            with open(path_or_file, "w", newline="") as f:
                write(f)
