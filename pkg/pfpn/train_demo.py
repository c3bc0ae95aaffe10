# -*- coding: utf-8 -*-

"""
train_demo.py: Toy Joint Training

Procedurally generated scenes and a plain gradient descent loop that overfits the
semantic branch together with a linear instance probe, using the joint loss
L = lambda_i (L_c + L_b + L_m) + lambda_s L_s.

Scenes live on a lattice of 4x4 pixel cells, the resolution of the finest pyramid
level. Stuff is a Voronoi partition of the lattice; things are rectangles and ellipses
painted on top and labeled with the single `other` class in the semantic target. The
pyramid inputs are area-pooled one-hot maps of the lattice labels seen through a fixed
random projection plus a little noise.
"""

import csv
import datetime
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from pfpn.config import Config
from pfpn.exceptions import ContractError, TrainingDivergedError
from pfpn.losses import InstanceLossInputs, Losses, LossWeights, SemanticTarget
from pfpn.metrics import ConfusionMatrix, Metrics
from pfpn.panoptic_io import PanopticIO
from pfpn.semantic_branch import SCALES, BranchConfig, PyramidLevels, SemanticBranch, build_branch
from pfpn.tensor_core import Graph, Rng
from pfpn.utils import Utils

__all__ = [
    "ToyInstance",
    "ToyScene",
    "SceneGenerator",
    "TrainConfig",
    "RoiBatch",
    "InstanceProbe",
    "TrainResult",
    "DemoTrainer",
]

logger = logging.getLogger(__name__)

CELL = 4
NUM_THING_CLASSES = 2
MASK_SIZE = 4
FEATURE_DIM = 16
FEATURE_NOISE = 0.05
FEATURE_SEED = 0x5EED
DEMO_GN_GROUPS = 8
HISTORY_KEYS = ("loss", "L_c", "L_b", "L_m", "L_s", "miou")


@dataclass
class ToyInstance:
    """
    Attributes:
        mask (np.ndarray): (H, W) bool, full mask (instances may overlap).
        category (int): Thing class in [0, NUM_THING_CLASSES).
        box (tuple): (y0, x0, y1, x1) in pixels, end exclusive.
    """

    mask: np.ndarray
    category: int
    box: Tuple[int, int, int, int]


@dataclass
class ToyScene:
    """
    One synthetic image.

    Attributes:
        seed (int): Generator seed.
        num_classes (int): Stuff classes; label `num_classes` is `other`.
        lattice (np.ndarray): (H/4, W/4) labels of the lattice cells.
        semantic (np.ndarray): (H, W) semantic target.
        instances (list): ToyInstance masks, all inside the `other` region.
        features (dict): Scale -> (1, D, H/s, W/s) float32 pyramid input.
    """

    seed: int
    num_classes: int
    lattice: np.ndarray
    semantic: np.ndarray
    instances: List[ToyInstance]
    features: Dict[int, np.ndarray]

    @property
    def extent(self) -> Tuple[int, int]:
        return self.semantic.shape

    @property
    def other_label(self) -> int:
        return self.num_classes

    def pyramid(self) -> PyramidLevels:
        return PyramidLevels.from_arrays(self.features)


class SceneGenerator:
    """
    SceneGenerator: deterministic toy scenes.

    Stuff seeds: one per class at distinct lattice cells plus two extra seeds of random
    class, so every stuff class owns a Voronoi cell and is visible unless things cover
    that cell entirely. Things: 1 to 3 rectangles or ellipses, 3 to G/3 cells a side.
    """

    @staticmethod
    def generate_scene(seed: int, extent: int = 64, num_classes: int = 4, channel_dim: int = FEATURE_DIM) -> ToyScene:
        if extent < 32 or extent % 32:
            raise ContractError(f"scene extent must be a positive multiple of 32, got {extent}")
        if num_classes < 1:
            raise ContractError(f"scenes need at least one stuff class, got {num_classes}")
        rng = Rng(seed)
        grid = extent // CELL

        num_seeds = num_classes + 2
        positions = np.argsort(rng.uniform(grid * grid), kind="stable")[:num_seeds]
        seed_classes = np.concatenate([np.arange(num_classes), rng.integers(num_seeds - num_classes, num_classes)])
        ys, xs = np.divmod(positions, grid)
        yy, xx = np.mgrid[0:grid, 0:grid]
        distances = (yy[None] - ys[:, None, None]) ** 2 + (xx[None] - xs[:, None, None]) ** 2
        lattice = seed_classes[np.argmin(distances, axis=0)].astype(np.int64)

        instances = []
        count = 1 + int(rng.integers(1, 3)[0])
        largest = max(grid // 3, 3)
        for _ in range(count):
            ellipse, category = int(rng.integers(1, 2)[0]), int(rng.integers(1, NUM_THING_CLASSES)[0])
            h, w = (3 + rng.integers(2, largest - 2)).tolist()
            y0, x0 = int(rng.integers(1, grid - h + 1)[0]), int(rng.integers(1, grid - w + 1)[0])
            cells = np.zeros((grid, grid), dtype=bool)
            if ellipse:
                cy, cx = y0 + h / 2, x0 + w / 2
                inside = ((yy + 0.5 - cy) / (h / 2)) ** 2 + ((xx + 0.5 - cx) / (w / 2)) ** 2 <= 1.0
                cells |= inside
            else:
                cells[y0:y0 + h, x0:x0 + w] = True
            mask = np.kron(cells, np.ones((CELL, CELL), dtype=bool))
            box = (y0 * CELL, x0 * CELL, (y0 + h) * CELL, (x0 + w) * CELL)
            instances.append(ToyInstance(mask, category, box))
            lattice[cells] = num_classes

        semantic = np.kron(lattice, np.ones((CELL, CELL), dtype=np.int64))
        features = SceneGenerator.features(lattice, num_classes + 1, channel_dim, rng)
        return ToyScene(seed, num_classes, lattice, semantic, instances, features)

    @staticmethod
    def projection(num_labels: int, channel_dim: int) -> np.ndarray:
        """Fixed (channel_dim, num_labels) projection shared by every scene."""
        return Rng(FEATURE_SEED).normal(channel_dim * num_labels).reshape(channel_dim, num_labels)

    @staticmethod
    def features(lattice: np.ndarray, num_labels: int, channel_dim: int, rng: Rng) -> Dict[int, np.ndarray]:
        grid = lattice.shape[0]
        one_hot = (lattice[None] == np.arange(num_labels)[:, None, None]).astype(np.float64)
        projection = SceneGenerator.projection(num_labels, channel_dim)
        features = {}
        for scale in SCALES:
            k = scale // CELL
            size = grid // k
            pooled = one_hot.reshape(num_labels, size, k, size, k).mean(axis=(2, 4))
            noise = FEATURE_NOISE * rng.normal(channel_dim * size * size).reshape(channel_dim, size, size)
            features[scale] = (np.einsum("dc,chw->dhw", projection, pooled) + noise)[None].astype(np.float32)
        return features

    @staticmethod
    def generate_batch(seed: int, count: int, extent: int = 64, num_classes: int = 4,
                       channel_dim: int = FEATURE_DIM, threads: int = 1) -> List[ToyScene]:
        """Scenes seeded seed, seed + 1, ...; generation order does not affect the result."""
        return Utils.parallel_map(
            lambda s: SceneGenerator.generate_scene(s, extent, num_classes, channel_dim),
            range(seed, seed + count),
            threads,
        )


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    learning_rate: float = 0.1
    lambda_i: float = 1.0
    lambda_s: float = 1.0
    seed: int = 0
    extent: int = 64
    num_classes: int = 4
    width: int = 32
    num_scenes: int = 1
    train_probe: bool = True

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ContractError(f"steps must be >= 1, got {self.steps}")
        if not self.learning_rate > 0:
            raise ContractError(f"learning rate must be positive, got {self.learning_rate}")
        if self.num_scenes < 1:
            raise ContractError(f"need at least one scene, got {self.num_scenes}")
        LossWeights(self.lambda_i, self.lambda_s)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_i, self.lambda_s)

    @classmethod
    def from_config(cls, config: Config, **overrides) -> "TrainConfig":
        values = dict(
            steps=config.TRAIN_STEPS,
            learning_rate=config.LEARNING_RATE,
            lambda_i=config.LAMBDA_I,
            lambda_s=config.LAMBDA_S,
            seed=config.SEED,
            extent=config.SCENE_EXTENT,
            num_classes=config.SCENE_CLASSES,
            width=config.DEMO_WIDTH,
        )
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**values)

    def branch_config(self) -> BranchConfig:
        return BranchConfig(
            num_classes=self.num_classes,
            branch_width=self.width,
            include_other_class=True,
            channel_dim=FEATURE_DIM,
            gn_groups=DEMO_GN_GROUPS,
            seed=self.seed,
        )


@dataclass
class RoiBatch:
    """
    Sampled RoIs of a set of scenes, foreground RoIs first.

    Attributes:
        features (np.ndarray): (R, D + 1) mean 1/4-level feature per RoI with a trailing 1.
        class_targets (np.ndarray): (R,) 0 for background, thing class + 1 otherwise.
        box_targets (np.ndarray): (R_fg, 4) normalized offsets of the object box from its RoI.
        mask_targets (np.ndarray): (R_fg, M, M) binary masks sampled inside the RoI.
    """

    features: np.ndarray
    class_targets: np.ndarray
    box_targets: np.ndarray
    mask_targets: np.ndarray

    @property
    def num_foreground(self) -> int:
        return self.box_targets.shape[0]


class InstanceProbe:
    """
    Linear stand-in for the instance branch: class scores, box deltas and mask logits
    are affine functions of the mean 1/4-level feature inside each RoI. Starts at zero.

    The probe reads the scene pyramid, not branch features, so the instance terms never
    reach the branch. By default its weights take the same SGD steps as the branch and
    lambda_i scales their updates; with `trainable=False` the weights stay at zero and
    the instance terms are constant.
    """

    def __init__(self, channel_dim: int = FEATURE_DIM, num_things: int = NUM_THING_CLASSES,
                 mask_size: int = MASK_SIZE, trainable: bool = True) -> None:
        self.mask_size = mask_size
        self.trainable = trainable
        self.weights = {
            "class": np.zeros((channel_dim + 1, num_things + 1)),
            "box": np.zeros((channel_dim + 1, 4)),
            "mask": np.zeros((channel_dim + 1, mask_size * mask_size)),
        }
        self.grads: Dict[str, np.ndarray] = {}

    @staticmethod
    def sample_rois(scenes: Sequence[ToyScene], mask_size: int = MASK_SIZE) -> RoiBatch:
        """
        Foreground RoIs: every object box grown by one cell. Background RoIs: 4x4-cell
        windows on a 4-cell stride clear of things, up to one per object.
        """
        fg, bg = [], []
        for scene in scenes:
            fine = scene.features[CELL][0].astype(np.float64)
            grid = scene.lattice.shape[0]
            other = scene.lattice == scene.other_label

            def pooled(y0, x0, y1, x1):
                return np.append(fine[:, y0:y1, x0:x1].mean(axis=(1, 2)), 1.0)

            for instance in scene.instances:
                gy0, gx0, gy1, gx1 = (v // CELL for v in instance.box)
                y0, x0, y1, x1 = max(gy0 - 1, 0), max(gx0 - 1, 0), min(gy1 + 1, grid), min(gx1 + 1, grid)
                h, w = y1 - y0, x1 - x0
                deltas = [(gy0 - y0) / h, (gx0 - x0) / w, (gy1 - y1) / h, (gx1 - x1) / w]
                rows = y0 + ((np.arange(mask_size) + 0.5) * h / mask_size).astype(np.int64)
                cols = x0 + ((np.arange(mask_size) + 0.5) * w / mask_size).astype(np.int64)
                cells = instance.mask[::CELL, ::CELL]
                fg.append((pooled(y0, x0, y1, x1), instance.category + 1, deltas, cells[np.ix_(rows, cols)]))

            windows = [(y, x) for y in range(0, grid - 3, 4) for x in range(0, grid - 3, 4)
                       if not other[y:y + 4, x:x + 4].any()]
            bg += [pooled(y, x, y + 4, x + 4) for y, x in windows[:len(scene.instances)]]

        features = np.array([f for f, *_ in fg] + bg)
        return RoiBatch(
            features=features,
            class_targets=np.array([c for _, c, *_ in fg] + [0] * len(bg), dtype=np.int64),
            box_targets=np.array([d for _, _, d, _ in fg], dtype=np.float64).reshape(-1, 4),
            mask_targets=np.array([m for *_, m in fg], dtype=np.float64).reshape(-1, mask_size, mask_size),
        )

    def loss_inputs(self, rois: RoiBatch) -> InstanceLossInputs:
        foreground = rois.features[:rois.num_foreground]
        return InstanceLossInputs(
            class_logits=rois.features @ self.weights["class"],
            class_targets=rois.class_targets,
            box_deltas_pred=foreground @ self.weights["box"],
            box_deltas_target=rois.box_targets,
            mask_logits=(foreground @ self.weights["mask"]).reshape(-1, self.mask_size, self.mask_size),
            mask_targets=rois.mask_targets,
        )

    def backward(self, rois: RoiBatch, grads: Dict[str, np.ndarray]) -> None:
        """Store weight gradients given the (lambda-scaled) loss gradients of the probe outputs."""
        foreground = rois.features[:rois.num_foreground]
        self.grads = {
            "class": rois.features.T @ grads["class_logits"],
            "box": foreground.T @ grads["box_deltas"],
            "mask": foreground.T @ grads["mask_logits"].reshape(len(foreground), -1),
        }

    def step(self, learning_rate: float) -> None:
        if not self.trainable:
            return
        for name, grad in self.grads.items():
            self.weights[name] = self.weights[name] - learning_rate * grad

    def save(self, directory) -> None:
        for name, weight in self.weights.items():
            PanopticIO.write_tensor(Path(directory) / f"probe.{name}.ptsr", weight)


@dataclass
class TrainResult:
    branch: SemanticBranch
    probe: InstanceProbe
    history: Dict[str, List[float]] = field(default_factory=dict)


class DemoTrainer:
    """
    A class for overfitting the semantic branch and the instance probe on toy scenes.

    Attributes:
        config (TrainConfig): Steps, learning rate, lambdas and scene settings.
        scenes (list): The training scenes.
        branch (SemanticBranch): Trained in place.
        probe (InstanceProbe): Trained in place.
        history (dict): Per-step loss terms and training-scene mIoU.
    """

    def __init__(self, config: TrainConfig, scenes: Optional[Sequence[ToyScene]] = None, threads: int = 1) -> None:
        self.config = config
        if scenes is None:
            scenes = SceneGenerator.generate_batch(config.seed, config.num_scenes, config.extent,
                                                   config.num_classes, threads=threads)
        self.scenes = list(scenes)
        if not self.scenes:
            raise ContractError("training needs at least one scene")
        if any(scene.num_classes != config.num_classes for scene in self.scenes):
            raise ContractError(f"scenes do not have {config.num_classes} stuff classes")

        self.pyramid = PyramidLevels.from_arrays(
            {scale: np.concatenate([scene.features[scale] for scene in self.scenes]) for scale in SCALES}
        )
        self.target = SemanticTarget(np.stack([scene.semantic for scene in self.scenes]))
        self.rois = InstanceProbe.sample_rois(self.scenes)
        self.branch = build_branch(config.branch_config())
        self.probe = InstanceProbe(trainable=config.train_probe)
        self.history: Dict[str, List[float]] = defaultdict(list)
        self.output_dir: Optional[Path] = None

    def compute_gradients(self, weights: Optional[LossWeights] = None, step: int = 0) -> Tuple[dict, Dict[str, np.ndarray]]:
        """
        One forward/backward pass at the current state.

        Returns:
            The loss terms (plus mIoU of the current prediction) and the branch
            parameter gradients keyed "<parameter>.<array>".

        Raises:
            TrainingDivergedError: a loss term is not finite.
        """
        weights = weights or self.config.weights
        graph = Graph()
        logits = self.branch.logits(self.pyramid, graph)
        semantic = Losses.semantic_loss(logits, self.target)
        instance = Losses.instance_losses(self.probe.loss_inputs(self.rois))
        terms = {"L_c": instance.l_c, "L_b": instance.l_b, "L_m": instance.l_m, "L_s": semantic.loss}
        if not all(np.isfinite(value) for value in terms.values()):
            bad = next(value for value in terms.values() if not np.isfinite(value))
            raise TrainingDivergedError(step, bad)
        terms["loss"] = Losses.joint_loss(instance, semantic.loss, weights)

        grads = Losses.joint_gradients(instance, semantic, weights)
        self.branch.zero_grad()
        graph.backward(grads["semantic"], output=logits)
        self.probe.backward(self.rois, grads)

        prediction = np.argmax(logits.numpy(), axis=1)
        cm = ConfusionMatrix.from_labels(prediction, self.target.labels, self.config.num_classes + 1)
        terms["miou"] = Metrics.compute_miou(cm).miou

        branch_grads = {}
        for name, params in self.branch.named_parameters():
            for array_name, grad in params.grads():
                branch_grads[f"{name}.{array_name}"] = np.zeros(0) if grad is None else grad.copy()
        return terms, branch_grads

    def step(self, step: int = 0) -> dict:
        """Compute gradients and take one plain SGD step."""
        terms, _ = self.compute_gradients(step=step)
        lr = self.config.learning_rate
        for params in self.branch.parameters():
            for (name, value), (_, grad) in zip(params.arrays(), params.grads()):
                if grad is not None:
                    setattr(params, name, (value - lr * grad).astype(value.dtype))
        self.probe.step(lr)
        return terms

    def train(self) -> TrainResult:
        for step in range(self.config.steps):
            terms = self.step(step)
            for key in HISTORY_KEYS:
                self.history[key].append(float(terms[key]))
            if step % 50 == 0 or step == self.config.steps - 1:
                logger.info(f"step {step}: loss={terms['loss']:.5f} L_s={terms['L_s']:.5f} miou={terms['miou']:.2f}")
        return TrainResult(self.branch, self.probe, dict(self.history))

    def run(self, output_dir=None, output_root=None) -> Path:
        """
        Train and write the results.

        Writes losses.csv, parameters.txt, training.png and the checkpoint directory
        (branch + probe tensors) into `output_dir`, or into a new versioned directory
        under `output_root`.
        """
        logger.info("****************************** preparing output directory... **************")
        self.prepare_output_dir(output_dir, output_root)
        logger.info("****************************** training model... ***************************")
        self.train()
        logger.info("****************************** saving parameters... ************************")
        self.save_parameters()
        self.save_history()
        logger.info("****************************** saving plots... *****************************")
        Utils.plot_metrics(["loss", "L_s", "miou"], self.history, self.config.steps, self.output_dir)
        logger.info("****************************** saving checkpoint... ************************")
        self.save_checkpoint()
        return self.output_dir

    def prepare_output_dir(self, output_dir=None, output_root=None) -> Path:
        """Use `output_dir` as is, or create trial_demo_<date>_v<n> under `output_root`, bumping n if taken."""
        if output_dir is not None:
            self.output_dir = Path(output_dir)
            self.output_dir.mkdir(parents=True, exist_ok=True)
            return self.output_dir
        root = Path(output_root or Config().OUTPUT_DIR)
        root.mkdir(parents=True, exist_ok=True)
        today = datetime.date.today().strftime("%Y_%m_%d")
        iterator = 1
        while True:
            candidate = root / f"trial_demo_{today}_v{iterator}"
            try:
                candidate.mkdir()
            except FileExistsError:
                logger.info(f"{candidate} exists, creating another version...")
                iterator += 1
                continue
            self.output_dir = candidate
            logger.info(f"saving results at {candidate}")
            return candidate

    def save_parameters(self) -> Path:
        path = self.output_dir / "parameters.txt"
        with open(path, "w") as f:
            for key, value in asdict(self.config).items():
                f.write(f"{key.upper()}: {value}\n")
            f.write(f"NUM_PARAMETERS: {self.branch.num_parameters()}\n")
        return path

    def save_history(self) -> Path:
        """Loss curve CSV: one row per step."""
        path = self.output_dir / "losses.csv"
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(("step",) + HISTORY_KEYS)
            for step in range(len(self.history["loss"])):
                writer.writerow([step] + [repr(self.history[key][step]) for key in HISTORY_KEYS])
        return path

    def save_checkpoint(self) -> Path:
        directory = self.branch.save(self.output_dir / "checkpoint")
        self.probe.save(directory)
        return directory

    @staticmethod
    def sweep(config: TrainConfig, grid: Sequence[Tuple[float, float]], threads: int = 1) -> list:
        """
        Train a fresh model per (lambda_i, lambda_s) and report its final loss terms and
        training-scene mIoU.
        """
        scenes = SceneGenerator.generate_batch(config.seed, config.num_scenes, config.extent, config.num_classes,
                                               threads=threads)

        def runner(weights: LossWeights):
            trainer = DemoTrainer(replace(config, lambda_i=weights.lambda_i, lambda_s=weights.lambda_s), scenes)
            trainer.train()
            terms, _ = trainer.compute_gradients()
            return {key: terms[key] for key in ("L_c", "L_b", "L_m", "L_s", "miou")}

        return Losses.lambda_sweep(runner, grid)
