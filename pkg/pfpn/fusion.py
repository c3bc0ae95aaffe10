# -*- coding: utf-8 -*-

"""
fusion.py: Panoptic Inference

Merges instance predictions and a semantic label map into one non-overlapping panoptic
output in three steps:

1. resolve overlaps between instances greedily by confidence score,
2. resolve overlaps between instances and semantics in favor of instances,
3. void the stuff pixels labeled `other`, labeled with a thing class, or belonging to a
   stuff region smaller than the area threshold.

Ids are assigned instances first (in resolution order), then stuff classes in ascending
category id.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from pfpn.exceptions import ContractError, DatasetValidationError
from pfpn.tensor_core import Tensor

__all__ = [
    "SegmentInfo",
    "PanopticMap",
    "InstancePrediction",
    "ResolvedInstance",
    "FusionConfig",
    "PanopticFusion",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegmentInfo:
    category_id: int
    is_thing: bool
    area: int
    iscrowd: bool = False


@dataclass
class PanopticMap:
    """
    Per-pixel segment ids plus the segment table.

    Attributes:
        id_map (np.ndarray): (H, W) int64 ids, 0 is void.
        segments (dict): Segment id -> SegmentInfo.
    """

    id_map: np.ndarray
    segments: Dict[int, SegmentInfo]

    def __post_init__(self) -> None:
        self.id_map = np.asarray(self.id_map, dtype=np.int64)
        if self.id_map.ndim != 2:
            raise ContractError(f"id map must be (H, W), got shape {self.id_map.shape}")

    @property
    def extent(self) -> Tuple[int, int]:
        return self.id_map.shape

    def validate(self, image_id=None) -> "PanopticMap":
        """
        Check the partition invariants: ids positive and unique, every id in the map has a
        segment and vice versa, declared areas equal pixel counts.

        Raises:
            DatasetValidationError: naming the offending segment.
        """
        if self.id_map.size and self.id_map.min() < 0:
            raise DatasetValidationError(f"image {image_id}: negative segment id in id map", image_id)
        ids, counts = np.unique(self.id_map, return_counts=True)
        pixel_areas = {int(i): int(c) for i, c in zip(ids, counts) if i != 0}
        for segment_id, info in self.segments.items():
            if segment_id <= 0:
                raise DatasetValidationError(
                    f"image {image_id}: segment id {segment_id} is not positive", image_id, segment_id
                )
            if segment_id not in pixel_areas:
                raise DatasetValidationError(
                    f"image {image_id}: segment {segment_id} has no pixels", image_id, segment_id
                )
            if pixel_areas[segment_id] != info.area:
                raise DatasetValidationError(
                    f"image {image_id}: segment {segment_id} declares area {info.area} "
                    f"but covers {pixel_areas[segment_id]} pixels",
                    image_id,
                    segment_id,
                )
        for segment_id in pixel_areas:
            if segment_id not in self.segments:
                raise DatasetValidationError(
                    f"image {image_id}: id {segment_id} appears in the map but not in the segment table",
                    image_id,
                    segment_id,
                )
        return self

    def canonical(self):
        """
        Relabel segments 1..k in raster order of first appearance.

        Returns:
            (id_map, infos): the relabeled map and a tuple of SegmentInfo in new id order.
        """
        flat = self.id_map.ravel()
        ids, first, inverse = np.unique(flat, return_index=True, return_inverse=True)
        relabel = np.zeros(len(ids), dtype=np.int64)
        order = []
        for position in np.argsort(first, kind="stable"):
            if ids[position] != 0:
                order.append(int(ids[position]))
                relabel[position] = len(order)
        return relabel[inverse.ravel()].reshape(self.extent), tuple(self.segments[old_id] for old_id in order)

    def equivalent(self, other: "PanopticMap") -> bool:
        """Identity up to segment id relabeling."""
        if self.extent != other.extent:
            return False
        mine, theirs = self.canonical(), other.canonical()
        return np.array_equal(mine[0], theirs[0]) and mine[1] == theirs[1]

    def category_map(self, void_label: int = -1) -> np.ndarray:
        """(H, W) category ids, `void_label` where the map is void."""
        out = np.full(self.extent, void_label, dtype=np.int64)
        for segment_id, info in self.segments.items():
            out[self.id_map == segment_id] = info.category_id
        return out


@dataclass(frozen=True)
class InstancePrediction:
    """
    One instance from any instance segmenter.

    Attributes:
        mask (np.ndarray): (H, W) boolean mask; may be empty.
        category (int): Thing category id.
        score (float): Confidence in [0, 1].
    """

    mask: np.ndarray
    category: int
    score: float

    def __post_init__(self) -> None:
        mask = np.asarray(self.mask).astype(bool)
        if mask.ndim != 2:
            raise ContractError(f"instance mask must be (H, W), got shape {mask.shape}")
        if not np.isfinite(self.score):
            raise ContractError(f"instance score must be finite, got {self.score}")
        object.__setattr__(self, "mask", mask)

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class ResolvedInstance:
    """An instance that survived overlap resolution, restricted to the pixels it claimed."""

    index: int
    mask: np.ndarray
    category: int
    score: float

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class FusionConfig:
    """
    Attributes:
        score_threshold (float): Instances scoring below this are dropped.
        keep_fraction (float): An instance keeping less than this fraction of its mask is dropped.
        stuff_area_min (int): Stuff segments with fewer pixels become void.
        other_class_id (int or None): Semantic label of the `other` class.
    """

    score_threshold: float = 0.5
    keep_fraction: float = 0.5
    stuff_area_min: int = 4096
    other_class_id: Optional[int] = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.score_threshold <= 1.0 or not 0.0 <= self.keep_fraction <= 1.0:
            raise ContractError(
                f"score_threshold and keep_fraction must be within [0, 1], got "
                f"{self.score_threshold} and {self.keep_fraction}"
            )
        if self.stuff_area_min < 0:
            raise ContractError(f"stuff_area_min must be non-negative, got {self.stuff_area_min}")

    @classmethod
    def from_config(cls, config, other_class_id: Optional[int] = None) -> "FusionConfig":
        return cls(config.SCORE_THRESHOLD, config.KEEP_FRACTION, config.STUFF_AREA_MIN, other_class_id)


class PanopticFusion:
    """
    PanopticFusion: Instance + Semantic Merging

    Static entry points for the three merge steps and for splitting a panoptic map back
    into instances and semantics.
    """

    @staticmethod
    def resolve_instances(instances: Sequence[InstancePrediction], config: FusionConfig,
                          extent: Tuple[int, int]) -> List[ResolvedInstance]:
        """
        Greedy overlap resolution by score.

        Instances below the score threshold or with empty masks are dropped; the rest are
        visited by descending score, then descending mask area, then input order. Each one
        claims its still-unclaimed pixels and is dropped if that is less than keep_fraction
        of its mask, or nothing at all.

        Args:
            instances: Predictions, all of the given extent.
            config: Thresholds.
            extent: (H, W) of the image.

        Returns:
            Surviving instances in resolution order; their masks are pairwise disjoint.
        """
        extent = tuple(extent)
        for index, instance in enumerate(instances):
            if instance.mask.shape != extent:
                raise ContractError(f"instance {index} mask has extent {instance.mask.shape}, expected {extent}")

        candidates = [
            (index, instance, instance.area)
            for index, instance in enumerate(instances)
            if instance.score >= config.score_threshold and instance.area > 0
        ]
        candidates.sort(key=lambda item: (-item[1].score, -item[2], item[0]))

        claimed = np.zeros(extent, dtype=bool)
        survivors = []
        for index, instance, area in candidates:
            visible = instance.mask & ~claimed
            kept = int(visible.sum())
            if kept == 0 or kept / area < config.keep_fraction:
                logger.debug(f"dropping instance {index}: keeps {kept} of {area} pixels")
                continue
            claimed |= visible
            survivors.append(ResolvedInstance(index, visible, instance.category, instance.score))
        return survivors

    @staticmethod
    def merge_semantic(surviving: Sequence[ResolvedInstance], semantic_labels: np.ndarray, config: FusionConfig,
                       category_table: Mapping[int, bool]) -> PanopticMap:
        """
        Paste instances over the semantic labels and cut the remainder into stuff segments.

        Args:
            surviving: Disjoint instances from `resolve_instances`.
            semantic_labels: (H, W) category ids.
            config: Thresholds and the `other` label.
            category_table: category id -> is_thing.

        Returns:
            A PanopticMap satisfying every partition invariant.
        """
        labels = np.asarray(semantic_labels, dtype=np.int64)
        if labels.ndim != 2:
            raise ContractError(f"semantic labels must be (H, W), got shape {labels.shape}")
        known = set(category_table)
        if config.other_class_id is not None:
            known.add(config.other_class_id)
        unknown = sorted(set(np.unique(labels).tolist()) - known)
        if unknown:
            raise ContractError(f"semantic labels contain unknown categories {unknown}")

        id_map = np.zeros(labels.shape, dtype=np.int64)
        segments: Dict[int, SegmentInfo] = {}
        next_id = 1
        for instance in surviving:
            if instance.mask.shape != labels.shape:
                raise ContractError(
                    f"instance {instance.index} mask has extent {instance.mask.shape}, expected {labels.shape}"
                )
            if instance.category not in category_table or not category_table[instance.category]:
                raise ContractError(f"instance {instance.index} has category {instance.category}, not a thing class")
            if np.any(id_map[instance.mask]):
                raise ContractError(f"instance {instance.index} overlaps an earlier instance")
            id_map[instance.mask] = next_id
            segments[next_id] = SegmentInfo(instance.category, True, instance.area)
            next_id += 1

        free = id_map == 0
        for category in np.unique(labels[free]).tolist():
            if category == config.other_class_id or category_table[category]:
                continue
            region = free & (labels == category)
            area = int(region.sum())
            if area < config.stuff_area_min:
                continue
            id_map[region] = next_id
            segments[next_id] = SegmentInfo(category, False, area)
            next_id += 1
        return PanopticMap(id_map, segments)

    @staticmethod
    def semantic_labels(semantic_probs, channel_categories: Optional[Sequence[int]] = None) -> np.ndarray:
        """
        Per-pixel argmax of a (C, H, W) or (1, C, H, W) distribution; the lowest channel wins
        ties. Channels are mapped to category ids through `channel_categories`.
        """
        probs = semantic_probs.data if isinstance(semantic_probs, Tensor) else np.asarray(semantic_probs)
        if probs.ndim == 4:
            if probs.shape[0] != 1:
                raise ContractError(f"fusion works on one image at a time, got batch {probs.shape[0]}")
            probs = probs[0]
        if probs.ndim != 3:
            raise ContractError(f"semantic probabilities must be (C, H, W), got shape {probs.shape}")
        channels = np.argmax(probs, axis=0)
        if channel_categories is None:
            return channels.astype(np.int64)
        lookup = np.asarray(channel_categories, dtype=np.int64)
        if lookup.shape != (probs.shape[0],):
            raise ContractError(f"{len(lookup)} channel categories given for {probs.shape[0]} channels")
        return lookup[channels]

    @staticmethod
    def panoptic_fuse(instances: Sequence[InstancePrediction], semantic_probs, config: FusionConfig,
                      category_table: Mapping[int, bool],
                      channel_categories: Optional[Sequence[int]] = None) -> PanopticMap:
        """Argmax the semantics, resolve instances, merge."""
        labels = PanopticFusion.semantic_labels(semantic_probs, channel_categories)
        surviving = PanopticFusion.resolve_instances(instances, config, labels.shape)
        panoptic = PanopticFusion.merge_semantic(surviving, labels, config, category_table)
        logger.debug(f"fused {len(instances)} instances into {len(panoptic.segments)} segments")
        return panoptic

    @staticmethod
    def decompose(panoptic: PanopticMap, other_class_id: int) -> Tuple[List[InstancePrediction], np.ndarray]:
        """
        Split a map into thing instances (score 1.0, in id order) and a semantic label map
        where thing and void pixels carry `other_class_id`.
        """
        labels = np.full(panoptic.extent, other_class_id, dtype=np.int64)
        instances = []
        for segment_id in sorted(panoptic.segments):
            info = panoptic.segments[segment_id]
            mask = panoptic.id_map == segment_id
            if info.is_thing:
                instances.append(InstancePrediction(mask, info.category_id, 1.0))
            else:
                labels[mask] = info.category_id
        return instances, labels

    @staticmethod
    def one_hot(labels: np.ndarray, channel_categories: Sequence[int]) -> np.ndarray:
        """(C, H, W) float32 one-hot distribution over `channel_categories`."""
        labels = np.asarray(labels, dtype=np.int64)
        channel_categories = np.asarray(channel_categories, dtype=np.int64)
        return (labels[None] == channel_categories[:, None, None]).astype(np.float32)
