# -*- coding: utf-8 -*-

import numpy as np
import pytest

from pfpn.exceptions import ContractError, DatasetValidationError
from pfpn.fusion import FusionConfig, InstancePrediction, PanopticFusion, PanopticMap, SegmentInfo
from pfpn.oracles import CATEGORY_TABLE as ORACLE_TABLE
from pfpn.oracles import Oracles
from pfpn.tensor_core import Rng
from tests.helpers import make_map

OTHER = 0


def _box(extent, top, left, bottom, right):
    mask = np.zeros(extent, dtype=bool)
    mask[top:bottom, left:right] = True
    return mask


def _config(**overrides):
    values = dict(score_threshold=0.5, keep_fraction=0.5, stuff_area_min=1, other_class_id=OTHER)
    values.update(overrides)
    return FusionConfig(**values)


def test_higher_score_claims_overlap():
    extent = (8, 8)
    low = InstancePrediction(_box(extent, 0, 0, 4, 4), 4, 0.6)
    high = InstancePrediction(_box(extent, 2, 2, 6, 6), 5, 0.9)
    resolved = PanopticFusion.resolve_instances([low, high], _config(keep_fraction=0.5), extent)
    assert [r.index for r in resolved] == [1, 0]
    assert resolved[0].area == 16
    assert resolved[1].area == 12
    assert not (resolved[0].mask & resolved[1].mask).any()


def test_keep_fraction_drops_occluded_instance():
    extent = (8, 8)
    big = InstancePrediction(_box(extent, 0, 0, 8, 8), 4, 0.9)
    small = InstancePrediction(_box(extent, 0, 0, 4, 8), 5, 0.8)
    resolved = PanopticFusion.resolve_instances([small, big], _config(keep_fraction=0.1), extent)
    assert [r.index for r in resolved] == [1]


def test_ties_break_by_area_then_order():
    extent = (6, 6)
    a = InstancePrediction(_box(extent, 0, 0, 2, 2), 4, 0.7)
    b = InstancePrediction(_box(extent, 0, 0, 3, 3), 4, 0.7)
    c = InstancePrediction(_box(extent, 4, 4, 6, 6), 5, 0.7)
    d = InstancePrediction(_box(extent, 4, 0, 6, 2), 5, 0.7)
    resolved = PanopticFusion.resolve_instances([a, b, c, d], _config(keep_fraction=0.0), extent)
    assert [r.index for r in resolved] == [1, 2, 3]


def test_score_threshold_and_empty_masks():
    extent = (4, 4)
    instances = [
        InstancePrediction(_box(extent, 0, 0, 2, 2), 4, 0.49),
        InstancePrediction(np.zeros(extent, bool), 4, 0.99),
        InstancePrediction(_box(extent, 2, 2, 4, 4), 5, 0.5),
    ]
    assert [r.index for r in PanopticFusion.resolve_instances(instances, _config(), extent)] == [2]


def test_merge_assigns_stuff_and_voids_small_regions():
    labels = np.array([[1, 1, 2, 2], [1, 1, 2, OTHER], [3, 3, 3, OTHER], [3, 3, 3, 3]])
    config = _config(stuff_area_min=4)
    panoptic = PanopticFusion.panoptic_fuse([], PanopticFusion.one_hot(labels, [OTHER, 1, 2, 3]), config,
                                            ORACLE_TABLE, channel_categories=[OTHER, 1, 2, 3])
    panoptic.validate()
    categories = {info.category_id: info.area for info in panoptic.segments.values()}
    assert categories == {1: 4, 3: 7}
    assert (panoptic.id_map[labels == 2] == 0).all()
    assert (panoptic.id_map[labels == OTHER] == 0).all()


def test_things_override_semantics_and_ids_are_sequential():
    extent = (6, 6)
    labels = np.full(extent, 1)
    labels[:, 3:] = 2
    instance = InstancePrediction(_box(extent, 1, 1, 5, 5), 4, 0.9)
    panoptic = PanopticFusion.panoptic_fuse([instance], PanopticFusion.one_hot(labels, [1, 2]), _config(),
                                            ORACLE_TABLE, channel_categories=[1, 2])
    panoptic.validate()
    assert sorted(panoptic.segments) == [1, 2, 3]
    assert panoptic.segments[1] == SegmentInfo(4, True, 16)
    assert panoptic.segments[2].category_id == 1 and panoptic.segments[3].category_id == 2
    assert (panoptic.id_map[1:5, 1:5] == 1).all()


def test_semantic_argmax_lowest_channel_wins_ties():
    probs = np.zeros((3, 2, 2))
    probs[1, 0, 0] = probs[2, 0, 0] = 0.5
    labels = PanopticFusion.semantic_labels(probs, [7, 8, 9])
    assert labels[0, 0] == 8
    assert labels[1, 1] == 7
    with pytest.raises(ContractError):
        PanopticFusion.semantic_labels(probs, [1, 2])
    with pytest.raises(ContractError):
        PanopticFusion.semantic_labels(np.zeros((2, 3, 2, 2)))


def test_merge_contract_errors():
    labels = np.ones((4, 4), dtype=int)
    with pytest.raises(ContractError):
        PanopticFusion.merge_semantic([], np.full((4, 4), 42), _config(), ORACLE_TABLE)
    resolved = PanopticFusion.resolve_instances([InstancePrediction(_box((4, 4), 0, 0, 2, 2), 1, 0.9)], _config(),
                                                (4, 4))
    with pytest.raises(ContractError):
        PanopticFusion.merge_semantic(resolved, labels, _config(), ORACLE_TABLE)
    with pytest.raises(ContractError):
        PanopticFusion.resolve_instances([InstancePrediction(np.ones((3, 3)), 4, 0.9)], _config(), (4, 4))
    with pytest.raises(ContractError):
        FusionConfig(score_threshold=1.5)


def test_fusion_properties_on_random_cases():
    rng = Rng(13)
    for _ in range(1000):
        instances, labels, config = Oracles.random_fusion_case(rng)
        extent = labels.shape
        resolved = PanopticFusion.resolve_instances(instances, config, extent)

        claimed = np.zeros(extent, dtype=bool)
        for previous, current in zip(resolved, resolved[1:]):
            assert previous.score >= current.score
        for instance in resolved:
            original = instances[instance.index].mask
            assert not (instance.mask & ~original).any()
            assert not (instance.mask & claimed).any()
            # pixels an instance lost went to instances resolved before it
            assert not (original & ~instance.mask & ~claimed).any()
            assert instance.area >= config.keep_fraction * original.sum()
            claimed |= instance.mask

        panoptic = PanopticFusion.merge_semantic(resolved, labels, config, ORACLE_TABLE)
        panoptic.validate()
        for instance in resolved:
            (segment_id,) = np.unique(panoptic.id_map[instance.mask])
            assert panoptic.segments[int(segment_id)].category_id == instance.category
        stuff = [info for info in panoptic.segments.values() if not info.is_thing]
        assert all(info.area >= config.stuff_area_min for info in stuff)
        assert len({info.category_id for info in stuff}) == len(stuff)

        previous = None
        for threshold in (0.0, 0.25, 0.5, 0.75, 1.0):
            stricter = FusionConfig(threshold, config.keep_fraction, config.stuff_area_min, OTHER)
            things = len(PanopticFusion.resolve_instances(instances, stricter, extent))
            if previous is not None:
                assert things <= previous
            previous = things


def test_decompose_round_trip():
    id_map = np.array([[1, 1, 2], [3, 3, 2], [0, 3, 2]])
    panoptic = make_map(id_map, {1: 4, 2: 1, 3: 5})
    instances, labels = PanopticFusion.decompose(panoptic, OTHER)
    assert [inst.category for inst in instances] == [4, 5]
    assert labels.tolist() == [[OTHER, OTHER, 1], [OTHER, OTHER, 1], [OTHER, OTHER, 1]]
    fused = PanopticFusion.panoptic_fuse(instances, PanopticFusion.one_hot(labels, [OTHER, 1]),
                                         _config(keep_fraction=1.0), ORACLE_TABLE, channel_categories=[OTHER, 1])
    assert fused.equivalent(panoptic)


def test_validate_flags_bad_maps():
    id_map = np.array([[1, 2], [2, 0]])
    with pytest.raises(DatasetValidationError):
        PanopticMap(id_map, {1: SegmentInfo(1, False, 1)}).validate()
    with pytest.raises(DatasetValidationError):
        PanopticMap(id_map, {1: SegmentInfo(1, False, 1), 2: SegmentInfo(2, False, 3)}).validate()
    with pytest.raises(DatasetValidationError) as err:
        PanopticMap(id_map, {1: SegmentInfo(1, False, 1), 2: SegmentInfo(2, False, 2),
                             5: SegmentInfo(3, False, 1)}).validate(image_id="img")
    assert err.value.segment_id == 5


def test_canonical_relabels_in_raster_order():
    panoptic = make_map([[7, 7, 3], [0, 3, 3]], {7: 1, 3: 4})
    id_map, infos = panoptic.canonical()
    assert id_map.tolist() == [[1, 1, 2], [0, 2, 2]]
    assert [info.category_id for info in infos] == [1, 4]


@pytest.mark.parametrize("seed", range(5))
def test_matches_brute_force(seed):
    rng = Rng(seed)
    for _ in range(40):
        instances, labels, config = Oracles.random_fusion_case(rng)
        fast = PanopticFusion.merge_semantic(
            PanopticFusion.resolve_instances(instances, config, labels.shape), labels, config, ORACLE_TABLE)
        slow = Oracles.fuse_brute_force(instances, labels, config, ORACLE_TABLE)
        np.testing.assert_array_equal(fast.id_map, slow.id_map)
        assert fast.segments == slow.segments
        fast.validate()


@pytest.mark.slow
def test_matches_brute_force_thousand_cases():
    rng = Rng(1234)
    for _ in range(1000):
        assert Oracles._fusion_case(rng) == 0.0
