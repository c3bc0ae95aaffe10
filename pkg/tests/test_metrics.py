# -*- coding: utf-8 -*-

import numpy as np
import pytest

from pfpn.exceptions import ContractError, DegenerateInputError
from pfpn.metrics import ConfusionMatrix, Metrics, PqStatCat, PqStats
from pfpn.oracles import Oracles
from pfpn.tensor_core import Rng
from tests.helpers import CATEGORY_TABLE, make_map


def test_identical_maps_score_100():
    gt = make_map([[1, 1, 2], [3, 3, 2], [3, 0, 2]], {1: 4, 2: 1, 3: 5})
    report = Metrics.evaluate([(gt, gt)], CATEGORY_TABLE)
    assert report["pq"] == pytest.approx(100.0)
    assert report["pq_th"] == pytest.approx(100.0)
    assert report["pq_st"] == pytest.approx(100.0)
    assert report["miou"] == pytest.approx(100.0)
    assert report["images"] == 1
    assert [row["category_id"] for row in report["per_category"]] == [1, 4, 5]


def test_iou_of_exactly_half_is_not_a_match():
    gt = make_map([[1, 1, 2, 2]], {1: 1, 2: 2})
    pred = make_map([[1, 1, 1, 1]], {1: 1})
    stats = Metrics.pq_match(pred, gt)
    assert (stats[1].tp, stats[1].fp, stats[1].fn) == (0, 1, 1)
    assert (stats[2].tp, stats[2].fp, stats[2].fn) == (0, 0, 1)


def test_match_iou_and_pq_factorization():
    gt = make_map([[1, 1, 1, 1], [2, 2, 2, 2]], {1: 1, 2: 4})
    pred = make_map([[1, 1, 1, 2], [2, 2, 2, 2]], {1: 1, 2: 4})
    stats = Metrics.pq_match(pred, gt)
    assert stats[1].tp == 1 and stats[1].iou == pytest.approx(0.75)
    assert stats[4].tp == 1 and stats[4].iou == pytest.approx(0.8)
    for category in (1, 4):
        assert stats[category].pq == pytest.approx(stats[category].sq * stats[category].rq)
    report = Metrics.compute_pq(stats, CATEGORY_TABLE)
    assert report.pq == pytest.approx(100 * (0.75 + 0.8) / 2)
    assert report.pq_st == pytest.approx(75.0)
    assert tuple(report) == (report.pq, report.pq_th, report.pq_st)


def test_void_pixels_do_not_count_against_predictions():
    gt = make_map([[1, 1, 0, 0], [1, 1, 0, 0]], {1: 1})
    pred = make_map([[1, 1, 1, 2], [1, 1, 1, 2]], {1: 1, 2: 2})
    stats = Metrics.pq_match(pred, gt)
    # the void overlap is removed from the union
    assert stats[1].tp == 1 and stats[1].iou == pytest.approx(1.0)
    assert not stats[2].present


def test_crowd_regions_are_neither_fn_nor_fp():
    gt = make_map([[1, 1, 2, 2], [1, 1, 2, 2]], {1: 4, 2: 4}, crowd={2})
    pred = make_map([[1, 1, 2, 2], [1, 1, 2, 2]], {1: 4, 2: 4})
    stats = Metrics.pq_match(pred, gt)
    assert (stats[4].tp, stats[4].fp, stats[4].fn) == (1, 0, 0)


def test_categories_must_agree_to_match():
    gt = make_map([[1, 1]], {1: 4})
    pred = make_map([[1, 1]], {1: 5})
    stats = Metrics.pq_match(pred, gt)
    assert stats[4].fn == 1 and stats[5].fp == 1


def test_empty_subsets_report_zero():
    stats = PqStats({1: PqStatCat(iou=0.9, tp=1)})
    report = Metrics.compute_pq(stats, CATEGORY_TABLE)
    assert report.pq_th == 0.0 and report.n_th == 0
    assert report.pq_st == pytest.approx(90.0)
    with pytest.raises(DegenerateInputError):
        Metrics.compute_pq(PqStats(), CATEGORY_TABLE)
    with pytest.raises(ContractError):
        Metrics.compute_pq(PqStats({9: PqStatCat(fp=1)}), CATEGORY_TABLE)


def test_stats_are_additive():
    rng = Rng(3)
    pairs = [Oracles.random_panoptic_pair(rng) for _ in range(4)]
    total = PqStats()
    for pred, gt in pairs:
        total += Metrics.pq_match(pred, gt)
    summed = sum((Metrics.pq_match(pred, gt) for pred, gt in pairs), PqStats())
    assert total == summed


@pytest.mark.parametrize("seed", range(4))
def test_matches_exhaustive_search(seed):
    rng = Rng(seed)
    for _ in range(250):
        pred, gt = Oracles.random_panoptic_pair(rng)
        assert Metrics.pq_match(pred, gt) == Oracles.pq_exhaustive(pred, gt)


def test_extent_mismatch_raises():
    with pytest.raises(ContractError):
        Metrics.pq_match(make_map([[1]], {1: 1}), make_map([[1, 1]], {1: 1}))


def test_miou_from_labels():
    gt = np.array([[0, 0, 1, 1], [0, 0, 1, 255]])
    pred = np.array([[0, 0, 0, 1], [0, 0, 1, 1]])
    cm = ConfusionMatrix.from_labels(pred, gt, 3)
    assert cm.total == 7
    miou, fiou, per_class = Metrics.compute_miou(cm)
    # class 0: tp 4, fp 1 -> 4/5; class 1: tp 2, fn 1 -> 2/3; class 2 has no ground truth
    assert per_class == pytest.approx({0: 80.0, 1: 200.0 / 3})
    assert miou == pytest.approx((80.0 + 200.0 / 3) / 2)
    assert fiou == pytest.approx(4 / 7 * 80.0 + 3 / 7 * 200.0 / 3)


def test_miou_void_prediction_is_a_miss():
    cm = ConfusionMatrix(2).update(np.array([-1, 1]), np.array([0, 1]))
    assert cm.missed.tolist() == [1, 0]
    assert Metrics.compute_miou(cm).per_class == pytest.approx({0: 0.0, 1: 100.0})
    with pytest.raises(DegenerateInputError):
        Metrics.compute_miou(ConfusionMatrix(2))
    with pytest.raises(ContractError):
        ConfusionMatrix(2).update(np.array([0]), np.array([5]))


def test_confusion_from_panoptic_maps():
    gt = make_map([[1, 1, 2, 0]], {1: 1, 2: 4})
    pred = make_map([[1, 2, 2, 2]], {1: 1, 2: 4})
    cm = ConfusionMatrix.from_panoptic(pred, gt, sorted(CATEGORY_TABLE))
    assert cm.total == 3
    assert cm.counts[0, 0] == 1 and cm.counts[3, 0] == 1 and cm.counts[3, 3] == 1


def test_report_table_has_rows_for_all_subsets():
    gt = make_map([[1, 2], [1, 2]], {1: 1, 2: 4})
    table = Metrics.format_table(Metrics.evaluate([(gt, gt), (gt, gt)], CATEGORY_TABLE, threads=2))
    for label in ("All", "Things", "Stuff", "mIoU", "100.000"):
        assert label in table


def test_predicted_only_category_counts_as_zero():
    gt = make_map([[1, 1, 1, 1]], {1: 1})
    pred = make_map([[1, 1, 1, 2]], {1: 1, 2: 4})
    report = Metrics.compute_pq(Metrics.pq_match(pred, gt), CATEGORY_TABLE)
    assert [row["category_id"] for row in report.per_category] == [1, 4]
    assert report.n == 2 and report.n_th == 1
    assert report.pq_th == 0.0
    assert report.pq == pytest.approx(100 * 0.75 / 2)


def test_evaluate_decodes_lazily_on_workers():
    maps = [Oracles.random_panoptic_pair(Rng(seed)) for seed in range(6)]
    decoded = []

    def decode(index):
        decoded.append(index)
        return maps[index]

    eager = Metrics.evaluate(maps, CATEGORY_TABLE)
    lazy = Metrics.evaluate(iter(range(6)), CATEGORY_TABLE, threads=3, decode=decode)
    assert sorted(decoded) == list(range(6))
    assert lazy == eager
    assert lazy["images"] == 6
