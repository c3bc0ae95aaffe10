# -*- coding: utf-8 -*-

import csv

import numpy as np
import pytest

from pfpn.config import Config
from pfpn.exceptions import ContractError, TrainingDivergedError
from pfpn.losses import Losses, LossWeights
from pfpn.semantic_branch import SCALES, SemanticBranch
from pfpn.train_demo import CELL, DemoTrainer, InstanceProbe, SceneGenerator, TrainConfig


@pytest.fixture(scope="module")
def scene():
    return SceneGenerator.generate_scene(0)


def test_scene_is_deterministic(scene):
    again = SceneGenerator.generate_scene(0)
    np.testing.assert_array_equal(again.semantic, scene.semantic)
    for s in SCALES:
        np.testing.assert_array_equal(again.features[s], scene.features[s])
    assert not np.array_equal(SceneGenerator.generate_scene(1).semantic, scene.semantic)


def test_scene_layout(scene):
    assert scene.extent == (64, 64)
    assert scene.lattice.shape == (16, 16)
    assert set(np.unique(scene.semantic)) <= set(range(5))
    assert 1 <= len(scene.instances) <= 3
    for s in SCALES:
        assert scene.features[s].shape == (1, 16, 64 // s, 64 // s)
        assert scene.features[s].dtype == np.float32
    np.testing.assert_array_equal(scene.semantic[::CELL, ::CELL], scene.lattice)


def test_thing_masks_cover_exactly_the_other_region(scene):
    union = np.zeros(scene.extent, dtype=bool)
    for instance in scene.instances:
        assert instance.mask.any()
        assert 0 <= instance.category < 2
        y0, x0, y1, x1 = instance.box
        assert not instance.mask[:y0].any() and not instance.mask[y1:].any()
        assert not instance.mask[:, :x0].any() and not instance.mask[:, x1:].any()
        union |= instance.mask
    np.testing.assert_array_equal(union, scene.semantic == scene.other_label)


def test_single_class_scene():
    scene = SceneGenerator.generate_scene(3, extent=32, num_classes=1)
    assert set(np.unique(scene.semantic)) <= {0, 1}
    trainer = DemoTrainer(TrainConfig(steps=2, extent=32, num_classes=1, width=8), [scene])
    assert len(trainer.train().history["loss"]) == 2


def test_scene_contract():
    with pytest.raises(ContractError):
        SceneGenerator.generate_scene(0, extent=48)
    with pytest.raises(ContractError):
        SceneGenerator.generate_scene(0, num_classes=0)


def test_batch_is_order_independent():
    serial = SceneGenerator.generate_batch(5, 3, extent=32)
    threaded = SceneGenerator.generate_batch(5, 3, extent=32, threads=3)
    assert [s.seed for s in serial] == [5, 6, 7]
    for a, b in zip(serial, threaded):
        np.testing.assert_array_equal(a.semantic, b.semantic)


def test_roi_sampling(scene):
    rois = InstanceProbe.sample_rois([scene])
    fg = rois.num_foreground
    assert fg == len(scene.instances)
    assert rois.features.shape[1] == 17
    np.testing.assert_array_equal(rois.features[:, -1], 1.0)
    assert (rois.class_targets[:fg] > 0).all() and (rois.class_targets[fg:] == 0).all()
    assert rois.mask_targets.shape == (fg, 4, 4)
    assert (rois.box_targets[:, :2] >= 0).all() and (rois.box_targets[:, 2:] <= 0).all()


def test_train_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(steps=0)
    with pytest.raises(ContractError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ContractError):
        TrainConfig(lambda_s=-1.0)
    config = TrainConfig.from_config(Config(), steps=7, learning_rate=None)
    assert config.steps == 7 and config.learning_rate == 0.1
    assert config.branch_config().output_channels == 5


def test_training_is_deterministic():
    config = TrainConfig(steps=3)
    a = DemoTrainer(config).train().history
    b = DemoTrainer(config).train().history
    assert a == b


def test_loss_strictly_decreases_over_ten_steps():
    history = DemoTrainer(TrainConfig(steps=10)).train().history
    losses = history["loss"]
    assert len(losses) == 10
    assert all(later < earlier for earlier, later in zip(losses, losses[1:]))


def test_zero_semantic_weight_freezes_the_branch():
    trainer = DemoTrainer(TrainConfig(steps=3, lambda_s=0.0))
    before = trainer.branch.classifier.weight.copy()
    trainer.train()
    np.testing.assert_array_equal(trainer.branch.classifier.weight, before)
    assert trainer.probe.weights["class"].any()


def test_frozen_instance_head_keeps_instance_terms_constant():
    trainer = DemoTrainer(TrainConfig(steps=3, train_probe=False))
    result = trainer.train()
    assert not any(weight.any() for weight in trainer.probe.weights.values())
    for term in ("L_c", "L_b", "L_m"):
        assert len(set(result.history[term])) == 1
    assert result.history["L_s"][-1] < result.history["L_s"][0]


def test_gradients_are_linear_in_lambda():
    trainer = DemoTrainer(TrainConfig(steps=1))
    full_terms, full = trainer.compute_gradients(LossWeights(1.0, 1.0))
    half_terms, half = trainer.compute_gradients(LossWeights(0.5, 0.5))
    assert half_terms["loss"] == pytest.approx(0.5 * full_terms["loss"])
    for key in full:
        np.testing.assert_allclose(half[key], 0.5 * full[key], rtol=1e-12, atol=0)
    expected = Losses.joint_loss((full_terms["L_c"], full_terms["L_b"], full_terms["L_m"]), full_terms["L_s"],
                                 LossWeights(1.0, 1.0))
    assert full_terms["loss"] == pytest.approx(expected)


def test_divergence_is_reported():
    trainer = DemoTrainer(TrainConfig(steps=1))
    trainer.probe.weights["class"][:] = np.inf
    with pytest.raises(TrainingDivergedError) as err:
        trainer.compute_gradients(step=4)
    assert err.value.step == 4


def test_run_writes_results(tmp_path):
    trainer = DemoTrainer(TrainConfig(steps=2, extent=32, width=8))
    out = trainer.run(output_root=tmp_path)
    assert out.name.startswith("trial_demo_") and out.name.endswith("_v1")
    with open(out / "losses.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["step", "loss", "L_c", "L_b", "L_m", "L_s", "miou"]
    assert len(rows) == 3
    assert "STEPS: 2" in (out / "parameters.txt").read_text()
    assert (out / "training.png").is_file()
    assert (out / "checkpoint" / "probe.mask.ptsr").is_file()
    loaded = SemanticBranch.load(out / "checkpoint")
    np.testing.assert_array_equal(loaded.classifier.weight, trainer.branch.classifier.weight)

    second = DemoTrainer(TrainConfig(steps=1, extent=32, width=8)).run(output_root=tmp_path)
    assert second.name.endswith("_v2")


def test_sweep_rows():
    rows = DemoTrainer.sweep(TrainConfig(steps=2, extent=32, width=8), [(1.0, 0.0), (1.0, 1.0)])
    assert [(row.lambda_i, row.lambda_s) for row in rows] == [(1.0, 0.0), (1.0, 1.0)]
    assert all(row.error is None for row in rows)
    assert set(rows[0].metrics) == {"miou"}


@pytest.mark.slow
def test_overfits_training_scene():
    history = DemoTrainer(TrainConfig(steps=500)).train().history
    assert max(history["miou"]) >= 90.0
    assert history["loss"][-1] < history["loss"][0]
