# -*- coding: utf-8 -*-

import io
import math

import numpy as np
import pytest

from pfpn.exceptions import ContractError, DegenerateInputError
from pfpn.losses import IGNORE_LABEL, InstanceLossInputs, Losses, LossWeights, SemanticTarget
from pfpn.tensor_core import Rng


def _instance_inputs(rng, rois=6, foreground=3, classes=3, mask=4):
    return InstanceLossInputs(
        class_logits=rng.normal(rois * (classes + 1)).reshape(rois, classes + 1),
        class_targets=np.concatenate([rng.integers(foreground, classes) + 1, np.zeros(rois - foreground, int)]),
        box_deltas_pred=rng.normal(foreground * 4).reshape(foreground, 4) * 2,
        box_deltas_target=rng.normal(foreground * 4).reshape(foreground, 4),
        mask_logits=rng.normal(foreground * mask * mask).reshape(foreground, mask, mask),
        mask_targets=(rng.uniform(foreground * mask * mask) > 0.5).reshape(foreground, mask, mask),
    )


def test_uniform_logits_give_log_k():
    labels = Rng(0).integers(2 * 5 * 7, 6).reshape(2, 5, 7)
    result = Losses.semantic_loss(np.zeros((2, 6, 5, 7)), SemanticTarget(labels))
    assert result.loss == pytest.approx(math.log(6))
    assert result.num_labeled == 70


def test_semantic_loss_ignores_void_pixels():
    rng = Rng(1)
    logits = rng.normal(1 * 3 * 4 * 4).reshape(1, 3, 4, 4)
    labels = rng.integers(16, 3).reshape(1, 4, 4)
    masked = labels.copy()
    masked[0, :2] = IGNORE_LABEL
    full = Losses.semantic_loss(logits, SemanticTarget(labels))
    partial = Losses.semantic_loss(logits, SemanticTarget(masked))
    assert partial.num_labeled == 8
    assert not partial.grad[0, :, :2].any()
    assert partial.loss != pytest.approx(full.loss)


def test_semantic_loss_gradient_matches_finite_differences():
    rng = Rng(2)
    logits = rng.normal(1 * 4 * 3 * 3).reshape(1, 4, 3, 3)
    target = SemanticTarget(rng.integers(9, 4).reshape(1, 3, 3))
    grad = Losses.semantic_loss(logits, target).grad
    step = 1e-6
    for index in [(0, 0, 0, 0), (0, 3, 2, 1), (0, 1, 1, 2)]:
        plus, minus = logits.copy(), logits.copy()
        plus[index] += step
        minus[index] -= step
        numeric = (Losses.semantic_loss(plus, target).loss - Losses.semantic_loss(minus, target).loss) / (2 * step)
        assert grad[index] == pytest.approx(numeric, rel=1e-5, abs=1e-9)


def test_semantic_loss_from_probs_agrees_with_logits():
    rng = Rng(3)
    logits = rng.normal(2 * 3 * 2 * 2).reshape(2, 3, 2, 2)
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    target = SemanticTarget(rng.integers(8, 3).reshape(2, 2, 2))
    result = Losses.semantic_loss(probs, target, from_probs=True)
    assert result.loss == pytest.approx(Losses.semantic_loss(logits, target).loss)
    assert result.grad.dtype == np.float64
    step = 1e-7
    for index in [(0, 0, 0, 0), (1, 2, 1, 1), (0, 1, 1, 0)]:
        plus, minus = probs.copy(), probs.copy()
        plus[index] += step
        minus[index] -= step
        numeric = (Losses.semantic_loss(plus, target, from_probs=True).loss
                   - Losses.semantic_loss(minus, target, from_probs=True).loss) / (2 * step)
        assert result.grad[index] == pytest.approx(numeric, rel=1e-5, abs=1e-9)


def test_semantic_loss_errors():
    with pytest.raises(DegenerateInputError):
        Losses.semantic_loss(np.zeros((1, 2, 2, 2)), SemanticTarget(np.full((1, 2, 2), IGNORE_LABEL)))
    with pytest.raises(ContractError):
        Losses.semantic_loss(np.zeros((1, 2, 2, 2)), SemanticTarget(np.full((1, 2, 2), 2)))
    with pytest.raises(ContractError):
        Losses.semantic_loss(np.zeros((1, 2, 2, 2)), SemanticTarget(np.zeros((1, 3, 2))))


def test_instance_losses_values():
    inputs = InstanceLossInputs(
        class_logits=np.zeros((4, 3)),
        class_targets=[1, 2, 0, 0],
        box_deltas_pred=[[0.5, 0, 0, 0], [3.0, 0, 0, 0]],
        box_deltas_target=np.zeros((2, 4)),
        mask_logits=np.zeros((2, 2, 2)),
        mask_targets=np.ones((2, 2, 2)),
    )
    l_c, l_b, l_m = Losses.instance_losses(inputs)
    assert l_c == pytest.approx(math.log(3))
    # smooth L1: 0.5 * 0.25 + (3 - 0.5), normalized by all four sampled RoIs
    assert l_b == pytest.approx((0.125 + 2.5) / 4)
    assert l_m == pytest.approx(math.log(2))


def test_no_foreground_rois_zero_box_and_mask():
    inputs = InstanceLossInputs(np.zeros((3, 2)), [0, 0, 0], np.zeros((0, 4)), np.zeros((0, 4)),
                                np.zeros((0, 4, 4)), np.zeros((0, 4, 4)))
    result = Losses.instance_losses(inputs)
    assert result.l_b == 0.0 and result.l_m == 0.0
    assert result.l_c == pytest.approx(math.log(2))


def test_instance_losses_errors():
    with pytest.raises(DegenerateInputError):
        Losses.instance_losses(InstanceLossInputs(np.zeros((0, 3)), np.zeros(0, int), np.zeros((0, 4)),
                                                  np.zeros((0, 4)), np.zeros((0, 2, 2)), np.zeros((0, 2, 2))))
    with pytest.raises(ContractError):
        InstanceLossInputs(np.zeros((2, 3)), [0, 3], np.zeros((0, 4)), np.zeros((0, 4)),
                           np.zeros((0, 2, 2)), np.zeros((0, 2, 2)))
    with pytest.raises(ContractError):
        InstanceLossInputs(np.zeros((1, 3)), [1], np.zeros((1, 4)), np.zeros((1, 4)),
                           np.zeros((1, 2, 2)), np.full((1, 2, 2), 0.5))


def test_duplicating_rois_leaves_losses_unchanged():
    inputs = _instance_inputs(Rng(4))
    fg = inputs.num_foreground_rois
    doubled = InstanceLossInputs(
        class_logits=np.concatenate([inputs.class_logits[:fg]] * 2 + [inputs.class_logits[fg:]] * 2),
        class_targets=np.concatenate([inputs.class_targets[:fg]] * 2 + [inputs.class_targets[fg:]] * 2),
        box_deltas_pred=np.concatenate([inputs.box_deltas_pred] * 2),
        box_deltas_target=np.concatenate([inputs.box_deltas_target] * 2),
        mask_logits=np.concatenate([inputs.mask_logits] * 2),
        mask_targets=np.concatenate([inputs.mask_targets] * 2),
    )
    assert tuple(Losses.instance_losses(doubled)) == pytest.approx(tuple(Losses.instance_losses(inputs)))


def test_joint_loss_identity_and_linearity():
    instance = Losses.instance_losses(_instance_inputs(Rng(5)))
    l_s = 0.8
    l_c, l_b, l_m = instance
    assert Losses.joint_loss(instance, l_s, LossWeights(1.0, 1.0)) == pytest.approx(l_c + l_b + l_m + l_s)
    assert Losses.joint_loss(instance, l_s, LossWeights(0.0, 0.0)) == 0.0
    half = Losses.joint_loss(instance, l_s, LossWeights(0.5, 0.5))
    assert half == pytest.approx(0.5 * Losses.joint_loss(instance, l_s, LossWeights(1.0, 1.0)))
    with pytest.raises(ContractError):
        Losses.joint_loss((1.0, float("nan"), 0.0), 1.0, LossWeights())
    with pytest.raises(ContractError):
        LossWeights(-1.0, 1.0)


def test_joint_gradients_scale_by_lambda():
    rng = Rng(6)
    instance = Losses.instance_losses(_instance_inputs(rng))
    semantic = Losses.semantic_loss(rng.normal(1 * 3 * 2 * 2).reshape(1, 3, 2, 2),
                                    SemanticTarget(rng.integers(4, 3).reshape(1, 2, 2)))
    grads = Losses.joint_gradients(instance, semantic, LossWeights(0.25, 0.0))
    assert not grads["semantic"].any()
    np.testing.assert_allclose(grads["class_logits"], 0.25 * instance.grad_class_logits)
    np.testing.assert_allclose(grads["mask_logits"], 0.25 * instance.grad_mask_logits)


def test_lambda_sweep_grid_order_and_csv():
    def runner(weights):
        if weights.lambda_i == 0.5 and weights.lambda_s == 1.0:
            raise RuntimeError("boom")
        return {"L_c": 1.0, "L_b": 0.5, "L_m": 0.25, "L_s": 2.0, "miou": 50.0}

    grid = Losses.grid([0.5, 1.0])
    assert grid == [(0.5, 0.5), (0.5, 1.0), (1.0, 0.5), (1.0, 1.0)]
    rows = Losses.lambda_sweep(runner, grid)
    assert [row.error is None for row in rows] == [True, False, True, True]
    assert rows[0].loss == pytest.approx(0.5 * 1.75 + 0.5 * 2.0)
    assert rows[3].metrics == {"miou": 50.0}

    buffer = io.StringIO()
    Losses.write_sweep_csv(buffer, rows)
    lines = buffer.getvalue().splitlines()
    assert lines[0] == "lambda_i,lambda_s,L_c,L_b,L_m,L_s,L,miou,error"
    assert len(lines) == 5
    assert lines[2].endswith("RuntimeError: boom")


def test_lambda_sweep_without_failures_has_no_error_column(tmp_path):
    rows = Losses.lambda_sweep(lambda w: {"L_c": 1, "L_b": 1, "L_m": 1, "L_s": 1}, [(1.0, 1.0)])
    Losses.write_sweep_csv(tmp_path / "sweep.csv", rows)
    header, row = (tmp_path / "sweep.csv").read_text().splitlines()
    assert header == "lambda_i,lambda_s,L_c,L_b,L_m,L_s,L"
    assert row.split(",")[-1] == "4.0"
    with pytest.raises(ContractError):
        Losses.lambda_sweep(lambda w: {}, [])
