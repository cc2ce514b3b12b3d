import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vesselnet.losses import (DICE_EPS, INSTANCE_TERMS, LossWeights, bce, cross_entropy, dice_loss, focal,
                              forward_diff, forward_diff_np, instance_loss, msge, mse, one_hot, semantic_loss)
from vesselnet.tensor import DimensionError, ParameterError, Tensor


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def test_dice_perfect_overlap():
    target = one_hot(np.array([[[0, 1], [1, 0]]]), 2, np.float64)
    assert dice_loss(t64(target), target).item() == pytest.approx(0.0, abs=1e-12)


def test_dice_disjoint():
    target = np.array([[[[1.0, 1.0], [0.0, 0.0]]]])
    assert dice_loss(t64(1 - target), target).item() == pytest.approx(1.0, abs=1e-5)


def test_dice_uniform_half_by_direct_summation():
    target = np.zeros((1, 1, 4, 4))
    target[0, 0, :2, :2] = 1.0
    probs = np.full_like(target, 0.5)
    inter = sum(probs[0, 0, i, j] * target[0, 0, i, j] for i in range(4) for j in range(4))
    expected = 1 - (2 * inter + DICE_EPS) / (probs.sum() + target.sum() + DICE_EPS)
    assert dice_loss(t64(probs), target).item() == pytest.approx(expected, rel=1e-14)


def test_cross_entropy_matches_numpy():
    rng = np.random.default_rng(0)
    logits, labels = rng.normal(size=(2, 3, 4, 5)), rng.integers(0, 3, size=(2, 4, 5))
    lse = np.log(np.exp(logits).sum(axis=1))
    picked = np.take_along_axis(logits, labels[:, None], axis=1)[:, 0]
    assert cross_entropy(t64(logits), labels).item() == pytest.approx(np.mean(lse - picked), rel=1e-12)


def test_cross_entropy_confident_limit():
    logits = np.zeros((1, 2, 2, 2))
    logits[:, 1] = 50.0
    assert cross_entropy(t64(logits), np.ones((1, 2, 2), int)).item() < 1e-20


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_focal_gamma_zero_is_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    logits, labels = rng.normal(size=(2, 3, 3, 3)) * 4, rng.integers(0, 3, size=(2, 3, 3))
    assert focal(t64(logits), labels, 0.0).item() == cross_entropy(t64(logits), labels).item()


def test_focal_matches_formula():
    rng = np.random.default_rng(1)
    logits, labels = rng.normal(size=(1, 2, 3, 3)), rng.integers(0, 2, size=(1, 3, 3))
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    pt = np.take_along_axis(p, labels[:, None], axis=1)[:, 0]
    assert focal(t64(logits), labels, 2.0).item() == pytest.approx(np.mean(-(1 - pt) ** 2 * np.log(pt)), rel=1e-12)


def test_focal_survives_saturated_logits():
    logits = np.zeros((1, 2, 1, 1), np.float32)
    logits[0, 1] = 80.0
    x = Tensor(logits, requires_grad=True)
    focal(x, np.ones((1, 1, 1), int), 2.0).backward()
    assert np.all(np.isfinite(x.grad))


def test_bce_matches_formula():
    rng = np.random.default_rng(2)
    z, y = rng.normal(size=(2, 3)), rng.integers(0, 2, size=(2, 3)).astype(float)
    s = 1 / (1 + np.exp(-z))
    assert bce(t64(z), y).item() == pytest.approx(np.mean(-(y * np.log(s) + (1 - y) * np.log(1 - s))), rel=1e-12)


def test_mse_value():
    assert mse(t64([1.0, 2.0]), [0.0, 0.0]).item() == 2.5


def test_forward_diff_tensor_matches_numpy():
    x = np.random.default_rng(3).normal(size=(2, 4, 5))
    for ax in (1, 2):
        np.testing.assert_array_equal(forward_diff(t64(x), ax).data, forward_diff_np(x, ax))


def test_msge_zero_cases():
    hv = np.random.default_rng(4).uniform(-1, 1, size=(1, 2, 4, 4))
    mask = np.ones((1, 4, 4))
    assert msge(t64(hv), hv, mask).item() == 0.0
    assert msge(t64(hv), hv * 0.5, np.zeros((1, 4, 4))).item() == 0.0


def test_msge_ramp_by_hand():
    # target H is a ramp along x (step 0.25), V constant; prediction constant everywhere
    target = np.zeros((1, 2, 3, 5))
    target[0, 0] = np.tile(np.arange(5) * 0.25, (3, 1))
    pred = np.zeros_like(target)
    mask = np.zeros((1, 3, 5))
    mask[0, 1, 1:4] = 1  # three nuclei pixels, none on the clamped last column
    # per masked pixel: H-grad diff (0 - 0.25)^2 and V-grad diff 0; both channels counted
    expected = (3 * 0.25 ** 2 + 3 * 0.0) / 6
    assert msge(t64(pred), target, mask).item() == pytest.approx(expected, rel=1e-14)


def test_semantic_loss_weights():
    rng = np.random.default_rng(5)
    logits, labels = rng.normal(size=(1, 2, 4, 4)), rng.integers(0, 2, size=(1, 4, 4))
    only_ce, _ = semantic_loss(t64(logits), labels, LossWeights(dice=0.0, ce=1.0))
    assert only_ce.item() == cross_entropy(t64(logits), labels).item()
    assert LossWeights().dice == 1.0 and LossWeights().ce == 1.0


def test_semantic_loss_homogeneity():
    rng = np.random.default_rng(6)
    logits, labels = rng.normal(size=(1, 2, 4, 4)), rng.integers(0, 2, size=(1, 4, 4))
    grads = []
    values = []
    for scale in (1.0, 2.0):
        x = t64(logits, grad=True)
        loss, _ = semantic_loss(x, labels, LossWeights(dice=scale, ce=scale))
        loss.backward()
        grads.append(x.grad)
        values.append(loss.item())
    assert values[1] == pytest.approx(2 * values[0], rel=1e-14)
    np.testing.assert_allclose(grads[1] / np.linalg.norm(grads[1]), grads[0] / np.linalg.norm(grads[0]), atol=1e-14)


def _perfect_instance_outputs():
    fg = np.zeros((1, 6, 6), int)
    fg[0, 1:4, 1:4] = 1
    types = fg * 1
    hv = np.zeros((1, 2, 6, 6))
    big = 40.0
    np_logits = np.stack([np.where(fg, -big, big), np.where(fg, big, -big)], axis=1).astype(float)
    nt_logits = np.stack([np.where(types == 0, big, -big), np.where(types == 1, big, -big)], axis=1).astype(float)
    return np_logits, hv, nt_logits, {"np": fg, "hv": hv, "nt": types}


def test_instance_loss_perfect_prediction():
    np_logits, hv, nt_logits, targets = _perfect_instance_outputs()
    total, parts = instance_loss(t64(np_logits), t64(hv), t64(nt_logits), targets)
    assert set(parts) == set(INSTANCE_TERMS)
    assert all(abs(v) < 1e-5 for v in parts.values())


def test_instance_breakdown_sums_to_total():
    rng = np.random.default_rng(7)
    targets = {"np": rng.integers(0, 2, (2, 5, 5)), "hv": rng.uniform(-1, 1, (2, 2, 5, 5)),
               "nt": rng.integers(0, 3, (2, 5, 5))}
    total, parts = instance_loss(t64(rng.normal(size=(2, 2, 5, 5))), t64(rng.uniform(-1, 1, (2, 2, 5, 5))),
                                 t64(rng.normal(size=(2, 3, 5, 5))), targets)
    assert abs(sum(parts.values()) - total.item()) < 1e-12


def test_instance_default_weights():
    w = LossWeights()
    assert (w.np, w.hv, w.nt) == (1.0, 5.0, 1.0)


def test_weight_validation():
    with pytest.raises(ParameterError):
        LossWeights(dice=-1).validate("semantic")
    with pytest.raises(ParameterError):
        LossWeights(dice=0, ce=0).validate("semantic")
    with pytest.raises(ParameterError):
        LossWeights(np=0, hv=0, nt=0).validate("instance")
    with pytest.raises(ParameterError):
        focal(t64(np.zeros((1, 2, 1, 1))), np.zeros((1, 1, 1), int), -1.0)


def test_shape_errors():
    with pytest.raises(DimensionError):
        cross_entropy(t64(np.zeros((1, 2, 3, 3))), np.zeros((1, 3, 4), int))
    with pytest.raises(ValueError):
        cross_entropy(t64(np.zeros((1, 2, 3, 3))), np.full((1, 3, 3), 5))
    with pytest.raises(DimensionError):
        mse(t64([1.0]), [1.0, 2.0])
    with pytest.raises(KeyError):
        instance_loss(t64(np.zeros((1, 2, 2, 2))), t64(np.zeros((1, 2, 2, 2))), t64(np.zeros((1, 2, 2, 2))), {})
