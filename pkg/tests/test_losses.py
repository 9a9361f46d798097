"""Cross-entropy and Jaccard-surrogate losses against hand oracles."""

import itertools

import numpy as np
import pytest

from fdcheck import assert_close, central_diff
from rangeseg.errors import EmptyBatchError, InvalidTargetError
from rangeseg.losses import (
    LOG_CLAMP,
    LossValue,
    lovasz_softmax,
    total_loss,
    weighted_cross_entropy,
)
from rangeseg.pointcloud import ClassWeights


def cw(weights):
    w = np.asarray(weights, dtype=np.float64)
    return ClassWeights(weights=w, frequencies=np.ones(len(w), dtype=np.int64))


def onehot(targets, c):
    p = np.zeros((c, len(targets)))
    p[targets, np.arange(len(targets))] = 1.0
    return p


def random_probs(rng, c, p):
    logits = rng.normal(size=(c, p))
    e = np.exp(logits - logits.max(axis=0))
    return e / e.sum(axis=0)


def discrete_jaccard_loss(pred, gt, cls):
    p = pred == cls
    g = gt == cls
    union = (p | g).sum()
    return 1.0 - (p & g).sum() / union


class TestWeightedCrossEntropy:
    def test_perfect_prediction_is_zero(self):
        targets = np.array([0, 1, 1])
        value, grad = weighted_cross_entropy(onehot(targets, 2), targets, cw([1.0, 1.0]))
        assert value == 0.0

    def test_half_probability_example(self):
        probs = np.array([[0.5], [0.5]])
        value, _ = weighted_cross_entropy(probs, np.array([0]), cw([1.0, 0.5]))
        assert value == pytest.approx(0.6931, abs=5e-5)

    def test_uniform_weights_reduce_to_plain_ce(self):
        rng = np.random.default_rng(0)
        probs = random_probs(rng, 3, 40)
        targets = rng.integers(0, 3, size=40)
        value, _ = weighted_cross_entropy(probs, targets, cw([1.0, 1.0, 1.0]))
        plain = -np.log(probs[targets, np.arange(40)]).mean()
        assert value == pytest.approx(plain, rel=1e-12)

    def test_linear_in_weights(self):
        rng = np.random.default_rng(1)
        probs = random_probs(rng, 3, 25)
        targets = rng.integers(0, 3, size=25)
        w = rng.uniform(0.2, 2.0, size=3)
        v1, g1 = weighted_cross_entropy(probs, targets, cw(w))
        v2, g2 = weighted_cross_entropy(probs, targets, cw(2 * w))
        assert v2 == pytest.approx(2 * v1, rel=1e-12)
        np.testing.assert_allclose(g2, 2 * g1, rtol=1e-12)

    def test_weights_select_per_target_class(self):
        probs = np.full((2, 2), 0.5)
        targets = np.array([0, 1])
        value, _ = weighted_cross_entropy(probs, targets, cw([2.0, 0.0]))
        # only the class-0 pixel contributes: mean(2*ln2, 0)
        assert value == pytest.approx(np.log(2.0), rel=1e-12)

    def test_valid_mask_excludes_pixels(self):
        probs = np.array([[0.5, 0.01], [0.5, 0.99]])
        targets = np.array([0, 0])
        value, grad = weighted_cross_entropy(
            probs, targets, cw([1.0, 1.0]), valid=np.array([True, False]))
        assert value == pytest.approx(np.log(2.0), rel=1e-12)
        assert grad[0, 1] == 0.0

    def test_clamp_zeroes_gradient(self):
        probs = np.array([[0.0], [1.0]])
        value, grad = weighted_cross_entropy(probs, np.array([0]), cw([1.0, 1.0]))
        assert value == pytest.approx(-np.log(LOG_CLAMP), rel=1e-12)
        assert grad[0, 0] == 0.0

    def test_gradient_formula(self):
        probs = np.array([[0.25, 0.9], [0.75, 0.1]])
        targets = np.array([0, 1])
        _, grad = weighted_cross_entropy(probs, targets, cw([1.0, 2.0]))
        np.testing.assert_allclose(grad[0, 0], -1.0 / 0.25 / 2)
        np.testing.assert_allclose(grad[1, 1], -2.0 / 0.1 / 2)
        assert grad[1, 0] == 0.0 and grad[0, 1] == 0.0

    def test_invalid_target_rejected(self):
        with pytest.raises(InvalidTargetError):
            weighted_cross_entropy(np.full((2, 1), 0.5), np.array([2]), cw([1.0, 1.0]))

    def test_empty_batch_rejected(self):
        with pytest.raises(EmptyBatchError):
            weighted_cross_entropy(np.full((2, 1), 0.5), np.array([0]),
                                   cw([1.0, 1.0]), valid=np.array([False]))


class TestLovaszSoftmax:
    def test_perfect_prediction_is_zero(self):
        targets = np.array([0, 1, 2, 1])
        value, grad = lovasz_softmax(onehot(targets, 3), targets)
        assert value == 0.0

    def test_two_pixel_hand_example(self):
        # both pixels ground truth class 1; p(class 1) = (0.6, 0.8)
        probs = np.array([[0.4, 0.2], [0.6, 0.8]])
        targets = np.array([1, 1])
        value, _ = lovasz_softmax(probs, targets, valid=None)
        # errors (0.4, 0.2), deltas (0.5, 0.5), class-0 term also present? no:
        # class 0 absent from gt, so the average is the class-1 term alone
        assert value == pytest.approx(0.3, rel=1e-12)

    def test_vertex_equality_exhaustive_4_pixels(self):
        for gt_bits in itertools.product((0, 1), repeat=4):
            gt = np.array(gt_bits)
            for pred_bits in itertools.product((0, 1), repeat=4):
                pred = np.array(pred_bits)
                value, _ = lovasz_softmax(onehot(pred, 2), gt)
                expected = np.mean([discrete_jaccard_loss(pred, gt, c)
                                    for c in np.unique(gt)])
                assert value == pytest.approx(expected, abs=1e-12), (gt, pred)

    def test_absent_classes_skipped(self):
        # 3-class input whose gt only uses class 0: only that term counts
        probs = np.array([[0.5, 0.6], [0.3, 0.2], [0.2, 0.2]])
        targets = np.array([0, 0])
        value, grad = lovasz_softmax(probs, targets)
        # errors 1 - (0.5, 0.6) = (0.5, 0.4); deltas (0.5, 0.5)
        assert value == pytest.approx(0.45, rel=1e-12)
        assert (grad[2] == 0).all()  # absent class gets no gradient

    def test_value_in_unit_interval(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            c = int(rng.integers(2, 5))
            p = int(rng.integers(1, 30))
            probs = random_probs(rng, c, p)
            targets = rng.integers(0, c, size=p)
            value, _ = lovasz_softmax(probs, targets)
            assert 0.0 <= value <= 1.0

    def test_pixel_permutation_invariance(self):
        rng = np.random.default_rng(5)
        probs = random_probs(rng, 3, 20)
        targets = rng.integers(0, 3, size=20)
        v1, _ = lovasz_softmax(probs, targets)
        perm = rng.permutation(20)
        v2, _ = lovasz_softmax(probs[:, perm], targets[perm])
        assert v1 == pytest.approx(v2, rel=1e-12)

    def test_monotone_in_true_class_probability(self):
        rng = np.random.default_rng(6)
        for trial in range(30):
            probs = random_probs(rng, 3, 12)
            targets = rng.integers(0, 3, size=12)
            base, _ = lovasz_softmax(probs, targets)
            i = int(rng.integers(0, 12))
            probs2 = probs.copy()
            probs2[targets[i], i] -= rng.uniform(0.01, probs2[targets[i], i])
            worse, _ = lovasz_softmax(probs2, targets)
            assert worse >= base - 1e-12

    def test_valid_mask_respected(self):
        rng = np.random.default_rng(7)
        probs = random_probs(rng, 2, 10)
        targets = rng.integers(0, 2, size=10)
        valid = np.zeros(10, dtype=bool)
        valid[:4] = True
        v_masked, _ = lovasz_softmax(probs, targets, valid=valid)
        v_sliced, _ = lovasz_softmax(probs[:, :4], targets[:4])
        assert v_masked == pytest.approx(v_sliced, rel=1e-12)

    def test_empty_batch_rejected(self):
        with pytest.raises(EmptyBatchError):
            lovasz_softmax(np.full((2, 3), 0.5), np.zeros(3, dtype=int),
                           valid=np.zeros(3, dtype=bool))


class TestTotalLoss:
    def test_additivity(self):
        rng = np.random.default_rng(8)
        probs = random_probs(rng, 3, 30)
        targets = rng.integers(0, 3, size=30)
        weights = cw([1.0, 0.7, 1.3])
        lv = total_loss(probs, targets, weights)
        w, gw = weighted_cross_entropy(probs, targets, weights)
        l, gl = lovasz_softmax(probs, targets)
        assert isinstance(lv, LossValue)
        assert lv.total == lv.wce + lv.lovasz
        assert lv.wce == w and lv.lovasz == l
        np.testing.assert_array_equal(lv.gradient, gw + gl)

    def test_perfect_hard_predictions(self):
        targets = np.array([0, 2, 1, 1])
        lv = total_loss(onehot(targets, 3), targets, cw([1.0, 1.0, 1.0]))
        assert lv.total == 0.0

    def test_gradient_is_finite(self):
        rng = np.random.default_rng(9)
        probs = random_probs(rng, 4, 25)
        targets = rng.integers(0, 4, size=25)
        lv = total_loss(probs, targets, cw([1.0, 2.0, 0.5, 1.0]))
        assert np.isfinite(lv.gradient).all()

    def test_matches_finite_differences(self):
        # random 3-class 8-pixel instances away from sort ties
        rng = np.random.default_rng(10)
        for trial in range(10):
            probs = random_probs(rng, 3, 8)
            targets = rng.integers(0, 3, size=8)
            weights = cw(rng.uniform(0.5, 1.5, size=3))
            lv = total_loss(probs, targets, weights)

            def scalar():
                return total_loss(probs, targets, weights).total

            for idx in rng.choice(probs.size, size=4, replace=False):
                fd = central_diff(scalar, probs, int(idx), eps=1e-7)
                assert_close(fd, float(lv.gradient.reshape(-1)[idx]),
                             tol=1e-4, context=f"trial{trial}[{idx}]")

    def test_shape_errors_propagate(self):
        with pytest.raises(InvalidTargetError):
            total_loss(np.full((2, 2, 2), 0.25), np.array([0, 1]), cw([1.0, 1.0]))
