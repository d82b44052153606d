import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointgrow.errors import DataError, NumericError
from pointgrow.losses import (
    ClassWeights,
    class_weights,
    masked_loss_backward,
    masked_loss_forward,
    one_hot,
    softmax,
)
from pointgrow.raster import ClassMask
from pointgrow.weaklabel import PseudoMask


def single_pixel_case():
    """N=1, 1x1 image, C=2, supervised, target class 0, pl=(0.75, 0.25)."""
    probs = np.array([0.75, 0.25]).reshape(1, 2, 1, 1)
    target = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
    supervised = np.ones((1, 1, 1))
    return probs, target, supervised, ClassWeights(np.ones(2))


class TestSoftmax:
    def test_equal_logits_uniform(self):
        out = softmax(np.zeros((1, 2, 1, 1)))
        assert np.allclose(out, 0.5)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(2, 5, 3, 3))
        shifted = logits + rng.normal(size=(2, 1, 3, 3))
        assert np.allclose(softmax(logits), softmax(shifted), atol=1e-12)

    def test_closed_form(self):
        logits = np.array([np.log(2.0), 0.0]).reshape(1, 2, 1, 1)
        out = softmax(logits)
        assert abs(out[0, 0, 0, 0] - 2 / 3) < 1e-12
        assert abs(out[0, 1, 0, 0] - 1 / 3) < 1e-12

    def test_rejects_nan(self):
        bad = np.zeros((1, 2, 1, 1))
        bad[0, 0] = np.nan
        with pytest.raises(NumericError):
            softmax(bad)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31))
    def test_sums_to_one(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.normal(scale=10, size=(2, 5, 4, 4))
        out = softmax(logits)
        assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-9
        assert out.min() >= 0


class TestOneHot:
    def test_class_zero(self):
        out = one_hot(np.zeros((1, 1, 1), dtype=int), 2)
        assert out[0, :, 0, 0].tolist() == [1.0, 0.0]

    def test_last_class(self):
        out = one_hot(np.full((1, 1, 1), 4), 5)
        assert out[0, :, 0, 0].tolist() == [0, 0, 0, 0, 1]

    def test_argmax_inverts(self):
        rng = np.random.default_rng(1)
        masks = rng.integers(0, 5, (3, 6, 4))
        assert np.array_equal(np.argmax(one_hot(masks, 5), axis=1), masks)

    def test_out_of_range(self):
        with pytest.raises(DataError):
            one_hot(np.full((1, 1, 1), 5), 5)


def make_pm(labels, supervised, c=5):
    return PseudoMask(
        ClassMask(np.asarray(labels, dtype=np.uint8), c),
        np.asarray(supervised, dtype=np.uint8),
    )


class TestClassWeights:
    def test_reciprocal_frequencies(self):
        pm = make_pm([[0, 0, 0, 0, 1]], [[1, 1, 1, 1, 1]], c=2)
        w = class_weights([pm], 2)
        assert w.weights[0] == pytest.approx(1.25)
        assert w.weights[1] == pytest.approx(5.0)

    def test_uniform_gives_c(self):
        pm = make_pm([[0, 1, 2, 3, 4]], [[1, 1, 1, 1, 1]])
        w = class_weights([pm], 5)
        assert np.allclose(w.weights, 5.0)

    def test_absent_class_floored(self):
        pm = make_pm([[0, 0]], [[1, 1]], c=3)
        w = class_weights([pm], 3, eps=1e-6)
        assert w.weights[1] == pytest.approx(1e6)
        assert w.weights[2] == pytest.approx(1e6)

    def test_only_supervised_pixels_count(self):
        pm = make_pm([[1, 2]], [[1, 0]], c=3)
        w = class_weights([pm], 3)
        assert w.weights[1] == pytest.approx(1.0)

    def test_no_supervision_rejected(self):
        pm = make_pm([[0]], [[0]])
        with pytest.raises(DataError):
            class_weights([pm], 5)

    def test_positive_finite_invariant(self):
        with pytest.raises(DataError):
            ClassWeights(np.array([1.0, 0.0]))
        with pytest.raises(DataError):
            ClassWeights(np.array([1.0, np.inf]))


class TestForward:
    def test_exact_fit_is_zero(self):
        probs, target, sup, w = single_pixel_case()
        loss = masked_loss_forward(target, target, sup, w)
        assert loss.total == 0.0

    def test_hand_computed_value(self):
        probs, target, sup, w = single_pixel_case()
        loss = masked_loss_forward(probs, target, sup, w)
        assert loss.total == pytest.approx(0.0625)
        assert loss.per_sample.tolist() == [pytest.approx(0.0625)]

    def test_fully_masked_is_zero_and_insensitive(self):
        probs, target, _, w = single_pixel_case()
        sup = np.zeros((1, 1, 1))
        assert masked_loss_forward(probs, target, sup, w).total == 0.0
        other = np.array([0.1, 0.9]).reshape(1, 2, 1, 1)
        assert masked_loss_forward(other, target, sup, w).total == 0.0

    def test_masking_blocks_unsupervised_perturbations(self):
        rng = np.random.default_rng(2)
        probs = softmax(rng.normal(size=(2, 5, 4, 4)))
        target = one_hot(rng.integers(0, 5, (2, 4, 4)), 5)
        sup = (rng.random((2, 4, 4)) < 0.5).astype(float)
        w = ClassWeights(rng.uniform(0.5, 2, 5))
        base = masked_loss_forward(probs, target, sup, w)
        unsupervised = (sup == 0)[:, None, :, :]
        noisy = probs + rng.normal(size=probs.shape) * unsupervised
        assert masked_loss_forward(noisy, target, sup, w).total == pytest.approx(
            base.total, rel=0, abs=0
        )

    def test_weight_scaling_linear(self):
        rng = np.random.default_rng(3)
        probs = softmax(rng.normal(size=(2, 3, 3, 3)))
        target = one_hot(rng.integers(0, 3, (2, 3, 3)), 3)
        sup = (rng.random((2, 3, 3)) < 0.7).astype(float)
        w = ClassWeights(rng.uniform(0.5, 2, 3))
        lam = 3.5
        a = masked_loss_forward(probs, target, sup, w)
        b = masked_loss_forward(probs, target, sup, ClassWeights(lam * w.weights))
        assert b.total == pytest.approx(lam * a.total, rel=1e-12)

    def test_batch_mean_invariant(self):
        rng = np.random.default_rng(4)
        probs = softmax(rng.normal(size=(3, 4, 2, 2)))
        target = one_hot(rng.integers(0, 4, (3, 2, 2)), 4)
        sup = np.ones((3, 2, 2))
        w = ClassWeights.uniform(4)
        loss = masked_loss_forward(probs, target, sup, w)
        assert loss.total == pytest.approx(loss.per_sample.mean(), rel=1e-15)

    def test_nonnegative_and_zero_iff_fit(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            probs = softmax(rng.normal(size=(1, 3, 2, 2)))
            target = one_hot(rng.integers(0, 3, (1, 2, 2)), 3)
            sup = (rng.random((1, 2, 2)) < 0.8).astype(float)
            w = ClassWeights(rng.uniform(0.1, 3, 3))
            loss = masked_loss_forward(probs, target, sup, w)
            assert loss.total >= 0
            fit = (np.abs(target - probs) * sup[:, None]).max() == 0
            assert (loss.total == 0) == bool(fit or sup.sum() == 0)

    def test_shape_mismatch(self):
        probs, target, sup, w = single_pixel_case()
        with pytest.raises(DataError):
            masked_loss_forward(probs, target[:, :1], sup, w)
        with pytest.raises(DataError):
            masked_loss_forward(probs, target, np.ones((2, 1, 1)), w)

    def test_nonfinite_rejected(self):
        probs, target, sup, w = single_pixel_case()
        probs = probs.copy()
        probs[0, 0] = np.inf
        with pytest.raises(NumericError):
            masked_loss_forward(probs, target, sup, w)


class TestBackward:
    def test_hand_computed_gradient(self):
        probs, target, sup, w = single_pixel_case()
        grad = masked_loss_backward(probs, target, sup, w)
        assert grad[0, 0, 0, 0] == pytest.approx(-0.25)
        assert grad[0, 1, 0, 0] == pytest.approx(0.25)

    def test_fully_masked_zero_gradient(self):
        probs, target, _, w = single_pixel_case()
        grad = masked_loss_backward(probs, target, np.zeros((1, 1, 1)), w)
        assert np.all(grad == 0)

    def test_weight_scaling(self):
        probs, target, sup, w = single_pixel_case()
        a = masked_loss_backward(probs, target, sup, w)
        b = masked_loss_backward(probs, target, sup, ClassWeights(2.0 * w.weights))
        assert np.allclose(b, 2.0 * a, rtol=1e-15)

    @pytest.mark.parametrize("seed", range(12))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        probs = softmax(rng.normal(size=(2, 5, 4, 4)))
        target = one_hot(rng.integers(0, 5, (2, 4, 4)), 5)
        sup = (rng.random((2, 4, 4)) < 0.6).astype(float)
        w = ClassWeights(rng.uniform(0.2, 4, 5))
        grad = masked_loss_backward(probs, target, sup, w)
        eps = 1e-5
        flat = probs.ravel()
        for idx in rng.choice(flat.size, size=40, replace=False):
            orig = flat[idx]
            flat[idx] = orig + eps
            lp = masked_loss_forward(probs, target, sup, w).total
            flat[idx] = orig - eps
            lm = masked_loss_forward(probs, target, sup, w).total
            flat[idx] = orig
            fd = (lp - lm) / (2 * eps)
            g = grad.ravel()[idx]
            assert abs(fd - g) <= max(1e-4 * max(abs(fd), abs(g)), 1e-9)

    def test_unsupervised_gradient_is_zero(self):
        rng = np.random.default_rng(9)
        probs = softmax(rng.normal(size=(1, 3, 3, 3)))
        target = one_hot(rng.integers(0, 3, (1, 3, 3)), 3)
        sup = (rng.random((1, 3, 3)) < 0.5).astype(float)
        grad = masked_loss_backward(probs, target, sup, ClassWeights.uniform(3))
        assert np.all(grad[:, :, sup[0] == 0] == 0)
