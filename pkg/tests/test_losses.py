import math

import numpy as np
import pytest

from ctcstack.ctc import ctc_loss_and_grad
from ctcstack.errors import UsageError
from ctcstack.gradcheck import fd_check_logit_grad
from ctcstack.losses import (
    DistillBatch,
    distill_loss_and_grad,
    frame_kl,
    posterior_entropies,
    smoothed_ctc_loss_and_grad,
    uniform_kl_and_grad,
)
from ctcstack.model import Posteriors
from ctcstack.numerics import Rng, softmax_rows


def random_posteriors(rng, t_len=4, n_labels=5):
    logits = rng.uniform(-1.5, 1.5, (t_len, n_labels))
    return Posteriors(softmax_rows(logits), logits)


def entropy(p):
    p = np.asarray(p)
    return float(-np.sum(np.where(p > 0, p * np.log(p), 0.0)))


class TestFrameKl:
    def test_identity(self):
        p = np.array([0.2, 0.3, 0.5])
        assert frame_kl(p, p) == pytest.approx(0.0, abs=1e-15)

    def test_analytic_two_class(self):
        assert frame_kl([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-12)

    def test_zero_in_q_under_p_mass(self):
        assert frame_kl([0.5, 0.5], [1.0, 0.0]) == math.inf

    def test_zero_p_terms_ignored(self):
        assert frame_kl([0.0, 1.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-12)

    def test_matches_cross_entropy_minus_entropy(self):
        rng = Rng(1)
        for _ in range(25):
            p = softmax_rows(rng.uniform(-2, 2, (1, 6)))[0]
            q = softmax_rows(rng.uniform(-2, 2, (1, 6)))[0]
            ce = float(-np.sum(p * np.log(q)))
            kl = frame_kl(p, q)
            assert kl >= 0
            assert kl == pytest.approx(ce - entropy(p), abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(UsageError):
            frame_kl([0.5, 0.5], [1.0])


class TestDistill:
    def test_equal_distributions_hit_entropy_floor(self):
        post = random_posteriors(Rng(2))
        loss, grad = distill_loss_and_grad(DistillBatch(post.probs.copy(), post))
        floor = sum(entropy(row) for row in post.probs)
        assert loss == pytest.approx(floor, abs=1e-12)
        assert np.all(grad == 0.0)

    def test_uniform_two_class(self):
        logits = np.zeros((1, 2))
        post = Posteriors(softmax_rows(logits), logits)
        loss, _ = distill_loss_and_grad(DistillBatch(np.full((1, 2), 0.5), post))
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_grad_rows_sum_to_zero(self):
        rng = Rng(3)
        teacher = softmax_rows(rng.uniform(-2, 2, (5, 4)))
        student = random_posteriors(rng, 5, 4)
        _, grad = distill_loss_and_grad(DistillBatch(teacher, student))
        assert np.abs(grad.sum(axis=1)).max() <= 1e-12

    def test_grad_matches_finite_differences(self):
        rng = Rng(4)
        teacher = softmax_rows(rng.uniform(-2, 2, (4, 5)))
        logits = rng.uniform(-1, 1, (4, 5))

        def loss_fn(posteriors):
            return distill_loss_and_grad(DistillBatch(teacher, posteriors))

        assert fd_check_logit_grad(logits, loss_fn) <= 1e-4

    def test_shape_mismatch(self):
        post = random_posteriors(Rng(5), 3, 4)
        with pytest.raises(UsageError):
            distill_loss_and_grad(DistillBatch(np.full((3, 5), 0.2), post))

    def test_gradient_descent_drives_student_to_teacher(self):
        # unconstrained logits, plain gradient steps on the CE objective
        rng = Rng(6)
        teacher = softmax_rows(rng.uniform(-2, 2, (3, 4)))
        logits = rng.uniform(-1, 1, (3, 4))
        for _ in range(1000):
            post = Posteriors(softmax_rows(logits), logits)
            _, grad = distill_loss_and_grad(DistillBatch(teacher, post))
            logits = logits - 1.0 * grad
        final = softmax_rows(logits)
        assert np.abs(final - teacher).max() < 1e-3


class TestSmoothed:
    def test_alpha_zero_is_plain_ctc(self):
        post = random_posteriors(Rng(7))
        target = [1, 2]
        plain = ctc_loss_and_grad(post, target)
        combo = smoothed_ctc_loss_and_grad(post, target, 0.0)
        assert combo.loss == plain.loss
        np.testing.assert_array_equal(combo.grad, plain.grad)

    def test_alpha_one_uniform_posteriors(self):
        n = 4
        logits = np.zeros((3, n))
        post = Posteriors(softmax_rows(logits), logits)
        result = smoothed_ctc_loss_and_grad(post, [1], 1.0)
        assert result.loss == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(result.grad, 0.0, atol=1e-12)

    def test_composition_at_alpha_005(self):
        post = random_posteriors(Rng(8), t_len=5)
        target = [2, 1, 3]
        base = ctc_loss_and_grad(post, target)
        reg_loss, reg_grad = uniform_kl_and_grad(post)
        combo = smoothed_ctc_loss_and_grad(post, target, 0.05)
        assert combo.loss == 0.95 * base.loss + 0.05 * reg_loss
        np.testing.assert_array_equal(combo.grad, 0.95 * base.grad + 0.05 * reg_grad)

    def test_exact_linearity_in_alpha(self):
        post = random_posteriors(Rng(9), t_len=4)
        target = [1, 2]
        a = ctc_loss_and_grad(post, target).loss
        b = uniform_kl_and_grad(post)[0]
        for alpha in (0.0, 0.25, 0.5, 1.0):
            combo = smoothed_ctc_loss_and_grad(post, target, alpha)
            if alpha == 0.0:
                assert combo.loss == a
            elif alpha == 1.0:
                assert combo.loss == b
            else:
                assert combo.loss == (1 - alpha) * a + alpha * b

    def test_alpha_out_of_range(self):
        post = random_posteriors(Rng(10))
        for alpha in (-0.1, 1.1):
            with pytest.raises(UsageError):
                smoothed_ctc_loss_and_grad(post, [1], alpha)

    def test_impossible_alignment_stays_infinite(self):
        logits = np.zeros((1, 3))
        post = Posteriors(softmax_rows(logits), logits)
        result = smoothed_ctc_loss_and_grad(post, [1, 2], 0.05)
        assert result.loss == math.inf
        assert np.all(result.grad == 0.0)

    def test_grad_matches_finite_differences(self):
        rng = Rng(11)
        logits = rng.uniform(-1, 1, (6, 4))
        target = [1, 3]

        def loss_fn(posteriors):
            result = smoothed_ctc_loss_and_grad(posteriors, target, 0.05)
            return result.loss, result.grad

        assert fd_check_logit_grad(logits, loss_fn) <= 1e-4

    def test_regularizer_is_log_k_minus_entropy(self):
        post = random_posteriors(Rng(12), t_len=3, n_labels=6)
        reg_loss, _ = uniform_kl_and_grad(post)
        expected = sum(math.log(6) - h for h in posterior_entropies(post.probs))
        assert reg_loss == pytest.approx(expected, abs=1e-12)
