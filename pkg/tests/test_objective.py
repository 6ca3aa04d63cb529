import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from probepool.errors import DimensionError, NoPositivesError
from probepool.numerics import grad_check, rng_stream
from probepool.objective import (
    AslConfig,
    asl_loss,
    average_precision,
    mean_average_precision,
    top1_accuracy,
)


def ap_pairwise_oracle(scores, labels):
    """O(N^2) AP: rank of i = # items sorted strictly before it under
    descending stable order."""
    n = len(scores)
    total, n_pos = 0.0, 0
    for i in range(n):
        if not labels[i]:
            continue
        n_pos += 1
        before_or_self = [
            j
            for j in range(n)
            if scores[j] > scores[i] or (scores[j] == scores[i] and j <= i)
        ]
        rank = len(before_or_self)
        hits = sum(1 for j in before_or_self if labels[j])
        total += hits / rank
    return total / n_pos


class TestAslLoss:
    def test_perfect_positive_vanishes(self):
        loss, _ = asl_loss(np.array([30.0]), np.array([1.0]))
        assert loss == pytest.approx(0.0, abs=1e-6)

    def test_reduces_to_bce(self):
        cfg = AslConfig(gamma_pos=0.0, gamma_neg=0.0, margin=0.0)
        loss, _ = asl_loss(np.array([0.0]), np.array([1.0]), cfg)
        assert loss == pytest.approx(np.log(2.0), abs=1e-6)

    def test_negative_branch_value(self):
        # p = 0.5, margin 0.05 -> p_m = 0.45; (0.45)^4 * (-log 0.55)
        cfg = AslConfig(gamma_pos=0.0, gamma_neg=4.0, margin=0.05, eps=0.0 + 1e-300)
        loss, _ = asl_loss(np.array([0.0]), np.array([0.0]), cfg)
        assert loss == pytest.approx(0.45**4 * -np.log(0.55), rel=1e-9)
        assert loss == pytest.approx(0.0245, abs=5e-4)

    def test_below_margin_contributes_nothing(self):
        cfg = AslConfig(margin=0.6)
        loss, dlogits = asl_loss(np.array([0.0]), np.array([0.0]), cfg)
        assert loss == 0.0
        assert dlogits[0] == 0.0

    def test_loss_nonnegative(self):
        rng = rng_stream(3, 0)
        for _ in range(50):
            logits = rng.standard_normal(5) * 4
            labels = (rng.random(5) < 0.5).astype(float)
            loss, _ = asl_loss(logits, labels)
            assert loss >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            asl_loss(np.zeros(3), np.zeros(4))

    @pytest.mark.parametrize("seed", range(10))
    def test_gradient_matches_finite_differences(self, seed):
        rng = rng_stream(seed, 1)
        cfg = AslConfig()
        while True:
            logits = rng.standard_normal(6) * 2
            labels = (rng.random(6) < 0.5).astype(float)
            p = 1.0 / (1.0 + np.exp(-logits))
            if np.all(np.abs(p - cfg.margin) > 1e-3):  # stay off the p_m kink
                break
        _, dlogits = asl_loss(logits, labels, cfg)
        err = grad_check(lambda t: asl_loss(t, labels, cfg)[0], logits, dlogits, eps=1e-5)
        assert err < 1e-5

    def test_batch_mean_matches_single_rows(self):
        rng = rng_stream(9, 1)
        logits = rng.standard_normal((4, 3))
        labels = (rng.random((4, 3)) < 0.5).astype(float)
        batch_loss, batch_grad = asl_loss(logits, labels)
        row_losses = [asl_loss(logits[i], labels[i])[0] for i in range(4)]
        assert batch_loss == pytest.approx(np.mean(row_losses), rel=1e-12)
        for i in range(4):
            _, g = asl_loss(logits[i], labels[i])
            np.testing.assert_allclose(batch_grad[i], g / 4.0, rtol=1e-12)


class TestAveragePrecision:
    def test_perfect_ranking(self):
        assert average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0

    def test_hand_enumerated(self):
        ap = average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
        assert ap == pytest.approx((1.0 + 2.0 / 3.0) / 2.0)

    def test_no_positives_raises(self):
        with pytest.raises(NoPositivesError):
            average_precision([0.5, 0.4], [0, 0])

    def test_all_equal_scores_stable_order(self):
        # single positive at index k of n equal scores has precision 1/(k+1)
        for k in range(4):
            labels = np.zeros(4)
            labels[k] = 1
            assert average_precision(np.ones(4), labels) == pytest.approx(1.0 / (k + 1))

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_pairwise_oracle_with_ties(self, seed):
        rng = rng_stream(seed, 2)
        scores = rng.integers(0, 4, size=12).astype(float)  # heavy ties
        labels = (rng.random(12) < 0.4).astype(int)
        if labels.sum() == 0:
            labels[0] = 1
        assert average_precision(scores, labels) == pytest.approx(
            ap_pairwise_oracle(scores, labels), rel=1e-12
        )

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_invariant_to_monotone_transform(self, seed):
        rng = rng_stream(seed, 3)
        scores = rng.standard_normal(10)
        labels = (rng.random(10) < 0.5).astype(int)
        if labels.sum() == 0:
            labels[3] = 1
        a = average_precision(scores, labels)
        b = average_precision(np.exp(2.0 * scores) + 5.0, labels)
        assert a == pytest.approx(b, abs=1e-12)


class TestMeanAveragePrecision:
    def test_single_class_equals_ap(self):
        scores = np.array([[0.9], [0.1], [0.5]])
        labels = np.array([[1], [0], [1]])
        assert mean_average_precision(scores, labels) == average_precision(
            scores[:, 0], labels[:, 0]
        )

    def test_empty_class_skipped_not_zeroed(self):
        scores = np.array([[0.9, 0.2], [0.1, 0.8]])
        labels = np.array([[1, 0], [0, 0]])
        assert mean_average_precision(scores, labels) == 1.0

    def test_labels_as_scores_is_perfect(self):
        rng = rng_stream(5, 4)
        labels = (rng.random((12, 4)) < 0.4).astype(float)
        labels[:, 0] = 1.0
        assert mean_average_precision(labels, labels) == 1.0

    def test_matches_quadratic_oracle(self):
        rng = rng_stream(6, 5)
        scores = rng.standard_normal((20, 4))
        labels = (rng.random((20, 4)) < 0.3).astype(int)
        labels[0] = 1
        expected = np.mean(
            [
                ap_pairwise_oracle(scores[:, c], labels[:, c])
                for c in range(4)
                if labels[:, c].sum() > 0
            ]
        )
        assert mean_average_precision(scores, labels) == pytest.approx(expected, rel=1e-12)

    def test_range(self):
        rng = rng_stream(7, 6)
        scores = rng.standard_normal((15, 3))
        labels = (rng.random((15, 3)) < 0.5).astype(int)
        labels[0] = 1
        assert 0.0 <= mean_average_precision(scores, labels) <= 1.0


class TestTop1Accuracy:
    def test_identity_scores(self):
        assert top1_accuracy(np.eye(4), np.arange(4)) == 1.0

    def test_antidiagonal(self):
        assert top1_accuracy(np.eye(2)[:, ::-1], np.arange(2)) == 0.0

    def test_matches_argmax_count(self):
        rng = rng_stream(8, 7)
        scores = rng.standard_normal((30, 5))
        targets = rng.integers(0, 5, size=30)
        expected = sum(int(scores[i].argmax() == targets[i]) for i in range(30)) / 30
        assert top1_accuracy(scores, targets) == pytest.approx(expected)
