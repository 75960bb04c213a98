"""EDL / EUC losses, annealing, AvU, and the total-loss combiner.

The EDL closed form is cross-checked against a Monte-Carlo estimate of the
Dirichlet-categorical negative log-likelihood, which is the independent oracle
for the formula (the full 10^6-draw version lives in the acceptance suite).
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from osev.losses import (
    AnnealingSchedule,
    BatchPrediction,
    LossWeights,
    NonFiniteLossError,
    annealing_lambda,
    avu_utility,
    edl_loss,
    edl_loss_batch,
    euc_loss,
    euc_loss_grad_evidence,
    softmax_ce_loss,
    total_loss,
)


def mc_dirichlet_nll(y, alpha, draws, seed):
    """Monte-Carlo −ln E_{p~Dir(alpha)}[prod p_k^{y_k}] with a standard error."""
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(alpha, size=draws)
    lik = p[:, int(np.argmax(y))]
    mean = lik.mean()
    se = lik.std(ddof=1) / math.sqrt(draws)
    # delta method: sd of ln(mean)
    return -math.log(mean), se / mean


def test_edl_loss_zero_evidence():
    loss, grad = edl_loss([1.0, 0.0, 0.0], [0.0, 0.0, 0.0])
    assert loss == pytest.approx(math.log(3.0), abs=1e-12)
    np.testing.assert_allclose(grad, [1 / 3 - 1, 1 / 3, 1 / 3], atol=1e-15)


def test_edl_loss_worked_example():
    loss, _ = edl_loss([1.0, 0.0, 0.0], [4.0, 1.0, 0.0])
    assert loss == pytest.approx(math.log(8.0) - math.log(5.0), abs=1e-12)
    assert loss == pytest.approx(0.470004, abs=1e-6)


def test_edl_loss_matches_monte_carlo():
    # light version of the acceptance oracle: 2 instances at 10^5 draws
    rng = np.random.default_rng(7)
    for i in range(2):
        k = int(rng.integers(2, 6))
        e = rng.uniform(0.0, 5.0, size=k)
        y = np.zeros(k)
        y[int(rng.integers(0, k))] = 1.0
        closed, _ = edl_loss(y, e)
        est, se = mc_dirichlet_nll(y, e + 1.0, draws=100_000, seed=100 + i)
        assert abs(closed - est) < 3.0 * se, f"instance {i}: {closed} vs {est} +- {se}"


def test_edl_loss_batch_matches_scalar():
    rng = np.random.default_rng(0)
    e = rng.uniform(0, 4, size=(6, 4))
    labels = rng.integers(0, 4, size=6)
    y = np.eye(4)[labels]
    losses, grads = edl_loss_batch(y, e)
    for i in range(6):
        loss_i, grad_i = edl_loss(y[i], e[i])
        assert losses[i] == pytest.approx(loss_i, abs=1e-15)
        np.testing.assert_allclose(grads[i], grad_i, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 30.0, allow_nan=False), min_size=3, max_size=3), st.integers(0, 2))
def test_edl_loss_non_negative(evidence, true_class):
    y = np.zeros(3)
    y[true_class] = 1.0
    loss, _ = edl_loss(y, evidence)
    assert loss >= 0.0


def test_edl_loss_vanishes_with_strong_evidence():
    y = [1.0, 0.0, 0.0]
    losses = [edl_loss(y, [s, 0.0, 0.0])[0] for s in (10.0, 100.0, 10_000.0)]
    assert losses[0] > losses[1] > losses[2]
    assert losses[-1] < 1e-3


def test_annealing_endpoints_and_midpoint():
    sched = AnnealingSchedule(lambda0=0.01, total_epochs=50)
    assert annealing_lambda(0, sched) == pytest.approx(0.01, abs=1e-15)
    assert annealing_lambda(50, sched) == pytest.approx(1.0, abs=1e-12)
    assert annealing_lambda(25, sched) == pytest.approx(0.1, abs=1e-12)


def test_annealing_monotone_and_clamped():
    sched = AnnealingSchedule(lambda0=0.05, total_epochs=17)
    values = [annealing_lambda(t, sched) for t in range(18)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    with pytest.warns(UserWarning, match="clamping"):
        assert annealing_lambda(18, sched) == 1.0


def test_annealing_rejects_bad_arguments():
    with pytest.raises(ValueError):
        AnnealingSchedule(lambda0=1.5, total_epochs=10)
    with pytest.raises(ValueError):
        AnnealingSchedule(lambda0=0.01, total_epochs=0)
    with pytest.raises(ValueError):
        annealing_lambda(-1, AnnealingSchedule())


def _accurate_two_class_batch(p_star, u):
    """One accurate 2-class sample with chosen max-prob and uncertainty.

    u = 2/S fixes S, p_star fixes the winning alpha; feasible whenever the
    implied evidence stays non-negative.
    """
    s = 2.0 / u
    alpha_win = p_star * s
    e = np.array([[alpha_win - 1.0, s - alpha_win - 1.0]])
    batch = BatchPrediction.from_evidence(np.array([0]), e)
    assert bool(batch.accurate[0])
    assert batch.max_prob[0] == pytest.approx(p_star, abs=1e-9)
    assert batch.uncertainty[0] == pytest.approx(u, abs=1e-9)
    return batch


def test_euc_accurate_sample_value():
    batch = _accurate_two_class_batch(p_star=0.9, u=0.2)
    loss, _, _ = euc_loss(batch, 0.5)
    assert loss == pytest.approx(-0.5 * 0.9 * math.log(0.8), abs=1e-12)
    assert loss == pytest.approx(0.100414, abs=1e-6)


def test_euc_inaccurate_sample_value():
    # K=4 realizes max-prob 0.3 with u=0.7: alpha = [12/7, 4/3, 4/3, 4/3],
    # S = 40/7, p* = 0.3, u = 4/S = 0.7; label 1 makes the sample inaccurate.
    e = np.array([[5.0 / 7.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]])
    batch = BatchPrediction.from_evidence(np.array([1]), e)
    assert not bool(batch.accurate[0])
    assert batch.max_prob[0] == pytest.approx(0.3, abs=1e-12)
    assert batch.uncertainty[0] == pytest.approx(0.7, abs=1e-12)
    loss, _, _ = euc_loss(batch, 0.5)
    assert loss == pytest.approx(-0.5 * 0.7 * math.log(0.7), abs=1e-12)
    assert loss == pytest.approx(0.124836, abs=1e-6)


def test_euc_accurate_confident_sample_is_free():
    # u -> 0 makes ln(1 - u) -> 0; an accurate certain sample costs nothing
    batch = _accurate_two_class_batch(p_star=0.99, u=1e-6)
    loss, _, _ = euc_loss(batch, 0.5)
    assert loss == pytest.approx(0.0, abs=1e-5)


def test_euc_non_negative_on_random_batches():
    rng = np.random.default_rng(5)
    for _ in range(50):
        e = rng.uniform(0, 6, size=(8, 4))
        labels = rng.integers(0, 4, size=8)
        batch = BatchPrediction.from_evidence(labels, e)
        loss, _, _ = euc_loss(batch, float(rng.uniform(0.01, 1.0)))
        assert loss >= 0.0


def test_euc_subset_means_are_batch_size_invariant():
    """Duplicating every sample leaves the loss unchanged."""
    rng = np.random.default_rng(9)
    e = rng.uniform(0, 6, size=(5, 3))
    labels = rng.integers(0, 3, size=5)
    one = euc_loss(BatchPrediction.from_evidence(labels, e), 0.4)[0]
    two = euc_loss(BatchPrediction.from_evidence(np.tile(labels, 2), np.tile(e, (2, 1))), 0.4)[0]
    assert two == pytest.approx(one, abs=1e-12)


def test_euc_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    e = rng.uniform(0.5, 4.0, size=(6, 3))
    labels = rng.integers(0, 3, size=6)
    lam_t = 0.35
    _, grad = euc_loss_grad_evidence(BatchPrediction.from_evidence(labels, e), lam_t)
    eps = 1e-6
    for i in range(e.shape[0]):
        for j in range(e.shape[1]):
            up, down = e.copy(), e.copy()
            up[i, j] += eps
            down[i, j] -= eps
            fd = (
                euc_loss_grad_evidence(BatchPrediction.from_evidence(labels, up), lam_t)[0]
                - euc_loss_grad_evidence(BatchPrediction.from_evidence(labels, down), lam_t)[0]
            ) / (2 * eps)
            assert abs(fd - grad[i, j]) < 1e-6, f"evidence grad mismatch at ({i},{j})"


def test_avu_counts():
    # 2 accurate-certain, 1 accurate-uncertain, 1 inaccurate-uncertain
    e = np.array(
        [
            [9.0, 0.0],  # u = 2/11, accurate, certain
            [9.0, 0.0],
            [0.2, 0.0],  # u = 2/2.2, accurate, uncertain
            [0.0, 0.2],  # inaccurate (label 0), uncertain
        ]
    )
    labels = np.array([0, 0, 0, 0])
    batch = BatchPrediction.from_evidence(labels, e)
    assert avu_utility(batch, u_threshold=0.5) == pytest.approx(0.75)


def test_avu_extremes():
    e = np.array([[9.0, 0.0], [9.0, 0.0]])
    batch = BatchPrediction.from_evidence(np.array([0, 0]), e)
    assert avu_utility(batch, u_threshold=0.99) == 1.0  # all accurate and certain
    assert avu_utility(batch, u_threshold=0.0001) == 0.0  # all accurate but uncertain


def test_total_loss_combination():
    w = LossWeights()
    assert total_loss(1.0, 0.0, 0.0, w) == 1.0
    assert total_loss(1.0, 0.5, 2.0, w) == pytest.approx(1.7)
    assert total_loss(0.0, 0.0, 0.0, w) == 0.0


def test_total_loss_rejects_non_finite():
    with pytest.raises(NonFiniteLossError, match="edl"):
        total_loss(float("nan"), 0.0, 0.0, LossWeights())
    with pytest.raises(NonFiniteLossError, match="ced"):
        total_loss(0.0, 0.0, float("inf"), LossWeights())


def test_loss_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(w_euc=-0.1)


def test_softmax_ce_gradient_sums_to_zero():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal((5, 3))
    y = np.eye(3)[rng.integers(0, 3, size=5)]
    loss, grad = softmax_ce_loss(y, logits)
    assert loss > 0.0
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)
