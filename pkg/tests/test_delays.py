"""Arrival probabilities, waiting times, thresholds, and the slow/fast split.

Waiting times are integers but thresholds are real, so the realized
slow probability of worker i is (1−p_i)^⌊τ_i⌋ — slightly above the
nominal q₁.  The statistical tests below assert against those exact
values, not against q₁ itself.
"""

import math

import numpy as np
import pytest

from stalegrad.delays import (
    DelayModel,
    assign_component,
    default_arrival_probs,
    delay_threshold,
    draw_waiting_time,
)
from stalegrad.errors import InvalidConfigError
from stalegrad.objectives import FAST, SLOW


def exact_slow_probability(q1: float, p: float) -> float:
    return (1.0 - p) ** math.floor(math.log(q1) / math.log1p(-p))


def test_arrival_probs_are_proportional_to_rank():
    assert np.allclose(default_arrival_probs(3), [1 / 6, 2 / 6, 3 / 6], atol=1e-15)
    assert np.allclose(default_arrival_probs(4), [0.1, 0.2, 0.3, 0.4], atol=1e-15)
    assert math.fsum(default_arrival_probs(7)) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(InvalidConfigError):
        default_arrival_probs(0)


def test_threshold_examples():
    # (1-p)^tau = q1 solved for tau
    assert math.isclose(delay_threshold(0.1, 0.9), 1.0, rel_tol=1e-12)
    assert delay_threshold(0.1, 0.25) == 8.003922779651093
    for p in default_arrival_probs(7):
        tau = delay_threshold(0.1, float(p))
        assert math.isclose((1 - p) ** tau, 0.1, rel_tol=1e-9)


def test_threshold_tends_to_zero_as_q1_grows():
    # q1 -> 1 means "everything is slow enough to count as fast"
    assert delay_threshold(0.999999, 0.3) < 1e-4


def test_threshold_validation():
    with pytest.raises(InvalidConfigError):
        delay_threshold(0.1, 0.0)
    with pytest.raises(InvalidConfigError):
        delay_threshold(0.1, 1.0)
    with pytest.raises(InvalidConfigError) as err:
        delay_threshold(0.0, 0.5)
    assert "delay.slow_weight" in str(err.value)
    with pytest.raises(InvalidConfigError):
        delay_threshold(1.0, 0.5)


def test_waiting_time_support():
    rng = np.random.default_rng(1)
    waits = [draw_waiting_time(0.9, rng) for _ in range(500)]
    assert min(waits) >= 1
    assert all(isinstance(w, int) for w in waits)
    assert all(draw_waiting_time(1.0, rng) == 1 for _ in range(20))
    with pytest.raises(InvalidConfigError):
        draw_waiting_time(0.0, rng)
    with pytest.raises(InvalidConfigError):
        draw_waiting_time(1.5, rng)


def test_waiting_time_moments():
    rng = np.random.default_rng(0)
    waits = np.array([draw_waiting_time(0.5, rng) for _ in range(100_000)])
    assert 1.97 <= waits.mean() <= 2.03  # E = 1/p = 2
    frac_gt_one = float(np.mean(waits > 1))
    assert 0.494 <= frac_gt_one <= 0.506  # P{T > 1} = 1 − p


def test_assign_component():
    threshold = delay_threshold(0.1, 0.25)  # 8.0039...
    assert assign_component(9, threshold) == SLOW
    assert assign_component(8, threshold) == FAST  # 8 < 8.0039, not slow
    assert assign_component(1, threshold) == FAST


def test_realized_slow_fractions_match_floor_law():
    """Per-worker slow fractions sit at (1−p)^⌊τ⌋, not at the nominal q₁."""
    model = DelayModel.build(7, 0.1)
    rng = np.random.default_rng(2)
    draws = 20_000
    fractions = []
    for worker in range(7):
        p = float(model.arrival_probs[worker])
        expected = exact_slow_probability(0.1, p)
        slow = sum(
            model.draw_ticket(worker, 1, 0.0, rng).component == SLOW for _ in range(draws)
        )
        frac = slow / draws
        fractions.append(frac)
        se = math.sqrt(expected * (1 - expected) / draws)
        assert abs(frac - expected) <= 4 * se
    pooled = float(np.mean(fractions))
    pooled_expected = float(
        np.mean([exact_slow_probability(0.1, float(p)) for p in model.arrival_probs])
    )
    assert math.isclose(pooled_expected, 0.10714408167237031, rel_tol=1e-12)
    assert abs(pooled - pooled_expected) <= 4 * math.sqrt(
        pooled_expected * (1 - pooled_expected) / (7 * draws)
    )


def test_ticket_fields_and_determinism():
    model = DelayModel.build(4, 0.1)
    t1 = model.draw_ticket(2, 5, 10.0, np.random.default_rng(42))
    t2 = model.draw_ticket(2, 5, 10.0, np.random.default_rng(42))
    assert t1 == t2
    assert t1.worker_id == 2 and t1.dispatch_iteration == 5
    assert t1.return_clock == 10.0 + t1.waiting_time
    assert t1.component == assign_component(t1.waiting_time, float(model.thresholds[2]))


def test_single_draw_serves_schedule_and_component():
    """The wait on the ticket is the same draw that decided the component."""
    model = DelayModel.build(7, 0.1)
    rng = np.random.default_rng(6)
    for _ in range(2000):
        worker = int(rng.integers(7))
        before = np.random.default_rng(int(rng.integers(2**31)))
        ticket = model.draw_ticket(worker, 1, 3.0, before)
        threshold = float(model.thresholds[worker])
        want = SLOW if ticket.waiting_time > threshold else FAST
        assert ticket.component == want


def test_single_worker_is_always_fast():
    model = DelayModel.build(1, 0.1)
    assert model.arrival_probs[0] == 1.0
    assert math.isinf(model.thresholds[0])
    rng = np.random.default_rng(8)
    for _ in range(50):
        ticket = model.draw_ticket(0, 1, 0.0, rng)
        assert ticket.waiting_time == 1
        assert ticket.component == FAST


def test_build_validation():
    with pytest.raises(InvalidConfigError):
        DelayModel.build(0, 0.1)
    with pytest.raises(InvalidConfigError) as err:
        DelayModel.build(4, 1.2)
    assert "delay.slow_weight" in str(err.value)
    with pytest.raises(InvalidConfigError):
        DelayModel.build(4, 0.1, arrival_probs=[0.5, 0.5])  # wrong length
