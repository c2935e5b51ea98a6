import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdnloop.metrics import (RunTrace, compute_report, decision_latency, effectiveness, latency_increase,
                             stability)

LINK = ("link", 1)


def trace(delay, tput=None, **kw):
    delay = np.asarray(delay, dtype=float)
    tput = np.ones_like(delay) if tput is None else tput
    return RunTrace(10.0, delay, tput, **kw)


def mean2(xs):
    total = 0.0
    for x in xs:
        total += x
    return total / len(xs)


def var2(xs):
    """Two-pass population variance."""
    m = mean2(xs)
    total = 0.0
    for x in xs:
        total += (x - m) ** 2
    return total / len(xs)


def effectiveness_oracle(delay, tput, w):
    first, last = mean2(delay[:w]), mean2(delay[-w:])
    dr = 0.0 if first <= 0 else min(max((first - last) / first, 0.0), 1.0)
    post = tput[w:]
    m = mean2(post)
    cv = 0.0 if m <= 0 else math.sqrt(var2(post)) / m
    return dr, cv, 0.5 * dr + 0.5 * (1 - min(1.0, cv))


def stability_oracle(delay, tput, jref, vref):
    deltas = [delay[i + 1] - delay[i] for i in range(len(delay) - 1)]
    jit = math.sqrt(var2(deltas))
    var = var2(tput)
    return jit, var, 1.0 / (1.0 + min(jit / jref, 1.0) + min(var / vref, 1.0))


def random_trace(rng, n=None):
    n = n or int(rng.integers(20, 300))
    return trace(rng.uniform(1, 100, n), rng.uniform(0, 50, n))


# ---------------------------------------------------------------- latency

def test_latency_formula_example():
    tr = trace(np.zeros(30), onsets=[(10, {LINK})], dispatches=[(12, {LINK}, 1.5)])
    st_ = decision_latency(tr)
    assert st_.mean_ms == 21.5 and st_.matched == 1 and st_.unmatched == 0


def test_same_tick_dispatch_costs_only_pipeline():
    tr = trace(np.zeros(30), onsets=[(4, {LINK})], dispatches=[(4, {LINK}, 2.25)])
    assert decision_latency(tr).values_ms == (2.25,)


def test_no_anomalies_gives_empty_statistic():
    st_ = decision_latency(trace(np.zeros(5)))
    assert st_.empty and math.isnan(st_.mean_ms)


def test_unrelated_or_late_dispatches_do_not_match():
    tr = trace(np.zeros(100), onsets=[(10, {LINK}), (20, {LINK}, 25)],
               dispatches=[(11, {("link", 9)}, 1.0), (70, {LINK}, 1.0)])
    st_ = decision_latency(tr, timeout_ticks=50)
    assert st_.matched == 0 and st_.unmatched == 2


def test_matching_stops_when_anomaly_clears():
    tr = trace(np.zeros(100), onsets=[(10, {LINK}, 15)], dispatches=[(16, {LINK}, 1.0)])
    assert decision_latency(tr).matched == 0
    tr = trace(np.zeros(100), onsets=[(10, {LINK}, 16)], dispatches=[(16, {LINK}, 1.0)])
    assert decision_latency(tr).values_ms == (61.0,)


def test_latency_matches_event_oracle(rng):
    n = 400
    onsets, disp = [], []
    for t in sorted(rng.choice(n, 40, replace=False)):
        onsets.append((int(t), {("node", int(rng.integers(5)))}))
    for t in sorted(rng.choice(n, 60, replace=False)):
        disp.append((int(t), {("node", int(rng.integers(5)))}, float(rng.uniform(1, 6))))
    # hand oracle: scan forward per onset
    expect = []
    for t0, touched in onsets:
        for t, res, pipe in disp:
            if t0 <= t <= t0 + 50 and touched & res:
                expect.append((t - t0) * 10.0 + pipe)
                break
    st_ = decision_latency(trace(np.zeros(n), onsets=onsets, dispatches=disp))
    assert list(st_.values_ms) == expect
    assert st_.matched + st_.unmatched == len(onsets)
    assert st_.mean_ms == pytest.approx(mean2(expect), abs=1e-12)


# ---------------------------------------------------------------- effectiveness

def test_constant_trace_effectiveness():
    tput = np.array([2.0, 4.0] * 50)
    dr, cv, score = effectiveness(trace(np.full(100, 5.0), tput), 10)
    assert dr == 0.0
    assert cv == pytest.approx(1 / 3)
    assert score == pytest.approx(0.5 * (1 - 1 / 3))


def test_halved_delay_scores_three_quarters():
    delay = np.r_[np.full(10, 20.0), np.full(10, 10.0)]
    assert effectiveness(trace(delay), 10)[2] == 0.75


def test_zero_first_window_delay_reduction_is_zero():
    assert effectiveness(trace(np.r_[np.zeros(10), np.ones(10)]), 10)[0] == 0.0


def test_effectiveness_preconditions():
    with pytest.raises(ValueError):
        effectiveness(trace(np.ones(10)), 10)


def test_effectiveness_matches_two_pass_oracle(rng):
    for _ in range(100):
        tr = random_trace(rng)
        w = int(rng.integers(1, len(tr) // 2))
        got = effectiveness(tr, w)
        want = effectiveness_oracle(tr.mean_delay.tolist(), tr.throughput.tolist(), w)
        assert np.allclose(got, want, rtol=0, atol=1e-9)


# ---------------------------------------------------------------- stability

def test_constant_trace_is_perfectly_stable():
    assert stability(trace(np.full(20, 3.0), np.full(20, 7.0)), 1.0, 1.0) == (0.0, 0.0, 1.0)


def test_alternating_delay_has_unit_jitter():
    # an even number of +1/-1 deltas, so their mean is exactly 0
    jit, _, _ = stability(trace(np.array([0.0, 1.0] * 50 + [0.0])), 10.0, 1.0)
    assert jit == 1.0


def test_stability_matches_two_pass_oracle(rng):
    for _ in range(100):
        tr = random_trace(rng)
        jref, vref = rng.uniform(1, 100, 2)
        got = stability(tr, jref, vref)
        want = stability_oracle(tr.mean_delay.tolist(), tr.throughput.tolist(), jref, vref)
        assert np.allclose(got, want, rtol=0, atol=1e-9)


def test_stability_preconditions():
    with pytest.raises(ValueError):
        stability(trace([1.0]), 1.0, 1.0)
    with pytest.raises(ValueError):
        stability(trace([1.0, 2.0]), 0.0, 1.0)


# ---------------------------------------------------------------- properties

_seeds = st.integers(0, 2**32 - 1)


@given(_seeds, st.floats(0.01, 100))
@settings(max_examples=60, deadline=None)
def test_delay_scale_invariants(seed, c):
    tr = random_trace(np.random.default_rng(seed))
    scaled = trace(tr.mean_delay * c, tr.throughput)
    j0 = stability(tr, 1e6, 1e6)[0]
    j1 = stability(scaled, 1e6, 1e6)[0]
    assert j1 == pytest.approx(c * j0, rel=1e-9)
    w = len(tr) // 3
    assert effectiveness(scaled, w)[0] == pytest.approx(effectiveness(tr, w)[0], abs=1e-12)


@given(_seeds, st.floats(-1e3, 1e3))
@settings(max_examples=60, deadline=None)
def test_throughput_translation_invariance(seed, c):
    tr = random_trace(np.random.default_rng(seed))
    shifted = trace(tr.mean_delay, tr.throughput + c)
    assert stability(shifted, 1.0, 1.0)[1] == pytest.approx(stability(tr, 1.0, 1.0)[1], rel=1e-6, abs=1e-6)


@given(_seeds)
@settings(max_examples=60, deadline=None)
def test_scores_bounded(seed):
    rng = np.random.default_rng(seed)
    tr = random_trace(rng)
    rep = compute_report(tr, float(rng.uniform(0.1, 10)), float(rng.uniform(0.1, 10)))
    assert 0.0 <= rep.effectiveness_score <= 1.0
    assert 0.0 <= rep.stability_score <= 1.0


@given(_seeds, st.floats(0.01, 5))
@settings(max_examples=60, deadline=None)
def test_spread_never_raises_stability(seed, scale):
    tr = random_trace(np.random.default_rng(seed))
    # mean-preserving spread: amplify each value's deviation from the mean
    t = tr.throughput
    noisy = trace(tr.mean_delay, t + (t - t.mean()) * scale)
    assert noisy.throughput.mean() == pytest.approx(t.mean())
    assert stability(noisy, 5.0, 1e5)[2] <= stability(tr, 5.0, 1e5)[2]


# ---------------------------------------------------------------- latency increase

def test_latency_increase_resets_at_each_fault():
    d = np.array([1.0, 2, 3, 4, 5, 6])
    assert latency_increase(d, [2, 4]).tolist() == [0, 0, 0, 1, 0, 1]
    assert latency_increase(d, []).tolist() == [0.0] * 6


def test_report_shrinks_window_and_serialises_nan():
    rep = compute_report(trace(np.arange(10.0)), 1.0, 1.0)
    d = rep.to_dict()
    assert d["decision_latency_ms"] is None
    assert rep.delay_reduction == 0.0  # delay grows
