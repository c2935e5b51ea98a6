import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kdnloop import Scenario, parse_config
from kdnloop.sim import FaultEvent, SimParams, inject_fault, make_world, step
from kdnloop.telemetry import (CSV_HEADER, EPSILON, FIELDS, GAMMA, LAMBDA, PreprocessConfig, SmoothingState,
                               TelemetryCollector, TelemetryCsvWriter, TelemetrySnapshot, preprocess, sample)

from conftest import diamond_world, make_topology


def _snap(values, tick=0):
    values = np.asarray(values, dtype=np.float64)
    return TelemetrySnapshot(tick, np.arange(len(values)), values)


def test_idle_two_node_world_reads_base_delay_and_zeros():
    topo = make_topology(2, [(0, 1)], [10.0], base_delay=0.7)
    snap = sample(make_world(topo, [], SimParams()))
    assert len(snap) == 2
    for r in snap.records:
        assert (r.lam, r.delta, r.gamma, r.eta) == (0.7, 0.0, 0.0, 0.0)


def test_failed_node_reads_penalty_delay_and_zero_load():
    w = diamond_world(roles=["plc"] * 4, task=10.0)
    w = step(inject_fault(w, FaultEvent("node_failure", 1, 1, 5)))
    snap = sample(w)
    assert len(snap) == 4
    r = snap.records[1]
    assert r.gamma == 0.0
    assert r.lam == w.params.penalty_delay


def test_default_world_has_fifty_records():
    world = Scenario(parse_config({})).world()
    assert len(sample(world)) == 50


def test_alpha_one_leaves_values_untouched():
    raw = _snap([[1.0, 2.0, 0.3, 4.0, 0.0], [5.0, 6.0, 0.7, 8.0, 0.0]])
    out = preprocess(raw, PreprocessConfig(alpha=1.0), SmoothingState())
    assert np.array_equal(out.values[:, :4], raw.values[:, :4])


def test_delay_over_threshold_sets_flag():
    out = preprocess(_snap([[12.0, 0.0, 0.0, 0.0, 0.0]]), PreprocessConfig(delay_thresh=10.0))
    assert out.values[0, EPSILON] == 1.0


def test_below_all_thresholds_clears_flag():
    out = preprocess(_snap([[1.0, 0.0, 0.1, 1.0, 1.0]]), PreprocessConfig(delay_thresh=10.0))
    assert out.values[0, EPSILON] == 0.0


@pytest.mark.parametrize("alpha", [0.1, 0.3, 0.5, 0.9])
def test_smoothing_converges_geometrically(alpha):
    cfg = PreprocessConfig(alpha=alpha)
    state = SmoothingState()
    s0, x = 100.0, 4.0
    preprocess(_snap([[s0, 0, 0, 0, 0]], 0), cfg, state)
    for t in range(1, 11):
        out = preprocess(_snap([[x, 0, 0, 0, 0]], t), cfg, state)
    # iterate s <- a x + (1 - a) s as the oracle
    s = s0
    for _ in range(10):
        s = alpha * x + (1 - alpha) * s
    got = out.values[0, LAMBDA]
    assert got == pytest.approx(s, abs=1e-12)
    assert abs(got - x) <= (1 - alpha) ** 10 * abs(s0 - x) + 1e-12


def test_invalid_alpha_rejected():
    with pytest.raises(ValueError, match="alpha"):
        preprocess(_snap([[0, 0, 0, 0, 0]]), PreprocessConfig(alpha=0.0))


def test_collector_keeps_ticks_aligned():
    w = diamond_world()
    col = TelemetryCollector(PreprocessConfig())
    for t in range(3):
        snap = col.collect(w)
        assert snap.tick == t
        assert {r.tick for r in snap.records} == {t}
        w = step(w)


def test_csv_dump_header_and_rows():
    fh = io.StringIO()
    wr = TelemetryCsvWriter(fh)
    wr.write(_snap([[1.0, 2.0, 0.5, 3.0, 1.0]], tick=7))
    lines = fh.getvalue().splitlines()
    assert lines[0] == ",".join(CSV_HEADER) == "tick,node_id,lambda,delta,gamma,eta,epsilon"
    assert lines[1] == "7,0,1.000000,2.000000,0.500000,3.000000,1"


_rows = arrays(np.float64, st.tuples(st.integers(1, 8), st.just(len(FIELDS))),
               elements=st.floats(0, 200, allow_nan=False))


@given(_rows)
@settings(max_examples=60, deadline=None)
def test_flags_idempotent_and_normalised_in_range(vals):
    vals[:, GAMMA] = np.clip(vals[:, GAMMA], 0, 1)
    cfg = PreprocessConfig(delay_thresh=50.0, queue_thresh=80.0)
    once = preprocess(_snap(vals), cfg)
    twice = preprocess(once, cfg)
    assert np.array_equal(once.flags, twice.flags)
    assert ((once.normalized >= 0) & (once.normalized <= 1)).all()


@given(_rows, st.integers(0, 3), st.floats(0, 100))
@settings(max_examples=60, deadline=None)
def test_raising_a_field_never_clears_a_flag(vals, col, bump):
    cfg = PreprocessConfig(delay_thresh=50.0, queue_thresh=80.0)
    before = preprocess(_snap(vals), cfg).flags
    up = vals.copy()
    up[:, col] += bump
    after = preprocess(_snap(up), cfg).flags
    assert (after >= before).all()
