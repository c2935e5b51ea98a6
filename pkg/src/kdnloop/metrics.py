"""Decision latency, control effectiveness and stability over run traces."""

from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class RunTrace:
    """Per-tick series of one run plus the event lists used for latency matching.

    ``onsets`` holds ``(tick, touched)`` or ``(tick, touched, end_tick)``
    and ``dispatches`` holds ``(tick, touched, pipeline_ms)`` where
    ``touched`` is a set of ``(kind, id)`` resource keys. ``end_tick`` is the
    first tick the anomaly is no longer flagged.
    """

    dt: float
    mean_delay: np.ndarray
    throughput: np.ndarray
    queue: np.ndarray = None
    cpu: np.ndarray = None
    onsets: list = field(default_factory=list)
    dispatches: list = field(default_factory=list)
    enforcement_latency: np.ndarray = None

    def __post_init__(self):
        self.mean_delay = np.asarray(self.mean_delay, dtype=np.float64)
        self.throughput = np.asarray(self.throughput, dtype=np.float64)
        if self.mean_delay.shape != self.throughput.shape or self.mean_delay.ndim != 1:
            raise ValueError("mean_delay and throughput must be 1-d and the same length")

    def __len__(self):
        return len(self.mean_delay)


@dataclass(frozen=True)
class LatencyStat:
    mean_ms: float
    values_ms: tuple
    matched: int
    unmatched: int

    @property
    def empty(self):
        return self.matched == 0


def decision_latency(trace: RunTrace, timeout_ticks: int = 50) -> LatencyStat:
    """Onset -> first overlapping dispatch, in ms.

    A dispatch answers an anomaly when it lands no later than ``timeout_ticks``
    after the onset and no later than the tick the anomaly cleared.
    """
    dispatches = sorted(trace.dispatches, key=lambda d: d[0])
    vals, unmatched = [], 0
    for onset in trace.onsets:
        t0, touched = onset[0], onset[1]
        last = t0 + timeout_ticks
        if len(onset) > 2 and onset[2] is not None:
            last = min(last, onset[2])
        hit = None
        for t, res, pipe in dispatches:
            if t < t0:
                continue
            if t > last:
                break
            if not set(touched).isdisjoint(res):
                hit = (t - t0) * trace.dt + pipe
                break
        if hit is None:
            unmatched += 1
        else:
            vals.append(float(hit))
    mean = float(np.mean(vals)) if vals else float("nan")
    return LatencyStat(mean, tuple(vals), len(vals), unmatched)


def coefficient_of_variation(x: np.ndarray) -> float:
    m = float(np.mean(x)) if len(x) else 0.0
    if m <= 0:
        return 0.0
    return float(np.std(x) / m)


def effectiveness(trace: RunTrace, baseline_window: int, w_delay: float = 0.5, w_tput: float = 0.5) -> tuple:
    """(delay_reduction, throughput_variability, effectiveness_score).

    Throughput variability is measured over the ticks after the first
    ``baseline_window``.
    """
    n = len(trace)
    if n <= baseline_window:
        raise ValueError(f"trace length {n} must exceed baseline_window {baseline_window}")
    if baseline_window < 1:
        raise ValueError("baseline_window must be >= 1")
    first = float(np.mean(trace.mean_delay[:baseline_window]))
    last = float(np.mean(trace.mean_delay[-baseline_window:]))
    dr = 0.0 if first <= 0 else float(np.clip((first - last) / first, 0.0, 1.0))
    cv = coefficient_of_variation(trace.throughput[baseline_window:])
    score = w_delay * dr + w_tput * (1.0 - min(1.0, cv))
    return dr, cv, float(np.clip(score, 0.0, 1.0))


def stability(trace: RunTrace, jitter_ref: float, var_ref: float, w_jitter: float = 1.0,
              w_var: float = 1.0) -> tuple:
    """(jitter, throughput_variance, stability_score).

    Each component is min-max normalised onto [0, 1] against the fixed range
    ``[0, ref]`` (values beyond ``ref`` saturate at 1), so scores from
    different runs of a scenario share one scale.
    """
    if len(trace) < 2:
        raise ValueError("stability needs at least 2 ticks")
    if not (jitter_ref > 0 and var_ref > 0):
        raise ValueError("reference scales must be > 0")
    jitter = float(np.std(np.diff(trace.mean_delay)))
    var = float(np.var(trace.throughput))
    j_hat = min(jitter / jitter_ref, 1.0)
    v_hat = min(var / var_ref, 1.0)
    return jitter, var, 1.0 / (1.0 + w_jitter * j_hat + w_var * v_hat)


def latency_increase(mean_delay: np.ndarray, fault_starts) -> np.ndarray:
    """Per-tick mean delay minus its value at the most recent fault onset (0 before any)."""
    mean_delay = np.asarray(mean_delay, dtype=np.float64)
    out = np.zeros_like(mean_delay)
    starts = sorted(s for s in set(fault_starts) if 0 <= s < len(mean_delay))
    for i, s in enumerate(starts):
        stop = starts[i + 1] if i + 1 < len(starts) else len(mean_delay)
        out[s:stop] = mean_delay[s:stop] - mean_delay[s]
    return out


@dataclass
class MetricsReport:
    decision_latency_ms: float
    latency_values_ms: list
    latency_matched: int
    latency_unmatched: int
    delay_reduction: float
    throughput_variability: float
    effectiveness_score: float
    jitter: float
    throughput_variance: float
    stability_score: float
    actions: int = 0
    commands: int = 0
    nacks: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, float) and not np.isfinite(v):
                d[k] = None
        return d


def compute_report(trace: RunTrace, jitter_ref: float, var_ref: float, baseline_window: int = 100,
                   timeout_ticks: int = 50, w_delay=0.5, w_tput=0.5, w_jitter=1.0, w_var=1.0,
                   **counts) -> MetricsReport:
    """All metrics for one trace. Short traces shrink the baseline window to fit."""
    n = len(trace)
    lat = decision_latency(trace, timeout_ticks)
    window = min(baseline_window, max(n // 2, 1))
    if n > window:
        dr, cv, eff = effectiveness(trace, window, w_delay, w_tput)
    else:
        dr, cv, eff = 0.0, 0.0, w_tput
    if n >= 2:
        jit, var, stab = stability(trace, jitter_ref, var_ref, w_jitter, w_var)
    else:
        jit, var, stab = 0.0, 0.0, 1.0
    return MetricsReport(lat.mean_ms, list(lat.values_ms), lat.matched, lat.unmatched,
                         dr, cv, eff, jit, var, stab, **counts)
