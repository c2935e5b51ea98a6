"""Closed-loop driver, per-run artifacts and controller comparisons."""

import csv
import json
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels
from .config import CONTROLLERS, Scenario, ScenarioConfig
from .enforcer import ENFORCEMENT_HEADER, ControlEnforcer
from .knowledge import KnowledgeBuilder
from .metrics import MetricsReport, RunTrace, compute_report, latency_increase
from .sim import step
from .telemetry import TelemetryCollector, TelemetryCsvWriter

TRACE_HEADER = ("tick", "mean_delay_ms", "throughput", "queue_total", "cpu_mean", "anomalies", "onsets",
                "actions", "commands", "nacks", "enforcement_latency_ms", "latency_increase_ms")
DECISION_HEADER = ("tick", "action_id", "kind", "target", "utility", "cost", "status")
COMPARISON_HEADER = ("controller", "seed", "status", "decision_latency_ms", "latency_matched",
                     "latency_unmatched", "delay_reduction", "throughput_variability", "effectiveness_score",
                     "jitter", "throughput_variance", "stability_score", "actions", "commands", "nacks")


@dataclass(frozen=True)
class ReportBundle:
    trace_csv: Path
    summary_json: Path
    decisions_csv: Path
    enforcement_csv: Path
    timing_csv: Path
    telemetry_csv: Optional[Path] = None
    plots: tuple = ()

    def paths(self):
        out = [self.trace_csv, self.summary_json, self.decisions_csv, self.enforcement_csv, self.timing_csv]
        if self.telemetry_csv is not None:
            out.append(self.telemetry_csv)
        return out + list(self.plots)


@dataclass
class RunResult:
    controller: str
    seed: int
    trace: RunTrace
    report: MetricsReport
    latency_increase: np.ndarray
    bundle: Optional[ReportBundle] = None
    rlc_choices: list = field(default_factory=list)
    rows: list = field(default_factory=list, repr=False)
    decisions: list = field(default_factory=list, repr=False)
    timing: list = field(default_factory=list, repr=False)
    enforcement_log: list = field(default_factory=list, repr=False)


def _touched_for_node(topology, node):
    return frozenset({("node", node)} | {("link", l) for l in topology.incident[node]})


def _fmt(x):
    return f"{x:.6f}"


def simulate(cfg: ScenarioConfig, controller: Optional[str] = None, seed: Optional[int] = None,
             record=None) -> RunResult:
    """Run the closed loop in memory. ``record`` receives per-tick log rows when given."""
    sc = Scenario(cfg, seed)
    name = controller or cfg.controller
    ctrl = sc.controller(name)
    world = sc.world()
    topo = sc.topology
    collector = TelemetryCollector(sc.preprocess)
    builder = KnowledgeBuilder(cfg.window_k)
    enforcer = ControlEnforcer(sc.seed, cfg.sim.adapter_error_rate)

    T = cfg.steps
    delay = np.zeros(T)
    tput = np.zeros(T)
    queue = np.zeros((T, topo.n_links))
    cpu = np.zeros((T, topo.n_nodes))
    enf_lat = np.zeros(T)
    onsets, dispatches, rows, decisions, timing = [], [], [], [], []
    prev_flags = np.zeros(topo.n_nodes, dtype=np.int64)
    open_onset = {}
    prev_report = None
    n_actions = n_cmds = n_nacks = 0

    for t in range(T):
        snap = collector.collect(world)
        if record is not None:
            record(snap)
        if prev_report is not None:
            ctrl.notify(prev_report, snap)
        eff = world.effective()
        graph = builder.update(snap, topo, world.flows, eff.link_up)

        flags = np.zeros(topo.n_nodes, dtype=np.int64)
        flags[snap.node_ids] = snap.flags
        # onsets count from the end of warm-up, when control starts
        if t >= cfg.warmup_ticks:
            new_onsets = np.flatnonzero((flags == 1) & (prev_flags == 0))
            for n in np.flatnonzero((flags == 0) & (prev_flags == 1)):
                onsets[open_onset.pop(int(n))][2] = t
            prev_flags = flags
        else:
            new_onsets = np.zeros(0, dtype=np.int64)
        for n in new_onsets:
            open_onset[int(n)] = len(onsets)
            onsets.append([t, _touched_for_node(topo, int(n)), None])

        delay[t] = world.mean_delay()
        tput[t] = world.throughput()
        queue[t] = world.queue_len
        cpu[t] = world.cpu_load

        t0 = time.perf_counter()
        aset = ctrl.decide(snap, graph, world) if t >= cfg.warmup_ticks else None
        wall_ms = (time.perf_counter() - t0) * 1e3
        actions = aset.actions if aset is not None else ()
        world, report, mapping = enforcer.execute(world, actions)
        enforcer.feedback(report, collector)

        scored = {s.action.id: s for s in (aset.scored if aset is not None else ())}
        for aid, a in mapping.items():
            ok = report.action_ok(aid)
            if ok:
                dispatches.append((t, a.touched, report.first_latency(aid)))
            s = scored.get(a.id)
            decisions.append((t, aid, a.kind, a.target, "" if s is None else _fmt(s.utility),
                              "" if s is None else _fmt(s.cost), "ok" if ok else "failed"))
        enf_lat[t] = report.total_latency_ms
        n_actions += len(mapping)
        n_cmds += len(report.outcomes)
        n_nacks += report.nacks
        rows.append([t, len(new_onsets), len(mapping), len(report.outcomes), report.nacks,
                     int(snap.flags.sum())])
        timing.append((t, f"{wall_ms:.3f}"))
        prev_report = report
        world = step(world)

    onsets = [tuple(o) for o in onsets]
    trace = RunTrace(cfg.dt_ms, delay, tput, queue, cpu, onsets, dispatches, enf_lat)
    m = cfg.metrics
    rep = compute_report(trace, sc.jitter_ref, sc.var_ref, m.baseline_window, m.match_timeout, m.w_delay,
                         m.w_tput, m.w_jitter, m.w_var,
                         actions=n_actions, commands=n_cmds, nacks=n_nacks)
    inc = latency_increase(delay, [f.start_tick for f in sc.faults])
    return RunResult(name, sc.seed, trace, rep, inc, None, list(getattr(ctrl, "choices", [])),
                     rows, decisions, timing, enforcer.log)


def _write_trace(path, res: RunResult):
    tr = res.trace
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for t, (tick, onsets, acts, cmds, nacks, anomalies) in enumerate(res.rows):
            w.writerow([tick, _fmt(tr.mean_delay[t]), _fmt(tr.throughput[t]), _fmt(tr.queue[t].sum()),
                        _fmt(tr.cpu[t].mean()), anomalies, onsets, acts, cmds, nacks,
                        _fmt(tr.enforcement_latency[t]), _fmt(res.latency_increase[t])])


def summary_dict(cfg: ScenarioConfig, res: RunResult) -> dict:
    return {
        "scenario": cfg.name,
        "controller": res.controller,
        "seed": res.seed,
        "steps": cfg.steps,
        "config_hash": cfg.digest(res.seed),
        "metrics": res.report.to_dict(),
    }


def run_scenario(cfg: ScenarioConfig, controller: Optional[str] = None, seed: Optional[int] = None,
                 out: Optional[str] = None) -> tuple:
    """Run one closed loop and write its artifacts; returns ``(ReportBundle, RunResult)``."""
    out = Path(out or cfg.output_dir)
    tel_path = out / "telemetry.csv" if cfg.telemetry_dump else None
    try:
        out.mkdir(parents=True, exist_ok=True)
        tel_fh = open(tel_path, "w", newline="") if tel_path else None
    except OSError as e:
        raise OSError(f"cannot write to {e.filename or out}: {e.strerror}") from None
    try:
        writer = TelemetryCsvWriter(tel_fh) if tel_fh else None
        res = simulate(cfg, controller, seed, writer.write if writer else None)
    finally:
        if tel_fh:
            tel_fh.close()

    bundle = ReportBundle(out / "trace.csv", out / "summary.json", out / "decisions.csv",
                          out / "enforcement.csv", out / "timing.csv", tel_path)
    current = None
    try:
        current = bundle.trace_csv
        _write_trace(current, res)
        current = bundle.summary_json
        current.write_text(json.dumps(summary_dict(cfg, res), indent=2, sort_keys=True) + "\n")
        current = bundle.decisions_csv
        with open(current, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(DECISION_HEADER)
            w.writerows(res.decisions)
        current = bundle.enforcement_csv
        with open(current, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ENFORCEMENT_HEADER)
            w.writerows(res.enforcement_log)
        current = bundle.timing_csv
        with open(current, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("tick", "decision_wall_ms"))
            w.writerows(res.timing)
    except OSError as e:
        raise OSError(f"cannot write {current}: {e.strerror}") from None
    res.bundle = bundle
    return bundle, res


def _run_job(args):
    cfg_json, controller, seed, out = args
    cfg = ScenarioConfig.model_validate_json(cfg_json)
    try:
        _, res = run_scenario(cfg, controller, seed, out)
        return controller, seed, "ok", res, ""
    except Exception as e:  # a failed run is reported, the sweep continues
        return controller, seed, "failed", None, f"{type(e).__name__}: {e}\n{traceback.format_exc()}"


@dataclass
class Comparison:
    rows: list
    results: dict
    csv_path: Optional[Path] = None
    plots: tuple = ()
    errors: dict = field(default_factory=dict)

    def means(self, metric: str) -> dict:
        out = {}
        for ctrl in dict.fromkeys(r["controller"] for r in self.rows):
            vals = [r[metric] for r in self.rows if r["controller"] == ctrl and r["status"] == "ok"
                    and r[metric] is not None]
            out[ctrl] = float(np.mean(vals)) if vals else float("nan")
        return out


def compare_controllers(cfg: ScenarioConfig, controllers, seeds, out=None, jobs: int = 1,
                        plots: bool = True) -> Comparison:
    if not controllers:
        raise ValueError("need at least one controller")
    if not seeds:
        raise ValueError("need at least one seed")
    for c in controllers:
        if c not in CONTROLLERS:
            raise ValueError(f"unknown controller {c!r}; expected one of {list(CONTROLLERS)}")
    out = Path(out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_json = cfg.model_dump_json()
    jobs_list = [(cfg_json, c, int(s), str(out / f"{c}_seed{s}")) for c in controllers for s in seeds]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            done = list(ex.map(_run_job, jobs_list))
    else:
        done = [_run_job(j) for j in jobs_list]

    rows, results, errors = [], {}, {}
    for ctrl, seed, status, res, err in done:
        row = {"controller": ctrl, "seed": seed, "status": status}
        if res is not None:
            d = res.report.to_dict()
            row.update({k: d[k] for k in COMPARISON_HEADER[3:]})
            results[(ctrl, seed)] = res
        else:
            row.update({k: None for k in COMPARISON_HEADER[3:]})
            errors[(ctrl, seed)] = err
        rows.append(row)

    csv_path = out / "comparison.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARISON_HEADER)
        for r in rows:
            w.writerow(["" if r[k] is None else (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k])
                        for k in COMPARISON_HEADER])
    comp = Comparison(rows, results, csv_path, (), errors)
    if plots:
        from .plots import emit_plots
        comp.plots = tuple(emit_plots(comp, list(controllers), out))
    return comp


def backend_name() -> str:
    return kernels.BACKEND
