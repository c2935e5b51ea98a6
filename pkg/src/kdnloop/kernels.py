"""Hot numeric kernels: fluid network advance and exact subset search.

Each kernel has two implementations with identical semantics:

* a loop-style body compiled with numba (``*_numba``), and
* a vectorised pure-numpy version (``*_numpy``).

The public names (``advance``, ``observe``, ``best_subset``) dispatch to one of
them according to ``KDNLOOP_BACKEND`` (see :mod:`kdnloop._backend`).

Array conventions
-----------------
Flow paths are stored CSR-style: links of flow ``f`` are
``path_links[path_ptr[f]:path_ptr[f + 1]]`` and the nodes it visits
(source and destination included) are ``path_nodes[node_ptr[f]:node_ptr[f + 1]]``.
Every flow path is non-empty.
"""

import numpy as np

from ._backend import USE_NUMBA, njit

CPU_DELAY_CAP = 0.95


# --------------------------------------------------------------------------
# loop bodies (compiled by numba; also runnable as plain Python)
# --------------------------------------------------------------------------

def _arrivals_loops(rates, path_ptr, path_links, n_links):
    arrivals = np.zeros(n_links)
    for f in range(rates.shape[0]):
        for k in range(path_ptr[f], path_ptr[f + 1]):
            arrivals[path_links[k]] += rates[f]
    return arrivals


def _observe_loops(q, drop, arrivals, cap, link_up, base_delay, rates,
                   path_ptr, path_links, node_ptr, path_nodes,
                   task_work, cpu_cap, node_up, dt, penalty, fwd_work,
                   proc_delay, flow_delay, flow_deliv, cpu_load):
    n_links = q.shape[0]
    n_nodes = task_work.shape[0]
    link_delay = np.empty(n_links)
    link_ratio = np.empty(n_links)
    for l in range(n_links):
        if link_up[l] and cap[l] > 0.0:
            link_delay[l] = base_delay[l] + q[l] / cap[l] * dt
        else:
            link_delay[l] = penalty
        if not link_up[l]:
            link_ratio[l] = 0.0
        elif arrivals[l] > 0.0:
            r = 1.0 - drop[l] / arrivals[l]
            link_ratio[l] = r if r > 0.0 else 0.0
        else:
            link_ratio[l] = 1.0

    work = task_work.copy()
    for f in range(rates.shape[0]):
        for k in range(node_ptr[f], node_ptr[f + 1]):
            work[path_nodes[k]] += fwd_work * rates[f]

    node_delay = np.empty(n_nodes)
    node_ratio = np.empty(n_nodes)
    for n in range(n_nodes):
        if node_up[n] and cpu_cap[n] > 0.0:
            c = work[n] / cpu_cap[n]
            cpu_load[n] = c if c < 1.0 else 1.0
            node_ratio[n] = 1.0 if work[n] <= cpu_cap[n] else cpu_cap[n] / work[n]
        else:
            cpu_load[n] = 0.0
            node_ratio[n] = 0.0
        busy = cpu_load[n] if cpu_load[n] < CPU_DELAY_CAP else CPU_DELAY_CAP
        node_delay[n] = proc_delay / (1.0 - busy)

    for f in range(rates.shape[0]):
        d = 0.0
        r = 1.0
        for k in range(path_ptr[f], path_ptr[f + 1]):
            d += link_delay[path_links[k]]
            if link_ratio[path_links[k]] < r:
                r = link_ratio[path_links[k]]
        for k in range(node_ptr[f], node_ptr[f + 1]):
            d += node_delay[path_nodes[k]]
            if node_ratio[path_nodes[k]] < r:
                r = node_ratio[path_nodes[k]]
        flow_delay[f] = d
        flow_deliv[f] = rates[f] * r


def _advance_loops(q0, cap, link_up, qlimit, base_delay, rates,
                   path_ptr, path_links, node_ptr, path_nodes,
                   task_work, cpu_cap, node_up, dt, penalty, fwd_work,
                   proc_delay, n_ticks):
    n_links = q0.shape[0]
    n_flows = rates.shape[0]
    q = q0.copy()
    drop = np.zeros(n_links)
    cpu_load = np.zeros(task_work.shape[0])
    delays = np.zeros((n_ticks, n_flows))
    delivs = np.zeros((n_ticks, n_flows))
    arrivals = _arrivals_loops(rates, path_ptr, path_links, n_links)
    for t in range(n_ticks):
        for l in range(n_links):
            total = q[l] + arrivals[l]
            c = cap[l] if link_up[l] else 0.0
            backlog = total - c if total > c else 0.0
            if backlog > qlimit[l]:
                drop[l] = backlog - qlimit[l]
                q[l] = qlimit[l]
            else:
                drop[l] = 0.0
                q[l] = backlog
        _observe_loops(q, drop, arrivals, cap, link_up, base_delay, rates,
                       path_ptr, path_links, node_ptr, path_nodes,
                       task_work, cpu_cap, node_up, dt, penalty, fwd_work,
                       proc_delay, delays[t], delivs[t], cpu_load)
    return q, cpu_load, delays, delivs


def _observe_only_loops(q, cap, link_up, base_delay, rates,
                        path_ptr, path_links, node_ptr, path_nodes,
                        task_work, cpu_cap, node_up, dt, penalty, fwd_work,
                        proc_delay):
    n_links = q.shape[0]
    arrivals = _arrivals_loops(rates, path_ptr, path_links, n_links)
    drop = np.zeros(n_links)
    cpu_load = np.zeros(task_work.shape[0])
    delay = np.zeros(rates.shape[0])
    deliv = np.zeros(rates.shape[0])
    _observe_loops(q, drop, arrivals, cap, link_up, base_delay, rates,
                   path_ptr, path_links, node_ptr, path_nodes,
                   task_work, cpu_cap, node_up, dt, penalty, fwd_work,
                   proc_delay, delay, deliv, cpu_load)
    return cpu_load, delay, deliv


def _best_subset_loops(net, conflict, max_size):
    m = net.shape[0]
    best_val = 0.0
    best_mask = 0
    for mask in range(1, 1 << m):
        count = 0
        x = mask
        while x:
            x &= x - 1
            count += 1
        if count > max_size:
            continue
        ok = True
        val = 0.0
        for i in range(m):
            if (mask >> i) & 1:
                if conflict[i] & mask:
                    ok = False
                    break
                val += net[i]
        if ok and val > best_val:
            best_val = val
            best_mask = mask
    return best_mask, best_val


# --------------------------------------------------------------------------
# numba-compiled variants
# --------------------------------------------------------------------------

_arrivals_loops = njit(_arrivals_loops)
_observe_loops = njit(_observe_loops)
advance_numba = njit(_advance_loops)
observe_numba = njit(_observe_only_loops)
best_subset_numba = njit(_best_subset_loops)


# --------------------------------------------------------------------------
# pure-numpy variants
# --------------------------------------------------------------------------

def _observe_numpy(q, drop, arrivals, cap, link_up, base_delay, rates,
                   path_ptr, path_links, node_ptr, path_nodes,
                   task_work, cpu_cap, node_up, dt, penalty, fwd_work,
                   proc_delay):
    live = link_up & (cap > 0.0)
    safe_cap = np.where(live, cap, 1.0)
    link_delay = np.where(live, base_delay + q / safe_cap * dt, penalty)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(arrivals > 0.0, 1.0 - drop / np.where(arrivals > 0.0, arrivals, 1.0), 1.0)
    link_ratio = np.where(link_up, np.maximum(ratio, 0.0), 0.0)

    hops = np.diff(node_ptr)
    work = task_work + np.bincount(path_nodes, weights=np.repeat(fwd_work * rates, hops),
                                   minlength=task_work.shape[0])
    alive = node_up & (cpu_cap > 0.0)
    safe_cpu = np.where(alive, cpu_cap, 1.0)
    cpu_load = np.where(alive, np.minimum(work / safe_cpu, 1.0), 0.0)
    node_ratio = np.where(alive, np.where(work <= cpu_cap, 1.0, safe_cpu / np.where(work > 0, work, 1.0)), 0.0)
    node_delay = proc_delay / (1.0 - np.minimum(cpu_load, CPU_DELAY_CAP))

    flow_delay = (np.add.reduceat(link_delay[path_links], path_ptr[:-1])
                  + np.add.reduceat(node_delay[path_nodes], node_ptr[:-1]))
    r = np.minimum(np.minimum.reduceat(link_ratio[path_links], path_ptr[:-1]),
                   np.minimum.reduceat(node_ratio[path_nodes], node_ptr[:-1]))
    return cpu_load, flow_delay, rates * np.minimum(r, 1.0)


def _arrivals_numpy(rates, path_ptr, path_links, n_links):
    return np.bincount(path_links, weights=np.repeat(rates, np.diff(path_ptr)),
                       minlength=n_links).astype(np.float64)


def advance_numpy(q0, cap, link_up, qlimit, base_delay, rates,
                  path_ptr, path_links, node_ptr, path_nodes,
                  task_work, cpu_cap, node_up, dt, penalty, fwd_work,
                  proc_delay, n_ticks):
    n_flows = rates.shape[0]
    q = q0.astype(np.float64, copy=True)
    arrivals = _arrivals_numpy(rates, path_ptr, path_links, q.shape[0])
    eff_cap = np.where(link_up, cap, 0.0)
    delays = np.zeros((n_ticks, n_flows))
    delivs = np.zeros((n_ticks, n_flows))
    cpu_load = np.zeros(task_work.shape[0])
    for t in range(n_ticks):
        backlog = np.maximum(q + arrivals - eff_cap, 0.0)
        drop = np.maximum(backlog - qlimit, 0.0)
        q = np.minimum(backlog, qlimit)
        cpu_load, delays[t], delivs[t] = _observe_numpy(
            q, drop, arrivals, cap, link_up, base_delay, rates, path_ptr, path_links,
            node_ptr, path_nodes, task_work, cpu_cap, node_up, dt, penalty, fwd_work,
            proc_delay)
    return q, cpu_load, delays, delivs


def observe_numpy(q, cap, link_up, base_delay, rates, path_ptr, path_links,
                  node_ptr, path_nodes, task_work, cpu_cap, node_up, dt, penalty,
                  fwd_work, proc_delay):
    arrivals = _arrivals_numpy(rates, path_ptr, path_links, q.shape[0])
    return _observe_numpy(q, np.zeros_like(q), arrivals, cap, link_up, base_delay, rates,
                          path_ptr, path_links, node_ptr, path_nodes, task_work, cpu_cap,
                          node_up, dt, penalty, fwd_work, proc_delay)


def best_subset_numpy(net, conflict, max_size):
    m = net.shape[0]
    if m == 0:
        return 0, 0.0
    masks = np.arange(1, 1 << m, dtype=np.int64)
    bits = ((masks[:, None] >> np.arange(m, dtype=np.int64)) & 1).astype(bool)
    valid = bits.sum(axis=1) <= max_size
    val = np.zeros(masks.shape[0])
    for i in range(m):
        valid &= ~(bits[:, i] & ((masks & conflict[i]) != 0))
        val = val + np.where(bits[:, i], net[i], 0.0)
    val = np.where(valid, val, -np.inf)
    idx = int(np.argmax(val))
    if val[idx] > 0.0:
        return int(masks[idx]), float(val[idx])
    return 0, 0.0


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

if USE_NUMBA:
    advance = advance_numba
    observe = observe_numba

    def best_subset(net, conflict, max_size):
        mask, val = best_subset_numba(net, conflict, max_size)
        return int(mask), float(val)
else:
    advance = advance_numpy
    observe = observe_numpy
    best_subset = best_subset_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
