"""Task-impact measurement and exponential weight decay for the auxiliary
tasks, with pruning once a weight falls below threshold.

Per probe instance j the impact of auxiliary task i is
    m_i = (1/k) * sum_j ||delta_i^j|| / ||delta_st^j + delta_i^j||
over flattened self-attention gradients of the relevant module; weights
update as w_i <- w_i * m_i^(u/s) and the task is dropped below threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

AUX_TASKS = ("asr", "mt")

# module each auxiliary task is judged by; mt takes the max over its two
MODULES_FOR_TASK = {"asr": ("A-Enc",), "mt": ("T-Enc", "Decoder")}


@dataclass
class HistoryRow:
    step: int
    task: str
    m: float
    w: float


@dataclass
class TaskWeights:
    weights: dict = field(default_factory=lambda: {"asr": 1.0, "mt": 1.0})
    smoothing: dict = field(default_factory=lambda: {"asr": 500.0, "mt": 1000.0})
    update_every: int = 500
    prune_threshold: float = 0.1
    exponent_mode: str = "absolute"   # "absolute": u is the global step;
                                      # "delta": steps since the last update
    pruned: set = field(default_factory=set)
    history: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    last_update_step: int = 0

    def __post_init__(self):
        if self.exponent_mode not in ("absolute", "delta"):
            raise ValueError(f"unknown exponent_mode {self.exponent_mode!r}")

    def active(self, task: str) -> bool:
        return task in self.weights and task not in self.pruned

    def active_tasks(self):
        return [t for t in AUX_TASKS if self.active(t)]

    def as_rows(self):
        return [(r.step, r.task, r.m, r.w) for r in self.history]


def task_impact(deltas_task, deltas_st) -> float:
    """Mean per-instance ratio ||d_task|| / ||d_st + d_task||.

    Instances with a zero denominator are skipped and the mean renormalized;
    all-skipped raises."""
    if len(deltas_task) != len(deltas_st) or not deltas_task:
        raise ValueError("need equal, non-empty per-instance gradient lists")
    ratios = []
    for dt, ds in zip(deltas_task, deltas_st):
        denom = np.linalg.norm(ds + dt)
        if denom == 0.0:
            continue
        ratios.append(np.linalg.norm(dt) / denom)
    if not ratios:
        raise ValueError("task impact undefined: every instance had a zero denominator")
    return float(np.mean(ratios))


def update_weight(w_prev: float, m: float, u: int, s: float) -> float:
    """w_new = w_prev * m^(u/s)."""
    if m < 0:
        raise ValueError(f"task impact must be non-negative, got {m}")
    return w_prev * m ** (u / s)


def mt_module_rule(m_tenc: float, m_dec: float) -> float:
    """The MT weight follows whichever shared module it impacts more."""
    return max(m_tenc, m_dec)


def schedule_step(step: int, weights: TaskWeights, probe_fn) -> TaskWeights:
    """One scheduled update: draw probes, measure impact, decay, prune.

    probe_fn() returns a list (one entry per probe instance) of dicts
    {task: {module: flat ATTEN gradient vector}} including "st".
    Probe failure leaves the weights unchanged and records a warning.
    """
    try:
        probes = probe_fn()
    except Exception as exc:  # probe failure must not kill training
        weights.warnings.append((step, f"probe failed: {exc}"))
        return weights
    u = step if weights.exponent_mode == "absolute" else step - weights.last_update_step
    for task in weights.active_tasks():
        module_ms = []
        for module in MODULES_FOR_TASK[task]:
            d_task = [p[task][module] for p in probes]
            d_st = [p["st"][module] for p in probes]
            module_ms.append(task_impact(d_task, d_st))
        m = mt_module_rule(*module_ms) if len(module_ms) > 1 else module_ms[0]
        w = update_weight(weights.weights[task], m, u, weights.smoothing[task])
        weights.weights[task] = w
        weights.history.append(HistoryRow(step, task, m, w))
        if w < weights.prune_threshold:
            weights.pruned.add(task)
    weights.last_update_step = step
    return weights


def verify_history(weights: TaskWeights, initial=None) -> bool:
    """Replay every recorded (step, m) pair from the initial weights and
    check the stored w values match to 1e-12."""
    initial = initial or {t: 1.0 for t in AUX_TASKS}
    current = dict(initial)
    prev_update = 0
    current_update = 0
    for row in weights.history:
        if row.step != current_update:
            prev_update, current_update = current_update, row.step
        u = row.step if weights.exponent_mode == "absolute" else row.step - prev_update
        expected = update_weight(current[row.task], row.m, u, weights.smoothing[row.task])
        if abs(expected - row.w) > 1e-12 * max(1.0, abs(expected)):
            return False
        current[row.task] = row.w
    return True
