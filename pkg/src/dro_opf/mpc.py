"""Closed-loop rolling-horizon driver.

Every step builds a window problem over the next ``horizon`` steps from the
current realized device states, solves it, applies only the first-step
inputs and advances each device with its one-step dynamics. The case passed
in must describe devices and injections per step (its own ``T`` is only used
to read the injection profiles).

Applied input at step ``t``: ``u_t = e[first block] + D[first block rows] xi``
where ``xi`` holds the realized error of step ``t`` in its first block and
zeros elsewhere. Under strict causality the first rows of ``D`` are zero, so
the nominal schedule is applied; with same-step recourse the realized error
enters immediately. Nothing beyond step ``t`` is ever used.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Mapping, Protocol, Sequence

import numpy as np

from .assembler import RiskConfig
from .estimators import DroOpfEstimator
from .network import NetworkCase, UncontrollableInjection, validate_case
from .qp import QpSolveError

logger = logging.getLogger(__name__)


class ForecastProvider(Protocol):
    def __call__(self, step: int, horizon: int, realized: Mapping[str, list[float]]) -> Sequence[UncontrollableInjection]:
        ...


def _step_gain(inj: UncontrollableInjection, n_xi: int) -> np.ndarray:
    """First-step ``G`` block of an injection (its response to the current error)."""
    G = np.atleast_2d(np.asarray(inj.G, dtype=float))
    return G[0, :n_xi]


def _window_injection(inj: UncontrollableInjection, r: np.ndarray, n_xi: int) -> UncontrollableInjection:
    H = r.size
    G = np.kron(np.eye(H), _step_gain(inj, n_xi)[None, :])
    return UncontrollableInjection(inj.id, inj.bus, r, G)


@dataclass(frozen=True)
class ProfileForecast:
    """Forecast read from each injection's ``r`` profile in the case.

    Window step ``k`` at step ``t`` uses ``r[t + k]``, holding the last entry
    once the profile runs out.
    """

    case: NetworkCase

    def __call__(self, step, horizon, realized):
        out = []
        for inj in self.case.injections:
            r = np.asarray(inj.r, dtype=float).ravel()
            idx = np.minimum(np.arange(step, step + horizon), r.size - 1)
            out.append(_window_injection(inj, r[idx], self.case.N_xi))
        return out


@dataclass(frozen=True)
class PersistenceForecast:
    """Next value equals the last realized one; step 0 uses the profile's first entry."""

    case: NetworkCase

    def __call__(self, step, horizon, realized):
        out = []
        for inj in self.case.injections:
            hist = realized.get(inj.id, [])
            level = hist[-1] if hist else float(np.asarray(inj.r, dtype=float).ravel()[0])
            out.append(_window_injection(inj, np.full(horizon, level), self.case.N_xi))
        return out


@dataclass(frozen=True)
class MpcConfig:
    """Closed-loop run settings.

    ``disturbances`` is ``(steps, n_xi)``: the error realized at each step.
    ``training`` holds error samples for the window, ``(N, n_xi*horizon)``;
    a shrinking window uses its leading columns. ``None`` trains on a single
    zero sample. Radius and training window stay fixed for the whole run.
    """

    case: NetworkCase
    horizon: int
    steps: int
    disturbances: np.ndarray | None = None
    training: np.ndarray | None = None
    risk: RiskConfig = field(default_factory=RiskConfig)
    forecast: ForecastProvider | None = None
    mode: Literal["receding", "shrinking"] = "receding"
    tol: float = 1e-8

    def __post_init__(self):
        if self.horizon < 1 or self.steps < 1:
            raise ValueError(f"horizon and steps must be >= 1, got {self.horizon}, {self.steps}")
        if self.mode not in ("receding", "shrinking"):
            raise ValueError(f"unknown mode {self.mode!r}")
        n_xi = self.case.N_xi
        if self.disturbances is not None and np.shape(self.disturbances) != (self.steps, n_xi):
            raise ValueError(f"disturbances must have shape {(self.steps, n_xi)}, got {np.shape(self.disturbances)}")
        if self.training is not None:
            tr = np.atleast_2d(self.training)
            if tr.shape[1] != n_xi * self.horizon:
                raise ValueError(f"training samples need {n_xi * self.horizon} columns, got {tr.shape[1]}")

    def window(self, t: int) -> int:
        return self.horizon if self.mode == "receding" else min(self.horizon, self.steps - t)

    def xi(self, t: int) -> np.ndarray:
        if self.disturbances is None:
            return np.zeros(self.case.N_xi)
        return np.asarray(self.disturbances[t], dtype=float)

    def training_window(self, H: int) -> np.ndarray:
        if self.training is None:
            return np.zeros((1, self.case.N_xi * H))
        return np.atleast_2d(np.asarray(self.training, dtype=float))[:, : self.case.N_xi * H]


@dataclass
class MpcStepRecord:
    step: int
    horizon: int
    status: str
    objective: float
    xi: np.ndarray
    inputs: dict[str, np.ndarray]
    states: dict[str, np.ndarray]  # state after applying the step's inputs
    injections: dict[str, float]  # realized uncontrollable injections
    line_values: np.ndarray  # realized monitored first-step row values (positive = violated)
    line_labels: list[str]
    stage_cost: float


@dataclass
class MpcTrace:
    records: list[MpcStepRecord] = field(default_factory=list)
    initial_states: dict[str, np.ndarray] = field(default_factory=dict)
    plan: dict[str, np.ndarray] = field(default_factory=dict)  # step-0 nominal schedules
    planned_cost: float = float("nan")
    failed_step: int | None = None
    error: str = ""

    @property
    def completed(self) -> bool:
        return self.failed_step is None

    def applied(self, device_id: str) -> np.ndarray:
        return np.array([r.inputs[device_id] for r in self.records])

    def states(self, device_id: str) -> np.ndarray:
        """``(steps + 1, n)`` state trajectory including the initial state."""
        return np.vstack([self.initial_states[device_id], *[r.states[device_id] for r in self.records]])

    def total_cost(self) -> float:
        return float(sum(r.stage_cost for r in self.records))

    def to_rows(self) -> list[dict]:
        rows = []
        for r in self.records:
            row = {"step": r.step, "horizon": r.horizon, "status": r.status, "objective": r.objective,
                   "stage_cost": r.stage_cost}
            row.update({f"xi_{c}": v for c, v in enumerate(r.xi)})
            for dev, u in r.inputs.items():
                row.update({f"u_{dev}_{k}": v for k, v in enumerate(u)})
            for dev, x in r.states.items():
                row.update({f"x_{dev}_{k}": v for k, v in enumerate(x)})
            row.update({f"inj_{k}": v for k, v in r.injections.items()})
            row.update({f"g_{lab}": v for lab, v in zip(r.line_labels, r.line_values)})
            rows.append(row)
        return rows

    def write_csv(self, path) -> None:
        rows = self.to_rows()
        cols = list(rows[0]) if rows else ["step", "horizon", "status", "objective", "stage_cost"]
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            w.writerows(rows)

    def summary(self) -> dict:
        worst = [float(np.max(r.line_values)) if r.line_values.size else float("-inf") for r in self.records]
        return {
            "steps_completed": len(self.records),
            "failed_step": self.failed_step,
            "error": self.error,
            "total_cost": self.total_cost(),
            "planned_cost": self.planned_cost,
            "violating_steps": int(sum(w > 0 for w in worst)),
            "statuses": [r.status for r in self.records],
        }


class MpcStepError(RuntimeError):
    def __init__(self, step: int, message: str, trace: MpcTrace | None = None):
        super().__init__(f"step {step}: {message}")
        self.step = step
        self.trace = trace


def _stage_cost(dev, x_next: np.ndarray, u: np.ndarray, with_offset: bool) -> float:
    """Per-step device cost using the first-step blocks of the cost data.

    The scalar offset ``c`` belongs to the whole horizon, so it is charged
    once (on the first closed-loop step) rather than every step.
    """
    cost = dev.cost
    n, m = x_next.size, u.size
    total = float(cost.c) if with_offset else 0.0
    if cost.f_x is not None:
        total += float(np.asarray(cost.f_x, dtype=float).ravel()[:n] @ x_next)
    if cost.H_x is not None:
        Hx = np.atleast_2d(np.asarray(cost.H_x, dtype=float))[:n, :n]
        total += 0.5 * float(x_next @ Hx @ x_next)
    if cost.f_u is not None:
        total += float(np.asarray(cost.f_u, dtype=float).ravel()[:m] @ u)
    if cost.H_u is not None:
        Hu = np.atleast_2d(np.asarray(cost.H_u, dtype=float))[:m, :m]
        total += 0.5 * float(u @ Hu @ u)
    return total


@dataclass
class MpcState:
    """Realized device states and injection history carried between steps."""

    x: dict[str, np.ndarray]
    realized: dict[str, list[float]]

    @classmethod
    def initial(cls, case: NetworkCase) -> "MpcState":
        return cls({d.id: np.asarray(d.x0, dtype=float).ravel().copy() for d in case.devices}, {})


def mpc_step(state: MpcState, config: MpcConfig, t: int) -> tuple[MpcStepRecord, DroOpfEstimator]:
    """Solve the window at step ``t``, apply the first inputs, advance ``state`` in place."""
    case = config.case
    H = config.window(t)
    n_xi = case.N_xi
    provider = config.forecast or ProfileForecast(case)
    injections = list(provider(t, H, state.realized))
    devices = [dataclasses.replace(d, x0=state.x[d.id]) for d in case.devices]
    model = validate_case(case.with_horizon(H, injections=injections, devices=devices))
    est = DroOpfEstimator(
        model=model, alpha=config.risk.alpha, rho=config.risk.rho, epsilon=config.risk.epsilon,
        ground_norm=config.risk.ground_norm, tol=config.tol,
    )
    try:
        est.fit(config.training_window(H))
    except (QpSolveError, ValueError) as exc:
        raise MpcStepError(t, str(exc)) from exc

    xi_t = config.xi(t)
    window_xi = np.zeros(n_xi * H)
    window_xi[:n_xi] = xi_t
    inputs, states = {}, {}
    stage = 0.0
    for d, D, e in zip(devices, est.policy_.D, est.policy_.e):
        m = d.m
        u = e[:m] + D[:m] @ window_xi
        A = np.atleast_2d(np.asarray(d.A_step, dtype=float))
        B = np.atleast_2d(np.asarray(d.B_step, dtype=float))
        x_next = A @ state.x[d.id] + B @ u
        inputs[d.id], states[d.id] = u, x_next
        stage += _stage_cost(d, x_next, u, with_offset=t == 0)

    # realized first-step network quantities
    bus_pos = {b: i for i, b in enumerate(case.buses)}
    p_bus = np.zeros(len(case.buses))
    for d in devices:
        p_bus[bus_pos[d.bus]] += states[d.id][0]
    realized_inj = {}
    for inj in injections:
        val = float(np.asarray(inj.r, dtype=float)[0] + _step_gain(inj, n_xi) @ xi_t)
        realized_inj[inj.id] = val
        p_bus[bus_pos[inj.bus]] += val
    flows = model.ptdf @ p_bus
    L = model.n_lines
    first = [r for r in model.monitored if r % (L * H) < L]
    values = np.array([
        (flows[r % (L * H)] if r < L * H else -flows[r % (L * H)]) - model.p_bar[r] for r in first
    ])
    labels = [model.row_label(r) for r in first]

    for k, v in realized_inj.items():
        state.realized.setdefault(k, []).append(v)
    state.x.update(states)
    record = MpcStepRecord(
        step=t, horizon=H, status=est.solution_.status.status, objective=est.objective_, xi=xi_t,
        inputs=inputs, states={k: v.copy() for k, v in states.items()}, injections=realized_inj,
        line_values=values, line_labels=labels, stage_cost=stage,
    )
    return record, est


def mpc_run(config: MpcConfig, raise_on_failure: bool = False) -> MpcTrace:
    """Run ``config.steps`` closed-loop steps.

    A failed step stops the run; the trace keeps every completed step and
    records the failing index and message (or raises :class:`MpcStepError`
    carrying the partial trace when ``raise_on_failure``).
    """
    state = MpcState.initial(config.case)
    trace = MpcTrace(initial_states={k: v.copy() for k, v in state.x.items()})
    for t in range(config.steps):
        try:
            record, est = mpc_step(state, config, t)
        except MpcStepError as exc:
            trace.failed_step, trace.error = t, str(exc)
            logger.warning("MPC stopped at step %d: %s", t, exc)
            if raise_on_failure:
                exc.trace = trace
                raise
            break
        if t == 0:
            trace.plan = {d.id: e.copy() for d, e in zip(config.case.devices, est.policy_.e)}
            trace.planned_cost = est.cost_term_
        trace.records.append(record)
        logger.debug("MPC step %d: status %s, objective %.6g", t, record.status, record.objective)
    return trace


def open_loop_states(case: NetworkCase, device_id: str, inputs: np.ndarray) -> np.ndarray:
    """State trajectory of one device under a given input sequence ``(steps, m)``."""
    dev = next(d for d in case.devices if d.id == device_id)
    A = np.atleast_2d(np.asarray(dev.A_step, dtype=float))
    B = np.atleast_2d(np.asarray(dev.B_step, dtype=float))
    xs = [np.asarray(dev.x0, dtype=float).ravel()]
    for u in np.atleast_2d(inputs):
        xs.append(A @ xs[-1] + B @ u)
    return np.vstack(xs)

