"""Network case description and horizon-stacked linear maps.

Devices follow ``x_{t+1} = A x_t + B u_t`` with the first state coordinate
being the bus injection. Over a horizon of ``T`` steps the stacked states
``x = [x_1..x_T]`` are ``A_stack x_0 + B_stack u`` with ``u = [u_0..u_{T-1}]``.
Line flows come from the DC approximation: lossless lines, flat voltages and
small angle differences, so flows are linear in nodal injections.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla

logger = logging.getLogger(__name__)

_PSD_REL_TOL = 1e-9


class CaseValidationError(ValueError):
    """Raised when a case description violates a structural invariant."""


@dataclass(frozen=True)
class DeviceCost:
    """Convex quadratic cost ``f_x'x + x'H_x x/2 + f_u'u + u'H_u u/2 + c``.

    Vectors may be given per step (length ``n`` / ``m``) and are then tiled
    across the horizon, or for the full horizon (length ``nT`` / ``mT``).
    """

    f_x: np.ndarray | None = None
    H_x: np.ndarray | None = None
    f_u: np.ndarray | None = None
    H_u: np.ndarray | None = None
    c: float = 0.0


@dataclass(frozen=True)
class LocalConstraints:
    """Rows of ``T_loc x + U_loc u + Z_loc xi <= w``.

    Like :class:`DeviceCost`, matrices with per-step column counts
    (``n``, ``m``, ``n_xi``) are repeated block-diagonally over the horizon.
    """

    T_loc: np.ndarray
    U_loc: np.ndarray
    Z_loc: np.ndarray
    w: np.ndarray


@dataclass(frozen=True)
class ControllableDevice:
    id: str
    bus: int
    A_step: np.ndarray
    B_step: np.ndarray
    x0: np.ndarray
    cost: DeviceCost = field(default_factory=DeviceCost)
    local: LocalConstraints | None = None

    @property
    def n(self) -> int:
        return int(np.shape(self.A_step)[0])

    @property
    def m(self) -> int:
        return int(np.shape(self.B_step)[1])


@dataclass(frozen=True)
class UncontrollableInjection:
    """Fixed injection ``r + G xi`` (positive = into the network)."""

    id: str
    bus: int
    r: np.ndarray
    G: np.ndarray


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    x_pu: float
    limit_mw: float
    limit_reverse_mw: float | None = None

    @property
    def name(self) -> str:
        return f"{self.from_bus}-{self.to_bus}"


@dataclass(frozen=True)
class NetworkCase:
    buses: tuple[int, ...]
    slack: int
    lines: tuple[Line, ...]
    devices: tuple[ControllableDevice, ...]
    injections: tuple[UncontrollableInjection, ...]
    T: int
    N_xi: int
    monitored_lines: tuple[str, ...] | None = None
    same_step_recourse: bool = False
    name: str = ""

    @property
    def xi_dim(self) -> int:
        return self.N_xi * self.T

    def with_horizon(
        self,
        T: int,
        injections: Sequence[UncontrollableInjection] | None = None,
        devices: Sequence[ControllableDevice] | None = None,
    ) -> "NetworkCase":
        """Copy of the case over a different horizon (used by the MPC loop)."""
        return NetworkCase(
            buses=self.buses,
            slack=self.slack,
            lines=self.lines,
            devices=tuple(devices) if devices is not None else self.devices,
            injections=tuple(injections) if injections is not None else self.injections,
            T=T,
            N_xi=self.N_xi,
            monitored_lines=self.monitored_lines,
            same_step_recourse=self.same_step_recourse,
            name=self.name,
        )


@dataclass(frozen=True)
class DeviceMaps:
    """Horizon-resolved matrices for a single controllable device."""

    A_stack: np.ndarray  # (nT, n)
    B_stack: np.ndarray  # (nT, mT)
    C_sel: np.ndarray  # (T, nT)
    f_x: np.ndarray
    H_x: np.ndarray
    f_u: np.ndarray
    H_u: np.ndarray
    c: float
    T_loc: np.ndarray  # (l, nT)
    U_loc: np.ndarray  # (l, mT)
    Z_loc: np.ndarray  # (l, N_xi T)
    w: np.ndarray  # (l,)

    @property
    def n_local(self) -> int:
        return int(self.w.shape[0])


@dataclass(frozen=True)
class HorizonModel:
    """Validated case plus every stacked matrix the assembler needs.

    ``Gamma_dev[j]`` and ``Gamma_inj[k]`` are ``(2LT, T)``: rows ``[0, LT)``
    are the from->to direction (line-major within each time step block
    ``t*L + l``), rows ``[LT, 2LT)`` their negation. ``monitored`` indexes
    into those ``2LT`` rows.
    """

    case: NetworkCase
    ptdf: np.ndarray  # (L, n_bus), slack column zero
    dev: tuple[DeviceMaps, ...]
    Gamma_dev: tuple[np.ndarray, ...]
    Gamma_inj: tuple[np.ndarray, ...]
    p_bar: np.ndarray  # (2LT,)
    monitored: np.ndarray  # int indices into the 2LT rows

    @property
    def T(self) -> int:
        return self.case.T

    @property
    def xi_dim(self) -> int:
        return self.case.xi_dim

    @property
    def n_lines(self) -> int:
        return len(self.case.lines)

    def row_label(self, row: int) -> str:
        L, T = self.n_lines, self.T
        direction, rest = divmod(int(row), L * T)
        t, l = divmod(rest, L)
        line = self.case.lines[l]
        a, b = (line.from_bus, line.to_bus) if direction == 0 else (line.to_bus, line.from_bus)
        return f"{a}->{b}@t{t}"

    def monitored_labels(self) -> list[str]:
        return [self.row_label(r) for r in self.monitored]


def stack_dynamics(A_step: np.ndarray, B_step: np.ndarray, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack ``x_{t+1} = A x_t + B u_t`` over ``T`` steps.

    Returns ``A_stack`` with block rows ``A^1..A^T`` and the block
    lower-triangular ``B_stack`` whose block ``(t, s)`` is ``A^{t-s} B`` for
    ``s <= t``.
    """
    A = np.atleast_2d(np.asarray(A_step, dtype=float))
    B = np.atleast_2d(np.asarray(B_step, dtype=float))
    if T < 1:
        raise CaseValidationError(f"horizon must be >= 1, got {T}")
    n = A.shape[0]
    if A.shape != (n, n):
        raise CaseValidationError(f"dynamics matrix must be square, got {A.shape}")
    if B.shape[0] != n:
        raise CaseValidationError(f"input matrix has {B.shape[0]} rows, state dimension is {n}")
    m = B.shape[1]

    powers = [np.eye(n)]
    for _ in range(T):
        powers.append(powers[-1] @ A)
    A_stack = np.vstack(powers[1:])
    B_stack = np.zeros((n * T, m * T))
    for t in range(T):
        for s in range(t + 1):
            B_stack[t * n : (t + 1) * n, s * m : (s + 1) * m] = powers[t - s] @ B
    return A_stack, B_stack


def _connected(buses: Sequence[int], lines: Sequence[Line]) -> list[set[int]]:
    adj: dict[int, set[int]] = {b: set() for b in buses}
    for ln in lines:
        adj[ln.from_bus].add(ln.to_bus)
        adj[ln.to_bus].add(ln.from_bus)
    seen: set[int] = set()
    comps = []
    for b in buses:
        if b in seen:
            continue
        comp, stack = set(), [b]
        while stack:
            v = stack.pop()
            if v in comp:
                continue
            comp.add(v)
            stack.extend(adj[v] - comp)
        seen |= comp
        comps.append(comp)
    return comps


def build_ptdf(case: NetworkCase) -> np.ndarray:
    """Power transfer distribution factors, shape ``(L, n_bus)``.

    Entry ``(l, k)`` is the from->to flow on line ``l`` caused by 1 MW
    injected at bus ``k`` and withdrawn at the slack bus. Bus order follows
    ``case.buses``.
    """
    buses = list(case.buses)
    pos = {b: i for i, b in enumerate(buses)}
    if case.slack not in pos:
        raise CaseValidationError(f"slack bus {case.slack} is not in the bus list")
    for ln in case.lines:
        if ln.from_bus not in pos or ln.to_bus not in pos:
            raise CaseValidationError(f"line {ln.name} references an unknown bus")
    comps = _connected(buses, case.lines)
    if len(comps) > 1:
        islands = sorted((sorted(c) for c in comps if case.slack not in c), key=len)
        raise CaseValidationError(
            f"network is disconnected: {len(comps)} islands; buses {islands[0][:10]} "
            f"are not connected to slack bus {case.slack}"
        )

    nb, L = len(buses), len(case.lines)
    incidence = np.zeros((L, nb))
    b_line = np.empty(L)
    for l, ln in enumerate(case.lines):
        incidence[l, pos[ln.from_bus]] = 1.0
        incidence[l, pos[ln.to_bus]] = -1.0
        b_line[l] = 1.0 / ln.x_pu
    Bbus = incidence.T @ (b_line[:, None] * incidence)

    keep = np.array([b != case.slack for b in buses])
    B_red = Bbus[np.ix_(keep, keep)]
    try:
        lu = sla.lu_factor(B_red, check_finite=True)
    except (sla.LinAlgError, ValueError) as exc:
        raise CaseValidationError(f"reduced susceptance matrix is singular: {exc}") from exc
    diag = np.abs(np.diag(lu[0]))
    if diag.size and diag.min() <= 1e-12 * max(diag.max(), 1.0):
        bad = [b for b, k in zip(buses, keep) if k][int(np.argmin(diag))]
        raise CaseValidationError(f"reduced susceptance matrix is singular near bus {bad}")

    theta = np.zeros((nb, nb))
    theta[np.ix_(keep, keep)] = sla.lu_solve(lu, np.eye(int(keep.sum())))
    return (b_line[:, None] * incidence) @ theta


def _check_psd(name: str, H: np.ndarray, owner: str) -> None:
    if H.size == 0:
        return
    if not np.allclose(H, H.T, atol=1e-12 * max(1.0, np.abs(H).max())):
        raise CaseValidationError(f"device {owner}: {name} is not symmetric")
    lam_min = float(np.linalg.eigvalsh(H).min())
    if lam_min < -_PSD_REL_TOL * max(np.linalg.norm(H, 2), 1.0):
        raise CaseValidationError(
            f"device {owner}: {name} is not positive semidefinite (smallest eigenvalue {lam_min:.3e})"
        )


def _tile_vec(v, step: int, T: int, name: str, owner: str) -> np.ndarray:
    if v is None:
        return np.zeros(step * T)
    v = np.asarray(v, dtype=float).ravel()
    if v.size == step * T:
        return v
    if v.size == step:
        return np.tile(v, T)
    raise CaseValidationError(f"device {owner}: {name} has length {v.size}, expected {step} or {step * T}")


def _tile_mat(M, rows_step: int | None, cols_step: int, T: int, name: str, owner: str) -> np.ndarray:
    """Accept a full-horizon matrix or a per-step block repeated block-diagonally."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[1] == cols_step * T and (rows_step is None or M.shape[0] == rows_step * T):
        return M
    if M.shape[1] == cols_step and (rows_step is None or M.shape[0] == rows_step):
        return np.kron(np.eye(T), M)
    raise CaseValidationError(
        f"device {owner}: {name} has shape {M.shape}, expected {cols_step} or {cols_step * T} columns"
    )


def _device_maps(dev: ControllableDevice, T: int, N_xi: int) -> DeviceMaps:
    A = np.atleast_2d(np.asarray(dev.A_step, dtype=float))
    B = np.atleast_2d(np.asarray(dev.B_step, dtype=float))
    n = A.shape[0]
    if A.shape != (n, n) or B.shape[0] != n:
        raise CaseValidationError(f"device {dev.id}: dynamics shapes {A.shape}, {B.shape} are inconsistent")
    x0 = np.asarray(dev.x0, dtype=float).ravel()
    if x0.size != n:
        raise CaseValidationError(f"device {dev.id}: x0 has length {x0.size}, expected {n}")
    m = B.shape[1]
    A_stack, B_stack = stack_dynamics(A, B, T)
    C_sel = np.zeros((T, n * T))
    C_sel[np.arange(T), np.arange(T) * n] = 1.0

    cost = dev.cost
    f_x = _tile_vec(cost.f_x, n, T, "f_x", dev.id)
    f_u = _tile_vec(cost.f_u, m, T, "f_u", dev.id)
    H_x = np.zeros((n * T, n * T)) if cost.H_x is None else _tile_mat(cost.H_x, n, n, T, "H_x", dev.id)
    H_u = np.zeros((m * T, m * T)) if cost.H_u is None else _tile_mat(cost.H_u, m, m, T, "H_u", dev.id)
    _check_psd("H_x", H_x, dev.id)
    _check_psd("H_u", H_u, dev.id)

    if dev.local is None:
        T_loc = np.zeros((0, n * T))
        U_loc = np.zeros((0, m * T))
        Z_loc = np.zeros((0, N_xi * T))
        w = np.zeros(0)
    else:
        loc = dev.local
        w_raw = np.asarray(loc.w, dtype=float).ravel()
        rows = w_raw.size
        per_step = np.atleast_2d(loc.T_loc).shape[1] == n and n * T != n
        T_loc = _tile_mat(loc.T_loc, None, n, T, "T_loc", dev.id)
        U_loc = _tile_mat(loc.U_loc, None, m, T, "U_loc", dev.id)
        Z_loc = _tile_mat(loc.Z_loc, None, N_xi, T, "Z_loc", dev.id)
        w = np.tile(w_raw, T) if per_step else w_raw
        l = w.size
        if not (T_loc.shape[0] == U_loc.shape[0] == Z_loc.shape[0] == l):
            raise CaseValidationError(
                f"device {dev.id}: local constraint blocks have {T_loc.shape[0]}, {U_loc.shape[0]}, "
                f"{Z_loc.shape[0]} rows but w has {l} (given {rows})"
            )
    return DeviceMaps(A_stack, B_stack, C_sel, f_x, H_x, f_u, H_u, float(cost.c), T_loc, U_loc, Z_loc, w)


def _resolve_monitored(case: NetworkCase) -> np.ndarray:
    L, T = len(case.lines), case.T
    if case.monitored_lines is None:
        return np.arange(2 * L * T)
    rows = []
    for spec in case.monitored_lines:
        try:
            a, b = (int(s) for s in str(spec).split("-"))
        except ValueError as exc:
            raise CaseValidationError(f"monitored line {spec!r} must look like 'from-to'") from exc
        hits = [
            l for l, ln in enumerate(case.lines) if (ln.from_bus, ln.to_bus) in ((a, b), (b, a))
        ]
        if not hits:
            raise CaseValidationError(f"monitored line {spec!r} does not exist")
        for l in hits:
            for t in range(T):
                rows.append(t * L + l)
                rows.append(L * T + t * L + l)
    return np.array(sorted(set(rows)), dtype=int)


def validate_case(case: NetworkCase) -> HorizonModel:
    """Check every structural invariant and build the stacked matrices."""
    T, N_xi = case.T, case.N_xi
    if T < 1 or N_xi < 1:
        raise CaseValidationError(f"horizon and n_xi must be >= 1, got T={T}, n_xi={N_xi}")
    if len(set(case.buses)) != len(case.buses):
        raise CaseValidationError("duplicate bus ids")
    if not case.devices:
        raise CaseValidationError("at least one controllable device is required for power balance")
    for ln in case.lines:
        if not ln.x_pu > 0:
            raise CaseValidationError(f"line {ln.name}: reactance must be positive, got {ln.x_pu}")
        if not ln.limit_mw > 0 or (ln.limit_reverse_mw is not None and not ln.limit_reverse_mw > 0):
            raise CaseValidationError(f"line {ln.name}: limits must be positive")
    bus_pos = {b: i for i, b in enumerate(case.buses)}
    ids = [d.id for d in case.devices] + [i.id for i in case.injections]
    if len(set(ids)) != len(ids):
        raise CaseValidationError("device and injection ids must be unique")
    for obj in (*case.devices, *case.injections):
        if obj.bus not in bus_pos:
            raise CaseValidationError(f"{obj.id}: bus {obj.bus} is not in the bus list")

    ptdf = build_ptdf(case)
    dev_maps = tuple(_device_maps(d, T, N_xi) for d in case.devices)

    L = len(case.lines)

    def gamma(bus: int) -> np.ndarray:
        col = ptdf[:, bus_pos[bus]]
        fwd = np.kron(np.eye(T), col[:, None])  # (LT, T), row t*L + l
        return np.vstack([fwd, -fwd])

    for inj in case.injections:
        r = np.asarray(inj.r, dtype=float).ravel()
        G = np.atleast_2d(np.asarray(inj.G, dtype=float))
        if r.size != T:
            raise CaseValidationError(f"injection {inj.id}: r has length {r.size}, expected {T}")
        if G.shape != (T, N_xi * T):
            raise CaseValidationError(f"injection {inj.id}: G has shape {G.shape}, expected {(T, N_xi * T)}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(G))):
            raise CaseValidationError(f"injection {inj.id}: non-finite entries")

    fwd_lim = np.array([ln.limit_mw for ln in case.lines])
    rev_lim = np.array([ln.limit_mw if ln.limit_reverse_mw is None else ln.limit_reverse_mw for ln in case.lines])
    p_bar = np.concatenate([np.tile(fwd_lim, T), np.tile(rev_lim, T)])

    model = HorizonModel(
        case=case,
        ptdf=ptdf,
        dev=dev_maps,
        Gamma_dev=tuple(gamma(d.bus) for d in case.devices),
        Gamma_inj=tuple(gamma(i.bus) for i in case.injections),
        p_bar=p_bar,
        monitored=_resolve_monitored(case),
    )
    logger.debug(
        "validated case %s: %d buses, %d lines, %d devices, T=%d, %d monitored rows",
        case.name, len(case.buses), L, len(case.devices), T, model.monitored.size,
    )
    return model


def injection_arrays(model: HorizonModel) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """``r`` and ``G`` of every uncontrollable injection as float arrays."""
    rs = [np.asarray(i.r, dtype=float).ravel() for i in model.case.injections]
    Gs = [np.atleast_2d(np.asarray(i.G, dtype=float)) for i in model.case.injections]
    return rs, Gs


def dc_flows(model: HorizonModel, bus_injections: np.ndarray) -> np.ndarray:
    """From->to line flows for nodal injections of shape ``(..., n_bus)``."""
    return np.asarray(bus_injections, dtype=float) @ model.ptdf.T
