"""Assembly of the distributionally robust OPF into one convex QP.

Decision vector layout (in order): free policy gains ``D`` per device, nominal
schedules ``e`` per device, one CVaR threshold ``tau`` per risk row, then for
each risk row its epigraph block (``lambda``, ``s``, optional ``gamma`` and
``nu``). Risk rows are the monitored directed line rows followed by every
local device constraint row.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .dro import (
    AmbiguityConfig,
    EpigraphBlock,
    ForecastDataset,
    GroundNorm,
    cvar_pieces,
    dro_epigraph,
)
from .network import HorizonModel, injection_arrays
from .policy import AffinePolicy, PolicyLayout, balance_constraints
from .qp import DEFAULT_TOL, KktReport, ProgramBuilder, QpResult, QpSolveError, QpStatus, QuadraticProgram, solve_qp

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RiskConfig:
    alpha: float = 0.1
    rho: float = 1.0
    epsilon: float = 0.0
    ground_norm: GroundNorm = "1"

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not self.rho >= 0.0:
            raise ValueError(f"rho must be >= 0, got {self.rho}")
        AmbiguityConfig(self.epsilon, self.ground_norm)

    @property
    def ambiguity(self) -> AmbiguityConfig:
        return AmbiguityConfig(self.epsilon, self.ground_norm)


@dataclass(frozen=True)
class AffineConstraint:
    """``g(xi) = <a_mat z + a_const, xi> + b_row z + b_const`` over the policy prefix."""

    a_mat: sp.csr_matrix
    a_const: np.ndarray
    b_row: sp.csr_matrix
    b_const: float
    label: str = ""

    def coefficients(self, z_policy: np.ndarray) -> tuple[np.ndarray, float]:
        z = np.asarray(z_policy, dtype=float)[: self.a_mat.shape[1]]
        return self.a_mat @ z + self.a_const, float((self.b_row @ z)[0] + self.b_const)

    def widened(self, n: int) -> "AffineConstraint":
        def wide(M):
            M = sp.coo_matrix(M)
            return sp.csr_matrix((M.data, (M.row, M.col)), shape=(M.shape[0], n))

        return AffineConstraint(wide(self.a_mat), self.a_const, wide(self.b_row), self.b_const, self.label)


def _effective_cost(model: HorizonModel, j: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Device cost expressed in its inputs: ``0.5 u'Hu + f'u + c``."""
    dm = model.dev[j]
    x0 = np.asarray(model.case.devices[j].x0, dtype=float)
    ax = dm.A_stack @ x0
    H = dm.H_u + dm.B_stack.T @ dm.H_x @ dm.B_stack
    f = dm.f_u + dm.B_stack.T @ (dm.f_x + dm.H_x @ ax)
    c = dm.c + dm.f_x @ ax + 0.5 * ax @ dm.H_x @ ax
    return H, f, float(c)


def expected_cost(
    model: HorizonModel, data: ForecastDataset, layout: PolicyLayout | None = None
) -> tuple[sp.csc_matrix, np.ndarray, float]:
    """Sample-average device cost as ``0.5 z'Pz + q'z + const`` over the policy prefix.

    Uses the sample mean ``M`` and the (1/N) second moment ``S`` of the data:
    with ``u = D xi + e``, ``E[0.5 u'Hu + f'u] = 0.5 tr(H D S D') + e'H D M
    + 0.5 e'He + f'D M + f'e``.
    """
    layout = layout or PolicyLayout.for_model(model)
    X = data.samples
    M = X.mean(axis=0)
    S = X.T @ X / X.shape[0]
    n = layout.size
    P = sp.lil_matrix((n, n))
    q = np.zeros(n)
    const = 0.0
    for j, (flat, dsl, esl) in enumerate(zip(layout.free_flat, layout.D_slices, layout.e_slices)):
        H, f, c = _effective_cost(model, j)
        const += c
        mT = H.shape[0]
        e_idx = np.arange(esl.start, esl.stop)
        P[np.ix_(e_idx, e_idx)] = H
        q[esl] = f
        if flat.size:
            d_idx = np.arange(dsl.start, dsl.stop)
            P_dd = np.kron(H, S)[np.ix_(flat, flat)]
            P_ed = (H @ np.kron(np.eye(mT), M[None, :]))[:, flat]
            P[np.ix_(d_idx, d_idx)] = P_dd
            P[np.ix_(e_idx, d_idx)] = P_ed
            P[np.ix_(d_idx, e_idx)] = P_ed.T
            q[dsl] = np.kron(f, M)[flat]
    return sp.csc_matrix(P), q, const


def _policy_affine(
    model: HorizonModel, layout: PolicyLayout, weights: list[tuple[int, np.ndarray]]
) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Maps for ``sum_j <w_j, u_j>`` with ``u_j = D_j xi + e_j``.

    Returns the ``xi``-coefficient map (``dim x n``) and the ``e`` row (``1 x n``).
    """
    nxi, n = model.xi_dim, layout.size
    ar, ac, av = [], [], []
    br, bv = [], []
    for j, w in weights:
        w = np.asarray(w, dtype=float)
        flat, dsl, esl = layout.free_flat[j], layout.D_slices[j], layout.e_slices[j]
        a_idx, b_idx = np.divmod(flat, nxi)
        coef = w[a_idx]
        nz = np.flatnonzero(coef)
        ar.append(b_idx[nz])
        ac.append(dsl.start + nz)
        av.append(coef[nz])
        enz = np.flatnonzero(w)
        br.append(esl.start + enz)
        bv.append(w[enz])
    cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0)  # noqa: E731
    a_mat = sp.csr_matrix((cat(av), (cat(ar).astype(int), cat(ac).astype(int))), shape=(nxi, n))
    b_row = sp.csr_matrix((cat(bv), (np.zeros(len(cat(bv)), dtype=int), cat(br).astype(int))), shape=(1, n))
    return a_mat, b_row


def line_loss_coeffs(model: HorizonModel, row: int, layout: PolicyLayout | None = None) -> AffineConstraint:
    """Directed line-row violation ``g = flow - p_bar`` as an affine map of ``(D, e)``.

    ``row`` indexes the ``2LT`` directed line-time rows (see
    :class:`~dro_opf.network.HorizonModel`).
    """
    layout = layout or PolicyLayout.for_model(model)
    rs, Gs = injection_arrays(model)
    weights = []
    b_const = -float(model.p_bar[row])
    for j, (dm, dev, Gam) in enumerate(zip(model.dev, model.case.devices, model.Gamma_dev)):
        gc = Gam[row] @ dm.C_sel  # (nT,)
        weights.append((j, gc @ dm.B_stack))
        b_const += float(gc @ dm.A_stack @ np.asarray(dev.x0, dtype=float))
    a_const = np.zeros(model.xi_dim)
    for r, G, Gam in zip(rs, Gs, model.Gamma_inj):
        a_const += Gam[row] @ G
        b_const += float(Gam[row] @ r)
    a_mat, b_row = _policy_affine(model, layout, weights)
    return AffineConstraint(a_mat, a_const, b_row, b_const, model.row_label(row))


def device_loss_coeffs(model: HorizonModel, j: int, q: int, layout: PolicyLayout | None = None) -> AffineConstraint:
    """Local device row ``q``: ``T x + U u + Z xi - w`` as an affine map of ``(D_j, e_j)``."""
    layout = layout or PolicyLayout.for_model(model)
    dm = model.dev[j]
    if not 0 <= q < dm.n_local:
        raise IndexError(f"device {model.case.devices[j].id} has {dm.n_local} local rows, got {q}")
    x0 = np.asarray(model.case.devices[j].x0, dtype=float)
    w = dm.T_loc[q] @ dm.B_stack + dm.U_loc[q]
    b_const = float(dm.T_loc[q] @ dm.A_stack @ x0 - dm.w[q])
    a_mat, b_row = _policy_affine(model, layout, [(j, w)])
    return AffineConstraint(a_mat, dm.Z_loc[q].copy(), b_row, b_const, f"{model.case.devices[j].id}#{q}")


def risk_rows(model: HorizonModel, layout: PolicyLayout | None = None) -> list[AffineConstraint]:
    """Every risk row in order: monitored line rows, then local device rows."""
    layout = layout or PolicyLayout.for_model(model)
    rows = [line_loss_coeffs(model, int(r), layout) for r in model.monitored]
    for j, dm in enumerate(model.dev):
        rows.extend(device_loss_coeffs(model, j, q, layout) for q in range(dm.n_local))
    return rows


@dataclass
class DroQp:
    qp: QuadraticProgram
    model: HorizonModel
    data: ForecastDataset
    risk: RiskConfig
    layout: PolicyLayout
    rows: list[AffineConstraint]
    tau: slice
    blocks: list[EpigraphBlock]
    cost_P: sp.csc_matrix
    cost_q: np.ndarray
    cost_const: float

    @property
    def n_risk(self) -> int:
        return len(self.rows)

    def to_json(self) -> str:
        return self.qp.to_json()


def assemble(model: HorizonModel, data: ForecastDataset, risk: RiskConfig) -> DroQp:
    """Build expected cost + rho * sum of worst-case CVaR terms under power balance."""
    if data.dim != model.xi_dim:
        raise ValueError(f"dataset has {data.dim} columns, case expects n_xi*T = {model.xi_dim}")
    layout = PolicyLayout.for_model(model)
    balance = balance_constraints(model, layout)
    rows = risk_rows(model, layout)
    V = len(rows)

    b = ProgramBuilder()
    for dev, dsl, esl in zip(model.case.devices, layout.D_slices, layout.e_slices):
        b.add_var(f"D[{dev.id}]", dsl.stop - dsl.start)
    for dev, esl in zip(model.case.devices, layout.e_slices):
        b.add_var(f"e[{dev.id}]", esl.stop - esl.start)
    tau = b.add_var("tau", V)
    n_dec = b.n

    P, q, const = expected_cost(model, data, layout)
    b.add_quadratic(P)
    b.add_linear_cost(np.arange(layout.size), q)
    b.const = const
    b.add_eq(balance.A, balance.b)

    amb = risk.ambiguity
    blocks = []
    for v, row in enumerate(rows):
        wide = row.widened(n_dec)
        loss = cvar_pieces(wide.a_mat, wide.a_const, wide.b_row, wide.b_const, risk.alpha, tau.start + v)
        blocks.append(dro_epigraph(b, loss, data, amb, scale=risk.rho, tag=f"[{v}]"))

    qp = b.build()
    logger.debug("assembled DRO QP: %d variables, %d eq, %d ineq, V=%d", qp.n, qp.A_eq.shape[0], qp.A_in.shape[0], V)
    return DroQp(qp, model, data, risk, layout, rows, tau, blocks, P, q, const)


@dataclass(frozen=True)
class ObjectiveBreakdown:
    total: float
    cost: float
    dro: np.ndarray  # per risk row: eps*lambda_v + mean_i s_iv

    @property
    def dro_total(self) -> float:
        return float(self.dro.sum())


@dataclass(frozen=True)
class Solution:
    policy: AffinePolicy
    tau: np.ndarray
    objective: ObjectiveBreakdown
    status: QpStatus
    kkt: KktReport
    z: np.ndarray = field(repr=False)
    lam: np.ndarray = field(repr=False)

    @property
    def ok(self) -> bool:
        return self.status.ok


def policy_cost(droqp: DroQp, z_policy: np.ndarray) -> float:
    z = np.asarray(z_policy, dtype=float)[: droqp.layout.size]
    return float(0.5 * z @ (droqp.cost_P @ z) + droqp.cost_q @ z + droqp.cost_const)


def solve(droqp: DroQp, tol: float = DEFAULT_TOL, raise_on_failure: bool = True) -> Solution:
    """Solve the assembled program and unpack the policy and objective terms."""
    res: QpResult = solve_qp(droqp.qp, tol=tol)
    if not res.status.ok and raise_on_failure:
        raise QpSolveError(
            f"DRO QP not solved: {res.status.status} ({', '.join(res.kkt.failures(droqp.qp, tol))})", res.status
        )
    z = res.z
    eps = droqp.risk.epsilon
    dro = np.array([eps * z[blk.lam.start] + z[blk.s].mean() for blk in droqp.blocks])
    cost = policy_cost(droqp, z)
    return Solution(
        policy=droqp.layout.unpack(z),
        tau=z[droqp.tau].copy(),
        objective=ObjectiveBreakdown(res.objective, cost, dro),
        status=res.status,
        kkt=res.kkt,
        z=z,
        lam=np.array([z[blk.lam.start] for blk in droqp.blocks]),
    )


def constraint_values(rows: list[AffineConstraint], z_policy: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Realized risk-row values ``g_v(xi)`` for samples ``xi`` -> ``(N, V)``."""
    xi = np.atleast_2d(xi)
    out = np.empty((xi.shape[0], len(rows)))
    for v, row in enumerate(rows):
        a, b = row.coefficients(z_policy)
        out[:, v] = xi @ a + b
    return out


def sample_costs(model: HorizonModel, policy: AffinePolicy, xi: np.ndarray) -> np.ndarray:
    """Realized total device cost per sample."""
    xi = np.atleast_2d(xi)
    total = np.zeros(xi.shape[0])
    for j, u in enumerate(policy.inputs(xi)):
        H, f, c = _effective_cost(model, j)
        total += 0.5 * np.einsum("ni,ij,nj->n", u, H, u) + u @ f + c
    return total
