"""Canonical convex QP, a row builder, and an interior-point solve with KKT checks.

Canonical form::

    minimize    0.5 z'Pz + q'z + const
    subject to  A_eq z  = b_eq
                A_in z <= u_in

The backend is Clarabel; after it converges the active set is polished by a
regularized KKT solve so residuals land near machine precision. Optimality is
always re-verified with :func:`kkt_residuals`, which does not trust the
backend.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8


class QpSolveError(RuntimeError):
    """The backend failed or returned a point that does not pass the KKT check."""

    def __init__(self, message: str, status: "QpStatus | None" = None):
        super().__init__(message)
        self.status = status


@dataclass
class QuadraticProgram:
    P: sp.csc_matrix
    q: np.ndarray
    const: float
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    A_in: sp.csr_matrix
    u_in: np.ndarray
    index: dict[str, slice] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return int(self.q.size)

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ (self.P @ z) + self.q @ z + self.const)

    def to_json(self) -> str:
        """Sparse-triplet JSON; identical programs give identical text."""

        def trip(M):
            M = sp.coo_matrix(M)
            order = np.lexsort((M.col, M.row))
            return {
                "shape": list(M.shape),
                "rows": M.row[order].tolist(),
                "cols": M.col[order].tolist(),
                "vals": M.data[order].tolist(),
            }

        doc = {
            "format_version": 1,
            "n": self.n,
            "P": trip(self.P),
            "q": self.q.tolist(),
            "const": self.const,
            "A_eq": trip(self.A_eq),
            "b_eq": self.b_eq.tolist(),
            "A_in": trip(self.A_in),
            "u_in": self.u_in.tolist(),
            "index": {k: [s.start, s.stop] for k, s in self.index.items()},
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "QuadraticProgram":
        doc = json.loads(text)

        def mat(t, fmt):
            M = sp.coo_matrix((t["vals"], (t["rows"], t["cols"])), shape=tuple(t["shape"]))
            return M.asformat(fmt)

        return cls(
            P=mat(doc["P"], "csc"),
            q=np.asarray(doc["q"], dtype=float),
            const=float(doc["const"]),
            A_eq=mat(doc["A_eq"], "csr"),
            b_eq=np.asarray(doc["b_eq"], dtype=float),
            A_in=mat(doc["A_in"], "csr"),
            u_in=np.asarray(doc["u_in"], dtype=float),
            index={k: slice(a, b) for k, (a, b) in doc["index"].items()},
        )


class ProgramBuilder:
    """Accumulates variables and sparse constraint rows in insertion order."""

    def __init__(self):
        self.n = 0
        self.index: dict[str, slice] = {}
        self._q: list[tuple[np.ndarray, np.ndarray]] = []
        self._P: list[sp.coo_matrix] = []
        self.const = 0.0
        self._eq: list[tuple[sp.coo_matrix, np.ndarray]] = []
        self._in: list[tuple[sp.coo_matrix, np.ndarray]] = []
        self._n_eq = 0
        self._n_in = 0

    def add_var(self, name: str, size: int) -> slice:
        if name in self.index:
            raise KeyError(f"variable block {name!r} already exists")
        sl = slice(self.n, self.n + int(size))
        self.index[name] = sl
        self.n += int(size)
        return sl

    def add_linear_cost(self, idx, coef) -> None:
        idx = np.asarray(idx, dtype=int).ravel()
        coef = np.broadcast_to(np.asarray(coef, dtype=float), idx.shape)
        self._q.append((idx, np.array(coef)))

    def add_quadratic(self, P: sp.spmatrix) -> None:
        """Add ``0.5 z'Pz`` where ``P`` spans the first ``P.shape[0]`` variables."""
        self._P.append(sp.coo_matrix(P))

    def add_eq(self, A: sp.spmatrix, b: np.ndarray) -> None:
        A = sp.coo_matrix(A)
        self._eq.append((A, np.asarray(b, dtype=float).ravel()))
        self._n_eq += A.shape[0]

    def add_ineq(self, A: sp.spmatrix, u: np.ndarray) -> None:
        A = sp.coo_matrix(A)
        self._in.append((A, np.asarray(u, dtype=float).ravel()))
        self._n_in += A.shape[0]

    @property
    def n_ineq(self) -> int:
        return self._n_in

    def _stack(self, blocks) -> tuple[sp.csr_matrix, np.ndarray]:
        if not blocks:
            return sp.csr_matrix((0, self.n)), np.zeros(0)
        mats = []
        for A, _ in blocks:
            A = sp.coo_matrix((A.data, (A.row, A.col)), shape=(A.shape[0], self.n))
            mats.append(A)
        M = sp.vstack(mats, format="csr")
        M.sum_duplicates()
        return M, np.concatenate([b for _, b in blocks])

    def build(self) -> QuadraticProgram:
        q = np.zeros(self.n)
        for idx, coef in self._q:
            np.add.at(q, idx, coef)
        P = sp.csc_matrix((self.n, self.n))
        for blk in self._P:
            P = P + sp.coo_matrix((blk.data, (blk.row, blk.col)), shape=(self.n, self.n))
        P = sp.csc_matrix(0.5 * (P + P.T))
        P.sum_duplicates()
        P.eliminate_zeros()
        A_eq, b_eq = self._stack(self._eq)
        A_in, u_in = self._stack(self._in)
        return QuadraticProgram(P, q, self.const, A_eq, b_eq, A_in, u_in, dict(self.index))


@dataclass(frozen=True)
class KktReport:
    stationarity: float
    primal_eq: float
    primal_ineq: float
    dual_ineq: float
    complementarity: float

    def passes(self, qp: QuadraticProgram, tol: float) -> bool:
        return self.failures(qp, tol) == []

    def failures(self, qp: QuadraticProgram, tol: float) -> list[str]:
        q_scale = 1.0 + float(np.abs(qp.q).max(initial=0.0))
        b_scale = 1.0 + float(np.abs(qp.b_eq).max(initial=0.0))
        u_scale = 1.0 + float(np.abs(qp.u_in).max(initial=0.0))
        checks = {
            "stationarity": (self.stationarity, tol * q_scale),
            "primal_eq": (self.primal_eq, tol * b_scale),
            "primal_ineq": (self.primal_ineq, tol * u_scale),
            "dual_ineq": (self.dual_ineq, tol * q_scale),
            "complementarity": (self.complementarity, tol * q_scale * u_scale),
        }
        return [f"{k}={v:.2e}>{lim:.2e}" for k, (v, lim) in checks.items() if not v <= lim]

    def as_dict(self) -> dict[str, float]:
        return dict(self.__dict__)


def kkt_residuals(qp: QuadraticProgram, z, y_eq=None, y_in=None) -> KktReport:
    """Infinity-norm KKT residuals of a candidate primal-dual point.

    With the Lagrangian ``f(z) + y_eq'(A_eq z - b_eq) + y_in'(A_in z - u_in)``
    and ``y_in >= 0``. Missing duals are taken as zero.
    """
    z = np.asarray(z, dtype=float)
    y_eq = np.zeros(qp.A_eq.shape[0]) if y_eq is None else np.asarray(y_eq, dtype=float)
    y_in = np.zeros(qp.A_in.shape[0]) if y_in is None else np.asarray(y_in, dtype=float)
    grad = qp.P @ z + qp.q + qp.A_eq.T @ y_eq + qp.A_in.T @ y_in
    slack = qp.u_in - qp.A_in @ z
    inf = lambda v: float(np.abs(v).max(initial=0.0))  # noqa: E731
    return KktReport(
        stationarity=inf(grad),
        primal_eq=inf(qp.A_eq @ z - qp.b_eq),
        primal_ineq=float(np.maximum(-slack, 0.0).max(initial=0.0)),
        dual_ineq=float(np.maximum(-y_in, 0.0).max(initial=0.0)),
        complementarity=inf(y_in * slack),
    )


@dataclass(frozen=True)
class QpStatus:
    status: str  # solved / infeasible / unbounded / max-iterations / inaccurate / failed
    iterations: int
    solve_time: float
    backend_status: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "solved"


@dataclass(frozen=True)
class QpResult:
    z: np.ndarray
    y_eq: np.ndarray
    y_in: np.ndarray
    objective: float
    dual_objective: float
    status: QpStatus
    kkt: KktReport
    polished: bool = False


def dual_objective(qp: QuadraticProgram, z, y_eq, y_in) -> float:
    """Wolfe dual value at ``(z, y)``; a lower bound on the optimum when stationarity holds."""
    return float(-0.5 * z @ (qp.P @ z) - qp.b_eq @ y_eq - qp.u_in @ y_in + qp.const)


_STATUS_MAP = {
    "Solved": "solved",
    "AlmostSolved": "inaccurate",
    "PrimalInfeasible": "infeasible",
    "AlmostPrimalInfeasible": "infeasible",
    "DualInfeasible": "unbounded",
    "AlmostDualInfeasible": "unbounded",
    "MaxIterations": "max-iterations",
    "MaxTime": "max-iterations",
    "NumericalError": "failed",
    "InsufficientProgress": "inaccurate",
}


def _clarabel_solve(qp: QuadraticProgram, tol: float, max_iter: int):
    import clarabel

    n = qp.n
    A = sp.vstack([qp.A_eq, qp.A_in], format="csc")
    b = np.concatenate([qp.b_eq, qp.u_in])
    cones = []
    if qp.A_eq.shape[0]:
        cones.append(clarabel.ZeroConeT(qp.A_eq.shape[0]))
    if qp.A_in.shape[0]:
        cones.append(clarabel.NonnegativeConeT(qp.A_in.shape[0]))
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = max_iter
    settings.tol_gap_abs = tol
    settings.tol_gap_rel = tol
    settings.tol_feas = tol
    settings.tol_ktratio = 1e-7
    P = sp.triu(qp.P, format="csc") if n else sp.csc_matrix((0, 0))
    if not cones:
        A = sp.csc_matrix((0, n))
    solver = clarabel.DefaultSolver(P, qp.q, A, b, cones, settings)
    return solver.solve()


def _polish(qp: QuadraticProgram, z, y_eq, y_in, delta: float = 1e-9, refine: int = 15):
    """Re-solve the KKT system on the estimated active set."""
    slack = qp.u_in - qp.A_in @ z
    active = np.flatnonzero(y_in > slack)
    A_act = sp.vstack([qp.A_eq, qp.A_in[active]], format="csc")
    rhs_c = np.concatenate([qp.b_eq, qp.u_in[active]])
    n, m = qp.n, A_act.shape[0]
    K = sp.bmat([[qp.P, A_act.T], [A_act, None]], format="csc")
    reg = sp.diags(np.concatenate([np.full(n, delta), np.full(m, -delta)]))
    rhs = np.concatenate([-qp.q, rhs_c])
    try:
        lu = spla.splu((K + reg).tocsc())
    except RuntimeError:
        return None
    sol = lu.solve(rhs)
    for _ in range(refine):
        r = rhs - K @ sol
        if np.abs(r).max(initial=0.0) < 1e-15 * (1 + np.abs(rhs).max(initial=0.0)):
            break
        sol = sol + lu.solve(r)
    if not np.all(np.isfinite(sol)):
        return None
    zp = sol[:n]
    y_eq_p = sol[n : n + qp.A_eq.shape[0]]
    y_in_p = np.zeros_like(y_in)
    y_in_p[active] = sol[n + qp.A_eq.shape[0] :]
    return zp, y_eq_p, y_in_p


def solve_qp(
    qp: QuadraticProgram,
    tol: float = DEFAULT_TOL,
    max_iter: int = 200,
    polish: bool = True,
) -> QpResult:
    """Solve the canonical QP and verify optimality independently of the backend.

    The returned status is ``"solved"`` only if :meth:`KktReport.passes`
    holds at ``tol``; otherwise the best point found is returned with a
    non-solved status so callers can decide.
    """
    t0 = time.perf_counter()
    # a second, tighter backend pass only when the first point fails the KKT check
    for backend_tol in (min(tol, 1e-8), min(tol, 1e-8) * 1e-3):
        res = _clarabel_solve(qp, tol=backend_tol, max_iter=max_iter)
        backend = str(res.status)
        status = _STATUS_MAP.get(backend, "failed")
        z = np.asarray(res.x, dtype=float)
        ydual = np.asarray(res.z, dtype=float)
        n_eq = qp.A_eq.shape[0]
        y_eq, y_in = ydual[:n_eq], ydual[n_eq:]
        polished = False

        if status in ("solved", "inaccurate"):
            y_in = np.maximum(y_in, 0.0)
            best = kkt_residuals(qp, z, y_eq, y_in)
            if polish and qp.n:
                cand = _polish(qp, z, y_eq, y_in)
                if cand is not None:
                    rep = kkt_residuals(qp, *cand)
                    if _score(qp, rep) < _score(qp, best):
                        z, y_eq, y_in = cand
                        best, polished = rep, True
            status = "solved" if best.passes(qp, tol) else "inaccurate"
        else:
            best = kkt_residuals(qp, z, y_eq, np.maximum(y_in, 0.0))
        if status != "inaccurate":
            break
        logger.debug("QP inaccurate at backend tolerance %.1e, retrying tighter", backend_tol)

    elapsed = time.perf_counter() - t0
    out = QpResult(
        z=z,
        y_eq=y_eq,
        y_in=y_in,
        objective=qp.objective(z),
        dual_objective=dual_objective(qp, z, y_eq, y_in),
        status=QpStatus(status, int(res.iterations), elapsed, backend),
        kkt=best,
        polished=polished,
    )
    if status != "solved":
        logger.warning("QP %s (backend %s): %s", status, backend, ", ".join(best.failures(qp, tol)))
    return out


def _score(qp: QuadraticProgram, rep: KktReport) -> float:
    """Worst residual relative to its tolerance scale."""
    q_scale = 1.0 + float(np.abs(qp.q).max(initial=0.0))
    b_scale = 1.0 + float(np.abs(qp.b_eq).max(initial=0.0))
    u_scale = 1.0 + float(np.abs(qp.u_in).max(initial=0.0))
    return max(
        rep.stationarity / q_scale,
        rep.primal_eq / b_scale,
        rep.primal_ineq / u_scale,
        rep.dual_ineq / q_scale,
        rep.complementarity / (q_scale * u_scale),
    )
