"""Data-driven Wasserstein DRO of max-affine losses.

For a loss ``h(xi) = max_k <a_k, xi> + b_k`` whose coefficients are affine
in the decision vector, the worst-case expectation over the Wasserstein ball
of radius ``eps`` around the empirical distribution is the optimum of

    min  lam * eps + mean_i s_i
    s.t. rho (b_k + <a_k, xi_i>) + <g_ik, d - H xi_i> <= s_i
         || H' g_ik - rho a_k ||_*  <= lam,      g_ik >= 0

where ``||.||_*`` is the dual of the transport ground norm and
``{xi : H xi <= d}`` the support. This module emits those rows into a
:class:`~dro_opf.qp.ProgramBuilder`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import scipy.sparse as sp

from .qp import ProgramBuilder

GroundNorm = Literal["1", "inf"]


@dataclass(frozen=True)
class SupportPolytope:
    """``{xi : H xi <= d}``; zero rows means all of R^dim."""

    H: np.ndarray
    d: np.ndarray

    @classmethod
    def unbounded(cls, dim: int) -> "SupportPolytope":
        return cls(np.zeros((0, dim)), np.zeros(0))

    @classmethod
    def box(cls, lo, hi) -> "SupportPolytope":
        lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
        eye = np.eye(lo.size)
        return cls(np.vstack([eye, -eye]), np.concatenate([hi, -lo]))

    @property
    def empty(self) -> bool:
        return self.H.shape[0] == 0


@dataclass(frozen=True)
class ForecastDataset:
    """Forecast-error samples, one row per sample, plus their support."""

    samples: np.ndarray
    support: SupportPolytope

    def __post_init__(self):
        X = np.asarray(self.samples, dtype=float)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ValueError(f"samples must be a non-empty 2-D array, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("samples contain non-finite values")
        if self.support.H.shape[1] != X.shape[1]:
            raise ValueError(f"support has {self.support.H.shape[1]} columns, samples have {X.shape[1]}")
        if not self.support.empty:
            viol = X @ self.support.H.T - self.support.d
            if viol.max() > 1e-9:
                i = int(np.argmax(viol.max(axis=1)))
                raise ValueError(f"sample {i} lies outside the support polytope (violation {viol.max():.3e})")
        object.__setattr__(self, "samples", X)

    @classmethod
    def from_array(cls, X, support: SupportPolytope | None = None) -> "ForecastDataset":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return cls(X, support if support is not None else SupportPolytope.unbounded(X.shape[1]))

    @property
    def n_samples(self) -> int:
        return int(self.samples.shape[0])

    @property
    def dim(self) -> int:
        return int(self.samples.shape[1])

    def subset(self, idx) -> "ForecastDataset":
        return ForecastDataset(self.samples[np.asarray(idx)], self.support)


@dataclass(frozen=True)
class AmbiguityConfig:
    epsilon: float = 0.0
    ground_norm: GroundNorm = "1"

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.ground_norm not in ("1", "inf"):
            raise ValueError(f"ground_norm must be '1' or 'inf', got {self.ground_norm!r}")

    def dual_norm(self, v: np.ndarray, axis=-1) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return np.abs(v).max(axis=axis) if self.ground_norm == "1" else np.abs(v).sum(axis=axis)


@dataclass(frozen=True)
class AffinePiece:
    """``a(z) = a_mat z + a_const`` (length ``dim``) and ``b(z) = b_row z + b_const``.

    ``z`` is the decision prefix of width ``a_mat.shape[1]``.
    """

    a_mat: sp.csr_matrix
    a_const: np.ndarray
    b_row: sp.csr_matrix
    b_const: float

    @property
    def n_dec(self) -> int:
        return int(self.a_mat.shape[1])

    def at(self, z) -> tuple[np.ndarray, float]:
        z = np.asarray(z, dtype=float)
        return self.a_mat @ z + self.a_const, float((self.b_row @ z)[0] + self.b_const)

    def is_constant_zero_slope(self) -> bool:
        return self.a_mat.nnz == 0 and not np.any(self.a_const)


@dataclass(frozen=True)
class MaxAffineLoss:
    pieces: tuple[AffinePiece, ...]

    def __post_init__(self):
        if not self.pieces:
            raise ValueError("a max-affine loss needs at least one piece")
        if len({(p.a_mat.shape, p.b_row.shape) for p in self.pieces}) != 1:
            raise ValueError("all pieces must share the decision width and dimension")

    @property
    def dim(self) -> int:
        return int(self.pieces[0].a_const.size)

    @property
    def n_dec(self) -> int:
        return self.pieces[0].n_dec

    @classmethod
    def constant(cls, a, b) -> "MaxAffineLoss":
        """Loss with fixed coefficients: ``a`` is ``(K, dim)``, ``b`` length ``K``."""
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        return cls(tuple(
            AffinePiece(sp.csr_matrix((a.shape[1], 0)), a[k].copy(), sp.csr_matrix((1, 0)), float(b[k]))
            for k in range(a.shape[0])
        ))

    def coefficients(self, z=None) -> tuple[np.ndarray, np.ndarray]:
        """``(a, b)`` as ``(K, dim)`` and ``(K,)`` at decisions ``z``."""
        z = np.zeros(self.n_dec) if z is None else np.asarray(z, dtype=float)[: self.n_dec]
        ab = [p.at(z) for p in self.pieces]
        return np.array([a for a, _ in ab]), np.array([b for _, b in ab])

    def evaluate(self, xi, z=None) -> np.ndarray:
        a, b = self.coefficients(z)
        return (np.atleast_2d(xi) @ a.T + b).max(axis=1)


def cvar_pieces(
    a_mat: sp.spmatrix,
    a_const: np.ndarray,
    b_row: sp.spmatrix,
    b_const: float,
    alpha: float,
    tau_index: int,
) -> MaxAffineLoss:
    """Two-piece loss whose expectation is ``E[g + tau]_+ - tau*alpha``.

    ``g(xi) = <a, xi> + b`` with ``a``/``b`` affine in the decisions and
    ``tau`` the decision at ``tau_index`` (must lie inside ``b_row``'s width).
    Pieces: ``(a, b + (1-alpha) tau)`` and ``(0, -alpha tau)``.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    a_mat = sp.csr_matrix(a_mat)
    b_row = sp.csr_matrix(b_row)
    n = a_mat.shape[1]
    if not 0 <= tau_index < n or b_row.shape != (1, n):
        raise ValueError(f"tau index {tau_index} outside decision width {n}")
    e_tau = sp.csr_matrix(([1.0], ([0], [tau_index])), shape=(1, n))
    a_const = np.asarray(a_const, dtype=float).ravel()
    first = AffinePiece(a_mat, a_const, sp.csr_matrix(b_row + (1.0 - alpha) * e_tau), float(b_const))
    second = AffinePiece(sp.csr_matrix(a_mat.shape), np.zeros_like(a_const), sp.csr_matrix(-alpha * e_tau), 0.0)
    return MaxAffineLoss((first, second))


@dataclass(frozen=True)
class EpigraphBlock:
    lam: slice
    s: slice
    gamma: slice | None
    nu: slice | None


def _widen(M: sp.spmatrix, n: int) -> sp.coo_matrix:
    M = sp.coo_matrix(M)
    return sp.coo_matrix((M.data, (M.row, M.col)), shape=(M.shape[0], n))


def dro_epigraph(
    builder: ProgramBuilder,
    loss: MaxAffineLoss,
    data: ForecastDataset,
    amb: AmbiguityConfig,
    scale: float = 1.0,
    tag: str = "",
) -> EpigraphBlock:
    """Emit the worst-case-expectation epigraph of ``scale * loss`` into ``builder``.

    The loss decision prefix must already exist in the builder. Adds
    ``eps * lam + mean(s)`` to the objective. Rows are ordered sample-major,
    then by piece, followed by the dual-norm rows and ``gamma >= 0``.
    """
    if loss.dim != data.dim:
        raise ValueError(f"loss dimension {loss.dim} does not match data dimension {data.dim}")
    if loss.n_dec > builder.n:
        raise ValueError("loss refers to decisions the builder does not have")
    N, dim, K = data.n_samples, data.dim, len(loss.pieces)
    X = data.samples
    H, d = data.support.H, data.support.d
    nh = H.shape[0]
    rho = float(scale)

    lam = builder.add_var(f"lambda{tag}", 1)
    s = builder.add_var(f"s{tag}", N)
    gamma = builder.add_var(f"gamma{tag}", N * K * nh) if nh else None

    builder.add_linear_cost([lam.start], amb.epsilon)
    builder.add_linear_cost(np.arange(s.start, s.stop), 1.0 / N)

    # sample/piece rows: rho*(b_row + xi_i' a_mat) z + (d - H xi_i)' g_ik - s_i <= -rho*(b_const + xi_i' a_const)
    blocks = []
    rhs = np.empty(N * K)
    gap = d[None, :] - X @ H.T if nh else None  # (N, nh)
    for k, p in enumerate(loss.pieces):
        dec = rho * (sp.csr_matrix(X) @ p.a_mat + sp.vstack([p.b_row] * N))  # (N, n_dec)
        dec = sp.coo_matrix(dec)
        rows = dec.row * K + k
        parts_r, parts_c, parts_v = [rows], [dec.col], [dec.data]
        i = np.arange(N)
        parts_r.append(i * K + k)
        parts_c.append(s.start + i)
        parts_v.append(-np.ones(N))
        if nh:
            gi = gamma.start + ((i * K + k) * nh)[:, None] + np.arange(nh)[None, :]
            parts_r.append(np.repeat(i * K + k, nh))
            parts_c.append(gi.ravel())
            parts_v.append(gap.ravel())
        blocks.append((np.concatenate(parts_r), np.concatenate(parts_c), np.concatenate(parts_v)))
        rhs[np.arange(N) * K + k] = -rho * (p.b_const + X @ p.a_const)
    r = np.concatenate([b[0] for b in blocks])
    c = np.concatenate([b[1] for b in blocks])
    v = np.concatenate([b[2] for b in blocks])
    builder.add_ineq(sp.coo_matrix((v, (r, c)), shape=(N * K, builder.n)), rhs)

    # dual-norm rows, one group per (i, k) with support, per k without
    groups = [(i, k) for i in range(N) for k in range(K)] if nh else [(None, k) for k in range(K)]
    nu = None
    if amb.ground_norm == "inf":
        nu = builder.add_var(f"nu{tag}", len(groups) * dim)
    for g, (i, k) in enumerate(groups):
        p = loss.pieces[k]
        if not nh and nu is None and p.is_constant_zero_slope():
            builder.add_ineq(sp.coo_matrix(([-1.0], ([0], [lam.start])), shape=(1, builder.n)), [0.0])
            continue
        # w = H' g_ik - rho a_mat z - rho a_const
        W = -rho * _widen(p.a_mat, builder.n).tocsr()
        if nh:
            gi = gamma.start + (i * K + k) * nh + np.arange(nh)
            W = W + sp.csr_matrix((H.T.ravel(), (np.repeat(np.arange(dim), nh), np.tile(gi, dim))), shape=(dim, builder.n))
        w0 = -rho * p.a_const
        if nu is None:
            bound = sp.csr_matrix((np.ones(dim), (np.arange(dim), np.full(dim, lam.start))), shape=(dim, builder.n))
            builder.add_ineq(sp.vstack([W - bound, -W - bound]), np.concatenate([-w0, w0]))
        else:
            nui = nu.start + g * dim + np.arange(dim)
            bound = sp.csr_matrix((np.ones(dim), (np.arange(dim), nui)), shape=(dim, builder.n))
            total = sp.csr_matrix(
                (np.concatenate([np.ones(dim), [-1.0]]), (np.zeros(dim + 1, dtype=int), np.append(nui, lam.start))),
                shape=(1, builder.n),
            )
            builder.add_ineq(sp.vstack([W - bound, -W - bound, total]), np.concatenate([-w0, w0, [0.0]]))

    if nh:
        cnt = N * K * nh
        builder.add_ineq(
            sp.coo_matrix((-np.ones(cnt), (np.arange(cnt), gamma.start + np.arange(cnt))), shape=(cnt, builder.n)),
            np.zeros(cnt),
        )
    return EpigraphBlock(lam, s, gamma, nu)


def worst_case_expectation_oracle(loss: MaxAffineLoss, data: ForecastDataset, amb: AmbiguityConfig, z=None) -> float:
    """Closed-form worst-case expectation for unbounded support.

    ``mean_i max_k(<a_k, xi_i> + b_k) + eps * max_k ||a_k||_*``. Used to
    cross-check :func:`dro_epigraph`; it does not handle a support polytope.
    """
    if not data.support.empty:
        raise NotImplementedError("the closed-form oracle only covers unbounded support")
    a, _ = loss.coefficients(z)
    avg = float(loss.evaluate(data.samples, z).mean())
    return avg + amb.epsilon * float(amb.dual_norm(a, axis=1).max())


def empirical_cvar(values, alpha: float) -> float:
    """Empirical CVaR: mean of the worst ``alpha`` fraction, boundary atom weighted.

    Equals ``min_tau -tau + mean([v + tau]_+) / alpha``.
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("empirical CVaR of an empty sample")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    v = np.sort(v)[::-1]
    k = alpha * v.size
    full = min(int(np.floor(k)), v.size)
    total = v[:full].sum()
    if full < v.size:
        total += (k - full) * v[full]
    return float(total / k)


def empirical_cvar_columns(values: np.ndarray, alpha: float) -> np.ndarray:
    """:func:`empirical_cvar` of every column of a ``(M, V)`` array."""
    values = np.atleast_2d(values)
    return np.array([empirical_cvar(values[:, j], alpha) for j in range(values.shape[1])])
