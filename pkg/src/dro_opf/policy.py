"""Causal affine reserve policies ``u_j = D_j xi + e_j`` and power balance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .network import HorizonModel, injection_arrays


class StructuralInfeasibilityError(ValueError):
    """Power balance cannot hold for every forecast error under the policy structure."""


def causality_mask(m: int, T: int, N_xi: int, same_step_recourse: bool = False) -> np.ndarray:
    """Boolean ``(m*T, N_xi*T)`` mask of the policy entries allowed to be nonzero.

    Block ``(t, s)`` is free when ``s < t``: the input at step ``t`` reacts
    only to errors revealed at earlier steps. With ``same_step_recourse`` the
    diagonal blocks are free as well.
    """
    if m < 1 or T < 1 or N_xi < 1:
        raise ValueError(f"dimensions must be positive, got m={m}, T={T}, N_xi={N_xi}")
    k = 0 if same_step_recourse else -1
    return np.kron(np.tril(np.ones((T, T), dtype=bool), k=k), np.ones((m, N_xi), dtype=bool))


@dataclass(frozen=True)
class PolicyLayout:
    """Positions of policy unknowns at the head of the decision vector.

    All devices' free ``D`` entries come first (row-major within each
    device), followed by every device's ``e``.
    """

    masks: tuple[np.ndarray, ...]
    free_flat: tuple[np.ndarray, ...]  # row-major flat indices into D_j
    D_slices: tuple[slice, ...]
    e_slices: tuple[slice, ...]

    @property
    def size(self) -> int:
        return self.e_slices[-1].stop if self.e_slices else 0

    @property
    def n_free_D(self) -> int:
        return self.D_slices[-1].stop if self.D_slices else 0

    @classmethod
    def for_model(cls, model: HorizonModel) -> "PolicyLayout":
        T, N_xi = model.T, model.case.N_xi
        masks, flats, D_sl = [], [], []
        off = 0
        for dev in model.case.devices:
            mask = causality_mask(dev.m, T, N_xi, model.case.same_step_recourse)
            flat = np.flatnonzero(mask.ravel())
            masks.append(mask)
            flats.append(flat)
            D_sl.append(slice(off, off + flat.size))
            off += flat.size
        e_sl = []
        for dev in model.case.devices:
            e_sl.append(slice(off, off + dev.m * T))
            off += dev.m * T
        return cls(tuple(masks), tuple(flats), tuple(D_sl), tuple(e_sl))

    def unpack(self, z: np.ndarray) -> "AffinePolicy":
        Ds, es = [], []
        for mask, flat, dsl, esl in zip(self.masks, self.free_flat, self.D_slices, self.e_slices):
            D = np.zeros(mask.size)
            D[flat] = z[dsl]
            Ds.append(D.reshape(mask.shape))
            es.append(np.array(z[esl], dtype=float))
        return AffinePolicy(tuple(Ds), tuple(es), self.masks)

    def pack(self, policy: "AffinePolicy") -> np.ndarray:
        z = np.zeros(self.size)
        for D, e, flat, dsl, esl in zip(policy.D, policy.e, self.free_flat, self.D_slices, self.e_slices):
            z[dsl] = np.asarray(D).ravel()[flat]
            z[esl] = e
        return z


@dataclass(frozen=True)
class AffinePolicy:
    D: tuple[np.ndarray, ...]
    e: tuple[np.ndarray, ...]
    masks: tuple[np.ndarray, ...]

    def __post_init__(self):
        for j, (D, e, mask) in enumerate(zip(self.D, self.e, self.masks)):
            if D.shape != mask.shape or e.shape != (mask.shape[0],):
                raise ValueError(f"policy block {j}: D {D.shape}, e {e.shape} do not match mask {mask.shape}")
            if np.any(D[~mask] != 0.0):
                raise ValueError(f"policy block {j}: nonzero entries outside the causal pattern")

    def inputs(self, xi: np.ndarray) -> list[np.ndarray]:
        """Per-device inputs for samples ``xi`` of shape ``(N, N_xi*T)`` -> ``(N, m_j*T)``."""
        xi = np.atleast_2d(xi)
        return [xi @ D.T + e for D, e in zip(self.D, self.e)]


@dataclass(frozen=True)
class BalanceSystem:
    """``A z[:layout.size] = b`` over the policy unknowns."""

    A: sp.csr_matrix
    b: np.ndarray
    layout: PolicyLayout


def balance_constraints(model: HorizonModel, layout: PolicyLayout | None = None) -> BalanceSystem:
    """Equality rows enforcing power balance for every forecast error.

    Nominal part: ``sum_j C_j B_j e_j = -sum_j (r_j + C_j A_j x0_j)`` (``T`` rows).
    Error part: ``sum_j C_j B_j D_j = -sum_k G_k`` restricted to entries some
    free policy coefficient can reach; an unreachable entry with nonzero
    right-hand side raises :class:`StructuralInfeasibilityError`.
    """
    layout = layout or PolicyLayout.for_model(model)
    T, nxi = model.T, model.xi_dim
    rs, Gs = injection_arrays(model)
    G_sum = sum(Gs) if Gs else np.zeros((T, nxi))
    r_sum = sum(rs) if rs else np.zeros(T)

    rows, cols, vals = [], [], []
    rhs_nom = -np.asarray(r_sum, dtype=float).copy()
    for dm, dev, esl in zip(model.dev, model.case.devices, layout.e_slices):
        W = dm.C_sel @ dm.B_stack  # (T, mT)
        rhs_nom -= dm.C_sel @ dm.A_stack @ np.asarray(dev.x0, dtype=float)
        r_, c_ = np.nonzero(W)
        rows.append(r_)
        cols.append(esl.start + c_)
        vals.append(W[r_, c_])

    # D_j[a, c] is flat index a*nxi + c; it reaches row t*nxi + c with weight W[t, a].
    for dm, flat, dsl in zip(model.dev, layout.free_flat, layout.D_slices):
        W = dm.C_sel @ dm.B_stack
        a_idx, c_idx = np.divmod(flat, nxi)
        for t in range(T):
            w = W[t, a_idx]
            nz = np.flatnonzero(w)
            rows.append(T + t * nxi + c_idx[nz])
            cols.append(dsl.start + nz)
            vals.append(w[nz])

    n_rows = T + T * nxi
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_rows, layout.size),
    )
    A.eliminate_zeros()
    b = np.concatenate([rhs_nom, -G_sum.ravel()])

    reach = np.diff(A.indptr) > 0
    scale = max(1.0, float(np.abs(b).max(initial=0.0)))
    dead = np.flatnonzero(~reach & (np.abs(b) > 1e-12 * scale))
    if dead.size:
        msgs = []
        for r in dead[:5]:
            if r < T:
                msgs.append(f"nominal balance at step {r} has no controllable input")
            else:
                t, c = divmod(r - T, nxi)
                s, q = divmod(c, model.case.N_xi)
                msgs.append(
                    f"error component {q} of step {s} enters the balance at step {t} "
                    "but no causal policy entry can offset it"
                )
        raise StructuralInfeasibilityError("; ".join(msgs) + (f" (+{dead.size - 5} more)" if dead.size > 5 else ""))

    keep = np.flatnonzero(reach)
    A, b = A[keep], b[keep]
    if A.shape[0]:
        sol = np.linalg.lstsq(A.toarray(), b, rcond=None)[0]
        resid = float(np.abs(A @ sol - b).max())
        if resid > 1e-8 * scale:
            raise StructuralInfeasibilityError(f"balance equalities are inconsistent (least-squares residual {resid:.3e})")
    return BalanceSystem(A.tocsr(), b, layout)


def total_injection(model: HorizonModel, policy: AffinePolicy, xi: np.ndarray) -> np.ndarray:
    """Network-wide net injection per time step for samples ``xi`` -> ``(N, T)``."""
    xi = np.atleast_2d(xi)
    rs, Gs = injection_arrays(model)
    total = np.zeros((xi.shape[0], model.T))
    for r, G in zip(rs, Gs):
        total += r + xi @ G.T
    for dm, dev, u in zip(model.dev, model.case.devices, policy.inputs(xi)):
        x = dm.A_stack @ np.asarray(dev.x0, dtype=float) + u @ dm.B_stack.T
        total += x @ dm.C_sel.T
    return total
