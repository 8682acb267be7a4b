"""Log-domain Sinkhorn for the entropic OT dual and IBP for entropic barycenters.

Both solvers alternate exact LSE coordinate updates on the dual potentials and
never materialize an n x n plan unless asked to (and then only under the dense
cap).  Convergence is measured by the l1 column-marginal gap of the
row-feasible plan, matching the termination rule used by the extragradient
drivers, so baseline and solver trajectories are directly comparable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DENSE_CAP, CostKernel, Histogram, lse_rows, map_blocks

__all__ = [
    "DualPotentials",
    "IbpResult",
    "sinkhorn_solve",
    "eot_dual_value",
    "sinkhorn_plan_dense",
    "sinkhorn_column_marginal",
    "ibp_barycenter",
    "ibp_plan_dense",
]


@dataclass
class DualPotentials:
    """Row/column potentials of the entropic dual, in normalized cost units.

    The dual value is invariant under phi -> phi + a, psi -> psi + b; the
    solver keeps phi mean-centered after each sweep so outputs are
    reproducible.
    """

    phi: np.ndarray
    psi: np.ndarray
    eta: float
    converged: bool = True
    sweeps: int = 0
    col_gap: float = field(default=np.nan)


def _col_lse(kernel: CostKernel, phi: np.ndarray, eta: float, workers: int) -> np.ndarray:
    """LSE_i((phi_i - C_ij)/eta) per column, streamed over row blocks."""
    n = kernel.n

    def work(i0, i1):
        z = (phi[i0:i1, None] - kernel.block(i0, i1)) / eta
        m = z.max(axis=0)
        return m, np.exp(z - m[None, :]).sum(axis=0)

    run_m = np.full(n, -np.inf)
    run_s = np.zeros(n)
    for m, s in map_blocks(work, n, workers):
        new_m = np.maximum(run_m, m)
        run_s = run_s * np.exp(run_m - new_m) + s * np.exp(m - new_m)
        run_m = new_m
    return run_m + np.log(run_s)


def _row_lse(kernel: CostKernel, psi: np.ndarray, eta: float, workers: int) -> np.ndarray:
    """LSE_j((psi_j - C_ij)/eta) per row, streamed."""

    def work(i0, i1):
        return lse_rows((psi[None, :] - kernel.block(i0, i1)) / eta)

    return np.concatenate(map_blocks(work, kernel.n, workers))


def sinkhorn_solve(
    kernel: CostKernel,
    r: Histogram,
    c: Histogram,
    eta: float,
    tol: float = 1e-9,
    max_iter: int = 100_000,
    workers: int = 1,
) -> DualPotentials:
    """Alternate exact row/column LSE updates until the column gap falls below tol.

    Rows of the implied plan match r exactly after every row update; the
    returned potentials always follow a row update, so only the column gap is
    reported.  On hitting max_iter the best (smallest-gap) potentials are
    returned with converged=False.
    """
    if eta <= 0:
        raise ValueError("sinkhorn requires eta > 0")
    if not (r.full_support and c.full_support):
        raise ValueError("sinkhorn requires full-support marginals")
    log_r, log_c = np.log(r.weights), np.log(c.weights)
    psi = np.zeros(kernel.n)
    best = None
    for sweep in range(1, max_iter + 1):
        phi = eta * log_r - eta * _row_lse(kernel, psi, eta, workers)
        psi_new = eta * log_c - eta * _col_lse(kernel, phi, eta, workers)
        # Column marginal of the current (row-feasible) plan, for free:
        # c(pi)_j = c_j exp((psi_j - psi'_j)/eta).
        col_gap = float(np.abs(c.weights * np.expm1((psi - psi_new) / eta)).sum())
        if best is None or col_gap < best.col_gap:
            best = DualPotentials(phi, psi, eta, True, sweep, col_gap)
        if col_gap <= tol:
            return _centered(DualPotentials(phi, psi, eta, True, sweep, col_gap))
        psi = psi_new
    out = _centered(best)
    out.converged = False
    return out


def _centered(pot: DualPotentials) -> DualPotentials:
    shift = pot.phi.mean()
    pot.phi = pot.phi - shift
    pot.psi = pot.psi + shift
    return pot


def eot_dual_value(pot: DualPotentials, kernel: CostKernel, r: Histogram, c: Histogram,
                   workers: int = 1) -> float:
    """<phi, r> + <psi, c> - eta * LSE_ij(-(C_ij - phi_i - psi_j)/eta)."""
    eta = pot.eta

    def work(i0, i1):
        z = (pot.phi[i0:i1, None] + pot.psi[None, :] - kernel.block(i0, i1)) / eta
        m = z.max()
        return m, np.exp(z - m).sum()

    run_m, run_s = -np.inf, 0.0
    for m, s in map_blocks(work, kernel.n, workers):
        new_m = max(run_m, m)
        run_s = run_s * np.exp(run_m - new_m) + s * np.exp(m - new_m)
        run_m = new_m
    total_lse = run_m + np.log(run_s)
    return float(pot.phi @ r.weights + pot.psi @ c.weights - eta * total_lse)


def sinkhorn_column_marginal(pot: DualPotentials, kernel: CostKernel, workers: int = 1) -> np.ndarray:
    """Column sums of the normalized plan implied by the potentials."""
    eta = pot.eta

    def work(i0, i1):
        z = (pot.phi[i0:i1, None] + pot.psi[None, :] - kernel.block(i0, i1)) / eta
        return np.exp(z).sum(axis=0)

    col = np.zeros(kernel.n)
    for part in map_blocks(work, kernel.n, workers):
        col += part
    return col / col.sum()


def sinkhorn_plan_dense(pot: DualPotentials, kernel: CostKernel, cap: int = DENSE_CAP) -> np.ndarray:
    """Materialize the normalized plan (tests and small instances only)."""
    if kernel.n > cap:
        raise ValueError("plan materialization above the dense cap")
    z = (pot.phi[:, None] + pot.psi[None, :] - kernel.materialize(cap)) / pot.eta
    plan = np.exp(z)
    return plan / plan.sum()


@dataclass
class IbpResult:
    barycenter: Histogram
    phis: np.ndarray  # (m, n) row potentials
    psis: np.ndarray  # (m, n) column potentials
    eta: float
    converged: bool
    sweeps: int
    col_gap: float  # max over marginals of the l1 column gap
    log_r: np.ndarray = field(repr=False, default=None)


def ibp_barycenter(
    kernel: CostKernel,
    marginals: list[Histogram],
    weights,
    eta: float,
    tol: float = 1e-9,
    max_iter: int = 10_000,
    workers: int = 1,
) -> IbpResult:
    """Fixed-support entropic barycenter via iterative Bregman projections.

    Each sweep projects every plan onto its column constraint, then onto the
    shared-row constraint, with the barycenter emerging as the weighted
    geometric mean of the row marginals (all in the log domain).
    """
    if eta <= 0:
        raise ValueError("ibp requires eta > 0")
    m = len(marginals)
    if m == 0:
        raise ValueError("need at least one marginal")
    w = np.asarray(weights, dtype=float).ravel()
    if w.size != m or np.any(w <= 0):
        raise ValueError("weights must be positive, one per marginal")
    w = w / w.sum()
    n = kernel.n
    for ck in marginals:
        if ck.n != n:
            raise ValueError("marginal length mismatch")
        if not ck.full_support:
            raise ValueError("ibp requires full-support marginals")
    log_c = np.stack([np.log(ck.weights) for ck in marginals])

    phis = np.zeros((m, n))
    psis = np.zeros((m, n))
    log_r = np.full(n, -np.log(n))
    gap = np.inf
    converged = False
    sweeps = 0
    for sweeps in range(1, max_iter + 1):
        psis_new = np.empty_like(psis)
        gaps = np.empty(m)
        for k in range(m):
            psis_new[k] = eta * log_c[k] - eta * _col_lse(kernel, phis[k], eta, workers)
            colm_err = np.exp(log_c[k]) * np.expm1((psis[k] - psis_new[k]) / eta)
            gaps[k] = np.abs(colm_err).sum()
        gap = float(gaps.max())
        if sweeps > 1 and gap <= tol:
            converged = True
            break
        psis = psis_new
        row_lses = np.stack([_row_lse(kernel, psis[k], eta, workers) for k in range(m)])
        log_r = (w[:, None] * (phis / eta + row_lses)).sum(axis=0)
        phis = eta * log_r[None, :] - eta * row_lses
    bary = Histogram.normalized(np.exp(log_r - log_r.max()))
    return IbpResult(bary, phis, psis, eta, converged, sweeps, gap, log_r=log_r)


def ibp_plan_dense(res: IbpResult, kernel: CostKernel, k: int, cap: int = DENSE_CAP) -> np.ndarray:
    """Materialize plan k of an IBP state (unnormalized IBP scaling)."""
    if kernel.n > cap:
        raise ValueError("plan materialization above the dense cap")
    z = (res.phis[k][:, None] + res.psis[k][None, :] - kernel.materialize(cap)) / res.eta
    return np.exp(z)
