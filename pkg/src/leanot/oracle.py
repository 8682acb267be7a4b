"""Exact small-instance solvers used as ground truth in tests.

`exact_ot` is a textbook primal simplex specialized to the transport tableau:
northwest-corner start, tree-structured basis, Bland's rule for both the
entering and leaving cell so no degenerate cycle can recur.  It is
deliberately independent of every iterative solver in this package.  The
entropic companion `exact_eot_small` runs Sinkhorn to near machine precision
and refuses to answer unless the first-order conditions check out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CostKernel, Histogram
from .rounding import DenseCoupling
from .sinkhorn import sinkhorn_plan_dense, sinkhorn_solve

__all__ = ["ExactSolution", "exact_ot", "exact_eot_small"]

_MAX_LP_N = 64
_RC_TOL = 1e-12  # reduced-cost optimality threshold (costs are normalized)


@dataclass
class ExactSolution:
    """Optimal plan with a dual certificate u_i + v_j <= C_ij."""

    value: float
    plan: DenseCoupling
    u: np.ndarray
    v: np.ndarray
    pivots: int

    def dual_value(self, r: Histogram, c: Histogram) -> float:
        return float(self.u @ r.weights + self.v @ c.weights)


def _northwest_start(r: np.ndarray, c: np.ndarray):
    """Initial basic feasible plan with exactly 2n - 1 basic cells."""
    n = r.size
    plan = np.zeros((n, n))
    basis = []
    supply = r.copy()
    demand = c.copy()
    i = j = 0
    while True:
        q = min(supply[i], demand[j])
        plan[i, j] = q
        basis.append((i, j))
        supply[i] -= q
        demand[j] -= q
        if i == n - 1 and j == n - 1:
            break
        # Advance exactly one index per step (ties advance the row) so the
        # basis graph stays a spanning tree even under degeneracy.
        if supply[i] <= demand[j] and i < n - 1:
            i += 1
        else:
            j += 1
    return plan, basis


def _duals_from_basis(C: np.ndarray, basis: list) -> tuple[np.ndarray, np.ndarray]:
    """Solve u_i + v_j = C_ij over the basis tree, anchored at u_0 = 0."""
    n = C.shape[0]
    row_adj = [[] for _ in range(n)]
    col_adj = [[] for _ in range(n)]
    for (i, j) in basis:
        row_adj[i].append(j)
        col_adj[j].append(i)
    u = np.full(n, np.nan)
    v = np.full(n, np.nan)
    u[0] = 0.0
    stack = [("r", 0)]
    while stack:
        kind, k = stack.pop()
        if kind == "r":
            for j in row_adj[k]:
                if np.isnan(v[j]):
                    v[j] = C[k, j] - u[k]
                    stack.append(("c", j))
        else:
            for i in col_adj[k]:
                if np.isnan(u[i]):
                    u[i] = C[i, k] - v[k]
                    stack.append(("r", i))
    if np.isnan(u).any() or np.isnan(v).any():
        raise RuntimeError("basis graph is not connected")
    return u, v


def _basis_cycle(basis: set, enter: tuple[int, int], n: int) -> list:
    """The unique cycle created by adding `enter` to the basis tree.

    Returns the cycle as a cell list starting at `enter`, alternating
    row-walks and column-walks.
    """
    row_adj = [[] for _ in range(n)]
    col_adj = [[] for _ in range(n)]
    for (i, j) in basis:
        row_adj[i].append(j)
        col_adj[j].append(i)
    # Path in the tree from column node enter[1] to row node enter[0].
    target = enter[0]
    parent = {}
    frontier = [("c", enter[1])]
    seen = {("c", enter[1])}
    found = False
    while frontier and not found:
        nxt = []
        for node in frontier:
            kind, k = node
            if kind == "c":
                for i in col_adj[k]:
                    child = ("r", i)
                    if child not in seen:
                        seen.add(child)
                        parent[child] = node
                        if i == target:
                            found = True
                        nxt.append(child)
            else:
                for j in row_adj[k]:
                    child = ("c", j)
                    if child not in seen:
                        seen.add(child)
                        parent[child] = node
                        nxt.append(child)
        frontier = nxt
    if not found:
        raise RuntimeError("entering cell closes no cycle; basis corrupt")
    # Walk back row->col pairs into cells: path nodes c_j0(=enter col), r_i1, c_j1, ..., r_target.
    nodes = [("r", target)]
    while nodes[-1] != ("c", enter[1]):
        nodes.append(parent[nodes[-1]])
    nodes.reverse()  # c,r,c,r,...,r ending at target row
    cells = [enter]
    for a, b in zip(nodes, nodes[1:]):
        if a[0] == "c":  # (col j) -> (row i): cell (i, j)
            cells.append((b[1], a[1]))
        else:  # (row i) -> (col j): cell (i, j)
            cells.append((a[1], b[1]))
    return cells


def exact_ot(kernel: CostKernel, r: Histogram, c: Histogram) -> ExactSolution:
    """Solve the transport LP exactly (n <= 64) with a dual certificate.

    Complementary slackness holds by construction: nonbasic cells carry zero
    mass and basic cells satisfy u_i + v_j = C_ij exactly up to roundoff.
    """
    n = kernel.n
    if n > _MAX_LP_N:
        raise ValueError(f"exact_ot limited to n <= {_MAX_LP_N}")
    if r.n != n or c.n != n:
        raise ValueError("marginal size mismatch")
    if abs(r.weights.sum() - c.weights.sum()) > 1e-12:
        raise ValueError("marginal sums differ; transport LP infeasible")
    C = kernel.materialize()
    plan, basis_list = _northwest_start(r.weights, c.weights)
    basis = set(basis_list)

    pivots = 0
    for pivots in range(1, 100_000):
        u, v = _duals_from_basis(C, basis)
        rc = C - u[:, None] - v[None, :]
        for (i, j) in basis:
            rc[i, j] = 0.0
        # Bland: smallest row-major index with negative reduced cost.
        neg = np.argwhere(rc < -_RC_TOL)
        if neg.size == 0:
            break
        enter = (int(neg[0, 0]), int(neg[0, 1]))
        cycle = _basis_cycle(basis, enter, n)
        minus = cycle[1::2]
        theta = min(plan[ij] for ij in minus)
        # Bland again: lowest-index minimizer leaves.
        leave = min(ij for ij in minus if plan[ij] <= theta)
        for sign, ij in zip([1, -1] * len(cycle), cycle):
            plan[ij] += sign * theta
        plan[leave] = 0.0
        plan[plan < 0] = 0.0  # roundoff guard
        basis.remove(leave)
        basis.add(enter)
    else:
        raise RuntimeError("transport simplex failed to terminate")

    value = float((plan * C).sum())
    return ExactSolution(value, DenseCoupling(plan), u, v, pivots)


def exact_eot_small(kernel: CostKernel, r: Histogram, c: Histogram, eta: float,
                    kkt_tol: float = 1e-9) -> DenseCoupling:
    """The unique entropic optimum for n <= 16, cross-validated via KKT.

    Runs Sinkhorn at tolerance 1e-13, then checks that eta log(pi) + C is
    additively separable across rows/columns (the stationarity condition);
    raises instead of returning an unverified plan.
    """
    if kernel.n > 16:
        raise ValueError("exact_eot_small limited to n <= 16")
    if eta <= 0:
        raise ValueError("eta must be positive")
    pot = sinkhorn_solve(kernel, r, c, eta, tol=1e-13, max_iter=1_000_000)
    if not pot.converged:
        raise RuntimeError("reference Sinkhorn did not converge to 1e-13")
    plan = sinkhorn_plan_dense(pot, kernel)
    if plan.min() <= 0:
        raise RuntimeError("plan underflowed; eta too small for a verified oracle")
    g = eta * np.log(plan) + kernel.materialize()
    g = g - g.mean(axis=1, keepdims=True) - g.mean(axis=0, keepdims=True) + g.mean()
    resid = np.abs(g).max()
    if resid > kkt_tol:
        raise RuntimeError(f"KKT residual {resid:.2e} exceeds {kkt_tol:.0e}")
    return DenseCoupling(plan)
