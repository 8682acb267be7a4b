"""Dual extragradient for entropic OT barycenters.

Each input marginal carries its own dual pair (mu_k, b_k); the scalar cost
weight a and the sequence value s are shared.  The barycenter itself is never
stored: it is recomputed from the per-marginal log-normalizers as

    r_i  propto  exp( sum_k w_k LSE_j( -(a C_ij + b_kj) ) )

which is the exact minimizer of the rescaled objective over the simplex, so
the whole solver carries O(mn) state.  Entropic weight eta must be positive:
without the -eta H(r) term the r-minimization degenerates to a vertex.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import CostKernel, Histogram, lse_rows, map_blocks
from .dxg import (
    DxgParams,
    LogOddsField,
    Termination,
    TrajectoryPoint,
    TransportLogWeights,
    balance,
    column_marginal,
    dual_md_step,
    _plan_stats,
)

__all__ = [
    "BarycenterState",
    "BarycenterSolution",
    "barycenter_marginal",
    "dxgb_step",
    "dxgb_solve",
    "barycenter_objective",
]


@dataclass
class BarycenterState:
    """m per-marginal dual states sharing one cost weight and scalar sequence."""

    deltas: np.ndarray  # (m, n) dual log-odds, one field per marginal
    bs: np.ndarray      # (m, n) per-column log-weights of the implicit plans
    a: float
    s: float
    t: int
    w: np.ndarray       # (m,) positive weights summing to 1
    eta: float

    @classmethod
    def initial(cls, n: int, weights, eta: float) -> "BarycenterState":
        if eta <= 0:
            raise ValueError("barycenter solver requires eta > 0")
        w = np.asarray(weights, dtype=float).ravel()
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        w = w / w.sum()
        m = w.size
        return cls(np.zeros((m, n)), np.zeros((m, n)), 0.0, 0.0, 0, w, eta)

    @property
    def m(self) -> int:
        return self.w.size

    def weights_k(self, k: int) -> TransportLogWeights:
        return TransportLogWeights(self.a, self.bs[k], self.s, self.t)

    def mu_k(self, k: int) -> LogOddsField:
        return LogOddsField(self.deltas[k])


def _log_normalizers(a: float, bs: np.ndarray, kernel: CostKernel, workers: int) -> np.ndarray:
    """(m, n) array of LSE_j(-(a C_ij + b_kj)), one streamed pass per marginal."""
    m = bs.shape[0]
    out = np.empty_like(bs)
    for k in range(m):
        def work(i0, i1, b=bs[k]):
            return lse_rows(-(a * kernel.block(i0, i1) + b[None, :]))

        out[k] = np.concatenate(map_blocks(work, kernel.n, workers))
    return out


def _marginal_from_logz(w: np.ndarray, log_z: np.ndarray) -> Histogram:
    # Sorting the weighted contributions per index makes the k-reduction
    # independent of marginal order, so permuting inputs permutes states and
    # leaves r bitwise unchanged.
    g = np.sort(w[:, None] * log_z, axis=0).sum(axis=0)
    g -= g.max()
    e = np.exp(g)
    return Histogram(e / e.sum())


def barycenter_marginal(state: BarycenterState, kernel: CostKernel,
                        workers: int = 1) -> Histogram:
    """The implicit barycenter r_i propto exp(sum_k w_k log Z_{k,i})."""
    if state.eta <= 0:
        raise ValueError("barycenter map requires eta > 0")
    return _marginal_from_logz(state.w, _log_normalizers(state.a, state.bs, kernel, workers))


def dxgb_step(state: BarycenterState, kernel: CostKernel, marginals: list[Histogram],
              params: DxgParams, workers: int = 1) -> BarycenterState:
    """One extragradient iteration across all m marginals.

    All midpoints are formed against the current shared barycenter before any
    main update runs (the midpoint/main barrier is mandatory: main updates
    read midpoint plans).
    """
    if params.eta <= 0:
        raise ValueError("barycenter solver requires eta > 0")
    m, n = state.deltas.shape
    if len(marginals) != m or kernel.n != n:
        raise ValueError("state/marginal/kernel size mismatch")
    sup = kernel.sup_norm
    decay = 1.0 - params.tau_p * params.eta
    a_next = decay * state.a + params.tau_p
    s_next = decay * state.s + params.tau_p * params.eta

    r_now = _marginal_from_logz(state.w, _log_normalizers(state.a, state.bs, kernel, workers))
    deltas_bar = np.empty_like(state.deltas)
    bs_bar = np.empty_like(state.bs)
    for k in range(m):
        c_tilde = marginals[k].weights + params.alpha / n
        col_now = column_marginal(state.weights_k(k), kernel, r_now, workers)
        deltas_bar[k] = dual_md_step(state.mu_k(k), col_now, marginals[k],
                                     c_tilde, params, sup).delta
        b = decay * state.bs[k] + 2.0 * params.tau_p * sup * state.mu_k(k).diff()
        bs_bar[k] = b - b.max()

    r_bar = _marginal_from_logz(state.w, _log_normalizers(a_next, bs_bar, kernel, workers))
    deltas_next = np.empty_like(state.deltas)
    bs_next = np.empty_like(state.bs)
    for k in range(m):
        c_tilde = marginals[k].weights + params.alpha / n
        w_bar = TransportLogWeights(a_next, bs_bar[k], s_next, state.t + 1)
        col_bar = column_marginal(w_bar, kernel, r_bar, workers)
        mu_next = balance(dual_md_step(state.mu_k(k), col_bar, marginals[k],
                                       c_tilde, params, sup), params.beta)
        deltas_next[k] = mu_next.delta
        b = decay * state.bs[k] + 2.0 * params.tau_p * sup * LogOddsField(deltas_bar[k]).diff()
        bs_next[k] = b - b.max()

    return BarycenterState(deltas_next, bs_next, a_next, s_next, state.t + 1,
                           state.w, state.eta)


def barycenter_objective(state: BarycenterState, kernel: CostKernel,
                         marginals: list[Histogram], w=None, eta: float | None = None,
                         workers: int = 1) -> float:
    """sum_k w_k (<C, D_r p_k> + 2||C||_inf ||c(D_r p_k) - c_k||_1 - eta H(D_r p_k)).

    r is the implicit barycenter of the state; everything is streamed.
    """
    weights = state.w if w is None else np.asarray(w, dtype=float) / np.sum(w)
    eta_val = state.eta if eta is None else eta
    r = barycenter_marginal(state, kernel, workers)
    total = 0.0
    for k in range(len(marginals)):
        cost, col, ent = _plan_stats(state.weights_k(k), kernel, r, workers)
        pen = 2.0 * kernel.sup_norm * float(np.abs(col - marginals[k].weights).sum())
        total += weights[k] * (cost + pen - eta_val * ent)
    return total


def _bary_dual_value(state: BarycenterState, kernel: CostKernel,
                     marginals: list[Histogram], workers: int) -> float:
    """Closed-form dual of the penalized barycenter problem at the current mu.

    min over r of the mu-linearized objective: the r-minimization collapses
    to -eta LSE of the weighted log-normalizers computed from mu.
    """
    eta = state.eta
    sup = kernel.sup_norm
    m, n = state.deltas.shape
    log_z = np.empty((m, n))
    lead = 0.0
    for k in range(m):
        d = state.mu_k(k).diff()
        shift = 2.0 * sup * d

        def work(i0, i1, shift=shift):
            return lse_rows(-(kernel.block(i0, i1) + shift[None, :]) / eta)

        log_z[k] = np.concatenate(map_blocks(work, kernel.n, workers))
        lead += state.w[k] * (-2.0 * sup * float(marginals[k].weights @ d))
    g = (state.w[:, None] * log_z).sum(axis=0)
    gm = g.max()
    return lead - eta * (gm + float(np.log(np.exp(g - gm).sum())))


@dataclass
class BarycenterSolution:
    barycenter: Histogram
    state: BarycenterState
    converged: bool
    iterations: int
    seconds: float
    trajectory: list[TrajectoryPoint]
    per_marginal_infeas: np.ndarray = field(default=None)
    workers: int = 1

    @property
    def final(self) -> TrajectoryPoint:
        return self.trajectory[-1]


def _bary_evaluate(state, kernel, marginals, workers):
    r = barycenter_marginal(state, kernel, workers)
    primal = 0.0
    infeas = np.empty(len(marginals))
    for k in range(len(marginals)):
        cost, col, ent = _plan_stats(state.weights_k(k), kernel, r, workers)
        gap_k = float(np.abs(col - marginals[k].weights).sum())
        infeas[k] = gap_k
        primal += state.w[k] * (cost + 2.0 * kernel.sup_norm * gap_k - state.eta * ent)
    dual = _bary_dual_value(state, kernel, marginals, workers)
    return primal, dual, infeas


def dxgb_solve(kernel: CostKernel, marginals: list[Histogram], w, params: DxgParams,
               termination: Termination = Termination(), log_stride: int = 25,
               workers: int = 1) -> BarycenterSolution:
    """Iterate dxgb_step until gap and worst column infeasibility reach eps/6.

    Returns the final implicit barycenter with the per-marginal
    infeasibilities; hitting the limits returns the best-so-far state with
    converged=False.
    """
    if params.eta <= 0:
        raise ValueError("barycenter solver requires eta > 0")
    state = BarycenterState.initial(kernel.n, w, params.eta)
    t0 = time.perf_counter()
    trajectory: list[TrajectoryPoint] = []
    converged = False
    it = 0
    infeas = None

    def log_point():
        nonlocal infeas
        primal, dual, infeas = _bary_evaluate(state, kernel, marginals, workers)
        point = TrajectoryPoint(it, time.perf_counter() - t0, primal, dual,
                                primal - dual, float(infeas.max()), state.s)
        trajectory.append(point)
        return point

    while it < termination.max_iter:
        state = dxgb_step(state, kernel, marginals, params, workers)
        it += 1
        timed_out = (termination.timeout is not None
                     and time.perf_counter() - t0 > termination.timeout)
        if it % log_stride == 0 or it == termination.max_iter or timed_out:
            point = log_point()
            if point.gap <= termination.eps / 6.0 and point.col_infeas_l1 <= termination.eps / 6.0:
                converged = True
                break
        if timed_out:
            break
    if not trajectory or trajectory[-1].iter != it:
        log_point()

    return BarycenterSolution(
        barycenter=barycenter_marginal(state, kernel, workers),
        state=state,
        converged=converged,
        iterations=it,
        seconds=time.perf_counter() - t0,
        trajectory=trajectory,
        per_marginal_infeas=infeas,
        workers=workers,
    )
