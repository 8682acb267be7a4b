"""Dual extragradient solver for (penalized, entropic) optimal transport.

The saddle-point problem puts the plan in row-softmax form and dualizes the
2||C||_inf * l1 column penalty with one 2-simplex per column.  The solver
iterates only O(n) state:

  * `LogOddsField` - the dual field mu, one log-odds scalar per column;
  * `TransportLogWeights` - the implicit plan, rows p_i = softmax(-(a C_i + b)).

For eta > 0, (a, b) equals (s/eta, 2||C||_inf (nu_+ - nu_-)/eta) of the
midpoint-averaged dual representation, so the implicit plan reproduces the
dense primal-dual reference iterate exactly; at eta = 0 the same recurrences
stay finite (a grows linearly, b accumulates), which is where the tuned
parameter regime lives.  `pdxg_reference_step` maintains the dense
row-stochastic iterate and exists purely as the equivalence-test oracle.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .core import DENSE_CAP, CostKernel, Histogram, lse_rows, map_blocks
from .rounding import DenseCoupling, InfeasibilityReport, infeasibility, round_to_polytope
from .sinkhorn import DualPotentials

__all__ = [
    "LogOddsField",
    "TransportLogWeights",
    "DxgParams",
    "DxgState",
    "Termination",
    "TrajectoryPoint",
    "DxgSolution",
    "params_tuned",
    "params_li",
    "params_loose",
    "implicit_row",
    "column_marginal",
    "materialize_plan",
    "dual_md_step",
    "balance",
    "dxg_step",
    "primal_penalized_value",
    "dual_penalized_value",
    "recover_eot_potentials",
    "solve",
    "PdxgState",
    "pdxg_init",
    "pdxg_reference_step",
]


@dataclass(frozen=True)
class LogOddsField:
    """The dual variable mu: n two-point simplices stored as log-odds.

    delta_j = log mu_{+,j} - log mu_{-,j}; the pair is recovered through the
    logistic map, so mu_{+,j} + mu_{-,j} = 1 holds exactly.
    """

    delta: np.ndarray

    def diff(self) -> np.ndarray:
        """mu_+ - mu_-, elementwise; equals tanh(delta / 2)."""
        return np.tanh(0.5 * self.delta)

    def mu_plus(self) -> np.ndarray:
        return 0.5 * (1.0 + self.diff())

    def mu_minus(self) -> np.ndarray:
        return 0.5 * (1.0 - self.diff())

    @classmethod
    def uniform(cls, n: int) -> "LogOddsField":
        return cls(np.zeros(n))


@dataclass(frozen=True)
class TransportLogWeights:
    """O(n) representation of the implicit plan: rows softmax(-(a C_i + b)).

    For eta > 0, a = s/eta and b = 2||C||_inf (nu_+ - nu_-)/eta.  `s` follows
    s_{t+1} = (1 - tau_p eta) s_t + tau_p eta, i.e. s_t = 1 - (1 - tau_p eta)^t.
    """

    a: float
    b: np.ndarray
    s: float
    t: int

    @classmethod
    def initial(cls, n: int) -> "TransportLogWeights":
        return cls(a=0.0, b=np.zeros(n), s=0.0, t=0)


@dataclass(frozen=True)
class DxgParams:
    """Stepsizes and regularization for the extragradient iteration.

    alpha perturbs the column marginal (c_tilde = c + alpha/n) to keep the
    dual mirror steps well conditioned; beta caps the dual log-odds.
    """

    eta: float
    eta_mu: float
    tau_p: float
    tau_mu: float
    beta: float
    alpha: float

    def __post_init__(self):
        if self.eta < 0 or self.eta_mu < 0:
            raise ValueError("eta and eta_mu must be nonnegative")
        if self.tau_p <= 0 or self.tau_mu <= 0:
            raise ValueError("stepsizes must be positive")
        if self.tau_p * self.eta >= 1 or self.tau_mu * self.eta_mu >= 1:
            raise ValueError("need tau_p*eta < 1 and tau_mu*eta_mu < 1")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if not (0 <= self.alpha <= 1):
            raise ValueError("alpha must lie in [0, 1]")

    def with_overrides(self, **kw) -> "DxgParams":
        return replace(self, **kw)


def params_tuned(eta: float = 0.0) -> DxgParams:
    """The aggressive experimental choices: unit stepsizes, beta 1.1, alpha 0.01."""
    return DxgParams(eta=eta, eta_mu=0.0, tau_p=1.0, tau_mu=1.0, beta=1.1, alpha=0.01)


def params_li(n: int, eps: float, C1: float = 100.0, C2: float = 1.0, C3: float = 1.0) -> DxgParams:
    """The prior-work theorem scheme; C1..C3 exposed since the paper-trail
    only pins them up to 'sufficiently large/small'."""
    if n < 2 or eps <= 0:
        raise ValueError("need n >= 2 and eps > 0")
    if n / eps <= 1:
        raise ValueError("n/eps must exceed 1 (beta would be nonpositive)")
    if C1 <= 0 or C2 <= 0 or not (0 < C3 <= 1):
        raise ValueError("need C1 > 0, C2 > 0 and 0 < C3 <= 1")
    beta = C1 * math.log(n / eps)
    eta = eps * C2 * C2 / (math.sqrt(beta) * math.log(n))
    return DxgParams(
        eta=eta,
        eta_mu=eta,
        tau_p=C2 / math.sqrt(beta),
        tau_mu=15.0 * C2 * math.sqrt(beta),
        beta=beta,
        alpha=C3,
    )


def params_loose(n: int, eps: float, min_marginal: float, cost_sup: float = 1.0) -> DxgParams:
    """The unified OT/barycenter scheme (alpha = 1, beta = log 3).

    `min_marginal` is the smallest entry over the unperturbed column
    marginal(s); with alpha = 1 the perturbed minimum is min_marginal + 1/n
    exactly, which sets the primal stepsize.
    """
    if n < 2 or eps <= 0 or min_marginal <= 0 or cost_sup <= 0:
        raise ValueError("inputs must be positive (and n >= 2)")
    eta = min(cost_sup / (-math.log(min_marginal)), eps / (16.0 * math.log(n)))
    tau_mu = 1.0 / (4.0 * math.sqrt(n))
    min_ct = min_marginal + 1.0 / n
    tau_p = min_ct / (n**-0.5 + eta * min_ct)
    eta_mu = min(eps / (16.0 * math.log(2.0)), eta * tau_p / tau_mu)
    return DxgParams(eta=eta, eta_mu=eta_mu, tau_p=tau_p, tau_mu=tau_mu,
                     beta=math.log(3.0), alpha=1.0)


@dataclass(frozen=True)
class DxgState:
    mu: LogOddsField
    weights: TransportLogWeights

    @classmethod
    def initial(cls, n: int) -> "DxgState":
        return cls(LogOddsField.uniform(n), TransportLogWeights.initial(n))


def implicit_row(state: TransportLogWeights, kernel: CostKernel, i: int) -> np.ndarray:
    """Row i of the implicit plan: softmax_j of -(a C_ij + b_j)."""
    z = -(state.a * kernel.block(i, i + 1)[0] + state.b)
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def column_marginal(state: TransportLogWeights, kernel: CostKernel, r: Histogram,
                    workers: int = 1) -> np.ndarray:
    """c(D_r p) in one streamed pass: sum_i r_i softmax_j(-(a C_ij + b_j))."""
    rw = r.weights

    def work(i0, i1):
        z = -(state.a * kernel.block(i0, i1) + state.b[None, :])
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        return rw[i0:i1] @ p

    col = np.zeros(kernel.n)
    for part in map_blocks(work, kernel.n, workers):
        col += part
    return col


def materialize_plan(state: TransportLogWeights, kernel: CostKernel, r: Histogram,
                     cap: int = DENSE_CAP) -> np.ndarray:
    """Dense D_r p for rounding and tests; guarded by the dense cap."""
    if kernel.n > cap:
        raise ValueError("implicit plan materialization above the dense cap")
    z = -(state.a * kernel.materialize(cap) + state.b[None, :])
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return r.weights[:, None] * p


def dual_md_step(mu: LogOddsField, col_marginal, c: Histogram, c_tilde,
                 params: DxgParams, sup_norm: float = 1.0) -> LogOddsField:
    """One mirror-descent update of the dual field (not projected).

    The paired exponential updates of (mu_+, mu_-) collapse to a single
    log-odds recurrence; per-column normalization is implicit.
    """
    resid = np.asarray(col_marginal, dtype=float) - c.weights
    delta = (1.0 - params.tau_mu * params.eta_mu) * mu.delta \
        + 4.0 * params.tau_mu * sup_norm * resid / np.asarray(c_tilde, dtype=float)
    return LogOddsField(delta)


def balance(mu: LogOddsField, beta: float) -> LogOddsField:
    """Clamp each column's log-odds to [-beta, beta].

    Equals the per-column KL (Bregman) projection onto the high-entropy
    subset of the 2-simplex, and never increases the KL distance to any point
    of that subset.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    return LogOddsField(np.clip(mu.delta, -beta, beta))


def _advance_weights(w: TransportLogWeights, mu_diff: np.ndarray, params: DxgParams,
                     sup_norm: float) -> TransportLogWeights:
    decay = 1.0 - params.tau_p * params.eta
    b = decay * w.b + 2.0 * params.tau_p * sup_norm * mu_diff
    b -= b.max()  # uniform shift, cancels in every row softmax
    return TransportLogWeights(
        a=decay * w.a + params.tau_p,
        b=b,
        s=decay * w.s + params.tau_p * params.eta,
        t=w.t + 1,
    )


def dxg_step(state: DxgState, kernel: CostKernel, r: Histogram, c: Histogram,
             params: DxgParams, workers: int = 1) -> DxgState:
    """One extragradient iteration: two column-marginal passes, O(n) state.

    Midpoint dual from the current plan and midpoint weights from the current
    mu; then the main dual from the midpoint plan (balanced) and main weights
    from the midpoint dual.
    """
    c_tilde = c.weights + params.alpha / kernel.n
    sup = kernel.sup_norm

    col_now = column_marginal(state.weights, kernel, r, workers)
    mu_bar = dual_md_step(state.mu, col_now, c, c_tilde, params, sup)
    w_bar = _advance_weights(state.weights, state.mu.diff(), params, sup)

    col_bar = column_marginal(w_bar, kernel, r, workers)
    mu_next = balance(dual_md_step(state.mu, col_bar, c, c_tilde, params, sup), params.beta)
    w_next = _advance_weights(state.weights, mu_bar.diff(), params, sup)
    return DxgState(mu_next, w_next)


def _plan_stats(state: TransportLogWeights, kernel: CostKernel, r: Histogram,
                workers: int = 1):
    """One streamed pass over the implicit plan: (<C, D_r p>, c(D_r p), H(D_r p))."""
    rw = r.weights

    def work(i0, i1):
        Cb = kernel.block(i0, i1)
        z = -(state.a * Cb + state.b[None, :])
        m = z.max(axis=1, keepdims=True)
        e = np.exp(z - m)
        sums = e.sum(axis=1, keepdims=True)
        p = e / sums
        rb = rw[i0:i1]
        cost = float((rb[:, None] * p * Cb).sum())
        col = rb @ p
        # sum_j p_ij log p_ij, with log p = (z - m) - log(sums)
        plogp = (p * ((z - m) - np.log(sums))).sum(axis=1)
        ent = float(-(rb * plogp).sum())
        return cost, col, ent

    cost, ent = 0.0, 0.0
    col = np.zeros(kernel.n)
    for pc, pcol, pe in map_blocks(work, kernel.n, workers):
        cost += pc
        col += pcol
        ent += pe
    pos = rw > 0
    ent += float(-(rw[pos] * np.log(rw[pos])).sum())  # H(D_r p) = H(r) + sum r_i H(p_i)
    return cost, col, ent


def primal_penalized_value(state: TransportLogWeights, kernel: CostKernel, r: Histogram,
                           c: Histogram, eta: float, workers: int = 1) -> float:
    """<C, D_r p> + 2||C||_inf ||c(D_r p) - c||_1 - eta H(D_r p), streamed."""
    cost, col, ent = _plan_stats(state, kernel, r, workers)
    pen = 2.0 * kernel.sup_norm * float(np.abs(col - c.weights).sum())
    return cost + pen - eta * ent


def dual_penalized_value(mu: LogOddsField, kernel: CostKernel, r: Histogram, c: Histogram,
                         eta: float, workers: int = 1) -> float:
    """Lower bound on the penalized primal at any mu.

    For eta > 0 this is the closed-form dual of the penalized problem
    (entropy taken over the whole coupling, hence the -eta H(r) term); at
    eta = 0 the scaled LSE degenerates to a min and the value is a valid LP
    bound, which is what makes the gap-based termination usable in the tuned
    regime.
    """
    d = mu.diff()
    shift = 2.0 * kernel.sup_norm * d
    rw = r.weights

    if eta > 0:
        def work(i0, i1):
            return lse_rows(-(kernel.block(i0, i1) + shift[None, :]) / eta)

        row_red = np.concatenate(map_blocks(work, kernel.n, workers))
        pos = rw > 0
        h_r = float(-(rw[pos] * np.log(rw[pos])).sum())
        inner = -eta * float(rw @ row_red) - eta * h_r
    else:
        def work(i0, i1):
            return (kernel.block(i0, i1) + shift[None, :]).min(axis=1)

        row_min = np.concatenate(map_blocks(work, kernel.n, workers))
        inner = float(rw @ row_min)
    return float(-2.0 * kernel.sup_norm * (c.weights @ d) + inner)


def recover_eot_potentials(state: DxgState, mu: LogOddsField, kernel: CostKernel,
                           r: Histogram, eta: float, workers: int = 1) -> DualPotentials:
    """Map the converged dual field back to (phi, psi) of the entropic dual.

    psi_j = -2||C||_inf (mu_+ - mu_-)_j and phi_i = eta (log r_i - log Z_i),
    both mean-centered; valid once the penalized and entropic problems share
    their minimizer (eta below the equivalence bound).
    """
    if eta <= 0:
        raise ValueError("potential recovery requires eta > 0")
    if not r.full_support:
        raise ValueError("potential recovery requires full-support r")
    psi = -2.0 * kernel.sup_norm * mu.diff()

    def work(i0, i1):
        return lse_rows(-(kernel.block(i0, i1) - psi[None, :]) / eta)

    log_z = np.concatenate(map_blocks(work, kernel.n, workers))
    phi = eta * (np.log(r.weights) - log_z)
    return DualPotentials(phi - phi.mean(), psi - psi.mean(), eta,
                          converged=True, sweeps=state.weights.t)


@dataclass(frozen=True)
class Termination:
    """Stop when gap and column infeasibility both fall below eps/6, or at the limits."""

    eps: float = 1e-10
    max_iter: int = 1_000_000
    timeout: float | None = None


@dataclass(frozen=True)
class TrajectoryPoint:
    iter: int
    seconds: float
    primal: float
    dual: float
    gap: float
    col_infeas_l1: float
    s: float


@dataclass
class DxgSolution:
    state: DxgState
    converged: bool
    iterations: int
    seconds: float
    trajectory: list[TrajectoryPoint]
    report: InfeasibilityReport
    rounded_plan: DenseCoupling | None = None
    rounded_cost: float | None = None  # normalized cost units
    workers: int = 1

    @property
    def final(self) -> TrajectoryPoint:
        return self.trajectory[-1]


def _evaluate(state: DxgState, kernel, r, c, eta, workers):
    cost, col, ent = _plan_stats(state.weights, kernel, r, workers)
    infeas = float(np.abs(col - c.weights).sum())
    primal = cost + 2.0 * kernel.sup_norm * infeas - eta * ent
    dual = dual_penalized_value(state.mu, kernel, r, c, eta, workers)
    return primal, dual, infeas


def solve(kernel: CostKernel, r: Histogram, c: Histogram, params: DxgParams,
          termination: Termination = Termination(), log_stride: int = 25,
          workers: int = 1, dense_cap: int = DENSE_CAP) -> DxgSolution:
    """Run the dual extragradient iteration with gap/infeasibility termination.

    Logs (iteration, seconds, primal, dual, gap, column infeasibility, s)
    every `log_stride` iterations and at exit.  When n fits under
    `dense_cap`, the final implicit plan is materialized and rounded onto
    Pi(r, c); above the cap only the infeasibility report is returned.
    Hitting the limits is an outcome, not an error.
    """
    if kernel.n != r.n or kernel.n != c.n:
        raise ValueError("kernel/marginal size mismatch")
    if params.alpha == 0.0 and not c.full_support:
        raise ValueError("alpha = 0 requires a full-support column marginal")
    state = DxgState.initial(kernel.n)
    t0 = time.perf_counter()
    trajectory: list[TrajectoryPoint] = []
    converged = False
    it = 0

    def log_point():
        primal, dual, infeas = _evaluate(state, kernel, r, c, params.eta, workers)
        point = TrajectoryPoint(it, time.perf_counter() - t0, primal, dual,
                                primal - dual, infeas, state.weights.s)
        trajectory.append(point)
        return point

    while it < termination.max_iter:
        state = dxg_step(state, kernel, r, c, params, workers)
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

    seconds = time.perf_counter() - t0
    colm = column_marginal(state.weights, kernel, r, workers)
    report = infeasibility(colm, True, c)
    sol = DxgSolution(state, converged, it, seconds, trajectory, report, workers=workers)
    if kernel.n <= dense_cap:
        plan = DenseCoupling(materialize_plan(state.weights, kernel, r, dense_cap))
        rounded = round_to_polytope(plan, r, c)
        sol.rounded_plan = rounded
        sol.rounded_cost = float((rounded.entries * kernel.materialize(dense_cap)).sum())
    return sol


# ---------------------------------------------------------------------------
# Dense primal-dual reference (equivalence oracle)
# ---------------------------------------------------------------------------


@dataclass
class PdxgState:
    """Dense reference iterate: explicit log row-stochastic p plus the dual field."""

    mu: LogOddsField
    log_p: np.ndarray


def pdxg_init(n: int, cap: int = DENSE_CAP) -> PdxgState:
    if n > cap:
        raise ValueError("dense reference limited to the dense cap")
    return PdxgState(LogOddsField.uniform(n), np.full((n, n), -math.log(n)))


def pdxg_reference_step(state: PdxgState, kernel: CostKernel, r: Histogram, c: Histogram,
                        params: DxgParams) -> PdxgState:
    """One dense extragradient step with the balanced mu as prox center.

    Mirrors `dxg_step` exactly (same update order, same closed forms) but
    carries the explicit n x n row-stochastic iterate; used only to certify
    the implicit solver.
    """
    n = kernel.n
    if state.log_p.shape != (n, n):
        raise ValueError("state/kernel size mismatch")
    c_tilde = c.weights + params.alpha / n
    sup = kernel.sup_norm
    C = kernel.materialize()
    decay = 1.0 - params.tau_p * params.eta

    p_now = np.exp(state.log_p)
    col_now = r.weights @ p_now
    mu_bar = dual_md_step(state.mu, col_now, c, c_tilde, params, sup)

    log_p_bar = decay * state.log_p - params.tau_p * (C + 2.0 * sup * state.mu.diff()[None, :])
    log_p_bar -= lse_rows(log_p_bar)[:, None]
    col_bar = r.weights @ np.exp(log_p_bar)
    mu_next = balance(dual_md_step(state.mu, col_bar, c, c_tilde, params, sup), params.beta)

    log_p_next = decay * state.log_p - params.tau_p * (C + 2.0 * sup * mu_bar.diff()[None, :])
    log_p_next -= lse_rows(log_p_next)[:, None]
    return PdxgState(mu_next, log_p_next)
