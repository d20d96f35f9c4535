"""Client-side optimization: Adam ascent on the penalized sub-problem and the ALM schedule."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from fedcd.graphmask import (acyclicity_value, acyclicity_value_and_grad, gumbel_sigmoid,
                             is_dag, logistic_noise, prune_to_dag, threshold_to_dag)
from fedcd.mechanisms import (MlpStack, linear_forward_score, local_score,
                              score_and_gradients)
from fedcd.numkit import DimensionError, RngStream
from fedcd.report import RunReport

log = logging.getLogger(__name__)

# (rho_init, beta) by node count, tuned per sharing mode on simulated data.
RHO_BETA_TABLE = {
    "DS": {10: (6e-3, 10.0), 20: (6e-5, 20.0), 40: (1e-11, 120.0)},
    "AS": {10: (6e-3, 10.0), 20: (1e-5, 20.0), 40: (1e-11, 120.0)},
}


def default_rho_beta(d: int, mode: str = "DS") -> tuple[float, float]:
    """Table lookup, log-linear in ``rho_init`` and linear in ``beta`` between listed ``d``."""
    table = RHO_BETA_TABLE["AS" if mode in ("AS", "LINEAR_AS") else "DS"]
    keys = sorted(table)
    if d <= keys[0]:
        return table[keys[0]]
    if d >= keys[-1]:
        return table[keys[-1]]
    if d in table:
        return table[d]
    lo = max(k for k in keys if k < d)
    hi = min(k for k in keys if k > d)
    w = (d - lo) / (hi - lo)
    (r0, b0), (r1, b1) = table[lo], table[hi]
    rho = 10.0 ** ((1 - w) * math.log10(r0) + w * math.log10(r1))
    return rho, (1 - w) * b0 + w * b1


@dataclass
class SolverConfig:
    alpha_init: float = 0.0
    rho_init: float | None = None    # None: table default for (mode, d)
    beta: float | None = None
    h_tol: float = 1e-10
    it_max: int = 25
    rho_max: float = 1e14
    gamma: float = 0.25
    it_in: int = 1000
    it_fl: int = 200
    lr: float = 3e-2
    tau: float = 0.2
    lambda_l1: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    reset_adam_each_outer: bool = True
    threshold: float = 0.5
    linear_threshold: float = 0.3
    linear_support_stop: bool = True    # linear mode: stop once |W| > threshold is a stable DAG

    def validate(self) -> None:
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.beta is not None and self.beta <= 1:
            raise ValueError("beta must exceed 1")
        if self.rho_init is not None and self.rho_init <= 0:
            raise ValueError("rho_init must be positive")
        if not 1 <= self.it_fl <= self.it_in:
            raise ValueError("need 1 <= it_fl <= it_in")
        if self.tau <= 0 or self.lr <= 0 or self.lambda_l1 < 0:
            raise ValueError("tau and lr must be positive, lambda_l1 non-negative")

    def resolved(self, d: int, mode: str = "DS") -> SolverConfig:
        """Copy with ``rho_init``/``beta`` filled from the table when unset."""
        rho, beta = default_rho_beta(d, mode)
        return replace(self,
                       rho_init=rho if self.rho_init is None else self.rho_init,
                       beta=beta if self.beta is None else self.beta)


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, client_id: int | None = None, what: str = "gradient"):
        self.step = step
        self.client_id = client_id
        who = f"client {client_id}" if client_id is not None else "solver"
        super().__init__(f"{who}: non-finite {what} at step {step}")


@dataclass
class AdamState:
    lr: float = 3e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None

    def reset(self) -> None:
        self.t = 0
        self.m = self.v = None


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """One bias-corrected Adam step that *ascends* ``grads``; updates ``params`` in place."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise DimensionError("parameter and gradient shapes differ")
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p += state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class AlmState:
    alpha: float
    rho: float
    t: int = 1
    h: float = math.inf     # constraint value at the current iterate


def subproblem_value(score: float, h: float, alm: AlmState) -> float:
    return score - alm.alpha * h - 0.5 * alm.rho * h * h


def alm_update(alm: AlmState, h_new: float, h_old: float, cfg: SolverConfig) -> AlmState:
    """Multiplier ascent, and a ``beta`` penalty increase unless ``h`` shrank by ``gamma``."""
    rho = cfg.beta * alm.rho if h_new > cfg.gamma * h_old else alm.rho
    return AlmState(alpha=alm.alpha + alm.rho * h_new, rho=rho, t=alm.t + 1, h=h_new)


def outer_loop_should_stop(alm: AlmState, h: float, cfg: SolverConfig,
                           W: np.ndarray | None = None, W_prev: np.ndarray | None = None) -> bool:
    """Stop on ``it_max``, ``h_tol`` or ``rho_max``.

    Passing the linear weights after (``W``) and before (``W_prev``) the last
    sub-problem adds one more rule: stop once the thresholded support is
    acyclic and did not change. Adam leaves sub-threshold weights jittering,
    so ``h`` on ``W*W`` stalls far above ``h_tol`` and the growing penalty
    would otherwise erase the graph.
    """
    if alm.t > cfg.it_max or h < cfg.h_tol or alm.rho > cfg.rho_max:
        return True
    if W is None or W_prev is None or not cfg.linear_support_stop or alm.t == 1:
        return False
    S = np.abs(W) > cfg.linear_threshold
    return bool(np.array_equal(S, np.abs(W_prev) > cfg.linear_threshold) and is_dag(S))


@dataclass
class ClientState:
    """One client's model, optimizer state, random stream and private data.

    ``U`` holds the graph logits; in linear mode it holds the weighted
    adjacency ``W`` itself and ``phi`` is None.
    """

    id: int
    data: np.ndarray
    U: np.ndarray
    phi: MlpStack | None
    stream: RngStream
    adam_u: AdamState = field(default_factory=AdamState)
    adam_phi: AdamState = field(default_factory=AdamState)
    steps: int = 0

    @property
    def d(self) -> int:
        return self.U.shape[0]

    @property
    def linear(self) -> bool:
        return self.phi is None


def make_adam(cfg: SolverConfig) -> AdamState:
    return AdamState(lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)


def deterministic_h(U: np.ndarray, linear: bool, tau: float) -> float:
    """Constraint value on the zero-noise mask (or on ``W*W`` in linear mode)."""
    return acyclicity_value(U * U if linear else gumbel_sigmoid(U, tau))


def client_score(client: ClientState, cfg: SolverConfig) -> float:
    """Local score at the zero-noise mask, for logging and traces."""
    if client.linear:
        return linear_forward_score(client.data, client.U, cfg.lambda_l1)[0]
    return local_score(client.data, client.phi, gumbel_sigmoid(client.U, cfg.tau), cfg.lambda_l1)


def sp_gradients(client: ClientState, alm: AlmState, cfg: SolverConfig, noise: np.ndarray):
    """Sub-problem value and its gradients w.r.t. ``U`` and the networks, noise held fixed."""
    U, tau = client.U, cfg.tau
    M = gumbel_sigmoid(U, tau, noise)
    score, grad_phi, grad_M = score_and_gradients(client.data, client.phi, M, cfg.lambda_l1)
    h, grad_h = acyclicity_value_and_grad(M)
    grad_M -= (alm.alpha + alm.rho * h) * grad_h
    grad_U = grad_M * (M * (1.0 - M) / tau)
    np.fill_diagonal(grad_U, 0.0)
    return subproblem_value(score, h, alm), grad_U, grad_phi


def _nonlinear_step(client: ClientState, alm: AlmState, cfg: SolverConfig) -> float:
    noise = logistic_noise(client.stream, client.d)
    sp, grad_U, grad_phi = sp_gradients(client, alm, cfg, noise)
    grads = grad_phi.params()
    if not (np.isfinite(sp) and np.all(np.isfinite(grad_U))
            and all(np.all(np.isfinite(g)) for g in grads)):
        raise DivergenceError(client.steps + 1, client.id)
    adam_step(client.adam_u, [client.U], [grad_U])
    adam_step(client.adam_phi, client.phi.params(), grads)
    return sp


def _linear_step(client: ClientState, alm: AlmState, cfg: SolverConfig) -> float:
    W = client.U
    score, grad = linear_forward_score(client.data, W, cfg.lambda_l1)
    h, grad_h = acyclicity_value_and_grad(W * W)
    grad -= (alm.alpha + alm.rho * h) * grad_h * 2.0 * W
    np.fill_diagonal(grad, 0.0)
    if not (np.isfinite(score) and np.isfinite(h) and np.all(np.isfinite(grad))):
        raise DivergenceError(client.steps + 1, client.id)
    adam_step(client.adam_u, [W], [grad])
    return subproblem_value(score, h, alm)


def self_update(client: ClientState, alm: AlmState, steps: int, cfg: SolverConfig) -> float:
    """Run ``steps`` full-batch Adam ascent steps on the client's sub-problem.

    Fresh Gumbel noise is drawn once per step and shared by the score and the
    penalty. Returns the sub-problem value seen at the last step.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    step = _linear_step if client.linear else _nonlinear_step
    sp = math.nan
    for _ in range(steps):
        sp = step(client, alm, cfg)
        client.steps += 1
    return sp


def initial_h(U: np.ndarray, linear: bool, tau: float) -> float:
    """Constraint value the outer loop starts from.

    A zero weight matrix is trivially acyclic, so linear runs start from
    ``inf`` to guarantee at least one sub-problem.
    """
    return math.inf if linear else deterministic_h(U, linear, tau)


def extract_dag(U: np.ndarray, linear: bool, cfg: SolverConfig):
    """Final ``(binary DAG, continuous mask)`` from the learned graph matrix."""
    if linear:
        weights = np.abs(U)
        np.fill_diagonal(weights, 0.0)
        return prune_to_dag(weights > cfg.linear_threshold, weights), weights
    M = gumbel_sigmoid(U, cfg.tau)
    return threshold_to_dag(M, cfg.threshold), M


def solve_local(client: ClientState, cfg: SolverConfig, mode: str = "SEPARATE") -> RunReport:
    """Plain single-client augmented-Lagrangian solve, no federation.

    ``cfg`` must already carry ``rho_init`` and ``beta`` (see ``SolverConfig.resolved``).
    """
    start = time.perf_counter()
    linear = client.linear
    alm = AlmState(cfg.alpha_init, cfg.rho_init, t=1,
                   h=initial_h(client.U, linear, cfg.tau))
    report = RunReport(mode=mode, adjacency=np.zeros((client.d,) * 2, dtype=np.int8),
                       mask=np.zeros((client.d,) * 2), U=client.U)
    U_prev = None
    while not outer_loop_should_stop(alm, alm.h, cfg, client.U if linear else None, U_prev):
        if cfg.reset_adam_each_outer:
            client.adam_u.reset()
            client.adam_phi.reset()
        U_prev = client.U.copy() if linear else None
        self_update(client, alm, cfg.it_in, cfg)
        h_new = deterministic_h(client.U, linear, cfg.tau)
        report.score_trace.append(client_score(client, cfg))
        report.rho_trace.append(alm.rho)
        report.alpha_trace.append(alm.alpha)
        alm = alm_update(alm, h_new, alm.h, cfg)
        report.h_trace.append(h_new)
        log.info("client %d outer %d: h=%.3e score=%.5f rho=%.3g alpha=%.3g",
                 client.id, alm.t - 1, h_new, report.score_trace[-1], report.rho_trace[-1],
                 report.alpha_trace[-1])
    report.outer_iters = alm.t - 1
    report.U = client.U.copy()
    report.adjacency, report.mask = extract_dag(client.U, linear, cfg)
    report.wall_seconds = time.perf_counter() - start
    return report
