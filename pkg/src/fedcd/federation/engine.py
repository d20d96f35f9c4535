"""Federated sub-problem solver and outer augmented-Lagrangian loop.

The server-side driver :func:`run_federated` talks to clients through
handles exposing ``begin/run/get_U/set_U/get_phi/set_phi/finish``. The
in-process handle calls the solver directly; the TCP handle (see
:mod:`fedcd.federation.tcp`) turns the same calls into messages, so both
transports execute identical arithmetic in identical order.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from fedcd.graphmask import prune_to_dag
from fedcd.localsolver import (AlmState, ClientState, SolverConfig, alm_update,
                               client_score, deterministic_h, extract_dag, initial_h,
                               make_adam, outer_loop_should_stop, self_update, solve_local)
from fedcd.mechanisms import MlpStack, mlp_init
from fedcd.numkit import DimensionError, RngStream
from fedcd.report import RunReport

log = logging.getLogger(__name__)

MODES = ("DS", "AS", "SEPARATE", "LINEAR_AS")


@dataclass
class FederationConfig:
    m: int = 10
    r: int | None = None            # None: every client takes part in each aggregation
    mode: str = "DS"
    transport: str = "inproc"
    seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)
    reset_u_adam_on_broadcast: bool = False
    vote_quorum: float = 0.5
    host: str = "127.0.0.1"
    port: int = 0
    timeout: float | None = None    # seconds; None waits on stragglers forever

    @property
    def n_selected(self) -> int:
        return self.m if self.r is None else self.r

    @property
    def linear(self) -> bool:
        return self.mode == "LINEAR_AS"

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.transport not in ("inproc", "tcp"):
            raise ValueError(f"transport must be inproc or tcp, got {self.transport!r}")
        if self.m < 1 or not 1 <= self.n_selected <= self.m:
            raise ValueError(f"need 1 <= r <= m, got r={self.r}, m={self.m}")
        if not 0 < self.vote_quorum <= 1:
            raise ValueError("vote_quorum must lie in (0, 1]")
        self.solver.validate()


def select_clients(m: int, r: int, stream: RngStream) -> np.ndarray:
    """Uniform ``r``-subset of the client indices, sorted."""
    if not 1 <= r <= m:
        raise ValueError(f"need 1 <= r <= m, got r={r}, m={m}")
    return stream.choice(m, r)


def _running_mean(arrays: list[np.ndarray]) -> np.ndarray:
    # incremental form keeps the mean of identical inputs exact
    acc = np.array(arrays[0], dtype=np.float64, copy=True)
    for k, a in enumerate(arrays[1:], start=2):
        if a.shape != acc.shape:
            raise DimensionError(f"cannot average shapes {acc.shape} and {a.shape}")
        acc += (a - acc) / k
    return acc


def aggregate_proxies(U_list: list[np.ndarray]) -> np.ndarray:
    """Entrywise mean of the uploaded graph matrices, in list order."""
    if not U_list:
        raise ValueError("nothing to aggregate")
    return _running_mean(U_list)


def aggregate_phi(phis: list[MlpStack]) -> MlpStack:
    """Layerwise mean of mechanism networks."""
    if not phis:
        raise ValueError("nothing to aggregate")
    return MlpStack(*(_running_mean(list(layer)) for layer in zip(*(p.params() for p in phis))))


def broadcast_apply(U_new: np.ndarray, clients: list[ClientState], phi_new: MlpStack | None = None,
                    reset_adam: bool = False) -> list[ClientState]:
    """Install the server matrix (and optionally networks) on every client."""
    for c in clients:
        if c.U.shape != U_new.shape:
            raise DimensionError(f"client {c.id} holds {c.U.shape}, server sent {U_new.shape}")
        c.U = U_new.copy()
        if reset_adam:
            c.adam_u.reset()
        if phi_new is not None:
            c.phi = phi_new.copy()
    return clients


def vote_combine(B_list: list[np.ndarray], quorum: float = 0.5) -> np.ndarray:
    """Keep edges set by more than ``quorum * m`` graphs, then break cycles by least support."""
    if not 0 < quorum <= 1:
        raise ValueError("quorum must lie in (0, 1]")
    support = np.sum([np.asarray(B) != 0 for B in B_list], axis=0).astype(float)
    keep = support > quorum * len(B_list)
    return prune_to_dag(keep, support)


def init_client(k: int, data: np.ndarray, fcfg: FederationConfig) -> ClientState:
    """Client ``k`` draws its stream as ``split(master, k)``; logits start at zero."""
    d = data.shape[1]
    stream = RngStream(fcfg.seed).split(k)
    phi = None if fcfg.linear else mlp_init(d, stream)
    return ClientState(id=k, data=np.asarray(data, dtype=np.float64), U=np.zeros((d, d)),
                       phi=phi, stream=stream, adam_u=make_adam(fcfg.solver),
                       adam_phi=make_adam(fcfg.solver))


class LocalClient:
    """In-process client handle."""

    def __init__(self, state: ClientState, solver: SolverConfig, reset_u_adam_on_broadcast=False):
        self.state = state
        self.solver = solver
        self.reset_u_adam = reset_u_adam_on_broadcast
        self.alm: AlmState | None = None

    @property
    def id(self) -> int:
        return self.state.id

    def begin(self, alm: AlmState) -> None:
        self.alm = alm
        if self.solver.reset_adam_each_outer:
            self.state.adam_u.reset()
            self.state.adam_phi.reset()

    def run(self, steps: int) -> None:
        self_update(self.state, self.alm, steps, self.solver)

    def get_U(self) -> np.ndarray:
        return self.state.U

    def set_U(self, U: np.ndarray) -> None:
        broadcast_apply(U, [self.state], reset_adam=self.reset_u_adam)

    def get_phi(self) -> MlpStack:
        return self.state.phi

    def set_phi(self, phi: MlpStack) -> None:
        self.state.phi = phi.copy()

    def finish(self) -> float:
        return client_score(self.state, self.solver)


def aggregation_windows(it_in: int, it_fl: int) -> list[int]:
    """Step counts between aggregation events: every ``it_fl`` steps and at ``it_in``."""
    edges = list(range(it_fl, it_in + 1, it_fl))
    if not edges or edges[-1] != it_in:
        edges.append(it_in)
    return [b - a for a, b in zip([0] + edges[:-1], edges)]


def run_sps(handles, alm: AlmState, fcfg: FederationConfig, server_stream: RngStream,
            outer_t: int = 0, on_round=None) -> tuple[np.ndarray, int]:
    """One federated sub-problem. Returns the last broadcast matrix and the aggregation count."""
    share_phi = fcfg.mode == "AS"
    U_new = None
    rounds = 0
    for steps in aggregation_windows(fcfg.solver.it_in, fcfg.solver.it_fl):
        for hd in handles:
            hd.run(steps)
        chosen = select_clients(len(handles), fcfg.n_selected, server_stream)
        U_new = aggregate_proxies([handles[k].get_U() for k in chosen])
        phi_new = aggregate_phi([handles[k].get_phi() for k in chosen]) if share_phi else None
        for hd in handles:
            hd.set_U(U_new)
            if share_phi:
                hd.set_phi(phi_new)
        rounds += 1
        if on_round is not None:
            on_round(outer_t, rounds, chosen)
    return U_new, rounds


def run_federated(handles, fcfg: FederationConfig, d: int) -> RunReport:
    """Outer augmented-Lagrangian loop over federated sub-problems.

    ``fcfg.solver`` must be resolved (``rho_init`` and ``beta`` set).
    """
    start = time.perf_counter()
    cfg = fcfg.solver
    linear = fcfg.linear
    server_stream = RngStream(fcfg.seed).split(fcfg.m)
    U = np.zeros((d, d))
    alm = AlmState(cfg.alpha_init, cfg.rho_init, t=1, h=initial_h(U, linear, cfg.tau))
    report = RunReport(mode=fcfg.mode, adjacency=np.zeros((d, d), dtype=np.int8),
                       mask=np.zeros((d, d)), U=U)
    if fcfg.mode == "AS":
        # shared networks start from one common draw, otherwise the first
        # average mixes unrelated hidden units
        phi0 = mlp_init(d, RngStream(fcfg.seed).split(fcfg.m + 1))
        for hd in handles:
            hd.set_phi(phi0)
    U_prev = None
    while not outer_loop_should_stop(alm, alm.h, cfg, U if linear else None, U_prev):
        for hd in handles:
            hd.begin(alm)
        U_prev = U
        U, rounds = run_sps(handles, alm, fcfg, server_stream, outer_t=alm.t)
        report.aggregations += rounds
        h_new = deterministic_h(U, linear, cfg.tau)
        scores = [hd.finish() for hd in handles]
        report.score_trace.append(sum(scores) / len(scores))
        report.rho_trace.append(alm.rho)
        report.alpha_trace.append(alm.alpha)
        report.h_trace.append(h_new)
        alm = alm_update(alm, h_new, alm.h, cfg)
        log.info("outer %d: h=%.3e score=%.5f rho=%.3g alpha=%.3g", alm.t - 1, h_new,
                 report.score_trace[-1], report.rho_trace[-1], report.alpha_trace[-1])
    report.outer_iters = alm.t - 1
    report.U = U.copy()
    report.adjacency, report.mask = extract_dag(U, linear, cfg)
    report.wall_seconds = time.perf_counter() - start
    return report


def _check_datasets(datasets) -> int:
    if not datasets:
        raise ValueError("need at least one client dataset")
    d = datasets[0].shape[1]
    for k, X in enumerate(datasets):
        if X.ndim != 2 or X.shape[1] != d or X.shape[0] < 1:
            raise DimensionError(f"client {k} data has shape {X.shape}, expected (n, {d})")
        if not np.all(np.isfinite(X)):
            raise ValueError(f"client {k} data contains non-finite values")
    return d


def run_dsfcd(datasets: list[np.ndarray], fcfg: FederationConfig) -> RunReport:
    """Learn a DAG from per-client datasets with the in-process transport.

    SEPARATE mode trains every client alone; its report carries one sub-report
    per client and their vote as ``adjacency``.
    """
    fcfg.validate()
    d = _check_datasets(datasets)
    if len(datasets) != fcfg.m:
        raise ValueError(f"config expects m={fcfg.m} clients, got {len(datasets)} datasets")
    from dataclasses import replace
    fcfg = replace(fcfg, solver=fcfg.solver.resolved(d, fcfg.mode))
    if fcfg.transport == "tcp":
        from fedcd.federation.tcp import run_over_loopback
        return run_over_loopback(datasets, fcfg)
    clients = [init_client(k, X, fcfg) for k, X in enumerate(datasets)]
    if fcfg.mode == "SEPARATE":
        start = time.perf_counter()
        reports = [solve_local(c, fcfg.solver) for c in clients]
        adjacency = vote_combine([r.adjacency for r in reports], fcfg.vote_quorum)
        support = np.mean([r.adjacency for r in reports], axis=0)
        return RunReport(mode="SEPARATE", adjacency=adjacency, mask=support,
                         U=np.mean([r.U for r in reports], axis=0),
                         outer_iters=max(r.outer_iters for r in reports),
                         wall_seconds=time.perf_counter() - start, client_reports=reports)
    handles = [LocalClient(c, fcfg.solver, fcfg.reset_u_adam_on_broadcast) for c in clients]
    return run_federated(handles, fcfg, d)
