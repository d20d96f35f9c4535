"""Synthetic ground truth: random DAGs, additive-noise mechanisms and client scenarios."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from fedcd.graphmask import is_dag
from fedcd.numkit import RngStream, cholesky

GRAPH_MODELS = ("ER", "SF")
REGIMES = ("IID", "NONIID")
KINDS = ("LINEAR", "GP", "GP_ADD", "MLP_FN", "MIM")
NONLINEAR_KINDS = ("GP", "GP_ADD", "MLP_FN", "MIM")
NONIID_NOISE_VARS = (0.8, 1.0)
MLP_HIDDEN = 100


@dataclass
class ScenarioSpec:
    d: int = 10
    graph_model: str = "ER"
    k: int = 2                  # expected edges per node
    m: int = 10
    n: int = 600                # rows per client
    regime: str = "IID"
    function: str = "GP"        # mechanism kind for IID scenarios
    seed: int = 0
    noise_var: float = 1.0      # IID noise variance

    def validate(self) -> None:
        if self.d < 2 or self.k < 1 or self.n < 1 or self.m < 1:
            raise ValueError("need d >= 2, k >= 1, n >= 1 and m >= 1")
        if self.graph_model not in GRAPH_MODELS:
            raise ValueError(f"graph_model must be one of {GRAPH_MODELS}")
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        if self.function not in KINDS:
            raise ValueError(f"function must be one of {KINDS}")
        if self.noise_var < 0:
            raise ValueError("noise_var must be non-negative")

    @property
    def scenario_id(self) -> str:
        return f"{self.regime}-{self.function if self.regime == 'IID' else 'MIX'}-" \
               f"{self.graph_model}{self.k}-d{self.d}"


@dataclass
class Mechanism:
    """One node's structural function. GP kinds carry no parameters; they are drawn with the data."""

    kind: str
    parents: np.ndarray
    params: dict = field(default_factory=dict)

    def evaluate(self, P: np.ndarray, stream: RngStream | None = None) -> np.ndarray:
        n = P.shape[0]
        if self.parents.size == 0:
            return np.zeros(n)
        if self.kind == "LINEAR":
            return P @ self.params["coef"]
        if self.kind == "MLP_FN":
            return expit(P @ self.params["W1"]) @ self.params["W2"]
        if self.kind == "MIM":
            p = self.params
            return np.tanh(P @ p["w1"]) + np.cos(P @ p["w2"]) + np.sin(P @ p["w3"])
        if self.kind == "GP":
            return gp_sample(P, stream)
        if self.kind == "GP_ADD":
            return sum(gp_sample(P[:, [i]], stream.split(i)) for i in range(P.shape[1]))
        raise ValueError(f"unknown mechanism kind {self.kind!r}")


@dataclass
class GroundTruth:
    B_true: np.ndarray
    mechanisms: list[list[Mechanism]]     # [client][node]
    noise_vars: list[float]

    def kinds(self, client: int) -> list[str]:
        return [mech.kind for mech in self.mechanisms[client]]


def _signed_uniform(stream: RngStream, size) -> np.ndarray:
    # magnitude first, then an independent fair sign
    mag = stream.uniform(0.5, 2.0, size)
    return mag * stream.signs(size)


def er_edge_probability(d: int, k: int) -> float:
    return min(1.0, 2.0 * k / (d - 1))


def sample_er(d: int, k: int, stream: RngStream) -> np.ndarray:
    """Random order, then every forward pair kept with probability ``2k/(d-1)``."""
    order = stream.permutation(d)
    coins = stream.uniform01((d, d)) < er_edge_probability(d, k)
    B = np.zeros((d, d), dtype=np.int8)
    for a in range(d):
        for b in range(a + 1, d):
            if coins[a, b]:
                B[order[a], order[b]] = 1
    return B


def sample_sf(d: int, k: int, stream: RngStream) -> np.ndarray:
    """Preferential attachment: node ``t`` links to ``min(k, t)`` earlier nodes, then relabel."""
    B = np.zeros((d, d), dtype=np.int8)
    degree = np.zeros(d)
    for t in range(1, d):
        w = degree[:t] + 1.0
        chosen: list[int] = []
        for _ in range(min(k, t)):
            w_open = w.copy()
            w_open[chosen] = 0.0
            cdf = np.cumsum(w_open)
            u = stream.uniform01() * cdf[-1]
            chosen.append(int(np.searchsorted(cdf, u, side="right")))
        for s in chosen:
            B[s, t] = 1
            degree[s] += 1
            degree[t] += 1
    perm = stream.permutation(d)
    out = np.zeros_like(B)
    out[np.ix_(perm, perm)] = B
    return out


def sample_graph(spec: ScenarioSpec, stream: RngStream | None = None) -> np.ndarray:
    spec.validate()
    stream = stream if stream is not None else RngStream(spec.seed).split(0)
    B = sample_er(spec.d, spec.k, stream) if spec.graph_model == "ER" \
        else sample_sf(spec.d, spec.k, stream)
    assert is_dag(B)
    return B


def sample_mechanism(kind: str, parents, stream: RngStream) -> Mechanism:
    parents = np.asarray(parents, dtype=int)
    p = parents.size
    if kind not in KINDS:
        raise ValueError(f"unknown mechanism kind {kind!r}")
    if p == 0:
        return Mechanism(kind, parents)
    if kind == "LINEAR":
        return Mechanism(kind, parents, {"coef": _signed_uniform(stream, p)})
    if kind == "MLP_FN":
        return Mechanism(kind, parents, {"W1": _signed_uniform(stream, (p, MLP_HIDDEN)),
                                         "W2": _signed_uniform(stream, MLP_HIDDEN)})
    if kind == "MIM":
        return Mechanism(kind, parents, {f"w{i}": _signed_uniform(stream, p) for i in (1, 2, 3)})
    return Mechanism(kind, parents)


def rbf_kernel(P: np.ndarray) -> np.ndarray:
    sq = np.sum(P * P, axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * P @ P.T
    np.maximum(D, 0.0, out=D)
    return np.exp(-0.5 * D)


def gp_sample(P: np.ndarray, stream: RngStream) -> np.ndarray:
    """Joint draw of ``f(P[r])`` over all rows from a unit-bandwidth RBF Gaussian process."""
    L = cholesky(rbf_kernel(P))
    return L @ stream.gaussian(P.shape[0])


def topological_order(B: np.ndarray) -> list[int]:
    B = np.asarray(B) != 0
    indeg = B.sum(axis=0)
    ready = sorted(np.flatnonzero(indeg == 0).tolist())
    order = []
    while ready:
        j = ready.pop(0)
        order.append(j)
        for c in np.flatnonzero(B[j]):
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(int(c))
        ready.sort()
    if len(order) != B.shape[0]:
        raise ValueError("graph has a cycle")
    return order


def generate_client_data(B_true: np.ndarray, mechanisms: list[Mechanism], noise_var: float,
                         n: int, stream: RngStream) -> np.ndarray:
    """Ancestral sampling ``X_j = f_j(X_pa(j)) + e_j`` with ``e_j ~ N(0, noise_var)``.

    Node ``j`` draws its noise from ``stream.split(0).split(j)`` and any GP
    function values from ``stream.split(1).split(j)``, so a column depends only
    on the streams of the node and its ancestors.
    """
    d = B_true.shape[0]
    if len(mechanisms) != d:
        raise ValueError(f"need {d} mechanisms, got {len(mechanisms)}")
    X = np.zeros((n, d))
    sd = np.sqrt(noise_var)
    for j in topological_order(B_true):
        mech = mechanisms[j]
        f = mech.evaluate(X[:, mech.parents], stream.split(1).split(j))
        X[:, j] = f + sd * stream.split(0).split(j).gaussian(n)
    return X


def _parents(B: np.ndarray, j: int) -> np.ndarray:
    return np.flatnonzero(B[:, j])


def make_scenario(spec: ScenarioSpec) -> tuple[GroundTruth, list[np.ndarray]]:
    """Shared DAG plus ``m`` client datasets.

    IID: one mechanism set, ``m*n`` rows split evenly. NONIID: each client is
    linear or nonlinear with equal odds, nonlinear nodes pick a kind uniformly,
    and the noise variance is 0.8 or 1.
    """
    spec.validate()
    master = RngStream(spec.seed)
    B = sample_graph(spec, master.split(0))
    mech_stream, data_stream = master.split(1), master.split(2)
    d, m, n = spec.d, spec.m, spec.n
    if spec.regime == "IID":
        mechs = [sample_mechanism(spec.function, _parents(B, j), mech_stream.split(j))
                 for j in range(d)]
        X = generate_client_data(B, mechs, spec.noise_var, m * n, data_stream)
        truth = GroundTruth(B, [mechs] * m, [spec.noise_var] * m)
        return truth, [X[k * n:(k + 1) * n].copy() for k in range(m)]
    all_mechs, noise_vars, datasets = [], [], []
    for c in range(m):
        cs = mech_stream.split(c)
        linear = cs.uniform01() < 0.5
        picks = cs.integers(len(NONLINEAR_KINDS), d)
        var = NONIID_NOISE_VARS[int(cs.integers(len(NONIID_NOISE_VARS)))]
        mechs = [sample_mechanism("LINEAR" if linear else NONLINEAR_KINDS[int(picks[j])],
                                  _parents(B, j), cs.split(j)) for j in range(d)]
        all_mechs.append(mechs)
        noise_vars.append(var)
        datasets.append(generate_client_data(B, mechs, var, n, data_stream.split(c)))
    return GroundTruth(B, all_mechs, noise_vars), datasets


# --- file formats ---------------------------------------------------------

def save_client_csvs(datasets: list[np.ndarray], directory: str, prefix: str = "client") -> list[str]:
    """One headerless CSV per client; ``%.17g`` round-trips every float64 exactly."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for k, X in enumerate(datasets):
        path = os.path.join(directory, f"{prefix}{k}.csv")
        np.savetxt(path, X, delimiter=",", fmt="%.17g")
        paths.append(path)
    return paths


def load_client_csvs(paths: list[str]) -> list[np.ndarray]:
    return [np.loadtxt(p, delimiter=",", ndmin=2, dtype=np.float64) for p in paths]


def save_edge_list(B: np.ndarray, path: str) -> None:
    with open(path, "w") as fh:
        for i, j in zip(*np.nonzero(B)):
            fh.write(f"{i} {j}\n")


def load_edge_list(path: str, d: int) -> np.ndarray:
    B = np.zeros((d, d), dtype=np.int8)
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'i j', got {line!r}")
            i, j = int(parts[0]), int(parts[1])
            if not (0 <= i < d and 0 <= j < d):
                raise ValueError(f"{path}:{lineno}: node index out of range for d={d}")
            B[i, j] = 1
    return B
