"""Graph-recovery metrics and small brute-force oracles."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from fedcd.numkit import DimensionError

CSV_COLUMNS = ("scenario_id", "d", "graph_model", "regime", "mode", "seed", "shd", "tpr",
               "fdr", "nnz", "outer_iters", "wall_seconds")
BRUTE_FORCE_MAX_D = 6


def _pair(B_est, B_true) -> tuple[np.ndarray, np.ndarray]:
    E = np.asarray(B_est) != 0
    T = np.asarray(B_true) != 0
    if E.shape != T.shape or E.ndim != 2 or E.shape[0] != E.shape[1]:
        raise DimensionError(f"cannot compare graphs of shapes {E.shape} and {T.shape}")
    return E, T


def shd(B_est, B_true) -> int:
    """Edge insertions, deletions and reversals turning ``B_est`` into ``B_true``.

    Counted per unordered node pair: a pair contributes one edit whenever its
    directed status differs, so a reversed edge costs 1.
    """
    E, T = _pair(B_est, B_true)
    differs = (E != T) | (E.T != T.T)
    return int(np.triu(differs, 1).sum())


def tpr_fdr_nnz(B_est, B_true) -> tuple[float, float, int]:
    E, T = _pair(B_est, B_true)
    nnz = int(E.sum())
    tp = int((E & T).sum())
    reversed_ = int((E & T.T & ~T).sum())
    false_pos = int((E & ~T & ~T.T).sum())
    n_true = int(T.sum())
    tpr = tp / n_true if n_true else 1.0 if nnz == 0 else 0.0
    fdr = (reversed_ + false_pos) / max(1, nnz)
    return float(tpr), float(fdr), nnz


@dataclass
class MetricsReport:
    shd: int
    tpr: float
    fdr: float
    nnz: int
    per_client: list[MetricsReport] = field(default_factory=list)

    @classmethod
    def compare(cls, B_est, B_true, client_graphs=None) -> MetricsReport:
        tpr, fdr, nnz = tpr_fdr_nnz(B_est, B_true)
        per = [cls.compare(B, B_true) for B in client_graphs or []]
        return cls(shd(B_est, B_true), tpr, fdr, nnz, per)

    @property
    def mean_client_shd(self) -> float:
        return float(np.mean([c.shd for c in self.per_client])) if self.per_client else float(self.shd)


def brute_force_dag_oracle(B) -> bool:
    """True iff some vertex order makes every edge point forward (``d <= 6``)."""
    B = np.asarray(B) != 0
    d = B.shape[0]
    if d > BRUTE_FORCE_MAX_D:
        raise ValueError(f"brute force refused for d={d} > {BRUTE_FORCE_MAX_D}")
    edges = list(zip(*np.nonzero(B)))
    for order in itertools.permutations(range(d)):
        pos = {v: i for i, v in enumerate(order)}
        if all(pos[i] < pos[j] for i, j in edges):
            return True
    return False


def metrics_row(scenario_id: str, d: int, graph_model: str, regime: str, mode: str, seed: int,
                metrics: MetricsReport | None, outer_iters: int, wall_seconds: float) -> dict:
    """One CSV row in the fixed column order; metrics are blank without a ground truth."""
    row = dict.fromkeys(CSV_COLUMNS, "")
    row.update(scenario_id=scenario_id, d=d, graph_model=graph_model, regime=regime, mode=mode,
               seed=seed, outer_iters=outer_iters, wall_seconds=f"{wall_seconds:.3f}")
    if metrics is not None:
        row.update(shd=metrics.shd, tpr=f"{metrics.tpr:.6f}", fdr=f"{metrics.fdr:.6f}",
                   nnz=metrics.nnz)
    return row
