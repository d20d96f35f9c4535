"""Gumbel-Sigmoid masks over the graph logits, the acyclicity functional, DAG pruning.

Adjacency convention throughout: ``B[i, j] = 1`` means edge ``i -> j``, so
column ``j`` lists the parents of node ``j``.
"""

from __future__ import annotations

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.special import expit

from fedcd.numkit import RngStream, matexp


def logistic_noise(stream: RngStream, d: int) -> np.ndarray:
    """Difference of two independent Gumbel(0, 1) matrices (a logistic sample)."""
    g1 = stream.gumbel((d, d))
    g0 = stream.gumbel((d, d))
    return g1 - g0


def gumbel_sigmoid(U: np.ndarray, tau: float, noise: np.ndarray | None = None) -> np.ndarray:
    """Relaxed adjacency ``sigmoid((U + noise) / tau)`` with a zero diagonal.

    ``noise=None`` gives the deterministic (zero-noise) mask used for
    reporting and for the outer-loop constraint value.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = U if noise is None else U + noise
    M = expit(logits / tau)
    np.fill_diagonal(M, 0.0)
    return M


def acyclicity_value(M: np.ndarray) -> float:
    """``h(M) = Tr[exp(M)] - d``; zero exactly on acyclic supports."""
    return float(np.trace(matexp(M)) - M.shape[0])


def acyclicity_value_and_grad(M: np.ndarray) -> tuple[float, np.ndarray]:
    """``h(M)`` and its gradient with respect to ``M`` from a single exponential."""
    E = matexp(M)
    return float(np.trace(E) - M.shape[0]), E.T


def acyclicity_gradient(U: np.ndarray, tau: float, M: np.ndarray) -> np.ndarray:
    """Gradient of ``h(gumbel_sigmoid(U, tau, noise))`` w.r.t. ``U`` with the noise held fixed.

    ``M`` must be the mask produced from ``U`` and that noise realization.
    """
    grad = matexp(M).T * (M * (1.0 - M) / tau)
    np.fill_diagonal(grad, 0.0)
    return grad


def is_dag(B: np.ndarray) -> bool:
    """Kahn's elimination: True iff the binary matrix has no directed cycle."""
    B = np.asarray(B) != 0
    d = B.shape[0]
    indeg = B.sum(axis=0).astype(int)
    stack = [j for j in range(d) if indeg[j] == 0]
    seen = 0
    while stack:
        i = stack.pop()
        seen += 1
        for j in np.flatnonzero(B[i]):
            indeg[j] -= 1
            if indeg[j] == 0:
                stack.append(j)
    return seen == d


def _cyclic_edges(B: np.ndarray) -> np.ndarray:
    """Boolean mask of edges lying on some directed cycle (same strong component)."""
    _, labels = connected_components(B.astype(np.int8), directed=True, connection="strong")
    same = labels[:, None] == labels[None, :]
    return B & same


def prune_to_dag(B: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Drop the weakest cycle edge repeatedly until ``B`` is acyclic.

    Only edges inside a strongly connected component are candidates, so edges
    on no cycle are never cut. Ties go to the lexicographically smallest
    ``(row, col)``.
    """
    B = np.array(B, dtype=bool)
    np.fill_diagonal(B, False)
    while not is_dag(B):
        cand = _cyclic_edges(B)
        w = np.where(cand, weights, np.inf)
        # argmin on the flattened row-major array is the lexicographic tie-break
        i, j = np.unravel_index(int(np.argmin(w)), w.shape)
        B[i, j] = False
    return B.astype(np.int8)


def threshold_to_dag(M: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binarize ``M > threshold`` then prune the weakest cycle edges."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return prune_to_dag(M > threshold, M)
