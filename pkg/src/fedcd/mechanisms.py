"""Per-node mechanism networks, the masked forward pass and the local score.

Every node ``j`` owns a small MLP ``d -> 16 -> 16 -> 16 -> 1`` with ``tanh``
hidden units. Its input is ``M[:, j] * x``, so the mask column selects the
candidate parents. The mask is folded into the first-layer weights, which
avoids materializing a ``(d, n, d)`` tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedcd.numkit import DimensionError, RngStream

HIDDEN = 16


@dataclass
class MlpStack:
    """Stacked weights of the ``d`` node networks.

    Shapes: ``W1 (d, d, h)`` indexed ``[node, input, unit]``, ``W2, W3 (d, h, h)``,
    ``W4 (d, h)``, biases ``b1, b2, b3 (d, h)`` and ``b4 (d,)``.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    W4: np.ndarray
    b4: np.ndarray

    FIELDS = ("W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4")

    @property
    def d(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[2]

    def params(self) -> list[np.ndarray]:
        return [getattr(self, f) for f in self.FIELDS]

    def copy(self) -> MlpStack:
        return MlpStack(*(p.copy() for p in self.params()))

    def size(self) -> int:
        return sum(p.size for p in self.params())

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    @classmethod
    def shapes(cls, d: int, hidden: int = HIDDEN) -> list[tuple[int, ...]]:
        h = hidden
        return [(d, d, h), (d, h), (d, h, h), (d, h), (d, h, h), (d, h), (d, h), (d,)]

    @classmethod
    def from_flat(cls, d: int, vec: np.ndarray, hidden: int = HIDDEN) -> MlpStack:
        shapes = cls.shapes(d, hidden)
        total = sum(int(np.prod(s)) for s in shapes)
        if len(vec) != total:
            raise DimensionError(f"flat vector has {len(vec)} entries, expected {total}")
        parts, pos = [], 0
        for shape in shapes:
            k = int(np.prod(shape))
            parts.append(np.array(vec[pos:pos + k], dtype=np.float64).reshape(shape))
            pos += k
        return cls(*parts)

    @classmethod
    def zeros_like(cls, other: MlpStack) -> MlpStack:
        return cls(*(np.zeros_like(p) for p in other.params()))


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def mlp_init(d: int, stream: RngStream, hidden: int = HIDDEN) -> MlpStack:
    """Xavier-uniform weights and zero biases, drawn layer by layer."""
    if d < 2:
        raise ValueError("need at least two variables")
    h = hidden

    def xavier(shape, fan_in, fan_out):
        b = xavier_bound(fan_in, fan_out)
        return stream.uniform(-b, b, shape)

    W1 = xavier((d, d, h), d, h)
    W2 = xavier((d, h, h), h, h)
    W3 = xavier((d, h, h), h, h)
    W4 = xavier((d, h), h, 1)
    return MlpStack(W1, np.zeros((d, h)), W2, np.zeros((d, h)), W3, np.zeros((d, h)),
                    W4, np.zeros(d))


def _check(phi: MlpStack, M: np.ndarray, X: np.ndarray) -> None:
    d = phi.d
    if M.shape != (d, d) or X.ndim != 2 or X.shape[1] != d:
        raise DimensionError(
            f"shape mismatch: phi d={d}, mask {M.shape}, data {X.shape}")


def _forward(phi: MlpStack, M: np.ndarray, X: np.ndarray):
    n, d = X.shape
    h = phi.hidden
    W1e = M.T[:, :, None] * phi.W1                     # (node, input, unit)
    z1 = X @ W1e.transpose(1, 0, 2).reshape(d, d * h)  # (n, node*unit)
    a1 = np.tanh(z1.reshape(n, d, h).transpose(1, 0, 2) + phi.b1[:, None, :])
    a2 = np.tanh(a1 @ phi.W2 + phi.b2[:, None, :])
    a3 = np.tanh(a2 @ phi.W3 + phi.b3[:, None, :])
    out = (a3 @ phi.W4[:, :, None])[:, :, 0] + phi.b4[:, None]   # (node, n)
    return out, (a1, a2, a3)


def masked_forward(phi: MlpStack, M: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Predictions ``Xhat[r, j] = phi_j(M[:, j] * X[r])`` as an ``(n, d)`` array."""
    _check(phi, M, X)
    out, _ = _forward(phi, M, X)
    return out.T


def local_score(X: np.ndarray, phi: MlpStack, M: np.ndarray, lam: float) -> float:
    """Negative half mean squared residual minus ``lam * sum(M)``."""
    _check(phi, M, X)
    n = X.shape[0]
    out, _ = _forward(phi, M, X)
    resid = X.T - out
    return float(-0.5 / n * np.sum(resid * resid) - lam * np.sum(np.abs(M)))


def score_and_gradients(X: np.ndarray, phi: MlpStack, M: np.ndarray, lam: float):
    """Local score with its gradients w.r.t. the network weights and the mask.

    Returns ``(score, grad_phi, grad_M)``; gradients point uphill.
    """
    _check(phi, M, X)
    n, d = X.shape
    h = phi.hidden
    out, (a1, a2, a3) = _forward(phi, M, X)
    resid = X.T - out
    score = float(-0.5 / n * np.sum(resid * resid) - lam * np.sum(M))

    g = resid / n                                     # d score / d out, (node, n)
    gb4 = g.sum(axis=1)
    gW4 = (a3.transpose(0, 2, 1) @ g[:, :, None])[:, :, 0]
    dz = g[:, :, None] * phi.W4[:, None, :]
    dz *= 1.0 - a3 * a3
    gW3 = a2.transpose(0, 2, 1) @ dz
    gb3 = dz.sum(axis=1)
    dz = dz @ phi.W3.transpose(0, 2, 1)
    dz *= 1.0 - a2 * a2
    gW2 = a1.transpose(0, 2, 1) @ dz
    gb2 = dz.sum(axis=1)
    dz = dz @ phi.W2.transpose(0, 2, 1)
    dz *= 1.0 - a1 * a1
    gb1 = dz.sum(axis=1)
    gW1e = (X.T @ dz.transpose(1, 0, 2).reshape(n, d * h)).reshape(d, d, h).transpose(1, 0, 2)
    gW1 = M.T[:, :, None] * gW1e
    grad_M = np.einsum("jkh,jkh->kj", gW1e, phi.W1) - lam
    np.fill_diagonal(grad_M, 0.0)
    grad_phi = MlpStack(gW1, gb1, gW2, gb2, gW3, gb3, gW4, gb4)
    return score, grad_phi, grad_M


def local_score_gradients(X: np.ndarray, phi: MlpStack, M: np.ndarray, tau: float,
                          lam: float):
    """Gradients of the local score w.r.t. ``phi`` and the logits ``U``.

    ``M`` is the mask realized from ``U`` with fixed noise at temperature ``tau``.
    """
    _, grad_phi, grad_M = score_and_gradients(X, phi, M, lam)
    grad_U = grad_M * M * (1.0 - M) / tau
    np.fill_diagonal(grad_U, 0.0)
    return grad_phi, grad_U


def linear_forward_score(X: np.ndarray, W: np.ndarray, lam: float):
    """Linear-SEM score ``-(1/2n)||X - XW||^2 - lam * |W|_1`` and its (sub)gradient."""
    n, d = X.shape
    if W.shape != (d, d):
        raise DimensionError(f"weights {W.shape} do not match data {X.shape}")
    resid = X - X @ W
    score = float(-0.5 / n * np.sum(resid * resid) - lam * np.sum(np.abs(W)))
    grad = X.T @ resid / n - lam * np.sign(W)
    np.fill_diagonal(grad, 0.0)
    return score, grad


def standardize(X: np.ndarray) -> np.ndarray:
    """Column-wise z-scores; constant columns are only centred."""
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return (X - mu) / sd
