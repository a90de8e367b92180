"""Orthogonal alignment map between the two domains' user embeddings.

Users are stored as rows, so mapping a user vector ``w`` by ``X`` is
``W @ X.T`` on a row matrix and ``X.T w`` is ``W @ X``.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (DimensionError, Tape, Tensor, add, matmul, mul, sum_squared_error,
                       transpose)
from .nn import Module

NS_TOL = 1e-9
NS_MAX_ITER = 50


class ProjectionError(ArithmeticError):
    pass


class OrthogonalMap(Module):
    """Square map ``X`` (identity at start) plus its drift tolerance."""

    def __init__(self, d: int, orthogonality_tolerance: float = 1e-3, data=None):
        init = np.eye(d) if data is None else np.array(data, dtype=np.float64)
        if init.shape != (d, d):
            raise DimensionError(f"orthogonal map must be {d}x{d}, got {init.shape}")
        self.X = Tensor(init, requires_grad=True, name="X")
        self.orthogonality_tolerance = orthogonality_tolerance
        self.steps = 0

    @property
    def d(self) -> int:
        return self.X.shape[0]

    def drift(self) -> float:
        """Frobenius norm of X X^T - I."""
        x = self.X.data
        return float(np.linalg.norm(x @ x.T - np.eye(self.d)))

    def project_(self) -> None:
        self.X.data[...] = _newton_schulz(self.X.data)


def _as_x(X) -> Tensor:
    if isinstance(X, OrthogonalMap):
        return X.X
    return X if isinstance(X, Tensor) else Tensor(X)


def _check(X: Tensor, W_A: Tensor, W_B: Tensor) -> None:
    d = X.shape[0]
    if X.shape != (d, d) or W_A.shape != W_B.shape or W_A.shape[-1] != d:
        raise DimensionError(f"dual map: X {X.shape}, W_A {W_A.shape}, W_B {W_B.shape}")


def forward_loss(X, W_A, W_B) -> Tensor:
    """Sum over overlap users of ||X w_A - w_B||^2."""
    X, W_A, W_B = _as_x(X), _as_x(W_A), _as_x(W_B)
    _check(X, W_A, W_B)
    return sum_squared_error(matmul(W_A, transpose(X)), W_B)


def dual_loss(X, W_A, W_B) -> Tensor:
    """Sum over overlap users of ||w_A - X^T w_B||^2."""
    X, W_A, W_B = _as_x(X), _as_x(W_A), _as_x(W_B)
    _check(X, W_A, W_B)
    return sum_squared_error(W_A, matmul(W_B, X))


def orthogonality_penalty(X) -> Tensor:
    """||X X^T - I||_F^2."""
    X = _as_x(X)
    return sum_squared_error(matmul(X, transpose(X)), Tensor(np.eye(X.shape[0])))


def _newton_schulz(x: np.ndarray) -> np.ndarray:
    d = x.shape[0]
    eye = np.eye(d)
    if np.linalg.norm(x @ x.T - eye) <= NS_TOL:
        return x.copy()
    bound = np.sqrt(np.abs(x).sum(axis=0).max() * np.abs(x).sum(axis=1).max())
    if not np.isfinite(bound) or bound == 0.0:
        raise ProjectionError("cannot orthogonalize a zero or non-finite map; re-initialize X")
    y = x / bound
    for _ in range(NS_MAX_ITER):
        y = 1.5 * y - 0.5 * (y @ y.T @ y)
        resid = np.linalg.norm(y @ y.T - eye)
        if not np.isfinite(resid):
            break
        if resid <= NS_TOL:
            return y
    raise ProjectionError(
        "Newton-Schulz did not converge; X is singular or near-singular, re-initialize it")


def project_to_orthogonal(X):
    """Nearest orthogonal matrix (polar factor) by Newton-Schulz iteration.

    Accepts an :class:`OrthogonalMap`, Tensor or array and returns the same kind.
    """
    if isinstance(X, OrthogonalMap):
        out = OrthogonalMap(X.d, X.orthogonality_tolerance, _newton_schulz(X.X.data))
        out.steps = X.steps
        return out
    if isinstance(X, Tensor):
        return Tensor(_newton_schulz(X.data), requires_grad=X.requires_grad)
    return _newton_schulz(np.asarray(X, dtype=np.float64))


def dual_loss_terms(dmap: OrthogonalMap, W_A: Tensor, W_B: Tensor, lam: float = 1.0) -> Tensor:
    """forward_loss + dual_loss + lam * orthogonality_penalty."""
    both = add(forward_loss(dmap, W_A, W_B), dual_loss(dmap, W_A, W_B))
    if lam:
        both = add(both, mul(orthogonality_penalty(dmap), lam))
    return both


def dual_update_step(dmap: OrthogonalMap, W_A: Tensor, W_B: Tensor, lr: float,
                     lam: float = 1.0, proj_every: int = 10, update_map: bool = True) -> float:
    """One plain gradient step on the combined dual objective; returns the loss.

    ``W_A`` and ``W_B`` are the aligned overlap-user rows and are updated in
    place, as is ``X`` unless ``update_map`` is False.  Every ``proj_every``
    steps ``X`` is snapped back onto the orthogonal group.
    """
    params = [W_A, W_B] + ([dmap.X] if update_map else [])
    for p in (W_A, W_B, dmap.X):
        p.grad = None
    W_A.requires_grad = W_B.requires_grad = True
    dmap.X.requires_grad = update_map
    try:
        with Tape() as tape:
            loss = dual_loss_terms(dmap, W_A, W_B, lam)
        tape.backward(loss)
    finally:
        dmap.X.requires_grad = True
    for p in params:
        if p.grad is not None:
            p.data -= lr * p.grad
    dmap.steps += 1
    if update_map and proj_every and dmap.steps % proj_every == 0:
        dmap.project_()
    return loss.item()
