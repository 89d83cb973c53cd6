"""Preconditioned inverse multiquadric kernel and the Langevin Stein kernel built on it.

Pointwise functions take 1-d arrays. The ``*_matrix`` variants take ``(n, d)`` and
``(m, d)`` arrays and return ``(n, m)`` blocks; they are what the greedy loops use.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg


class InvalidScoreError(ValueError):
    """Raised when a score vector contains NaN or infinity."""


class PreconditionedIMQ:
    """IMQ kernel ``k(x, y) = (1 + (x - y)^T Lambda^{-1} (x - y))^beta``.

    Parameters
    ----------
    lam : array_like
        Symmetric positive definite ``(d, d)`` preconditioner. A scalar or 1-d
        array of length ``d`` is promoted to ``lam * I`` / ``diag(lam)``.
    beta : float
        Exponent in ``(-1, 0)``.
    dim : int, optional
        Required when ``lam`` is a scalar.
    """

    def __init__(self, lam=1.0, beta: float = -0.5, dim: int | None = None):
        lam = np.asarray(lam, dtype=float)
        if lam.ndim == 0:
            if dim is None:
                raise ValueError("dim is required for a scalar preconditioner")
            lam = float(lam) * np.eye(dim)
        elif lam.ndim == 1:
            lam = np.diag(lam)
        if lam.ndim != 2 or lam.shape[0] != lam.shape[1]:
            raise ValueError(f"preconditioner must be square, got shape {lam.shape}")
        if dim is not None and lam.shape[0] != dim:
            raise ValueError(f"preconditioner is {lam.shape[0]}-dimensional, expected {dim}")
        if not -1.0 < beta < 0.0:
            raise ValueError(f"beta must lie in (-1, 0), got {beta}")
        scale = max(np.abs(lam).max(), np.finfo(float).tiny)
        if np.abs(lam - lam.T).max() > 1e-12 * scale:
            raise ValueError("preconditioner is not symmetric")
        try:
            self._chol = scipy.linalg.cho_factor(lam, lower=True)
        except np.linalg.LinAlgError as exc:
            raise ValueError("preconditioner is not positive definite") from exc

        self.lam = lam
        self.beta = float(beta)
        self.dim = lam.shape[0]
        inv = scipy.linalg.cho_solve(self._chol, np.eye(self.dim))
        self.lam_inv = 0.5 * (inv + inv.T)
        self.trace_inv = float(np.trace(self.lam_inv))

    def __repr__(self):
        return f"PreconditionedIMQ(dim={self.dim}, beta={self.beta})"

    def _diff(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.shape != (self.dim,) or y.shape != (self.dim,):
            raise ValueError(
                f"expected points of shape ({self.dim},), got {x.shape} and {y.shape}"
            )
        return x - y

    def eval(self, x, y) -> float:
        u = self._diff(x, y)
        r2 = u @ self.lam_inv @ u
        return float((1.0 + r2) ** self.beta)

    def grad_x(self, x, y) -> np.ndarray:
        """Gradient of ``k(x, y)`` with respect to ``x``."""
        u = self._diff(x, y)
        au = self.lam_inv @ u
        r2 = u @ au
        return 2.0 * self.beta * (1.0 + r2) ** (self.beta - 1.0) * au

    def div_grad(self, x, y) -> float:
        """``sum_i d^2 k / dx_i dy_i``."""
        u = self._diff(x, y)
        au = self.lam_inv @ u
        r2 = u @ au
        b = self.beta
        return float(
            -4.0 * b * (b - 1.0) * (1.0 + r2) ** (b - 2.0) * (au @ au)
            - 2.0 * b * (1.0 + r2) ** (b - 1.0) * self.trace_inv
        )

    # Block versions -------------------------------------------------------

    def _block(self, X, Y):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        if X.shape[1] != self.dim or Y.shape[1] != self.dim:
            raise ValueError(
                f"expected {self.dim} columns, got {X.shape[1]} and {Y.shape[1]}"
            )
        U = X[:, None, :] - Y[None, :, :]
        AU = U @ self.lam_inv
        r2 = np.einsum("ijk,ijk->ij", U, AU)
        return U, AU, r2

    def matrix(self, X, Y) -> np.ndarray:
        _, _, r2 = self._block(X, Y)
        return (1.0 + r2) ** self.beta

    def grad_x_matrix(self, X, Y) -> np.ndarray:
        """``(n, m, d)`` array of ``grad_x k(X[i], Y[j])``."""
        _, AU, r2 = self._block(X, Y)
        return (2.0 * self.beta * (1.0 + r2) ** (self.beta - 1.0))[..., None] * AU


class SteinKernel:
    """Langevin Stein kernel ``k0`` for a base :class:`PreconditionedIMQ`.

    Scores (``grad log p~``) are passed in by the caller so that values already
    computed by a sampler can be reused.
    """

    def __init__(self, base: PreconditionedIMQ, dim: int | None = None):
        if dim is not None and dim != base.dim:
            raise ValueError(f"kernel is {base.dim}-dimensional, target is {dim}-dimensional")
        self.base = base
        self.dim = base.dim

    def __repr__(self):
        return f"SteinKernel({self.base!r})"

    def __call__(self, x, score_x, y, score_y) -> float:
        sx = np.asarray(score_x, dtype=float)
        sy = np.asarray(score_y, dtype=float)
        if sx.shape != (self.dim,) or sy.shape != (self.dim,):
            raise ValueError("score has wrong shape")
        if not (np.all(np.isfinite(sx)) and np.all(np.isfinite(sy))):
            raise InvalidScoreError("non-finite score passed to the Stein kernel")
        base = self.base
        gx = base.grad_x(x, y)
        gy = base.grad_x(y, x)
        return float(base.div_grad(x, y) + gx @ sy + gy @ sx + base.eval(x, y) * (sx @ sy))

    def diag(self, X, S) -> np.ndarray:
        """``k0(x_i, x_i)`` for each row; equals ``-2 beta tr(Lambda^-1) + |s_i|^2``."""
        S = np.atleast_2d(np.asarray(S, dtype=float))
        return -2.0 * self.base.beta * self.base.trace_inv + np.einsum("ij,ij->i", S, S)

    def matrix(self, X, SX, Y, SY) -> np.ndarray:
        """``(n, m)`` block ``k0(X[i], Y[j])``."""
        SX = np.atleast_2d(np.asarray(SX, dtype=float))
        SY = np.atleast_2d(np.asarray(SY, dtype=float))
        base = self.base
        b = base.beta
        U, AU, r2 = base._block(X, Y)
        q = 1.0 + r2
        qb1 = q ** (b - 1.0)
        k = qb1 * q
        au2 = np.einsum("ijk,ijk->ij", AU, AU)
        div = -4.0 * b * (b - 1.0) * (qb1 / q) * au2 - 2.0 * b * qb1 * base.trace_inv
        # <A u, s_y - s_x> split into two contractions to avoid an (n, m, d) temporary
        drift = np.einsum("ijk,jk->ij", AU, SY) - np.einsum("ijk,ik->ij", AU, SX)
        return div + 2.0 * b * qb1 * drift + k * (SX @ SY.T)


def imq_eval(kernel: PreconditionedIMQ, x, y) -> float:
    return kernel.eval(x, y)


def imq_grad_x(kernel: PreconditionedIMQ, x, y) -> np.ndarray:
    return kernel.grad_x(x, y)


def imq_div_grad(kernel: PreconditionedIMQ, x, y) -> float:
    return kernel.div_grad(x, y)


def stein_kernel_eval(ctx: SteinKernel, x, score_x, y, score_y) -> float:
    return ctx(x, score_x, y, score_y)
