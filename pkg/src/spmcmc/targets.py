"""Unnormalised target densities with evaluation counting.

Every public evaluation (``log_p``, ``grad_log_p``, ``log_p_and_grad`` and their
batch forms) adds to ``target.counter``; a fused call returning both the log density
and its gradient counts once per point. Pass ``count=False`` for evaluations that
belong to assessment rather than to an algorithm's budget.
"""

from __future__ import annotations

import csv
import threading
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.signal
from scipy.special import logsumexp


class EvalCounter:
    """Thread-safe count of density/gradient evaluations."""

    def __init__(self):
        self._n = 0
        self._lock = threading.Lock()

    @property
    def n_eval(self) -> int:
        return self._n

    def add(self, k: int = 1):
        if k < 0:
            raise ValueError("evaluation counts only go up")
        with self._lock:
            self._n += k

    def reset(self) -> int:
        """Zero the count; returns the value it had."""
        with self._lock:
            n, self._n = self._n, 0
        return n

    def __repr__(self):
        return f"EvalCounter(n_eval={self._n})"


class TargetModel:
    """Base class for targets.

    Subclasses implement ``_log_p_and_grad(x)`` and may override ``_log_p``,
    ``_batch`` and ``sample`` for speed or exact sampling.

    ``lower``/``upper`` describe an open box support; ``None`` means unbounded.
    Outside the support the log density is ``-inf`` and the score is NaN.
    """

    def __init__(self, dim: int, lower=None, upper=None):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = int(dim)
        self.lower = None if lower is None else np.broadcast_to(np.asarray(lower, float), (dim,)).copy()
        self.upper = None if upper is None else np.broadcast_to(np.asarray(upper, float), (dim,)).copy()
        self.counter = EvalCounter()

    # -- to be provided by subclasses ---------------------------------------

    def _log_p_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def _log_p(self, x: np.ndarray) -> float:
        return self._log_p_and_grad(x)[0]

    def _batch(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lp = np.empty(len(X))
        G = np.empty_like(X)
        for i, x in enumerate(X):
            lp[i], G[i] = self._log_p_and_grad(x)
        return lp, G

    @property
    def has_exact_sampler(self) -> bool:
        return False

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no exact sampler")

    def initial_point(self) -> np.ndarray:
        if self.lower is not None and self.upper is not None:
            lo = np.where(np.isfinite(self.lower), self.lower, -1.0)
            hi = np.where(np.isfinite(self.upper), self.upper, lo + 2.0)
            return 0.5 * (lo + hi)
        return np.zeros(self.dim)

    # -- public, counted -------------------------------------------------------

    def in_support(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            return False
        if self.lower is not None and np.any(x <= self.lower):
            return False
        if self.upper is not None and np.any(x >= self.upper):
            return False
        return True

    def _in_support_rows(self, X: np.ndarray) -> np.ndarray:
        ok = np.all(np.isfinite(X), axis=1)
        if self.lower is not None:
            ok &= np.all(X > self.lower, axis=1)
        if self.upper is not None:
            ok &= np.all(X < self.upper, axis=1)
        return ok

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"expected a point of shape ({self.dim},), got {x.shape}")
        return x

    def log_p_and_grad(self, x, count: bool = True) -> tuple[float, np.ndarray]:
        x = self._check(x)
        if count:
            self.counter.add(1)
        if not self.in_support(x):
            return -np.inf, np.full(self.dim, np.nan)
        lp, g = self._log_p_and_grad(x)
        return float(lp), np.asarray(g, dtype=float)

    def log_p(self, x, count: bool = True) -> float:
        x = self._check(x)
        if count:
            self.counter.add(1)
        if not self.in_support(x):
            return -np.inf
        return float(self._log_p(x))

    def grad_log_p(self, x, count: bool = True) -> np.ndarray:
        return self.log_p_and_grad(x, count=count)[1]

    def log_p_and_grad_batch(self, X, count: bool = True) -> tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} columns, got {X.shape[1]}")
        if count:
            self.counter.add(len(X))
        lp = np.full(len(X), -np.inf)
        G = np.full(X.shape, np.nan)
        ok = self._in_support_rows(X)
        if ok.any():
            lp[ok], G[ok] = self._batch(X[ok])
        return lp, G

    def log_p_batch(self, X, count: bool = True) -> np.ndarray:
        # Subclasses with a cheap density-only path override _log_p_batch.
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} columns, got {X.shape[1]}")
        if count:
            self.counter.add(len(X))
        out = np.full(len(X), -np.inf)
        ok = self._in_support_rows(X)
        if ok.any():
            out[ok] = self._log_p_batch(X[ok])
        return out

    def _log_p_batch(self, X: np.ndarray) -> np.ndarray:
        return np.array([self._log_p(x) for x in X])

    def describe(self) -> dict:
        return {"kind": type(self).__name__, "dim": self.dim}


class FunctionTarget(TargetModel):
    """Target defined by user callables.

    ``log_p`` maps a point to a float; ``grad_log_p`` to a ``(d,)`` array. A fused
    ``log_p_and_grad`` callable may be supplied instead of the two.
    """

    def __init__(
        self,
        dim: int,
        log_p: Optional[Callable] = None,
        grad_log_p: Optional[Callable] = None,
        log_p_and_grad: Optional[Callable] = None,
        lower=None,
        upper=None,
        sampler: Optional[Callable] = None,
        name: str = "custom",
    ):
        super().__init__(dim, lower, upper)
        if log_p_and_grad is None and (log_p is None or grad_log_p is None):
            raise ValueError("need log_p and grad_log_p, or log_p_and_grad")
        self._f = log_p
        self._g = grad_log_p
        self._fg = log_p_and_grad
        self._sampler = sampler
        self.name = name

    def _log_p_and_grad(self, x):
        if self._fg is not None:
            return self._fg(x)
        return self._f(x), self._g(x)

    def _log_p(self, x):
        if self._f is not None:
            return self._f(x)
        return self._fg(x)[0]

    @property
    def has_exact_sampler(self):
        return self._sampler is not None

    def sample(self, rng, size):
        if self._sampler is None:
            return super().sample(rng, size)
        return np.asarray(self._sampler(rng, size), dtype=float).reshape(size, self.dim)

    def describe(self):
        return {"kind": "custom", "name": self.name, "dim": self.dim}


class GaussianMixtureTarget(TargetModel):
    """Finite mixture of Gaussians; admits exact sampling."""

    def __init__(self, weights, means, covariances):
        weights = np.asarray(weights, dtype=float)
        means = np.atleast_2d(np.asarray(means, dtype=float))
        covs = np.asarray(covariances, dtype=float)
        k, d = means.shape
        if covs.shape != (k, d, d):
            raise ValueError(f"covariances must have shape {(k, d, d)}, got {covs.shape}")
        if weights.shape != (k,) or np.any(weights < 0):
            raise ValueError("weights must be a non-negative vector, one per component")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to one")
        super().__init__(d)
        self.weights = weights
        self.means = means
        self.covariances = covs
        self._chols = []
        for c in covs:
            try:
                self._chols.append(np.linalg.cholesky(c))
            except np.linalg.LinAlgError as exc:
                raise ValueError("mixture covariance is not positive definite") from exc
        self._precisions = np.array([np.linalg.inv(c) for c in covs])
        with np.errstate(divide="ignore"):
            log_w = np.log(weights)
        logdets = np.array([2.0 * np.log(np.diag(L)).sum() for L in self._chols])
        self._log_norm = log_w - 0.5 * (d * np.log(2.0 * np.pi) + logdets)

    def _component_terms(self, X):
        # X: (n, d) -> residuals (k, n, d), precision-weighted residuals, log terms (k, n)
        R = X[None, :, :] - self.means[:, None, :]
        PR = np.einsum("kij,knj->kni", self._precisions, R)
        quad = np.einsum("kni,kni->kn", R, PR)
        return PR, self._log_norm[:, None] - 0.5 * quad

    def _batch(self, X):
        PR, terms = self._component_terms(X)
        lp = logsumexp(terms, axis=0)
        resp = np.exp(terms - lp[None, :])
        grad = -np.einsum("kn,kni->ni", resp, PR)
        return lp, grad

    def _log_p_batch(self, X):
        return logsumexp(self._component_terms(X)[1], axis=0)

    def _log_p_and_grad(self, x):
        lp, g = self._batch(x[None, :])
        return lp[0], g[0]

    def _log_p(self, x):
        return self._log_p_batch(x[None, :])[0]

    @property
    def has_exact_sampler(self):
        return True

    def sample(self, rng, size):
        comp = rng.choice(len(self.weights), size=size, p=self.weights)
        z = rng.standard_normal((size, self.dim))
        L = np.array(self._chols)
        return self.means[comp] + np.einsum("nij,nj->ni", L[comp], z)

    def initial_point(self):
        return self.weights @ self.means

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        dev = self.means - mu
        return np.einsum("k,kij->ij", self.weights, self.covariances) + np.einsum(
            "k,ki,kj->ij", self.weights, dev, dev
        )

    def describe(self):
        return {
            "kind": "gaussian_mixture",
            "dim": self.dim,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }


def gaussian_target(mean, cov) -> GaussianMixtureTarget:
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 0:
        cov = float(cov) * np.eye(len(mean))
    return GaussianMixtureTarget([1.0], mean[None, :], cov[None, :, :])


def standard_normal(dim: int) -> GaussianMixtureTarget:
    return gaussian_target(np.zeros(dim), np.eye(dim))


def two_mode_mixture(sigma2: float = 0.5, dim: int = 2) -> GaussianMixtureTarget:
    """Equal mixture of N(-1, sigma2 I) and N(1, sigma2 I)."""
    ones = np.ones(dim)
    cov = sigma2 * np.eye(dim)
    return GaussianMixtureTarget([0.5, 0.5], [-ones, ones], [cov, cov])


def toy_gauss(sigma: float = 0.01, dim: int = 2) -> GaussianMixtureTarget:
    return gaussian_target(np.zeros(dim), sigma**2 * np.eye(dim))


def gm_log_density(target: GaussianMixtureTarget, x) -> float:
    return target.log_p(x)


def gm_grad_log_density(target: GaussianMixtureTarget, x) -> np.ndarray:
    return target.grad_log_p(x)


def gm_sample(target: GaussianMixtureTarget, rng: np.random.Generator, size: int | None = None):
    if size is None:
        return target.sample(rng, 1)[0]
    return target.sample(rng, size)


# -- IGARCH -------------------------------------------------------------------


class IGARCHTarget(TargetModel):
    """Posterior over ``theta = (theta1, theta2)`` for an IGARCH(1,1) model under a flat prior.

    ``sigma_t^2 = theta1 + theta2 * y_{t-1}^2 + (1 - theta2) * sigma_{t-1}^2``, started from
    ``sigma1_sq`` (defaults to the sample variance of ``returns``). The likelihood sums
    over ``t = 2..T``.
    """

    def __init__(self, returns, sigma1_sq: float | None = None):
        y = np.asarray(returns, dtype=float).ravel()
        if len(y) < 2:
            raise ValueError("need at least two returns")
        if not np.all(np.isfinite(y)):
            raise ValueError("returns must be finite")
        if sigma1_sq is None:
            sigma1_sq = float(np.var(y))
        if not sigma1_sq > 0:
            raise ValueError("sigma1_sq must be positive")
        super().__init__(2, lower=[0.0, 0.0], upper=[np.inf, 1.0])
        self.returns = y
        self.sigma1_sq = float(sigma1_sq)
        self._y2_lag = y[:-1] ** 2
        self._y2 = y[1:] ** 2

    def variances(self, theta) -> np.ndarray:
        """Conditional variances ``sigma_2^2 .. sigma_T^2``."""
        t1, t2 = theta
        c = t1 + t2 * self._y2_lag
        a = 1.0 - t2
        # s_t = c_t + a s_{t-1}, with s_1 = sigma1_sq
        out, _ = scipy.signal.lfilter([1.0], [1.0, -a], c, zi=[a * self.sigma1_sq])
        return out

    def _log_p(self, theta):
        s = self.variances(theta)
        return float(-0.5 * np.sum(np.log(2.0 * np.pi * s) + self._y2 / s))

    def _log_p_and_grad(self, theta):
        t1, t2 = theta
        a = 1.0 - t2
        s = self.variances(theta)
        # derivative recursions; sigma1_sq does not depend on theta
        d1, _ = scipy.signal.lfilter([1.0], [1.0, -a], np.ones_like(s), zi=[0.0])
        s_prev = np.concatenate(([self.sigma1_sq], s[:-1]))
        d2, _ = scipy.signal.lfilter([1.0], [1.0, -a], self._y2_lag - s_prev, zi=[0.0])
        dl_ds = -0.5 / s + 0.5 * self._y2 / s**2
        lp = -0.5 * np.sum(np.log(2.0 * np.pi * s) + self._y2 / s)
        return float(lp), np.array([dl_ds @ d1, dl_ds @ d2])

    def initial_point(self):
        return np.array([0.1 * self.sigma1_sq, 0.1])

    def describe(self):
        return {
            "kind": "igarch",
            "dim": 2,
            "T": int(len(self.returns)),
            "sigma1_sq": self.sigma1_sq,
        }


def igarch_log_posterior(target: IGARCHTarget, theta) -> float:
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    return target.log_p(theta)


def igarch_synthesize(
    theta_true,
    T: int,
    rng: np.random.Generator,
    sigma1_sq: float | None = None,
    return_variances: bool = False,
):
    """Simulate ``T`` returns from the IGARCH recursion.

    The first conditional variance defaults to ``theta1 / theta2``, the level at which
    the recursion would sit if the squared return equalled the variance.
    """
    t1, t2 = (float(v) for v in theta_true)
    if not (t1 > 0 and 0 < t2 < 1):
        raise ValueError("theta_true must satisfy theta1 > 0 and 0 < theta2 < 1")
    if T < 2:
        raise ValueError("T must be at least 2")
    s = t1 / t2 if sigma1_sq is None else float(sigma1_sq)
    eps = rng.standard_normal(T)
    y = np.empty(T)
    sig2 = np.empty(T)
    for t in range(T):
        if t > 0:
            s = t1 + t2 * y[t - 1] ** 2 + (1.0 - t2) * s
        sig2[t] = s
        y[t] = np.sqrt(s) * eps[t]
    if return_variances:
        return y, sig2
    return y


def read_returns_csv(path) -> np.ndarray:
    """One real per line; a non-numeric first line is taken as a header."""
    values = []
    with open(Path(path), newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh)):
            if not row or not row[0].strip():
                continue
            try:
                values.append(float(row[0]))
            except ValueError:
                if lineno == 0 and not values:
                    continue
                raise ValueError(f"{path}:{lineno + 1}: not a number: {row[0]!r}")
    if len(values) < 2:
        raise ValueError(f"{path}: need at least two returns")
    return np.array(values)


def write_returns_csv(path, y):
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["return"])
        for v in y:
            w.writerow([repr(float(v))])
