"""Point set with incremental kernel Stein discrepancy bookkeeping.

For points ``x_1..x_n`` with cached scores the state keeps

* ``diag[i]  = k0(x_i, x_i)``
* ``row_sums[i] = sum_b k0(x_i, x_b)`` (diagonal included)
* ``total = sum_{a,b} k0(x_a, x_b)``

so that scoring a candidate costs ``n`` kernel evaluations and scoring a removal
costs O(1).
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from .kernels import SteinKernel

logger = logging.getLogger(__name__)

RECOMPUTE_EVERY = 512
_CHUNK = 1 << 20  # kernel entries per block when scoring large batches


class EmptyStateError(ValueError):
    pass


class QuantisationState:
    """Uniformly weighted point set and its KSD sums."""

    def __init__(self, kernel: SteinKernel, capacity: int = 64):
        self.kernel = kernel
        self.dim = kernel.dim
        cap = max(int(capacity), 1)
        self._X = np.empty((cap, self.dim))
        self._S = np.empty((cap, self.dim))
        self._lp = np.empty(cap)
        self._diag = np.empty(cap)
        self._rows = np.empty(cap)
        self.n = 0
        self.total = 0.0
        self._commits = 0

    # -- views -----------------------------------------------------------------

    @property
    def points(self) -> np.ndarray:
        return self._X[: self.n]

    @property
    def scores(self) -> np.ndarray:
        return self._S[: self.n]

    @property
    def log_densities(self) -> np.ndarray:
        return self._lp[: self.n]

    @property
    def diag(self) -> np.ndarray:
        return self._diag[: self.n]

    @property
    def row_sums(self) -> np.ndarray:
        return self._rows[: self.n]

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"QuantisationState(n={self.n}, ksd={self.ksd() if self.n else float('nan'):.6g})"

    # -- queries ---------------------------------------------------------------

    def ksd(self) -> float:
        if self.n == 0:
            raise EmptyStateError("KSD of an empty point set is undefined")
        return float(np.sqrt(max(self.total, 0.0)) / self.n)

    def cross_sums(self, Y, SY) -> np.ndarray:
        """``sum_i k0(x_i, y_l)`` for each candidate row ``y_l``."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        SY = np.atleast_2d(np.asarray(SY, dtype=float))
        if self.n == 0:
            return np.zeros(len(Y))
        step = max(1, _CHUNK // max(len(Y), 1))
        out = np.zeros(len(Y))
        for a in range(0, self.n, step):
            out += self.kernel.matrix(self.points[a : a + step], self.scores[a : a + step], Y, SY).sum(axis=0)
        return out

    def add_scores(self, Y, SY) -> np.ndarray:
        """Greedy objective ``k0(y, y) / 2 + sum_i k0(x_i, y)`` for each candidate.

        Inserting ``y`` changes the total by exactly twice this value, so its argmin is
        the candidate giving the smallest post-insertion KSD. Candidates with a
        non-finite score get ``+inf``.
        """
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        SY = np.atleast_2d(np.asarray(SY, dtype=float))
        if Y.shape[1] != self.dim or SY.shape != Y.shape:
            raise ValueError("candidate points and scores must both be (m, d)")
        ok = np.all(np.isfinite(SY), axis=1) & np.all(np.isfinite(Y), axis=1)
        out = np.full(len(Y), np.inf)
        if ok.any():
            Yk, Sk = Y[ok], SY[ok]
            out[ok] = 0.5 * self.kernel.diag(Yk, Sk) + self.cross_sums(Yk, Sk)
        return out

    def add_score(self, y, score_y) -> float:
        return float(self.add_scores(np.asarray(y)[None, :], np.asarray(score_y)[None, :])[0])

    def ksd_after_add(self, add_score: float) -> float:
        return float(np.sqrt(max(self.total + 2.0 * add_score, 0.0)) / (self.n + 1))

    def removal_ksds(self) -> np.ndarray:
        """KSD of the set with point ``i`` left out, for every ``i``."""
        if self.n < 2:
            raise EmptyStateError("removal needs at least two points")
        rest = self.total - 2.0 * self.row_sums + self.diag
        return np.sqrt(np.maximum(rest, 0.0)) / (self.n - 1)

    def removal_ksd(self, i: int) -> float:
        if self.n < 2:
            raise EmptyStateError("removal needs at least two points")
        if not 0 <= i < self.n:
            raise IndexError(i)
        rest = self.total - 2.0 * self._rows[i] + self._diag[i]
        return float(np.sqrt(max(rest, 0.0)) / (self.n - 1))

    def most_influential(self) -> int:
        """Index whose removal increases the KSD the most (smallest index on ties)."""
        return int(np.argmax(self.removal_ksds()))

    def least_influential(self) -> int:
        """Index whose removal leaves the smallest KSD (the current worst point)."""
        return int(np.argmin(self.removal_ksds()))

    # -- updates ---------------------------------------------------------------

    def _grow(self):
        cap = 2 * len(self._X)
        for name in ("_X", "_S"):
            arr = np.empty((cap, self.dim))
            arr[: self.n] = getattr(self, name)[: self.n]
            setattr(self, name, arr)
        for name in ("_lp", "_diag", "_rows"):
            arr = np.empty(cap)
            arr[: self.n] = getattr(self, name)[: self.n]
            setattr(self, name, arr)

    def commit_add(self, y, score_y, log_p: float = np.nan) -> int:
        """Append ``y``; returns its index."""
        y = np.asarray(y, dtype=float)
        s = np.asarray(score_y, dtype=float)
        if y.shape != (self.dim,) or s.shape != (self.dim,):
            raise ValueError("point and score must have shape (d,)")
        if not np.all(np.isfinite(s)):
            raise ValueError("cannot add a point with a non-finite score")
        if self.n == len(self._X):
            self._grow()
        n = self.n
        if n:
            col = self.kernel.matrix(self.points, self.scores, y[None, :], s[None, :])[:, 0]
        else:
            col = np.zeros(0)
        d = float(self.kernel.diag(y[None, :], s[None, :])[0])
        cross = float(col.sum())
        self._rows[:n] += col
        self._X[n] = y
        self._S[n] = s
        self._lp[n] = log_p
        self._diag[n] = d
        self._rows[n] = cross + d
        self.total += 2.0 * cross + d
        self.n = n + 1
        self._after_commit()
        return n

    def commit_remove(self, i: int):
        if self.n < 2:
            raise EmptyStateError("refusing to remove the last point")
        if not 0 <= i < self.n:
            raise IndexError(f"index {i} out of range for {self.n} points")
        n = self.n
        col = self.kernel.matrix(self.points, self.scores, self._X[i : i + 1], self._S[i : i + 1])[:, 0]
        self.total -= 2.0 * self._rows[i] - self._diag[i]
        self._rows[:n] -= col
        keep = np.arange(n) != i
        for name in ("_X", "_S"):
            arr = getattr(self, name)
            arr[: n - 1] = arr[:n][keep]
        for name in ("_lp", "_diag", "_rows"):
            arr = getattr(self, name)
            arr[: n - 1] = arr[:n][keep]
        self.n = n - 1
        self._after_commit()

    def _after_commit(self):
        self._commits += 1
        if self._commits % RECOMPUTE_EVERY == 0:
            self.recompute()
        if self.total < 0.0:
            if self.total < -1e-8 * max(abs(self._rows[: self.n]).sum(), 1.0):
                logger.warning("KSD total drifted to %.3e; clamping at zero", self.total)
            self.total = 0.0

    def recompute(self):
        """Rebuild row sums and the total from scratch."""
        if self.n == 0:
            self.total = 0.0
            return
        rows = np.zeros(self.n)
        step = max(1, _CHUNK // self.n)
        for a in range(0, self.n, step):
            K = self.kernel.matrix(self.points[a : a + step], self.scores[a : a + step], self.points, self.scores)
            rows[a : a + step] = K.sum(axis=1)
        self._rows[: self.n] = rows
        self._diag[: self.n] = self.kernel.diag(self.points, self.scores)
        self.total = float(rows.sum())

    def copy(self) -> "QuantisationState":
        out = QuantisationState(self.kernel, capacity=len(self._X))
        for name in ("_X", "_S", "_lp", "_diag", "_rows"):
            setattr(out, name, getattr(self, name).copy())
        out.n, out.total, out._commits = self.n, self.total, self._commits
        return out

    @classmethod
    def from_points(cls, kernel: SteinKernel, X, S, log_p=None) -> "QuantisationState":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        S = np.atleast_2d(np.asarray(S, dtype=float))
        st = cls(kernel, capacity=len(X))
        st._X[: len(X)] = X
        st._S[: len(X)] = S
        st._lp[: len(X)] = np.nan if log_p is None else log_p
        st.n = len(X)
        st.recompute()
        return st


def ksd_of(kernel: SteinKernel, X, S) -> float:
    """KSD of an arbitrary point set (O(n^2), blocked)."""
    return QuantisationState.from_points(kernel, X, S).ksd()


def write_points_csv(path, points):
    points = np.atleast_2d(np.asarray(points, dtype=float))
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(points.shape[1])])
        for row in points:
            w.writerow([repr(float(v)) for v in row])


def read_points_csv(path) -> np.ndarray:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    if rows and rows[0] and not _is_number(rows[0][0]):
        rows = rows[1:]
    return np.array([[float(v) for v in r] for r in rows if r], dtype=float)


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True
