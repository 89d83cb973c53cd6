"""Comparator methods: Stein Points with adaptive Monte Carlo search, minimum energy
designs, Stein variational gradient descent and thinned MCMC."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .kernels import SteinKernel
from .ksd import QuantisationState
from .mcmc import MarkovKernelConfig, init_state, run_chain
from .targets import TargetModel
from .trace import ExperimentTrace, TraceRecord


class SearchError(RuntimeError):
    pass


def default_alpha(j: int) -> float:
    return max(0.1, 1.0 / math.sqrt(j))


@dataclass
class AdaptiveSearchConfig:
    """Adaptive Monte Carlo search.

    With probability ``alpha(j)`` the ``n_test`` candidates come from
    ``N(mu0, sigma0)``; otherwise from an equal-weight mixture of isotropic Gaussians
    with variance ``lambda_mix(j)`` centred on the current points. Both ``alpha`` and
    ``lambda_mix`` may be constants or functions of the iteration ``j``.
    """

    n_test: int
    mu0: np.ndarray
    sigma0: np.ndarray
    alpha: Union[float, Callable[[int], float]] = default_alpha
    lambda_mix: Union[float, Callable[[int], float], None] = None

    def __post_init__(self):
        if self.n_test < 1:
            raise ValueError("n_test must be at least 1")
        self.mu0 = np.atleast_1d(np.asarray(self.mu0, dtype=float))
        d = len(self.mu0)
        self.sigma0 = np.atleast_2d(np.asarray(self.sigma0, dtype=float))
        if self.sigma0.shape != (d, d):
            raise ValueError("sigma0 must be (d, d)")
        try:
            self._chol = np.linalg.cholesky(self.sigma0)
        except np.linalg.LinAlgError as exc:
            raise ValueError("sigma0 is not positive definite") from exc
        if self.lambda_mix is None:
            scale = float(np.trace(self.sigma0)) / d
            self.lambda_mix = lambda j: scale / j ** (2.0 / d)
        elif not callable(self.lambda_mix) and not self.lambda_mix > 0:
            raise ValueError("lambda_mix must be positive")

    @property
    def dim(self) -> int:
        return len(self.mu0)

    def alpha_at(self, j: int) -> float:
        a = float(self.alpha(j)) if callable(self.alpha) else float(self.alpha)
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"alpha_{j} = {a} outside [0, 1]")
        return a

    def lambda_at(self, j: int) -> float:
        lam = float(self.lambda_mix(j)) if callable(self.lambda_mix) else float(self.lambda_mix)
        if not lam > 0:
            raise ValueError(f"lambda_{j} = {lam} must be positive")
        return lam


def draw_search_candidates(cfg: AdaptiveSearchConfig, points, j: int, rng) -> np.ndarray:
    d = cfg.dim
    u = rng.random()
    points = np.asarray(points, dtype=float).reshape(-1, d)
    if u <= cfg.alpha_at(j) or len(points) == 0:
        z = rng.standard_normal((cfg.n_test, d))
        return cfg.mu0 + z @ cfg._chol.T
    centres = points[rng.integers(len(points), size=cfg.n_test)]
    return centres + math.sqrt(cfg.lambda_at(j)) * rng.standard_normal((cfg.n_test, d))


def adaptive_search(cfg: AdaptiveSearchConfig, objective: Callable, points, j: int, rng) -> np.ndarray:
    """Draw one candidate batch and return the candidate minimising ``objective``."""
    cands = draw_search_candidates(cfg, points, j, rng)
    values = np.array([objective(c) for c in cands], dtype=float)
    return cands[int(np.argmin(values))]


def _clock(record_timing):
    return time.perf_counter if record_timing else (lambda: 0.0)


def sp_run(
    search: AdaptiveSearchConfig,
    target: TargetModel,
    kernel: SteinKernel,
    n: int,
    rng: np.random.Generator,
    record_timing: bool = False,
):
    """Greedy Stein Points with adaptive Monte Carlo search.

    Each candidate costs one fused evaluation, so ``n_eval = n * n_test`` plus
    ``n_test`` for every retried iteration (listed in ``trace.retries``). The first
    point is the candidate with the highest density in the first batch.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    clock = _clock(record_timing)
    t0 = clock()
    trace = ExperimentTrace(method="sp")
    state = QuantisationState(kernel, capacity=n)
    last = None
    for j in range(1, n + 1):
        for attempt in range(2):
            Y = draw_search_candidates(search, state.points, j, rng)
            LP, S = target.log_p_and_grad_batch(Y)
            if j == 1:
                ok = np.isfinite(LP) & np.all(np.isfinite(S), axis=1)
                values = np.where(ok, -LP, np.inf)
            else:
                values = state.add_scores(Y, S)
            if np.isfinite(values).any():
                break
        else:
            raise SearchError(f"iteration {j}: no admissible candidate after a retry")
        if attempt:
            trace.retries.append(j)
        best = int(np.argmin(values))
        y = Y[best]
        idx = state.commit_add(y, S[best], LP[best])
        jump = math.nan if last is None else float(np.sum((y - last) ** 2))
        last = y.copy()
        trace.append(
            TraceRecord(j, "add", y.copy(), state.ksd(), target.counter.n_eval, clock() - t0,
                        jump_sq=jump, index=idx, candidate_scores=values, chosen=best)
        )
    return state, trace


def med_objective(points_lp, points, lp_x, x, d: int) -> np.ndarray:
    """``min_i [ lp_i / 2d + lp(x) / 2d + log |x_i - x| ]`` for each candidate row of ``x``."""
    P = np.atleast_2d(points)
    X = np.atleast_2d(x)
    dist = np.sqrt(((P[:, None, :] - X[None, :, :]) ** 2).sum(axis=2))
    with np.errstate(divide="ignore"):
        logd = np.log(dist)
    vals = (np.asarray(points_lp)[:, None] + np.asarray(lp_x)[None, :]) / (2 * d) + logd
    out = vals.min(axis=0)
    out[~np.isfinite(np.asarray(lp_x))] = -np.inf
    return out


def med_run(
    search: AdaptiveSearchConfig,
    target: TargetModel,
    n: int,
    rng: np.random.Generator,
    record_timing: bool = False,
):
    """Greedy minimum energy design; uses log densities only, one evaluation per candidate
    (``n * n_test`` in total, plus ``n_test`` per entry of ``trace.retries``).

    Returns ``(points, log_densities, trace)``; the trace carries no KSD values.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    clock = _clock(record_timing)
    t0 = clock()
    d = target.dim
    trace = ExperimentTrace(method="med")
    pts = np.empty((n, d))
    lps = np.empty(n)
    for j in range(1, n + 1):
        current = pts[: j - 1]
        for attempt in range(2):
            Y = draw_search_candidates(search, current, j, rng)
            LP = target.log_p_batch(Y)
            if j == 1:
                values = LP
            else:
                values = med_objective(lps[: j - 1], current, LP, Y, d)
            if np.isfinite(values).any():
                break
        else:
            raise SearchError(f"iteration {j}: no admissible candidate after a retry")
        if attempt:
            trace.retries.append(j)
        best = int(np.argmax(values))
        pts[j - 1] = Y[best]
        lps[j - 1] = LP[best]
        jump = math.nan if j == 1 else float(np.sum((pts[j - 1] - pts[j - 2]) ** 2))
        trace.append(
            TraceRecord(j, "add", Y[best].copy(), math.nan, target.counter.n_eval, clock() - t0,
                        jump_sq=jump, index=j - 1, candidate_scores=values, chosen=best)
        )
    return pts, lps, trace


@dataclass
class SvgdConfig:
    """SVGD with AdaGrad-style step sizes.

    The accumulator starts at ``g**2`` and then follows
    ``a <- momentum * a + (1 - momentum) * g**2``; the step is
    ``epsilon_master * g / (1e-8 + sqrt(a))``.
    """

    n_particles: int
    iterations: int
    epsilon_master: float = 1e-3
    momentum: float = 0.9
    init_sampler: Optional[Callable] = None  # (rng, n) -> (n, d) array
    record_every: int = 1
    jitter: float = 1e-8

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be at least 1")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.epsilon_master < 0:
            raise ValueError("epsilon_master must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


class SvgdError(RuntimeError):
    pass


def svgd_direction(base, X, S) -> np.ndarray:
    """``phi(x_i) = n^-1 sum_j [k(x_j, x_i) s_j + grad_{x_j} k(x_j, x_i)]``."""
    K = base.matrix(X, X)
    G = base.grad_x_matrix(X, X)
    return (K.T @ S + G.sum(axis=0)) / len(X)


def svgd_run(
    cfg: SvgdConfig,
    target: TargetModel,
    kernel: SteinKernel,
    rng: np.random.Generator,
    init=None,
    record_timing: bool = False,
):
    """Run SVGD; costs ``n_particles`` evaluations per iteration.

    Trace records carry the KSD of the particle set *before* each update, with
    ``n_eval`` equal to the evaluations spent producing that set. Returns
    ``(particles, trace)``.
    """
    clock = _clock(record_timing)
    t0 = clock()
    if init is not None:
        X = np.array(init, dtype=float).reshape(cfg.n_particles, target.dim)
    elif cfg.init_sampler is not None:
        X = np.asarray(cfg.init_sampler(rng, cfg.n_particles), dtype=float).reshape(cfg.n_particles, target.dim)
    else:
        raise ValueError("SVGD needs an initial particle set or an init_sampler")
    base = kernel.base
    trace = ExperimentTrace(method="svgd")
    spent = 0
    hist = None
    for t in range(1, cfg.iterations + 1):
        _, S = target.log_p_and_grad_batch(X)
        if not np.all(np.isfinite(S)):
            bad = int(np.argmax(~np.all(np.isfinite(S), axis=1)))
            raise SvgdError(f"iteration {t}: non-finite score at particle {bad} = {X[bad]}")
        if cfg.record_every and (t - 1) % cfg.record_every == 0:
            ksd = QuantisationState.from_points(kernel, X, S).ksd()
            trace.append(TraceRecord(t - 1, "update", None, ksd, spent, clock() - t0))
            trace.snapshots[len(trace.records) - 1] = X.copy()
        spent += len(X)
        phi = svgd_direction(base, X, S)
        g2 = phi**2
        hist = g2 if hist is None else cfg.momentum * hist + (1.0 - cfg.momentum) * g2
        X = X + cfg.epsilon_master * phi / (cfg.jitter + np.sqrt(hist))
        if not np.all(np.isfinite(X)):
            raise SvgdError(f"iteration {t}: particles became non-finite")
    return X, trace


def mcmc_thin_run(
    cfg: MarkovKernelConfig,
    target: TargetModel,
    init,
    n: int,
    m: int,
    rng: np.random.Generator,
    kernel: Optional[SteinKernel] = None,
    record_timing: bool = False,
):
    """One chain of length ``m * n`` (the initial state included), keeping every ``m``-th
    state. Costs exactly ``m * n`` evaluations.

    With a Stein kernel the trace carries the running KSD, computed from the scores the
    chain already produced. Returns ``(points, trace)``.
    """
    if n < 1 or m < 1:
        raise ValueError("n and m must be at least 1")
    clock = _clock(record_timing)
    t0 = clock()
    trace = ExperimentTrace(method="mcmc")
    state = init_state(target, init)
    states = [state]
    if m * n > 1:
        states += run_chain(cfg, target, state, m * n - 1, rng)
    kept = states[m - 1 :: m]
    qs = QuantisationState(kernel, capacity=n) if kernel is not None else None
    base_eval = target.counter.n_eval - m * n
    prev = None
    for i, s in enumerate(kept):
        ksd = math.nan
        if qs is not None:
            qs.commit_add(s.x, s.score, s.log_p)
            ksd = qs.ksd()
        jump = math.nan if prev is None else float(np.sum((s.x - prev) ** 2))
        prev = s.x
        trace.append(TraceRecord(i + 1, "add", s.x.copy(), ksd, base_eval + (i + 1) * m, clock() - t0,
                                 jump_sq=jump, index=i))
    return np.array([s.x for s in kept]), trace
