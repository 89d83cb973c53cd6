"""Stein Point MCMC: greedy KSD minimisation over Markov chain sample paths."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .kernels import SteinKernel
from .ksd import QuantisationState
from .mcmc import ChainState, MarkovKernelConfig, run_chain
from .targets import TargetModel
from .trace import ExperimentTrace, TraceRecord

CRITERIA = ("last", "rand", "infl")


class SpMcmcError(RuntimeError):
    pass


@dataclass(frozen=True)
class Removal:
    """Point-removal policy: ``none``, ``away`` or ``drop`` with a per-iteration rate."""

    kind: str = "none"
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "away", "drop"):
            raise ValueError(f"unknown removal policy {self.kind!r}")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("drop rate must lie in [0, 1)")

    @classmethod
    def parse(cls, text: str) -> "Removal":
        """``"none"``, ``"away"`` or ``"drop:0.25"``."""
        text = (text or "none").strip().lower()
        if text.startswith("drop"):
            _, _, rate = text.partition(":")
            return cls("drop", float(rate) if rate else 0.25)
        return cls(text)

    def __str__(self):
        return f"drop:{self.rate:g}" if self.kind == "drop" else self.kind


@dataclass
class SpMcmcConfig:
    """Settings for :func:`spmcmc_run`.

    ``m`` is either a constant chain length or a callable ``j -> m_j``. ``source`` is
    a :class:`MarkovKernelConfig` or the string ``"iid"`` for exact draws from the
    target (needs ``target.sample``). ``crit`` is one of ``last``, ``rand``, ``infl``
    or a callable ``(state, rng) -> index``.
    """

    n: int
    x1: np.ndarray
    source: Union[MarkovKernelConfig, str] = field(default_factory=MarkovKernelConfig)
    m: Union[int, Callable[[int], int]] = 5
    crit: Union[str, Callable] = "infl"
    removal: Removal = field(default_factory=Removal)
    max_iter_factor: int = 10
    record_timing: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if isinstance(self.crit, str):
            self.crit = self.crit.lower()
            if self.crit not in CRITERIA:
                raise ValueError(f"unknown criterion {self.crit!r}; use one of {CRITERIA}")
        if isinstance(self.removal, str):
            self.removal = Removal.parse(self.removal)
        if isinstance(self.source, str) and self.source != "iid":
            raise ValueError("source must be a MarkovKernelConfig or 'iid'")
        if not callable(self.m) and int(self.m) < 1:
            raise ValueError("chain length must be at least 1")
        self.x1 = np.asarray(self.x1, dtype=float)

    def m_at(self, j: int) -> int:
        m = int(self.m(j)) if callable(self.m) else int(self.m)
        if m < 1:
            raise ValueError(f"chain length m_{j} = {m} must be at least 1")
        return m


def select_init(crit, state: QuantisationState, rng: np.random.Generator, last: Optional[int] = None) -> int:
    """Index of the point the next chain starts from.

    ``last`` is the index of the most recently added point (defaults to the final
    position). ``infl`` falls back to ``last`` when only one point exists.
    """
    if state.n == 0:
        raise ValueError("cannot initialise a chain from an empty point set")
    if last is None:
        last = state.n - 1
    if callable(crit):
        return int(crit(state, rng))
    if state.n == 1:
        return 0
    if crit == "last":
        return last
    if crit == "rand":
        return int(rng.integers(state.n))
    if crit == "infl":
        return state.most_influential()
    raise ValueError(f"unknown criterion {crit!r}")


def away_or_drop(state: QuantisationState, pending_add_score: float, removal: Removal, rng) -> Optional[int]:
    """Index to remove this iteration, or ``None`` to leave the set alone.

    ``away`` weighs the KSD gain of adding the pending candidate against the gain of
    removing the current worst point and removes only when the latter is at least as
    large. ``drop`` removes the worst point with probability ``rate`` (before the
    usual add).
    """
    if removal.kind == "none" or state.n < 2:
        return None
    if removal.kind == "drop":
        if removal.rate > 0 and rng.random() < removal.rate:
            return state.least_influential()
        return None
    current = state.ksd()
    good = current - state.ksd_after_add(pending_add_score)
    worst = state.least_influential()
    bad = current - state.removal_ksd(worst)
    if good > bad:
        return None
    return worst


def _iid_candidates(target: TargetModel, m: int, rng):
    Y = target.sample(rng, m)
    lp, S = target.log_p_and_grad_batch(Y)
    return Y, lp, S


def _chain_candidates(cfg, target, start: ChainState, m: int, rng):
    path = run_chain(cfg, target, start, m, rng)
    Y = np.array([s.x for s in path])
    lp = np.array([s.log_p for s in path])
    S = np.array([s.score for s in path])
    return Y, lp, S


def spmcmc_run(cfg: SpMcmcConfig, target: TargetModel, kernel: SteinKernel, rng: np.random.Generator):
    """Run SP-MCMC until the point set holds ``cfg.n`` points.

    Cost: one evaluation for ``x1`` plus ``m_j`` per iteration (twice for iterations
    listed in ``trace.retries``); KSD bookkeeping only reuses scores already produced
    by the chains. Returns ``(state, trace)``.
    """
    if kernel.dim != target.dim:
        raise ValueError("kernel and target dimensions differ")
    if cfg.x1.shape != (target.dim,):
        raise ValueError(f"x1 must have shape ({target.dim},)")
    iid = cfg.source == "iid"
    if iid and not target.has_exact_sampler:
        raise ValueError("the iid candidate source needs a target with an exact sampler")

    clock = time.perf_counter if cfg.record_timing else (lambda: 0.0)
    t0 = clock()
    trace = ExperimentTrace(method="spmcmc")
    state = QuantisationState(kernel, capacity=cfg.n + 1)

    lp1, s1 = target.log_p_and_grad(cfg.x1)
    if not np.all(np.isfinite(s1)):
        raise SpMcmcError("x1 lies outside the support or has a non-finite score")
    state.commit_add(cfg.x1, s1, lp1)
    last = 0
    last_point = cfg.x1.copy()
    trace.append(TraceRecord(1, "add", cfg.x1.copy(), state.ksd(), target.counter.n_eval, clock() - t0, index=0))

    max_iter = cfg.max_iter_factor * cfg.n
    j = 1
    while state.n < cfg.n:
        j += 1
        if j > max_iter:
            raise SpMcmcError(f"point set still has {state.n} < {cfg.n} points after {max_iter} iterations")
        m = cfg.m_at(j)

        if cfg.removal.kind == "drop":
            drop = away_or_drop(state, np.nan, cfg.removal, rng)
            if drop is not None:
                _remove(state, drop, trace, j, target, clock() - t0)
                last = _shift(last, drop, state.n)

        for attempt in range(2):
            if iid:
                Y, LP, S = _iid_candidates(target, m, rng)
            else:
                i0 = select_init(cfg.crit, state, rng, last)
                start = ChainState(state.points[i0].copy(), float(state.log_densities[i0]), state.scores[i0].copy())
                Y, LP, S = _chain_candidates(cfg.source, target, start, m, rng)
            scores = state.add_scores(Y, S)
            if np.isfinite(scores).any():
                break
        else:
            raise SpMcmcError(f"iteration {j}: no candidate inside the support after a retry")
        if attempt:
            trace.retries.append(j)

        best = int(np.argmin(scores))  # earliest index on ties
        disp = float(np.sum((Y[-1] - Y[0]) ** 2))

        if cfg.removal.kind == "away":
            bad = away_or_drop(state, float(scores[best]), cfg.removal, rng)
            if bad is not None:
                _remove(state, bad, trace, j, target, clock() - t0, chain_disp_sq=disp)
                last = _shift(last, bad, state.n)
                continue

        y = Y[best]
        idx = state.commit_add(y, S[best], LP[best])
        jump = float(np.sum((y - last_point) ** 2))
        last, last_point = idx, y.copy()
        trace.append(
            TraceRecord(
                j,
                "add",
                y.copy(),
                state.ksd(),
                target.counter.n_eval,
                clock() - t0,
                jump_sq=jump,
                chain_disp_sq=disp,
                index=idx,
                candidate_scores=scores,
                chosen=best,
            )
        )
    return state, trace


def _remove(state, i, trace, j, target, elapsed, chain_disp_sq=np.nan):
    point = state.points[i].copy()
    state.commit_remove(i)
    trace.append(
        TraceRecord(j, "remove", point, state.ksd(), target.counter.n_eval, elapsed, chain_disp_sq=chain_disp_sq, index=i)
    )


def _shift(last: int, removed: int, n: int) -> int:
    if removed < last:
        return last - 1
    if removed == last:
        return n - 1
    return last


def expected_n_eval(cfg: SpMcmcConfig, iterations: int, retries=()) -> int:
    """``1 + sum_{j=2}^{iterations} m_j``, plus ``m_j`` again for each retried iteration."""
    return 1 + sum(cfg.m_at(j) for j in range(2, iterations + 1)) + sum(cfg.m_at(j) for j in retries)
