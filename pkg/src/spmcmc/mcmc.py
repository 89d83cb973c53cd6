"""Random walk Metropolis and MALA transition kernels.

Each transition makes exactly one fused ``(log p~, grad log p~)`` evaluation at the
proposal. The current state's values are cached on :class:`ChainState`, so a chain
never re-evaluates the point it sits on.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .targets import TargetModel

DEFAULT_ACCEPTANCE = {"rwm": 0.234, "mala": 0.574}
H_MIN, H_MAX = 1e-10, 1e4


@dataclass(frozen=True, eq=False)
class MarkovKernelConfig:
    """RWM or MALA with step size ``h`` and proposal covariance ``sigma``.

    ``sigma=None`` means the identity in whatever dimension the target has.
    """

    kind: str = "mala"
    h: float = 1.0
    sigma: Optional[np.ndarray] = None
    target_acceptance: Optional[float] = None
    _chol: Optional[np.ndarray] = field(default=None, init=False, repr=False)
    _chol_inv: Optional[np.ndarray] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in DEFAULT_ACCEPTANCE:
            raise ValueError(f"unknown Markov kernel {self.kind!r}; use 'rwm' or 'mala'")
        object.__setattr__(self, "kind", kind)
        if not (self.h > 0 and math.isfinite(self.h)):
            raise ValueError(f"step size must be positive, got {self.h}")
        if self.target_acceptance is None:
            object.__setattr__(self, "target_acceptance", DEFAULT_ACCEPTANCE[kind])
        if not 0.0 < self.target_acceptance < 1.0:
            raise ValueError("target_acceptance must lie in (0, 1)")
        if self.sigma is not None:
            sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
            if np.abs(sigma - sigma.T).max() > 1e-12 * np.abs(sigma).max():
                raise ValueError("proposal covariance is not symmetric")
            try:
                L = np.linalg.cholesky(sigma)
            except np.linalg.LinAlgError as exc:
                raise ValueError("proposal covariance is not positive definite") from exc
            object.__setattr__(self, "sigma", sigma)
            object.__setattr__(self, "_chol", L)
            object.__setattr__(self, "_chol_inv", np.linalg.inv(L))

    def factors(self, dim: int):
        """``(Sigma, L, L^{-1})`` with ``Sigma = L L^T``."""
        if self.sigma is None:
            eye = np.eye(dim)
            return eye, eye, eye
        if self.sigma.shape != (dim, dim):
            raise ValueError(f"proposal covariance is {self.sigma.shape}, target has dim {dim}")
        return self.sigma, self._chol, self._chol_inv

    def with_h(self, h: float) -> "MarkovKernelConfig":
        return dataclasses.replace(self, h=float(h))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "h": self.h,
            "sigma": None if self.sigma is None else self.sigma.tolist(),
            "target_acceptance": self.target_acceptance,
        }


@dataclass
class ChainState:
    x: np.ndarray
    log_p: float
    score: np.ndarray
    accepted: bool = False


def init_state(target: TargetModel, x, count: bool = True) -> ChainState:
    """Evaluate the target at ``x`` once and wrap the result."""
    x = np.array(x, dtype=float)
    lp, s = target.log_p_and_grad(x, count=count)
    return ChainState(x, lp, s, False)


def rwm_step(state: ChainState, cfg: MarkovKernelConfig, target: TargetModel, rng) -> ChainState:
    _, L, _ = cfg.factors(target.dim)
    xi = rng.standard_normal(target.dim)
    log_u = math.log(rng.random())
    y = state.x + math.sqrt(cfg.h) * (L @ xi)
    lp_y, s_y = target.log_p_and_grad(y)
    if not math.isfinite(lp_y):
        return ChainState(state.x, state.log_p, state.score, False)
    if log_u < lp_y - state.log_p:
        return ChainState(y, lp_y, s_y, True)
    return ChainState(state.x, state.log_p, state.score, False)


def mala_step(state: ChainState, cfg: MarkovKernelConfig, target: TargetModel, rng) -> ChainState:
    sigma, L, L_inv = cfg.factors(target.dim)
    h = cfg.h
    xi = rng.standard_normal(target.dim)
    log_u = math.log(rng.random())
    mean_x = state.x + 0.5 * h * (sigma @ state.score)
    y = mean_x + math.sqrt(h) * (L @ xi)
    lp_y, s_y = target.log_p_and_grad(y)
    if not (math.isfinite(lp_y) and np.all(np.isfinite(s_y))):
        return ChainState(state.x, state.log_p, state.score, False)
    mean_y = y + 0.5 * h * (sigma @ s_y)
    # forward residual is exactly sqrt(h) * xi
    log_q_fwd = -0.5 * float(xi @ xi)
    r = L_inv @ (state.x - mean_y)
    log_q_bwd = -0.5 * float(r @ r) / h
    if log_u < lp_y - state.log_p + log_q_bwd - log_q_fwd:
        return ChainState(y, lp_y, s_y, True)
    return ChainState(state.x, state.log_p, state.score, False)


_STEPS = {"rwm": rwm_step, "mala": mala_step}


def step(state: ChainState, cfg: MarkovKernelConfig, target: TargetModel, rng) -> ChainState:
    return _STEPS[cfg.kind](state, cfg, target, rng)


def _as_state(init, target) -> ChainState:
    if isinstance(init, ChainState):
        return init
    return init_state(target, init)


def run_chain(
    cfg: MarkovKernelConfig,
    target: TargetModel,
    init: Union[ChainState, np.ndarray],
    m: int,
    rng: np.random.Generator,
) -> list[ChainState]:
    """Run ``m`` transitions from ``init`` and return the ``m`` post-transition states.

    Passing a bare point instead of a :class:`ChainState` costs one extra evaluation.
    """
    if m < 1:
        raise ValueError("chain length must be at least 1")
    state = _as_state(init, target)
    fn = _STEPS[cfg.kind]
    path = []
    for _ in range(m):
        state = fn(state, cfg, target, rng)
        path.append(state)
    return path


def adapt_step_size(
    cfg: MarkovKernelConfig,
    target: TargetModel,
    init,
    warmup: int,
    rng: np.random.Generator,
    batch: int = 50,
    return_state: bool = False,
):
    """Tune ``h`` towards ``cfg.target_acceptance`` by stochastic approximation.

    After each batch ``t`` of ``batch`` transitions,
    ``log h += t**-0.6 * (acceptance_in_batch - target_acceptance)``, with ``h`` kept in
    ``[1e-10, 1e4]``. Returns a config with the final (frozen) step size; with
    ``return_state`` also the last chain state.
    """
    if warmup < 100:
        raise ValueError("warmup must be at least 100 transitions")
    state = _as_state(init, target)
    fn = _STEPS[cfg.kind]
    log_h = math.log(min(max(cfg.h, H_MIN), H_MAX))
    n_batches = warmup // batch
    for t in range(1, n_batches + 1):
        current = cfg.with_h(math.exp(log_h))
        accepted = 0
        for _ in range(batch):
            state = fn(state, current, target, rng)
            accepted += state.accepted
        log_h += t**-0.6 * (accepted / batch - cfg.target_acceptance)
        log_h = min(max(log_h, math.log(H_MIN)), math.log(H_MAX))
    out = cfg.with_h(math.exp(log_h))
    if return_state:
        return out, state
    return out


def acceptance_rate(path: list[ChainState]) -> float:
    if not path:
        raise ValueError("empty path")
    return sum(s.accepted for s in path) / len(path)
