"""Quick oracle checks runnable from the command line (``spmcmc selftest``)."""

from __future__ import annotations

import numpy as np

from .kernels import PreconditionedIMQ, SteinKernel
from .ksd import QuantisationState
from .metrics import ReferenceSample, energy_distance
from .targets import standard_normal, two_mode_mixture


def _random_spd(rng, d):
    A = rng.standard_normal((d, d))
    return A @ A.T + d * np.eye(d)


def check_kernel_derivatives(seed: int = 0, pairs: int = 20, tol: float = 1e-6) -> float:
    """Largest deviation of analytic kernel derivatives from central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for d in (1, 2, 5):
        k = PreconditionedIMQ(_random_spd(rng, d), beta=-0.5)
        for _ in range(pairs):
            x, y = rng.standard_normal(d), rng.standard_normal(d)
            eps = 1e-5
            fd_grad = np.array([(k.eval(x + eps * e, y) - k.eval(x - eps * e, y)) / (2 * eps) for e in np.eye(d)])
            worst = max(worst, np.abs(fd_grad - k.grad_x(x, y)).max())
            fd_div = sum(
                (k.grad_x(x, y + eps * e)[i] - k.grad_x(x, y - eps * e)[i]) / (2 * eps) for i, e in enumerate(np.eye(d))
            )
            worst = max(worst, abs(fd_div - k.div_grad(x, y)))
    if worst > tol:
        raise AssertionError(f"kernel derivatives off by {worst:.3e}")
    return worst


def check_bookkeeping(seed: int = 0, adds: int = 60, removes: int = 20) -> float:
    rng = np.random.default_rng(seed)
    target = two_mode_mixture()
    sk = SteinKernel(PreconditionedIMQ(np.array([[1.5, 1.0], [1.0, 1.5]])))
    st = QuantisationState(sk)
    X = rng.standard_normal((adds, 2)) * 1.5
    _, S = target.log_p_and_grad_batch(X, count=False)
    for x, s in zip(X, S):
        st.commit_add(x, s)
    for _ in range(removes):
        st.commit_remove(int(rng.integers(st.n)))
    K = sk.matrix(st.points, st.scores, st.points, st.scores)
    err = max(abs(st.total - K.sum()) / abs(K.sum()), np.abs(st.row_sums - K.sum(axis=1)).max() / abs(K.sum()))
    if err > 1e-9:
        raise AssertionError(f"incremental sums off by {err:.3e} (relative)")
    return err


def check_energy() -> float:
    ref = ReferenceSample(np.array([[1.0], [1.0]]))
    e = energy_distance(np.array([[0.0]]), ref)
    if e != 2.0:
        raise AssertionError(f"E({{0}}, {{1}}) = {e}, expected 2")
    A = np.random.default_rng(1).standard_normal((40, 3))
    e = energy_distance(A, ReferenceSample(A))
    if abs(e) > 1e-12:
        raise AssertionError(f"E(A, A) = {e}")
    return 0.0


def check_stein_mean(seed: int = 0, draws: int = 20000) -> float:
    """z-statistic of the mean of ``k0(z, y)`` over exact draws (should be O(1))."""
    rng = np.random.default_rng(seed)
    target = standard_normal(2)
    sk = SteinKernel(PreconditionedIMQ(1.0, dim=2))
    Z = target.sample(rng, draws)
    _, S = target.log_p_and_grad_batch(Z, count=False)
    y = np.array([0.3, -0.7])
    _, sy = target.log_p_and_grad(y, count=False)
    vals = sk.matrix(Z, S, y[None, :], sy[None, :])[:, 0]
    z = abs(vals.mean()) / (vals.std(ddof=1) / np.sqrt(draws))
    if z > 5:
        raise AssertionError(f"Stein identity z-score {z:.2f}")
    return float(z)


CHECKS = {
    "kernel derivatives": check_kernel_derivatives,
    "incremental bookkeeping": check_bookkeeping,
    "energy distance": check_energy,
    "Stein identity": check_stein_mean,
}


def run_all(out=print) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        try:
            value = fn()
            out(f"PASS  {name}  ({value:.3g})")
        except Exception as exc:  # report every failure, keep going
            ok = False
            out(f"FAIL  {name}: {exc}")
    return ok
