"""Method-neutral evaluation: energy distance, preconditioner estimation, jump statistics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from .ksd import read_points_csv, write_points_csv
from .mcmc import MarkovKernelConfig, adapt_step_size, run_chain
from .targets import TargetModel
from .trace import ExperimentTrace

_BLOCK = 1 << 22  # distance entries per block


def mean_pairwise_distance(A, B) -> float:
    """``(|A| |B|)^-1 sum_{a, b} |a - b|``, blocked over rows of ``A``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    step = max(1, _BLOCK // max(len(B), 1))
    total = 0.0
    for i in range(0, len(A), step):
        total += cdist(A[i : i + step], B).sum()
    return total / (len(A) * len(B))


def self_mean_distance(A) -> float:
    """``mean_pairwise_distance(A, A)`` using only the upper triangle."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = len(A)
    step = max(1, _BLOCK // max(n, 1))
    total = 0.0
    for i in range(0, n, step):
        D = cdist(A[i : i + step], A[i:])
        # inside the diagonal block keep j > i only
        blk = D[:, : min(step, n - i)]
        total += 2.0 * D[:, blk.shape[1] :].sum() + np.triu(blk, 1).sum() * 2.0
    return total / (n * n)


@dataclass
class ReferenceSample:
    """Large sample standing in for the target, with its cached self-energy term."""

    points: np.ndarray
    provenance: str = ""
    self_energy: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if len(self.points) < 2:
            raise ValueError("a reference sample needs at least two points")
        if self.self_energy is None:
            self.self_energy = self_mean_distance(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def save(self, path):
        """Write ``<path>`` (CSV of points) and ``<path>.json`` (metadata)."""
        path = Path(path)
        write_points_csv(path, self.points)
        meta = dict(self.meta)
        meta.update(
            provenance=self.provenance,
            N=len(self.points),
            d=self.dim,
            self_energy=self.self_energy,
        )
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path) -> "ReferenceSample":
        path = Path(path)
        pts = read_points_csv(path)
        side = path.with_suffix(path.suffix + ".json")
        meta = json.loads(side.read_text()) if side.exists() else {}
        if meta and (meta.get("N") != len(pts) or meta.get("d") != pts.shape[1]):
            raise ValueError(f"{side} does not describe {path}")
        extra = {k: v for k, v in meta.items() if k not in ("provenance", "N", "d", "self_energy")}
        return cls(pts, meta.get("provenance", ""), meta.get("self_energy"), extra)


def energy_distance(sample, ref: ReferenceSample) -> float:
    """Squared energy distance (V-statistic) between a point set and a reference sample.

    ``2 E|x - z| - E|x - x'| - E|z - z'|`` with all expectations taken under the
    uniform empirical measures.
    """
    X = np.atleast_2d(np.asarray(sample, dtype=float))
    if X.size == 0 or len(X) == 0:
        raise ValueError("empty sample")
    if X.shape[1] != ref.dim:
        raise ValueError(f"sample is {X.shape[1]}-dimensional, reference is {ref.dim}-dimensional")
    cross = mean_pairwise_distance(X, ref.points)
    within = mean_pairwise_distance(X, X)
    return float(2.0 * cross - within - ref.self_energy)


def energy_trace(trace: ExperimentTrace, ref: ReferenceSample, every: int = 25) -> list[tuple]:
    """Energy distance along a trace: rows ``(record, n_eval, n_points, energy)``.

    Evaluated every ``every`` records (``0`` means the final set only) and always at
    the last record. Add/remove traces are scored incrementally, costing one pass over
    the reference per added point; traces that store full snapshots are scored
    directly.
    """
    recs = trace.records
    if not recs:
        raise ValueError("empty trace")
    last = len(recs) - 1

    def due(pos):
        return pos == last or (every > 0 and (pos + 1) % every == 0)

    rows = []
    if trace.snapshots:
        keys = sorted(trace.snapshots)
        for i, pos in enumerate(keys):
            if i == len(keys) - 1 or (every > 0 and (i + 1) % every == 0):
                X = trace.snapshots[pos]
                rows.append((pos, recs[pos].n_eval, len(X), energy_distance(X, ref)))
        return rows
    pts: list[np.ndarray] = []
    to_ref: list[float] = []
    cross = within = 0.0
    for pos, rec in enumerate(recs):
        if rec.action == "add":
            x = np.asarray(rec.point, dtype=float)
            c = mean_pairwise_distance(x[None, :], ref.points)
            w = float(np.linalg.norm(np.array(pts) - x, axis=1).sum()) if pts else 0.0
            i = len(pts) if rec.index is None else rec.index
            pts.insert(i, x)
            to_ref.insert(i, c)
            cross += c
            within += 2.0 * w
        elif rec.action == "remove":
            x = pts.pop(rec.index)
            cross -= to_ref.pop(rec.index)
            if pts:
                within -= 2.0 * float(np.linalg.norm(np.array(pts) - x, axis=1).sum())
        if due(pos):
            n = len(pts)
            rows.append((pos, rec.n_eval, n, float(2.0 * cross / n - within / n**2 - ref.self_energy)))
    return rows


def estimate_preconditioner(
    target: TargetModel,
    kernel_cfg: MarkovKernelConfig,
    warmup: int,
    chain_len: int,
    rng: np.random.Generator,
    init=None,
    return_details: bool = False,
    rounds: int = 1,
):
    """Sample covariance of a warmed-up chain, with ``1e-8 * trace / d`` diagonal jitter.

    The step size is adapted during warm-up. With ``rounds > 1`` the procedure is
    repeated from the last state using the previous estimate as proposal covariance
    (and ``h`` restarted at 1), which helps when the target's scale is far from unit.
    With ``return_details`` the result is ``(cov, adapted_cfg, last_state, mean)``.
    """
    d = target.dim
    if chain_len < d + 2:
        raise ValueError(f"chain_len must be at least d + 2 = {d + 2}")
    if rounds < 1:
        raise ValueError("rounds must be at least 1")
    state = target.initial_point() if init is None else init
    cfg = kernel_cfg
    for r in range(rounds):
        if r:
            cfg = MarkovKernelConfig(cfg.kind, 1.0, cov, kernel_cfg.target_acceptance)
        cfg, state = adapt_step_size(cfg, target, state, warmup, rng, return_state=True)
        path = run_chain(cfg, target, state, chain_len, rng)
        state = path[-1]
        X = np.array([s.x for s in path])
        cov = np.atleast_2d(np.cov(X, rowvar=False))
        cov = 0.5 * (cov + cov.T)
        tr = np.trace(cov)
        if not (np.isfinite(tr) and tr > 0):
            raise ValueError(
                "chain did not move; cannot estimate a covariance (a longer warmup lets the step size adapt further)"
            )
        cov = cov + 1e-8 * tr / d * np.eye(d)
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("estimated covariance is not positive definite") from exc
    if return_details:
        return cov, cfg, state, X.mean(axis=0)
    return cov


def jump_statistics(trace: ExperimentTrace, quantiles=(0.05, 0.25, 0.5, 0.75, 0.95)) -> dict:
    """Quantiles of squared jump distances between consecutive added points and of the
    squared chain displacements ``|y_m - y_1|^2``."""
    adds = trace.adds()
    if len(adds) < 2:
        raise ValueError("need at least two added points")
    jumps = np.array([r.jump_sq for r in adds[1:]], dtype=float)
    disp = np.array([r.chain_disp_sq for r in adds[1:]], dtype=float)
    disp = disp[np.isfinite(disp)]
    out = {"quantiles": list(quantiles)}
    out["jump_sq"] = np.quantile(jumps, quantiles).tolist()
    out["chain_disp_sq"] = np.quantile(disp, quantiles).tolist() if len(disp) else [float("nan")] * len(quantiles)
    out["jump_sq_mean"] = float(jumps.mean())
    out["chain_disp_sq_mean"] = float(disp.mean()) if len(disp) else float("nan")
    return out


def mode_fractions(points, modes) -> np.ndarray:
    """Fraction of points whose nearest mode is each row of ``modes``."""
    points = np.atleast_2d(points)
    nearest = np.argmin(cdist(points, np.atleast_2d(modes)), axis=1)
    return np.bincount(nearest, minlength=len(modes)) / len(points)
