"""Experiment presets, configuration, seeded runs and their CSV/JSON artifacts."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import importlib
import json
import logging
import math
import os
import time
import zlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .baselines import AdaptiveSearchConfig, SvgdConfig, med_run, mcmc_thin_run, sp_run, svgd_run
from .kernels import PreconditionedIMQ, SteinKernel
from .ksd import QuantisationState, write_points_csv
from .mcmc import MarkovKernelConfig, adapt_step_size, run_chain
from .metrics import ReferenceSample, energy_trace, estimate_preconditioner
from .sp_mcmc import Removal, SpMcmcConfig, spmcmc_run
from .targets import (
    IGARCHTarget,
    TargetModel,
    igarch_synthesize,
    read_returns_csv,
    toy_gauss,
    two_mode_mixture,
)
from .trace import ExperimentTrace

logger = logging.getLogger(__name__)

ENV_OUTPUT_ROOT = "SPMCMC_OUTPUT_ROOT"
PRESETS = ("gaussian-mixture", "igarch-synthetic", "igarch-csv", "toy-gauss", "custom")
METHODS = ("spmcmc", "sp", "med", "svgd", "mcmc")
LAM_MODES = ("identity", "scaled-identity", "estimated")
SOURCES = ("mala", "rwm", "iid")
STREAMS = ("chain", "search", "init", "precond", "reference", "data")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(ValueError):
    """Invalid experiment configuration (exit status 2)."""


def output_root() -> Path:
    return Path(os.environ.get(ENV_OUTPUT_ROOT, "runs"))


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for the named sub-stream of ``seed``; streams are independent."""
    if name not in STREAMS:
        raise ValueError(f"unknown stream {name!r}")
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()),)))


@dataclass
class ExperimentConfig:
    preset: str = "gaussian-mixture"
    method: str = "spmcmc"
    n: int = 1000
    m: int = 5
    crit: str = "infl"
    removal: str = "none"
    source: str = "mala"
    beta: float = -0.5
    lam_mode: str = "estimated"
    lam_scale: float = 1.0
    seed: int = 1
    output: str = ""
    # preset parameters
    mixture_sigma2: float = 0.5
    toy_sigma: float = 0.01
    igarch_theta1: float = 0.01
    igarch_theta2: float = 0.2
    igarch_T: int = 2000
    data_seed: int = 0
    data_path: str = ""
    custom_target: str = ""
    # setup chain used for the preconditioner, step size and search distribution
    warmup: int = 3000
    precond_chain: int = 20000
    precond_rounds: int = 2
    # baselines
    n_test: int = 0  # 0 means "same as m"
    svgd_iterations: int = 500
    svgd_step: float = 1e-3
    svgd_momentum: float = 0.9
    # evaluation
    reference: str = ""
    reference_size: int = 100000
    reference_seed: int = 0
    energy_every: int = 25
    record_timing: bool = False

    def validate(self) -> "ExperimentConfig":
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.lam_mode not in LAM_MODES:
            raise ConfigError(f"unknown lam_mode {self.lam_mode!r}; choose from {', '.join(LAM_MODES)}")
        if self.source not in SOURCES:
            raise ConfigError(f"unknown source {self.source!r}; choose from {', '.join(SOURCES)}")
        if self.source == "iid" and self.method not in ("spmcmc",):
            raise ConfigError("source=iid only applies to spmcmc")
        if self.crit not in ("last", "rand", "infl"):
            raise ConfigError(f"unknown criterion {self.crit!r}")
        try:
            Removal.parse(self.removal)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        for name in ("n", "m", "warmup", "precond_chain", "precond_rounds", "reference_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.warmup < 100:
            raise ConfigError("warmup must be at least 100")
        if self.n_test < 0 or self.energy_every < 0 or self.svgd_iterations < 0:
            raise ConfigError("n_test, energy_every and svgd_iterations must be non-negative")
        if not -1.0 < self.beta < 0.0:
            raise ConfigError("beta must lie in (-1, 0)")
        if not self.lam_scale > 0:
            raise ConfigError("lam_scale must be positive")
        if self.svgd_step <= 0 or not 0.0 <= self.svgd_momentum < 1.0:
            raise ConfigError("svgd_step must be positive and svgd_momentum in [0, 1)")
        if self.preset == "igarch-csv":
            if not self.data_path:
                raise ConfigError("preset igarch-csv needs data_path")
            if not Path(self.data_path).is_file():
                raise ConfigError(f"data file {self.data_path} does not exist")
        if self.preset == "igarch-synthetic":
            if not (self.igarch_theta1 > 0 and 0 < self.igarch_theta2 < 1 and self.igarch_T >= 2):
                raise ConfigError("igarch-synthetic needs theta1 > 0, 0 < theta2 < 1 and T >= 2")
        if self.preset == "custom" and ":" not in self.custom_target:
            raise ConfigError("preset custom needs custom_target of the form module:attribute")
        if self.reference and not Path(self.reference).is_file():
            raise ConfigError(f"reference file {self.reference} does not exist")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        defaults = cls()
        kwargs = {}
        for key, value in d.items():
            name = key.replace("-", "_")
            if name not in known:
                raise ConfigError(f"unknown configuration key {key!r}")
            kwargs[name] = _coerce(name, value, getattr(defaults, name))
        return cls(**kwargs)

    def resolved_output(self) -> Path:
        if self.output:
            return Path(self.output)
        return output_root() / f"{self.preset}-{self.method}-seed{self.seed}"


def _coerce(name, value, default):
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                low = value.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {name}: {value!r}") from None


def read_config_file(path) -> dict:
    """Flat key/value pairs from an INI-style file; section names are ignored."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser()
    try:
        # keys before the first section header land in a synthetic leading section
        parser.read_string("[\x00top]\n" + path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    out = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            out[key] = value.strip().strip('"').strip("'")
    return out


# -- targets -------------------------------------------------------------------


def build_target(cfg: ExperimentConfig) -> tuple[TargetModel, dict]:
    """Target for the preset and a dictionary identifying it (used by ``compare``)."""
    p = cfg.preset
    if p == "gaussian-mixture":
        return two_mode_mixture(cfg.mixture_sigma2), {"preset": p, "sigma2": cfg.mixture_sigma2}
    if p == "toy-gauss":
        return toy_gauss(cfg.toy_sigma), {"preset": p, "sigma": cfg.toy_sigma}
    if p == "igarch-synthetic":
        theta = (cfg.igarch_theta1, cfg.igarch_theta2)
        y = igarch_synthesize(theta, cfg.igarch_T, substream(cfg.data_seed, "data"))
        ident = {"preset": p, "theta_true": list(theta), "T": cfg.igarch_T, "data_seed": cfg.data_seed,
                 "provenance": "synthetic"}
        return IGARCHTarget(y), ident
    if p == "igarch-csv":
        y = read_returns_csv(cfg.data_path)
        digest = hashlib.sha1(np.ascontiguousarray(y).tobytes()).hexdigest()
        return IGARCHTarget(y), {"preset": p, "T": len(y), "sha1": digest}
    if p == "custom":
        module, _, attr = cfg.custom_target.partition(":")
        try:
            obj = getattr(importlib.import_module(module), attr)
        except (ImportError, AttributeError) as exc:
            raise ConfigError(f"cannot load custom target {cfg.custom_target!r}: {exc}") from exc
        target = obj if isinstance(obj, TargetModel) else obj()
        if not isinstance(target, TargetModel):
            raise ConfigError(f"{cfg.custom_target} did not produce a TargetModel")
        return target, {"preset": p, "target": cfg.custom_target}
    raise ConfigError(f"unknown preset {p!r}")


# -- setup ---------------------------------------------------------------------


@dataclass
class Setup:
    """Quantities fixed before any method runs (shared across methods for a seed)."""

    chain_cfg: MarkovKernelConfig
    covariance: np.ndarray
    mean: np.ndarray
    kernel: SteinKernel
    x1: np.ndarray
    setup_n_eval: int


def prepare(cfg: ExperimentConfig, target: TargetModel) -> Setup:
    """Run the setup chain: adapt the step size, estimate the covariance and mean,
    re-adapt ``h`` with the estimated covariance as proposal matrix, and build the
    Stein kernel. Setup evaluations are reported separately from the method's budget."""
    rng = substream(cfg.seed, "precond")
    kind = "rwm" if cfg.source == "rwm" else "mala"
    cov, first, state, mean = estimate_preconditioner(
        target, MarkovKernelConfig(kind), cfg.warmup, cfg.precond_chain, rng,
        return_details=True, rounds=cfg.precond_rounds,
    )
    chain_cfg = adapt_step_size(MarkovKernelConfig(kind, first.h, cov), target, state, cfg.warmup, rng)
    setup_n_eval = target.counter.reset()
    if cfg.lam_mode == "identity":
        lam = 1.0
    elif cfg.lam_mode == "scaled-identity":
        lam = cfg.lam_scale
    else:
        lam = cov
    kernel = SteinKernel(PreconditionedIMQ(lam, cfg.beta, dim=target.dim))
    return Setup(chain_cfg, cov, mean, kernel, np.asarray(target.initial_point(), dtype=float), setup_n_eval)


# -- reference samples -----------------------------------------------------------


def build_reference(target: TargetModel, size: int, seed: int, setup: Optional[Setup] = None, thin: int = 10):
    """Exact draws when the target has a sampler, otherwise a thinned long chain."""
    rng = substream(seed, "reference")
    if target.has_exact_sampler:
        pts = target.sample(rng, size)
        prov = f"exact sampler, N={size}, seed={seed}"
    else:
        if setup is None:
            raise ValueError("a chain-based reference needs the setup chain configuration")
        path = run_chain(setup.chain_cfg, target, setup.x1, size * thin, rng)
        pts = np.array([s.x for s in path[thin - 1 :: thin]])
        prov = f"{setup.chain_cfg.kind} chain, h={setup.chain_cfg.h:.6g}, {size * thin} steps thinned by {thin}, seed={seed}"
    return ReferenceSample(pts, prov, meta={"seed": seed})


def _reference_for(cfg: ExperimentConfig, target, ident) -> Optional[ReferenceSample]:
    if cfg.reference:
        ref = ReferenceSample.load(cfg.reference)
        if ref.dim != target.dim:
            raise ConfigError(f"reference {cfg.reference} is {ref.dim}-dimensional, target is {target.dim}")
        return ref
    if not target.has_exact_sampler:
        return None
    key = hashlib.sha1(json.dumps([ident, cfg.reference_size, cfg.reference_seed], sort_keys=True).encode()).hexdigest()[:16]
    path = output_root() / "references" / f"{key}.csv"
    if path.is_file():
        return ReferenceSample.load(path)
    ref = build_reference(target, cfg.reference_size, cfg.reference_seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    ref.save(path)
    return ref


# -- methods -------------------------------------------------------------------


def _search_config(cfg: ExperimentConfig, setup: Setup) -> AdaptiveSearchConfig:
    return AdaptiveSearchConfig(cfg.n_test or cfg.m, setup.mean, setup.covariance)


def _rejection_init(target: TargetModel, mean, cov):
    L = np.linalg.cholesky(cov)

    def draw(rng, n):
        out = np.empty((0, target.dim))
        for _ in range(1000):
            X = mean + rng.standard_normal((n, target.dim)) @ L.T
            out = np.vstack([out, X[target._in_support_rows(X)]])
            if len(out) >= n:
                return out[:n]
        raise RuntimeError("could not draw SVGD initial particles inside the support")

    return draw


def run_method(cfg: ExperimentConfig, target: TargetModel, setup: Setup):
    """Run the configured method; returns ``(points, trace)`` with KSD filled in."""
    kernel = setup.kernel
    if cfg.method == "spmcmc":
        source = "iid" if cfg.source == "iid" else setup.chain_cfg
        sp_cfg = SpMcmcConfig(cfg.n, setup.x1, source, cfg.m, cfg.crit, Removal.parse(cfg.removal),
                              record_timing=cfg.record_timing)
        state, trace = spmcmc_run(sp_cfg, target, kernel, substream(cfg.seed, "chain"))
        return state.points.copy(), trace
    if cfg.method == "mcmc":
        return mcmc_thin_run(setup.chain_cfg, target, setup.x1, cfg.n, cfg.m, substream(cfg.seed, "chain"),
                             kernel=kernel, record_timing=cfg.record_timing)
    if cfg.method == "sp":
        state, trace = sp_run(_search_config(cfg, setup), target, kernel, cfg.n, substream(cfg.seed, "search"),
                              record_timing=cfg.record_timing)
        return state.points.copy(), trace
    if cfg.method == "med":
        pts, _, trace = med_run(_search_config(cfg, setup), target, cfg.n, substream(cfg.seed, "search"),
                                record_timing=cfg.record_timing)
        # assessment only: these scores are not charged to the method
        _, S = target.log_p_and_grad_batch(pts, count=False)
        qs = QuantisationState(kernel, capacity=len(pts))
        for rec, x, s in zip(trace.records, pts, S):
            qs.commit_add(x, s)
            rec.ksd = qs.ksd()
        return pts, trace
    if cfg.method == "svgd":
        svgd_cfg = SvgdConfig(cfg.n, cfg.svgd_iterations, cfg.svgd_step, cfg.svgd_momentum,
                              init_sampler=_rejection_init(target, setup.mean, setup.covariance))
        init = svgd_cfg.init_sampler(substream(cfg.seed, "init"), cfg.n)
        return svgd_run(svgd_cfg, target, kernel, substream(cfg.seed, "chain"), init=init,
                        record_timing=cfg.record_timing)
    raise ConfigError(f"unknown method {cfg.method!r}")


# -- orchestration -------------------------------------------------------------


def _final_ksd(cfg, trace: ExperimentTrace, points, target, kernel) -> float:
    if cfg.method == "svgd":
        _, S = target.log_p_and_grad_batch(points, count=False)
        return QuantisationState.from_points(kernel, points, S).ksd()
    return float(trace.records[-1].ksd)


def write_energy_csv(path, rows):
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record", "n_eval", "n_points", "energy"])
        for r in rows:
            w.writerow([r[0], r[1], r[2], repr(float(r[3]))])


def read_energy_csv(path) -> list[tuple]:
    with open(Path(path), newline="") as fh:
        return [(int(r["record"]), int(r["n_eval"]), int(r["n_points"]), float(r["energy"])) for r in csv.DictReader(fh)]


def run_experiment(cfg: ExperimentConfig) -> int:
    """Run one experiment and write its artifacts; returns the exit status.

    Artifacts: ``trace.csv``, ``points.csv``, ``summary.json`` and, when a reference
    sample is available, ``energy.csv``. A failed run still writes ``summary.json``
    with ``status = "failed"``.
    """
    try:
        cfg.validate()
        target, ident = build_target(cfg)
    except ConfigError as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    out = cfg.resolved_output()
    out.mkdir(parents=True, exist_ok=True)
    summary = {"status": "running", "method": cfg.method, "seed": cfg.seed, "target": ident, "config": cfg.to_dict()}
    written = []
    t_start = time.perf_counter()
    try:
        setup = prepare(cfg, target)
        summary["setup_n_eval"] = setup.setup_n_eval
        summary["chain"] = setup.chain_cfg.to_dict()
        summary["kernel"] = {"beta": cfg.beta, "lam": np.atleast_1d(setup.kernel.base.lam).tolist()}
        ref = _reference_for(cfg, target, ident)
        t_method = time.perf_counter()
        points, trace = run_method(cfg, target, setup)
        summary["method_time_s"] = time.perf_counter() - t_method
        summary["n_eval"] = int(target.counter.n_eval)
        summary["n_points"] = int(len(points))
        summary["retries"] = list(trace.retries)
        trace.to_csv(out / "trace.csv")
        written.append("trace.csv")
        write_points_csv(out / "points.csv", points)
        written.append("points.csv")
        summary["final_ksd"] = _final_ksd(cfg, trace, points, target, setup.kernel)
        if ref is not None:
            rows = energy_trace(trace, ref, cfg.energy_every)
            write_energy_csv(out / "energy.csv", rows)
            written.append("energy.csv")
            summary["final_energy"] = float(rows[-1][3])
            summary["reference"] = {"N": len(ref.points), "provenance": ref.provenance}
        else:
            summary["final_energy"] = None
        summary["status"] = "ok"
    except ConfigError as exc:
        summary.update(status="failed", error=str(exc), artifacts=written)
        _write_summary(out, summary, t_start)
        logger.error("%s", exc)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failure: keep what we have and flag it
        logger.exception("run failed")
        summary.update(status="failed", error=f"{type(exc).__name__}: {exc}", partial=True, artifacts=written)
        _write_summary(out, summary, t_start)
        return EXIT_RUNTIME
    summary["artifacts"] = written
    _write_summary(out, summary, t_start)
    return EXIT_OK


def _write_summary(out: Path, summary: dict, t_start: float):
    summary["wall_time_s"] = time.perf_counter() - t_start
    (out / "summary.json").write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def load_summary(run_dir) -> dict:
    path = Path(run_dir) / "summary.json"
    if not path.is_file():
        raise ConfigError(f"{run_dir} has no summary.json")
    return json.loads(path.read_text())


def config_from_summary(run_dir) -> ExperimentConfig:
    return ExperimentConfig.from_dict(load_summary(run_dir)["config"])


# -- comparison ----------------------------------------------------------------


def _series(run_dir: Path, metric: str) -> dict[int, float]:
    from .trace import read_trace_csv

    if metric == "ksd":
        rows = [(r["n_eval"], r["ksd"]) for r in read_trace_csv(run_dir / "trace.csv")]
    elif metric == "energy":
        path = run_dir / "energy.csv"
        if not path.is_file():
            raise ConfigError(f"{run_dir} has no energy.csv")
        rows = [(r[1], r[3]) for r in read_energy_csv(path)]
    else:
        raise ConfigError(f"unknown metric {metric!r}; use ksd or energy")
    series = {}
    for n_eval, value in rows:
        series[n_eval] = value  # last record at a given cost wins
    return series


def compare(run_dirs, metric: str = "ksd", out=None) -> tuple[list[str], list[list]]:
    """Align ``metric`` against ``n_eval`` across completed runs.

    Returns ``(header, rows)``; rows cover the union of the runs' ``n_eval``
    checkpoints, with ``None`` where a run has no value. Refuses runs on different
    targets.
    """
    run_dirs = [Path(d) for d in run_dirs]
    if len(run_dirs) < 2:
        raise ConfigError("compare needs at least two runs")
    summaries = [load_summary(d) for d in run_dirs]
    for d, s in zip(run_dirs, summaries):
        if s.get("status") != "ok":
            raise ConfigError(f"{d} did not complete")
    ident = summaries[0]["target"]
    for d, s in zip(run_dirs[1:], summaries[1:]):
        if s["target"] != ident:
            raise ConfigError(f"{d} was run on a different target ({s['target']} vs {ident})")
    labels = []
    for d, s in zip(run_dirs, summaries):
        label = f"{s['method']}:{d.name}"
        while label in labels:
            label += "'"
        labels.append(label)
    series = [_series(d, metric) for d in run_dirs]
    checkpoints = sorted(set().union(*[s.keys() for s in series]))
    rows = [[c] + [s.get(c) for s in series] for c in checkpoints]
    header = ["n_eval"] + labels
    if out is not None:
        with open(Path(out), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([r[0]] + ["" if v is None else repr(float(v)) for v in r[1:]])
    return header, rows
