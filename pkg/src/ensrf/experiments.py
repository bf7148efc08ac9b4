"""Configuration-driven synthetic experiments and the scaling benchmark.

Every experiment derives all of its randomness from the master seed
through fixed (seed, repetition, label) streams, so reruns with the same
config are byte-identical and every scheme inside a repetition consumes
the identical prior ensemble and observation set.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np
import psutil

from . import filters, kernels, metrics
from .filters import Ensemble, ObservationSet, SolverConfig
from .tiled import TiledMatrix, _pmap

SCHEMES = ("kf-oracle", "enkf", "seq", "aao", "aao-true-cov")

# substream labels for seed derivation; fixed forever for reproducibility
_TRUTH, _ENSEMBLE, _LOCATIONS, _NOISE, _PERMUTATION, _PERTURB = range(6)


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


class ResourceFailure(RuntimeError):
    """Out-of-memory or similar resource exhaustion (CLI exit code 4)."""


@dataclass(frozen=True)
class ExperimentConfig:
    grid_side: int = 40
    ensemble_size: int = 30
    obs_count: int = 500
    obs_noise: float = 0.01
    kernel_variance: float = 1.0
    kernel_length: float = 0.1
    localization_length: float | None = 0.2
    schemes: tuple = ("seq", "aao")
    repetitions: int = 20
    permutations: int = 20
    noise_sweep: tuple = (0.01, 0.05, 0.2, 1.0)
    solver: SolverConfig = field(default_factory=SolverConfig)
    seed: int = 0
    tile_size: int = 1024
    output_dir: str = "out"
    benchmark_dims: tuple = (1600, 6400)

    def __post_init__(self):
        for name in ("grid_side", "ensemble_size", "obs_count", "repetitions",
                     "permutations", "tile_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.obs_noise <= 0:
            raise ConfigError("obs_noise must be > 0 (E must be positive definite)")
        if not self.schemes:
            raise ConfigError("at least one scheme must be configured")
        unknown = set(self.schemes) - set(SCHEMES)
        if unknown:
            raise ConfigError(f"unknown schemes: {sorted(unknown)}")
        if self.kernel_variance <= 0:
            raise ConfigError("kernel_variance must be > 0")
        if self.kernel_length <= 0:
            raise ConfigError("kernel_length must be > 0")
        if self.localization_length is not None and self.localization_length <= 0:
            raise ConfigError("localization_length must be > 0 or null")
        if any(s <= 0 for s in self.noise_sweep):
            raise ConfigError("noise_sweep values must be > 0")
        if any(d < 1 for d in self.benchmark_dims):
            raise ConfigError("benchmark_dims must be positive")

    @property
    def state_dim(self) -> int:
        return self.grid_side ** 2

    @property
    def kernel(self) -> kernels.KernelSpec:
        return kernels.KernelSpec(self.kernel_variance, self.kernel_length)

    @property
    def localization(self) -> kernels.KernelSpec | None:
        if self.localization_length is None:
            return None
        return kernels.KernelSpec(1.0, self.localization_length)


_CONFIG_KEYS = {
    "grid_side", "ensemble_size", "obs_count", "obs_noise", "kernel",
    "localization_length", "schemes", "repetitions", "permutations",
    "noise_sweep", "solver", "seed", "tile_size", "output_dir",
    "benchmark_dims",
}
_KERNEL_KEYS = {"variance", "length"}
_SOLVER_KEYS = {"mode", "rank", "oversample", "power_iters", "exact_threshold"}


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Build a config from a JSON document; unknown keys are rejected."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key in ("grid_side", "ensemble_size", "obs_count", "obs_noise",
                "localization_length", "repetitions", "permutations",
                "seed", "tile_size", "output_dir"):
        if key in doc:
            kwargs[key] = doc[key]
    if "schemes" in doc:
        kwargs["schemes"] = tuple(doc["schemes"])
    if "noise_sweep" in doc:
        kwargs["noise_sweep"] = tuple(doc["noise_sweep"])
    if "benchmark_dims" in doc:
        kwargs["benchmark_dims"] = tuple(doc["benchmark_dims"])
    if "kernel" in doc:
        k = doc["kernel"]
        bad = set(k) - _KERNEL_KEYS
        if bad:
            raise ConfigError(f"unknown kernel keys: {sorted(bad)}")
        if "variance" in k:
            kwargs["kernel_variance"] = k["variance"]
        if "length" in k:
            kwargs["kernel_length"] = k["length"]
    if "solver" in doc:
        s = dict(doc["solver"])
        bad = set(s) - _SOLVER_KEYS
        if bad:
            raise ConfigError(f"unknown solver keys: {sorted(bad)}")
        try:
            kwargs["solver"] = SolverConfig(**s)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(doc)


def resolve_solver(cfg: ExperimentConfig, n: int) -> SolverConfig:
    # default SVD cutoff rank: min(problem size, 2000)
    return replace(cfg.solver, rank=min(cfg.solver.rank, max(n, 1)))


def _rng(master: int, rep: int, label: int) -> np.random.Generator:
    return np.random.default_rng([master, rep, label])


@dataclass
class Instance:
    truth: np.ndarray
    prior: Ensemble
    obs: ObservationSet
    input_hash: str


def make_instance(cfg: ExperimentConfig, rep: int,
                  obs_noise: float | None = None,
                  obs_count: int | None = None,
                  grid: kernels.GridGeometry | None = None) -> Instance:
    """Sample ground truth, prior ensemble and noisy observations for one rep."""
    grid = grid or kernels.GridGeometry.unit_square(cfg.grid_side)
    sigma = cfg.obs_noise if obs_noise is None else obs_noise
    n = cfg.obs_count if obs_count is None else obs_count
    if n > grid.dim:
        raise ConfigError(f"obs_count {n} exceeds state dimension {grid.dim}")
    truth = kernels.sample_gp(grid, cfg.kernel, 1, [cfg.seed, rep, _TRUTH])[0]
    members = kernels.sample_gp(grid, cfg.kernel, cfg.ensemble_size,
                                [cfg.seed, rep, _ENSEMBLE])
    idx = _rng(cfg.seed, rep, _LOCATIONS).choice(grid.dim, size=n, replace=False)
    idx = np.sort(idx)
    eps = _rng(cfg.seed, rep, _NOISE).standard_normal(n)
    y = truth[idx] + sigma * eps
    obs = ObservationSet(idx, y, np.full(n, sigma ** 2))
    digest = hashlib.sha256()
    for arr in (members, idx, y, obs.noise_vars):
        digest.update(np.ascontiguousarray(arr).tobytes())
    return Instance(truth, Ensemble(members), obs, digest.hexdigest()[:16])


@dataclass
class SchemeContext:
    """Shared per-config state: grid, tapers and covariance controls."""

    cfg: ExperimentConfig
    grid: kernels.GridGeometry
    loc_tiled: TiledMatrix | None = None
    loc_columns: kernels.LocalizationColumns | None = None
    gram_tiled: TiledMatrix | None = None

    @classmethod
    def build(cls, cfg: ExperimentConfig) -> "SchemeContext":
        grid = kernels.GridGeometry.unit_square(cfg.grid_side)
        ctx = cls(cfg, grid)
        loc = cfg.localization
        if loc is not None:
            ctx.loc_columns = kernels.LocalizationColumns(grid, loc)
            if {"aao", "enkf"} & set(cfg.schemes):
                ctx.loc_tiled = kernels.build_localization(grid, loc, cfg.tile_size)
        if {"aao-true-cov", "kf-oracle"} & set(cfg.schemes):
            ctx.gram_tiled = TiledMatrix.from_dense(
                kernels.gram_matrix(grid, cfg.kernel), cfg.tile_size)
        return ctx


def run_scheme(scheme: str, inst: Instance, ctx: SchemeContext,
               rep: int, order=None):
    """Run one scheme on one instance; returns (analysis mean, member array)."""
    cfg = ctx.cfg
    solver = resolve_solver(cfg, inst.obs.count)
    if scheme == "aao":
        out = filters.ensrf_aao_update(inst.prior, inst.obs, loc=ctx.loc_tiled,
                                       solver=solver, tile_size=cfg.tile_size)
    elif scheme == "aao-true-cov":
        out = filters.ensrf_aao_update(inst.prior, inst.obs, solver=solver,
                                       cov=ctx.gram_tiled, tile_size=cfg.tile_size)
    elif scheme == "seq":
        out = filters.ensrf_sequential_update(inst.prior, inst.obs,
                                              taper=ctx.loc_columns, order=order)
    elif scheme == "enkf":
        out = filters.enkf_perturbed_update(inst.prior, inst.obs,
                                            loc=ctx.loc_tiled,
                                            seed=[cfg.seed, rep, _PERTURB],
                                            tile_size=cfg.tile_size)
    elif scheme == "kf-oracle":
        belief = filters.GaussianBelief(np.zeros(ctx.grid.dim),
                                        ctx.gram_tiled.to_dense())
        post = filters.kf_update(belief, inst.obs)
        return post.mean, post.mean[None, :]
    else:
        raise ConfigError(f"unknown scheme {scheme!r}")
    return out.mean, out.members


def _score_row(experiment, scheme, rep, perm, sigma, inst, ctx,
               mean, members) -> metrics.ScoreRow:
    prior_mean = inst.prior.mean
    return metrics.ScoreRow(
        experiment=experiment, scheme=scheme, repetition=rep, permutation=perm,
        sigma_eps=sigma, state_dim=ctx.grid.dim,
        rmse=metrics.rmse(mean, inst.truth),
        rmse_skill=metrics.rmse_skill_score([mean], [inst.truth], [prior_mean]),
        energy_score=metrics.energy_score(members, inst.truth),
        wall_time_s=0.0, peak_mem_bytes=0, input_hash=inst.input_hash,
    )


def run_accuracy_experiment(cfg: ExperimentConfig,
                            experiment: str = "accuracy",
                            obs_noise: float | None = None) -> metrics.ScoreReport:
    """Repeat ground-truth sampling and assimilation; score every scheme."""
    ctx = SchemeContext.build(cfg)
    sigma = cfg.obs_noise if obs_noise is None else obs_noise

    def one_rep(rep):
        inst = make_instance(cfg, rep, obs_noise=sigma, grid=ctx.grid)
        rows = []
        for scheme in cfg.schemes:
            mean, members = run_scheme(scheme, inst, ctx, rep)
            rows.append(_score_row(experiment, scheme, rep, -1, sigma,
                                   inst, ctx, mean, members))
        return rows

    report = metrics.ScoreReport()
    for rows in _pmap(one_rep, range(cfg.repetitions)):
        for row in rows:
            report.add(row)
    return report


def run_ordering_experiment(cfg: ExperimentConfig) -> metrics.ScoreReport:
    """One instance, many observation orderings; sequential vs batch control."""
    if "seq" not in cfg.schemes:
        raise ConfigError("ordering experiment requires the 'seq' scheme")
    if cfg.permutations < 2:
        raise ConfigError("ordering experiment requires permutations >= 2")
    ctx = SchemeContext.build(cfg)
    inst = make_instance(cfg, 0, grid=ctx.grid)
    perm_rng = _rng(cfg.seed, 0, _PERMUTATION)
    orders = [perm_rng.permutation(inst.obs.count) for _ in range(cfg.permutations)]

    def one_perm(k):
        rows = []
        mean, members = run_scheme("seq", inst, ctx, 0, order=orders[k])
        rows.append(_score_row("ordering", "seq", 0, k, cfg.obs_noise,
                               inst, ctx, mean, members))
        mean, members = run_scheme("aao", _permuted_instance(inst, orders[k]),
                                   ctx, 0)
        rows.append(_score_row("ordering", "aao", 0, k, cfg.obs_noise,
                               inst, ctx, mean, members))
        return rows

    report = metrics.ScoreReport()
    for rows in _pmap(one_perm, range(cfg.permutations)):
        for row in rows:
            report.add(row)
    return report


def _permuted_instance(inst: Instance, order) -> Instance:
    return Instance(inst.truth, inst.prior, inst.obs.permuted(order),
                    inst.input_hash)


def run_noise_sweep(cfg: ExperimentConfig) -> metrics.ScoreReport:
    """Accuracy experiment repeated across observation-noise levels."""
    if len(cfg.noise_sweep) < 2:
        raise ConfigError("noise sweep needs at least 2 values")
    report = metrics.ScoreReport()
    for sigma in cfg.noise_sweep:
        sub = run_accuracy_experiment(cfg, experiment="noise-sweep",
                                      obs_noise=sigma)
        report.rows.extend(sub.rows)
    return report


class PeakRssSampler:
    """Samples process RSS on a background thread; reports the maximum."""

    def __init__(self, interval: float = 0.05):
        self.interval = interval
        self.peak = 0
        self._stop = threading.Event()
        self._proc = psutil.Process()
        self._thread = threading.Thread(target=self._run, daemon=True)

    def _sample(self):
        rss = self._proc.memory_info().rss
        if rss > self.peak:
            self.peak = rss

    def _run(self):
        while not self._stop.is_set():
            self._sample()
            self._stop.wait(self.interval)

    def __enter__(self):
        self._sample()
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()
        self._sample()
        return False


def run_scaling_benchmark(cfg: ExperimentConfig) -> metrics.ScoreReport:
    """Time and memory of batch assimilation across state dimensions."""
    report = metrics.ScoreReport()
    for dim in cfg.benchmark_dims:
        side = int(round(np.sqrt(dim)))
        if side * side != dim:
            raise ConfigError(f"benchmark dimension {dim} is not a square")
        sub = replace(cfg, grid_side=side, schemes=("aao",))
        try:
            ctx = SchemeContext.build(sub)
            n = min(cfg.obs_count, sub.state_dim)
            inst = make_instance(sub, 0, obs_count=n, grid=ctx.grid)
            with PeakRssSampler() as sampler:
                start = time.perf_counter()
                mean, members = run_scheme("aao", inst, ctx, 0)
                elapsed = time.perf_counter() - start
            row = _score_row("benchmark", "aao", 0, -1, cfg.obs_noise,
                             inst, ctx, mean, members)
            row.wall_time_s = elapsed
            row.peak_mem_bytes = sampler.peak
            report.add(row)
        except MemoryError:
            report.rows.append(metrics.ScoreRow(
                experiment="benchmark", scheme="aao", repetition=0,
                permutation=-1, sigma_eps=cfg.obs_noise, state_dim=dim,
                rmse=float("nan"), rmse_skill=float("nan"),
                energy_score=float("nan"), wall_time_s=float("nan"),
                peak_mem_bytes=0, input_hash="oom"))
    return report
