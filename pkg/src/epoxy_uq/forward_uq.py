"""Forward uncertainty quantification of the curing simulation.

FOSM uses central differences with one perturbation pair per uncertain
input; Monte Carlo repeats the simulation for sampled inputs. Every run is
interpolated (monotone cubic) onto a common output grid before statistics
are taken.

Uncertain inputs are either material parameters, taken from a calibration
pipeline result, or boundary condition values (oven path temperatures,
convection coefficient, emissivity).
"""
from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import constitutive as cm
from .pipeline import PipelineResult
from .simulate import (
    PATH_TEMPS,
    Mixed,
    ScenarioConfig,
    SimulationError,
    SolverOptions,
    curing_path,
    default_domain,
    integrate_adaptive,
)
from .stats import beta_from_moments, lognormal_from_moments, mvn_sample, rng_stream

MAX_FAILURE_FRACTION = 0.05
FORWARD_BLOCKS = ("glass_transition", "kinetics", "heat_capacity", "conductivity")
MODES = ("case_i", "case_ii", "case_iii_full", "case_iii_mixed")
DEFAULT_N_MC = {"case_i": 300, "case_ii": 300, "case_iii_full": 150, "case_iii_mixed": 60}
OUTPUTS = ("theta", "c")


class ForwardUQError(RuntimeError):
    pass


# ---------------------------------------------------------------- generic engines


Outputs = dict  # {probe: {"theta": array, "c": array}}


@dataclass
class UQResult:
    grid: np.ndarray
    mean: Outputs
    std: Outputs
    method: str
    n_eval: int
    n_failed: int = 0
    runtime: float = 0.0
    input_names: tuple = ()
    sensitivities: Optional[np.ndarray] = None  # (n_inputs, n_outputs), FOSM only
    input_cov: Optional[np.ndarray] = None

    def series(self, probe: str, output: str) -> tuple[np.ndarray, np.ndarray]:
        return self.mean[probe][output], self.std[probe][output]


def _flatten(out: Outputs) -> tuple[list, np.ndarray]:
    keys = [(p, o) for p in sorted(out) for o in sorted(out[p])]
    return keys, np.concatenate([np.atleast_1d(out[p][o]) for p, o in keys])


def _unflatten(keys, flat, sizes) -> Outputs:
    out: Outputs = {}
    start = 0
    for (p, o), n in zip(keys, sizes):
        out.setdefault(p, {})[o] = flat[start : start + n]
        start += n
    return out


def fosm(
    model: Callable[[np.ndarray], Outputs],
    mean,
    cov,
    names: Sequence[str] = (),
    rel_step: float = 0.1,
    grid=None,
) -> UQResult:
    """First-order mean and standard deviation of ``model`` outputs.

    The step for input ``i`` is ``rel_step`` times its standard deviation,
    floored at ``1e-6 |mean_i|``. Inputs with zero variance are not
    perturbed.
    """
    t0 = time.perf_counter()
    mean = np.asarray(mean, dtype=float)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    names = tuple(names) or tuple(f"x{i}" for i in range(mean.size))
    base = model(mean)
    keys, f0 = _flatten(base)
    sizes = [np.atleast_1d(base[p][o]).size for p, o in keys]
    std_in = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    active = np.flatnonzero(std_in > 0)
    sens = np.zeros((mean.size, f0.size))
    n_eval = 1
    for i in active:
        h = max(rel_step * std_in[i], 1e-6 * abs(mean[i]))
        pair = []
        for sign in (1.0, -1.0):
            x = mean.copy()
            x[i] += sign * h
            try:
                pair.append(_flatten(model(x))[1])
            except (SimulationError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
                raise ForwardUQError(f"perturbed run for {names[i]!r} failed: {exc}") from exc
            n_eval += 1
        sens[i] = (pair[0] - pair[1]) / (2.0 * h)
    var = np.einsum("io,ij,jo->o", sens, cov, sens)
    std = np.sqrt(np.clip(var, 0.0, None))
    grid = np.asarray(grid) if grid is not None else None
    return UQResult(
        grid, base, _unflatten(keys, std, sizes), "FOSM", n_eval, 0, time.perf_counter() - t0, names, sens, cov
    )


def fosm_with_cov(result: UQResult, cov) -> UQResult:
    """Re-evaluate a FOSM result for a new input covariance; sensitivities stay at the mean."""
    if result.sensitivities is None:
        raise ValueError("result carries no sensitivities")
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    keys, _ = _flatten(result.mean)
    sizes = [np.atleast_1d(result.mean[p][o]).size for p, o in keys]
    var = np.einsum("io,ij,jo->o", result.sensitivities, cov, result.sensitivities)
    std = np.sqrt(np.clip(var, 0.0, None))
    return replace(result, std=_unflatten(keys, std, sizes), input_cov=cov, n_eval=0, runtime=0.0)


def monte_carlo(
    model: Callable[[np.ndarray], Outputs],
    sampler: Callable[[np.random.Generator], np.ndarray],
    n_mc: int,
    seed: int,
    names: Sequence[str] = (),
    grid=None,
) -> UQResult:
    """Sample mean and standard deviation (divisor n - 1) over ``n_mc`` runs.

    Run ``i`` draws from ``rng_stream(seed, i)``. Up to 5 % failed runs are
    dropped with a warning.
    """
    if n_mc < 2:
        raise ValueError("n_mc must be at least 2")
    t0 = time.perf_counter()
    rows, keys, sizes = [], None, None
    failed = 0
    for i in range(n_mc):
        rng = rng_stream(seed, i)
        try:
            out = model(sampler(rng))
        except (SimulationError, ValueError, FloatingPointError, np.linalg.LinAlgError):
            failed += 1
            if failed > MAX_FAILURE_FRACTION * n_mc:
                raise ForwardUQError(f"more than 5% of {n_mc} Monte Carlo runs failed")
            continue
        k, flat = _flatten(out)
        if keys is None:
            keys, sizes = k, [np.atleast_1d(out[p][o]).size for p, o in k]
        rows.append(flat)
    if failed:
        warnings.warn(f"dropped {failed} of {n_mc} Monte Carlo runs", RuntimeWarning)
    arr = np.array(rows)
    mean = arr.mean(axis=0)
    std = arr.std(axis=0, ddof=1)
    return UQResult(
        None if grid is None else np.asarray(grid),
        _unflatten(keys, mean, sizes),
        _unflatten(keys, std, sizes),
        "MC",
        len(rows),
        failed,
        time.perf_counter() - t0,
        tuple(names),
    )


# ---------------------------------------------------------------- uncertain inputs


def inflate_samples(samples, noise_covs=None, k: float = 1.0):
    """Scale deviations from the sample mean by ``sqrt(k)`` and noise covariances by ``k``."""
    if not k > 0:
        raise ValueError("k must be positive")
    x = np.asarray(samples, dtype=float)
    mean = x.mean(axis=0)
    out = mean + np.sqrt(k) * (x - mean)
    covs = None if noise_covs is None else k * np.asarray(noise_covs, dtype=float)
    return out, covs


@dataclass(frozen=True)
class InputGroup:
    """Jointly uncertain parameters of one calibration step."""

    names: tuple
    mean: np.ndarray
    cov: np.ndarray  # total covariance used by FOSM
    cov_noise: np.ndarray
    empirical: Optional[np.ndarray] = None
    empirical_noise: Optional[np.ndarray] = None

    def sample(self, rng) -> np.ndarray:
        if self.empirical is None:
            return mvn_sample(self.mean, self.cov_noise, rng)
        row = int(rng.integers(0, self.empirical.shape[0]))
        centre = self.empirical[row]
        if self.empirical_noise is None:
            return centre.copy()
        return mvn_sample(centre, self.empirical_noise[row], rng)

    def inflate(self, k: float) -> "InputGroup":
        emp, noise = (None, None)
        if self.empirical is not None:
            emp, noise = inflate_samples(self.empirical, self.empirical_noise, k)
        return replace(self, cov=k * self.cov, cov_noise=k * self.cov_noise, empirical=emp, empirical_noise=noise)


@dataclass(frozen=True)
class MaterialInput:
    """Uncertain material parameters; parameters outside the groups stay at ``base``."""

    base: cm.MaterialParams
    groups: tuple
    k: float = 1.0
    max_redraw: int = 100

    @property
    def names(self) -> tuple:
        return tuple(n for g in self.groups for n in g.names)

    @property
    def mean(self) -> np.ndarray:
        return np.concatenate([g.mean for g in self.groups])

    @property
    def cov(self) -> np.ndarray:
        n = len(self.names)
        out = np.zeros((n, n))
        i = 0
        for g in self.groups:
            m = len(g.names)
            out[i : i + m, i : i + m] = g.cov
            i += m
        return out

    def params(self, x) -> cm.MaterialParams:
        return self.base.with_values(**dict(zip(self.names, (float(v) for v in x))))

    def sample(self, rng) -> np.ndarray:
        """One joint draw; inadmissible draws are repeated."""
        for _ in range(self.max_redraw):
            x = np.concatenate([g.sample(rng) for g in self.groups])
            try:
                self.params(x)
            except ValueError:
                continue
            return x
        raise ValueError("no admissible material sample")

    def inflate(self, k: float) -> "MaterialInput":
        if not k > 0:
            raise ValueError("k must be positive")
        return replace(self, groups=tuple(g.inflate(k) for g in self.groups), k=self.k * k)


def material_input_from_pipeline(
    result: PipelineResult, base: Optional[cm.MaterialParams] = None, blocks: Sequence[str] = FORWARD_BLOCKS
) -> MaterialInput:
    """Uncertain inputs from a calibration result; shrinkage parameters are held fixed.

    Steps with an empirical sample are resampled row-wise with each row's
    noise covariance; the rest are drawn from ``N(values, C_noise)``.
    """
    base = cm.reference_params() if base is None else base
    wanted = {n for b in blocks for n in cm.BLOCK_PARAMS[b]}
    groups = []
    values = {}
    for sid in result.order:
        s = result.sets[sid]
        values.update(s.value_dict())
        if not set(s.names) <= wanted:
            if set(s.names) & wanted:
                raise ForwardUQError(f"step {sid!r} mixes forward and fixed parameters")
            continue
        emp = s.empirical if s.method == "MC" else None
        noise = s.empirical_noise if s.method == "MC" else None
        groups.append(InputGroup(tuple(s.names), s.values.copy(), s.cov_total.copy(), s.cov_noise.copy(), emp, noise))
    base = base.with_values(**values)
    return MaterialInput(base, tuple(groups))


@dataclass(frozen=True)
class BoundaryInput:
    """Oven path node temperatures, convection coefficient and emissivity."""

    temps: tuple = PATH_TEMPS
    rel_sigma: float = 0.1
    h_mean: float = 40.0
    h_std: float = 4.0
    eps_mean: float = 0.8
    eps_std: float = 0.08
    vary_temps: bool = True
    vary_mixed: bool = True

    @property
    def names(self) -> tuple:
        out = tuple(f"theta_hat_{j + 1}" for j in range(len(self.temps))) if self.vary_temps else ()
        return out + (("h", "eps") if self.vary_mixed else ())

    @property
    def mean(self) -> np.ndarray:
        temps = list(self.temps) if self.vary_temps else []
        return np.array(temps + ([self.h_mean, self.eps_mean] if self.vary_mixed else []), dtype=float)

    @property
    def cov(self) -> np.ndarray:
        sd = [self.rel_sigma * abs(t) for t in self.temps] if self.vary_temps else []
        sd += [self.h_std, self.eps_std] if self.vary_mixed else []
        return np.diag(np.square(sd))

    def realization(self, x) -> tuple[tuple, float, float]:
        """``(temps, h, eps)`` from an input vector over :attr:`names`."""
        x = list(np.asarray(x, dtype=float))
        temps = tuple(x[: len(self.temps)]) if self.vary_temps else tuple(self.temps)
        if self.vary_temps:
            x = x[len(self.temps) :]
        h, eps = (x[0], x[1]) if self.vary_mixed else (self.h_mean, self.eps_mean)
        return temps, h, eps

    def sample(self, rng) -> np.ndarray:
        parts = []
        if self.vary_temps:
            mu = np.array(self.temps, dtype=float)
            parts.append(mu + self.rel_sigma * np.abs(mu) * rng.standard_normal(mu.size))
        if self.vary_mixed:
            h = lognormal_from_moments(self.h_mean, self.h_std).sample(rng)
            eps = beta_from_moments(self.eps_mean, self.eps_std).sample(rng) if self.eps_std > 0 else self.eps_mean
            parts.append(np.array([h, eps]))
        return np.concatenate(parts) if parts else np.zeros(0)


def sample_boundary_inputs(spec: BoundaryInput, n: int, seed: int) -> list[tuple[tuple, float, float]]:
    """``n`` realizations ``(temps, h, eps)``; node times stay fixed."""
    return [spec.realization(spec.sample(rng_stream(seed, i))) for i in range(n)]


# ---------------------------------------------------------------- simulation wrapper


@dataclass(frozen=True)
class ForwardScenario:
    config: ScenarioConfig
    options: SolverOptions = field(default_factory=SolverOptions)
    probes: tuple = ("top",)
    n_grid: int = 2000

    def grid(self) -> np.ndarray:
        t_end = curing_path().breakpoints[-1] if self.config.path_nodes is None else self.config.path().breakpoints[-1]
        return np.linspace(0.0, t_end, self.n_grid)

    def run(self, params: cm.MaterialParams, temps=None, h=None, eps=None) -> Outputs:
        cfg = self.config
        if temps is not None:
            times = cfg.path().breakpoints
            cfg = replace(cfg, path_nodes=tuple(zip(times, temps)))
        cfg = replace(cfg, h_conv=cfg.h_conv if h is None else h, emissivity=cfg.emissivity if eps is None else eps)
        domain = default_domain(cfg, params)
        grid = self.grid()
        probes = {"top": domain.n_nodes - 1, "bottom_epoxy": cfg.aluminum_cells}
        res = integrate_adaptive(domain, self.options, float(grid[-1]), probes)
        out: Outputs = {}
        for p in self.probes:
            i = probes[p]
            out[p] = {
                "theta": PchipInterpolator(res.times, res.theta[:, i])(grid),
                "c": PchipInterpolator(res.times, res.cure[:, i])(grid),
            }
        return out


def _material_model(scenario: ForwardScenario, inputs: MaterialInput):
    return lambda x: scenario.run(inputs.params(x))


def _boundary_model(scenario: ForwardScenario, inputs: BoundaryInput, params: cm.MaterialParams):
    def model(x):
        temps, h, eps = inputs.realization(x)
        if not 0.0 <= eps <= 1.0 or h < 0:
            raise ValueError("boundary sample outside its support")
        return scenario.run(params, temps if inputs.vary_temps else None, h, eps)

    return model


def fosm_forward(scenario: ForwardScenario, inputs, params: Optional[cm.MaterialParams] = None) -> UQResult:
    """FOSM for material (``MaterialInput``) or boundary (``BoundaryInput``) uncertainty."""
    if isinstance(inputs, MaterialInput):
        model = _material_model(scenario, inputs)
    else:
        model = _boundary_model(scenario, inputs, cm.reference_params() if params is None else params)
    return fosm(model, inputs.mean, inputs.cov, inputs.names, grid=scenario.grid())


def mc_forward(
    scenario: ForwardScenario, inputs, n_mc: int, seed: int, params: Optional[cm.MaterialParams] = None
) -> UQResult:
    if isinstance(inputs, MaterialInput):
        model = _material_model(scenario, inputs)
    else:
        model = _boundary_model(scenario, inputs, cm.reference_params() if params is None else params)
    return monte_carlo(model, inputs.sample, n_mc, seed, inputs.names, grid=scenario.grid())


def study_inputs(mode: str, pipeline: Optional[PipelineResult] = None, k: float = 1.0, base=None):
    """Uncertain inputs of a named study."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode in ("case_i", "case_ii"):
        if pipeline is None:
            raise ValueError(f"{mode} needs a calibration pipeline result")
        inp = material_input_from_pipeline(pipeline, base)
        return inp.inflate(k) if mode == "case_ii" and k != 1.0 else inp
    return BoundaryInput(vary_temps=(mode == "case_iii_full"))


# ---------------------------------------------------------------- output


def write_uq_csv(results: Mapping[str, UQResult], path) -> None:
    """One row per grid time: mean and std of every probe output for every result label."""
    labels = sorted(results)
    first = results[labels[0]]
    cols, data = ["t"], [first.grid]
    for lab in labels:
        r = results[lab]
        for p in sorted(r.mean):
            for o in OUTPUTS:
                cols += [f"{lab}_{p}_{o}_mean", f"{lab}_{p}_{o}_std"]
                data += [r.mean[p][o], r.std[p][o]]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for row in zip(*data):
            writer.writerow([repr(float(v)) for v in row])
