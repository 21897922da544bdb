"""Multi-step calibration with uncertainty propagation between steps.

Each step estimates a few parameters while holding the results of upstream
steps fixed. Upstream uncertainty reaches downstream steps either by FOSM
(finite-difference sensitivities of the re-solved step) or by Monte Carlo
(re-solving the step for sampled upstream values).
"""
from __future__ import annotations

import json
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .calibrate import (
    CalibrationError,
    Dataset,
    FitResult,
    NLSOptions,
    ResidualModel,
    asymptotic_covariance,
    solve_nls,
)
from .stats import mvn_sample, rng_stream, sample_moments

MAX_FAILURE_FRACTION = 0.05


class PipelineError(RuntimeError):
    pass


@dataclass
class StepSpec:
    """One calibration step.

    ``immediate`` lists the directly preceding steps, ``earlier`` the steps
    further upstream whose parameters also enter as fixed values. The two
    groups are sampled differently by :func:`propagate_mc`.
    """

    step_id: str
    model: ResidualModel
    init: dict[str, float]
    immediate: tuple[str, ...] = ()
    earlier: tuple[str, ...] = ()
    options: NLSOptions = NLSOptions()

    @property
    def free(self) -> tuple[str, ...]:
        return self.model.free

    @property
    def upstream(self) -> tuple[str, ...]:
        return tuple(self.immediate) + tuple(self.earlier)

    def init_vector(self) -> np.ndarray:
        return np.array([self.init[n] for n in self.free], dtype=float)


@dataclass
class UncertainParameterSet:
    names: tuple[str, ...]
    values: np.ndarray
    cov_noise: np.ndarray
    cov_prop: np.ndarray
    method: str = "NLS"
    empirical: Optional[np.ndarray] = None
    empirical_noise: Optional[np.ndarray] = None  # per-sample noise covariances
    n_failed: int = 0

    @property
    def cov_total(self) -> np.ndarray:
        return self.cov_noise + self.cov_prop

    @property
    def delta_noise(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov_noise))

    @property
    def delta_total(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov_total))

    def value_dict(self) -> dict[str, float]:
        return dict(zip(self.names, (float(v) for v in self.values)))

    @classmethod
    def from_fit(cls, fit: FitResult) -> "UncertainParameterSet":
        cov = asymptotic_covariance(fit)
        return cls(fit.names, fit.kappa_star.copy(), cov.copy(), np.zeros_like(cov), "NLS")


# ---------------------------------------------------------------- graph handling


def topological_order(steps: Sequence[StepSpec]) -> list[StepSpec]:
    by_id = {s.step_id: s for s in steps}
    if len(by_id) != len(steps):
        raise PipelineError("duplicate step ids")
    producer: dict[str, str] = {}
    for s in steps:
        for name in s.free:
            if name in producer:
                raise PipelineError(f"parameter {name!r} produced by both {producer[name]!r} and {s.step_id!r}")
            producer[name] = s.step_id
    order, state = [], {}

    def visit(sid, trail):
        if state.get(sid) == "done":
            return
        if state.get(sid) == "active":
            raise PipelineError(f"dependency cycle through {' -> '.join(trail + [sid])}")
        if sid not in by_id:
            raise PipelineError(f"unknown upstream step {sid!r}")
        state[sid] = "active"
        for dep in by_id[sid].upstream:
            visit(dep, trail + [sid])
        state[sid] = "done"
        order.append(by_id[sid])

    for s in steps:
        visit(s.step_id, [])
    return order


def _upstream_values(step: StepSpec, sets: Mapping[str, UncertainParameterSet]) -> dict[str, float]:
    fixed = dict(step.model.fixed)
    for dep in step.upstream:
        fixed.update(sets[dep].value_dict())
    return fixed


def _stack_upstream(step: StepSpec, sets: Mapping[str, UncertainParameterSet]):
    """Upstream names, values and the block-diagonal covariance of all upstream sets."""
    names, values, blocks = [], [], []
    for dep in step.upstream:
        ups = sets[dep]
        names.extend(ups.names)
        values.append(ups.values)
        blocks.append(ups.cov_total)
    if not names:
        return (), np.zeros(0), np.zeros((0, 0))
    m = len(names)
    cov = np.zeros((m, m))
    pos = 0
    for b in blocks:
        k = b.shape[0]
        cov[pos : pos + k, pos : pos + k] = b
        pos += k
    return tuple(names), np.concatenate(values), cov


# ---------------------------------------------------------------- NLS


def run_pipeline_nls(
    steps: Sequence[StepSpec], datasets: Mapping[str, Dataset], inits: Optional[Mapping[str, Mapping[str, float]]] = None
) -> dict[str, FitResult]:
    """Calibrate all steps in dependency order with upstream values fixed at their estimates."""
    fits: dict[str, FitResult] = {}
    values: dict[str, float] = {}
    for step in topological_order(steps):
        fixed = dict(step.model.fixed)
        for dep in step.upstream:
            fixed.update(fits[dep].values())
        model = step.model.with_fixed(fixed)
        init = step.init_vector() if inits is None or step.step_id not in inits else np.array(
            [inits[step.step_id][n] for n in step.free], dtype=float
        )
        fit = solve_nls(model, datasets[step.step_id], init, step.options)
        if not fit.converged:
            raise PipelineError(f"step {step.step_id!r} did not converge in {fit.iterations} iterations")
        fits[step.step_id] = fit
        values.update(fit.values())
    return fits


# ---------------------------------------------------------------- FOSM


def propagate_fosm(
    step: StepSpec,
    fit: FitResult,
    data: Dataset,
    upstream: Mapping[str, UncertainParameterSet],
    rel_step: float = 1e-2,
) -> UncertainParameterSet:
    """First-order propagation of upstream covariance through the re-solved step.

    ``S = d kappa* / d kappa_upstream`` is formed column by column from central
    differences of warm-started re-solves with step ``rel_step * sqrt(C_jj)``.
    """
    cov_noise = asymptotic_covariance(fit)
    names, vals, cov_up = _stack_upstream(step, upstream)
    n_p = len(fit.names)
    if not names or not np.any(cov_up):
        return UncertainParameterSet(fit.names, fit.kappa_star.copy(), cov_noise.copy(), np.zeros((n_p, n_p)), "FOSM")
    base_fixed = _upstream_values(step, upstream)
    sens = np.zeros((n_p, len(names)))
    for j, name in enumerate(names):
        var = cov_up[j, j]
        if var <= 0:
            continue
        h = max(rel_step * np.sqrt(var), 1e-6 * abs(vals[j]))
        sides = []
        for sign in (1.0, -1.0):
            fixed = dict(base_fixed)
            fixed[name] = vals[j] + sign * h
            try:
                res = solve_nls(step.model.with_fixed(fixed), data, fit.kappa_star, step.options)
            except (CalibrationError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
                raise PipelineError(f"FOSM re-solve of {step.step_id!r} failed when perturbing {name!r}: {exc}") from exc
            if not res.converged:
                raise PipelineError(f"FOSM re-solve of {step.step_id!r} did not converge when perturbing {name!r}")
            sides.append(res.kappa_star)
        sens[:, j] = (sides[0] - sides[1]) / (2.0 * h)
    cov_prop = sens @ cov_up @ sens.T
    return UncertainParameterSet(fit.names, fit.kappa_star.copy(), cov_noise.copy(), 0.5 * (cov_prop + cov_prop.T), "FOSM")


# ---------------------------------------------------------------- Monte Carlo


def _step_key(step_id: str) -> int:
    return zlib.crc32(step_id.encode("utf-8"))


def _sample_upstream(step: StepSpec, upstream: Mapping[str, UncertainParameterSet], rng) -> dict[str, float]:
    fixed = dict(step.model.fixed)
    for dep in step.immediate:
        ups = upstream[dep]
        fixed.update(zip(ups.names, mvn_sample(ups.values, ups.cov_total, rng)))
    for dep in step.earlier:
        ups = upstream[dep]
        if ups.empirical is None:
            draw = mvn_sample(ups.values, ups.cov_total, rng)
        else:
            row = int(rng.integers(0, ups.empirical.shape[0]))
            draw = ups.empirical[row]
            if ups.empirical_noise is not None:
                draw = mvn_sample(draw, ups.empirical_noise[row], rng)
        fixed.update(zip(ups.names, draw))
    return fixed


def propagate_mc(
    step: StepSpec,
    data: Dataset,
    upstream: Mapping[str, UncertainParameterSet],
    n_mc: int,
    seed: int,
    warm_start: Optional[np.ndarray] = None,
) -> UncertainParameterSet:
    """Monte Carlo propagation: re-solve the step for ``n_mc`` sampled upstream values.

    The immediate predecessors are drawn from ``N(values, cov_total)``; earlier
    steps are resampled from their empirical sample (with each row's noise
    covariance) when one exists. Up to 5 % failed re-solves are dropped with a
    warning.
    """
    if n_mc < 2:
        raise ValueError("n_mc must be at least 2")
    init = step.init_vector() if warm_start is None else np.asarray(warm_start, dtype=float)
    key = _step_key(step.step_id)
    kappas, covs = [], []
    failed = 0
    for i in range(n_mc):
        rng = rng_stream(seed, key, i)
        fixed = _sample_upstream(step, upstream, rng)
        try:
            res = solve_nls(step.model.with_fixed(fixed), data, init, step.options)
            if not res.converged:
                raise CalibrationError("not converged")
            cov = asymptotic_covariance(res)
        except (CalibrationError, ValueError, FloatingPointError, np.linalg.LinAlgError):
            failed += 1
            if failed > MAX_FAILURE_FRACTION * n_mc:
                raise PipelineError(f"more than 5% of Monte Carlo re-solves of {step.step_id!r} failed")
            continue
        kappas.append(res.kappa_star)
        covs.append(cov)
    if failed:
        warnings.warn(f"dropped {failed} of {n_mc} Monte Carlo re-solves of {step.step_id!r}", RuntimeWarning)
    sample = np.array(kappas)
    noise = np.array(covs)
    mean, cov_hat = sample_moments(sample)
    return UncertainParameterSet(
        step.free, mean, noise.mean(axis=0), cov_hat, "MC", empirical=sample, empirical_noise=noise, n_failed=failed
    )


# ---------------------------------------------------------------- driver


@dataclass
class PipelineResult:
    fits: dict[str, FitResult]
    sets: dict[str, UncertainParameterSet]
    method: str
    order: list[str] = field(default_factory=list)

    def parameters(self) -> dict[str, float]:
        out = {}
        for sid in self.order:
            out.update(self.sets[sid].value_dict())
        return out


def run_pipeline(
    steps: Sequence[StepSpec],
    datasets: Mapping[str, Dataset],
    method: str = "nls",
    n_mc: int = 2000,
    seed: int = 0,
    inits: Optional[Mapping[str, Mapping[str, float]]] = None,
) -> PipelineResult:
    """Calibrate every step and attach uncertainty by ``method`` in {nls, fosm, mc}."""
    if method not in ("nls", "fosm", "mc"):
        raise ValueError(f"unknown method {method!r}")
    fits = run_pipeline_nls(steps, datasets, inits)
    order = topological_order(steps)
    sets: dict[str, UncertainParameterSet] = {}
    for step in order:
        fit = fits[step.step_id]
        data = datasets[step.step_id]
        if method == "nls":
            sets[step.step_id] = UncertainParameterSet.from_fit(fit)
        elif method == "fosm":
            sets[step.step_id] = propagate_fosm(step, fit, data, sets)
        elif not step.upstream:
            # deterministic inputs: every re-solve reproduces the NLS estimate
            base = UncertainParameterSet.from_fit(fit)
            base.method = "MC"
            base.empirical = np.tile(fit.kappa_star, (n_mc, 1))
            base.empirical_noise = np.broadcast_to(base.cov_noise, (n_mc,) + base.cov_noise.shape)
            sets[step.step_id] = base
        else:
            sets[step.step_id] = propagate_mc(step, data, sets, n_mc, seed, warm_start=fit.kappa_star)
    return PipelineResult(fits, sets, method, [s.step_id for s in order])


# ---------------------------------------------------------------- output


def result_to_json(result: PipelineResult, path, sample_dir=None) -> dict:
    """Write per-step values, uncertainties and covariances as JSON.

    Empirical Monte Carlo samples are written as CSV next to the JSON file
    (or into ``sample_dir``) and referenced by file name.
    """
    path = Path(path)
    sample_dir = path.parent if sample_dir is None else Path(sample_dir)
    payload = {"method": result.method, "steps": {}}
    for sid in result.order:
        ups = result.sets[sid]
        fit = result.fits[sid]
        entry = {
            "parameters": list(ups.names),
            "values": ups.values.tolist(),
            "values_nls": fit.kappa_star.tolist(),
            "delta_nls": np.sqrt(np.diag(fit.covariance)).tolist(),
            "delta_total": ups.delta_total.tolist(),
            "cov_noise": ups.cov_noise.tolist(),
            "cov_prop": ups.cov_prop.tolist(),
            "cov_total": ups.cov_total.tolist(),
            "sigma2_hat": fit.sigma2_hat,
            "ssr": fit.ssr,
            "n_d": fit.n_d,
            "iterations": fit.iterations,
        }
        if ups.empirical is not None and result.method == "mc":
            sample_path = sample_dir / f"{path.stem}_{sid}_samples.csv"
            np.savetxt(sample_path, ups.empirical, delimiter=",", header=",".join(ups.names), comments="", fmt="%.17g")
            entry["empirical_sample"] = sample_path.name
            entry["n_failed"] = ups.n_failed
        payload["steps"][sid] = entry
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return payload
