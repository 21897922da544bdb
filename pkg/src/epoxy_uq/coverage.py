"""Frequentist coverage tests of the calibration uncertainty on in-silico data.

Three cases are available:

``sparse_tg``
    glass transition fit from few points; normal and Student-t intervals.
``kinetics``
    curing kinetics on dense isothermal data; ``b_d`` inherits uncertainty
    from the glass transition and chemical steps.
``heat_capacity``
    specific heat on dense data; all five parameters inherit uncertainty
    from the glass transition step.

Every repetition draws its own random stream, so reports do not depend on
execution order.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from . import constitutive as cm
from .calibrate import CalibrationError, Dataset, FitResult, NLSOptions, model_jacobian
from .models import CP_CURES, clean_response, default_steps, kinetics_design
from .pipeline import PipelineError, run_pipeline
from .stats import mvn_sample, normal_critical, rng_stream, t_critical

CASE_IDS = ("sparse_tg", "kinetics", "heat_capacity")
NOISE_TYPES = ("gaussian", "uniform", "hetero")
MAX_DROP_FRACTION = 0.05

TG_SIGMA = 4.0  # degC
KINETICS_SIGMA = 4e-5  # 1/s
CP_SIGMA = 16.3  # J/(kg K)


class CoverageError(RuntimeError):
    pass


# ---------------------------------------------------------------- noise models


@dataclass(frozen=True)
class GaussianNoise:
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def std(self, pred, truth):
        return np.full(np.asarray(pred["c"]).shape, self.sigma)

    def sample(self, pred, truth, rng):
        return self.std(pred, truth) * rng.standard_normal(np.asarray(pred["c"]).shape)


@dataclass(frozen=True)
class UniformNoise:
    """Uniform on ``[-sigma_u, sigma_u]``; ``sigma_u = sqrt(3) sigma`` matches a Gaussian variance."""

    sigma_u: float

    def __post_init__(self):
        if not self.sigma_u > 0:
            raise ValueError("sigma_u must be positive")

    def std(self, pred, truth):
        return np.full(np.asarray(pred["c"]).shape, self.sigma_u / math.sqrt(3.0))

    def sample(self, pred, truth, rng):
        return rng.uniform(-self.sigma_u, self.sigma_u, np.asarray(pred["c"]).shape)


@dataclass(frozen=True)
class HeteroCuring:
    """Cure-dependent standard deviation ``k1 / (c + k2) + k3 c``."""

    k1: float = 1e-5
    k2: float = 1e-3
    k3: float = 4.5e-5

    def __post_init__(self):
        if not (self.k1 > 0 and self.k2 > 0 and self.k3 > 0):
            raise ValueError("k1, k2 and k3 must be positive")

    def std(self, pred, truth):
        c = np.asarray(pred["c"], dtype=float)
        return self.k1 / (c + self.k2) + self.k3 * c

    def sample(self, pred, truth, rng):
        s = self.std(pred, truth)
        return s * rng.standard_normal(s.shape)


@dataclass(frozen=True)
class HeteroCp:
    """Noise peaking at the glass transition: ``sigma_min (1 + amplitude exp(-(theta - tg)^2 / 2 omega^2))``."""

    sigma_min: float = CP_SIGMA
    omega: float = 10.0
    amplitude: float = 7.0

    def __post_init__(self):
        if not (self.sigma_min > 0 and self.omega > 0 and self.amplitude > 0):
            raise ValueError("sigma_min, omega and amplitude must be positive")

    def std(self, pred, truth: cm.MaterialParams):
        tg = cm.glass_transition(pred["c"], truth.tg)
        return self.sigma_min * (1.0 + self.amplitude * np.exp(-((pred["theta"] - tg) ** 2) / (2.0 * self.omega**2)))

    def sample(self, pred, truth, rng):
        s = self.std(pred, truth)
        return s * rng.standard_normal(s.shape)


def noise_model(case_id: str, kind: str, overrides: Optional[Mapping[str, float]] = None):
    """Default noise model of a case; ``overrides`` replaces constructor arguments."""
    overrides = dict(overrides or {})
    sigma = {"sparse_tg": TG_SIGMA, "kinetics": KINETICS_SIGMA, "heat_capacity": CP_SIGMA}[case_id]
    sigma = overrides.pop("sigma", sigma)
    if kind == "gaussian":
        return GaussianNoise(sigma)
    if kind == "uniform":
        return UniformNoise(overrides.pop("sigma_u", math.sqrt(3.0) * sigma))
    if kind == "hetero":
        if case_id == "kinetics":
            return HeteroCuring(**overrides)
        if case_id == "heat_capacity":
            return HeteroCp(**{"sigma_min": sigma, **overrides})
    raise ValueError(f"noise type {kind!r} not available for case {case_id!r}")


# ---------------------------------------------------------------- cases


@dataclass(frozen=True)
class CoverageCase:
    """Settings of one coverage study.

    ``n_d`` is the glass transition data count in ``sparse_tg``; the other
    cases use ``n_d_tg`` for their upstream glass transition data.
    """

    case_id: str
    noise: str = "gaussian"
    truth_mode: str = "conditional"
    propagate: bool = True
    n_cov: int = 1000
    n_d: int = 5
    n_d_tg: int = 5
    n_per_temp: int = 225
    n_per_curve: int = 1750
    level: float = 0.95
    sigma2_divisor: str = "n-1"
    diagonal_truth_cov: bool = False
    noise_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.case_id not in CASE_IDS:
            raise ValueError(f"unknown case {self.case_id!r}")
        if self.noise not in NOISE_TYPES:
            raise ValueError(f"unknown noise type {self.noise!r}")
        if self.truth_mode not in ("conditional", "marginal"):
            raise ValueError("truth_mode must be conditional or marginal")
        if self.case_id == "sparse_tg" and self.noise != "gaussian":
            raise ValueError("the sparse glass transition case uses Gaussian noise only")
        if self.n_cov < 1:
            raise ValueError("n_cov must be positive")

    @property
    def steps(self) -> tuple[str, ...]:
        return {"sparse_tg": ("tg",), "kinetics": ("tg", "chem", "diff"), "heat_capacity": ("tg", "cp")}[self.case_id]

    @property
    def targets(self) -> tuple[str, ...]:
        if self.case_id == "sparse_tg":
            return cm.BLOCK_PARAMS["glass_transition"]
        if self.case_id == "kinetics":
            return cm.BLOCK_PARAMS["kinetics"]
        return cm.BLOCK_PARAMS["heat_capacity"]

    @property
    def tg_points(self) -> int:
        return self.n_d if self.case_id == "sparse_tg" else self.n_d_tg


def case_predictors(case: CoverageCase) -> dict[str, dict]:
    """Predictor grids of every step in the case."""
    out = {"tg": {"c": np.linspace(0.0, 1.0, case.tg_points)}}
    if case.case_id == "kinetics":
        out["chem"], out["diff"] = kinetics_design(case.n_per_temp)
    elif case.case_id == "heat_capacity":
        theta = np.linspace(-75.0, 240.0, case.n_per_curve)
        out["cp"] = {"theta": np.tile(theta, len(CP_CURES)), "c": np.repeat(CP_CURES, theta.size)}
    return out


def generate_insilico(case: CoverageCase, truth: cm.MaterialParams, rng: np.random.Generator) -> dict[str, Dataset]:
    """Clean data at ``truth`` plus one noise realization for every step of the case.

    Glass transition data always carry Gaussian noise; the case's noise
    model applies to the target data.
    """
    preds = case_predictors(case)
    tg_noise = GaussianNoise(case.noise_params.get("sigma", TG_SIGMA) if case.case_id == "sparse_tg" else TG_SIGMA)
    target_noise = noise_model(case.case_id, case.noise, case.noise_params)
    data = {}
    for sid, pred in preds.items():
        obs = clean_response(sid, truth, pred)
        model = tg_noise if sid == "tg" else target_noise
        data[sid] = Dataset(dict(pred), obs + model.sample(pred, truth, rng), sid)
    return data


def expected_covariance(case: CoverageCase, truth: Optional[cm.MaterialParams] = None) -> dict[str, np.ndarray]:
    """Pilot covariance ``sigma^2 (J^T J)^-1`` of every step at the truth.

    Used to draw truths in marginal mode. Each step is evaluated with its
    upstream parameters at their true values and with the Gaussian noise
    level of its data.
    """
    truth = cm.reference_params() if truth is None else truth
    tv = truth.to_dict()
    sigma = {"tg": TG_SIGMA, "chem": KINETICS_SIGMA, "diff": KINETICS_SIGMA, "cp": CP_SIGMA}
    if case.case_id == "sparse_tg":
        sigma["tg"] = case.noise_params.get("sigma", TG_SIGMA)
    steps = {s.step_id: s for s in default_steps(truth)}
    out = {}
    for sid, pred in case_predictors(case).items():
        step = steps[sid]
        model = step.model.with_fixed({k: v for k, v in tv.items() if k not in step.free})
        data = Dataset(dict(pred), clean_response(sid, truth, pred), sid)
        jac = model_jacobian(model, [tv[n] for n in step.free], data)
        out[sid] = sigma[sid] ** 2 * np.linalg.inv(jac.T @ jac)
    return out


def _sample_truth(case, base: cm.MaterialParams, pilot, rng) -> cm.MaterialParams:
    if case.truth_mode == "conditional":
        return base
    tv = base.to_dict()
    steps = {s.step_id: s for s in default_steps(base)}
    values = {}
    for sid in case.steps:
        names = steps[sid].free
        cov = pilot[sid]
        if case.diagonal_truth_cov:
            cov = np.diag(np.diag(cov))
        mean = np.array([tv[n] for n in names])
        for _ in range(100):
            draw = mvn_sample(mean, cov, rng)
            try:
                base.with_values(**dict(zip(names, draw)))
            except ValueError:
                continue
            values.update(zip(names, draw))
            break
        else:
            raise CoverageError(f"could not draw admissible truth for step {sid!r}")
    return base.with_values(**values)


# ---------------------------------------------------------------- evaluation


@dataclass
class CoverageReport:
    case: CoverageCase
    params: tuple[str, ...]
    coverage: dict[str, np.ndarray]  # key "<family>" or "<family>_noprop"
    n_rep: int
    n_dropped: int

    def fraction(self, param: str, family: str = "normal", propagated: bool = True) -> float:
        key = family if propagated else f"{family}_noprop"
        return float(self.coverage[key][self.params.index(param)])

    def to_dict(self) -> dict:
        return {
            "case": asdict(self.case),
            "params": list(self.params),
            "coverage": {k: [float(x) for x in v] for k, v in self.coverage.items()},
            "n_rep": self.n_rep,
            "n_dropped": self.n_dropped,
        }


def _intervals_hit(value, truth, std, crit):
    return np.abs(value - truth) <= crit * std


def _repetition(case: CoverageCase, seed: int, i: int, base: cm.MaterialParams, pilot):
    """Hit indicators of repetition ``i`` keyed by interval family, or ``None`` if the fit failed."""
    options = NLSOptions(sigma2_divisor=case.sigma2_divisor)
    steps = [s for s in default_steps(base, options=options) if s.step_id in case.steps]
    target_steps = [s for s in steps if set(s.free) & set(case.targets)]
    rng = rng_stream(seed, i)
    try:
        truth = _sample_truth(case, base, pilot, rng)
        data = generate_insilico(case, truth, rng)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            result = run_pipeline(steps, data, "fosm" if case.propagate else "nls")
    except (CalibrationError, PipelineError, ValueError, FloatingPointError, np.linalg.LinAlgError):
        return None
    tv = truth.to_dict()
    z_crit = normal_critical(case.level)
    rep = {}
    for step in target_steps:
        ups = result.sets[step.step_id]
        fit: FitResult = result.fits[step.step_id]
        t_crit = t_critical(fit.n_d - fit.n_kappa, case.level)
        true_vals = np.array([tv[n] for n in ups.names])
        for family, crit in (("normal", z_crit), ("student_t", t_crit)):
            rep.setdefault(family, []).append(_intervals_hit(ups.values, true_vals, ups.delta_total, crit))
            rep.setdefault(f"{family}_noprop", []).append(_intervals_hit(ups.values, true_vals, ups.delta_noise, crit))
    return {k: np.concatenate(v) for k, v in rep.items()}


def run_coverage(
    case: CoverageCase,
    seed: int = 0,
    base: Optional[cm.MaterialParams] = None,
    progress=None,
    workers: int = 1,
) -> CoverageReport:
    """Repeat calibration on fresh in-silico data and count truth-in-interval events.

    Parameters
    ----------
    case : CoverageCase
    seed : int
        Root seed; repetition ``i`` uses stream ``(seed, i)``.
    base : MaterialParams, optional
        Truth in conditional mode, centre of the truth distribution otherwise.
    progress : callable, optional
        Called as ``progress(done, total)``.
    workers : int
        Size of the process pool. The report does not depend on it.
    """
    base = cm.reference_params() if base is None else base
    pilot = expected_covariance(case, base) if case.truth_mode == "marginal" else None
    max_drop = MAX_DROP_FRACTION * case.n_cov

    hits: dict[str, list] = {}
    n_ok = dropped = 0

    def collect(i, rep):
        nonlocal n_ok, dropped
        if rep is None:
            dropped += 1
            if dropped > max_drop:
                raise CoverageError(f"more than 5% of repetitions failed in case {case.case_id!r}")
        else:
            for key, v in rep.items():
                hits.setdefault(key, []).append(v)
            n_ok += 1
        if progress is not None:
            progress(i + 1, case.n_cov)

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_repetition, case, seed, i, base, pilot) for i in range(case.n_cov)]
            try:
                for i, fut in enumerate(futures):
                    collect(i, fut.result())
            except CoverageError:
                for fut in futures:
                    fut.cancel()
                raise
    else:
        for i in range(case.n_cov):
            collect(i, _repetition(case, seed, i, base, pilot))
    if n_ok == 0:
        raise CoverageError("no successful repetition")
    params = tuple(n for s in default_steps(base) if s.step_id in case.steps and set(s.free) & set(case.targets) for n in s.free)
    coverage = {k: np.mean(np.array(v, dtype=float), axis=0) for k, v in hits.items()}
    return CoverageReport(case, params, coverage, n_ok, dropped)


def residual_diagnostics(fit: FitResult, data: Dataset, predictor: str = "c") -> tuple[np.ndarray, np.ndarray]:
    """Absolute residuals ordered by ``predictor``."""
    order = np.argsort(data[predictor], kind="stable")
    return data[predictor][order], np.abs(fit.residuals[order])


# ---------------------------------------------------------------- output


def write_report_json(report: CoverageReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_report_csv(reports, path) -> None:
    """Table with one row per (data count, truth mode, interval kind) and one column per parameter."""
    reports = list(reports)
    params = reports[0].params
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["case", "noise", "n_d", "truth_mode", "interval"] + list(params))
        for rep in reports:
            n_d = rep.case.n_d if rep.case.case_id == "sparse_tg" else rep.case.n_d_tg
            for key in sorted(rep.coverage):
                writer.writerow(
                    [rep.case.case_id, rep.case.noise, n_d, rep.case.truth_mode, key]
                    + [f"{100.0 * x:.1f}" for x in rep.coverage[key]]
                )
