"""Single-step nonlinear least-squares calibration.

A Levenberg-Marquardt solver on scaled internal variables, followed by the
Jacobian-based asymptotic covariance ``C = sigma2 (J^T J)^-1`` and
per-parameter confidence intervals.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .stats import normal_critical, t_critical

_EPS = 1e-12
# Standard errors beyond this, in scaled internal variables, mean the data
# carry no information about the parameter (e.g. a collapsed smooth switch).
MAX_INTERNAL_STD = 1e6


class CalibrationError(RuntimeError):
    pass


class IdentifiabilityError(CalibrationError):
    pass


# ---------------------------------------------------------------- data


@dataclass
class Dataset:
    """Named predictor columns and one observation vector."""

    predictors: dict[str, np.ndarray]
    observations: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=float).ravel()
        n = self.observations.shape[0]
        if n < 1:
            raise ValueError("dataset needs at least one observation")
        cols = {}
        for name, col in self.predictors.items():
            col = np.asarray(col, dtype=float).ravel()
            if col.shape[0] != n:
                raise ValueError(f"predictor {name!r} has {col.shape[0]} rows, expected {n}")
            cols[name] = col
        self.predictors = cols
        if not np.all(np.isfinite(self.observations)) or not all(np.all(np.isfinite(c)) for c in cols.values()):
            raise ValueError(f"dataset {self.label!r} contains non-finite entries")

    @property
    def n_d(self) -> int:
        return self.observations.shape[0]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.predictors[name]

    def subset(self, idx) -> "Dataset":
        return Dataset({k: v[idx] for k, v in self.predictors.items()}, self.observations[idx], self.label)

    def with_observations(self, obs) -> "Dataset":
        return Dataset(dict(self.predictors), obs, self.label)


def load_dataset_csv(path, observation: str, label: Optional[str] = None) -> Dataset:
    """Read a comma separated file with a header row.

    Every column other than ``observation`` becomes a predictor.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [[float(v) for v in row] for row in reader if row]
    if observation not in header:
        raise KeyError(f"observation column {observation!r} not in {header}")
    table = np.array(rows, dtype=float).reshape(-1, len(header))
    preds = {h: table[:, j] for j, h in enumerate(header) if h != observation}
    return Dataset(preds, table[:, header.index(observation)], label or path.stem)


def save_dataset_csv(data: Dataset, path, observation: str = "obs") -> None:
    names = list(data.predictors)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names + [observation])
        for i in range(data.n_d):
            writer.writerow([repr(float(data.predictors[n][i])) for n in names] + [repr(float(data.observations[i]))])


# ---------------------------------------------------------------- model


Predict = Callable[[Mapping[str, float], Dataset], np.ndarray]


@dataclass
class ResidualModel:
    """Model response ``s(kappa, kappa_fixed)`` for one calibration step.

    Parameters
    ----------
    free : names of the parameters estimated in this step.
    predict : ``predict(params, data)`` with ``params`` holding free and fixed values.
    fixed : values of upstream parameters held constant.
    jacobian : optional analytic ``d s / d free`` as an ``n_D x n_free`` array.
    log_params : free parameters optimized on a log scale (must stay positive).
    observe : optional map ``(params, data) -> d`` for observations that are
        derived from raw measurements through fixed upstream parameters.
    """

    free: tuple[str, ...]
    predict: Predict
    fixed: dict[str, float] = field(default_factory=dict)
    jacobian: Optional[Callable[[Mapping[str, float], Dataset], np.ndarray]] = None
    log_params: tuple[str, ...] = ()
    observe: Optional[Predict] = None

    def __post_init__(self):
        self.free = tuple(self.free)
        self.log_params = tuple(self.log_params)
        overlap = set(self.free) & set(self.fixed)
        if overlap:
            raise ValueError(f"parameters both free and fixed: {sorted(overlap)}")
        if not set(self.log_params) <= set(self.free):
            raise ValueError("log_params must be a subset of free")

    def params(self, kappa) -> dict[str, float]:
        out = dict(self.fixed)
        out.update(zip(self.free, (float(k) for k in kappa)))
        return out

    def with_fixed(self, fixed: Mapping[str, float]) -> "ResidualModel":
        return ResidualModel(self.free, self.predict, dict(fixed), self.jacobian, self.log_params, self.observe)

    def targets(self, data: Dataset) -> np.ndarray:
        if self.observe is None:
            return data.observations
        return np.asarray(self.observe(dict(self.fixed), data), dtype=float)

    def response(self, kappa, data: Dataset) -> np.ndarray:
        return np.asarray(self.predict(self.params(kappa), data), dtype=float)


# ---------------------------------------------------------------- results


@dataclass(frozen=True)
class NLSOptions:
    max_iter: int = 200
    xtol: float = 1e-9
    ftol: float = 1e-12
    fd_step: float = 1e-6
    use_analytic: bool = True
    # noise-variance divisor: "n-p" (unbiased), "n-1" (residual sample variance) or "n"
    sigma2_divisor: str = "n-p"

    def __post_init__(self):
        if self.sigma2_divisor not in ("n-p", "n-1", "n"):
            raise ValueError(f"unknown sigma2_divisor {self.sigma2_divisor!r}")


@dataclass
class FitResult:
    names: tuple[str, ...]
    kappa_star: np.ndarray
    covariance: Optional[np.ndarray]
    sigma2_hat: float
    ssr: float
    n_d: int
    jacobian: np.ndarray
    converged: bool
    iterations: int
    residuals: np.ndarray
    sigma2_divisor: str = "n-p"
    param_scale: Optional[np.ndarray] = None  # d kappa / d internal variable at kappa_star

    @property
    def n_kappa(self) -> int:
        return len(self.names)

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(asymptotic_covariance(self)))

    def values(self) -> dict[str, float]:
        return dict(zip(self.names, (float(v) for v in self.kappa_star)))


# ---------------------------------------------------------------- solver


class _Scaling:
    """Map between physical parameters and internal optimization variables."""

    def __init__(self, names, init, log_params):
        init = np.asarray(init, dtype=float)
        self.scale = np.where(init != 0, np.abs(init), 1.0)
        self.is_log = np.array([n in log_params for n in names])
        if np.any(init[self.is_log] <= 0):
            raise ValueError("log-scaled parameters need a positive initial value")

    def to_internal(self, kappa):
        kappa = np.asarray(kappa, dtype=float)
        lin = kappa / self.scale
        with np.errstate(divide="ignore", invalid="ignore"):
            logv = np.log(kappa / self.scale)
        return np.where(self.is_log, logv, lin)

    def to_physical(self, z):
        expo = np.clip(np.where(self.is_log, z, 0.0), -700.0, 700.0)
        return np.where(self.is_log, self.scale * np.exp(expo), self.scale * z)

    def dkappa_dz(self, z):
        return np.where(self.is_log, self.to_physical(z), self.scale)


def model_jacobian(model: ResidualModel, kappa, data: Dataset, options: NLSOptions = NLSOptions()) -> np.ndarray:
    """``d s / d kappa`` at ``kappa``, analytic if available, else central differences."""
    kappa = np.asarray(kappa, dtype=float)
    if options.use_analytic and model.jacobian is not None:
        return np.asarray(model.jacobian(model.params(kappa), data), dtype=float).reshape(data.n_d, len(kappa))
    jac = np.empty((data.n_d, kappa.shape[0]))
    for j in range(kappa.shape[0]):
        h = options.fd_step * (abs(kappa[j]) if kappa[j] != 0 else 1.0)
        up, dn = kappa.copy(), kappa.copy()
        up[j] += h
        dn[j] -= h
        jac[:, j] = (model.response(up, data) - model.response(dn, data)) / (2.0 * h)
    return jac


def solve_nls(model: ResidualModel, data: Dataset, init, options: NLSOptions = NLSOptions()) -> FitResult:
    """Levenberg-Marquardt minimizer of ``0.5 * ||s(kappa) - d||^2``.

    Raises
    ------
    CalibrationError
        If the residual is non-finite at ``init`` or there are fewer data
        than parameters.
    """
    init = np.asarray(init, dtype=float).ravel()
    n_p = len(model.free)
    if init.shape[0] != n_p:
        raise ValueError(f"init has {init.shape[0]} entries for {n_p} free parameters")
    if not np.all(np.isfinite(init)):
        raise CalibrationError("non-finite initial parameters")
    if data.n_d < n_p:
        raise CalibrationError(f"{data.n_d} observations for {n_p} parameters")
    targets = model.targets(data)
    scaling = _Scaling(model.free, init, model.log_params)

    def residual(z):
        # trial points may overflow; non-finite residuals are rejected below
        with np.errstate(all="ignore"):
            return model.response(scaling.to_physical(z), data) - targets

    z = scaling.to_internal(init)
    kappa = scaling.to_physical(z)
    r = residual(z)
    ssr = float(r @ r)
    if not np.isfinite(ssr):
        raise CalibrationError(f"non-finite residual at initial parameters of step {data.label!r}")

    converged = ssr == 0.0
    lam = None
    it = 0
    while not converged and it < options.max_iter:
        it += 1
        jz = model_jacobian(model, kappa, data, options) * scaling.dkappa_dz(z)
        a = jz.T @ jz
        g = jz.T @ r
        if lam is None:
            lam = 1e-3 * float(np.mean(np.diag(a))) or 1e-3
        while True:
            try:
                dz = np.linalg.solve(a + lam * np.eye(n_p), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            z_new = z + dz
            kappa_new = scaling.to_physical(z_new)
            rel_step = float(np.max(np.abs(kappa_new - kappa) / (np.abs(kappa) + _EPS)))
            r_new = residual(z_new) if np.all(np.isfinite(kappa_new)) else np.full_like(r, np.nan)
            ssr_new = float(r_new @ r_new)
            predicted = -float(2.0 * dz @ g + dz @ a @ dz)
            gain = (ssr - ssr_new) / predicted if predicted > 0 else 0.0
            # steps that realise little of the predicted decrease overshoot; treat as rejected
            if np.isfinite(ssr_new) and ssr_new <= ssr and (gain > 0.25 or ssr_new == 0.0):
                rel_drop = (ssr - ssr_new) / max(ssr, np.finfo(float).tiny)
                z, kappa, r, ssr = z_new, kappa_new, r_new, ssr_new
                lam = max(lam / 10.0, 1e-300)
                converged = rel_step < options.xtol or rel_drop < options.ftol or ssr == 0.0
                break
            lam *= 10.0
            if rel_step < options.xtol or lam > 1e300:
                # no downhill step left at this resolution
                converged = rel_step < options.xtol
                break
        if lam > 1e300:
            break

    jac = model_jacobian(model, kappa, data, options)
    fit = FitResult(
        names=model.free,
        kappa_star=kappa,
        covariance=None,
        sigma2_hat=_sigma2(ssr, data.n_d, n_p, options.sigma2_divisor),
        ssr=ssr,
        n_d=data.n_d,
        jacobian=jac,
        converged=converged,
        iterations=it,
        residuals=r,
        sigma2_divisor=options.sigma2_divisor,
        param_scale=scaling.dkappa_dz(z),
    )
    if converged and data.n_d > n_p:
        fit.covariance = _covariance(fit, fit.param_scale)
    return fit


def _sigma2(ssr: float, n_d: int, n_p: int, divisor: str) -> float:
    den = {"n-p": n_d - n_p, "n-1": n_d - 1, "n": n_d}[divisor]
    return ssr / den if den > 0 else float("nan")


def _covariance(fit: FitResult, col_scale=None) -> np.ndarray:
    names = fit.names
    col_scale = np.ones(len(names)) if col_scale is None else np.asarray(col_scale, dtype=float)
    jz = fit.jacobian * col_scale
    _, s, vt = np.linalg.svd(jz, full_matrices=False)
    if s.size == 0 or s[-1] <= 1e-12 * s[0]:
        direction = ", ".join(f"{n}: {v:+.3f}" for n, v in zip(names, vt[-1]))
        raise IdentifiabilityError(f"J^T J is singular; unidentifiable direction ({direction})")
    inv = (vt.T / s**2) @ vt
    std_internal = np.sqrt(fit.sigma2_hat * np.diag(inv))
    if np.any(std_internal > MAX_INTERNAL_STD):
        worst = names[int(np.argmax(std_internal))]
        raise IdentifiabilityError(f"parameter {worst!r} is practically unidentifiable at this estimate")
    cov = fit.sigma2_hat * (col_scale[:, None] * inv * col_scale[None, :])
    return 0.5 * (cov + cov.T)


def asymptotic_covariance(fit: FitResult) -> np.ndarray:
    """``C = sigma2_hat (J^T J)^-1`` of a converged fit."""
    if not fit.converged:
        raise CalibrationError("covariance withheld: fit did not converge")
    if fit.n_d <= fit.n_kappa:
        raise CalibrationError("covariance needs more observations than parameters")
    if fit.covariance is None:
        fit.covariance = _covariance(fit, fit.param_scale)
    return fit.covariance


def confidence_interval(fit: FitResult, level: float = 0.95, family: str = "student_t") -> np.ndarray:
    """Per-parameter ``(low, high)`` rows of two-sided confidence intervals."""
    if family == "normal":
        crit = normal_critical(level)
    elif family == "student_t":
        crit = t_critical(fit.n_d - fit.n_kappa, level)
    else:
        raise ValueError(f"unknown interval family {family!r}")
    half = crit * np.sqrt(np.diag(asymptotic_covariance(fit)))
    return np.column_stack([fit.kappa_star - half, fit.kappa_star + half])


def linear_model(names: Sequence[str], columns: Sequence[str]) -> ResidualModel:
    """``s = sum_i kappa_i * x_i``; handy for tests and coverage sanity checks."""
    names, columns = tuple(names), tuple(columns)

    def predict(p, data):
        return sum(p[n] * data[c] for n, c in zip(names, columns))

    def jac(p, data):
        return np.column_stack([data[c] for c in columns])

    return ResidualModel(names, predict, jacobian=jac)
