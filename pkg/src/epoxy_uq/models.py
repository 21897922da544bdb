"""Calibration steps of the epoxy model and their synthetic experiment designs.

The default graph has eight steps::

    tg ──────────────┬──────────────┬─────────────┐
    chem ── diff ◄───┘              │             │
    alpha_theta ── shrink ── alpha_g ◄┘           │
                                 │        cp ◄────┘
                                 └──► kappa ◄──┘

``chem`` fits the chemical part of the rate law on data far below the
glass transition, ``diff`` then fits ``b_d`` with everything else fixed.
The conductivity step works on observations derived from diffusivity data
through the density and heat-capacity models.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from . import constitutive as cm
from .calibrate import Dataset, NLSOptions, ResidualModel
from .pipeline import StepSpec

RHO_REF = 1150.0  # kg/m^3, reference density of the resin (placeholder)

STEP_IDS = ("tg", "chem", "diff", "alpha_theta", "shrink", "alpha_g", "cp", "kappa")
_PARAM_SET = frozenset(cm.ALL_PARAMS)

# Kinetics design: isothermal temperatures and the sampled cure intervals.
KINETICS_TEMPS = (80.0, 100.0, 110.0, 120.0, 130.0)
KINETICS_INTERVALS = ((0.2, 0.79), (0.15, 0.9), (0.1, 0.95), (0.1, 0.96), (0.1, 0.98))
CHEM_SPLIT = 0.9
CP_CURES = (0.0, 0.52, 1.0)


def _material(base: cm.MaterialParams, p: Mapping[str, float]) -> cm.MaterialParams:
    return base.with_values(check=False, **{k: v for k, v in p.items() if k in _PARAM_SET})


def _theta(data: Dataset) -> np.ndarray:
    return data.predictors.get("theta", np.zeros(data.n_d))


def relation_model(
    relation: str, free, base: cm.MaterialParams, log_params=(), observe=None
) -> ResidualModel:
    """Residual model of a constitutive relation with analytic parameter derivatives."""
    free = tuple(free)

    def predict(p, data):
        return cm.evaluate(relation, _theta(data), data["c"], _material(base, p))

    def jac(p, data):
        grads = cm.param_gradient(relation, _theta(data), data["c"], _material(base, p))
        return np.column_stack([grads[n] for n in free])

    return ResidualModel(free, predict, jacobian=jac, log_params=tuple(log_params), observe=observe)


def chemical_rate_model(base: cm.MaterialParams) -> ResidualModel:
    """Rate law without the diffusion cut-off, valid well below the glass transition."""
    free = ("a_pre", "e_act", "g_fac", "n_exp")

    def parts(p, data):
        temp_k = data["theta"] + cm.KELVIN_OFFSET
        arr = p["a_pre"] * np.exp(-p["e_act"] / (cm.GAS_CONSTANT * temp_k))
        base_c = np.maximum(p["g_fac"] + (1.0 - p["g_fac"]) * data["c"] - data["c"] ** 2, 0.0)
        return temp_k, arr, base_c

    def predict(p, data):
        _, arr, base_c = parts(p, data)
        return arr * base_c ** p["n_exp"]

    def jac(p, data):
        temp_k, arr, base_c = parts(p, data)
        active = base_c > 0
        safe = np.where(active, base_c, 1.0)
        val = np.where(active, arr * safe ** p["n_exp"], 0.0)
        return np.column_stack(
            [
                val / p["a_pre"],
                -val / (cm.GAS_CONSTANT * temp_k),
                np.where(active, arr * p["n_exp"] * safe ** (p["n_exp"] - 1.0) * (1.0 - data["c"]), 0.0),
                np.where(active, val * np.log(safe), 0.0),
            ]
        )

    return ResidualModel(free, predict, jacobian=jac, log_params=("a_pre", "e_act"))


def linear_expansion_model(theta_ref: float = 20.0) -> ResidualModel:
    """``J = 1 + alpha_theta (theta - theta_ref)`` of the uncured resin."""

    def predict(p, data):
        return 1.0 + p["alpha_theta"] * (data["theta"] - theta_ref)

    def jac(p, data):
        return (data["theta"] - theta_ref)[:, None]

    return ResidualModel(("alpha_theta",), predict, jacobian=jac)


def rubbery_shrinkage_model(theta_ref: float = 20.0) -> ResidualModel:
    """Rubbery branch of the volume ratio, used above the glass transition."""
    free = ("alpha_c", "alpha_theta_c")

    def predict(p, data):
        vt = data["theta"] - theta_ref
        return 1.0 + p["alpha_theta"] * vt - p["alpha_c"] * data["c"] - p["alpha_theta_c"] * vt * data["c"]

    def jac(p, data):
        vt = data["theta"] - theta_ref
        return np.column_stack([-data["c"], -vt * data["c"]])

    return ResidualModel(free, predict, jacobian=jac)


def derive_conductivity_observations(
    diffusivity: Dataset, params: cm.MaterialParams, rho_ref: float = RHO_REF
) -> np.ndarray:
    """Conductivity ``a * rho * c_p`` from diffusivity, with ``rho = rho_ref / J``."""
    theta, c = diffusivity["theta"], diffusivity["c"]
    vol = cm.deformation(theta, c, params.shr, params.tg)
    if np.any(vol <= 0):
        raise ValueError("volume ratio J must be positive")
    cp = cm.specific_heat(theta, c, params.cp, params.tg)
    return diffusivity.observations * rho_ref / vol * cp


def conductivity_model(base: cm.MaterialParams, rho_ref: float = RHO_REF) -> ResidualModel:
    def observe(fixed, data):
        return derive_conductivity_observations(data, _material(base, fixed), rho_ref)

    return relation_model("conductivity", cm.BLOCK_PARAMS["conductivity"], base, observe=observe)


def default_steps(
    base: Optional[cm.MaterialParams] = None,
    rho_ref: float = RHO_REF,
    options: NLSOptions = NLSOptions(),
) -> list[StepSpec]:
    """The eight-step calibration graph; ``base`` supplies initial values and constants."""
    base = cm.reference_params() if base is None else base
    vals = base.to_dict()

    def init(names):
        return {n: vals[n] for n in names}

    tg_names = cm.BLOCK_PARAMS["glass_transition"]
    models = {
        "tg": relation_model("glass_transition", tg_names, base),
        "chem": chemical_rate_model(base),
        "diff": relation_model("curing_rate", ("b_d",), base, log_params=("b_d",)),
        "alpha_theta": linear_expansion_model(base.shr.theta_ref),
        "shrink": rubbery_shrinkage_model(base.shr.theta_ref),
        "alpha_g": relation_model("deformation", ("alpha_theta_g",), base),
        "cp": relation_model("specific_heat", cm.BLOCK_PARAMS["heat_capacity"], base, log_params=("a5",)),
        "kappa": conductivity_model(base, rho_ref),
    }
    deps = {
        "tg": ((), ()),
        "chem": ((), ()),
        "diff": (("chem",), ("tg",)),
        "alpha_theta": ((), ()),
        "shrink": (("alpha_theta",), ()),
        "alpha_g": (("shrink",), ("alpha_theta", "tg")),
        "cp": (("tg",), ()),
        "kappa": (("alpha_g", "cp"), ("shrink", "alpha_theta", "tg")),
    }
    return [
        StepSpec(sid, models[sid], init(models[sid].free), deps[sid][0], deps[sid][1], options) for sid in STEP_IDS
    ]


# ---------------------------------------------------------------- designs


@dataclass(frozen=True)
class PipelineDesign:
    """Predictor grids and noise levels of the synthetic calibration experiments."""

    n_tg: int = 5
    n_kinetics_per_temp: int = 225
    chem_split: float = 0.85
    n_expansion: int = 30
    shrink_cures: tuple = (0.2, 0.4, 0.6, 0.8, 1.0)
    shrink_theta: tuple = (20.0, 200.0, 37)
    shrink_margin: float = 25.0  # K above the glass transition
    n_alpha_g: int = 37
    n_cp_per_curve: int = 200
    kappa_cures: tuple = (0.0, 0.5, 1.0)
    n_kappa_per_curve: int = 19
    noise: dict = field(
        default_factory=lambda: {
            "tg": 4.0,
            "chem": 4e-5,
            "diff": 6e-6,
            "alpha_theta": 2e-4,
            "shrink": 5e-4,
            "alpha_g": 2e-4,
            "cp": 16.3,
            "kappa": 2e-9,
        }
    )


def kinetics_design(n_per_temp: int = 225, split: float = CHEM_SPLIT):
    """``(chem, diff)`` predictor dicts; each isotherm is split at ``split`` times its largest cure."""
    chem, diff = {"theta": [], "c": []}, {"theta": [], "c": []}
    for temp, (lo, hi) in zip(KINETICS_TEMPS, KINETICS_INTERVALS):
        c = np.linspace(lo, hi, n_per_temp)
        low = c <= split * hi
        for target, mask in ((chem, low), (diff, ~low)):
            target["theta"].append(np.full(mask.sum(), temp))
            target["c"].append(c[mask])
    return ({k: np.concatenate(v) for k, v in chem.items()}, {k: np.concatenate(v) for k, v in diff.items()})


def design_predictors(truth: cm.MaterialParams, design: PipelineDesign = PipelineDesign()) -> dict[str, dict]:
    chem, diff = kinetics_design(design.n_kinetics_per_temp, design.chem_split)
    shr_t, shr_c = [], []
    grid = np.linspace(*design.shrink_theta[:2], int(design.shrink_theta[2]))
    for c in design.shrink_cures:
        keep = grid >= cm.glass_transition(c, truth.tg) + design.shrink_margin
        shr_t.append(grid[keep])
        shr_c.append(np.full(keep.sum(), c))
    cp_theta = np.linspace(-75.0, 240.0, design.n_cp_per_curve)
    k_theta = np.linspace(20.0, 200.0, design.n_kappa_per_curve)
    return {
        "tg": {"c": np.linspace(0.0, 1.0, design.n_tg)},
        "chem": chem,
        "diff": diff,
        "alpha_theta": {"theta": np.linspace(20.0, 80.0, design.n_expansion), "c": np.zeros(design.n_expansion)},
        "shrink": {"theta": np.concatenate(shr_t), "c": np.concatenate(shr_c)},
        "alpha_g": {"theta": np.linspace(20.0, 200.0, design.n_alpha_g), "c": np.ones(design.n_alpha_g)},
        "cp": {"theta": np.tile(cp_theta, len(CP_CURES)), "c": np.repeat(CP_CURES, cp_theta.size)},
        "kappa": {
            "theta": np.tile(k_theta, len(design.kappa_cures)),
            "c": np.repeat(design.kappa_cures, k_theta.size),
        },
    }


def clean_response(step_id: str, truth: cm.MaterialParams, pred: Mapping[str, np.ndarray], rho_ref: float = RHO_REF):
    """Noise-free observation of a step at the true parameters."""
    theta = pred.get("theta", np.zeros_like(pred["c"]))
    c = pred["c"]
    if step_id == "tg":
        return cm.glass_transition(c, truth.tg)
    if step_id in ("chem", "diff"):
        return cm.curing_rate(theta, c, truth.kin, truth.tg)
    if step_id in ("alpha_theta", "shrink", "alpha_g"):
        return cm.deformation(theta, c, truth.shr, truth.tg)
    if step_id == "cp":
        return cm.specific_heat(theta, c, truth.cp, truth.tg)
    if step_id == "kappa":
        # measured quantity is the diffusivity
        kappa = cm.conductivity(theta, c, truth.kappa)
        vol = cm.deformation(theta, c, truth.shr, truth.tg)
        return kappa * vol / (rho_ref * cm.specific_heat(theta, c, truth.cp, truth.tg))
    raise KeyError(step_id)


def synthetic_datasets(
    truth: Optional[cm.MaterialParams] = None,
    rng: Optional[np.random.Generator] = None,
    design: PipelineDesign = PipelineDesign(),
    rho_ref: float = RHO_REF,
) -> dict[str, Dataset]:
    """In-silico data for every step; Gaussian noise is added only when ``rng`` is given."""
    truth = cm.reference_params() if truth is None else truth
    out = {}
    for sid, pred in design_predictors(truth, design).items():
        obs = clean_response(sid, truth, pred, rho_ref)
        if rng is not None:
            obs = obs + design.noise[sid] * rng.standard_normal(obs.shape)
        out[sid] = Dataset(dict(pred), obs, sid)
    return out
