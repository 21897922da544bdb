"""Thermo-chemical constitutive relations for a curing epoxy resin.

Five relations are provided together with analytic derivatives with respect
to their material parameters and to the state ``(theta, c)``:

* glass transition temperature (DiBenedetto form),
* curing rate (simplified Kamal-Sourour with a diffusion cut-off),
* thermo-chemical volume ratio ``J = rho_R / rho``,
* reversing specific heat capacity,
* thermal conductivity (rule of mixture).

Temperatures enter and leave in degrees Celsius. Only the Arrhenius factor
needs an absolute temperature; it is converted there and nowhere else.
All functions are vectorised over numpy arrays and free of side effects.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np
from scipy.special import expit

GAS_CONSTANT = 8.314  # J/(mol K)
KELVIN_OFFSET = 273.15


@dataclass(frozen=True)
class GlassTransitionParams:
    r_f: float
    theta_g0: float  # degC
    theta_g1: float  # degC

    def __post_init__(self):
        if not self.r_f > 0:
            raise ValueError(f"r_f must be positive, got {self.r_f}")
        if not self.theta_g1 > self.theta_g0:
            raise ValueError("theta_g1 must exceed theta_g0")


@dataclass(frozen=True)
class CuringKineticsParams:
    a_pre: float  # 1/s
    e_act: float  # J/mol
    g_fac: float
    n_exp: float
    b_d: float  # K

    def __post_init__(self):
        if not (self.a_pre > 0 and self.e_act > 0 and self.n_exp > 0 and self.b_d > 0):
            raise ValueError("a_pre, e_act, n_exp and b_d must be positive")
        if not 0 < self.g_fac < 1:
            raise ValueError(f"g_fac must lie in (0, 1), got {self.g_fac}")


@dataclass(frozen=True)
class ShrinkageParams:
    alpha_theta: float  # 1/K
    alpha_c: float
    alpha_theta_c: float  # 1/K
    alpha_theta_g: float  # 1/K
    d_smooth: float = 1e-4
    theta_ref: float = 20.0  # degC

    def __post_init__(self):
        if not self.d_smooth > 0:
            raise ValueError("d_smooth must be positive")
        if not self.alpha_theta > self.alpha_theta_g > 0:
            raise ValueError("require alpha_theta > alpha_theta_g > 0")


@dataclass(frozen=True)
class HeatCapacityParams:
    a1: float
    a2: float
    a3: float
    a4: float
    a5: float

    def __post_init__(self):
        if not self.a5 > 0:
            raise ValueError("a5 must be positive")


@dataclass(frozen=True)
class ConductivityParams:
    b1: float
    b2: float
    b3: float
    b4: float
    d_tilde: float = 0.01  # W/(m K)
    theta_ref: float = 20.0  # degC

    def __post_init__(self):
        if not self.d_tilde > 0:
            raise ValueError("d_tilde must be positive")
        if not (self.b1 > 0 and self.b2 > 0 and self.b4 > 0):
            raise ValueError("b1, b2 and b4 must be positive")


@dataclass(frozen=True)
class CuringState:
    theta: float  # degC
    c: float

    def __post_init__(self):
        if not 0.0 <= self.c <= 1.0:
            raise ValueError(f"degree of cure outside [0, 1]: {self.c}")
        if not self.theta + KELVIN_OFFSET > 0:
            raise ValueError("temperature below absolute zero")


# Names of the calibrated (free) parameters of each block, in table order.
BLOCK_PARAMS = {
    "glass_transition": ("r_f", "theta_g0", "theta_g1"),
    "kinetics": ("a_pre", "e_act", "g_fac", "n_exp", "b_d"),
    "shrinkage": ("alpha_theta", "alpha_c", "alpha_theta_c", "alpha_theta_g"),
    "heat_capacity": ("a1", "a2", "a3", "a4", "a5"),
    "conductivity": ("b1", "b2", "b3", "b4"),
}
_BLOCK_FIELD = {
    "glass_transition": "tg",
    "kinetics": "kin",
    "shrinkage": "shr",
    "heat_capacity": "cp",
    "conductivity": "kappa",
}
PARAM_BLOCK = {name: block for block, names in BLOCK_PARAMS.items() for name in names}
ALL_PARAMS = tuple(name for names in BLOCK_PARAMS.values() for name in names)


@dataclass(frozen=True)
class MaterialParams:
    """All five parameter blocks of the epoxy model."""

    tg: GlassTransitionParams
    kin: CuringKineticsParams
    shr: ShrinkageParams
    cp: HeatCapacityParams
    kappa: ConductivityParams

    def to_dict(self) -> dict[str, float]:
        out = {}
        for block, names in BLOCK_PARAMS.items():
            sub = getattr(self, _BLOCK_FIELD[block])
            out.update({n: float(getattr(sub, n)) for n in names})
        return out

    def with_values(self, check: bool = True, **values: float) -> "MaterialParams":
        """Return a copy with the named flat parameters replaced.

        ``check=False`` skips the invariant checks; optimizers use it for
        trial points that may leave the admissible region temporarily.
        """
        unknown = set(values) - set(ALL_PARAMS)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)}")
        updates = {}
        for block, names in BLOCK_PARAMS.items():
            sub_vals = {n: float(values[n]) for n in names if n in values}
            if sub_vals:
                attr = _BLOCK_FIELD[block]
                old = getattr(self, attr)
                updates[attr] = replace(old, **sub_vals) if check else _unchecked(old, sub_vals)
        return replace(self, **updates)


def _unchecked(obj, values):
    new = object.__new__(type(obj))
    for f in fields(obj):
        object.__setattr__(new, f.name, values.get(f.name, getattr(obj, f.name)))
    return new


def reference_params() -> MaterialParams:
    """Nonlinear least-squares estimates of the reference epoxy system."""
    return MaterialParams(
        tg=GlassTransitionParams(r_f=4.4103e-01, theta_g0=-4.1895966e01, theta_g1=1.403569e02),
        kin=CuringKineticsParams(
            a_pre=5.01265e07, e_act=7.6594406e04, g_fac=3.517027e-01, n_exp=1.4075975, b_d=4.83759159
        ),
        shr=ShrinkageParams(
            alpha_theta=7.5878502e-04,
            alpha_c=5.413657e-02,
            alpha_theta_c=2.462367e-04,
            alpha_theta_g=6.96241016e-04,
        ),
        cp=HeatCapacityParams(a1=1.52039194e03, a2=3.18668457, a3=2.91465105e02, a4=-1.0017558, a5=6.688759e-02),
        kappa=ConductivityParams(b1=1.8581859821e-01, b2=2.7102864e-01, b3=2.15493632e-02, b4=1.94998300e-01),
    )


# ---------------------------------------------------------------- relations


def glass_transition(c, p: GlassTransitionParams):
    c = np.asarray(c, dtype=float)
    den = 1.0 - (1.0 - p.r_f) * c
    if np.any(den <= 0):
        raise ValueError("glass transition denominator is not positive")
    return p.r_f * c / den * (p.theta_g1 - p.theta_g0) + p.theta_g0


def _tg_ratio_parts(c, p: GlassTransitionParams):
    c = np.asarray(c, dtype=float)
    den = 1.0 - (1.0 - p.r_f) * c
    ratio = p.r_f * c / den
    span = p.theta_g1 - p.theta_g0
    grads = {
        "r_f": c * (1.0 - c) / den**2 * span,
        "theta_g0": 1.0 - ratio,
        "theta_g1": ratio,
    }
    dtg_dc = p.r_f / den**2 * span
    return ratio * span + p.theta_g0, grads, dtg_dc


def _autocatalytic_base(c, g):
    return np.maximum(g + (1.0 - g) * c - c * c, 0.0)


def diffusion_factor(theta, c, kp: CuringKineticsParams, gp: GlassTransitionParams):
    """Diffusion cut-off; equals 1/2 exactly where theta equals the glass transition."""
    # 0.5 (1 - tanh u) written as a logistic function; no cancellation for large u
    return expit(-2.0 * (glass_transition(c, gp) - theta) / kp.b_d)


def curing_rate(theta, c, kp: CuringKineticsParams, gp: GlassTransitionParams):
    """Rate of cure dc/dt in 1/s at temperature ``theta`` [degC]."""
    theta = np.asarray(theta, dtype=float)
    c = np.asarray(c, dtype=float)
    arrhenius = kp.a_pre * np.exp(-kp.e_act / (GAS_CONSTANT * (theta + KELVIN_OFFSET)))
    chem = arrhenius * _autocatalytic_base(c, kp.g_fac) ** kp.n_exp
    return chem * diffusion_factor(theta, c, kp, gp)


def deformation(theta, c, sp: ShrinkageParams, gp: GlassTransitionParams):
    """Volume ratio J = rho_R / rho including thermal expansion and chemical shrinkage."""
    theta = np.asarray(theta, dtype=float)
    c = np.asarray(c, dtype=float)
    vt = theta - sp.theta_ref
    e_rubber = sp.alpha_theta * vt
    e_glass = sp.alpha_theta_g * vt + (sp.alpha_theta - sp.alpha_theta_g) * (glass_transition(c, gp) - sp.theta_ref)
    smooth = sp.d_smooth * np.logaddexp(e_rubber / sp.d_smooth, e_glass / sp.d_smooth)
    return smooth - sp.alpha_c * c - sp.alpha_theta_c * vt * c + 1.0


def specific_heat(theta, c, hp: HeatCapacityParams, gp: GlassTransitionParams):
    theta = np.asarray(theta, dtype=float)
    return hp.a1 + hp.a2 * theta + (hp.a3 + hp.a4 * theta) * np.tanh(hp.a5 * (theta - glass_transition(c, gp)))


def conductivity(theta, c, kp: ConductivityParams):
    theta = np.asarray(theta, dtype=float)
    c = np.asarray(c, dtype=float)
    k_b = kp.b3 * (theta - kp.theta_ref) / kp.theta_ref + kp.b4
    uncured = kp.d_tilde * (np.logaddexp(kp.b2 / kp.d_tilde, k_b / kp.d_tilde) - np.log(2.0))
    return kp.b1 * c + uncured * (1.0 - c)


# ---------------------------------------------------------------- derivatives

RELATIONS = ("glass_transition", "curing_rate", "deformation", "specific_heat", "conductivity")


def evaluate(relation_id: str, theta, c, params: MaterialParams):
    """Evaluate a relation by name on the full material parameter set."""
    if relation_id == "glass_transition":
        return glass_transition(c, params.tg) + 0.0 * np.asarray(theta, dtype=float)
    if relation_id == "curing_rate":
        return curing_rate(theta, c, params.kin, params.tg)
    if relation_id == "deformation":
        return deformation(theta, c, params.shr, params.tg)
    if relation_id == "specific_heat":
        return specific_heat(theta, c, params.cp, params.tg)
    if relation_id == "conductivity":
        return conductivity(theta, c, params.kappa)
    raise ValueError(f"unknown relation {relation_id!r}")


def _rate_parts(theta, c, kp, gp):
    theta = np.asarray(theta, dtype=float)
    c = np.asarray(c, dtype=float)
    temp_k = theta + KELVIN_OFFSET
    arr = kp.a_pre * np.exp(-kp.e_act / (GAS_CONSTANT * temp_k))
    base = _autocatalytic_base(c, kp.g_fac)
    active = base > 0
    safe = np.where(active, base, 1.0)
    powered = np.where(active, safe**kp.n_exp, 0.0)
    tg, tg_grads, dtg_dc = _tg_ratio_parts(c, gp)
    u = (tg - theta) / kp.b_d
    fd = expit(-2.0 * u)
    sech2 = _sech2(u)
    return temp_k, arr, base, active, safe, powered, tg_grads, dtg_dc, u, fd, sech2


def param_gradient(relation_id: str, theta, c, params: MaterialParams) -> dict[str, np.ndarray]:
    """Analytic partial derivatives of a relation with respect to its parameters.

    Relations that depend on the glass transition temperature also report
    derivatives with respect to ``r_f``, ``theta_g0`` and ``theta_g1``.
    """
    theta = np.asarray(theta, dtype=float)
    c = np.asarray(c, dtype=float)
    shape = np.broadcast(theta, c).shape
    gp = params.tg

    if relation_id == "glass_transition":
        _, grads, _ = _tg_ratio_parts(c, gp)
        return {k: np.broadcast_to(v, shape).copy() for k, v in grads.items()}

    if relation_id == "curing_rate":
        kp = params.kin
        temp_k, arr, base, active, safe, powered, tg_grads, _, u, fd, sech2 = _rate_parts(theta, c, kp, gp)
        rate = arr * powered * fd
        dfd_du = -0.5 * sech2
        out = {
            "a_pre": rate / kp.a_pre,
            "e_act": -rate / (GAS_CONSTANT * temp_k),
            "g_fac": np.where(
                active, arr * kp.n_exp * safe ** (kp.n_exp - 1.0) * (1.0 - c) * fd, 0.0
            ),
            "n_exp": np.where(active, rate * np.log(safe), 0.0),
            "b_d": arr * powered * dfd_du * (-u / kp.b_d),
        }
        for name, dtg in tg_grads.items():
            out[name] = arr * powered * dfd_du * dtg / kp.b_d
        return {k: np.broadcast_to(v, shape).copy() for k, v in out.items()}

    if relation_id == "deformation":
        sp = params.shr
        tg, tg_grads, _ = _tg_ratio_parts(c, gp)
        vt = theta - sp.theta_ref
        w_r, w_g = _lse_weights(sp.alpha_theta * vt, sp.alpha_theta_g * vt + (sp.alpha_theta - sp.alpha_theta_g) * (tg - sp.theta_ref), sp.d_smooth)
        out = {
            "alpha_theta": w_r * vt + w_g * (tg - sp.theta_ref),
            "alpha_c": -c + 0.0 * theta,
            "alpha_theta_c": -vt * c,
            "alpha_theta_g": w_g * (vt - (tg - sp.theta_ref)),
        }
        for name, dtg in tg_grads.items():
            out[name] = w_g * (sp.alpha_theta - sp.alpha_theta_g) * dtg
        return {k: np.broadcast_to(v, shape).copy() for k, v in out.items()}

    if relation_id == "specific_heat":
        hp = params.cp
        tg, tg_grads, _ = _tg_ratio_parts(c, gp)
        th = np.tanh(hp.a5 * (theta - tg))
        sech2 = _sech2(hp.a5 * (theta - tg))
        amp = hp.a3 + hp.a4 * theta
        out = {
            "a1": np.ones(shape),
            "a2": theta + 0.0 * c,
            "a3": th,
            "a4": theta * th,
            "a5": amp * sech2 * (theta - tg),
        }
        for name, dtg in tg_grads.items():
            out[name] = -amp * sech2 * hp.a5 * dtg
        return {k: np.broadcast_to(v, shape).copy() for k, v in out.items()}

    if relation_id == "conductivity":
        kp = params.kappa
        rel = (theta - kp.theta_ref) / kp.theta_ref
        w_a, w_b = _lse_weights(kp.b2 + 0.0 * theta, kp.b3 * rel + kp.b4, kp.d_tilde)
        out = {
            "b1": c + 0.0 * theta,
            "b2": (1.0 - c) * w_a,
            "b3": (1.0 - c) * w_b * rel,
            "b4": (1.0 - c) * w_b,
        }
        return {k: np.broadcast_to(v, shape).copy() for k, v in out.items()}

    raise ValueError(f"unknown relation {relation_id!r}")


def state_gradient(relation_id: str, theta, c, params: MaterialParams):
    """Return ``(d/dtheta, d/dc)`` of a relation."""
    theta = np.asarray(theta, dtype=float)
    c = np.asarray(c, dtype=float)
    gp = params.tg
    zero = np.zeros(np.broadcast(theta, c).shape)

    if relation_id == "glass_transition":
        _, _, dtg_dc = _tg_ratio_parts(c, gp)
        return zero, dtg_dc + zero

    if relation_id == "curing_rate":
        kp = params.kin
        temp_k, arr, base, active, safe, powered, _, dtg_dc, u, fd, sech2 = _rate_parts(theta, c, kp, gp)
        d_arr = arr * kp.e_act / (GAS_CONSTANT * temp_k**2)
        d_base_dc = (1.0 - kp.g_fac) - 2.0 * c
        d_pow_dc = np.where(active, kp.n_exp * safe ** (kp.n_exp - 1.0) * d_base_dc, 0.0)
        dfd_dtheta = 0.5 * sech2 / kp.b_d
        dfd_dc = -0.5 * sech2 * dtg_dc / kp.b_d
        return (
            d_arr * powered * fd + arr * powered * dfd_dtheta + zero,
            arr * d_pow_dc * fd + arr * powered * dfd_dc + zero,
        )

    if relation_id == "deformation":
        sp = params.shr
        tg, _, dtg_dc = _tg_ratio_parts(c, gp)
        vt = theta - sp.theta_ref
        w_r, w_g = _lse_weights(sp.alpha_theta * vt, sp.alpha_theta_g * vt + (sp.alpha_theta - sp.alpha_theta_g) * (tg - sp.theta_ref), sp.d_smooth)
        return (
            w_r * sp.alpha_theta + w_g * sp.alpha_theta_g - sp.alpha_theta_c * c + zero,
            w_g * (sp.alpha_theta - sp.alpha_theta_g) * dtg_dc - sp.alpha_c - sp.alpha_theta_c * vt + zero,
        )

    if relation_id == "specific_heat":
        hp = params.cp
        tg, _, dtg_dc = _tg_ratio_parts(c, gp)
        th = np.tanh(hp.a5 * (theta - tg))
        sech2 = _sech2(hp.a5 * (theta - tg))
        amp = hp.a3 + hp.a4 * theta
        return (
            hp.a2 + hp.a4 * th + amp * sech2 * hp.a5 + zero,
            -amp * sech2 * hp.a5 * dtg_dc + zero,
        )

    if relation_id == "conductivity":
        kp = params.kappa
        rel = (theta - kp.theta_ref) / kp.theta_ref
        w_a, w_b = _lse_weights(kp.b2 + 0.0 * theta, kp.b3 * rel + kp.b4, kp.d_tilde)
        uncured = kp.d_tilde * (np.logaddexp(kp.b2 / kp.d_tilde, (kp.b3 * rel + kp.b4) / kp.d_tilde) - np.log(2.0))
        return (1.0 - c) * w_b * kp.b3 / kp.theta_ref + zero, kp.b1 - uncured + zero

    raise ValueError(f"unknown relation {relation_id!r}")


def _lse_weights(x1, x2, scale):
    """Softmax weights of the smooth maximum ``scale * log(exp(x1/scale) + exp(x2/scale))``."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    return expit((x1 - x2) / scale), expit((x2 - x1) / scale)


def _sech2(x):
    """``1 - tanh(x)**2`` without cancellation in the tails."""
    return 4.0 * expit(2.0 * x) * expit(-2.0 * x)
