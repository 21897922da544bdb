"""Transient 1D heat conduction with an exothermic curing source.

The slab is a stack of layers discretized by cell-centred finite volumes
(lumped capacity, series conductances at interfaces). Time integration uses
the two-stage L-stable SDIRK method of Ellsiepen with an embedded first
order solution and a PI step-size controller.

State ordering interleaves the nodal fields, ``y = (theta_0, c_0, theta_1,
c_1, ...)``, so the Jacobian has two sub- and two super-diagonals.
Temperatures are in degC; radiation uses Kelvin.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.linalg import solve_banded

from . import constitutive as cm

SIGMA_SB = 5.67e-8  # W/(m^2 K^4)

# Ellsiepen SDIRK(2,1)
GAMMA = 1.0 - math.sqrt(2.0) / 2.0
A_DIRK = np.array([[GAMMA, 0.0], [1.0 - GAMMA, GAMMA]])
C_DIRK = np.array([GAMMA, 1.0])
B_DIRK = np.array([1.0 - GAMMA, GAMMA])
B_HAT = np.array([2.0 - 5.0 * math.sqrt(2.0) / 4.0, -1.0 + 5.0 * math.sqrt(2.0) / 4.0])


class SimulationError(RuntimeError):
    pass


def stability_function(z, b=B_DIRK):
    """``R(z)`` of the SDIRK tableau with weights ``b`` for ``y' = lambda y``."""
    z = np.asarray(z, dtype=complex)
    eye = np.eye(2)
    out = np.empty(z.shape, dtype=complex)
    for idx, zi in np.ndenumerate(z):
        stages = np.linalg.solve(eye - zi * A_DIRK, np.ones(2))
        out[idx] = 1.0 + zi * (b @ stages)
    return out


# ---------------------------------------------------------------- boundary conditions


@dataclass(frozen=True)
class DirichletPath:
    """Piecewise-linear temperature path ``[(t, theta), ...]``, constant beyond its ends."""

    nodes: tuple

    def __post_init__(self):
        nodes = tuple((float(t), float(v)) for t, v in self.nodes)
        if not nodes:
            raise ValueError("path needs at least one node")
        times = [t for t, _ in nodes]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("path node times must be strictly increasing")
        object.__setattr__(self, "nodes", nodes)

    def value(self, t) -> float:
        times, vals = zip(*self.nodes)
        return float(np.interp(t, times, vals))

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return tuple(t for t, _ in self.nodes)


@dataclass(frozen=True)
class Adiabatic:
    pass


@dataclass(frozen=True)
class Mixed:
    """Convection plus radiation to an ambient temperature path."""

    h: float
    eps: float
    ambient: DirichletPath

    def __post_init__(self):
        if self.h < 0:
            raise ValueError("h must be non-negative")
        if not 0.0 <= self.eps <= 1.0:
            raise ValueError("eps must lie in [0, 1]")

    def flux(self, theta_s, t):
        """Outward heat flux density [W/m^2]."""
        amb = self.ambient.value(t)
        ts, ta = theta_s + cm.KELVIN_OFFSET, amb + cm.KELVIN_OFFSET
        return self.h * (theta_s - amb) + SIGMA_SB * self.eps * (ts**4 - ta**4)


BoundaryCondition = Union[DirichletPath, Adiabatic, Mixed]


def _breakpoints(bc) -> tuple[float, ...]:
    if isinstance(bc, DirichletPath):
        return bc.breakpoints
    if isinstance(bc, Mixed):
        return bc.ambient.breakpoints
    return ()


# ---------------------------------------------------------------- domain


@dataclass(frozen=True)
class Epoxy:
    params: cm.MaterialParams
    h_c: float  # J/kg
    rho_ref: float = 1150.0

    def __post_init__(self):
        if self.h_c < 0:
            raise ValueError("h_c must be non-negative")
        if not self.rho_ref > 0:
            raise ValueError("rho_ref must be positive")


@dataclass(frozen=True)
class Inert:
    rho: float
    cp: float
    kappa: float

    def __post_init__(self):
        if not (self.rho > 0 and self.cp > 0 and self.kappa > 0):
            raise ValueError("material constants must be positive")


ALUMINUM = Inert(rho=2700.0, cp=897.0, kappa=235.0)


@dataclass(frozen=True)
class Layer:
    material: Union[Epoxy, Inert]
    thickness: float  # m
    cells: int

    def __post_init__(self):
        if not self.thickness > 0:
            raise ValueError("thickness must be positive")
        if self.cells < 1:
            raise ValueError("a layer needs at least one cell")


@dataclass(frozen=True)
class SimDomain:
    """Layers ordered from the low (x = 0) to the high boundary."""

    layers: tuple
    bc_low: BoundaryCondition
    bc_high: BoundaryCondition
    theta0: Optional[float] = None  # default: low boundary value at t = 0
    c0: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if sum(layer.cells for layer in self.layers) < 3:
            raise ValueError("need at least 3 cells in total")
        if not 0.0 <= self.c0 <= 1.0:
            raise ValueError("c0 must lie in [0, 1]")

    @property
    def n_nodes(self) -> int:
        return sum(layer.cells for layer in self.layers)

    def breakpoints(self) -> tuple[float, ...]:
        return tuple(sorted(set(_breakpoints(self.bc_low) + _breakpoints(self.bc_high))))

    def initial_theta(self) -> float:
        if self.theta0 is not None:
            return float(self.theta0)
        for bc in (self.bc_low, self.bc_high):
            if isinstance(bc, DirichletPath):
                return bc.value(0.0)
            if isinstance(bc, Mixed):
                return bc.ambient.value(0.0)
        raise ValueError("theta0 required when no boundary carries a temperature path")


# ---------------------------------------------------------------- semi-discretization


class Semidiscretization:
    """Method-of-lines right-hand side ``y' = f(t, y)`` of a layered slab."""

    # (lower, upper) in the interleaved (theta, c) ordering; theta_i sees c_{i+1} through kappa
    bandwidth = (2, 3)

    def __init__(self, domain: SimDomain):
        self.domain = domain
        dx, owner = [], []
        for li, layer in enumerate(domain.layers):
            dx += [layer.thickness / layer.cells] * layer.cells
            owner += [li] * layer.cells
        self.dx = np.array(dx)
        self.owner = np.array(owner)
        self.n_nodes = self.dx.size
        self.n_state = 2 * self.n_nodes
        self.x = np.cumsum(self.dx) - 0.5 * self.dx
        self.epoxy_layers = [li for li, layer in enumerate(domain.layers) if isinstance(layer.material, Epoxy)]
        self.is_epoxy = np.isin(self.owner, self.epoxy_layers)
        bounds = np.concatenate([[0], np.cumsum([layer.cells for layer in domain.layers])])
        self.slices = [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
        self.h_c = np.zeros(self.n_nodes)
        for li in self.epoxy_layers:
            self.h_c[self.slices[li]] = domain.layers[li].material.h_c

    def initial_state(self) -> np.ndarray:
        y = np.empty(self.n_state)
        y[0::2] = self.domain.initial_theta()
        y[1::2] = np.where(self.is_epoxy, self.domain.c0, 0.0)
        return y

    def properties(self, theta, c):
        """Nodal density, heat capacity, conductivity and cure rate."""
        rho = np.empty(self.n_nodes)
        cp = np.empty(self.n_nodes)
        kappa = np.empty(self.n_nodes)
        rate = np.zeros(self.n_nodes)
        for li, layer in enumerate(self.domain.layers):
            m = self.slices[li]
            mat = layer.material
            if isinstance(mat, Inert):
                rho[m], cp[m], kappa[m] = mat.rho, mat.cp, mat.kappa
                continue
            p = mat.params
            th, cc = theta[m], np.clip(c[m], 0.0, 1.0)
            rho[m] = mat.rho_ref / cm.deformation(th, cc, p.shr, p.tg)
            cp[m] = cm.specific_heat(th, cc, p.cp, p.tg)
            kappa[m] = cm.conductivity(th, cc, p.kappa)
            rate[m] = np.maximum(cm.curing_rate(th, cc, p.kin, p.tg), 0.0)
        return rho, cp, kappa, rate

    def heat_flux(self, t, theta, kappa):
        """Face fluxes ``q`` in +x direction, length ``n_nodes + 1``."""
        half = 0.5 * self.dx / kappa
        q = np.empty(self.n_nodes + 1)
        q[1:-1] = -(theta[1:] - theta[:-1]) / (half[:-1] + half[1:])
        lo, hi = self.domain.bc_low, self.domain.bc_high
        if isinstance(lo, DirichletPath):
            q[0] = -(theta[0] - lo.value(t)) / half[0]
        elif isinstance(lo, Mixed):
            q[0] = -lo.flux(theta[0], t)
        else:
            q[0] = 0.0
        if isinstance(hi, DirichletPath):
            q[-1] = -(hi.value(t) - theta[-1]) / half[-1]
        elif isinstance(hi, Mixed):
            q[-1] = hi.flux(theta[-1], t)
        else:
            q[-1] = 0.0
        return q

    def rhs(self, t, y) -> np.ndarray:
        theta, c = y[0::2], y[1::2]
        rho, cp, kappa, rate = self.properties(theta, c)
        q = self.heat_flux(t, theta, kappa)
        out = np.empty_like(y)
        out[0::2] = (q[:-1] - q[1:]) / (rho * cp * self.dx)
        out[0::2] += self.h_c / cp * rate
        out[1::2] = rate
        return out

    def enthalpy(self, y) -> float:
        """Total sensible heat ``sum rho c_p theta dx`` per unit area [J/m^2]."""
        theta, c = y[0::2], y[1::2]
        rho, cp, _, _ = self.properties(theta, c)
        return float(np.sum(rho * cp * theta * self.dx))

    def weights(self, y, options: "SolverOptions") -> np.ndarray:
        atol = np.empty_like(y)
        atol[0::2] = options.abs_tol_theta
        atol[1::2] = options.abs_tol_c
        return atol + options.rel_tol * np.abs(y)


_COLOURING_CACHE: dict = {}


def _colouring(n: int, lo: int, up: int):
    """Per colour: band rows, columns and source rows of the banded scatter."""
    key = (n, lo, up)
    if key not in _COLOURING_CACHE:
        width = lo + up + 1
        out = []
        for colour in range(min(width, n)):
            cols = np.arange(colour, n, width)
            band, col, src = [], [], []
            for j in cols:
                rows = np.arange(max(0, j - up), min(n, j + lo + 1))
                band.append(up + rows - j)
                col.append(np.full(rows.size, j))
                src.append(rows)
            out.append((cols, np.concatenate(band), np.concatenate(col), np.concatenate(src)))
        _COLOURING_CACHE[key] = out
    return _COLOURING_CACHE[key]


def banded_jacobian(system, t, y, f0=None) -> np.ndarray:
    """Finite-difference Jacobian in ``solve_banded`` storage, one rhs call per colour."""
    lo, up = system.bandwidth
    n = y.size
    f0 = system.rhs(t, y) if f0 is None else f0
    ab = np.zeros((lo + up + 1, n))
    h = 1e-7 * np.maximum(np.abs(y), 1.0)
    for cols, band, col, src in _colouring(n, lo, up):
        yp = y.copy()
        yp[cols] += h[cols]
        df = system.rhs(t, yp) - f0
        ab[band, col] = df[src] / h[col]
    return ab


# ---------------------------------------------------------------- time integration


@dataclass(frozen=True)
class SolverOptions:
    rel_tol: float = 1e-4
    abs_tol_theta: float = 1e-2  # K
    abs_tol_c: float = 1e-4
    dt_init: float = 0.1  # s
    dt_min: float = 1e-8
    dt_max: float = 1e4
    newton_tol: float = 1e-8
    newton_max_iter: int = 8
    k_p: float = 0.4 / 2
    k_i: float = 0.3 / 2
    safety: float = 0.9
    growth_min: float = 0.2
    growth_max: float = 5.0
    max_steps: int = 200000

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol_theta > 0 and self.abs_tol_c > 0 and self.newton_tol > 0):
            raise ValueError("tolerances must be positive")
        if not 0 < self.dt_min < self.dt_max:
            raise ValueError("need 0 < dt_min < dt_max")


def _rms(v) -> float:
    return float(np.sqrt(np.mean(v * v)))


def _solve_stage(system, t_stage, y_known, a_dt, y_guess, w, options):
    """Newton on ``Y - a_dt f(t, Y) = y_known``; returns ``(Y, f(Y))`` or ``None``."""
    lo, up = system.bandwidth
    y = y_guess.copy()
    for _ in range(options.newton_max_iter):
        f = system.rhs(t_stage, y)
        g = y - a_dt * f - y_known
        ab = -a_dt * banded_jacobian(system, t_stage, y, f)
        ab[up] += 1.0
        dy = solve_banded((lo, up), ab, -g)
        if not np.all(np.isfinite(dy)):
            return None
        y = y + dy
        if _rms(dy / w) <= options.newton_tol:
            return y, system.rhs(t_stage, y)
    return None


def step_dirk(system, y, t, dt, options: SolverOptions = SolverOptions()):
    """One Ellsiepen step; returns ``(y_new, err)`` or ``(None, inf)`` if Newton fails.

    ``err`` is the weighted RMS of the difference to the embedded first
    order solution.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    w = system.weights(y, options)
    k = []
    guess = y
    for i in range(2):
        known = y + dt * sum(A_DIRK[i, j] * k[j] for j in range(i))
        sol = _solve_stage(system, t + C_DIRK[i] * dt, known, dt * A_DIRK[i, i], guess, w, options)
        if sol is None:
            return None, math.inf
        guess, f = sol
        k.append(f)
    y_new = y + dt * (B_DIRK[0] * k[0] + B_DIRK[1] * k[1])
    diff = dt * ((B_DIRK[0] - B_HAT[0]) * k[0] + (B_DIRK[1] - B_HAT[1]) * k[1])
    return y_new, _rms(diff / system.weights(y_new, options))


@dataclass
class SimResult:
    times: np.ndarray
    dts: np.ndarray  # accepted step sizes, length len(times) - 1
    theta: np.ndarray  # (n_times, n_nodes)
    cure: np.ndarray
    x: np.ndarray
    probes: dict
    n_rejected: int = 0
    n_clamped: int = 0

    def probe_series(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        i = self.probes[name]
        return self.times, self.theta[:, i], self.cure[:, i]


def _post_process(y_new, y_old, is_epoxy, abs_tol_c):
    """Clamp cure to ``[c_old, 1]``; count corrections larger than the tolerance."""
    c_new, c_old = y_new[1::2], y_old[1::2]
    target = np.where(is_epoxy, np.clip(np.maximum(c_new, c_old), 0.0, 1.0), 0.0)
    n_big = int(np.sum(np.abs(target - c_new) > abs_tol_c))
    y_new = y_new.copy()
    y_new[1::2] = target
    return y_new, n_big


def integrate_adaptive(
    domain: Union[SimDomain, Semidiscretization],
    options: SolverOptions = SolverOptions(),
    t_end: float = 1.0,
    probes: Optional[dict] = None,
    y0: Optional[np.ndarray] = None,
) -> SimResult:
    """Integrate from ``t = 0`` to ``t_end`` with PI step-size control."""
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    system = domain if isinstance(domain, Semidiscretization) else Semidiscretization(domain)
    breaks = [b for b in system.domain.breakpoints() if 0.0 < b < t_end] + [t_end]
    y = system.initial_state() if y0 is None else np.asarray(y0, dtype=float).copy()
    t, dt = 0.0, options.dt_init
    err_prev = 1.0
    times, states, dts = [0.0], [y.copy()], []
    n_rej = n_clamp = 0
    bi = 0
    for _ in range(options.max_steps):
        if t >= t_end:
            break
        while breaks[bi] <= t:
            bi += 1
        dt = min(max(dt, options.dt_min), options.dt_max)
        step = min(dt, breaks[bi] - t)
        hits_break = step < dt or math.isclose(t + step, breaks[bi])
        y_new, err = step_dirk(system, y, t, step, options)
        if y_new is not None and err <= 1.0:
            y_new, big = _post_process(y_new, y, system.is_epoxy, options.abs_tol_c)
            n_clamp += big
            t = breaks[bi] if hits_break else t + step
            y = y_new
            times.append(t)
            states.append(y.copy())
            dts.append(step)
            e = max(err, 1e-10)
            fac = options.safety * (1.0 / e) ** options.k_i * (err_prev / e) ** options.k_p
            err_prev = e
            # a step cut short by a breakpoint does not limit the next proposal
            dt = max(dt, step) if hits_break else step
            dt *= min(max(fac, options.growth_min), options.growth_max)
        else:
            n_rej += 1
            if y_new is None:
                fac = 0.25
            else:
                fac = min(max(options.safety * (1.0 / err) ** 0.5, options.growth_min), 0.9)
            dt = step * fac
            if dt < options.dt_min:
                raise SimulationError(f"step size below dt_min at t = {t:.6g} s after repeated rejection")
    else:
        raise SimulationError(f"max_steps exhausted at t = {t:.6g} s")
    states = np.array(states)
    probes = dict(probes or {})
    return SimResult(
        times=np.array(times),
        dts=np.array(dts),
        theta=states[:, 0::2],
        cure=states[:, 1::2],
        x=system.x,
        probes=probes,
        n_rejected=n_rej,
        n_clamped=n_clamp,
    )


# ---------------------------------------------------------------- default scenario


HOUR = 3600.0


PATH_TEMPS = (20.0, 60.0, 60.0, 120.0, 120.0, 20.0, 20.0)


def curing_path(temps: Sequence[float] = PATH_TEMPS, holds=(8 * HOUR, 4 * HOUR, 2 * HOUR), ramp: float = 600.0):
    """Oven path through seven node temperatures: ramp, pre-cure hold, ramp, post-cure hold, ramp, cooling hold."""
    if len(temps) != 7:
        raise ValueError("the curing path has seven node temperatures")
    times = [0.0]
    for hold in holds:
        times += [times[-1] + ramp, times[-1] + ramp + hold]
    return DirichletPath(tuple(zip(times, temps)))


def path_times(holds=(8 * HOUR, 4 * HOUR, 2 * HOUR), ramp: float = 600.0) -> tuple[float, ...]:
    return curing_path(holds=holds, ramp=ramp).breakpoints


@dataclass(frozen=True)
class ScenarioConfig:
    """1D stand-in: aluminum base (oven path at the bottom) under an epoxy layer (mixed top)."""

    h_c: float
    epoxy_thickness: float = 0.010
    aluminum_thickness: float = 0.005
    epoxy_cells: int = 40
    aluminum_cells: int = 8
    h_conv: float = 40.0
    emissivity: float = 0.8
    rho_ref: float = 1150.0
    path_nodes: Optional[tuple] = None
    c0: float = 0.0

    def path(self) -> DirichletPath:
        return DirichletPath(self.path_nodes) if self.path_nodes is not None else curing_path()


def default_domain(config: ScenarioConfig, params: Optional[cm.MaterialParams] = None, bc_high=None) -> SimDomain:
    params = cm.reference_params() if params is None else params
    path = config.path()
    layers = (
        Layer(ALUMINUM, config.aluminum_thickness, config.aluminum_cells),
        Layer(Epoxy(params, config.h_c, config.rho_ref), config.epoxy_thickness, config.epoxy_cells),
    )
    top = Mixed(config.h_conv, config.emissivity, path) if bc_high is None else bc_high
    return SimDomain(layers, path, top, c0=config.c0)


def run_default_scenario(
    config: ScenarioConfig,
    params: Optional[cm.MaterialParams] = None,
    options: SolverOptions = SolverOptions(),
    bc_high=None,
    t_end: Optional[float] = None,
) -> SimResult:
    """Full curing path; probe ``"top"`` is the uppermost epoxy node."""
    if config.h_c is None:
        raise ValueError("h_c must be configured")
    domain = default_domain(config, params, bc_high)
    t_end = domain.bc_low.breakpoints[-1] if t_end is None else t_end
    probes = {"top": domain.n_nodes - 1, "bottom_epoxy": config.aluminum_cells}
    return integrate_adaptive(domain, options, t_end, probes)


# ---------------------------------------------------------------- output


def write_probe_csv(result: SimResult, path, oven: Optional[DirichletPath] = None) -> None:
    """Time series of every probe, plus the accepted step size leading to each time."""
    names = sorted(result.probes)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["t", "dt"] + [f"{p}_{q}" for p in names for q in ("theta", "c")]
        if oven is not None:
            header.append("oven")
        writer.writerow(header)
        for k, t in enumerate(result.times):
            row = [repr(float(t)), repr(float(result.dts[k - 1])) if k else ""]
            for p in names:
                i = result.probes[p]
                row += [repr(float(result.theta[k, i])), repr(float(result.cure[k, i]))]
            if oven is not None:
                row.append(repr(oven.value(t)))
            writer.writerow(row)
