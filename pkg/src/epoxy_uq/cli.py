"""Command line front end.

Every command writes its result files plus ``manifest.json`` into the
output directory. Result files depend only on the configuration and the
seed; the manifest additionally records versions, timings and a creation
time stamp.

Configuration files are TOML. Units: temperatures in degC, times in s,
lengths in m, ``h_c`` in J/kg, ``h_conv`` in W/(m^2 K).

Exit codes: 0 success, 1 domain error (failed fit, failed simulation, too
many failed repetitions), 2 usage error (bad arguments, missing paths,
invalid configuration).
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np
import scipy

from . import constitutive as cm
from .calibrate import CalibrationError, Dataset, NLSOptions, load_dataset_csv, save_dataset_csv
from .coverage import CASE_IDS, NOISE_TYPES, CoverageCase, CoverageError, generate_insilico, run_coverage
from .coverage import case_predictors, write_report_csv, write_report_json
from .forward_uq import DEFAULT_N_MC, MODES, ForwardScenario, ForwardUQError, fosm_forward, mc_forward
from .forward_uq import study_inputs, write_uq_csv
from .models import STEP_IDS, PipelineDesign, clean_response, default_steps, design_predictors, synthetic_datasets
from .pipeline import PipelineError, result_to_json, run_pipeline
from .simulate import ScenarioConfig, SimulationError, SolverOptions, run_default_scenario, write_probe_csv
from .stats import rng_stream

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger("epoxy_uq")

DATA_ENV = "EPOXY_UQ_DATA"
MANIFEST = "manifest.json"
KINETICS_STEPS = ("chem", "diff")
DOMAIN_ERRORS = (CalibrationError, PipelineError, CoverageError, SimulationError, ForwardUQError, ValueError)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config


@dataclasses.dataclass
class RunConfig:
    command: str
    config_path: Optional[Path]
    data_dir: Optional[Path]
    out_dir: Path
    seed: int
    workers: int = 1
    log_level: str = "WARNING"
    settings: dict = dataclasses.field(default_factory=dict)


def load_config(path: Optional[Path]) -> tuple[dict, str]:
    """Parsed TOML table and the SHA-256 of the file bytes (empty config: hash of nothing)."""
    if path is None:
        return {}, hashlib.sha256(b"").hexdigest()
    if not path.is_file():
        raise UsageError(f"config file {path} does not exist")
    raw = path.read_bytes()
    try:
        return tomllib.loads(raw.decode("utf-8")), hashlib.sha256(raw).hexdigest()
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from exc


def _build(cls, table: Mapping[str, Any], section: str, **extra):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(table) - names
    if unknown:
        raise UsageError(f"unknown keys in [{section}]: {sorted(unknown)}")
    kwargs = dict(table)
    kwargs.update(extra)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid [{section}]: {exc}") from exc


def scenario_from_config(cfg: Mapping[str, Any]) -> ScenarioConfig:
    table = dict(cfg.get("scenario", {}))
    if "h_c" not in table:
        raise UsageError("[scenario] h_c (total reaction enthalpy, J/kg) must be given")
    if "path_nodes" in table:
        table["path_nodes"] = tuple((float(t), float(v)) for t, v in table["path_nodes"])
    return _build(ScenarioConfig, table, "scenario")


def solver_from_config(cfg: Mapping[str, Any]) -> SolverOptions:
    return _build(SolverOptions, cfg.get("solver", {}), "solver")


def base_params(cfg: Mapping[str, Any]) -> cm.MaterialParams:
    """Reference parameter values with overrides from ``[parameters]``."""
    over = cfg.get("parameters", {})
    try:
        return cm.reference_params().with_values(**{k: float(v) for k, v in over.items()})
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid [parameters]: {exc}") from exc


def nls_options(cfg: Mapping[str, Any]) -> NLSOptions:
    table = {k: v for k, v in cfg.get("calibration", {}).items() if k in {f.name for f in dataclasses.fields(NLSOptions)}}
    return _build(NLSOptions, table, "calibration")


# ---------------------------------------------------------------- data files


def write_datasets(data: Mapping[str, Dataset], out: Path) -> list[str]:
    """One CSV per step; chemical and diffusion kinetics are written per isotherm.

    Kinetics files carry a ``diffusion`` column (0 chemical regime, 1
    diffusion regime) so that reading them back restores both datasets in
    their original row order.
    """
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for sid, ds in data.items():
        if sid in KINETICS_STEPS:
            continue
        name = f"{sid}.csv"
        save_dataset_csv(ds, out / name)
        written.append(name)
    if any(s in data for s in KINETICS_STEPS):
        parts = [(i, data[s]) for i, s in enumerate(KINETICS_STEPS) if s in data]
        temps = sorted({float(t) for _, ds in parts for t in ds["theta"]})
        for temp in temps:
            cols = {"theta": [], "c": [], "diffusion": []}
            obs = []
            for flag, ds in parts:
                m = ds["theta"] == temp
                cols["theta"].append(ds["theta"][m])
                cols["c"].append(ds["c"][m])
                cols["diffusion"].append(np.full(m.sum(), float(flag)))
                obs.append(ds.observations[m])
            merged = Dataset({k: np.concatenate(v) for k, v in cols.items()}, np.concatenate(obs), "kinetics")
            name = f"kinetics_{temp:05.1f}C.csv"
            save_dataset_csv(merged, out / name)
            written.append(name)
    return sorted(written)


def read_datasets(data_dir: Path) -> dict[str, Dataset]:
    """Inverse of :func:`write_datasets`."""
    if not data_dir.is_dir():
        raise UsageError(f"data directory {data_dir} does not exist")
    out = {}
    for sid in STEP_IDS:
        path = data_dir / f"{sid}.csv"
        if sid not in KINETICS_STEPS and path.is_file():
            out[sid] = load_dataset_csv(path, "obs", sid)
    files = sorted(data_dir.glob("kinetics_*.csv"))
    if files:
        tables = [load_dataset_csv(p, "obs") for p in files]
        for flag, sid in enumerate(KINETICS_STEPS):
            pieces = [t.subset(t["diffusion"] == flag) for t in tables if np.any(t["diffusion"] == flag)]
            if pieces:
                out[sid] = Dataset(
                    {k: np.concatenate([p[k] for p in pieces]) for k in ("theta", "c")},
                    np.concatenate([p.observations for p in pieces]),
                    sid,
                )
    if not out:
        raise UsageError(f"no dataset files found in {data_dir}")
    return out


# ---------------------------------------------------------------- commands


def _calibration(cfg, data: Mapping[str, Dataset], method: str, n_mc: int, seed: int):
    base = base_params(cfg)
    rho_ref = float(cfg.get("calibration", {}).get("rho_ref", 1150.0))
    steps = [s for s in default_steps(base, rho_ref, nls_options(cfg)) if s.step_id in data]
    return run_pipeline(steps, data, method, n_mc=n_mc, seed=seed)


def _write_calibration(result, out: Path) -> list[str]:
    payload = result_to_json(result, out / "calibration.json")
    written = ["calibration.json"]
    for sid, entry in payload["steps"].items():
        name = f"step_{sid}.json"
        (out / name).write_text(json.dumps(entry, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(name)
    written += [e["empirical_sample"] for e in payload["steps"].values() if "empirical_sample" in e]
    return written


def cmd_calibrate(rc: RunConfig, cfg) -> list[str]:
    data = read_datasets(rc.data_dir)
    result = _calibration(cfg, data, "nls", 0, rc.seed)
    return _write_calibration(result, rc.out_dir)


def cmd_propagate(rc: RunConfig, cfg) -> list[str]:
    table = cfg.get("calibration", {})
    method = rc.settings.get("method") or table.get("method", "fosm")
    if method not in ("fosm", "mc"):
        raise UsageError("propagation method must be fosm or mc")
    n_mc = rc.settings.get("n_mc") or int(table.get("n_mc", 2000))
    rc.settings.update(method=method, n_mc=n_mc)
    data = read_datasets(rc.data_dir)
    return _write_calibration(_calibration(cfg, data, method, n_mc, rc.seed), rc.out_dir)


def _coverage_case(rc: RunConfig, cfg) -> CoverageCase:
    table = dict(cfg.get("coverage", {}))
    for key in ("case_id", "noise", "truth_mode", "n_cov", "n_d", "n_d_tg", "n_per_temp", "n_per_curve", "propagate"):
        if rc.settings.get(key) is not None:
            table[key] = rc.settings[key]
    if "case_id" not in table:
        raise UsageError("coverage needs --case or [coverage] case_id")
    case = _build(CoverageCase, table, "coverage")
    rc.settings.update(dataclasses.asdict(case))
    return case


def cmd_coverage(rc: RunConfig, cfg) -> list[str]:
    case = _coverage_case(rc, cfg)

    def progress(i, n):
        if i % max(1, n // 10) == 0:
            log.info("coverage %s: %d/%d", case.case_id, i, n)

    report = run_coverage(case, rc.seed, base_params(cfg), progress, workers=rc.workers)
    write_report_json(report, rc.out_dir / "coverage.json")
    write_report_csv([report], rc.out_dir / "coverage.csv")
    return ["coverage.csv", "coverage.json"]


def cmd_simulate(rc: RunConfig, cfg) -> list[str]:
    config = scenario_from_config(cfg)
    result = run_default_scenario(config, base_params(cfg), solver_from_config(cfg), t_end=rc.settings.get("t_end"))
    write_probe_csv(result, rc.out_dir / "probes.csv", config.path())
    summary = {
        "n_steps": int(result.dts.size),
        "n_rejected": int(result.n_rejected),
        "n_clamped": int(result.n_clamped),
        "dt_min": float(result.dts.min()),
        "dt_max": float(result.dts.max()),
        "final": {p: {"theta": float(result.theta[-1, i]), "c": float(result.cure[-1, i])} for p, i in sorted(result.probes.items())},
    }
    (rc.out_dir / "simulation.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return ["probes.csv", "simulation.json"]


def cmd_forward_uq(rc: RunConfig, cfg) -> list[str]:
    table = dict(cfg.get("forward", {}))
    mode = rc.settings.get("mode") or table.get("mode", "case_i")
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}; choose from {MODES}")
    k = rc.settings.get("k") or float(table.get("k", 10.0 if mode == "case_ii" else 1.0))
    n_mc = rc.settings.get("n_mc") or int(table.get("n_mc", DEFAULT_N_MC[mode]))
    method = rc.settings.get("method") or table.get("method", "both")
    if method not in ("fosm", "mc", "both"):
        raise UsageError("forward method must be fosm, mc or both")
    probes = tuple(table.get("probes", ("top",)))
    scenario = ForwardScenario(scenario_from_config(cfg), solver_from_config(cfg), probes, int(table.get("n_grid", 2000)))
    rc.settings.update(mode=mode, k=k, n_mc=n_mc, method=method, probes=list(probes), n_grid=scenario.n_grid)

    base = base_params(cfg)
    pipeline = None
    if mode in ("case_i", "case_ii"):
        cal = cfg.get("calibration", {})
        n_cal = int(cal.get("n_mc", 300))
        if rc.data_dir is not None:
            data = read_datasets(rc.data_dir)
        else:
            data = synthetic_datasets(base, rng_stream(rc.seed, 0), PipelineDesign(), float(cal.get("rho_ref", 1150.0)))
        log.info("calibrating material parameters (%d MC re-solves per step)", n_cal)
        pipeline = _calibration(cfg, data, "mc", n_cal, rc.seed)
    inputs = study_inputs(mode, pipeline, k, base)
    results = {}
    if method in ("fosm", "both"):
        log.info("forward FOSM over %d inputs", len(inputs.names))
        results["fosm"] = fosm_forward(scenario, inputs, base)
    if method in ("mc", "both"):
        log.info("forward Monte Carlo with %d samples", n_mc)
        results["mc"] = mc_forward(scenario, inputs, n_mc, rc.seed, base)
    write_uq_csv(results, rc.out_dir / "forward_uq.csv")
    summary = {
        lab: {"n_eval": r.n_eval, "n_failed": r.n_failed, "inputs": list(r.input_names)} for lab, r in results.items()
    }
    (rc.out_dir / "forward_uq.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    rc.settings["runtime_s"] = {lab: r.runtime for lab, r in results.items()}
    return ["forward_uq.csv", "forward_uq.json"]


def cmd_gen_data(rc: RunConfig, cfg) -> list[str]:
    truth = base_params(cfg)
    case_id = rc.settings.get("case_id") or cfg.get("coverage", {}).get("case_id", "pipeline")
    zero = bool(rc.settings.get("zero_noise"))
    rng = rng_stream(rc.seed, 0)
    if case_id == "pipeline":
        design = _build(PipelineDesign, cfg.get("design", {}), "design")
        if zero:
            data = {
                sid: Dataset(dict(p), clean_response(sid, truth, p), sid)
                for sid, p in design_predictors(truth, design).items()
            }
        else:
            data = synthetic_datasets(truth, rng, design)
    else:
        rc.settings["case_id"] = case_id
        case = _coverage_case(rc, cfg)
        if zero:
            data = {
                sid: Dataset(dict(p), clean_response(sid, truth, p), sid) for sid, p in case_predictors(case).items()
            }
        else:
            data = generate_insilico(case, truth, rng)
    written = write_datasets(data, rc.out_dir)
    (rc.out_dir / "truth.json").write_text(json.dumps(truth.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return written + ["truth.json"]


COMMANDS = {
    "calibrate": cmd_calibrate,
    "propagate": cmd_propagate,
    "coverage": cmd_coverage,
    "simulate": cmd_simulate,
    "forward-uq": cmd_forward_uq,
    "gen-data": cmd_gen_data,
}
READS_DATA = ("calibrate", "propagate")


# ---------------------------------------------------------------- argv


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML configuration file")
    common.add_argument("--out", type=Path, default=Path("results"), help="output directory (created)")
    common.add_argument("--seed", type=int, default=None, help="root seed (default: config 'seed' or 0)")
    common.add_argument("--workers", type=int, default=1, help="process pool size where supported")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="epoxy-uq", description="Epoxy curing calibration and uncertainty tools.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    for name in READS_DATA:
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--data", type=Path, default=None, help=f"dataset directory (default: ${DATA_ENV})")
        if name == "propagate":
            p.add_argument("--method", choices=["fosm", "mc"])
            p.add_argument("--nmc", dest="n_mc", type=int)

    def case_flags(p):
        p.add_argument("--case", dest="case_id", choices=list(CASE_IDS) + (["pipeline"] if p.prog.endswith("gen-data") else []))
        p.add_argument("--noise", choices=NOISE_TYPES)
        p.add_argument("--nd", dest="n_d", type=int, help="glass transition points (sparse_tg case)")
        p.add_argument("--nd-tg", dest="n_d_tg", type=int, help="upstream glass transition points")
        p.add_argument("--n-per-temp", dest="n_per_temp", type=int)
        p.add_argument("--n-per-curve", dest="n_per_curve", type=int)

    p = sub.add_parser("coverage", parents=[common])
    case_flags(p)
    p.add_argument("--ncov", dest="n_cov", type=int)
    p.add_argument("--truth-mode", dest="truth_mode", choices=["conditional", "marginal"])
    p.add_argument("--no-propagation", dest="propagate", action="store_const", const=False)

    p = sub.add_parser("simulate", parents=[common])
    p.add_argument("--t-end", dest="t_end", type=float, help="stop time in s (default: end of the oven path)")

    p = sub.add_parser("forward-uq", parents=[common])
    p.add_argument("--data", type=Path, default=None, help="calibration data (default: synthetic)")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--k", type=float, help="noise covariance inflation factor (case_ii)")
    p.add_argument("--nmc", dest="n_mc", type=int)
    p.add_argument("--method", choices=["fosm", "mc", "both"])

    p = sub.add_parser("gen-data", parents=[common])
    case_flags(p)
    p.add_argument("--zero-noise", dest="zero_noise", action="store_true")
    return parser


def parse_run_config(argv: Sequence[str]) -> tuple[RunConfig, dict, str]:
    args = build_parser().parse_args(argv)
    cfg, digest = load_config(args.config)
    settings = {
        k: v
        for k, v in vars(args).items()
        if k not in ("command", "config", "out", "seed", "workers", "log_level", "data")
    }
    data = getattr(args, "data", None)
    if data is None and args.command in READS_DATA and os.environ.get(DATA_ENV):
        data = Path(os.environ[DATA_ENV])
    if args.command in READS_DATA and data is None:
        raise UsageError(f"{args.command} needs --data or ${DATA_ENV}")
    if args.workers < 1:
        raise UsageError("--workers must be positive")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    rc = RunConfig(args.command, args.config, data, args.out, seed, args.workers, args.log_level, settings)
    return rc, cfg, digest


# ---------------------------------------------------------------- manifest


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict:
    from importlib.metadata import PackageNotFoundError, version

    try:
        own = version("artifact")
    except PackageNotFoundError:
        own = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__, "epoxy_uq": own}


def write_manifest(rc: RunConfig, digest: str, files: Sequence[str], runtime: float) -> None:
    manifest = {
        "command": rc.command,
        "config": str(rc.config_path) if rc.config_path else None,
        "config_sha256": digest,
        "data_dir": str(rc.data_dir) if rc.data_dir else None,
        "seed": rc.seed,
        "workers": rc.workers,
        "settings": rc.settings,
        "versions": _versions(),
        "payload": {name: _sha256(rc.out_dir / name) for name in sorted(files)},
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "runtime_s": runtime,
    }
    (rc.out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Execute one command; returns the process exit code."""
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        rc, cfg, digest = parse_run_config(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"epoxy-uq: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=rc.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        rc.out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"epoxy-uq: error: cannot create {rc.out_dir}: {exc}", file=sys.stderr)
        return 2
    t0 = time.perf_counter()
    try:
        files = COMMANDS[rc.command](rc, cfg)
    except UsageError as exc:
        print(f"epoxy-uq: error: {exc}", file=sys.stderr)
        return 2
    except DOMAIN_ERRORS as exc:
        print(f"epoxy-uq: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    write_manifest(rc, digest, files, time.perf_counter() - t0)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
