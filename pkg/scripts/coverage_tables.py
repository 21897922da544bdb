"""Regenerate the coverage tables for the three in-silico cases.

Usage: python scripts/coverage_tables.py [--out results/coverage] [--workers N] [--quick]
"""
import argparse
from pathlib import Path

from epoxy_uq import coverage as cov

# (case, overrides); repetitions are taken from n_cov below
RUNS = [
    ("sparse_tg", {"n_d": 5}),
    ("sparse_tg", {"n_d": 50}),
    *[("kinetics", {"noise": n}) for n in cov.NOISE_TYPES],
    *[("heat_capacity", {"noise": n, "n_d_tg": 5, "n_per_curve": 1750}) for n in cov.NOISE_TYPES],
    ("heat_capacity", {"n_d_tg": 50, "n_per_curve": 1750}),
]
N_COV = {"sparse_tg": 1000, "kinetics": 300, "heat_capacity": 200}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("results/coverage"))
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--quick", action="store_true", help="50 repetitions per case")
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    reports = []
    for case_id, kw in RUNS:
        case = cov.CoverageCase(case_id, n_cov=50 if args.quick else N_COV[case_id], **kw)
        rep = cov.run_coverage(case, seed=args.seed, workers=args.workers)
        reports.append(rep)
        fam = rep.coverage["normal"]
        print(f"{case_id:14s} {kw}: " + " ".join(f"{p}={100 * v:.1f}" for p, v in zip(rep.params, fam)))
    for case_id in N_COV:
        cov.write_report_csv([r for r in reports if r.case.case_id == case_id], args.out / f"{case_id}.csv")


if __name__ == "__main__":
    main()
