"""Generate a synthetic dataset, calibrate every step and propagate upstream uncertainty.

Writes results/pipeline/{data,nls,fosm,mc}/ through the command line interface.
"""
import argparse
import sys
from pathlib import Path

from epoxy_uq import cli


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("results/pipeline"))
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--nmc", type=int, default=500)
    args = ap.parse_args()
    data = args.out / "data"
    runs = [
        ["gen-data", "--out", str(data)],
        ["calibrate", "--data", str(data), "--out", str(args.out / "nls")],
        ["propagate", "--method", "fosm", "--data", str(data), "--out", str(args.out / "fosm")],
        ["propagate", "--method", "mc", "--nmc", str(args.nmc), "--data", str(data), "--out", str(args.out / "mc")],
    ]
    for argv in runs:
        rc = cli.run(argv + ["--seed", str(args.seed)])
        if rc:
            sys.exit(rc)
        print("done:", " ".join(argv[:1] + argv[1:3]))


if __name__ == "__main__":
    main()
