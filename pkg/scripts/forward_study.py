"""Run the forward uncertainty studies on the default cure scenario.

Material cases use a Monte Carlo calibration of synthetic data; boundary cases
perturb the oven path and the mixed boundary condition.
"""
import argparse
import sys
from pathlib import Path

from epoxy_uq import cli
from epoxy_uq.forward_uq import MODES


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("results/forward"))
    ap.add_argument("--config", type=Path, default=Path(__file__).resolve().parents[1] / "configs" / "default.toml")
    ap.add_argument("--nmc", type=int, default=150)
    ap.add_argument("--modes", nargs="+", choices=MODES, default=list(MODES))
    args = ap.parse_args()
    for mode in args.modes:
        argv = ["forward-uq", "--mode", mode, "--nmc", str(args.nmc), "--config", str(args.config), "--out", str(args.out / mode)]
        if mode == "case_ii":
            argv += ["--k", "10"]
        rc = cli.run(argv)
        if rc:
            sys.exit(rc)
        print("done:", mode)


if __name__ == "__main__":
    main()
