"""Terminal-set slices of the double integrator on a grid; writes one CSV per
tau and prints cell counts and nesting differences."""
import argparse
from pathlib import Path

import numpy as np

from mpftc.config import load_config
from mpftc.terminal import DoubleIntegratorTail, explicit_terminal_slice, slice_nesting_violations


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--tau", type=float, nargs="+", default=[0, 1, 2, 3, 4, 4.5, 5])
    ap.add_argument("--resolution", type=int, default=201)
    ap.add_argument("--out", default="runs/slices")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    root = Path(__file__).resolve().parents[1]
    sc = next(s for s in load_config(root / "scenarios" / "double_integrator.toml") if s.name == "di_safe_mpftc")
    tail = DoubleIntegratorTail.default(t_s=sc.t_s, steps=sc.M - sc.N, v_r=4.0)
    prev = None
    for tau in args.tau:
        s = explicit_terminal_slice(tail, tau, resolution=args.resolution)
        np.savetxt(out / f"slice_tau{tau:g}.csv", s.mask.astype(int), fmt="%d", delimiter=",")
        diff = slice_nesting_violations(prev, s) if prev is not None else 0
        print(f"tau={tau:<5g} cells={s.cells:6d} not-nested={diff}")
        prev = s


if __name__ == "__main__":
    main()
