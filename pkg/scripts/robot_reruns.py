"""Seeded reruns of the robot scenario; reports certificate use and the
worst keep-out value per seed."""
import argparse
import dataclasses
from pathlib import Path

from mpftc.config import load_config
from mpftc.sim import build_controller, monitor_safety, run_closed_loop
from mpftc.terminal import BoundLedger, synthesize_robot_terminal

ROOT = Path(__file__).resolve().parents[1]
SCEN = ROOT / "scenarios"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--duration", type=float)
    args = ap.parse_args()
    art = SCEN / "robot_terminal.json"
    if not art.exists():
        synthesize_robot_terminal(BoundLedger()).save(art)
    sc = next(s for s in load_config(SCEN / "robot.toml") if s.name == "robot_safe_mpftc")
    if args.duration:
        sc = dataclasses.replace(sc, duration=args.duration)
    ctl = build_controller(sc, SCEN)
    print("seed  uncertified  fallbacks  violations  max_g")
    for seed in range(1, args.seeds + 1):
        rep = monitor_safety(run_closed_loop(dataclasses.replace(sc, seed=seed), SCEN, controller=ctl))
        print(f"{seed:4d}  {rep.uncertified:11d}  {rep.fallbacks:9d}  {rep.violations:10d}  {rep.max_g_violation:+.4f}")


if __name__ == "__main__":
    main()
