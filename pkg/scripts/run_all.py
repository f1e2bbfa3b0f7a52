"""Synthesise the robot terminal ingredients if missing, then run every shipped
scenario through the CLI and print the expectation lines."""
import argparse
import sys
from pathlib import Path

from mpftc.cli import main as cli

ROOT = Path(__file__).resolve().parents[1]
SCEN = ROOT / "scenarios"


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(ROOT / "runs"))
    args = ap.parse_args()
    art = SCEN / "robot_terminal.json"
    if not art.exists():
        rc = cli(["synth", "robot-appendix-b", "--out", str(art)])
        if rc:
            return rc
    worst = 0
    for cfg in sorted(SCEN.glob("*.toml")):
        print(f"== {cfg.name}")
        worst = max(worst, cli(["run", str(cfg), "--out", args.out]))
    return worst


if __name__ == "__main__":
    sys.exit(main())
