"""Sweep k on Baird's star MDP and compare outcomes with the condition-function prediction.

    python scripts/baird_sweep.py --out baird_sweep.csv --jobs 4
"""

import argparse
import sys
from pathlib import Path

from pfpe.cli import main

CONFIG = Path(__file__).with_name("configs") / "baird_sweep.json"


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="baird_sweep.csv")
    p.add_argument("--jobs", default="1")
    args = p.parse_args()
    code = main(["sweep", "--config", str(CONFIG), "--out", args.out, "--jobs", args.jobs])
    if code in (0, 2):
        print(Path(args.out).read_text())
    sys.exit(code)
