"""End-to-end demo at a reduced budget: data -> recipe -> eval -> VLA -> rollout.

Writes everything under --workdir (default runs/demo). For the full desk-scale
numbers use the CLI directly (see README) or run the acceptance suite.
"""

import argparse
import subprocess
import sys
from pathlib import Path


def sh(*args):
    print("+", " ".join(args), flush=True)
    proc = subprocess.run([sys.executable, "-m", "gensup.cli", *args])
    if proc.returncode != 0:
        sys.exit(proc.returncode)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--workdir", default="runs/demo")
    ap.add_argument("--scenes", type=int, default=120)
    ap.add_argument("--full", action="store_true", help="use the full desk-scale budget")
    args = ap.parse_args()

    work = Path(args.workdir)
    data = work / "data"
    run = work / "run"
    budget = [] if args.full else [
        "--set", "stage1_steps=100", "--set", "stage2_steps=400", "--set", "stage3_steps=500",
    ]
    sh("gen-data", "--scenes", str(args.scenes), "--seed", "7", "--out", str(data))
    sh("train", "--stage", "all", "--data", str(data), "--out", str(run),
       "--log-every", "100", *budget)
    sh("eval", "--checkpoint", str(run / "stage3.ckpt"), "--data", str(data),
       "--out", str(work / "eval"), "--dump-depth", str(work / "eval" / "depth_maps"))
    print("\ndemo artifacts under", work)


if __name__ == "__main__":
    main()
