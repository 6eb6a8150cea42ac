"""Validation masked-MSE over 10 epochs of default pretraining on the synthetic series.

    python scripts/training_progress.py --seeds 0,1,2 [--mode windows --stride 1]
"""

import argparse
import json

from timae.evaluation import PROGRESS_STRIDE, training_progress


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--mode", choices=("windows", "masks"), default="masks")
    ap.add_argument("--stride", type=int, default=PROGRESS_STRIDE)
    args = ap.parse_args()
    for s in args.seeds.split(","):
        r = training_progress(int(s), args.mode, args.stride)
        summary = {"seed": r["seed"], "ratio": round(r["ratio"], 4), "steps": r["steps"], "seconds": round(r["seconds"], 1)}
        print(json.dumps(summary), [round(v, 3) for v in r["val"]], flush=True)


if __name__ == "__main__":
    main()
