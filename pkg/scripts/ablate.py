"""One-axis ablations on the synthetic benchmark (mask ratio, strategy, sampling time, ...).

    python scripts/ablate.py --axis mask_ratio --seeds 0 --jobs 1 --out runs/ablate
"""

import argparse

from timae.evaluation import ABLATION_AXES, ablation_matrix, desk_benchmark


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--axis", default="mask_ratio", choices=sorted(ABLATION_AXES))
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="runs/ablate")
    args = ap.parse_args()
    report = ablation_matrix(
        desk_benchmark(), {args.axis: ABLATION_AXES[args.axis]}, [int(s) for s in args.seeds.split(",")], jobs=args.jobs
    )
    report.write(args.out, f"ablation_{args.axis}", args.axis)
    print(report.to_markdown(args.axis))


if __name__ == "__main__":
    main()
