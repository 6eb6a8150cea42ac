"""Four-cell trend/seasonality transfer study; writes transfer.csv and transfer.md.

    python scripts/transfer.py --seeds 0,1,2 --out runs/transfer
"""

import argparse

from timae.evaluation import desk_benchmark, transferability_study


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--out", default="runs/transfer")
    args = ap.parse_args()
    report = transferability_study(desk_benchmark(), seeds=[int(s) for s in args.seeds.split(",")])
    report.write(args.out, "transfer")
    print(report.to_markdown())


if __name__ == "__main__":
    main()
