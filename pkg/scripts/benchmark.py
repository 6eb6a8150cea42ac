"""Direct-forecast benchmark on the synthetic series: model vs naive baselines, one line per seed.

    python scripts/benchmark.py --seeds 0,1,2 --strategy random
"""

import argparse
import json

from timae.evaluation import desk_benchmark, run_benchmark


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--strategy", default="random")
    args = ap.parse_args()
    for s in args.seeds.split(","):
        res = run_benchmark(desk_benchmark(args.strategy), int(s))
        print(json.dumps({"seed": int(s), "strategy": args.strategy, **{k: round(v, 5) for k, v in res.metrics.items()}}))


if __name__ == "__main__":
    main()
