"""Graph vs attention vs kNN-graph on the relation-only split, several seeds."""

import argparse
import json

from graphvqa.experiments import ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--scenes", type=int, default=2000)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--out", default="results/ablation.json")
    args = ap.parse_args()
    res = ablation(tuple(args.seeds), args.scenes, args.epochs)
    table = {p: {"per_seed": [r.val["overall"] for r in rs], "train": [r.train_acc for r in rs],
                 "seconds": [r.seconds for r in rs], "mean": res["mean"][p]}
             for p, rs in res["runs"].items()}
    for p, row in table.items():
        print(f"{p:10s} mean {row['mean']:.3f}  per seed {[round(x, 3) for x in row['per_seed']]}")
    with open(args.out, "w") as f:
        json.dump(table, f, indent=1)


if __name__ == "__main__":
    main()
