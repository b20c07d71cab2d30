"""Graph model on existence/attribute questions (2000 scenes, desk widths)."""

import argparse
import json

from graphvqa.experiments import learning_sanity


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenes", type=int, default=2000)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/learning_sanity.json")
    args = ap.parse_args()
    r = learning_sanity(args.scenes, args.epochs, args.seed)
    print(f"exist {r.template('exist'):.3f}  attribute {r.template('attribute'):.3f}  "
          f"train {r.train_acc:.3f}  {r.seconds:.0f} s")
    with open(args.out, "w") as f:
        json.dump({"val": r.val, "train_acc": r.train_acc, "seconds": r.seconds, "history": r.history}, f, indent=1)


if __name__ == "__main__":
    main()
