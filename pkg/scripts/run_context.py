"""Document-level vs. sentence-level encoder windows on synthetic corpora."""

import argparse
import json
import sys

from connerlab.experiments import ExperimentSchedule, context_comparison, context_spec


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--docs", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--lr", type=float, default=1e-2)
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--out")
    args = ap.parse_args(argv)

    sched = ExperimentSchedule(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr)
    res = context_comparison(
        range(args.seeds),
        spec=context_spec(args.docs),
        schedule=sched,
        progress=lambda msg: print(msg, file=sys.stderr, flush=True),
    )
    summary = res.to_dict()
    summary["seconds"] = res.seconds
    text = json.dumps(summary, indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    print(text)
    print(f"document minus sentence: {100 * res.margin:+.2f} F1 points", file=sys.stderr)


if __name__ == "__main__":
    main()
