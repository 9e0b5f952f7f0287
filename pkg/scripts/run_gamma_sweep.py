"""Retrain across the entropy-threshold grid on one synthetic corpus."""

import argparse

from connerlab.conner import Schedule
from connerlab.experiments import config_for, gamma_grid, gamma_sweep, no_refinement_run
from connerlab.synthgen import SynthSpec, generate


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--docs", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--lr", type=float, default=1e-2)
    ap.add_argument("--out", help="TSV output path")
    args = ap.parse_args(argv)

    train_c, dev_c, test_c = generate(SynthSpec(seed=args.seed, n_docs=args.docs))
    base = config_for(train_c)
    sched = Schedule(epochs=args.epochs, lr=args.lr, seed=args.seed)
    rows = gamma_sweep(train_c, dev_c, test_c, base, sched, gamma_grid(base.label_count))
    _, ref = no_refinement_run(train_c, dev_c, test_c, base, sched)
    lines = ["gamma\tprecision\trecall\tf1"] + [r.tsv() for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    print(text, end="")
    print(f"# no refinement: f1 {ref.f1!r}")


if __name__ == "__main__":
    main()
