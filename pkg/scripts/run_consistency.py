"""Mean test-set entity consistency per entity length, several seeds."""

import argparse
import json

from connerlab.experiments import consistency_anatomy, short_vs_long
from connerlab.synthgen import SynthSpec


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--docs", type=int, default=200)
    ap.add_argument("--q", type=float, default=0.3, help="modifier label consistency")
    ap.add_argument("--out")
    args = ap.parse_args(argv)

    tables = consistency_anatomy(range(args.seeds), SynthSpec(n_docs=args.docs, modifier_consistency=args.q))
    lengths = sorted({k for t in tables for k in t})
    print("seed  " + "  ".join(f"len{k:<4d}" for k in lengths))
    for seed, t in enumerate(tables):
        print(f"{seed:<4d}  " + "  ".join(f"{t[k]:.4f} " if k in t else "   -    " for k in lengths))
    for seed, t in enumerate(tables):
        s, l = short_vs_long(t)
        print(f"seed {seed}: short (len 1-2, max) {s:.4f}  long (len >= 4, mean) {l:.4f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump([{str(k): v for k, v in sorted(t.items())} for t in tables], f, indent=2)


if __name__ == "__main__":
    main()
