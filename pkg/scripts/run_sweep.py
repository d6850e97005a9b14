"""Recall/speedup sweep over R_I and R_T on a synthetic cross-modal corpus.

Writes the CSV (R_I, R_T, R@1_TR, R@1_IR, Recall, Speedup) and prints the
extra per-row columns as JSON lines on stdout.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from kwscreen.pipeline import sweep, sweep_csv
from kwscreen.synthetic import synthetic_crossmodal


def ints(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--images", type=int, default=1000)
    ap.add_argument("--labels", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--R_I", type=ints, default=[5, 10, 15, 20, 25, 30])
    ap.add_argument("--R_T", type=ints, default=[3])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--fallback", default="full_gallery", choices=["full_gallery", "empty"])
    ap.add_argument("--out", type=Path, default=Path("sweep.csv"))
    args = ap.parse_args(argv)

    data = synthetic_crossmodal(n_images=args.images, n_labels=args.labels, seed=args.seed)
    rows = sweep(data, args.R_I, args.R_T, args.fallback, args.repeats)
    args.out.write_text(sweep_csv(rows), encoding="utf-8")
    for r in rows:
        print(json.dumps({k: v for k, v in r.items() if k != "reports"}))
    print(f"wrote {args.out}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
