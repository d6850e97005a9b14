"""Screening cost and end-to-end speedup as the gallery grows.

For each gallery size the script reports screening rate, speedup over the
unscreened rerank, index size, and per-query screen time. The ``--fixed-mass``
mode pads the gallery with items on a disjoint label range so every query
touches the same postings; screen time should then stay flat.
"""

from __future__ import annotations

import argparse
import gc
import json
import sys
import time

import numpy as np

from kwscreen import index as kwindex
from kwscreen.pipeline import run
from kwscreen.synthetic import make_keyword_task


def screen_seconds(idx, queries, repeats):
    best = float("inf")
    for _ in range(repeats):
        gc.disable()
        t0 = time.perf_counter()
        for q in queries:
            kwindex.screen(idx, q)
        best = min(best, time.perf_counter() - t0)
        gc.enable()
    return best / len(queries)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="25000,50000,100000,200000")
    ap.add_argument("--labels", type=int, default=500)
    ap.add_argument("--queries", type=int, default=200)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--fixed-mass", action="store_true")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    sizes = [int(s) for s in args.sizes.split(",")]

    if args.fixed_mass:
        base = make_keyword_task(sizes[0], args.labels, args.queries, seed=args.seed)
        g, k = base.gallery_pairs
        for n in sizes:
            gs, ks, filled, offset = [g], [k], sizes[0], args.labels
            while filled < n:
                pad = make_keyword_task(min(sizes[0], n - filled), args.labels, 1, label_offset=offset, seed=args.seed + offset)
                pg, pk = pad.gallery_pairs
                gs.append(pg + filled)
                ks.append(pk)
                filled += min(sizes[0], n - filled)
                offset += args.labels
            idx = kwindex.build_from_arrays(np.concatenate(gs), np.concatenate(ks), n, offset)
            print(json.dumps({"N": n, "screen_s_per_query": screen_seconds(idx, base.query_keywords, args.repeats)}))
        return 0

    for n in sizes:
        kt = make_keyword_task(n, args.labels, args.queries, seed=args.seed)
        idx = kwindex.build_from_arrays(*kt.gallery_pairs, n, kt.n_labels)
        _, _, rep = run(kt.task, idx, kt.query_keywords, kt.reranker, timing_repeats=args.repeats)
        st = kwindex.stats(idx)
        print(
            json.dumps(
                {
                    "N": n,
                    "screening_rate": round(rep.screening_rate, 2),
                    "gt_recall": rep.gt_recall,
                    "speedup": round(rep.speedup, 3),
                    "index_bytes": st["bytes"],
                    "postings": st["postings_total"],
                    "screen_s_per_query": rep.wall_times["screen"] / rep.n_queries,
                    "rerank_s_per_query": rep.wall_times["rerank"] / rep.n_queries,
                    "baseline_s_per_query": rep.wall_times["baseline"] / rep.n_queries,
                }
            )
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())
