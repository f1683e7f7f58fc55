#!/usr/bin/env python3
"""Distributed engine sweep over the number of ranks.

Runs the same dataset at np = 1, 2, 4, ... and prints one run record per
rank count plus the transport byte totals, then verifies every result
against the np=1 run. On a single machine the ranks share one CPU, so
this exercises correctness and communication volume, not speedup.

    python scripts/strong_scaling.py --n 500 --m 4096 --values 1,2,4,6
"""

import argparse
import os

from gwasgls.datagen import DatasetPaths, GenSpec, compare_results, gen_dataset
from gwasgls.distgrid import DistConfig, grid_create, run_dist
from gwasgls.pipeline import SolvePaths
from gwasgls.transport import run_spmd


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=500)
    ap.add_argument("--m", type=int, default=4096)
    ap.add_argument("--p", type=int, default=4)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--values", default="1,2,4,6")
    ap.add_argument("--transport", choices=["inproc", "socket"],
                    default="inproc")
    ap.add_argument("--tol", type=float, default=1e-10)
    ap.add_argument("--workdir", default="scaling_work")
    args = ap.parse_args()

    data_dir = os.path.join(args.workdir, "data")
    d = DatasetPaths.in_dir(data_dir)
    if not os.path.exists(d.geno):
        gen_dataset(GenSpec(n=args.n, m=args.m, p=args.p, seed=args.seed),
                    data_dir)

    outs = {}
    for np_ in (int(v) for v in args.values.split(",")):
        out = os.path.join(args.workdir, f"np{np_}.gwab")
        paths = SolvePaths(cov=d.cov, covariates=d.covariates, pheno=d.pheno,
                           geno=d.geno, out=out)
        summaries = run_spmd(np_, run_dist, paths, DistConfig(),
                             transport=args.transport)
        outs[np_] = out
        g = grid_create(np_)
        print(f"np={np_} grid={g.r}x{g.c} {summaries[0].to_record()}")

    base = min(outs)
    for np_, out in sorted(outs.items()):
        if np_ == base:
            continue
        rep = compare_results(outs[base], out, args.tol)
        print(f"verify np={base} vs np={np_}: "
              f"max_rel={rep.max_rel_discrepancy:.3e} within={rep.within}")


if __name__ == "__main__":
    main()
