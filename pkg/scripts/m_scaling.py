#!/usr/bin/env python3
"""Streaming-time scaling in the number of markers.

Generates datasets at fixed n and doubling m, runs the out-of-core engine
on each, and reports the per-doubling ratio of the streaming-phase time
(per-block CPU time is pooled and a low quantile taken, so one burst of
background load does not distort the estimate).

    python scripts/m_scaling.py --n 1000 --values 4096,8192,16384 \
        --workdir /tmp/mscale
"""

import argparse
import os

import numpy as np

from gwasgls.datagen import DatasetPaths, GenSpec, gen_dataset
from gwasgls.pipeline import SolveConfig, SolvePaths, run_ooc


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--p", type=int, default=4)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--values", default="4096,8192,16384")
    ap.add_argument("--block-size", type=int, default=1024)
    ap.add_argument("--reps", type=int, default=3)
    ap.add_argument("--workdir", default="mscale_work")
    args = ap.parse_args()

    sizes = [int(v) for v in args.values.split(",")]
    os.makedirs(args.workdir, exist_ok=True)
    stream = []
    for m in sizes:
        data_dir = os.path.join(args.workdir, f"data_m{m}")
        d = DatasetPaths.in_dir(data_dir)
        if not os.path.exists(d.geno):
            gen_dataset(GenSpec(n=args.n, m=m, p=args.p, seed=args.seed),
                        data_dir)
        samples = []
        reps = args.reps * (max(sizes) // m)
        for rep in range(reps):
            out = os.path.join(args.workdir, f"out_m{m}_{rep}.gwab")
            paths = SolvePaths(cov=d.cov, covariates=d.covariates,
                               pheno=d.pheno, geno=d.geno, out=out)
            s = run_ooc(paths, SolveConfig(m_blk=args.block_size))
            samples += s.block_cpu_times
        per_block = float(np.quantile(samples, 0.1))
        total = per_block * ((m + args.block_size - 1) // args.block_size)
        stream.append(total)
        print(f"m={m:6d} blocks={len(samples)//reps:3d} "
              f"per_block={per_block * 1e3:7.2f}ms stream={total:7.3f}s")
    for a, b, sa, sb in zip(sizes, sizes[1:], stream, stream[1:]):
        print(f"ratio m={a}->{b}: {sb / sa:.2f} (linear scaling -> 2.00)")


if __name__ == "__main__":
    main()
