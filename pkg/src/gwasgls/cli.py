"""Command-line front end for dataset generation, the three solver
engines, result verification, and the benchmark reporter.

Exit codes: 0 success, 2 usage/configuration, 3 data/file errors,
4 numerical errors. Failures print a single machine-parsable line
``error code=<int> msg="..."`` on stderr.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import datagen, distgrid, pipeline, transport
from .errors import (
    BadMagic,
    ConfigError,
    DimensionMismatch,
    GwasGlsError,
    NotPositiveDefinite,
    RankDeficientCovariates,
    ShortWrite,
    TruncatedFile,
    UnsupportedVersion,
)

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _fail(code, msg):
    print(f'error code={code} msg="{msg}"', file=sys.stderr)
    return code


def _classify(exc):
    if isinstance(exc, (NotPositiveDefinite, RankDeficientCovariates)):
        return EXIT_NUMERICAL
    if isinstance(exc, ConfigError):
        return EXIT_USAGE
    if isinstance(exc, (BadMagic, UnsupportedVersion, TruncatedFile,
                        ShortWrite, DimensionMismatch, FileNotFoundError)):
        return EXIT_DATA
    if isinstance(exc, GwasGlsError):
        return EXIT_DATA
    raise exc


def cmd_gen(args):
    spec = datagen.GenSpec(n=args.n, m=args.m, p=args.p, seed=args.seed,
                           maf_range=(args.maf_lo, args.maf_hi),
                           ridge=args.ridge)
    paths = datagen.gen_dataset(spec, args.out)
    print(f"gen n={spec.n} m={spec.m} p={spec.p} seed={spec.seed} "
          f"out={args.out} geno={paths.geno}")
    return 0


def cmd_solve(args):
    paths = pipeline.SolvePaths(cov=args.cov, covariates=args.covariates,
                                pheno=args.pheno, geno=args.geno, out=args.out)
    if args.mode == "oracle":
        datagen.oracle_solve_all(paths, args.out)
        print(f"mode=oracle out={args.out}")
        return 0
    if args.mode in ("incore", "ooc"):
        cfg = pipeline.SolveConfig(
            m_blk=args.block_size or pipeline.DEFAULT_M_BLK,
            threads=args.threads, emit_s_inv=args.emit_sinv)
        runner = pipeline.run_incore if args.mode == "incore" else pipeline.run_ooc
        summary = runner(paths, cfg)
    else:  # dist
        cfg = distgrid.DistConfig(m_blk=args.block_size,
                                  emit_s_inv=args.emit_sinv)
        summaries = transport.run_spmd(args.np, distgrid.run_dist, paths, cfg,
                                       transport=args.transport)
        summary = summaries[0]
    print(summary.to_record())
    return 0


def cmd_verify(args):
    report = datagen.compare_results(args.a, args.b, args.tol)
    print(f"verify max_rel={report.max_rel_discrepancy:.3e} "
          f"status_mismatches={report.status_mismatches} "
          f"compared={report.compared} tol={report.tol:.1e} "
          f"within={report.within}")
    return report.exit_code


def cmd_bench(args):
    values = [int(v) for v in args.values.split(",")]
    os.makedirs(args.workdir, exist_ok=True)
    records = []
    for v in values:
        n = v if args.sweep == "n" else args.n
        m = v if args.sweep == "m" else args.m
        np_ = v if args.sweep == "np" else args.np
        data_dir = os.path.join(args.workdir, f"data_n{n}_m{m}_p{args.p}")
        dpaths = datagen.DatasetPaths.in_dir(data_dir)
        if not os.path.exists(dpaths.geno):
            spec = datagen.GenSpec(n=n, m=m, p=args.p, seed=args.seed)
            datagen.gen_dataset(spec, data_dir)
        out = os.path.join(args.workdir, f"result_{args.sweep}{v}.gwab")
        paths = pipeline.SolvePaths(cov=dpaths.cov, covariates=dpaths.covariates,
                                    pheno=dpaths.pheno, geno=dpaths.geno, out=out)
        if args.mode == "dist" or args.sweep == "np":
            cfg = distgrid.DistConfig(m_blk=args.block_size)
            summary = transport.run_spmd(np_, distgrid.run_dist, paths, cfg,
                                         transport=args.transport)[0]
        else:
            cfg = pipeline.SolveConfig(
                m_blk=args.block_size or pipeline.DEFAULT_M_BLK,
                threads=args.threads)
            runner = pipeline.run_incore if args.mode == "incore" else pipeline.run_ooc
            summary = runner(paths, cfg)
        summary.seed = args.seed
        records.append(summary.to_record())
        print(records[-1])
    with open(args.report, "w") as f:
        f.write("\n".join(records) + "\n")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="gwasgls")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--m", type=int, required=True)
    g.add_argument("--p", type=int, required=True)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--out", required=True)
    g.add_argument("--maf-lo", type=float, default=0.05)
    g.add_argument("--maf-hi", type=float, default=0.5)
    g.add_argument("--ridge", type=float, default=1.0)
    g.set_defaults(fn=cmd_gen)

    s = sub.add_parser("solve", help="run one of the solver engines")
    s.add_argument("--mode", choices=["incore", "ooc", "dist", "oracle"],
                   required=True)
    s.add_argument("--cov", required=True)
    s.add_argument("--covariates", required=True)
    s.add_argument("--pheno", required=True)
    s.add_argument("--geno", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--block-size", type=int, default=None)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--np", type=int, default=1)
    s.add_argument("--transport", choices=["inproc", "socket"],
                   default="inproc")
    s.add_argument("--emit-sinv", action="store_true")
    s.set_defaults(fn=cmd_solve)

    v = sub.add_parser("verify", help="compare two result files")
    v.add_argument("--a", required=True)
    v.add_argument("--b", required=True)
    v.add_argument("--tol", type=float, required=True)
    v.set_defaults(fn=cmd_verify)

    b = sub.add_parser("bench", help="sweep a dimension, one record per run")
    b.add_argument("--sweep", choices=["m", "n", "np"], required=True)
    b.add_argument("--values", required=True, help="comma-separated values")
    b.add_argument("--report", required=True)
    b.add_argument("--n", type=int, default=1000)
    b.add_argument("--m", type=int, default=4096)
    b.add_argument("--p", type=int, default=4)
    b.add_argument("--seed", type=int, default=42)
    b.add_argument("--mode", choices=["incore", "ooc", "dist"], default="ooc")
    b.add_argument("--block-size", type=int, default=None)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--np", type=int, default=1)
    b.add_argument("--transport", choices=["inproc", "socket"],
                   default="inproc")
    b.add_argument("--workdir", default="bench_work")
    b.set_defaults(fn=cmd_bench)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return e.code if e.code is not None else EXIT_USAGE
    try:
        return args.fn(args)
    except Exception as e:
        return _fail(_classify(e), str(e).replace('"', "'"))


if __name__ == "__main__":
    sys.exit(main())
