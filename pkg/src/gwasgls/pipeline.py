"""Streaming driver: block scheduling plus double buffering so disk
transfers overlap compute.

The out-of-core loop is:

    load_start(first)
    for each block:
        load_wait(current); if not last: load_start(next)
        whiten + solve the current block
        if not first: store_wait(previous)
        store_start(current)
    store_wait(last)

Two equally sized memory regions alternate between "being computed on"
and "being transferred"; a region under in-flight I/O is never touched by
compute (rendezvous at the wait calls).
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import fileio, kernel
from .errors import ConfigError

DEFAULT_M_BLK = 5000
MEM_BUDGET_ENV = "GWAS_GLS_MEM_BUDGET_BYTES"


@dataclass
class BlockPlan:
    m: int
    m_blk: int
    blocks: list  # [(first_index, count), ...]


def block_plan(m, m_blk):
    """Contiguous disjoint blocks of at most m_blk columns covering [0, m)."""
    if m < 1 or m_blk < 1:
        raise ConfigError("m and m_blk must be >= 1")
    blocks = [(first, min(m_blk, m - first)) for first in range(0, m, m_blk)]
    return BlockPlan(m=m, m_blk=m_blk, blocks=blocks)


@dataclass
class RunSummary:
    """Single-record run report; serializes to one key=value line."""

    mode: str = ""
    n: int = 0
    m: int = 0
    p: int = 0
    m_blk: int = 0
    np_: int = 1
    threads: int = 1
    t_prepare: float = 0.0
    t_compute: float = 0.0
    t_io_wait: float = 0.0
    t_redistribute: float = 0.0
    t_total: float = 0.0
    bytes_read: int = 0
    bytes_written: int = 0
    peak_resident_est: int = 0
    buffer_regions: int = 0
    combine_bytes: int = 0
    localpart_bytes: int = 0
    seed: int = -1
    # per-block CPU seconds of the streaming phase (load_wait + compute +
    # store_wait); profiling detail, not part of the one-line record
    block_cpu_times: list = field(default_factory=list)

    def to_record(self):
        parts = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                continue
            if isinstance(v, float):
                parts.append(f"{f.name}={v:.6f}")
            else:
                parts.append(f"{f.name}={v}")
        return " ".join(parts)

    @classmethod
    def from_record(cls, line):
        kw = {}
        typed = {f.name: f.type for f in fields(cls)}
        for tok in line.split():
            k, v = tok.split("=", 1)
            if k not in typed:
                continue
            t = typed[k]
            kw[k] = v if t in (str, "str") else (
                float(v) if t in (float, "float") else int(v))
        return cls(**kw)


@dataclass
class SolvePaths:
    cov: str
    covariates: str
    pheno: str
    geno: str
    out: str


@dataclass
class SolveConfig:
    m_blk: int = DEFAULT_M_BLK
    threads: int = 1
    emit_s_inv: bool = False
    mem_budget_bytes: int | None = None  # None = take from env or unlimited

    def budget(self):
        if self.mem_budget_bytes is not None:
            return self.mem_budget_bytes
        env = os.environ.get(MEM_BUDGET_ENV)
        return int(env) if env else None


def _load_prepare(paths):
    t0 = time.perf_counter()
    M = fileio.read_matrix(paths.cov, "GWAM")
    XL = fileio.read_matrix(paths.covariates, "GWAC")
    y = fileio.read_matrix(paths.pheno, "GWAY")
    ctx = kernel.gls_prepare(M, XL, y)
    return ctx, time.perf_counter() - t0, M.nbytes


def run_incore(paths, cfg=None):
    """Load the whole genotype matrix and solve it as one block.

    Reference engine for equivalence and overlap tests. Raises ConfigError
    when the dataset does not fit the memory budget.
    """
    cfg = cfg or SolveConfig()
    t_start = time.perf_counter()
    geno_bytes, n, m = fileio.total_genotype_bytes(paths.geno)
    budget = cfg.budget()
    need = geno_bytes + 8 * n * n
    if budget is not None and need > budget:
        raise ConfigError(
            f"in-core run needs {need} bytes (genotypes + covariance), "
            f"budget is {budget}")
    ctx, t_prep, m_bytes = _load_prepare(paths)
    p = ctx.p
    t0 = time.perf_counter()
    X = fileio.read_matrix(paths.geno, "GWAX")
    t_read = time.perf_counter() - t0
    t0 = time.perf_counter()
    block = kernel.gls_solve_block(
        ctx, kernel.SnpBlock(first_index=0, data=X),
        emit_s_inv=cfg.emit_s_inv, threads=cfg.threads)
    t_compute = time.perf_counter() - t0
    flags = 1 if cfg.emit_s_inv else 0
    writer = fileio.BlockWriter(paths.out, m, p, flags)
    t0 = time.perf_counter()
    writer.wait(writer.start(block))
    t_write = time.perf_counter() - t0
    writer.close()
    return RunSummary(
        mode="incore", n=n, m=m, p=p, m_blk=m, np_=1, threads=cfg.threads,
        t_prepare=t_prep, t_compute=t_compute, t_io_wait=t_read + t_write,
        t_total=time.perf_counter() - t_start,
        bytes_read=geno_bytes + m_bytes, bytes_written=m * fileio.record_size(p, flags),
        peak_resident_est=need + 8 * n * p, buffer_regions=1,
    )


def run_ooc(paths, cfg=None):
    """Out-of-core engine: stream genotype blocks through two buffer
    regions with asynchronous load/store overlapping compute."""
    cfg = cfg or SolveConfig()
    t_start = time.perf_counter()
    geno_bytes, n, m = fileio.total_genotype_bytes(paths.geno)
    m_blk = min(cfg.m_blk, m)
    ctx, t_prep, m_bytes = _load_prepare(paths)
    p = ctx.p
    flags = 1 if cfg.emit_s_inv else 0
    rsz = fileio.record_size(p, flags)
    region_bytes = 8 * n * m_blk + m_blk * rsz
    budget = cfg.budget()
    if budget is not None and 2 * region_bytes > budget:
        raise ConfigError(
            f"two buffer regions need {2 * region_bytes} bytes, budget is {budget}")

    plan = block_plan(m, m_blk)
    reader = fileio.BlockReader(paths.geno)
    writer = fileio.BlockWriter(paths.out, m, p, flags)
    # exactly two regions, each one input buffer + one output staging area
    in_bufs = [np.empty((n, m_blk), order="F"), np.empty((n, m_blk), order="F")]
    out_bufs = [np.empty((m_blk, rsz // 8)), np.empty((m_blk, rsz // 8))]
    regions_allocated = 2

    t_compute = 0.0
    t_io_wait = 0.0
    block_cpu = []
    load_ticket = reader.start(plan.blocks[0][0], plan.blocks[0][1], in_bufs[0])
    store_ticket = None
    for bi, (first, count) in enumerate(plan.blocks):
        cur = bi % 2
        cpu0 = time.process_time()
        t0 = time.perf_counter()
        blk = reader.wait(load_ticket)
        t_io_wait += time.perf_counter() - t0
        if bi + 1 < len(plan.blocks):
            nfirst, ncount = plan.blocks[bi + 1]
            load_ticket = reader.start(nfirst, ncount, in_bufs[1 - cur])
        t0 = time.perf_counter()
        result = kernel.gls_solve_block(
            ctx, blk, emit_s_inv=cfg.emit_s_inv, threads=cfg.threads)
        t_compute += time.perf_counter() - t0
        t0 = time.perf_counter()
        if store_ticket is not None:
            writer.wait(store_ticket)
        t_io_wait += time.perf_counter() - t0
        store_ticket = writer.start(result, buffer=out_bufs[cur])
        block_cpu.append(time.process_time() - cpu0)
    t0 = time.perf_counter()
    writer.wait(store_ticket)
    t_io_wait += time.perf_counter() - t0
    bytes_read = reader.bytes_read
    bytes_written = writer.bytes_written
    reader.close()
    writer.close()
    return RunSummary(
        mode="ooc", n=n, m=m, p=p, m_blk=m_blk, np_=1, threads=cfg.threads,
        t_prepare=t_prep, t_compute=t_compute, t_io_wait=t_io_wait,
        t_total=time.perf_counter() - t_start,
        bytes_read=bytes_read + m_bytes, bytes_written=bytes_written,
        peak_resident_est=8 * n * n + 2 * region_bytes + 8 * n * p,
        buffer_regions=regions_allocated,
        block_cpu_times=block_cpu,
    )
