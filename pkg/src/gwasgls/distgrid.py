"""Distributed-memory engine: the covariance matrix lives element-cyclic
on a 2D process grid, marker blocks live as full columns on a 1D
reordering of the same grid, and the two views are exchanged with a
single all-to-all.

Index maps:
    2D: element (i, j) is owned by grid process (i mod r, j mod c) at
        local position (i div r, j div c).
    1D: column j is owned by rank (j mod np) at local column (j div np),
        ranks enumerated as the row-major concatenation of the grid rows.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import fileio, kernel
from .errors import ConfigError, DimensionMismatch, NotPositiveDefinite
from .pipeline import RunSummary

F64 = np.dtype("<f8")
DEFAULT_PANEL = 64
DEFAULT_LOCAL_BLOCK = 256  # markers per rank per block


@dataclass(frozen=True)
class GridLayout:
    np_: int
    r: int
    c: int

    def coord(self, rank):
        return rank // self.c, rank % self.c

    def rank_of(self, prow, pcol):
        return prow * self.c + pcol


def grid_create(np_):
    """Process grid as close to a perfect square as possible:
    r = largest divisor of np with r <= sqrt(np)."""
    if np_ < 1:
        raise ConfigError("need at least one rank")
    r = 1
    for d in range(1, int(np.sqrt(np_)) + 1):
        if np_ % d == 0:
            r = d
    return GridLayout(np_=np_, r=r, c=np_ // r)


def owner_2d(i, j, grid):
    prow, pcol = i % grid.r, j % grid.c
    return grid.rank_of(prow, pcol), i // grid.r, j // grid.c


def owner_1d(j, grid):
    return j % grid.np_, j // grid.np_


def _rows_of(gr, grid, prow):
    return np.arange(prow, gr, grid.r)


def _cols_of(gc, grid, pcol):
    return np.arange(pcol, gc, grid.c)


def _cols_1d(gc, grid, rank):
    return np.arange(rank, gc, grid.np_)


@dataclass
class DistMatrix2D:
    gr: int
    gc: int
    grid: GridLayout
    rank: int
    local: np.ndarray  # rows i = prow (mod r), cols j = pcol (mod c)

    @classmethod
    def empty(cls, gr, gc, grid, rank, fill=None):
        prow, pcol = grid.coord(rank)
        shape = (len(_rows_of(gr, grid, prow)), len(_cols_of(gc, grid, pcol)))
        local = np.zeros(shape) if fill == 0 else np.empty(shape)
        return cls(gr=gr, gc=gc, grid=grid, rank=rank, local=local)


@dataclass
class DistMatrix1D:
    gr: int
    gc: int
    grid: GridLayout
    rank: int
    local: np.ndarray  # full columns j = rank (mod np), global order kept

    @classmethod
    def empty(cls, gr, gc, grid, rank):
        return cls(gr=gr, gc=gc, grid=grid, rank=rank,
                   local=np.empty((gr, len(_cols_1d(gc, grid, rank)))))


def _as_bytes(arr):
    return np.ascontiguousarray(arr, dtype=np.float64).tobytes()


def _from_bytes(raw, shape):
    return np.frombuffer(raw, dtype=np.float64).reshape(shape)


def scatter_matrix(A, grid, t):
    """Distribute a rank-0 global matrix to element-cyclic 2D ownership.

    Rank 0 ships contiguous column panels; one all-to-all then reshuffles
    panel pieces to their cyclic owners.
    """
    gr, gc = t.broadcast_obj(0, None if A is None else A.shape)
    np_ = grid.np_
    # contiguous column panels, one per rank
    bounds = [gc * k // np_ for k in range(np_ + 1)]
    if t.rank == 0:
        for dst in range(1, np_):
            t.send(dst, _as_bytes(A[:, bounds[dst]:bounds[dst + 1]]))
        panel = np.asarray(A[:, bounds[0]:bounds[1]], dtype=np.float64)
    else:
        panel = _from_bytes(t.recv(0), (gr, bounds[t.rank + 1] - bounds[t.rank]))
    # reshuffle panels to cyclic ownership
    my_lo = bounds[t.rank]
    panel_cols = np.arange(my_lo, bounds[t.rank + 1])
    slices = []
    for dst in range(np_):
        prow, pcol = grid.coord(dst)
        sel = panel_cols[panel_cols % grid.c == pcol]
        piece = panel[np.ix_(_rows_of(gr, grid, prow), sel - my_lo)]
        slices.append(_as_bytes(piece))
    received = t.alltoall(slices)
    out = DistMatrix2D.empty(gr, gc, grid, t.rank)
    prow, pcol = grid.coord(t.rank)
    my_rows = _rows_of(gr, grid, prow)
    for src in range(np_):
        src_cols = np.arange(bounds[src], bounds[src + 1])
        sel = src_cols[src_cols % grid.c == pcol]
        piece = _from_bytes(received[src], (len(my_rows), len(sel)))
        out.local[:, sel // grid.c] = piece
    return out


def gather_matrix(D, t):
    """Inverse of scatter_matrix; returns the global matrix at rank 0."""
    if t.rank != 0:
        t.send(0, _as_bytes(D.local))
        return None
    grid = D.grid
    A = np.empty((D.gr, D.gc))
    for src in range(grid.np_):
        prow, pcol = grid.coord(src)
        rows = _rows_of(D.gr, grid, prow)
        cols = _cols_of(D.gc, grid, pcol)
        if src == 0:
            piece = D.local
        else:
            piece = _from_bytes(t.recv(src), (len(rows), len(cols)))
        A[np.ix_(rows, cols)] = piece
    return A


def redist_1d_to_2d(X, t):
    """Full-column 1D layout -> element-cyclic 2D, one all-to-all."""
    grid = X.grid
    gr, gc = X.gr, X.gc
    my_cols = _cols_1d(gc, grid, t.rank)
    slices = []
    for dst in range(grid.np_):
        prow, pcol = grid.coord(dst)
        sel = np.nonzero(my_cols % grid.c == pcol)[0]
        piece = X.local[np.ix_(_rows_of(gr, grid, prow), sel)]
        slices.append(_as_bytes(piece))
    received = t.alltoall(slices)
    out = DistMatrix2D.empty(gr, gc, grid, t.rank)
    prow, pcol = grid.coord(t.rank)
    my_rows = _rows_of(gr, grid, prow)
    for src in range(grid.np_):
        src_cols = _cols_1d(gc, grid, src)
        sel = src_cols[src_cols % grid.c == pcol]
        piece = _from_bytes(received[src], (len(my_rows), len(sel)))
        out.local[:, sel // grid.c] = piece
    return out


def redist_2d_to_1d(X, t):
    """Element-cyclic 2D layout -> full-column 1D, one all-to-all."""
    grid = X.grid
    gr, gc = X.gr, X.gc
    prow, pcol = grid.coord(t.rank)
    my_cols = _cols_of(gc, grid, pcol)
    slices = []
    for dst in range(grid.np_):
        sel = np.nonzero(my_cols % grid.np_ == dst)[0]
        slices.append(_as_bytes(X.local[:, sel]))
    received = t.alltoall(slices)
    out = DistMatrix1D.empty(gr, gc, grid, t.rank)
    for src in range(grid.np_):
        sprow, spcol = grid.coord(src)
        rows = _rows_of(gr, grid, sprow)
        src_cols = _cols_of(gc, grid, spcol)
        sel = src_cols[src_cols % grid.np_ == t.rank]
        piece = _from_bytes(received[src], (len(rows), len(sel)))
        out.local[np.ix_(rows, sel // grid.np_)] = piece
    return out


def _replicate(D, t, r0, r1, c0, c1):
    """Materialize the global submatrix [r0:r1, c0:c1] on every rank.

    Each rank contributes its owned entries on a zero background; summing
    the allgathered contributions is exact because supports are disjoint.
    """
    grid = D.grid
    prow, pcol = grid.coord(t.rank)
    rows = _rows_of(D.gr, grid, prow)
    cols = _cols_of(D.gc, grid, pcol)
    rsel = np.nonzero((rows >= r0) & (rows < r1))[0]
    csel = np.nonzero((cols >= c0) & (cols < c1))[0]
    buf = np.zeros((r1 - r0, c1 - c0))
    buf[np.ix_(rows[rsel] - r0, cols[csel] - c0)] = D.local[np.ix_(rsel, csel)]
    pieces = t.allgather(_as_bytes(buf))
    out = np.zeros_like(buf)
    for raw in pieces:
        out += _from_bytes(raw, buf.shape)
    return out


def _write_back(D, t, r0, c0, values):
    """Store a replicated submatrix into the owned entries of D."""
    grid = D.grid
    prow, pcol = grid.coord(t.rank)
    rows = _rows_of(D.gr, grid, prow)
    cols = _cols_of(D.gc, grid, pcol)
    r1, c1 = r0 + values.shape[0], c0 + values.shape[1]
    rsel = np.nonzero((rows >= r0) & (rows < r1))[0]
    csel = np.nonzero((cols >= c0) & (cols < c1))[0]
    D.local[np.ix_(rsel, csel)] = values[np.ix_(rows[rsel] - r0, cols[csel] - c0)]


def dist_cholesky(M, t, nb=DEFAULT_PANEL):
    """Blocked right-looking Cholesky on the 2D-distributed matrix.

    Panels of width nb are replicated on all ranks (small redundant
    factorizations), while the O(n^2) trailing update touches only locally
    owned entries. Per-rank peak memory is the local share plus one n x nb
    panel.
    """
    n = M.gr
    if M.gr != M.gc:
        raise DimensionMismatch("dist_cholesky needs a square matrix")
    if M.grid.np_ == 1:
        return DistMatrix2D(gr=n, gc=n, grid=M.grid, rank=t.rank,
                            local=kernel.cholesky_spd(M.local))
    A = DistMatrix2D(gr=n, gc=n, grid=M.grid, rank=t.rank, local=M.local.copy())
    L = DistMatrix2D.empty(n, n, M.grid, t.rank, fill=0)
    grid = M.grid
    prow, pcol = grid.coord(t.rank)
    rows = _rows_of(n, grid, prow)
    cols = _cols_of(n, grid, pcol)
    for k in range(0, n, nb):
        kb = min(nb, n - k)
        Akk = _replicate(A, t, k, k + kb, k, k + kb)
        try:
            Lkk = kernel.cholesky_spd(Akk)
        except NotPositiveDefinite as e:
            raise NotPositiveDefinite(k + e.pivot_index) from None
        _write_back(L, t, k, k, Lkk)
        if k + kb >= n:
            break
        A21 = _replicate(A, t, k + kb, n, k, k + kb)
        L21 = solve_triangular(Lkk, A21.T, lower=True, check_finite=False).T
        _write_back(L, t, k + kb, k, L21)
        # trailing update on owned entries only
        rsel = np.nonzero(rows >= k + kb)[0]
        csel = np.nonzero(cols >= k + kb)[0]
        if len(rsel) and len(csel):
            Lr = L21[rows[rsel] - (k + kb)]
            Lc = L21[cols[csel] - (k + kb)]
            A.local[np.ix_(rsel, csel)] -= Lr @ Lc.T
    return L


def dist_trsolve(L, B, t, nb=DEFAULT_PANEL):
    """Solve L X = B for a 2D-distributed lower-triangular L and RHS B.

    Internally the RHS moves to the full-column 1D layout so each rank
    runs the forward substitution on its own columns against replicated
    row panels of L.
    """
    n = L.gr
    if B.gr != n:
        raise DimensionMismatch("dist_trsolve: RHS rows do not match L")
    if L.grid.np_ == 1:
        return DistMatrix2D(gr=B.gr, gc=B.gc, grid=B.grid, rank=t.rank,
                            local=kernel.trsolve_lower(L.local, B.local))
    B1 = redist_2d_to_1d(B, t)
    X = B1.local.copy()
    for k in range(0, n, nb):
        kb = min(nb, n - k)
        panel = _replicate(L, t, k, k + kb, 0, k + kb)
        if X.shape[1]:
            rhs = X[k:k + kb] - panel[:, :k] @ X[:k]
            X[k:k + kb] = solve_triangular(panel[:, k:k + kb], rhs,
                                           lower=True, check_finite=False)
    X1 = DistMatrix1D(gr=B.gr, gc=B.gc, grid=B.grid, rank=t.rank, local=X)
    return redist_1d_to_2d(X1, t)


def _replicate_full(D, t):
    """Gather a distributed matrix and hand every rank a full copy."""
    A = gather_matrix(D, t)
    return t.broadcast_obj(0, A)


@dataclass
class DistConfig:
    m_blk: int | None = None  # default 256 * np
    emit_s_inv: bool = False
    nb: int = DEFAULT_PANEL
    threads: int = 1


def run_dist(t, paths, cfg=None):
    """SPMD body of the distributed engine; call on every rank via
    transport.run_spmd. Returns a RunSummary (rank 0 carries the totals).

    Each rank streams its own contiguous chunk of every marker block from
    disk; the union of chunks is viewed, without communication, as a
    1D-distributed block that is redistributed to the 2D grid for the
    whitening solve and back for the local per-marker systems.
    """
    cfg = cfg or DistConfig()
    t_start = time.perf_counter()
    np_ = t.size
    grid = grid_create(np_)
    n, m = fileio.read_dims(paths.geno, "GWAX")
    m_blk = cfg.m_blk if cfg.m_blk is not None else DEFAULT_LOCAL_BLOCK * np_
    if m_blk % np_ != 0:
        raise ConfigError(f"m_blk={m_blk} not divisible by np={np_}")
    m_blk = min(m_blk, ((m + np_ - 1) // np_) * np_)
    loc = m_blk // np_
    nblocks = (m + m_blk - 1) // m_blk

    def chunk(bi):
        # contiguous per-rank chunk of block bi; padding is bookkeeping only
        first = bi * m_blk
        start = min(first + t.rank * loc, m)
        valid = min(loc, m - start)
        return start, max(valid, 0)

    reader = fileio.BlockReader(paths.geno)
    bufs = [np.zeros((n, loc), order="F"), np.zeros((n, loc), order="F")]
    flags = 1 if cfg.emit_s_inv else 0

    # the first local block starts loading before any factoring so the
    # transfer hides behind the preparation phase
    start0, valid0 = chunk(0)
    ticket = reader.start(start0, valid0, bufs[0]) if valid0 else None

    t0 = time.perf_counter()
    M = fileio.read_matrix(paths.cov, "GWAM") if t.rank == 0 else None
    Mdist = scatter_matrix(M, grid, t)
    del M
    Ld = dist_cholesky(Mdist, t, nb=cfg.nb)
    del Mdist
    XL = fileio.read_matrix(paths.covariates, "GWAC") if t.rank == 0 else None
    y = fileio.read_matrix(paths.pheno, "GWAY") if t.rank == 0 else None
    XLd = scatter_matrix(XL, grid, t)
    yd = scatter_matrix(None if y is None else y[:, None], grid, t)
    XLbar_d = dist_trsolve(Ld, XLd, t, nb=cfg.nb)
    ybar_d = dist_trsolve(Ld, yd, t, nb=cfg.nb)
    # local copies on every rank; the small products are redundant by design
    XLbar = _replicate_full(XLbar_d, t)
    ybar = _replicate_full(ybar_d, t)[:, 0]
    S_TL = kernel.gram(XLbar)
    b_T = XLbar.T @ ybar
    ctx = kernel.PreparedContext(L=np.empty((n, 0)), XLbar=XLbar, ybar=ybar,
                                 S_TL=S_TL, b_T=b_T)
    p = ctx.p
    t_prepare = time.perf_counter() - t0

    if t.rank == 0:
        writer = fileio.BlockWriter(paths.out, m, p, flags, create=True)
    t.barrier()
    if t.rank != 0:
        writer = fileio.BlockWriter(paths.out, m, p, flags, create=False)

    t_compute = 0.0
    t_io_wait = 0.0
    t_redist = 0.0
    combine_bytes = 0
    localpart_bytes = 0
    store_ticket = None
    for bi in range(nblocks):
        cur = bi % 2
        start, valid = chunk(bi)
        t0 = time.perf_counter()
        if ticket is not None:
            reader.wait(ticket)
        t_io_wait += time.perf_counter() - t0
        if valid < loc:
            bufs[cur][:, valid:] = 0.0
        if bi + 1 < nblocks:
            nstart, nvalid = chunk(bi + 1)
            ticket = reader.start(nstart, nvalid, bufs[1 - cur]) if nvalid else None
        else:
            ticket = None
        # combine: the local chunks are, as-is, the columns of a
        # 1D-distributed block; no communication happens here
        c0 = t.counters()
        X1 = DistMatrix1D(gr=n, gc=m_blk, grid=grid, rank=t.rank, local=bufs[cur])
        combine_bytes += t.counters() - c0
        t0 = time.perf_counter()
        X2 = redist_1d_to_2d(X1, t)
        t_redist += time.perf_counter() - t0
        t0 = time.perf_counter()
        Xb2 = dist_trsolve(Ld, X2, t, nb=cfg.nb)
        t_compute += time.perf_counter() - t0
        t0 = time.perf_counter()
        Xb1 = redist_2d_to_1d(Xb2, t)
        t_redist += time.perf_counter() - t0
        # localpart: a view of this rank's columns, again zero communication
        c0 = t.counters()
        Xbar_local = Xb1.local
        localpart_bytes += t.counters() - c0
        t0 = time.perf_counter()
        results = kernel.solve_whitened_block(
            ctx, Xbar_local[:, :valid], start, emit_s_inv=cfg.emit_s_inv)
        t_compute += time.perf_counter() - t0
        t0 = time.perf_counter()
        if store_ticket is not None:
            writer.wait(store_ticket)
        t_io_wait += time.perf_counter() - t0
        if valid:
            store_ticket = writer.start(
                kernel.ResultBlock(first_index=start, results=results))
        else:
            store_ticket = None
    t0 = time.perf_counter()
    if store_ticket is not None:
        writer.wait(store_ticket)
    t_io_wait += time.perf_counter() - t0
    t.barrier()
    reader.close()
    writer.close()

    stats = t.allgather_obj(dict(
        bytes_read=reader.bytes_read, bytes_written=writer.bytes_written,
        combine=combine_bytes, localpart=localpart_bytes))
    summary = RunSummary(
        mode="dist", n=n, m=m, p=p, m_blk=m_blk, np_=np_, threads=1,
        t_prepare=t_prepare, t_compute=t_compute, t_io_wait=t_io_wait,
        t_redistribute=t_redist, t_total=time.perf_counter() - t_start,
        bytes_read=sum(s["bytes_read"] for s in stats),
        bytes_written=sum(s["bytes_written"] for s in stats),
        peak_resident_est=8 * n * n // np_ + 2 * 8 * n * loc + 8 * n * p,
        buffer_regions=2,
        combine_bytes=sum(s["combine"] for s in stats),
        localpart_bytes=sum(s["localpart"] for s in stats),
    )
    return summary
