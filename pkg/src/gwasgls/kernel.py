"""Dense linear-algebra core for the structured GLS sweep.

Solves, for each genetic marker i, the generalized least-squares problem

    b_i = (X_i^T M^-1 X_i)^-1 X_i^T M^-1 y

by whitening with the Cholesky factor of M. The covariate part of X_i is
shared across markers, so everything that does not depend on the marker
column is hoisted into a PreparedContext and reused for every block of
marker columns.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.linalg.lapack import dpotrf

from .errors import (
    DimensionMismatch,
    NotPositiveDefinite,
    RankDeficientCovariates,
)

EPS = 2.0 ** -52


@dataclass
class SnpBlock:
    """A contiguous run of marker columns (allele dosages), n x count."""

    first_index: int
    data: np.ndarray  # n x count, float64

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[1] < 1:
            raise DimensionMismatch("SnpBlock needs an n x count matrix with count >= 1")

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def count(self):
        return self.data.shape[1]


@dataclass
class SnpResult:
    """Per-marker output: the p-vector of coefficients, optionally the
    packed inverse of the small normal-equations matrix."""

    snp_index: int
    beta: np.ndarray  # length p; all-NaN iff degenerate
    s_inv: np.ndarray | None = None  # packed lower triangle, p(p+1)/2 reals
    status: str = "ok"  # "ok" | "degenerate"


@dataclass
class ResultBlock:
    first_index: int
    results: list[SnpResult] = field(default_factory=list)


@dataclass
class PreparedContext:
    """Marker-independent quantities, computed once per dataset.

    L is the Cholesky factor of M; XLbar and ybar are the whitened
    covariates and phenotype; S_TL and b_T are the fixed top-left block of
    the normal equations and its right-hand side.
    """

    L: np.ndarray        # n x n lower triangular
    XLbar: np.ndarray    # n x (p-1)
    ybar: np.ndarray     # n
    S_TL: np.ndarray     # (p-1) x (p-1)
    b_T: np.ndarray      # p-1

    @property
    def n(self):
        return self.L.shape[0]

    @property
    def p(self):
        return self.XLbar.shape[1] + 1


def cholesky_spd(M):
    """Lower Cholesky factor of an SPD matrix.

    The input is not modified. Raises NotPositiveDefinite (carrying the
    0-based pivot index) when a pivot is non-positive or non-finite.
    """
    M = np.ascontiguousarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionMismatch("covariance must be square")
    if not np.all(np.isfinite(M)):
        bad = int(np.argwhere(~np.isfinite(M))[0][0])
        raise NotPositiveDefinite(bad, "non-finite entry in covariance")
    c, info = dpotrf(M, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        raise NotPositiveDefinite(info - 1)
    if info < 0:
        raise ValueError(f"illegal argument {-info} to dpotrf")
    return c


def trsolve_lower(L, B):
    """Solve L X = B for X with L lower triangular, column by column."""
    B = np.asarray(B, dtype=np.float64)
    squeeze = B.ndim == 1
    if squeeze:
        B = B[:, None]
    if L.shape[0] != L.shape[1] or L.shape[0] != B.shape[0]:
        raise DimensionMismatch(f"trsolve: L is {L.shape}, B is {B.shape}")
    X = solve_triangular(L, B, lower=True, check_finite=False)
    return X[:, 0] if squeeze else X


def gram(A):
    """A^T A with exact stored symmetry (lower triangle computed, mirrored)."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise DimensionMismatch("gram expects a matrix")
    C = A.T @ A
    low = np.tril(C)
    return low + np.tril(C, -1).T


def _spd_pivot_threshold(S):
    return S.shape[-1] * EPS * np.max(np.abs(S), axis=(-2, -1))


def cholesky_solve_batch(S, rhs, want_inverse=False):
    """Solve S[k] x[k] = rhs[k] for a batch of small SPD systems.

    S: (B, p, p) symmetric, rhs: (B, p). A system whose Cholesky hits a
    pivot <= p * eps * max|S[k]| is marked failed (ok[k] = False) and its
    solution left as NaN; the rest of the batch is unaffected.

    Returns (x, ok) or (x, ok, s_inv_packed) where s_inv_packed holds the
    lower triangle of S[k]^-1 in np.tril_indices order.
    """
    S = np.asarray(S, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    B, p, _ = S.shape
    thresh = _spd_pivot_threshold(S)
    ok = np.ones(B, dtype=bool)
    L = np.zeros_like(S)
    for j in range(p):
        d = S[:, j, j].copy()
        if j > 0:
            d -= np.einsum("bk,bk->b", L[:, j, :j], L[:, j, :j])
        good = np.isfinite(d) & (d > thresh)
        ok &= good
        d = np.where(good, d, 1.0)  # placeholder pivot keeps the batch math finite
        L[:, j, j] = np.sqrt(d)
        for i in range(j + 1, p):
            s = S[:, i, j].copy()
            if j > 0:
                s -= np.einsum("bk,bk->b", L[:, i, :j], L[:, j, :j])
            L[:, i, j] = s / L[:, j, j]

    # forward/back substitution, vectorized over the batch
    def _solve_factored(b):
        z = np.empty_like(b)
        for i in range(p):
            acc = b[:, i].copy() if b.ndim == 2 else b[:, i, :].copy()
            for k in range(i):
                lik = L[:, i, k]
                if b.ndim == 3:
                    acc -= lik[:, None] * z[:, k, :]
                else:
                    acc -= lik * z[:, k]
            if b.ndim == 3:
                z[:, i, :] = acc / L[:, i, i][:, None]
            else:
                z[:, i] = acc / L[:, i, i]
        x = np.empty_like(b)
        for i in range(p - 1, -1, -1):
            acc = z[:, i].copy() if b.ndim == 2 else z[:, i, :].copy()
            for k in range(i + 1, p):
                lki = L[:, k, i]
                if b.ndim == 3:
                    acc -= lki[:, None] * x[:, k, :]
                else:
                    acc -= lki * x[:, k]
            if b.ndim == 3:
                x[:, i, :] = acc / L[:, i, i][:, None]
            else:
                x[:, i] = acc / L[:, i, i]
        return x

    x = _solve_factored(rhs)
    x[~ok] = np.nan
    if not want_inverse:
        return x, ok
    eye = np.broadcast_to(np.eye(p), (B, p, p)).copy()
    inv = _solve_factored(eye)
    # symmetrize exactly from the lower triangle
    il, jl = np.tril_indices(p)
    packed = inv[:, il, jl]
    packed[~ok] = np.nan
    return x, ok, packed


def solve_small_spd(S, rhs):
    """Solve one small SPD system S x = rhs via Cholesky."""
    S = np.asarray(S, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    if S.shape[0] != S.shape[1] or S.shape[0] != rhs.shape[0]:
        raise DimensionMismatch("solve_small_spd: shapes disagree")
    x, ok = cholesky_solve_batch(S[None], rhs[None])
    if not ok[0]:
        # recompute the failing pivot index for the error
        thresh = _spd_pivot_threshold(S)
        L = np.zeros_like(S)
        for j in range(S.shape[0]):
            d = S[j, j] - L[j, :j] @ L[j, :j]
            if not (np.isfinite(d) and d > thresh):
                raise NotPositiveDefinite(j)
            L[j, j] = np.sqrt(d)
            for i in range(j + 1, S.shape[0]):
                L[i, j] = (S[i, j] - L[i, :j] @ L[j, :j]) / L[j, j]
        raise NotPositiveDefinite(S.shape[0] - 1)
    return x[0]


def gls_prepare(M, XL, y):
    """Hoist all marker-independent work: factor M, whiten XL and y, and
    form the fixed block of the normal equations.

    O(n^3) once, regardless of the number of markers.
    """
    M = np.asarray(M, dtype=np.float64)
    XL = np.asarray(XL, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    n = M.shape[0]
    if XL.shape[0] != n or y.shape[0] != n:
        raise DimensionMismatch(f"gls_prepare: n={n} but XL {XL.shape}, y {y.shape}")
    L = cholesky_spd(M)
    XLbar = trsolve_lower(L, XL)
    ybar = trsolve_lower(L, y)
    S_TL = gram(XLbar)
    # fail loudly on dependent covariates: the fixed block must be SPD
    try:
        solve_small_spd(S_TL, np.zeros(S_TL.shape[0]))
    except NotPositiveDefinite as e:
        raise RankDeficientCovariates(
            f"whitened covariates are rank deficient (pivot {e.pivot_index})"
        ) from e
    b_T = XLbar.T @ ybar
    return PreparedContext(L=L, XLbar=XLbar, ybar=ybar, S_TL=S_TL, b_T=b_T)


def _column_sums(Xbar, XLbar, ybar):
    """Per-column reductions computed with np.sum so each column's result
    is independent of its position in the block (bitwise)."""
    q = XLbar.shape[1]
    cnt = Xbar.shape[1]
    S_BL = np.empty((cnt, q))
    for k in range(q):
        S_BL[:, k] = np.sum(Xbar * XLbar[:, k][:, None], axis=0)
    S_BR = np.sum(Xbar * Xbar, axis=0)
    b_B = np.sum(Xbar * ybar[:, None], axis=0)
    return S_BL, S_BR, b_B


def solve_whitened_block(ctx, Xbar, first_index, global_indices=None,
                         emit_s_inv=False):
    """Per-marker normal-equations assembly and solve for already-whitened
    marker columns Xbar (n x count). Shared by the in-core, streaming and
    distributed engines."""
    q = ctx.XLbar.shape[1]
    p = q + 1
    cnt = Xbar.shape[1]
    S_BL, S_BR, b_B = _column_sums(Xbar, ctx.XLbar, ctx.ybar)
    S = np.empty((cnt, p, p))
    S[:, :q, :q] = ctx.S_TL
    S[:, q, :q] = S_BL
    S[:, :q, q] = S_BL
    S[:, q, q] = S_BR
    rhs = np.empty((cnt, p))
    rhs[:, :q] = ctx.b_T
    rhs[:, q] = b_B
    if emit_s_inv:
        beta, ok, packed = cholesky_solve_batch(S, rhs, want_inverse=True)
    else:
        beta, ok = cholesky_solve_batch(S, rhs)
        packed = None
    results = []
    for k in range(cnt):
        gidx = first_index + k if global_indices is None else int(global_indices[k])
        if ok[k]:
            results.append(SnpResult(
                snp_index=gidx,
                beta=beta[k],
                s_inv=packed[k] if packed is not None else None,
                status="ok",
            ))
        else:
            results.append(SnpResult(
                snp_index=gidx,
                beta=np.full(p, np.nan),
                s_inv=None,
                status="degenerate",
            ))
    return results


def gls_solve_block(ctx, blk, emit_s_inv=False, threads=1):
    """Solve every marker in the block against the prepared context.

    The whitening of all columns is one blocked triangular solve; the
    mixed products are stacked across the block. Markers whose small
    system is numerically singular are flagged degenerate (all-NaN beta)
    without aborting the rest of the block.
    """
    if blk.n != ctx.n:
        raise DimensionMismatch(f"block has n={blk.n}, context has n={ctx.n}")
    Xbar = trsolve_lower(ctx.L, blk.data)
    if threads <= 1 or blk.count < 2 * threads:
        results = solve_whitened_block(ctx, Xbar, blk.first_index,
                                       emit_s_inv=emit_s_inv)
    else:
        # data-parallel over disjoint column ranges; per-column math is
        # identical regardless of the split, so results do not depend on it
        bounds = np.linspace(0, blk.count, threads + 1, dtype=int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = pool.map(
                lambda se: solve_whitened_block(
                    ctx, Xbar[:, se[0]:se[1]], blk.first_index + se[0],
                    emit_s_inv=emit_s_inv),
                [(bounds[i], bounds[i + 1]) for i in range(threads)
                 if bounds[i] < bounds[i + 1]],
            )
            results = [r for part in parts for r in part]
    return ResultBlock(first_index=blk.first_index, results=results)


def gls_oracle(M, Xi, y):
    """Literal evaluation of the GLS formula through a general linear solve
    against M. Reference route for tests; no structure exploitation."""
    M = np.asarray(M, dtype=np.float64)
    Xi = np.asarray(Xi, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    MinvX = np.linalg.solve(M, Xi)
    Minvy = np.linalg.solve(M, y)
    A = Xi.T @ MinvX
    b = Xi.T @ Minvy
    return np.linalg.solve(A, b)
