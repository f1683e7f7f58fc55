"""Binary file formats and the asynchronous block read/write agents.

Every file starts with a fixed header: 4 ASCII magic bytes, a u32
little-endian version (always 1), then kind-specific u64 little-endian
dimensions. Payloads are column-major 64-bit little-endian IEEE-754
reals with no padding.

Kinds:
    GWAM  covariance        dims (n,)        payload n x n
    GWAX  genotypes         dims (n, m)      payload n x m, one marker per column
    GWAC  covariates        dims (n, q)      payload n x q (q = p - 1)
    GWAY  phenotype         dims (n,)        payload n
    GWAB  results           dims (m, p, flags)  one record per marker:
          p betas, then (iff flags bit 0) p(p+1)/2 packed lower-triangle
          reals of the inverse normal-equations matrix. Degenerate markers
          are all-NaN records.

The packed triangle ordering is np.tril_indices order: (0,0), (1,0),
(1,1), (2,0), ...
"""

from __future__ import annotations

import os
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import (
    AsymmetricCovariance,
    BadMagic,
    DimensionMismatch,
    OverlappingBuffer,
    TruncatedFile,
    UnsupportedVersion,
)
from .kernel import ResultBlock, SnpBlock, SnpResult

MAGIC = {
    "GWAM": b"GWAM",
    "GWAX": b"GWAX",
    "GWAC": b"GWAC",
    "GWAY": b"GWAY",
    "GWAB": b"GWAB",
}
NDIMS = {"GWAM": 1, "GWAX": 2, "GWAC": 2, "GWAY": 1, "GWAB": 3}
VERSION = 1
F64 = np.dtype("<f8")


def header_size(kind):
    return 4 + 4 + 8 * NDIMS[kind]


def pack_header(kind, dims):
    if len(dims) != NDIMS[kind]:
        raise DimensionMismatch(f"{kind} header takes {NDIMS[kind]} dims")
    return MAGIC[kind] + struct.pack("<I", VERSION) + struct.pack(
        f"<{len(dims)}Q", *dims)


def read_header(f, kind):
    raw = f.read(header_size(kind))
    if len(raw) < header_size(kind):
        raise TruncatedFile("file shorter than header")
    if raw[:4] != MAGIC[kind]:
        raise BadMagic(f"expected {kind}, found {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}")
    return struct.unpack_from(f"<{NDIMS[kind]}Q", raw, 8)


def record_size(p, flags):
    extra = p * (p + 1) // 2 if flags & 1 else 0
    return 8 * (p + extra)


@dataclass
class ResultPayload:
    """In-memory image of a GWAB file."""

    betas: np.ndarray            # m x p; degenerate markers all-NaN
    sinv: np.ndarray | None      # m x p(p+1)/2 when flag set, else None

    @property
    def statuses(self):
        return np.where(np.all(np.isnan(self.betas), axis=1), "degenerate", "ok")


def write_matrix(path, kind, payload):
    """Write a whole file of the given kind."""
    if kind == "GWAB":
        return _write_results(path, payload)
    arr = np.asarray(payload, dtype=np.float64)
    if kind in ("GWAM",):
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise DimensionMismatch("covariance payload must be square")
        dims = (arr.shape[0],)
    elif kind in ("GWAX", "GWAC"):
        if arr.ndim != 2:
            raise DimensionMismatch(f"{kind} payload must be 2-D")
        dims = arr.shape
    elif kind == "GWAY":
        arr = arr.ravel()
        dims = (arr.shape[0],)
    else:
        raise ValueError(f"unknown kind {kind}")
    with open(path, "wb") as f:
        f.write(pack_header(kind, dims))
        f.write(np.asfortranarray(arr, dtype=F64).tobytes(order="F"))


def _write_results(path, payload: ResultPayload):
    m, p = payload.betas.shape
    flags = 1 if payload.sinv is not None else 0
    with open(path, "wb") as f:
        f.write(pack_header("GWAB", (m, p, flags)))
        if flags:
            rec = np.hstack([payload.betas, payload.sinv]).astype(F64)
        else:
            rec = payload.betas.astype(F64)
        f.write(np.ascontiguousarray(rec).tobytes())


def read_matrix(path, kind):
    """Read a whole file; inverse of write_matrix (bitwise round trip)."""
    with open(path, "rb") as f:
        dims = read_header(f, kind)
        body = f.read()
    if kind == "GWAB":
        m, p, flags = dims
        rsz = record_size(p, flags)
        if len(body) < m * rsz:
            raise TruncatedFile(f"expected {m * rsz} payload bytes, got {len(body)}")
        rec = np.frombuffer(body[:m * rsz], dtype=F64).reshape(m, rsz // 8)
        betas = rec[:, :p].copy()
        sinv = rec[:, p:].copy() if flags & 1 else None
        return ResultPayload(betas=betas, sinv=sinv)
    if kind == "GWAM":
        shape = (dims[0], dims[0])
    elif kind in ("GWAX", "GWAC"):
        shape = dims
    else:
        shape = (dims[0],)
    need = 8 * int(np.prod(shape))
    if len(body) < need:
        raise TruncatedFile(f"expected {need} payload bytes, got {len(body)}")
    arr = np.frombuffer(body[:need], dtype=F64).reshape(shape, order="F").copy(order="F")
    if kind == "GWAM":
        if not np.array_equal(arr, arr.T):
            raise AsymmetricCovariance("covariance file is not exactly symmetric")
        if not np.all(np.isfinite(arr)):
            raise AsymmetricCovariance("covariance file has non-finite entries")
    return arr


def read_dims(path, kind):
    with open(path, "rb") as f:
        return read_header(f, kind)


@dataclass
class IoTicket:
    future: object
    buffer_key: int
    owner: object


class _Agent:
    """One dedicated worker per transfer direction; buffers under an
    in-flight ticket are tracked so overlapping use fails fast."""

    def __init__(self):
        self._pool = ThreadPoolExecutor(max_workers=1)
        self._inflight = set()
        self._lock = threading.Lock()

    def submit(self, buffer_key, fn):
        with self._lock:
            if buffer_key in self._inflight:
                raise OverlappingBuffer("buffer already referenced by an in-flight ticket")
            self._inflight.add(buffer_key)
        return IoTicket(self._pool.submit(fn), buffer_key, self)

    def wait(self, ticket):
        try:
            return ticket.future.result()
        finally:
            with self._lock:
                self._inflight.discard(ticket.buffer_key)

    def close(self):
        self._pool.shutdown(wait=True)


class BlockReader:
    """Asynchronous column-block reader over a GWAX genotype file."""

    def __init__(self, path):
        self.path = path
        self.n, self.m = read_dims(path, "GWAX")
        self._hdr = header_size("GWAX")
        self._agent = _Agent()
        self.bytes_read = 0

    def start(self, first_index, count, buffer):
        """Begin loading columns [first_index, first_index+count) into the
        leading columns of `buffer` (n x >=count, Fortran order)."""
        if first_index < 0 or first_index + count > self.m:
            raise DimensionMismatch("block outside file range")
        if buffer.shape[0] != self.n or buffer.shape[1] < count:
            raise DimensionMismatch("buffer too small for block")

        def _load():
            nbytes = 8 * self.n * count
            with open(self.path, "rb") as f:
                f.seek(self._hdr + 8 * self.n * first_index)
                raw = f.read(nbytes)
            if len(raw) < nbytes:
                raise TruncatedFile("genotype file shorter than header promises")
            cols = np.frombuffer(raw, dtype=F64).reshape(
                (self.n, count), order="F")
            buffer[:, :count] = cols
            self.bytes_read += nbytes
            return SnpBlock(first_index=first_index, data=buffer[:, :count])

        return self._agent.submit(id(buffer), _load)

    def wait(self, ticket):
        return self._agent.wait(ticket)

    def close(self):
        self._agent.close()


class BlockWriter:
    """Asynchronous record writer over a GWAB result file.

    Records are offset-addressed by global marker index, so blocks may be
    written in any order; the file content depends only on the results.
    """

    def __init__(self, path, m, p, flags, create=True):
        self.path = path
        self.m, self.p, self.flags = m, p, flags
        self._rsz = record_size(p, flags)
        self._hdr = header_size("GWAB")
        if create:
            with open(path, "wb") as f:
                f.write(pack_header("GWAB", (m, p, flags)))
                f.seek(self._hdr + m * self._rsz - 1)
                f.write(b"\0")
        self._agent = _Agent()
        self.bytes_written = 0

    def encode(self, block: ResultBlock):
        """Pack a ResultBlock into a contiguous record array."""
        cnt = len(block.results)
        rec = np.full((cnt, self._rsz // 8), np.nan, dtype=F64)
        for k, r in enumerate(block.results):
            rec[k, :self.p] = r.beta
            if self.flags & 1 and r.s_inv is not None:
                rec[k, self.p:] = r.s_inv
        return rec

    def start(self, block: ResultBlock, buffer=None):
        """Begin writing the block's records at their global offsets.

        `buffer` (if given) receives the encoded records and is the region
        tracked for overlap; by default the encoded array itself is."""
        rec = self.encode(block)
        if buffer is not None:
            buffer[:rec.shape[0], :rec.shape[1]] = rec
            rec = buffer[:rec.shape[0], :rec.shape[1]]
        first = block.first_index

        def _store():
            raw = np.ascontiguousarray(rec).tobytes()
            with open(self.path, "r+b") as f:
                f.seek(self._hdr + first * self._rsz)
                f.write(raw)
            self.bytes_written += len(raw)

        return self._agent.submit(id(buffer) if buffer is not None else id(rec), _store)

    def wait(self, ticket):
        return self._agent.wait(ticket)

    def close(self):
        self._agent.close()


def results_from_payload(payload: ResultPayload, first_index=0):
    """Rehydrate SnpResults from a read GWAB payload (testing aid)."""
    out = []
    for k in range(payload.betas.shape[0]):
        beta = payload.betas[k]
        degenerate = bool(np.all(np.isnan(beta)))
        out.append(SnpResult(
            snp_index=first_index + k,
            beta=beta,
            s_inv=None if (degenerate or payload.sinv is None) else payload.sinv[k],
            status="degenerate" if degenerate else "ok",
        ))
    return out


def total_genotype_bytes(path):
    n, m = read_dims(path, "GWAX")
    return 8 * n * m, n, m


def exists_nonempty(path):
    return os.path.exists(path) and os.path.getsize(path) > 0
