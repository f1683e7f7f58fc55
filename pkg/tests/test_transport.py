import pytest

from gwasgls.errors import SizeMismatch
from gwasgls.transport import run_spmd


def test_single_rank_alltoall_identity():
    def body(t):
        return t.alltoall([b"payload"])
    assert run_spmd(1, body) == [[b"payload"]]


def test_broadcast_all_ranks_observe_bytes():
    def body(t):
        return t.broadcast(0, b"8bytes!!" if t.rank == 0 else b"")
    assert run_spmd(3, body) == [b"8bytes!!"] * 3


def test_ring_send_recv():
    def body(t):
        t.send((t.rank + 1) % t.size, bytes([t.rank]))
        return t.recv((t.rank + t.size - 1) % t.size)[0]
    got = run_spmd(4, body)
    assert got == [(r + 3) % 4 for r in range(4)]


def test_allgather_rank_order():
    def body(t):
        return t.allgather(bytes([t.rank]) * (t.rank + 1))
    for result in run_spmd(3, body):
        assert result == [b"\x00", b"\x01\x01", b"\x02\x02\x02"]


def test_alltoall_pairwise():
    def body(t):
        slices = [bytes([t.rank, dst]) for dst in range(t.size)]
        return t.alltoall(slices)
    for rank, result in enumerate(run_spmd(4, body)):
        assert result == [bytes([src, rank]) for src in range(4)]


def test_alltoall_size_mismatch():
    def body(t):
        t.alltoall([b""] * (t.size + 1))
    with pytest.raises(SizeMismatch):
        run_spmd(2, body)


def test_barrier_and_ordered_pairs():
    def body(t):
        # messages between a fixed pair arrive in order
        if t.rank == 0:
            for i in range(10):
                t.send(1, bytes([i]))
        t.barrier()
        if t.rank == 1:
            return [t.recv(0)[0] for i in range(10)]
        return None
    assert run_spmd(2, body)[1] == list(range(10))


def test_counters_track_traffic():
    def body(t):
        before = t.counters()
        t.broadcast(0, b"x" * 100)
        return t.counters() - before
    moved = run_spmd(3, body)
    assert all(v >= 100 for v in moved)


def test_worker_exception_propagates():
    def body(t):
        if t.rank == 1:
            raise RuntimeError("boom")
        t.send(1 - t.rank if t.size == 2 else 0, b"") if False else None
    with pytest.raises(RuntimeError, match="boom"):
        run_spmd(2, body)


@pytest.mark.parametrize("size", [1, 2, 4])
def test_socket_transport_matches_inproc(size):
    def body(t):
        gathered = t.allgather(bytes([t.rank]))
        ata = t.alltoall([bytes([t.rank, d]) for d in range(t.size)])
        return gathered, ata
    assert run_spmd(size, body, transport="socket") == run_spmd(size, body)
