"""Transport contracts: FIFO per pair, size exchange, simulator clock math,
TCP mesh behavior, and failure propagation."""

import hashlib
import threading

import numpy as np
import pytest

from conftest import free_port
from zipcoll.errors import (
    ProtocolError,
    TransportError,
    TransportTimeout,
)
from zipcoll.transport import (
    Communicator,
    SimProfile,
    TcpPort,
    connect_tcp,
    run_ranks,
)


class TestLoopback:
    def test_zero_byte_message(self):
        def body(comm):
            if comm.rank == 0:
                comm.send(1, b"")
                return None
            return comm.recv(0)

        assert run_ranks(2, body)[1] == b""

    def test_fifo_ordering(self):
        def body(comm):
            if comm.rank == 0:
                for i in range(10):
                    comm.send(1, bytes([i]))
                return None
            return [comm.recv(0)[0] for _ in range(10)]

        assert run_ranks(2, body)[1] == list(range(10))

    def test_payload_integrity(self):
        blob = np.random.default_rng(0).integers(0, 256, 1 << 16).astype(
            np.uint8).tobytes()

        def body(comm):
            if comm.rank == 0:
                comm.send(1, blob)
                return hashlib.sha256(blob).hexdigest()
            return hashlib.sha256(comm.recv(0)).hexdigest()

        digests = run_ranks(2, body)
        assert digests[0] == digests[1]

    def test_tag_mismatch_is_protocol_error(self):
        def body(comm):
            if comm.rank == 0:
                comm.send(1, b"x", tag=5)
                return None
            with pytest.raises(ProtocolError):
                comm.recv(0, tag=6)
            return True

        assert run_ranks(2, body)[1]

    def test_recv_timeout(self):
        def body(comm):
            if comm.rank == 1:
                with pytest.raises(TransportTimeout):
                    comm.recv(0, timeout=0.05)
            return True

        assert all(run_ranks(2, body))

    def test_peer_failure_propagates(self):
        def body(comm):
            if comm.rank == 0:
                raise RuntimeError("injected failure")
            with pytest.raises(TransportError):
                comm.recv(0, timeout=10.0)
            return True

        with pytest.raises(RuntimeError, match="injected"):
            run_ranks(2, body)


class TestExchangeSizes:
    def test_all_equal(self):
        def body(comm):
            return comm.exchange_sizes([7] * comm.world_size)

        for row in run_ranks(3, body):
            assert row == [7, 7, 7]

    def test_rank_id_permutation(self):
        def body(comm):
            return comm.exchange_sizes([comm.rank] * comm.world_size)

        for row in run_ranks(4, body):
            assert row == [0, 1, 2, 3]

    def test_transpose_oracle(self):
        rng = np.random.default_rng(3)
        matrix = rng.integers(0, 1 << 20, (4, 4))

        def body(comm):
            return comm.exchange_sizes(list(matrix[comm.rank]))

        received = np.array(run_ranks(4, body))
        assert np.array_equal(received, matrix.T)


class TestSimClock:
    def test_single_message_closed_form(self):
        profile = SimProfile(bandwidth=1e9, latency=10e-6)

        def body(comm):
            if comm.rank == 0:
                comm.send(1, bytes(1 << 20))
            else:
                comm.recv(0)
            return comm.now()

        clocks = run_ranks(2, body, "sim", profile)
        assert clocks[1] == pytest.approx(10e-6 + (1 << 20) / 1e9, abs=1e-12)

    def test_ready_time_delays_sender(self):
        profile = SimProfile(
            bandwidth=1e9, latency=0.0, ready_times={0: 0.5})

        def body(comm):
            if comm.rank == 0:
                comm.send(1, bytes(1000))
            else:
                comm.recv(0)
            return comm.now()

        clocks = run_ranks(2, body, "sim", profile)
        assert clocks[1] == pytest.approx(0.5 + 1000 / 1e9, abs=1e-12)

    def test_parallel_mode_fan_in_takes_max_not_sum(self):
        profile = SimProfile(bandwidth=1e9, latency=10e-6)
        size = 1 << 20

        def body(comm):
            if comm.rank == 0:
                for peer in comm.peers():
                    comm.recv(peer)
                return comm.now()
            comm.send(0, bytes(size))
            return comm.now()

        clocks = run_ranks(4, body, "sim", profile)
        assert clocks[0] == pytest.approx(10e-6 + size / 1e9, abs=1e-9)

    def test_serialized_mode_fan_in_takes_sum(self):
        profile = SimProfile(bandwidth=1e9, latency=10e-6,
                             mode="serialized-links")
        size = 1 << 20

        def body(comm):
            if comm.rank == 0:
                for peer in comm.peers():
                    comm.recv(peer)
                return comm.now()
            comm.send(0, bytes(size))
            return comm.now()

        clocks = run_ranks(4, body, "sim", profile)
        assert clocks[0] == pytest.approx(10e-6 + 3 * size / 1e9, abs=1e-9)

    def test_per_link_overrides(self):
        profile = SimProfile(
            bandwidth=1e9, latency=0.0,
            link_bandwidth={(0, 1): 2e9}, link_latency={(0, 1): 1e-6})

        def body(comm):
            if comm.rank == 0:
                comm.send(1, bytes(2000))
            else:
                comm.recv(0)
            return comm.now()

        clocks = run_ranks(2, body, "sim", profile)
        assert clocks[1] == pytest.approx(1e-6 + 2000 / 2e9, abs=1e-12)

    def test_deterministic_across_runs(self):
        profile = SimProfile(bandwidth=1e9, latency=5e-6,
                             mode="serialized-links")

        def body(comm):
            sizes = comm.exchange_sizes(
                [(comm.rank + 1) * 100] * comm.world_size)
            for peer in comm.peers():
                comm.send(peer, bytes((comm.rank + 1) * 1000))
            for peer in comm.peers():
                comm.recv(peer)
            return comm.now(), tuple(sizes)

        first = run_ranks(4, body, "sim", profile)
        second = run_ranks(4, body, "sim", profile)
        assert first == second

    def test_deadlock_detected_not_hung(self):
        def body(comm):
            if comm.rank == 0:
                with pytest.raises(TransportError, match="deadlock"):
                    comm.recv(1)
            return True

        assert all(run_ranks(2, body, "sim"))

    def test_profile_validation(self):
        with pytest.raises(ValueError):
            SimProfile(bandwidth=0.0)
        with pytest.raises(ValueError):
            SimProfile(latency=-1.0)
        with pytest.raises(ValueError):
            SimProfile(mode="warp-speed")
        with pytest.raises(ValueError):
            SimProfile(ready_times={0: -0.1})

    def test_profile_file_round_trip(self, tmp_path):
        profile = SimProfile(
            bandwidth=2.5e9, latency=3e-6, mode="serialized-links",
            ready_times={1: 0.25}, link_bandwidth={(0, 1): 1e8},
            link_latency={(2, 3): 5e-5})
        path = tmp_path / "fabric.profile"
        profile.to_file(path)
        assert SimProfile.from_file(path) == profile

    def test_profile_file_unknown_key(self, tmp_path):
        path = tmp_path / "bad.profile"
        path.write_text("warp=9\n")
        with pytest.raises(ValueError):
            SimProfile.from_file(path)


class TestTcp:
    def run_tcp(self, world, body):
        rendezvous = f"127.0.0.1:{free_port()}"
        results = [None] * world
        errors = []

        def runner(rank):
            comm = None
            try:
                comm = connect_tcp(world, rank, rendezvous, timeout=20.0)
                results[rank] = body(comm)
            except BaseException as exc:  # noqa: BLE001
                errors.append(exc)
            finally:
                if comm is not None:
                    comm.close()

        threads = [threading.Thread(target=runner, args=(r,))
                   for r in range(world)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]
        return results

    def test_payload_identity_and_fifo(self):
        blob = np.random.default_rng(1).integers(0, 256, 1 << 18).astype(
            np.uint8).tobytes()

        def body(comm):
            if comm.rank == 0:
                comm.send(1, blob)
                for i in range(5):
                    comm.send(1, bytes([i]))
                return True
            got = comm.recv(0)
            order = [comm.recv(0)[0] for i in range(5)]
            return hashlib.sha256(got).hexdigest() == \
                hashlib.sha256(blob).hexdigest() and order == list(range(5))

        assert self.run_tcp(2, body)[1]

    def test_simultaneous_bulk_exchange_no_deadlock(self):
        # both sides send 8 MiB before either receives; reader threads
        # must drain or this would wedge on full socket buffers
        blob = bytes(8 << 20)

        def body(comm):
            peer = 1 - comm.rank
            comm.send(peer, blob)
            return len(comm.recv(peer)) == len(blob)

        assert all(self.run_tcp(2, body))

    def test_four_rank_mesh_exchange(self):
        def body(comm):
            row = comm.exchange_sizes([comm.rank * 10] * 4)
            return row == [0, 10, 20, 30]

        assert all(self.run_tcp(4, body))

    def test_zero_byte_message(self):
        def body(comm):
            if comm.rank == 0:
                comm.send(1, b"")
                return True
            return comm.recv(0) == b""

        assert all(self.run_tcp(2, body))

    def test_disconnect_surfaces_error(self):
        def body(comm):
            if comm.rank == 0:
                comm.close()
                return True
            with pytest.raises(TransportError):
                comm.recv(0, timeout=10.0)
            return True

        assert all(self.run_tcp(2, body))

    def test_missing_rendezvous_rejected(self, monkeypatch):
        monkeypatch.delenv("ZIPCOLL_RENDEZVOUS", raising=False)
        with pytest.raises(TransportError):
            TcpPort(2, 0, rendezvous=None)

    def test_single_rank_needs_no_rendezvous(self):
        comm = Communicator(TcpPort(1, 0))
        assert comm.world_size == 1
        comm.close()
