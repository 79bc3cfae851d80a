"""Point-to-point transports binding ranks into a communicator.

Three interchangeable transports expose the same blocking send/recv surface:

* loopback  - all ranks are threads of one process, queues in memory;
* tcp       - one process per rank, full mesh of sockets, 16-byte frame
              header (u64 length, u32 tag, u32 source rank);
* sim       - no bytes move and no wall time passes: a virtual-clock event
              engine computes when each message would arrive from per-link
              bandwidth, latency, per-rank start skew, and a concurrency
              mode.  "full-p2p-parallel" gives every directed pair its own
              link; "serialized-links" pushes every transfer through one
              shared medium, the regime where peer-to-peer concurrency is
              not real.

All transports guarantee exactly-once, in-order delivery per (src, dst)
pair.  A communicator is driven by one logical thread at a time and runs
one collective at a time.
"""

from __future__ import annotations

import os
import queue
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from .errors import ProtocolError, TransportError, TransportTimeout

DEFAULT_TIMEOUT = 30.0

RENDEZVOUS_ENV = "ZIPCOLL_RENDEZVOUS"

MODE_PARALLEL = "full-p2p-parallel"
MODE_SERIALIZED = "serialized-links"


# --------------------------------------------------------------------------
# loopback


class _LoopbackHub:
    """Shared mailbox state for in-process ranks."""

    def __init__(self, world_size: int):
        self.world_size = world_size
        self._cond = [threading.Condition() for _ in range(world_size)]
        self._boxes = [
            {src: deque() for src in range(world_size)} for _ in range(world_size)]
        self._error: BaseException | None = None

    def send(self, src: int, dst: int, tag: int, payload: bytes) -> None:
        cond = self._cond[dst]
        with cond:
            if self._error is not None:
                raise TransportError(f"communicator aborted: {self._error}")
            self._boxes[dst][src].append((tag, payload))
            cond.notify_all()

    def recv(self, dst: int, src: int, tag: int, timeout: float) -> bytes:
        cond = self._cond[dst]
        box = self._boxes[dst][src]
        deadline = time.monotonic() + timeout
        with cond:
            while not box:
                if self._error is not None:
                    raise TransportError(f"peer failed: {self._error}")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TransportTimeout(
                        f"rank {dst}: no message from rank {src} within {timeout}s")
                cond.wait(remaining)
            got_tag, payload = box.popleft()
        if got_tag != tag:
            raise ProtocolError(
                f"rank {dst}: expected tag {tag} from rank {src}, got {got_tag}")
        return payload

    def abort(self, exc: BaseException) -> None:
        for cond in self._cond:
            with cond:
                if self._error is None:
                    self._error = exc
                cond.notify_all()


# --------------------------------------------------------------------------
# virtual-clock simulator


@dataclass(frozen=True)
class SimProfile:
    """Link and timing parameters of the simulated fabric.

    bandwidth is bytes/second, latency seconds; both can be overridden per
    directed (src, dst) link.  ready_times delays a rank's clock start.
    """

    bandwidth: float = 1e9
    latency: float = 10e-6
    mode: str = MODE_PARALLEL
    ready_times: dict = field(default_factory=dict)
    link_bandwidth: dict = field(default_factory=dict)
    link_latency: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.bandwidth <= 0 or any(b <= 0 for b in self.link_bandwidth.values()):
            raise ValueError("bandwidth must be positive")
        if self.latency < 0 or any(l < 0 for l in self.link_latency.values()):
            raise ValueError("latency must be nonnegative")
        if any(t < 0 for t in self.ready_times.values()):
            raise ValueError("ready_time must be nonnegative")
        if self.mode not in (MODE_PARALLEL, MODE_SERIALIZED):
            raise ValueError(f"unknown concurrency mode {self.mode!r}")

    def bw(self, src: int, dst: int) -> float:
        return self.link_bandwidth.get((src, dst), self.bandwidth)

    def lat(self, src: int, dst: int) -> float:
        return self.link_latency.get((src, dst), self.latency)

    def ready(self, rank: int) -> float:
        return self.ready_times.get(rank, 0.0)

    @classmethod
    def from_file(cls, path) -> "SimProfile":
        """Load a line-oriented key=value profile.

        Keys: mode, bandwidth, latency, ready_time.<rank>,
        bandwidth.<src>.<dst>, latency.<src>.<dst>.
        """
        kwargs = {"ready_times": {}, "link_bandwidth": {}, "link_latency": {}}
        with open(path) as fh:
            for raw in fh:
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, value = line.partition("=")
                key, value = key.strip(), value.strip()
                parts = key.split(".")
                if key == "mode":
                    kwargs["mode"] = value
                elif key in ("bandwidth", "latency"):
                    kwargs[key] = float(value)
                elif parts[0] == "ready_time" and len(parts) == 2:
                    kwargs["ready_times"][int(parts[1])] = float(value)
                elif parts[0] in ("bandwidth", "latency") and len(parts) == 3:
                    dest = "link_bandwidth" if parts[0] == "bandwidth" else "link_latency"
                    kwargs[dest][(int(parts[1]), int(parts[2]))] = float(value)
                else:
                    raise ValueError(f"unknown sim-profile key {key!r}")
        return cls(**kwargs)

    def to_file(self, path) -> None:
        lines = [f"mode={self.mode}",
                 f"bandwidth={self.bandwidth!r}",
                 f"latency={self.latency!r}"]
        lines += [f"ready_time.{r}={t!r}" for r, t in sorted(self.ready_times.items())]
        lines += [f"bandwidth.{s}.{d}={b!r}"
                  for (s, d), b in sorted(self.link_bandwidth.items())]
        lines += [f"latency.{s}.{d}={l!r}"
                  for (s, d), l in sorted(self.link_latency.items())]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


class _SimRecv:
    __slots__ = ("src", "tag", "done", "payload", "error")

    def __init__(self, src: int, tag: int):
        self.src = src
        self.tag = tag
        self.done = False
        self.payload = None
        self.error = None


class _SimHub:
    """Deterministic event engine driving the per-rank virtual clocks.

    Sends are instantaneous for the sender (fire-and-forget into the
    transmission scheduler); clocks advance only when a receive completes.
    The engine runs whenever every rank is blocked in a receive or parked:
    it transmits pending messages in (ready, src, dst, seq) order over the
    configured resource (shared bus or per-pair links) and wakes exactly one
    receiver per quiescent episode, which keeps the outcome a pure function
    of the rank programs regardless of thread scheduling.
    """

    def __init__(self, world_size: int, profile: SimProfile):
        self.world_size = world_size
        self.profile = profile
        self._cond = threading.Condition()
        self.clock = [profile.ready(r) for r in range(world_size)]
        self._pending = []            # [ready, src, dst, seq, tag, payload]
        self._pair_seq = {}
        self._delivered = {}          # (src, dst) -> deque[(arrival, tag, payload)]
        self._bus_free = 0.0
        self._link_free = {}
        self._blocked: dict[int, _SimRecv] = {}
        self._parked: set[int] = set()
        self._error: BaseException | None = None

    def send(self, src: int, dst: int, tag: int, payload: bytes) -> None:
        with self._cond:
            self._raise_if_aborted()
            self._parked.discard(src)
            seq = self._pair_seq[(src, dst)] = self._pair_seq.get((src, dst), 0) + 1
            self._pending.append(
                (self.clock[src], src, dst, seq, tag, payload))

    def recv(self, dst: int, src: int, tag: int, timeout: float) -> bytes:
        with self._cond:
            self._raise_if_aborted()
            self._parked.discard(dst)
            req = _SimRecv(src, tag)
            self._blocked[dst] = req
            self._pump_while_quiescent()
            deadline = time.monotonic() + timeout
            while not req.done and self._error is None:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    self._blocked.pop(dst, None)
                    raise TransportTimeout(
                        f"rank {dst}: simulation stalled waiting on rank {src}")
                self._cond.wait(remaining)
            if self._error is not None and not req.done:
                raise TransportError(f"simulation aborted: {self._error}")
            if req.error is not None:
                raise req.error
            return req.payload

    def park(self, rank: int) -> None:
        """Mark a rank idle so the engine can keep serving the others."""
        with self._cond:
            self._parked.add(rank)
            self._pump_while_quiescent()

    def abort(self, exc: BaseException) -> None:
        with self._cond:
            if self._error is None:
                self._error = exc
            self._cond.notify_all()

    def now(self, rank: int) -> float:
        with self._cond:
            return self.clock[rank]

    def _raise_if_aborted(self) -> None:
        if self._error is not None:
            raise TransportError(f"simulation aborted: {self._error}")

    def _quiescent(self) -> bool:
        return len(self._blocked) + len(self._parked) == self.world_size

    def _pump_while_quiescent(self) -> None:
        # Caller holds the lock.  Each iteration either transmits one pending
        # message or wakes one receiver; waking breaks quiescence, so stop.
        while self._quiescent() and self._error is None:
            woke = self._step()
            if woke:
                self._cond.notify_all()
                return
            if woke is None:
                return  # nothing movable

    def _step(self) -> bool | None:
        # 1. Complete the receive with the earliest already-delivered message.
        best_rank, best_arrival = None, None
        for rank, req in self._blocked.items():
            box = self._delivered.get((req.src, rank))
            if box:
                arrival = box[0][0]
                if best_arrival is None or (arrival, rank) < (best_arrival, best_rank):
                    best_rank, best_arrival = rank, arrival
        if best_rank is not None:
            req = self._blocked.pop(best_rank)
            arrival, tag, payload = self._delivered[(req.src, best_rank)].popleft()
            self.clock[best_rank] = max(self.clock[best_rank], arrival)
            if tag != req.tag:
                req.error = ProtocolError(
                    f"rank {best_rank}: expected tag {req.tag} from rank "
                    f"{req.src}, got {tag}")
            else:
                req.payload = payload
            req.done = True
            return True

        # 2. Otherwise transmit the pending message that is first in
        #    (ready, src, dst, seq) order.
        if self._pending:
            idx = min(range(len(self._pending)), key=lambda i: self._pending[i][:4])
            ready, src, dst, _seq, tag, payload = self._pending.pop(idx)
            pf = self.profile
            duration = len(payload) / pf.bw(src, dst)
            if pf.mode == MODE_SERIALIZED:
                start = max(self._bus_free, ready)
                self._bus_free = start + duration
            else:
                start = max(self._link_free.get((src, dst), 0.0), ready)
                self._link_free[(src, dst)] = start + duration
            arrival = start + duration + pf.lat(src, dst)
            self._delivered.setdefault((src, dst), deque()).append(
                (arrival, tag, payload))
            return False

        # 3. Nothing in flight and nobody can move: all-parked is normal
        #    termination, anything else is a deadlock.
        if self._blocked:
            self._error = TransportError(
                "simulated deadlock: ranks "
                f"{sorted(self._blocked)} wait on messages never sent")
            self._cond.notify_all()
        return None


# --------------------------------------------------------------------------
# per-rank ports


class RankPort:
    """One rank's handle on a loopback or sim hub."""

    def __init__(self, hub, rank: int, timeout: float = DEFAULT_TIMEOUT):
        self._hub = hub
        self.rank = rank
        self.world_size = hub.world_size
        self.timeout = timeout

    def send(self, dst: int, payload: bytes, tag: int = 0) -> None:
        self._hub.send(self.rank, dst, tag, bytes(payload))

    def recv(self, src: int, tag: int = 0, timeout: float | None = None) -> bytes:
        return self._hub.recv(self.rank, src, tag, timeout or self.timeout)

    def now(self) -> float:
        if isinstance(self._hub, _SimHub):
            return self._hub.now(self.rank)
        return time.perf_counter()

    def park(self) -> None:
        if isinstance(self._hub, _SimHub):
            self._hub.park(self.rank)

    def close(self) -> None:
        pass


# --------------------------------------------------------------------------
# TCP

_TCP_HEADER = struct.Struct("<QII")  # payload length, tag, source rank
_CLOSED = object()


class TcpPort:
    """One rank of a TCP mesh; ranks rendezvous through rank 0's listener.

    Every rank opens an ephemeral data listener; non-zero ranks register it
    with rank 0, which replies with the full address directory.  Higher
    ranks then dial lower ranks to complete the mesh.  A reader thread per
    peer socket drains frames into a queue, so bulk sends can never deadlock
    against a peer that is also sending.
    """

    def __init__(self, world_size: int, rank: int, rendezvous: str | None = None,
                 timeout: float = DEFAULT_TIMEOUT):
        if not 0 <= rank < world_size:
            raise ValueError(f"rank {rank} out of range for world {world_size}")
        self.world_size = world_size
        self.rank = rank
        self.timeout = timeout
        rendezvous = rendezvous or os.environ.get(RENDEZVOUS_ENV)
        if world_size > 1 and not rendezvous:
            raise TransportError(
                f"tcp transport needs a rendezvous address ({RENDEZVOUS_ENV})")
        self._socks: dict[int, socket.socket] = {}
        self._queues: dict[int, queue.Queue] = {}
        self._readers: list[threading.Thread] = []
        if world_size > 1:
            host, _, port = rendezvous.partition(":")
            self._establish_mesh(host, int(port))

    # -- mesh construction

    def _establish_mesh(self, host: str, port: int) -> None:
        listener = socket.create_server(("", 0), backlog=self.world_size)
        listener.settimeout(self.timeout)
        my_port = listener.getsockname()[1]

        if self.rank == 0:
            directory = self._run_rendezvous(host, port, my_port)
        else:
            directory = self._join_rendezvous(host, port, my_port)

        self._early: dict[int, socket.socket] = {}
        for peer in range(self.world_size):
            if peer == self.rank:
                continue
            if peer < self.rank:
                sock = self._dial(directory[peer], hello=self.rank)
            else:
                sock = self._accept_peer(listener, peer)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._socks[peer] = sock
            self._queues[peer] = queue.Queue()
            reader = threading.Thread(
                target=self._reader_loop, args=(peer, sock), daemon=True)
            reader.start()
            self._readers.append(reader)
        listener.close()

    def _run_rendezvous(self, host: str, port: int, my_port: int) -> dict:
        server = socket.create_server((host, port), backlog=self.world_size)
        server.settimeout(self.timeout)
        directory = {0: (host, my_port)}
        hellos = []
        try:
            while len(directory) < self.world_size:
                conn, addr = server.accept()
                conn.settimeout(self.timeout)
                peer_rank, peer_port = struct.unpack(
                    "<II", _read_exact(conn, 8, "rendezvous hello"))
                directory[peer_rank] = (addr[0], peer_port)
                hellos.append(conn)
            blob = "\n".join(
                f"{r} {h} {p}" for r, (h, p) in sorted(directory.items())
            ).encode()
            for conn in hellos:
                conn.sendall(struct.pack("<I", len(blob)) + blob)
        finally:
            for conn in hellos:
                conn.close()
            server.close()
        return directory

    def _join_rendezvous(self, host: str, port: int, my_port: int) -> dict:
        conn = self._dial((host, port))
        try:
            conn.sendall(struct.pack("<II", self.rank, my_port))
            (length,) = struct.unpack("<I", _read_exact(conn, 4, "directory"))
            blob = _read_exact(conn, length, "directory").decode()
        finally:
            conn.close()
        directory = {}
        for line in blob.splitlines():
            r, h, p = line.split()
            directory[int(r)] = (h, int(p))
        return directory

    def _dial(self, addr, hello: int | None = None) -> socket.socket:
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                sock = socket.create_connection(addr, timeout=self.timeout)
                break
            except OSError as exc:
                if time.monotonic() > deadline:
                    raise TransportError(f"cannot reach {addr}: {exc}") from exc
                time.sleep(0.05)
        sock.settimeout(self.timeout)
        if hello is not None:
            sock.sendall(struct.pack("<I", hello))
        return sock

    def _accept_peer(self, listener: socket.socket, expected: int) -> socket.socket:
        # Dial order is deterministic but arrival order is not; stash early
        # arrivals until their turn.
        if expected in self._early:
            return self._early.pop(expected)
        while True:
            try:
                conn, _ = listener.accept()
            except socket.timeout as exc:
                raise TransportError(
                    f"rank {self.rank}: peer {expected} never connected") from exc
            conn.settimeout(self.timeout)
            (peer,) = struct.unpack("<I", _read_exact(conn, 4, "mesh hello"))
            if peer == expected:
                return conn
            self._early[peer] = conn

    # -- data path

    def _reader_loop(self, peer: int, sock: socket.socket) -> None:
        q = self._queues[peer]
        try:
            sock.settimeout(None)
            while True:
                header = _read_exact(sock, _TCP_HEADER.size, "frame header")
                length, tag, src = _TCP_HEADER.unpack(header)
                if src != peer:
                    raise TransportError(
                        f"socket for peer {peer} delivered a frame from rank {src}")
                payload = _read_exact(sock, length, "frame payload")
                q.put((tag, payload))
        except BaseException as exc:  # noqa: BLE001 - reader must never die silently
            q.put((_CLOSED, exc))

    def send(self, dst: int, payload: bytes, tag: int = 0) -> None:
        payload = bytes(payload)
        try:
            self._socks[dst].sendall(
                _TCP_HEADER.pack(len(payload), tag, self.rank) + payload)
        except OSError as exc:
            raise TransportError(f"send to rank {dst} failed: {exc}") from exc

    def recv(self, src: int, tag: int = 0, timeout: float | None = None) -> bytes:
        try:
            got_tag, payload = self._queues[src].get(timeout=timeout or self.timeout)
        except queue.Empty:
            raise TransportTimeout(
                f"rank {self.rank}: no message from rank {src} within "
                f"{timeout or self.timeout}s") from None
        if got_tag is _CLOSED:
            self._queues[src].put((got_tag, payload))  # stays closed
            raise TransportError(f"connection to rank {src} lost: {payload}")
        if got_tag != tag:
            raise ProtocolError(
                f"rank {self.rank}: expected tag {tag} from rank {src}, "
                f"got {got_tag}")
        return payload

    def now(self) -> float:
        return time.perf_counter()

    def park(self) -> None:
        pass

    def close(self) -> None:
        for sock in self._socks.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()


def _read_exact(sock: socket.socket, size: int, what: str) -> bytes:
    parts = []
    remaining = size
    while remaining:
        block = sock.recv(min(remaining, 1 << 20))
        if not block:
            raise TransportError(f"connection closed while reading {what}")
        parts.append(block)
        remaining -= len(block)
    return b"".join(parts)


# --------------------------------------------------------------------------
# communicator


@dataclass
class TrafficStats:
    bytes_sent: int = 0
    bytes_received: int = 0
    messages_sent: int = 0

    def snapshot(self) -> "TrafficStats":
        return TrafficStats(self.bytes_sent, self.bytes_received, self.messages_sent)

    def delta(self, earlier: "TrafficStats") -> "TrafficStats":
        return TrafficStats(
            self.bytes_sent - earlier.bytes_sent,
            self.bytes_received - earlier.bytes_received,
            self.messages_sent - earlier.messages_sent,
        )


class Communicator:
    """A rank bound into a group of world_size peers over one transport."""

    def __init__(self, port):
        self._port = port
        self.world_size = port.world_size
        self.rank = port.rank
        self.stats = TrafficStats()

    def send(self, peer: int, payload: bytes, tag: int = 0) -> None:
        self._port.send(peer, payload, tag)
        self.stats.bytes_sent += len(payload)
        self.stats.messages_sent += 1

    def recv(self, peer: int, tag: int = 0, timeout: float | None = None) -> bytes:
        payload = self._port.recv(peer, tag, timeout)
        self.stats.bytes_received += len(payload)
        return payload

    def now(self) -> float:
        return self._port.now()

    def park(self) -> None:
        self._port.park()

    def close(self) -> None:
        self._port.close()

    def peers(self) -> list[int]:
        return [r for r in range(self.world_size) if r != self.rank]

    def exchange_sizes(self, local_sizes, tag: int = 0) -> list[int]:
        """Fixed-size all-to-all of one u64 per peer.

        Entry p of the result is the size peer p declared for this rank;
        the self entry passes through untouched.
        """
        sizes = [int(s) for s in local_sizes]
        if len(sizes) != self.world_size:
            raise ValueError(
                f"expected {self.world_size} sizes, got {len(sizes)}")
        for peer in self.peers():
            self.send(peer, struct.pack("<Q", sizes[peer]), tag)
        received = [0] * self.world_size
        received[self.rank] = sizes[self.rank]
        for peer in self.peers():
            (received[peer],) = struct.unpack("<Q", self.recv(peer, tag))
        return received


def make_hub(world_size: int, transport: str = "loopback",
             sim_profile: SimProfile | None = None):
    if transport == "loopback":
        return _LoopbackHub(world_size)
    if transport == "sim":
        return _SimHub(world_size, sim_profile or SimProfile())
    raise ValueError(f"unknown in-process transport {transport!r}")


def run_ranks(world_size: int, fn, transport: str = "loopback",
              sim_profile: SimProfile | None = None,
              timeout: float = DEFAULT_TIMEOUT) -> list:
    """Run fn(comm) for every rank on in-process threads; returns results by rank.

    The first rank failure aborts the hub so peers error out instead of
    hanging, and is re-raised here.
    """
    hub = make_hub(world_size, transport, sim_profile)
    results = [None] * world_size
    failures: list[tuple[int, BaseException]] = []

    def body(rank: int) -> None:
        comm = Communicator(RankPort(hub, rank, timeout))
        try:
            results[rank] = fn(comm)
        except BaseException as exc:  # noqa: BLE001 - propagated to the caller
            failures.append((rank, exc))
            hub.abort(exc)
        finally:
            comm.park()

    threads = [threading.Thread(target=body, args=(r,), daemon=True)
               for r in range(world_size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failures:
        rank, exc = min(failures, key=lambda f: f[0])
        raise exc
    return results


def connect_tcp(world_size: int, rank: int, rendezvous: str | None = None,
                timeout: float = DEFAULT_TIMEOUT) -> Communicator:
    return Communicator(TcpPort(world_size, rank, rendezvous, timeout))
