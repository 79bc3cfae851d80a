"""Collective algorithms: plain references and their compressed counterparts.

The reference collectives carry raw BF16 words and define the semantics the
zipped variants must reproduce bit for bit.  Compressed variants move frames
from the container module instead:

* all-gather: compress, all-gather one u64 frame size, all-gather frames,
  decompress each peer block;
* all-to-all design 1: compress per peer, exchange (count, frame size)
  metadata, exchange frames, decompress;
* all-to-all design 2: compress per peer, exchange the fixed-size static
  sections first (receivers pre-size them from the element counts alone),
  then dynamic sizes, then dynamic sections, reassemble and decompress;
* reduce-scatter: an all-to-all (design 2) followed by a local float32
  reduction in ascending rank order, emitted as BF16 round-to-nearest-even
  or kept in float32.

Every phase is completed per rank before the next starts, matching the
variable-count collective model where a transfer cannot be posted until its
receive sizes are known.  Design 2's static phase is the exception by
construction: its sizes are known a priori, so it absorbs start-time skew.

Payload sends never depend on the receiver being ready, so all sends of a
phase are posted before any receive; receives then complete in ascending
rank order, which also fixes the reduction order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import bf16, codec, container
from .errors import (
    CollectiveError,
    CorruptChunkError,
    CorruptFrameError,
    ProtocolError,
)
from .transport import Communicator

TAG_META = 1
TAG_DATA = 2
TAG_STATIC = 3
TAG_DYNSIZE = 4
TAG_DYNAMIC = 5
TAG_TIME = 6

_EMPTY = np.empty(0, dtype=np.uint16)


@dataclass(frozen=True)
class AlltoAllSpec:
    """Per-peer send buffers and the element counts expected from each peer."""

    send_chunks: tuple
    recv_counts: tuple

    def __init__(self, send_chunks, recv_counts):
        object.__setattr__(
            self, "send_chunks", tuple(bf16.as_words(c) for c in send_chunks))
        object.__setattr__(
            self, "recv_counts", tuple(int(c) for c in recv_counts))
        if len(self.send_chunks) != len(self.recv_counts):
            raise ValueError("send_chunks and recv_counts must have equal length")
        if any(c < 0 for c in self.recv_counts):
            raise ValueError("recv counts must be nonnegative")

    @property
    def world_size(self) -> int:
        return len(self.send_chunks)


def _check_world(comm: Communicator, spec_world: int) -> None:
    if spec_world != comm.world_size:
        raise ValueError(
            f"spec is for world {spec_world}, communicator has {comm.world_size}")


def _agree_u64(comm: Communicator, value: int, what: str) -> None:
    """Exchange one u64 with every peer and insist everybody sent the same."""
    declared = comm.exchange_sizes([value] * comm.world_size, tag=TAG_META)
    for peer, got in enumerate(declared):
        if got != value:
            raise ProtocolError(
                f"{what} mismatch: rank {comm.rank} has {value}, "
                f"rank {peer} declared {got}")


# --------------------------------------------------------------------------
# reference collectives


def reference_all_gather(comm: Communicator, local) -> np.ndarray:
    local = bf16.as_words(local)
    if comm.world_size == 1:
        return local.copy()
    _agree_u64(comm, local.size, "all-gather element count")
    blob = local.tobytes()
    for peer in comm.peers():
        comm.send(peer, blob, TAG_DATA)
    parts = []
    for rank in range(comm.world_size):
        if rank == comm.rank:
            parts.append(local)
        else:
            parts.append(np.frombuffer(comm.recv(rank, TAG_DATA), dtype=np.uint16))
    return np.concatenate(parts)


def reference_all_to_all(comm: Communicator, spec: AlltoAllSpec) -> list[np.ndarray]:
    _check_world(comm, spec.world_size)
    if comm.world_size == 1:
        return [spec.send_chunks[0].copy()]
    declared = comm.exchange_sizes(
        [c.size for c in spec.send_chunks], tag=TAG_META)
    for peer in comm.peers():
        if declared[peer] != spec.recv_counts[peer]:
            raise ProtocolError(
                f"rank {peer} will send {declared[peer]} elements, "
                f"rank {comm.rank} expected {spec.recv_counts[peer]}")
    for peer in comm.peers():
        comm.send(peer, spec.send_chunks[peer].tobytes(), TAG_DATA)
    received = []
    for rank in range(comm.world_size):
        if rank == comm.rank:
            received.append(spec.send_chunks[rank].copy())
        else:
            received.append(
                np.frombuffer(comm.recv(rank, TAG_DATA), dtype=np.uint16))
    return received


def _reduce_chunks(chunks: list[np.ndarray], output: str) -> np.ndarray:
    """Sum BF16 chunks in list (= ascending rank) order with float32 arithmetic."""
    acc = bf16.to_float32(chunks[0]).copy()
    for chunk in chunks[1:]:
        acc += bf16.to_float32(chunk)
    if output == "fp32":
        return acc
    return bf16.from_float32(acc)


def _split_shards(comm: Communicator, local) -> list[np.ndarray]:
    local = bf16.as_words(local)
    if local.size % comm.world_size:
        raise ValueError(
            f"input of {local.size} elements is not divisible into "
            f"{comm.world_size} shards")
    shard = local.size // comm.world_size
    return [local[r * shard:(r + 1) * shard] for r in range(comm.world_size)]


def reference_reduce_scatter(comm: Communicator, local,
                             output: str = "bf16") -> np.ndarray:
    shards = _split_shards(comm, local)
    if comm.world_size == 1:
        return _reduce_chunks(shards, output)
    _agree_u64(comm, shards[0].size, "reduce-scatter shard length")
    for peer in comm.peers():
        comm.send(peer, shards[peer].tobytes(), TAG_DATA)
    contributions = []
    for rank in range(comm.world_size):
        if rank == comm.rank:
            contributions.append(shards[rank])
        else:
            contributions.append(
                np.frombuffer(comm.recv(rank, TAG_DATA), dtype=np.uint16))
    return _reduce_chunks(contributions, output)


# --------------------------------------------------------------------------
# compressed collectives


def _frame_for(chunk_words: np.ndarray, book) -> bytes:
    if chunk_words.size == 0:
        return b""
    return container.serialize(codec.compress(chunk_words, book))


def _parse_peer_frame(frame: bytes, expected_count: int, peer: int) -> np.ndarray:
    if expected_count == 0:
        if frame:
            raise CollectiveError(
                f"expected an empty frame, got {len(frame)} bytes", peer=peer)
        return _EMPTY
    try:
        chunk = container.parse(frame)
        words = codec.decompress(chunk)
    except (CorruptFrameError, CorruptChunkError) as exc:
        raise CollectiveError(f"corrupt frame: {exc}", peer=peer) from exc
    if words.size != expected_count:
        raise CollectiveError(
            f"frame holds {words.size} elements, expected {expected_count}",
            peer=peer)
    return words


def zip_all_gather(comm: Communicator, local,
                   sigma: float | None = None) -> np.ndarray:
    """All-gather with compressed payloads; bit-identical to the reference."""
    local = bf16.as_words(local)
    if comm.world_size == 1:
        return local.copy()
    if local.size == 0:
        _agree_u64(comm, 0, "all-gather frame size")
        return _EMPTY.copy()
    frame = _frame_for(local, codec.codebook_for(local, sigma))
    sizes = comm.exchange_sizes([len(frame)] * comm.world_size, tag=TAG_META)
    for peer in comm.peers():
        comm.send(peer, frame, TAG_DATA)
    parts = []
    for rank in range(comm.world_size):
        if rank == comm.rank:
            parts.append(local)
            continue
        blob = comm.recv(rank, TAG_DATA)
        if len(blob) != sizes[rank]:
            raise CollectiveError(
                f"frame is {len(blob)} bytes, size phase declared {sizes[rank]}",
                peer=rank)
        parts.append(_parse_peer_frame(blob, local.size, rank))
    return np.concatenate(parts)


def _prepare_frames(comm: Communicator, spec: AlltoAllSpec,
                    sigma: float | None) -> list[bytes]:
    """One codebook per call, shared by all of this rank's chunks."""
    sendable = [c for q, c in enumerate(spec.send_chunks)
                if q != comm.rank and c.size]
    if not sendable:
        return [b""] * comm.world_size
    if sigma is not None and math.isfinite(sigma) and sigma > 0.0:
        book = codec.derive_codebook(sigma)
    else:
        book = codec.codebook_for(np.concatenate(sendable), sigma)
    return [b"" if q == comm.rank else _frame_for(c, book)
            for q, c in enumerate(spec.send_chunks)]


def zip_all_to_all_d1(comm: Communicator, spec: AlltoAllSpec,
                      sigma: float | None = None) -> list[np.ndarray]:
    """Four phases: compress, metadata all-to-all, frame all-to-all, decompress."""
    _check_world(comm, spec.world_size)
    if comm.world_size == 1:
        return [spec.send_chunks[0].copy()]
    frames = _prepare_frames(comm, spec, sigma)

    for peer in comm.peers():
        comm.send(peer, struct.pack(
            "<QQ", spec.send_chunks[peer].size, len(frames[peer])), TAG_META)
    frame_sizes = [0] * comm.world_size
    for peer in comm.peers():
        count, nbytes = struct.unpack("<QQ", comm.recv(peer, TAG_META))
        if count != spec.recv_counts[peer]:
            raise ProtocolError(
                f"rank {peer} will send {count} elements, "
                f"rank {comm.rank} expected {spec.recv_counts[peer]}")
        frame_sizes[peer] = nbytes

    for peer in comm.peers():
        comm.send(peer, frames[peer], TAG_DATA)
    received = []
    for rank in range(comm.world_size):
        if rank == comm.rank:
            received.append(spec.send_chunks[rank].copy())
            continue
        blob = comm.recv(rank, TAG_DATA)
        if len(blob) != frame_sizes[rank]:
            raise CollectiveError(
                f"frame is {len(blob)} bytes, size phase declared "
                f"{frame_sizes[rank]}", peer=rank)
        received.append(_parse_peer_frame(blob, spec.recv_counts[rank], rank))
    return received


def zip_all_to_all_d2(comm: Communicator, spec: AlltoAllSpec,
                      sigma: float | None = None) -> list[np.ndarray]:
    """Static sections first (pre-sized, no metadata), then dynamic sizes and data.

    Chunks are compressed with the library default group size so receivers
    can compute static sizes from element counts alone.
    """
    _check_world(comm, spec.world_size)
    if comm.world_size == 1:
        return [spec.send_chunks[0].copy()]
    frames = _prepare_frames(comm, spec, sigma)
    splits = [container.split_static_dynamic(f) if f else None for f in frames]

    for peer in comm.peers():
        split = splits[peer]
        comm.send(peer, split.static_bytes if split else b"", TAG_STATIC)
    statics = [b""] * comm.world_size
    for peer in comm.peers():
        expected = (codec.static_size_bytes(spec.recv_counts[peer])
                    if spec.recv_counts[peer] else 0)
        statics[peer] = comm.recv(peer, TAG_STATIC)
        if len(statics[peer]) != expected:
            raise ProtocolError(
                f"static section from rank {peer} is {len(statics[peer])} "
                f"bytes, expected {expected}")

    dyn_sizes = comm.exchange_sizes(
        [len(s.dynamic_bytes) if s else 0 for s in splits], tag=TAG_DYNSIZE)

    for peer in comm.peers():
        split = splits[peer]
        comm.send(peer, split.dynamic_bytes if split else b"", TAG_DYNAMIC)
    received = []
    for rank in range(comm.world_size):
        if rank == comm.rank:
            received.append(spec.send_chunks[rank].copy())
            continue
        dynamic = comm.recv(rank, TAG_DYNAMIC)
        if len(dynamic) != dyn_sizes[rank]:
            raise CollectiveError(
                f"dynamic section is {len(dynamic)} bytes, size phase "
                f"declared {dyn_sizes[rank]}", peer=rank)
        received.append(
            _parse_peer_frame(statics[rank] + dynamic, spec.recv_counts[rank], rank))
    return received


def zip_reduce_scatter(comm: Communicator, local, sigma: float | None = None,
                       output: str = "bf16") -> np.ndarray:
    """Compressed all-to-all (design 2) plus a local float32 reduction.

    No arithmetic happens in flight, so BF16 can travel compressed and the
    sum still accumulates in float32, ascending rank order, exactly like the
    reference.
    """
    shards = _split_shards(comm, local)
    if comm.world_size == 1:
        return _reduce_chunks(shards, output)
    spec = AlltoAllSpec(shards, [shards[0].size] * comm.world_size)
    contributions = zip_all_to_all_d2(comm, spec, sigma)
    return _reduce_chunks(contributions, output)


def zip_all_reduce(comm: Communicator, local,
                   sigma: float | None = None) -> np.ndarray:
    """Convenience composition: zipped reduce-scatter followed by zipped all-gather."""
    shard = zip_reduce_scatter(comm, local, sigma)
    if comm.world_size == 1:
        return shard
    return zip_all_gather(comm, shard, sigma)


def allgather_scalar(comm: Communicator, value: float,
                     tag: int = TAG_TIME) -> list[float]:
    """All-gather one float64 per rank (metadata agreement, not payload)."""
    blob = struct.pack("<d", float(value))
    for peer in comm.peers():
        comm.send(peer, blob, tag)
    gathered = [0.0] * comm.world_size
    gathered[comm.rank] = float(value)
    for peer in comm.peers():
        (gathered[peer],) = struct.unpack("<d", comm.recv(peer, tag))
    return gathered


def timed_call(comm: Communicator, fn):
    """Run fn(), then agree with all peers on the slowest local elapsed time.

    Every rank returns the same value, which makes fits and comparisons
    consistent; uses only clock differences, so it also works across
    processes with unsynchronized clocks.
    """
    start = comm.now()
    result = fn()
    elapsed = comm.now() - start
    return result, max(allgather_scalar(comm, elapsed))
