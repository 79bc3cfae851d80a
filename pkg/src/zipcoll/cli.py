"""Command-line driver: data generation, file (de)compression, distribution
analysis, multi-rank collective benchmarks, and cost-model profiling.

File formats: .bf16 holds raw little-endian BF16 words; .zbf16 holds one
container frame.  Reports are CSV (one row per collective call) so they can
be diffed and fed straight to gnuplot.
"""

from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from . import bf16, codec, container, switcher
from .collectives import (
    AlltoAllSpec,
    reference_all_gather,
    reference_all_to_all,
    reference_reduce_scatter,
    timed_call,
    zip_all_gather,
    zip_all_to_all_d1,
    zip_all_to_all_d2,
    zip_reduce_scatter,
)
from .errors import ZipcollError
from .transport import SimProfile, connect_tcp, run_ranks

CSV_FIELDS = ("operation", "transport", "world_size", "element_count",
              "payload_bytes", "compressed_bytes", "time_s", "ratio", "verified")


def _read_bf16(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw:
        raise ZipcollError(f"{path}: empty .bf16 file")
    if len(raw) % 2:
        raise ZipcollError(f"{path}: odd byte length, not BF16 words")
    return np.frombuffer(raw, dtype="<u2").astype(np.uint16)


def _write_bf16(path, words: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(words.astype("<u2").tobytes())


# --------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.dist == "normal":
        values = rng.standard_normal(args.n) * args.sigma
        words = bf16.from_float64(values)
    elif args.dist == "lognormal":
        values = np.exp(rng.standard_normal(args.n) * args.sigma + args.mu)
        words = bf16.from_float64(values)
    elif args.dist == "constant":
        words = np.full(args.n, bf16.from_float64(
            np.array([args.value]))[0], dtype=np.uint16)
    elif args.dist == "file":
        if not args.infile:
            raise ZipcollError("--dist file needs --in")
        source = _read_bf16(args.infile)
        if source.size < args.n:
            raise ZipcollError(
                f"{args.infile} holds {source.size} words, need {args.n}")
        words = source[:args.n]
    else:  # pragma: no cover - argparse restricts choices
        raise ZipcollError(f"unknown distribution {args.dist}")
    _write_bf16(args.out, words)
    print(f"wrote {words.size} BF16 words to {args.out}")
    return 0


# --------------------------------------------------------------------------
# analyze


def cmd_analyze(args) -> int:
    words = _read_bf16(args.file)
    counts = np.bincount(bf16.exponent_bits(words), minlength=256)
    order = np.argsort(counts, kind="stable")[::-1]
    total = counts.sum()

    print(f"elements: {words.size}")
    coverage = np.cumsum(counts[order][:7]) / total * 100.0
    print("top-k exponent coverage (%):",
          "  ".join(f"k={k + 1} {coverage[k]:.2f}" for k in range(7)))

    top7 = sorted(int(e) for e in order[:7] if counts[e] > 0)
    print(f"histogram top-7 biased exponents: {top7}")

    try:
        sigma = bf16.measure_sigma(words)
    except ZipcollError:
        sigma = 0.0
    book = codec.codebook_for(words)
    analytic = sorted(book.entries)
    if sigma > 0 and np.isfinite(sigma):
        print(f"sigma (finite values): {sigma:.6g}")
        print(f"analytic codebook (Gaussian heuristic): {analytic}")
    else:
        print("sigma degenerate; modal fallback codebook:", analytic)
    if set(analytic) == set(top7):
        print("match: yes")
    else:
        print("match: no (the histogram top-7 is authoritative; the analytic "
              "codebook assumes Gaussian data)")
    return 0


# --------------------------------------------------------------------------
# zip / unzip


def cmd_zip(args) -> int:
    words = _read_bf16(args.file)
    book = codec.codebook_for(words, args.sigma)
    chunk = codec.compress(words, book, args.group_size)
    nbytes = container.write_zbf16(args.out, chunk)
    original = 2 * words.size
    print(f"{original} -> {nbytes} bytes "
          f"(ratio {original / nbytes:.3f}, {chunk.zero_count} escapes)")
    return 0


def cmd_unzip(args) -> int:
    chunk = container.read_zbf16(args.file)
    _write_bf16(args.out, codec.decompress(chunk))
    print(f"restored {chunk.element_count} BF16 words to {args.out}")
    return 0


# --------------------------------------------------------------------------
# collective benchmark


def _chunk_layout(n: int, world: int) -> list[int]:
    base, rem = divmod(n, world)
    return [base + (1 if q < rem else 0) for q in range(world)]


def _rank_payload(rank: int, nbytes: int, seed: int, sigma: float) -> np.ndarray:
    rng = np.random.default_rng([seed, rank, nbytes])
    return bf16.from_float64(rng.standard_normal(nbytes // 2) * sigma)


def _load_cost_model(args, comm) -> switcher.CostModel:
    if args.cost_profile:
        return switcher.CostModel.from_file(args.cost_profile)
    if args.transport == "tcp":
        raise ZipcollError("auto-rs over tcp needs --cost-profile")
    return switcher.profile(
        comm, [1 << 16, 1 << 20, 1 << 22], trials=1, seed=args.seed)


def _run_collective_on_rank(comm, args) -> list[dict]:
    rows = []
    model = _load_cost_model(args, comm) if args.op == "auto-rs" else None
    for nbytes in args.sizes:
        local = _rank_payload(comm.rank, nbytes, args.seed, args.sigma)
        world = comm.world_size

        if args.op == "allgather":
            payload_bytes = 2 * local.size * (world - 1)
            run = lambda: zip_all_gather(comm, local)
            ref = lambda: reference_all_gather(comm, local)
        elif args.op in ("a2a-d1", "a2a-d2"):
            layout = _chunk_layout(local.size, world)
            bounds = np.cumsum([0] + layout)
            spec = AlltoAllSpec(
                [local[bounds[q]:bounds[q + 1]] for q in range(world)],
                [layout[comm.rank]] * world)
            payload_bytes = 2 * (local.size - layout[comm.rank])
            zip_fn = zip_all_to_all_d1 if args.op == "a2a-d1" else zip_all_to_all_d2
            run = lambda: zip_fn(comm, spec)
            ref = lambda: reference_all_to_all(comm, spec)
        elif args.op in ("reducescatter", "auto-rs"):
            shard = local.size // world
            local = local[:shard * world]
            payload_bytes = 2 * shard * (world - 1)
            if args.op == "auto-rs":
                run = lambda: switcher.switched_reduce_scatter(comm, local, model)[0]
            else:
                run = lambda: zip_reduce_scatter(comm, local)
            ref = lambda: reference_reduce_scatter(comm, local)
        else:  # pragma: no cover - argparse restricts choices
            raise ZipcollError(f"unknown op {args.op}")

        before = comm.stats.snapshot()
        result, elapsed = timed_call(comm, run)
        sent = comm.stats.snapshot().delta(before).bytes_sent

        verified = ""
        if args.verify:
            expected = ref()
            if not np.array_equal(result, expected):
                diff = int(np.argmax(result != expected))
                raise ZipcollError(
                    f"verification failed: op {args.op}, rank {comm.rank}, "
                    f"size {nbytes}: first mismatch at element {diff} "
                    f"(0x{int(result[diff]):04x} != 0x{int(expected[diff]):04x})")
            verified = "yes"

        rows.append({
            "operation": args.op,
            "transport": args.transport,
            "world_size": world,
            "element_count": local.size,
            "payload_bytes": payload_bytes,
            "compressed_bytes": sent,
            "time_s": f"{elapsed:.9f}",
            "ratio": f"{payload_bytes / sent:.4f}" if sent else "1.0000",
            "verified": verified,
        })
    return rows


def _emit_csv(rows: list[dict], out) -> None:
    sink = open(out, "w", newline="") if out else sys.stdout
    try:
        writer = csv.DictWriter(sink, fieldnames=CSV_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if out:
            sink.close()


def cmd_collective(args) -> int:
    if args.transport == "tcp":
        if args.rank is None:
            raise ZipcollError("tcp transport needs --rank")
        comm = connect_tcp(args.world, args.rank, args.rendezvous)
        try:
            rows = _run_collective_on_rank(comm, args)
        finally:
            comm.close()
        if comm.rank == 0:
            _emit_csv(rows, args.out)
    else:
        profile = SimProfile.from_file(args.sim_profile) if args.sim_profile \
            else None
        per_rank = run_ranks(
            args.world, lambda comm: _run_collective_on_rank(comm, args),
            transport=args.transport, sim_profile=profile)
        _emit_csv(per_rank[0], args.out)
    return 0


# --------------------------------------------------------------------------
# profile


def cmd_profile(args) -> int:
    def body(comm):
        return switcher.profile(comm, args.sizes, trials=args.trials,
                                seed=args.seed, s=args.precision_scale)

    if args.transport == "tcp":
        if args.rank is None:
            raise ZipcollError("tcp transport needs --rank")
        comm = connect_tcp(args.world, args.rank, args.rendezvous)
        try:
            model = body(comm)
        finally:
            comm.close()
        if comm.rank != 0:
            return 0
    else:
        profile = SimProfile.from_file(args.sim_profile) if args.sim_profile \
            else None
        model = run_ranks(args.world, body, transport=args.transport,
                          sim_profile=profile)[0]

    model.to_file(args.out)
    t_rs, t_a2a = switcher.predict(model, 1 << 20)
    print(f"wrote {args.out}: alpha_rs={model.alpha_rs:.3e} "
          f"beta_rs={model.beta_rs:.3e} alpha_a2a={model.alpha_a2a:.3e} "
          f"beta_a2a={model.beta_a2a:.3e} e={model.e:.4f}")
    print(f"prediction at 1 MiB: native {t_rs:.3e}s, zipped {t_a2a:.3e}s")
    return 0


# --------------------------------------------------------------------------
# argument plumbing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zipcoll",
        description="lossless compressed collectives for BF16 tensors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a .bf16 data file")
    p.add_argument("--dist", choices=("normal", "lognormal", "constant", "file"),
                   default="normal")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--mu", type=float, default=0.0)
    p.add_argument("--value", type=float, default=1.0)
    p.add_argument("--in", dest="infile")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("analyze", help="exponent histogram and codebook check")
    p.add_argument("file")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("zip", help="compress a .bf16 file to .zbf16")
    p.add_argument("file")
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--group-size", type=int, default=codec.GROUP_SIZE)
    p.set_defaults(fn=cmd_zip)

    p = sub.add_parser("unzip", help="restore a .bf16 file from .zbf16")
    p.add_argument("file")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_unzip)

    p = sub.add_parser("collective", help="run and measure a collective")
    p.add_argument("--op", required=True, choices=(
        "allgather", "a2a-d1", "a2a-d2", "reducescatter", "auto-rs"))
    p.add_argument("--transport", choices=("loopback", "tcp", "sim"),
                   default="loopback")
    p.add_argument("--world", "--ranks", dest="world", type=int,
                   required=True, help="number of ranks")
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--size", dest="sizes", type=int, action="append",
                   required=True, help="local payload bytes; repeatable")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--verify", action="store_true",
                   help="compare against the reference collective")
    p.add_argument("--out", default=None, help="CSV report path (default stdout)")
    p.add_argument("--sim-profile", default=None)
    p.add_argument("--cost-profile", default=None)
    p.add_argument("--rendezvous", default=None,
                   help="host:port for tcp (default $ZIPCOLL_RENDEZVOUS)")
    p.set_defaults(fn=cmd_collective)

    p = sub.add_parser("profile", help="fit the reduce-scatter cost model")
    p.add_argument("--transport", choices=("loopback", "tcp", "sim"),
                   default="sim")
    p.add_argument("--world", "--ranks", dest="world", type=int,
                   required=True, help="number of ranks")
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--size", dest="sizes", type=int, action="append",
                   default=None, help="payload bytes; repeatable; "
                   "default 64KiB/1MiB/16MiB/64MiB")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision-scale", type=float, default=1.0)
    p.add_argument("--sim-profile", default=None)
    p.add_argument("--rendezvous", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_profile)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if getattr(args, "sizes", None) is None and args.command == "profile":
        args.sizes = [1 << 16, 1 << 20, 1 << 24, 1 << 26]
    try:
        return args.fn(args)
    except ZipcollError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if "verification failed" in str(exc) else 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
