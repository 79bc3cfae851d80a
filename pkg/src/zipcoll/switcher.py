"""Adaptive reduce-scatter path selection from a fitted linear cost model.

Both paths are modeled as latency plus per-byte time:

    t_native(d) = alpha_rs  + beta_rs  * d
    t_zipped(d) = alpha_a2a + beta_a2a * e * s * d

where d is the byte size of the local input, e the measured compression
factor of the zipped path, and s the precision scale (byte width of the
native collective's element type over the zipped path's; 1.0 when both move
BF16).  The zipped path wins only on a strict inequality; ties fall back to
the native collective.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from . import bf16, codec, container
from .collectives import (
    allgather_scalar,
    reference_reduce_scatter,
    timed_call,
    zip_reduce_scatter,
)
from .errors import ProfilingError, TransportError
from .transport import Communicator


class Path(enum.Enum):
    NATIVE = "native"
    ZIPPED = "zipped"


@dataclass(frozen=True)
class CostModel:
    alpha_rs: float
    beta_rs: float
    alpha_a2a: float
    beta_a2a: float
    e: float
    s: float = 1.0
    rms_rs: float = 0.0   # fit residuals, diagnostics only
    rms_a2a: float = 0.0

    def __post_init__(self):
        for name in ("alpha_rs", "beta_rs", "alpha_a2a", "beta_a2a"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 < self.e <= 1.0:
            raise ValueError("compression factor e must be in (0, 1]")
        if self.s <= 0:
            raise ValueError("precision scale s must be positive")

    _FIELDS = ("alpha_rs", "beta_rs", "alpha_a2a", "beta_a2a",
               "e", "s", "rms_rs", "rms_a2a")

    def to_file(self, path) -> None:
        with open(path, "w") as fh:
            for name in self._FIELDS:
                fh.write(f"{name}={float(getattr(self, name))!r}\n")

    @classmethod
    def from_file(cls, path) -> "CostModel":
        values = {}
        with open(path) as fh:
            for raw in fh:
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, value = line.partition("=")
                key = key.strip()
                if key not in cls._FIELDS:
                    raise ValueError(f"unknown cost-profile key {key!r}")
                values[key] = float(value)
        return cls(**values)


def predict(model: CostModel, d: int) -> tuple[float, float]:
    """Predicted (native, zipped) seconds at payload size d bytes."""
    if d < 0:
        raise ValueError("payload size must be nonnegative")
    t_rs = model.alpha_rs + model.beta_rs * d
    t_a2a = model.alpha_a2a + model.beta_a2a * model.e * model.s * d
    return t_rs, t_a2a


def select(model: CostModel, d: int) -> Path:
    """Zipped path iff it is strictly faster; any tie falls back to native."""
    t_rs, t_a2a = predict(model, d)
    return Path.ZIPPED if t_a2a < t_rs else Path.NATIVE


def crossover(model: CostModel) -> float | None:
    """Payload size where the two predictions meet, or None if they never do."""
    slope_gap = model.beta_rs - model.beta_a2a * model.e * model.s
    if slope_gap == 0.0:
        return None
    d = (model.alpha_a2a - model.alpha_rs) / slope_gap
    return d if d >= 0 and math.isfinite(d) else None


def fit_cost_model(sizes, t_rs, t_a2a, e: float, s: float = 1.0) -> CostModel:
    """Least-squares (alpha, beta) per path; negative fits clamp to zero.

    The zipped times regress against the effective bytes e*s*d so beta_a2a
    stays a per-transmitted-byte rate.
    """
    d = np.asarray(sizes, dtype=np.float64)
    if np.unique(d).size < 2:
        raise ValueError("need at least two distinct sizes to fit a line")

    def fit(x, y):
        y = np.asarray(y, dtype=np.float64)
        beta, alpha = np.polyfit(x, y, 1)
        alpha, beta = float(max(alpha, 0.0)), float(max(beta, 0.0))
        rms = float(np.sqrt(np.mean((alpha + beta * x - y) ** 2)))
        return alpha, beta, rms

    alpha_rs, beta_rs, rms_rs = fit(d, t_rs)
    alpha_a2a, beta_a2a, rms_a2a = fit(d * e * s, t_a2a)
    return CostModel(alpha_rs, beta_rs, alpha_a2a, beta_a2a, e, s,
                     rms_rs, rms_a2a)


def _profiling_payload(comm: Communicator, nbytes: int, seed: int) -> np.ndarray:
    """Deterministic Gaussian BF16 buffer sized to a whole number of shards."""
    n = max(nbytes // 2, comm.world_size)
    n -= n % comm.world_size
    rng = np.random.default_rng([seed, comm.rank, nbytes])
    return bf16.from_float64(rng.standard_normal(n))


def _measured_e(comm: Communicator, payload: np.ndarray) -> float:
    """Compression factor of the zipped path, agreed across ranks.

    Each rank compresses the chunks it would send and the per-rank ratios
    are averaged, so every rank fits the identical model and path selection
    can never diverge.
    """
    shard = payload.size // comm.world_size
    book = codec.codebook_for(payload)
    sent = 0
    for peer in range(comm.world_size):
        if peer == comm.rank:
            continue
        chunk = payload[peer * shard:(peer + 1) * shard]
        sent += len(container.serialize(codec.compress(chunk, book)))
    original = 2 * shard * (comm.world_size - 1)
    local = sent / original if original else 1.0
    return float(np.mean(allgather_scalar(comm, local)))


DEFAULT_PROFILE_SIZES = (1 << 16, 1 << 20, 1 << 24, 1 << 26)


def profile(comm: Communicator, sizes=None, trials: int = 5, seed: int = 0,
            s: float = 1.0) -> CostModel:
    """Time both reduce-scatter paths at each size and fit the cost model.

    Runs as a collective: every rank must call it with identical arguments
    and every rank returns the same model (per-size times are agreed by
    taking the slowest rank, then the median over trials).  Default sizes
    span 64 KiB to 64 MiB.
    """
    sizes = sorted(int(v) for v in (sizes or DEFAULT_PROFILE_SIZES))
    if len(set(sizes)) < 2:
        raise ValueError("profiling needs at least two distinct sizes")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if comm.world_size < 2:
        raise ValueError("profiling needs at least two ranks")

    t_rs, t_a2a, e_samples = [], [], []
    try:
        for nbytes in sizes:
            payload = _profiling_payload(comm, nbytes, seed)
            e_samples.append(_measured_e(comm, payload))
            rs_times, a2a_times = [], []
            for _ in range(trials):
                _, elapsed = timed_call(
                    comm, lambda: reference_reduce_scatter(comm, payload))
                rs_times.append(elapsed)
                _, elapsed = timed_call(
                    comm, lambda: zip_reduce_scatter(comm, payload))
                a2a_times.append(elapsed)
            t_rs.append(float(np.median(rs_times)))
            t_a2a.append(float(np.median(a2a_times)))
    except TransportError as exc:
        raise ProfilingError(f"profiling run failed: {exc}") from exc

    return fit_cost_model(sizes, t_rs, t_a2a, float(np.mean(e_samples)), s)


def switched_reduce_scatter(comm: Communicator, local, model: CostModel,
                            sigma: float | None = None,
                            output: str = "bf16"):
    """Reduce-scatter through whichever path the model predicts faster.

    Returns (shard, path taken).  The choice is a pure function of the model
    and the local byte size, so consistent inputs keep ranks in agreement.
    """
    words = bf16.as_words(local)
    path = select(model, words.size * 2)
    if path is Path.ZIPPED:
        return zip_reduce_scatter(comm, words, sigma, output), path
    return reference_reduce_scatter(comm, words, output), path


def scaled(model: CostModel, factor: float) -> CostModel:
    """Model with all four latency/bandwidth parameters scaled; selection invariant."""
    if factor <= 0:
        raise ValueError("scale factor must be positive")
    return replace(
        model,
        alpha_rs=model.alpha_rs * factor, beta_rs=model.beta_rs * factor,
        alpha_a2a=model.alpha_a2a * factor, beta_a2a=model.beta_a2a * factor)
