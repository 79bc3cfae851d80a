"""Shared test helpers."""

import socket

import numpy as np

from zipcoll import bf16


def gaussian_words(n: int, sigma: float = 1.0, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return bf16.from_float64(rng.standard_normal(n) * sigma)


def rank_words(rank: int, n: int, seed: int = 0, sigma: float = 1.0) -> np.ndarray:
    rng = np.random.default_rng([seed, rank])
    return bf16.from_float64(rng.standard_normal(n) * sigma)


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]
