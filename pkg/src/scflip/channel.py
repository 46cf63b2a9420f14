"""BPSK over AWGN, channel LLRs, and reproducible RNG sub-streams."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RngStream:
    """A (seed, stream_id) pair that always reproduces the same generator.

    Children are derived multiplicatively so that parallel workers and chunked
    loops each own an independent, order-insensitive stream.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        return np.random.default_rng(ss)

    def child(self, k: int) -> "RngStream":
        return RngStream(self.seed, (self.stream_id * 1_000_003 + k + 1) % (1 << 63))


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng)!r}")


def snr_to_sigma(ebn0_db: float, rate: float) -> float:
    """Noise std for unit-energy BPSK at the given Eb/N0 and code rate."""
    if rate <= 0:
        raise ValueError(f"rate must be positive, got {rate}")
    return float(np.sqrt(1.0 / (2.0 * rate * 10.0 ** (ebn0_db / 10.0))))


def transmit(codeword: np.ndarray, sigma: float, rng) -> np.ndarray:
    """BPSK-modulate (0 -> +1), add N(0, sigma^2) noise, return LLRs 2y/sigma^2."""
    x = np.asarray(codeword, dtype=np.float64)
    gen = _as_generator(rng)
    y = (1.0 - 2.0 * x) + gen.normal(0.0, sigma, size=x.shape)
    return 2.0 * y / (sigma * sigma)
