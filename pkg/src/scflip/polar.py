"""Polar code construction, Arikan-transform encoding, and CRC handling."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


# ---------------------------------------------------------------------------
# Gaussian-approximation density evolution
# ---------------------------------------------------------------------------

def _phi(x: np.ndarray) -> np.ndarray:
    """E[tanh(L/2)]-style reliability functional of an LLR mean (two-piece fit)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    small = x < 10.0
    xs = x[small]
    out[small] = np.exp(0.0218 - 0.4527 * xs ** 0.86)
    xl = x[~small]
    out[~small] = np.sqrt(np.pi / xl) * np.exp(-xl / 4.0) * (1.0 - 10.0 / (7.0 * xl))
    return out


_PHI_AT_10 = float(np.exp(0.0218 - 0.4527 * 10.0 ** 0.86))


def _phi_inv(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    out = np.empty_like(y)
    branch = y >= _PHI_AT_10
    # closed form on the small-x branch
    out[branch] = ((0.0218 - np.log(y[branch])) / 0.4527) ** (1.0 / 0.86)
    # bisection on the monotone tail
    ys = y[~branch]
    lo = np.full_like(ys, 10.0)
    hi = np.full_like(ys, 10.0)
    while np.any(_phi(hi) > ys):
        hi = np.where(_phi(hi) > ys, hi * 2.0, hi)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        above = _phi(mid) > ys
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    out[~branch] = 0.5 * (lo + hi)
    return out


def ga_channel_means(block_len: int, design_llr_mean: float) -> np.ndarray:
    """Synthetic-channel LLR means after log2(N) polarization levels.

    Index bits are consumed MSB-first: bit 0 routes through the degraded
    (check) transform, bit 1 through the upgraded (variable) transform,
    matching the natural-order SC schedule used by the decoder.
    """
    means = np.array([design_llr_mean], dtype=np.float64)
    n = block_len.bit_length() - 1
    for _ in range(n):
        nxt = np.empty(2 * means.size, dtype=np.float64)
        nxt[0::2] = _phi_inv(1.0 - (1.0 - _phi(means)) ** 2)
        nxt[1::2] = 2.0 * means
        means = nxt
    return means


def construct_frozen_set(block_len: int, nonfrozen_count: int,
                         design_snr_db: float) -> tuple[int, ...]:
    """Frozen positions: the N-K least reliable synthetic channels under
    Gaussian-approximation density evolution at the design Eb/N0."""
    if not _is_pow2(block_len):
        raise ValueError(f"block_len must be a power of 2, got {block_len}")
    if not 0 < nonfrozen_count < block_len:
        raise ValueError(
            f"nonfrozen_count must be in (0, {block_len}), got {nonfrozen_count}")
    rate = nonfrozen_count / block_len
    sigma2 = 1.0 / (2.0 * rate * 10.0 ** (design_snr_db / 10.0))
    means = ga_channel_means(block_len, 2.0 / sigma2)
    # ascending reliability; stable sort breaks ties toward the lower index
    order = np.argsort(means, kind="stable")
    frozen = np.sort(order[: block_len - nonfrozen_count])
    return tuple(int(i) for i in frozen)


# ---------------------------------------------------------------------------
# CRC over GF(2)
# ---------------------------------------------------------------------------

def _crc_matrix(msg_len: int, crc_len: int, poly: int, shifted: bool) -> np.ndarray:
    """Rows are remainders of x^(j [+ crc_len]) mod g, MSB-first per row.

    The CRC here is zero-initialized with no final XOR, so the remainder is a
    linear function of the message and batches reduce to a GF(2) matmul.
    """
    g = (1 << crc_len) | poly
    rows = np.zeros((msg_len, crc_len), dtype=np.uint8)
    rem = poly if shifted else 1  # x^crc_len mod g = poly; x^0 mod g = 1
    for j in range(msg_len):
        bits = [(rem >> (crc_len - 1 - b)) & 1 for b in range(crc_len)]
        rows[msg_len - 1 - j] = bits
        rem <<= 1
        if rem & (1 << crc_len):
            rem ^= g
    return rows


@dataclass
class CodeConfig:
    """Code parameters plus the frozen set they induce.

    crc_poly holds the generator bits below the leading term (e.g. 0x07 for
    x^8+x^2+x+1); crc_len gives the degree.
    """

    block_len: int
    nonfrozen_count: int
    crc_len: int = 8
    crc_poly: int = 0x07
    frozen_set: tuple[int, ...] = ()
    design_snr_db: float = 1.0
    construction: str = "ga"

    nonfrozen_positions: np.ndarray = field(init=False, repr=False)
    frozen_mask: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n, k = self.block_len, self.nonfrozen_count
        if not _is_pow2(n):
            raise ValueError(f"block_len must be a power of 2, got {n}")
        if not 0 < k < n:
            raise ValueError(f"nonfrozen_count must be in (0, {n}), got {k}")
        if self.payload_len < 0:
            raise ValueError("crc_len exceeds nonfrozen_count")
        if len(self.frozen_set) != n - k:
            raise ValueError(f"frozen_set size {len(self.frozen_set)} != {n - k}")
        frozen = np.asarray(sorted(self.frozen_set), dtype=np.int64)
        if len(np.unique(frozen)) != len(frozen) or (
                len(frozen) and (frozen[0] < 0 or frozen[-1] >= n)):
            raise ValueError("frozen_set must be unique indices in [0, N)")
        self.frozen_set = tuple(int(i) for i in frozen)
        self.frozen_mask = np.zeros(n, dtype=bool)
        self.frozen_mask[frozen] = True
        self.nonfrozen_positions = np.flatnonzero(~self.frozen_mask)
        self._attach_matrix = _crc_matrix(self.payload_len, self.crc_len,
                                          self.crc_poly, shifted=True)
        self._check_matrix = _crc_matrix(k, self.crc_len, self.crc_poly,
                                         shifted=False)

    @classmethod
    def build(cls, block_len: int, nonfrozen_count: int, crc_len: int = 8,
              crc_poly: int = 0x07, design_snr_db: float = 1.0,
              construction: str = "ga") -> "CodeConfig":
        if construction != "ga":
            raise ValueError(f"unknown construction {construction!r}")
        frozen = construct_frozen_set(block_len, nonfrozen_count, design_snr_db)
        return cls(block_len, nonfrozen_count, crc_len, crc_poly, frozen,
                   design_snr_db, construction)

    @property
    def payload_len(self) -> int:
        return self.nonfrozen_count - self.crc_len

    @property
    def rate(self) -> float:
        return self.nonfrozen_count / self.block_len

    @property
    def full_crc_poly(self) -> int:
        """Generator polynomial including the leading term."""
        return (1 << self.crc_len) | self.crc_poly

    def frozen_hash(self) -> int:
        raw = np.asarray(self.frozen_set, dtype="<u4").tobytes()
        return int.from_bytes(hashlib.sha256(raw).digest()[:8], "little")

    # -- plain-text config file ------------------------------------------
    def save(self, path) -> None:
        lines = [
            f"n = {self.block_len}",
            f"k = {self.nonfrozen_count}",
            f"crc_len = {self.crc_len}",
            f"crc_poly = 0x{self.crc_poly:x}",
            f"design_snr_db = {self.design_snr_db!r}",
            f"construction = {self.construction}",
        ]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "CodeConfig":
        kv = {}
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, val = line.partition("=")
                kv[key.strip()] = val.strip()
        try:
            return cls.build(
                block_len=int(kv["n"]),
                nonfrozen_count=int(kv["k"]),
                crc_len=int(kv.get("crc_len", "8")),
                crc_poly=int(kv.get("crc_poly", "0x07"), 0),
                design_snr_db=float(kv.get("design_snr_db", "1.0")),
                construction=kv.get("construction", "ga"),
            )
        except KeyError as exc:
            raise ValueError(f"config file {path} missing key {exc}") from exc


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

def polar_encode(u: np.ndarray) -> np.ndarray:
    """x = u F^(kron n) over GF(2), natural bit order. Involutive."""
    u = np.asarray(u, dtype=np.uint8)
    n = u.shape[-1]
    if not _is_pow2(n):
        raise ValueError(f"length must be a power of 2, got {n}")
    x = u.copy()
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    m = 1
    while m < n:
        view = x.reshape(x.shape[0], n // (2 * m), 2, m)
        view[:, :, 0, :] ^= view[:, :, 1, :]
        m *= 2
    return x[0] if squeeze else x


def assemble_u(code: CodeConfig, nonfrozen_bits: np.ndarray) -> np.ndarray:
    """Place payload||CRC bits at the non-frozen positions (frozen bits 0)."""
    bits = np.asarray(nonfrozen_bits, dtype=np.uint8)
    squeeze = bits.ndim == 1
    if squeeze:
        bits = bits[None, :]
    if bits.shape[-1] != code.nonfrozen_count:
        raise ValueError(f"expected {code.nonfrozen_count} bits, got {bits.shape[-1]}")
    u = np.zeros((bits.shape[0], code.block_len), dtype=np.uint8)
    u[:, code.nonfrozen_positions] = bits
    return u[0] if squeeze else u


# ---------------------------------------------------------------------------
# CRC attach / check
# ---------------------------------------------------------------------------

def crc_attach(payload: np.ndarray, code: CodeConfig) -> np.ndarray:
    """Append the crc_len remainder bits of polynomial division."""
    p = np.asarray(payload, dtype=np.uint8)
    if p.shape[-1] != code.payload_len:
        raise ValueError(f"payload length {p.shape[-1]} != {code.payload_len}")
    rem = (p @ code._attach_matrix) % 2
    return np.concatenate([p, rem.astype(np.uint8)], axis=-1)


def crc_check(bits: np.ndarray, code: CodeConfig) -> bool | np.ndarray:
    """True iff the polynomial remainder of payload||CRC is zero."""
    b = np.asarray(bits, dtype=np.uint8)
    if b.shape[-1] != code.nonfrozen_count:
        raise ValueError(f"word length {b.shape[-1]} != {code.nonfrozen_count}")
    rem = (b @ code._check_matrix) % 2
    ok = ~rem.any(axis=-1)
    return bool(ok) if b.ndim == 1 else ok
