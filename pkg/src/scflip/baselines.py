"""Reference flip strategies: LLR-magnitude SC-flip and dynamic SC-flip."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .channel import RngStream, snr_to_sigma, transmit
from .polar import CodeConfig, crc_attach, crc_check, assemble_u, polar_encode
from .sc import DecodeResult, sc_decode, sc_decode_batch, flips_to_mask


@dataclass
class FlipCandidateList:
    sets: list[tuple[int, ...]]       # best first
    scores: list[float]


def magnitude_flip_order(trace: np.ndarray, code: CodeConfig,
                         t_max: int) -> FlipCandidateList:
    """Singleton flip sets sorted ascending by |alpha|, ties to smaller index."""
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    mags = np.abs(np.asarray(trace, dtype=np.float64)[code.nonfrozen_positions])
    order = np.argsort(mags, kind="stable")[:t_max]
    bits = code.nonfrozen_positions[order]
    return FlipCandidateList([(int(b),) for b in bits],
                             [float(m) for m in mags[order]])


def dscf_metric(trace: np.ndarray, flips, alpha: float,
                code: CodeConfig) -> float:
    """Dynamic-SCF path metric; lower means the flip set is more plausible.

    Sum of |alpha| over flipped positions plus a 1/alpha-scaled soft penalty
    over the preceding non-frozen positions that were left unflipped.
    """
    flips = tuple(int(i) for i in flips)
    if not flips:
        raise ValueError("flips must be non-empty")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    mags = np.abs(np.asarray(trace, dtype=np.float64))
    i_max = max(flips)
    flip_term = float(mags[list(flips)].sum())
    prior = code.nonfrozen_positions[code.nonfrozen_positions <= i_max]
    prior = prior[~np.isin(prior, flips)]
    pen = float(np.log1p(np.exp(-alpha * mags[prior])).sum()) / alpha
    return flip_term + pen


def _single_flip_metrics(trace: np.ndarray, alpha: float,
                         code: CodeConfig) -> np.ndarray:
    """Vectorized dscf_metric for every singleton {j}, indexed by slot."""
    a = np.abs(np.asarray(trace, dtype=np.float64)[code.nonfrozen_positions])
    pen = np.log1p(np.exp(-alpha * a)) / alpha
    cum = np.concatenate([[0.0], np.cumsum(pen)[:-1]])
    return a + cum


def _extension_metrics(trace: np.ndarray, flips: tuple[int, ...], alpha: float,
                       code: CodeConfig) -> tuple[np.ndarray, np.ndarray]:
    """Metrics of flips + {j} for every non-frozen j beyond max(flips),
    evaluated on the given trace. Returns (candidate bit indices, metrics)."""
    nf = code.nonfrozen_positions
    a = np.abs(np.asarray(trace, dtype=np.float64)[nf])
    in_set = np.isin(nf, flips)
    pen = np.log1p(np.exp(-alpha * a)) / alpha
    pen[in_set] = 0.0
    cum = np.concatenate([[0.0], np.cumsum(pen)[:-1]])
    flip_sum = float(a[in_set].sum())
    beyond = nf > max(flips)
    cands = nf[beyond]
    metrics = flip_sum + a[beyond] + cum[beyond]
    return cands, metrics


class _DscfSession:
    """Priority-queue state of one dynamic-SCF trial."""

    def __init__(self, trace, alpha, code, t_max):
        self.alpha = alpha
        self.code = code
        self.max_order = max(1, t_max - 1)
        self.heap = []
        m = _single_flip_metrics(trace, alpha, code)
        for slot, bit in enumerate(code.nonfrozen_positions):
            heapq.heappush(self.heap, (float(m[slot]), (int(bit),)))
        self.pending: tuple[int, ...] | None = None

    def pop(self) -> tuple[int, ...] | None:
        if not self.heap:
            return None
        _, flips = heapq.heappop(self.heap)
        self.pending = flips
        return flips

    def extend(self, trace) -> None:
        flips = self.pending
        if flips is None or len(flips) >= self.max_order:
            return
        cands, metrics = _extension_metrics(trace, flips, self.alpha, self.code)
        for bit, m in zip(cands, metrics):
            heapq.heappush(self.heap, (float(m), flips + (int(bit),)))


def dscf_decode(llr: np.ndarray, code: CodeConfig, alpha: float, t_max: int,
                return_attempts: bool = False):
    """Dynamic SC-flip: SC attempts guided by the alpha-metric queue."""
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    result = sc_decode(llr, code)
    attempts: list[tuple[int, ...]] = [()]
    if not result.crc_ok and t_max > 1:
        session = _DscfSession(result.trace, alpha, code, t_max)
        while len(attempts) < t_max:
            flips = session.pop()
            if flips is None:
                break
            attempts.append(flips)
            result = sc_decode(llr, code, flips)
            if result.crc_ok:
                break
            session.extend(result.trace)
    return (result, attempts) if return_attempts else result


def dscf_decode_batch(llrs: np.ndarray, code: CodeConfig, alpha: float,
                      t_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Lockstep-batched dynamic SC-flip; returns (u_hat [B,N], crc_ok [B])."""
    u_hat, alpha_tr = sc_decode_batch(llrs, code)
    info = u_hat[:, code.nonfrozen_positions]
    ok = crc_check(info, code)
    final_u = u_hat.copy()
    if t_max == 1:
        return final_u, ok
    sessions = {}
    for i in np.flatnonzero(~ok):
        sessions[int(i)] = _DscfSession(alpha_tr[i], alpha, code, t_max)
    attempts_left = {i: t_max - 1 for i in sessions}
    active = sorted(sessions)
    while active:
        rows, masks = [], []
        for i in active:
            flips = sessions[i].pop()
            if flips is None or attempts_left[i] == 0:
                attempts_left[i] = 0
                continue
            attempts_left[i] -= 1
            rows.append(i)
            masks.append(flips)
        if not rows:
            break
        flip_mask = np.zeros((len(rows), code.block_len), dtype=np.uint8)
        for r, flips in enumerate(masks):
            flip_mask[r, list(flips)] = 1
        u_b, tr_b = sc_decode_batch(llrs[rows], code, flip_mask)
        ok_b = crc_check(u_b[:, code.nonfrozen_positions], code)
        next_active = []
        for r, i in enumerate(rows):
            if ok_b[r]:
                final_u[i] = u_b[r]
                ok[i] = True
            elif attempts_left[i] > 0:
                sessions[i].extend(tr_b[r])
                next_active.append(i)
        active = next_active
    return final_u, ok


# ---------------------------------------------------------------------------
# alpha optimization and its plain-text cache
# ---------------------------------------------------------------------------

DEFAULT_ALPHA_GRID = tuple(round(0.2 + 0.1 * i, 1) for i in range(13))  # 0.2..1.4


def optimize_alpha(code: CodeConfig, ebn0_db: float, grid, trials: int,
                   rng: RngStream, t_max: int = 5,
                   chunk: int = 4096) -> float:
    """Grid-search alpha by simulated D-SCF BLER (paired noise across the
    grid); ties resolve to the smaller alpha."""
    grid = [float(a) for a in grid]
    if not grid:
        raise ValueError("grid must be non-empty")
    sigma = snr_to_sigma(ebn0_db, code.rate)
    errors = {a: 0 for a in grid}
    done = 0
    chunk_idx = 0
    while done < trials:
        b = min(chunk, trials - done)
        gen = rng.child(chunk_idx).generator()
        payload = gen.integers(0, 2, size=(b, code.payload_len), dtype=np.uint8)
        u = assemble_u(code, crc_attach(payload, code))
        llrs = transmit(polar_encode(u), sigma, gen)
        for a in grid:
            u_hat, _ = dscf_decode_batch(llrs, code, a, t_max)
            errors[a] += int((u_hat[:, code.nonfrozen_positions]
                              != u[:, code.nonfrozen_positions]).any(axis=1).sum())
        done += b
        chunk_idx += 1
    best = min(sorted(grid), key=lambda a: errors[a])
    return best


def load_alpha_table(path) -> dict[tuple[int, int, float], float]:
    table = {}
    try:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                n, k, snr, alpha = line.split()
                table[(int(n), int(k), float(snr))] = float(alpha)
    except FileNotFoundError:
        pass
    return table


def save_alpha_table(path, table: dict[tuple[int, int, float], float]) -> None:
    with open(path, "w") as fh:
        fh.write("# n k ebn0_db alpha\n")
        for (n, k, snr) in sorted(table):
            fh.write(f"{n} {k} {snr!r} {table[(n, k, snr)]!r}\n")
