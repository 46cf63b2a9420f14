"""Successive-cancellation decoding with trace capture, forced flips, and CA-SCL.

All decoders are batch-first internally; the single-shot wrappers mirror the
one-trial API. Decision LLRs are clamped to +/-LLR_CLAMP inside the recursion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .polar import CodeConfig, crc_check

LLR_CLAMP = 30.0


@dataclass
class DecodeResult:
    u_hat: np.ndarray      # length-N hard decisions
    info_hat: np.ndarray   # u_hat restricted to the non-frozen positions
    trace: np.ndarray      # length-N decision LLRs (alpha-bar)
    crc_ok: bool


def _clamp(x: np.ndarray) -> np.ndarray:
    return np.clip(x, -LLR_CLAMP, LLR_CLAMP, out=x)


def _cn_update(a: np.ndarray, b: np.ndarray, rule: str) -> np.ndarray:
    """Check-node f. Exact boxplus in its stable log-domain form, or min-sum."""
    sgn = np.sign(a) * np.sign(b)
    aa, ab = np.abs(a), np.abs(b)
    m = np.minimum(aa, ab)
    if rule == "minsum":
        return sgn * m
    corr = np.log1p(np.exp(-(aa + ab))) - np.log1p(np.exp(-np.abs(aa - ab)))
    return sgn * m + corr


def _sc_recurse(llr, code, flip_mask, u_out, alpha_out, offset, rule):
    n_local = llr.shape[1]
    if n_local == 1:
        idx = offset
        alpha_out[:, idx] = llr[:, 0]
        if code.frozen_mask[idx]:
            u = np.zeros(llr.shape[0], dtype=np.uint8)
        else:
            u = (llr[:, 0] < 0).astype(np.uint8)
            if flip_mask is not None:
                u ^= flip_mask[:, idx]
        u_out[:, idx] = u
        return u[:, None]
    half = n_local // 2
    a, b = llr[:, :half], llr[:, half:]
    left_in = _clamp(_cn_update(a, b, rule))
    x_left = _sc_recurse(left_in, code, flip_mask, u_out, alpha_out, offset, rule)
    sign = 1.0 - 2.0 * x_left.astype(np.float64)
    right_in = _clamp(b + sign * a)
    x_right = _sc_recurse(right_in, code, flip_mask, u_out, alpha_out,
                          offset + half, rule)
    return np.concatenate([x_left ^ x_right, x_right], axis=1)


def sc_decode_batch(llrs: np.ndarray, code: CodeConfig,
                    flip_mask: np.ndarray | None = None,
                    rule: str = "exact") -> tuple[np.ndarray, np.ndarray]:
    """Decode a [B, N] batch; returns (u_hat [B,N] uint8, alpha [B,N])."""
    llrs = np.asarray(llrs, dtype=np.float64)
    if llrs.ndim != 2 or llrs.shape[1] != code.block_len:
        raise ValueError(f"expected [B, {code.block_len}] LLRs, got {llrs.shape}")
    u_out = np.empty(llrs.shape, dtype=np.uint8)
    alpha_out = np.empty(llrs.shape, dtype=np.float64)
    _sc_recurse(_clamp(llrs.copy()), code, flip_mask, u_out, alpha_out, 0, rule)
    return u_out, alpha_out


def flips_to_mask(flips, code: CodeConfig, batch: int = 1) -> np.ndarray | None:
    flips = tuple(int(i) for i in flips)
    if not flips:
        return None
    if len(set(flips)) != len(flips):
        raise ValueError(f"duplicate flip indices in {flips}")
    for i in flips:
        if i < 0 or i >= code.block_len or code.frozen_mask[i]:
            raise ValueError(f"flip index {i} is frozen or out of range")
    mask = np.zeros((batch, code.block_len), dtype=np.uint8)
    mask[:, list(flips)] = 1
    return mask


def sc_decode(llr: np.ndarray, code: CodeConfig, flips=(),
              rule: str = "exact") -> DecodeResult:
    """Standard SC pass; hard decisions at `flips` are inverted."""
    llr = np.asarray(llr, dtype=np.float64)
    mask = flips_to_mask(flips, code)
    u_hat, alpha = sc_decode_batch(llr[None, :], code, mask, rule)
    info = u_hat[0, code.nonfrozen_positions]
    return DecodeResult(u_hat[0], info, alpha[0], bool(crc_check(info, code)))


# ---------------------------------------------------------------------------
# CRC-aided SC list decoding
# ---------------------------------------------------------------------------

def ca_scl_decode_batch(llrs: np.ndarray, code: CodeConfig, list_size: int,
                        rule: str = "exact"):
    """Batched CA-SCL. Returns (u_hat [B,N], crc_ok [B], trace [B,N]).

    Path metric: |alpha| penalty whenever a path's decision disagrees with the
    hard decision; pruning keeps the L best with stable (lower-path-first)
    tie-breaking. Final pick: best metric among CRC-passing paths, else best
    metric overall.
    """
    if list_size < 1:
        raise ValueError("list_size must be >= 1")
    llrs = np.asarray(llrs, dtype=np.float64)
    bsz, n = llrs.shape
    if n != code.block_len:
        raise ValueError(f"expected [B, {code.block_len}] LLRs, got {llrs.shape}")
    depth_max = n.bit_length() - 1
    L = list_size

    llr_mem = np.zeros((bsz, L, depth_max + 1, n))
    llr_mem[:, :, 0, :] = np.clip(llrs, -LLR_CLAMP, LLR_CLAMP)[:, None, :]
    ucap = np.zeros((bsz, L, depth_max + 1, n), dtype=np.uint8)
    dllr = np.zeros((bsz, L, n))
    pm = np.full((bsz, L), np.inf)
    pm[:, 0] = 0.0

    node_state = np.zeros(2 * n - 1, dtype=np.int8)
    depth, node = 0, 0
    while True:
        if depth == depth_max:
            dm = llr_mem[:, :, depth_max, node]
            if code.frozen_mask[node]:
                pm = pm + np.where(dm < 0, -dm, 0.0)
                dllr[:, :, node] = dm
            else:
                hard = (dm < 0).astype(np.uint8)
                pm2 = np.concatenate([pm, pm + np.abs(dm)], axis=1)
                order = np.argsort(pm2, axis=1, kind="stable")[:, :L]
                src = order % L
                flipped = (order >= L).astype(np.uint8)
                pm = np.take_along_axis(pm2, order, axis=1)
                llr_mem = np.take_along_axis(llr_mem, src[:, :, None, None], axis=1)
                ucap = np.take_along_axis(ucap, src[:, :, None, None], axis=1)
                dllr = np.take_along_axis(dllr, src[:, :, None], axis=1)
                dec = np.take_along_axis(hard, src, axis=1) ^ flipped
                ucap[:, :, depth_max, node] = dec
                dllr[:, :, node] = np.take_along_axis(dm, src, axis=1)
            if node == n - 1:
                break
            node //= 2
            depth -= 1
            continue

        pos = (1 << depth) - 1 + node
        width = 1 << (depth_max - depth)
        span = slice(width * node, width * (node + 1))
        if node_state[pos] == 0:
            incoming = llr_mem[:, :, depth, span]
            a, b = incoming[..., : width // 2], incoming[..., width // 2:]
            node, depth = 2 * node, depth + 1
            half = width // 2
            llr_mem[:, :, depth, half * node: half * (node + 1)] = \
                np.clip(_cn_update(a, b, rule), -LLR_CLAMP, LLR_CLAMP)
            node_state[pos] = 1
        elif node_state[pos] == 1:
            incoming = llr_mem[:, :, depth, span]
            a, b = incoming[..., : width // 2], incoming[..., width // 2:]
            half = width // 2
            left = 2 * node
            u_left = ucap[:, :, depth + 1, half * left: half * (left + 1)]
            node, depth = 2 * node + 1, depth + 1
            sign = 1.0 - 2.0 * u_left.astype(np.float64)
            llr_mem[:, :, depth, half * node: half * (node + 1)] = \
                np.clip(b + sign * a, -LLR_CLAMP, LLR_CLAMP)
            node_state[pos] = 2
        else:
            half = width // 2
            left, right = 2 * node, 2 * node + 1
            ul = ucap[:, :, depth + 1, half * left: half * (left + 1)]
            ur = ucap[:, :, depth + 1, half * right: half * (right + 1)]
            ucap[:, :, depth, span] = np.concatenate([ul ^ ur, ur], axis=-1)
            node //= 2
            depth -= 1

    u_all = ucap[:, :, depth_max, :]
    info_all = u_all[:, :, code.nonfrozen_positions]
    ok = crc_check(info_all.reshape(bsz * L, -1), code).reshape(bsz, L)
    score = np.where(ok, pm, pm + 1e18)
    sel = np.argmin(score, axis=1)
    rows = np.arange(bsz)
    return u_all[rows, sel], ok[rows, sel], dllr[rows, sel]


def ca_scl_decode(llr: np.ndarray, code: CodeConfig, list_size: int,
                  rule: str = "exact") -> DecodeResult:
    llr = np.asarray(llr, dtype=np.float64)
    u_hat, ok, trace = ca_scl_decode_batch(llr[None, :], code, list_size, rule)
    info = u_hat[0, code.nonfrozen_positions]
    return DecodeResult(u_hat[0], info, trace[0], bool(ok[0]))


# ---------------------------------------------------------------------------
# Ground-truth first-error extraction
# ---------------------------------------------------------------------------

def first_error_index(result: DecodeResult, u_true: np.ndarray,
                      code: CodeConfig) -> int | None:
    """Smallest non-frozen index where u_hat disagrees with u_true."""
    slot = first_error_slots(result.u_hat[None, :],
                             np.asarray(u_true, dtype=np.uint8)[None, :], code)[0]
    return None if slot < 0 else int(code.nonfrozen_positions[slot])


def first_error_slots(u_hat: np.ndarray, u_true: np.ndarray,
                      code: CodeConfig) -> np.ndarray:
    """Per-trial first-error position as a slot index into the non-frozen
    ordering; -1 where the batch entry has no error."""
    mism = u_hat[:, code.nonfrozen_positions] != u_true[:, code.nonfrozen_positions]
    has = mism.any(axis=1)
    slots = np.where(has, mism.argmax(axis=1), -1)
    return slots.astype(np.int64)
