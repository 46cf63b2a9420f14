"""From-scratch multi-layer LSTM: forward, cross-entropy, BPTT, Adam, checkpoints.

Gate packing along the last weight axis is (forget, input, candidate, output).
The action-score head maps the top layer's final cell state (the long state)
through a fully-connected layer and a softmax; a config flag switches to the
final hidden state for ablations.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .channel import RngStream, _as_generator

LOSS_EPS = 1e-12
CHECKPOINT_MAGIC = b"SCFLSTM1"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    num_layers: int
    hidden_size: int
    input_chunk: int
    output_dim: int            # K + 1: one slot per non-frozen bit plus undo
    dropout_rate: float = 0.05
    head_source: str = "cell"  # "cell" (default) or "hidden"

    def __post_init__(self):
        if self.num_layers < 1 or self.hidden_size < 1:
            raise ValueError("num_layers and hidden_size must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.head_source not in ("cell", "hidden"):
            raise ValueError(f"unknown head_source {self.head_source!r}")


@dataclass
class LayerParams:
    w_x: np.ndarray   # [in_dim, 4H]
    w_h: np.ndarray   # [H, 4H]
    b: np.ndarray     # [4H]


@dataclass
class LstmParams:
    layers: list[LayerParams]
    head_w: np.ndarray  # [H, output_dim]
    head_b: np.ndarray  # [output_dim]

    def named_tensors(self):
        for li, layer in enumerate(self.layers):
            yield f"layer{li}.w_x", layer.w_x
            yield f"layer{li}.w_h", layer.w_h
            yield f"layer{li}.b", layer.b
        yield "head.w", self.head_w
        yield "head.b", self.head_b

    def copy(self) -> "LstmParams":
        return LstmParams(
            [LayerParams(l.w_x.copy(), l.w_h.copy(), l.b.copy())
             for l in self.layers],
            self.head_w.copy(), self.head_b.copy())

    @property
    def dtype(self):
        return self.head_w.dtype


def init_params(config: NetworkConfig, rng, dtype=np.float64) -> LstmParams:
    """Uniform +/-1/sqrt(hidden) init; forget-gate bias set to 1.0."""
    gen = _as_generator(rng)
    h = config.hidden_size
    bound = 1.0 / np.sqrt(h)
    layers = []
    for li in range(config.num_layers):
        in_dim = config.input_chunk if li == 0 else h
        w_x = gen.uniform(-bound, bound, size=(in_dim, 4 * h)).astype(dtype)
        w_h = gen.uniform(-bound, bound, size=(h, 4 * h)).astype(dtype)
        b = gen.uniform(-bound, bound, size=4 * h).astype(dtype)
        b[:h] = 1.0
        layers.append(LayerParams(w_x, w_h, b))
    head_w = gen.uniform(-bound, bound,
                         size=(h, config.output_dim)).astype(dtype)
    head_b = gen.uniform(-bound, bound, size=config.output_dim).astype(dtype)
    return LstmParams(layers, head_w, head_b)


def zeros_like_params(params: LstmParams) -> LstmParams:
    return LstmParams(
        [LayerParams(np.zeros_like(l.w_x), np.zeros_like(l.w_h),
                     np.zeros_like(l.b)) for l in params.layers],
        np.zeros_like(params.head_w), np.zeros_like(params.head_b))


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardCache:
    xs: list        # per layer: [T, B, in_dim] inputs
    f: list
    i: list
    g: list
    o: list
    c: list
    tc: list        # tanh(c)
    hprev: list     # h_{t-1}, zeros at t=0
    cprev: list
    masks: list     # per inter-layer gap: scaled dropout mask or None
    head_in: np.ndarray
    probs: np.ndarray
    train_mode: bool
    squeeze: bool = False


def _to_chunks(features: np.ndarray, config: NetworkConfig, dtype):
    feats = np.asarray(features, dtype=dtype)
    squeeze = feats.ndim == 1
    if squeeze:
        feats = feats[None, :]
    if feats.ndim == 2:
        b, n = feats.shape
        if n % config.input_chunk:
            raise ValueError(
                f"feature length {n} not divisible by chunk {config.input_chunk}")
        t = n // config.input_chunk
        chunks = feats.reshape(b, t, config.input_chunk).transpose(1, 0, 2)
    elif feats.ndim == 3:
        if feats.shape[2] != config.input_chunk:
            raise ValueError(f"chunk width {feats.shape[2]} != {config.input_chunk}")
        chunks = feats.transpose(1, 0, 2)
    else:
        raise ValueError(f"features must be 1-D, 2-D or 3-D, got {feats.ndim}-D")
    return np.ascontiguousarray(chunks), squeeze


def lstm_forward(params: LstmParams, features, config: NetworkConfig,
                 train_mode: bool = False, rng=None):
    """Run the recurrence; returns (action probabilities, ForwardCache)."""
    dtype = params.dtype
    x, squeeze = _to_chunks(features, config, dtype)
    t_steps, bsz, _ = x.shape
    h_dim = config.hidden_size
    dropout = config.dropout_rate if train_mode else 0.0
    gen = _as_generator(rng) if dropout > 0 else None
    if train_mode and config.dropout_rate > 0 and config.num_layers > 1 and gen is None:
        raise ValueError("train_mode dropout requires an rng")

    cache = ForwardCache([], [], [], [], [], [], [], [], [], [],
                         None, None, train_mode, squeeze)
    for li, layer in enumerate(params.layers):
        shape = (t_steps, bsz, h_dim)
        fs, is_, gs, os_ = (np.empty(shape, dtype) for _ in range(4))
        cs, tcs, hps, cps = (np.empty(shape, dtype) for _ in range(4))
        h = np.zeros((bsz, h_dim), dtype)
        c = np.zeros((bsz, h_dim), dtype)
        hs = np.empty(shape, dtype)
        for t in range(t_steps):
            hps[t], cps[t] = h, c
            z = x[t] @ layer.w_x + h @ layer.w_h + layer.b
            f = _sigmoid(z[:, :h_dim])
            i = _sigmoid(z[:, h_dim:2 * h_dim])
            g = np.tanh(z[:, 2 * h_dim:3 * h_dim])
            o = _sigmoid(z[:, 3 * h_dim:])
            c = f * c + i * g
            tc = np.tanh(c)
            h = o * tc
            fs[t], is_[t], gs[t], os_[t] = f, i, g, o
            cs[t], tcs[t], hs[t] = c, tc, h
        cache.xs.append(x)
        cache.f.append(fs)
        cache.i.append(is_)
        cache.g.append(gs)
        cache.o.append(os_)
        cache.c.append(cs)
        cache.tc.append(tcs)
        cache.hprev.append(hps)
        cache.cprev.append(cps)
        if li < config.num_layers - 1:
            if dropout > 0:
                keep = gen.random(hs.shape) >= dropout
                mask = (keep / (1.0 - dropout)).astype(dtype)
                cache.masks.append(mask)
                x = hs * mask
            else:
                cache.masks.append(None)
                x = hs
    top = config.num_layers - 1
    head_in = cache.c[top][-1] if config.head_source == "cell" else cache.tc[top][-1] * cache.o[top][-1]
    cache.head_in = head_in
    logits = head_in @ params.head_w + params.head_b
    probs = _softmax(logits)
    cache.probs = probs
    return (probs[0] if squeeze else probs), cache


# ---------------------------------------------------------------------------
# Loss and BPTT
# ---------------------------------------------------------------------------

def cross_entropy_loss(target: np.ndarray, output: np.ndarray):
    """Summed binary cross-entropy over all output slots (outputs clamped)."""
    t = np.asarray(target, dtype=np.float64)
    y = np.clip(np.asarray(output, dtype=np.float64), LOSS_EPS, 1.0 - LOSS_EPS)
    e = -(t * np.log(y) + (1.0 - t) * np.log(1.0 - y)).sum(axis=-1)
    return float(e) if e.ndim == 0 else e


def backward(params: LstmParams, cache: ForwardCache, target,
             config: NetworkConfig, weights=None) -> LstmParams:
    """Exact gradients of sum_b w_b * loss_b w.r.t. every parameter."""
    dtype = params.dtype
    probs = cache.probs
    bsz = probs.shape[0]
    t_arr = np.asarray(target, dtype=dtype)
    if t_arr.ndim == 1:
        t_arr = t_arr[None, :]
    if weights is None:
        w = np.ones(bsz, dtype=dtype)
    else:
        w = np.asarray(weights, dtype=dtype)

    # loss-side gradient in float64: the 1e-12 clamp degenerates in float32
    y64 = probs.astype(np.float64)
    t64 = t_arr.astype(np.float64)
    yc = np.clip(y64, LOSS_EPS, 1.0 - LOSS_EPS)
    inside = (y64 > LOSS_EPS) & (y64 < 1.0 - LOSS_EPS)
    dedy = np.where(inside, -t64 / yc + (1.0 - t64) / (1.0 - yc), 0.0)
    dedy *= w.astype(np.float64)[:, None]
    dlogits = (y64 * (dedy - (dedy * y64).sum(axis=1, keepdims=True))).astype(dtype)

    grads = zeros_like_params(params)
    grads.head_w[...] = cache.head_in.T @ dlogits
    grads.head_b[...] = dlogits.sum(axis=0)
    d_head = dlogits @ params.head_w.T

    h_dim = config.hidden_size
    t_steps = cache.xs[0].shape[0]
    d_ext = None  # gradient flowing into this layer's h outputs from above
    for li in range(config.num_layers - 1, -1, -1):
        layer, glayer = params.layers[li], grads.layers[li]
        xs, fs, is_, gs = cache.xs[li], cache.f[li], cache.i[li], cache.g[li]
        os_, cs, tcs = cache.o[li], cache.c[li], cache.tc[li]
        hps, cps = cache.hprev[li], cache.cprev[li]
        dx = np.empty_like(xs)
        dh_next = np.zeros((bsz, h_dim), dtype)
        dc_next = np.zeros((bsz, h_dim), dtype)
        top = li == config.num_layers - 1
        for t in range(t_steps - 1, -1, -1):
            dh = dh_next.copy()
            if d_ext is not None:
                dh += d_ext[t]
            if top and t == t_steps - 1 and config.head_source == "hidden":
                dh += d_head
            dc = dc_next + dh * os_[t] * (1.0 - tcs[t] ** 2)
            if top and t == t_steps - 1 and config.head_source == "cell":
                dc = dc + d_head
            do = dh * tcs[t]
            df = dc * cps[t]
            di = dc * gs[t]
            dg = dc * is_[t]
            dz = np.empty((bsz, 4 * h_dim), dtype)
            dz[:, :h_dim] = df * fs[t] * (1.0 - fs[t])
            dz[:, h_dim:2 * h_dim] = di * is_[t] * (1.0 - is_[t])
            dz[:, 2 * h_dim:3 * h_dim] = dg * (1.0 - gs[t] ** 2)
            dz[:, 3 * h_dim:] = do * os_[t] * (1.0 - os_[t])
            glayer.w_x += xs[t].T @ dz
            glayer.w_h += hps[t].T @ dz
            glayer.b += dz.sum(axis=0)
            dx[t] = dz @ layer.w_x.T
            dh_next = dz @ layer.w_h.T
            dc_next = dc * fs[t]
        if li > 0:
            mask = cache.masks[li - 1]
            d_ext = dx if mask is None else dx * mask
    return grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict

    @classmethod
    def zeros(cls, params: LstmParams) -> "AdamState":
        return cls({n: np.zeros_like(a) for n, a in params.named_tensors()},
                   {n: np.zeros_like(a) for n, a in params.named_tensors()})


def adam_step(params: LstmParams, grads: LstmParams, state: AdamState,
              step_index: int, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """In-place Adam with bias correction; returns (params, state)."""
    gmap = dict(grads.named_tensors())
    bc1 = 1.0 - beta1 ** step_index
    bc2 = 1.0 - beta2 ** step_index
    for name, p in params.named_tensors():
        g = gmap[name]
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# Checkpoints (versioned binary, little-endian f32 tensors)
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: LstmParams, config: NetworkConfig,
                    block_len: int) -> None:
    k = config.output_dim - 1
    header = struct.pack("<8sIIIIII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                         block_len, k, config.num_layers, config.hidden_size,
                         config.input_chunk)
    with open(path, "wb") as fh:
        fh.write(header)
        for _, arr in params.named_tensors():
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, dropout_rate: float = 0.05,
                    head_source: str = "cell", dtype=np.float32):
    """Returns (params, config, block_len)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, version, n, k, layers, hidden, chunk = struct.unpack_from(
        "<8sIIIIII", blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    config = NetworkConfig(layers, hidden, chunk, k + 1,
                           dropout_rate=dropout_rate, head_source=head_source)
    off = struct.calcsize("<8sIIIIII")

    def read_tensor():
        nonlocal off
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        off += 4 * count
        return arr.reshape(shape).astype(dtype)

    layer_params = []
    for _ in range(layers):
        layer_params.append(LayerParams(read_tensor(), read_tensor(),
                                        read_tensor()))
    params = LstmParams(layer_params, read_tensor(), read_tensor())
    return params, config, n


# ---------------------------------------------------------------------------
# Convenience bundle
# ---------------------------------------------------------------------------

class LstmNet:
    """Config + parameters with the forward helpers the decoders need."""

    def __init__(self, config: NetworkConfig, params: LstmParams):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: NetworkConfig, rng, dtype=np.float32) -> "LstmNet":
        return cls(config, init_params(config, rng, dtype))

    def scores_batch(self, features: np.ndarray) -> np.ndarray:
        probs, _ = lstm_forward(self.params, features, self.config,
                                train_mode=False)
        return probs

    def copy(self) -> "LstmNet":
        return LstmNet(self.config, self.params.copy())

    def save(self, path, block_len: int) -> None:
        save_checkpoint(path, self.params, self.config, block_len)

    @classmethod
    def load(cls, path, dropout_rate: float = 0.05, head_source: str = "cell",
             dtype=np.float32) -> tuple["LstmNet", int]:
        params, config, n = load_checkpoint(path, dropout_rate, head_source,
                                            dtype)
        return cls(config, params), n
