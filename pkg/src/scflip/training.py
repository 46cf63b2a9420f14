"""Dataset generation and the two-stage training procedure.

Stage 1 learns to point at the first error of a failed SC pass from |alpha|.
Stage 2 regenerates data on-policy with the flip controller in the loop and
adds undo labels for states reached through a wrong flip.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .channel import RngStream, snr_to_sigma, transmit
from .lstm import (LstmNet, AdamState, adam_step, backward, cross_entropy_loss,
                   lstm_forward)
from .polar import CodeConfig, assemble_u, crc_attach, crc_check, polar_encode
from .sc import first_error_slots, sc_decode_batch

FEATURE_CLAMP = 25.0
DATASET_MAGIC = b"SCFDSET1"
DATASET_VERSION = 1


def feature_encode(trace: np.ndarray, clamp: float = FEATURE_CLAMP,
                   normalize: bool = True) -> np.ndarray:
    """|alpha| clamped at `clamp` and scaled to [0, 1] (raw mode available)."""
    mags = np.minimum(np.abs(np.asarray(trace, dtype=np.float64)), clamp)
    if normalize:
        mags = mags / clamp
    return mags.astype(np.float32)


@dataclass
class TrainingSample:
    features: np.ndarray      # length-N non-negative feature sequence
    label: np.ndarray         # one-hot, length K+1 (slot K = undo)
    trial_id: int = 0


@dataclass
class StageConfig:
    training_size: int
    validation_size: int
    minibatch: int
    epochs: int
    iterations: int = 1
    dropout: float = 0.05
    chunk: int = 4
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_decay_every: int = 10

    def __post_init__(self):
        for name in ("training_size", "validation_size", "minibatch", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


# Tables I / III of the reference setup, and the reduced desk-scale defaults.
PAPER_STAGE1 = StageConfig(1_600_000, 50_000, 1000, 30)
PAPER_STAGE2 = StageConfig(1_600_000, 50_000, 1000, 20, iterations=60)
DESK_STAGE1 = StageConfig(200_000, 20_000, 1000, 12)
DESK_STAGE2 = StageConfig(60_000, 8_000, 1000, 5, iterations=6)


@dataclass
class Dataset:
    block_len: int
    nonfrozen_count: int
    crc_poly_full: int        # generator polynomial including the leading term
    frozen_hash: int
    snr_db: float
    features: np.ndarray      # [M, N] float32
    labels: np.ndarray        # [M] uint16 slot indices (K = undo)
    trial_ids: np.ndarray     # [M] uint32
    tag: str = "training"
    grouped: bool = False

    def __len__(self) -> int:
        return len(self.labels)

    def matches(self, code: CodeConfig) -> bool:
        return (self.block_len == code.block_len
                and self.nonfrozen_count == code.nonfrozen_count
                and self.crc_poly_full == code.full_crc_poly
                and self.frozen_hash == code.frozen_hash())

    def sample(self, i: int) -> TrainingSample:
        onehot = np.zeros(self.nonfrozen_count + 1, dtype=np.float32)
        onehot[self.labels[i]] = 1.0
        return TrainingSample(self.features[i], onehot, int(self.trial_ids[i]))

    def trial_slices(self) -> list[slice]:
        ids = self.trial_ids
        if len(ids) == 0:
            return []
        cuts = np.flatnonzero(np.diff(ids)) + 1
        bounds = np.concatenate([[0], cuts, [len(ids)]])
        return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


_HEADER = "<8sIIIQQdQB"


def save_dataset(ds: Dataset, path) -> None:
    n = ds.block_len
    rec = np.dtype([("trial", "<u4"), ("feat", "<f4", (n,)), ("label", "<u2")])
    body = np.empty(len(ds), dtype=rec)
    body["trial"] = ds.trial_ids
    body["feat"] = ds.features
    body["label"] = ds.labels
    with open(path, "wb") as fh:
        fh.write(struct.pack(_HEADER, DATASET_MAGIC, DATASET_VERSION, n,
                             ds.nonfrozen_count, ds.crc_poly_full,
                             ds.frozen_hash, ds.snr_db, len(ds),
                             1 if ds.grouped else 0))
        fh.write(body.tobytes())


def load_dataset(path, tag: str = "training") -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, version, n, k, poly, fhash, snr, count, grouped = \
        struct.unpack_from(_HEADER, blob, 0)
    if magic != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    rec = np.dtype([("trial", "<u4"), ("feat", "<f4", (n,)), ("label", "<u2")])
    body = np.frombuffer(blob, dtype=rec, count=count,
                         offset=struct.calcsize(_HEADER))
    return Dataset(n, k, poly, fhash, snr, body["feat"].copy(),
                   body["label"].copy(), body["trial"].copy(), tag,
                   bool(grouped))


# ---------------------------------------------------------------------------
# Stage-1 dataset: failed SC passes labeled with their first error
# ---------------------------------------------------------------------------

def gen_stage1_dataset(code: CodeConfig, ebn0_db: float, target_count: int,
                       rng: RngStream, tag: str = "training",
                       chunk_size: int = 8192, return_llrs: bool = False):
    if target_count < 1:
        raise ValueError("target_count must be >= 1")
    sigma = snr_to_sigma(ebn0_db, code.rate)
    feats, labels, llr_keep = [], [], []
    collected, chunk_idx = 0, 0
    while collected < target_count:
        gen = rng.child(chunk_idx).generator()
        chunk_idx += 1
        payload = gen.integers(0, 2, size=(chunk_size, code.payload_len),
                               dtype=np.uint8)
        u = assemble_u(code, crc_attach(payload, code))
        llrs = transmit(polar_encode(u), sigma, gen)
        u_hat, alpha = sc_decode_batch(llrs, code)
        failed = ~crc_check(u_hat[:, code.nonfrozen_positions], code)
        slots = first_error_slots(u_hat[failed], u[failed], code)
        assert (slots >= 0).all()  # CRC failure implies at least one error
        feats.append(feature_encode(alpha[failed]))
        labels.append(slots.astype(np.uint16))
        if return_llrs:
            llr_keep.append(llrs[failed])
        collected += int(failed.sum())
    features = np.concatenate(feats)[:target_count]
    labels = np.concatenate(labels)[:target_count]
    ds = Dataset(code.block_len, code.nonfrozen_count, code.full_crc_poly,
                 code.frozen_hash(), ebn0_db, features, labels,
                 np.arange(target_count, dtype=np.uint32), tag, grouped=False)
    if return_llrs:
        return ds, np.concatenate(llr_keep)[:target_count]
    return ds


# ---------------------------------------------------------------------------
# Supervised training
# ---------------------------------------------------------------------------

def _one_hot(labels: np.ndarray, dim: int) -> np.ndarray:
    out = np.zeros((len(labels), dim), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def dataset_loss(net: LstmNet, ds: Dataset, batch: int = 4096) -> float:
    """Mean per-sample loss in eval mode."""
    total = 0.0
    dim = net.config.output_dim
    for a in range(0, len(ds), batch):
        feats = ds.features[a:a + batch]
        probs, _ = lstm_forward(net.params, feats, net.config, train_mode=False)
        total += cross_entropy_loss(_one_hot(ds.labels[a:a + batch], dim),
                                    probs).sum()
    return total / max(len(ds), 1)


def undo_accuracy(net: LstmNet, ds: Dataset, batch: int = 4096):
    """(accuracy on undo-labeled samples, count of undo-labeled samples)."""
    undo_slot = net.config.output_dim - 1
    idx = np.flatnonzero(ds.labels == undo_slot)
    if len(idx) == 0:
        return 0.0, 0
    correct = 0
    for a in range(0, len(idx), batch):
        probs, _ = lstm_forward(net.params, ds.features[idx[a:a + batch]],
                                net.config, train_mode=False)
        correct += int((probs.argmax(axis=1) == undo_slot).sum())
    return correct / len(idx), len(idx)


def train_supervised(net: LstmNet, train_ds: Dataset, val_ds: Dataset,
                     cfg: StageConfig, rng: RngStream,
                     verbose: bool = False):
    """Mini-batch Adam on the stage-1 database; keeps the minimum-validation
    checkpoint. Returns (best net, history)."""
    if len(train_ds) == 0:
        raise ValueError("empty training dataset")
    if train_ds.nonfrozen_count + 1 != net.config.output_dim:
        raise ValueError("dataset K does not match network output_dim")
    params = net.params.copy()
    state = AdamState.zeros(params)
    dim = net.config.output_dim
    history = {"train_loss": [], "val_loss": [], "lr": []}
    best_val, best_params = np.inf, params.copy()
    step = 0
    for epoch in range(cfg.epochs):
        gen = rng.child(epoch).generator()
        lr = cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_decay_every)
        perm = gen.permutation(len(train_ds))
        running, nb = 0.0, 0
        for a in range(0, len(perm), cfg.minibatch):
            sel = perm[a:a + cfg.minibatch]
            feats = train_ds.features[sel]
            targets = _one_hot(train_ds.labels[sel], dim)
            probs, cache = lstm_forward(params, feats, net.config,
                                        train_mode=True, rng=gen)
            running += float(cross_entropy_loss(targets, probs).mean())
            nb += 1
            grads = backward(params, cache, targets, net.config,
                             weights=np.full(len(sel), 1.0 / len(sel)))
            step += 1
            adam_step(params, grads, state, step, lr)
        cand = LstmNet(net.config, params)
        val = dataset_loss(cand, val_ds)
        history["train_loss"].append(running / nb)
        history["val_loss"].append(val)
        history["lr"].append(lr)
        if val < best_val:
            best_val = val
            best_params = params.copy()
        if verbose:
            print(f"epoch {epoch + 1}/{cfg.epochs}: "
                  f"train {running / nb:.4f} val {val:.4f} lr {lr:g}")
    return LstmNet(net.config, best_params), history


# ---------------------------------------------------------------------------
# Stage 2: on-policy regeneration with undo labels
# ---------------------------------------------------------------------------

def gen_stage2_dataset(net: LstmNet, code: CodeConfig, ebn0_db: float,
                       target_count: int, rng: RngStream, budget: int = 5,
                       tag: str = "training", chunk_size: int = 2048,
                       return_audit: bool = False):
    """Run the flip controller on fresh noise; every scored state becomes a
    sample. Wrong flips (not the parent state's true first error) yield undo
    labels; other states are labeled with their own first error."""
    from .decoder import run_dl_sessions_batch

    if target_count < 1:
        raise ValueError("target_count must be >= 1")
    sigma = snr_to_sigma(ebn0_db, code.rate)
    undo_slot = code.nonfrozen_count
    feats, labels, trials, audit = [], [], [], []
    collected, chunk_idx, trial_id = 0, 0, 0
    while collected < target_count:
        gen = rng.child(chunk_idx).generator()
        chunk_idx += 1
        payload = gen.integers(0, 2, size=(chunk_size, code.payload_len),
                               dtype=np.uint8)
        u = assemble_u(code, crc_attach(payload, code))
        llrs = transmit(polar_encode(u), sigma, gen)
        out = run_dl_sessions_batch(llrs, code, net, budget, u_true=u,
                                    collect_states=True)
        for sess_idx, states in out.states.items():
            if not states:
                continue
            for st in states:
                feats.append(feature_encode(st.trace))
                labels.append(undo_slot if st.sick else st.first_error_slot)
                trials.append(trial_id)
                if return_audit:
                    audit.append((llrs[sess_idx], st.flipped_slot,
                                  st.parent_error_slot, st.sick))
            collected += len(states)
            trial_id += 1
    features = np.stack(feats)[:target_count]
    labels = np.asarray(labels, dtype=np.uint16)[:target_count]
    trial_ids = np.asarray(trials, dtype=np.uint32)[:target_count]
    ds = Dataset(code.block_len, code.nonfrozen_count, code.full_crc_poly,
                 code.frozen_hash(), ebn0_db, features, labels, trial_ids,
                 tag, grouped=True)
    return (ds, audit[:target_count]) if return_audit else ds


def train_sequence_epochs(net: LstmNet, train_ds: Dataset, cfg: StageConfig,
                          rng: RngStream, epochs: int) -> LstmNet:
    """Adam over the per-sequence sum loss (mean across sequences in a batch).

    Samples of one trial stay together, so a trial's summed loss acts as the
    long-term objective of its action sequence.
    """
    params = net.params.copy()
    state = AdamState.zeros(params)
    dim = net.config.output_dim
    groups = train_ds.trial_slices()
    step = 0
    for epoch in range(epochs):
        gen = rng.child(epoch).generator()
        lr = cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_decay_every)
        order = gen.permutation(len(groups))
        pos = 0
        while pos < len(order):
            batch_groups = []
            total = 0
            while pos < len(order) and total < cfg.minibatch:
                sl = groups[order[pos]]
                batch_groups.append(sl)
                total += sl.stop - sl.start
                pos += 1
            sel = np.concatenate([np.arange(sl.start, sl.stop)
                                  for sl in batch_groups])
            feats = train_ds.features[sel]
            targets = _one_hot(train_ds.labels[sel], dim)
            probs, cache = lstm_forward(params, feats, net.config,
                                        train_mode=True, rng=gen)
            grads = backward(params, cache, targets, net.config,
                             weights=np.full(len(sel), 1.0 / len(batch_groups)))
            step += 1
            adam_step(params, grads, state, step, lr)
    return LstmNet(net.config, params)


def train_stage2(net: LstmNet, code: CodeConfig, ebn0_db: float,
                 cfg: StageConfig, rng: RngStream, budget: int = 5,
                 verbose: bool = False):
    """Iterative on-policy retraining; returns (final net, per-iteration
    validation metrics)."""
    current = net.copy()
    metrics = []
    for it in range(cfg.iterations):
        it_rng = rng.child(it)
        train_ds = gen_stage2_dataset(current, code, ebn0_db,
                                      cfg.training_size, it_rng.child(0),
                                      budget=budget)
        val_ds = gen_stage2_dataset(current, code, ebn0_db,
                                    cfg.validation_size, it_rng.child(1),
                                    budget=budget, tag="validation")
        if not train_ds.matches(code):
            raise RuntimeError("stage-2 dataset fingerprint mismatch")
        current = train_sequence_epochs(current, train_ds, cfg,
                                        it_rng.child(2), cfg.epochs)
        acc, n_undo = undo_accuracy(current, val_ds)
        entry = {"iteration": it + 1,
                 "val_loss": dataset_loss(current, val_ds),
                 "undo_accuracy": acc,
                 "undo_states": n_undo,
                 "train_samples": len(train_ds)}
        metrics.append(entry)
        if verbose:
            print(f"stage2 iter {it + 1}/{cfg.iterations}: "
                  f"val {entry['val_loss']:.4f} undo_acc {acc:.3f} "
                  f"({n_undo} undo states)")
    return current, metrics
