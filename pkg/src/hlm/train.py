"""Adapter training against a frozen backbone.

Two losses: velocity MSE on styled denoising, and a supervised contrastive
pull between reference embeddings of the same style. References are paired
content-misaligned (same style, different content) so the encoder cannot
lean on content cues.
"""

import json
import os
import time
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .adapter import StyleAdapter
from .backbone import TrainingDiverged
from .formats import read_checkpoint_bytes, write_checkpoint_bytes
from .layers import Adam
from .schedule import forward_diffuse, target_velocity
from .seeding import derive_rng
from .tensor import Tensor


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-4
    tau: float = 0.07
    lambda_supcon: float = 1.0
    seed: int = 0
    min_positives: int = 2

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.min_positives < 2:
            raise ValueError("each included style needs at least 2 samples per batch")
        if self.batch_size < self.min_positives:
            raise ValueError(f"batch size {self.batch_size} cannot hold "
                             f"{self.min_positives} samples of any style")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def velocity_loss(v_hat, v_target):
    """Mean squared error between predicted and true velocities."""
    return T.mse(v_hat, v_target if isinstance(v_target, Tensor) else Tensor(v_target))


def supcon_loss(embeddings, style_labels, tau):
    """Supervised contrastive loss over one batch of style embeddings.

    For each anchor i with positives P(i) (same label, not itself) and
    candidates A(i) (everyone but itself):

        sum_i (-1/|P(i)|) sum_{p in P(i)}
            log[ exp(cos(s_i, s_p)/tau) / sum_{a in A(i)} exp(cos(s_i, s_a)/tau) ]

    Anchors with empty P(i) are skipped. The ratio is formed before the log,
    so a two-sample same-style batch gives exactly 0.0: the single positive
    term is the whole denominator.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    emb = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise ValueError(f"need a (N >= 2, D) embedding batch, got {emb.shape}")
    labels = np.asarray(style_labels)
    if labels.shape != (emb.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match batch {emb.shape[0]}")
    if np.any(np.linalg.norm(emb.data, axis=1) == 0.0):
        raise ValueError("zero-norm embedding: cosine similarity undefined")
    n = emb.shape[0]

    same = labels[:, None] == labels[None, :]
    not_self = ~np.eye(n, dtype=bool)
    pos_mask = (same & not_self).astype(np.float64)
    cand_mask = not_self.astype(np.float64)
    pos_counts = pos_mask.sum(axis=1)
    # -1/|P(i)| per anchor; anchors without positives contribute nothing
    weights = np.divide(pos_mask, pos_counts[:, None],
                        out=np.zeros_like(pos_mask), where=pos_counts[:, None] > 0)
    if not weights.any():
        return Tensor(np.float64(0.0), requires_grad=emb.requires_grad)

    normed = T.l2_normalize(emb)
    sims = T.scale(T.matmul(normed, T.transpose(normed, (1, 0))), 1.0 / tau)
    # constant per-row shift for stability; the loss value is shift-invariant
    with T.no_grad():
        shift = np.max(np.where(not_self, sims.data, -np.inf), axis=1, keepdims=True)
    exp_terms = T.exp(T.sub(sims, Tensor(np.broadcast_to(shift, (n, n)).copy())))
    denom = T.sum_reduce(T.mul(exp_terms, Tensor(cand_mask)), axes=(-1,), keepdims=True)
    ratios = T.div(exp_terms, T.broadcast_axis(denom, 1, n))
    # off-P entries are replaced by 1 so the log is defined; their weight is 0
    keep = Tensor(pos_mask)
    safe = T.add(T.mul(ratios, keep), Tensor(1.0 - pos_mask))
    return T.scale(T.sum_reduce(T.mul(T.log(safe), Tensor(weights))), -1.0)


# -- batch assembly ---------------------------------------------------

def _style_pools(sequences):
    pools = {}
    for i, seq in enumerate(sequences):
        pools.setdefault(seq.style_id, []).append(i)
    return pools


def _assemble_batch(sequences, pools, length, cfg, rng):
    """Pick styles, then items of the given length, at least min_positives
    per included style."""
    styles = [s for s, idxs in pools.items()
              if sum(sequences[i].num_frames == length for i in idxs) >= cfg.min_positives]
    if not styles:
        return []
    n_groups = max(1, min(len(styles), cfg.batch_size // cfg.min_positives))
    chosen = list(rng.choice(styles, size=n_groups, replace=False))
    counts = np.full(n_groups, cfg.batch_size // n_groups)
    counts[: cfg.batch_size % n_groups] += 1
    batch = []
    for style, count in zip(chosen, counts):
        candidates = [i for i in pools[style] if sequences[i].num_frames == length]
        take = rng.choice(candidates, size=count, replace=len(candidates) < count)
        batch.extend(int(i) for i in take)
    return batch


def _reference_for(sequences, pools, item, rng, warned):
    """Same style, different content; fall back with a warning when the
    style only covers one content."""
    seq = sequences[item]
    candidates = [i for i in pools[seq.style_id]
                  if sequences[i].content_id != seq.content_id]
    if not candidates:
        if seq.style_id not in warned:
            warned.add(seq.style_id)
            warnings.warn(f"style {seq.style_id!r} has a single content; "
                          f"references cannot be content-misaligned")
        candidates = [i for i in pools[seq.style_id] if i != item] or [item]
    return int(rng.choice(candidates))


def _encode_refs_grouped(backbone, adapter, sequences, ref_indices):
    """Encode references batched per length, scattered back into order."""
    by_len = {}
    for slot, idx in enumerate(ref_indices):
        by_len.setdefault(sequences[idx].num_frames, []).append(slot)
    parts = [None] * len(ref_indices)
    for slots in by_len.values():
        frames = np.stack([sequences[ref_indices[s]].frames for s in slots])
        _, _, z0 = backbone.vae_encode(frames)
        emb = adapter.encode_style(Tensor(z0))
        for row, s in enumerate(slots):
            parts[s] = T.narrow(emb, 0, row, 1)
    return T.concat(parts, axis=0)


# -- training loop ----------------------------------------------------

def train_style_adapter(backbone, dataset, sched, cfg=None, adapter=None,
                        log_path=None):
    """Train the style encoder and hypernetwork; the backbone is frozen.

    Returns (adapter, history). History rows mirror the JSON-lines log:
    step, epoch, l_vel, l_supcon, l_total, wall_time.
    """
    cfg = cfg or TrainConfig()
    train = dataset.split("train")
    if not train:
        raise ValueError("dataset has no training split")
    pools = _style_pools(train)
    adapter = adapter or StyleAdapter(backbone, seed=cfg.seed)
    opt = Adam(adapter.params(), lr=cfg.lr)
    backbone_consts = [p for _, p in backbone.named_params()]
    rng = derive_rng(cfg.seed, "adapter-train")
    lengths = sorted({s.num_frames for s in train})
    steps_per_epoch = max(1, len(train) // cfg.batch_size)
    history = []
    warned = set()
    t0 = time.monotonic()
    log_file = open(log_path, "w") if log_path else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            for _ in range(steps_per_epoch):
                length = lengths[step % len(lengths)]
                batch = _assemble_batch(train, pools, length, cfg, rng)
                if not batch:
                    step += 1
                    continue
                refs = [_reference_for(train, pools, i, rng, warned) for i in batch]
                with T.frozen(backbone_consts):
                    emb = _encode_refs_grouped(backbone, adapter, train, refs)
                    lora = adapter.hyper_lora(emb)

                    frames = np.stack([train[i].frames for i in batch])
                    _, _, z0 = backbone.vae_encode(frames)
                    t_draw = rng.integers(1, sched.num_steps + 1, size=len(batch))
                    eps = rng.normal(size=z0.shape)
                    z_t = forward_diffuse(sched, z0, t_draw, eps)
                    v_tgt = target_velocity(sched, z0, t_draw, eps)
                    cond = np.array([backbone.content_index(train[i].content_id)
                                     for i in batch])
                    v_hat = backbone.denoise(z_t, t_draw, cond=cond, lora=lora)
                l_vel = velocity_loss(v_hat, v_tgt)

                labels = np.array([train[i].style_id for i in batch])
                if cfg.lambda_supcon != 0.0:
                    l_sup = supcon_loss(emb, labels, cfg.tau)
                    l_total = T.add(l_vel, T.scale(l_sup, cfg.lambda_supcon))
                    sup_val = l_sup.item()
                else:
                    with T.no_grad():
                        sup_val = supcon_loss(emb.detach(), labels, cfg.tau).item()
                    l_total = l_vel
                total_val = l_total.item()
                if not np.isfinite(total_val):
                    raise TrainingDiverged("adapter", epoch, step, total_val)

                opt.zero_grad()
                T.backward(l_total)
                opt.step()

                row = {"step": step, "epoch": epoch, "l_vel": float(l_vel.item()),
                       "l_supcon": float(sup_val), "l_total": float(total_val),
                       "wall_time": time.monotonic() - t0}
                history.append(row)
                if log_file:
                    log_file.write(json.dumps(row) + "\n")
                step += 1
    finally:
        if log_file:
            log_file.close()
    return adapter, history


# -- checkpoints ------------------------------------------------------

CHECKPOINT_META_KEY = "__checkpoint_meta__"


@dataclass
class Checkpoint:
    params: dict
    meta: dict = field(default_factory=dict)
    log_digest: str = ""
    version: int = 1


def history_digest(history):
    """CRC over the deterministic log fields; wall time is excluded so a
    reseeded rerun reproduces the digest."""
    acc = 0
    for row in history:
        stable = (row["step"], row["l_vel"], row["l_supcon"], row["l_total"])
        acc = zlib.crc32(repr(stable).encode("utf-8"), acc)
    return f"{acc & 0xFFFFFFFF:08x}"


def checkpoint_bytes(ckpt):
    if CHECKPOINT_META_KEY in ckpt.params:
        raise ValueError(f"parameter name {CHECKPOINT_META_KEY!r} is reserved")
    entries = dict(ckpt.params)
    meta = json.dumps({"meta": ckpt.meta, "log_digest": ckpt.log_digest},
                      sort_keys=True)
    entries[CHECKPOINT_META_KEY] = np.frombuffer(
        meta.encode("utf-8"), dtype=np.uint8).astype(np.float64)
    return write_checkpoint_bytes(entries)


def save_checkpoint(path, ckpt):
    """Atomic write: temp file in the target directory, then rename."""
    blob = checkpoint_bytes(ckpt)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        entries = read_checkpoint_bytes(fh.read(), name=str(path))
    raw = entries.pop(CHECKPOINT_META_KEY, None)
    meta, digest = {}, ""
    if raw is not None:
        decoded = json.loads(np.asarray(raw).astype(np.uint8).tobytes().decode("utf-8"))
        meta, digest = decoded.get("meta", {}), decoded.get("log_digest", "")
    return Checkpoint(params=entries, meta=meta, log_digest=digest)
