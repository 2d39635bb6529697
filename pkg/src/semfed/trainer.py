"""Local adapter training: hardest-negative triplet loss plus SKB alignment pull."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adapter import AdapterOutput, AdapterParams, FeatureSlice, Topology, adapter_backward, adapter_forward
from .dataio import ClientShard
from .labeling import (
    LabelLedger,
    ProvisionalLabel,
    anchor_gap_confidence,
    batch_confidence,
    label_statistics,
    mask_low_confidence,
    pair_labels,
)
from .mathops import AdamState, adam_step
from .skb import Skb


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.2
    reg_weight: float = 1.0
    lr: float = 1e-4
    batch_size: int = 128
    local_epochs: int = 1
    attn_scale: float = 1.5
    q: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.margin < 0 or not self.lr > 0 or self.batch_size < 1 or self.local_epochs < 0:
            raise ValueError("invalid TrainConfig")
        if not 0.0 <= self.q < 1.0:
            raise ValueError("q must be in [0, 1)")


@dataclass(frozen=True)
class LossBreakdown:
    triplet: float
    regularizer: float
    total: float
    retained_count: int


@dataclass(frozen=True)
class PairBatch:
    """Row r of every slice belongs to pair ``pair_ids[r]``."""

    slices: tuple[FeatureSlice, ...]
    pair_ids: np.ndarray

    def __post_init__(self):
        if not self.slices or len(self.slices) > 2:
            raise ValueError("a pair batch holds one or two modality slices")
        if any(len(s.sample_ids) != len(self.pair_ids) for s in self.slices):
            raise ValueError("slices must have one row per pair")

    def __len__(self) -> int:
        return len(self.pair_ids)

    def subset(self, keep) -> "PairBatch":
        keep = np.asarray(keep)
        return PairBatch(
            tuple(FeatureSlice(s.signature, s.sample_ids[keep], s.features[keep]) for s in self.slices),
            self.pair_ids[keep],
        )


def shard_batch(shard: ClientShard, rows) -> PairBatch:
    rows = np.asarray(rows, dtype=int)
    img, txt = shard.data.slices(shard.image_ids[rows], shard.text_ids[rows])
    return PairBatch((img, txt), shard.image_ids[rows])


# ---------------------------------------------------------------------------
# loss terms


def _unit_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    return x / norms[:, None], norms


def _normalize_backward(xn, norms, dxn):
    return (dxn - xn * np.einsum("ij,ij->i", xn, dxn)[:, None]) / norms[:, None]


def _triplet(tokens_a, tokens_b, pairing, margin, mask, want_grad):
    a = np.atleast_2d(np.asarray(tokens_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(tokens_b, dtype=np.float64))
    n = a.shape[0]
    p = np.arange(n) if pairing is None else np.asarray(pairing, dtype=int)
    keep = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    per = np.zeros((n, 2))
    ret = np.flatnonzero(keep)
    n_ret = ret.size
    if n_ret == 0:
        return 0.0, per, (np.zeros_like(a), np.zeros_like(b))
    an, a_norm = _unit_rows(a)
    bn, b_norm = _unit_rows(b)
    sim = an @ bn.T
    d_sim = np.zeros_like(sim)
    if n_ret >= 2:
        cols = p[ret]
        sub = sim[np.ix_(ret, cols)]  # retained images x their partner texts
        pos = np.diag(sub).copy()
        k = np.arange(n_ret)
        neg = sub.copy()
        neg[k, k] = -np.inf
        j_i2t = np.argmax(neg, axis=1)
        j_t2i = np.argmax(neg, axis=0)
        h_i2t = np.maximum(0.0, margin - pos + neg[k, j_i2t])
        h_t2i = np.maximum(0.0, margin - pos + neg[j_t2i, k])
        per[ret, 0] = h_i2t
        per[ret, 1] = h_t2i
        loss = float(h_i2t.sum() + h_t2i.sum()) / n_ret
        if want_grad:
            w = 1.0 / n_ret
            act1 = h_i2t > 0
            act2 = h_t2i > 0
            r, c = ret, cols
            np.add.at(d_sim, (r[act1], c[act1]), -w)
            np.add.at(d_sim, (r[act1], c[j_i2t[act1]]), w)
            np.add.at(d_sim, (r[act2], c[act2]), -w)
            np.add.at(d_sim, (r[j_t2i[act2]], c[act2]), w)
    else:
        loss = 0.0
    if not want_grad:
        return loss, per, None
    d_an = d_sim @ bn
    d_bn = d_sim.T @ an
    return loss, per, (_normalize_backward(an, a_norm, d_an), _normalize_backward(bn, b_norm, d_bn))


def triplet_loss(tokens_a, tokens_b, pairing=None, margin: float = 0.2, mask=None) -> tuple[float, np.ndarray]:
    """Bidirectional hinge on cosine similarity against the hardest retained negative.

    Each retained pair contributes the sum of its two directional hinges;
    the loss is the mean of that sum over retained pairs. Also returns the
    (n, 2) per-sample hinges [a->b, b->a] (zero for masked samples).
    """
    loss, per, _ = _triplet(tokens_a, tokens_b, pairing, margin, mask, want_grad=False)
    return loss, per


def alignment_regularizer(tokens, labels, skb: Skb, mask=None) -> float:
    t = np.atleast_2d(np.asarray(tokens, dtype=np.float64))
    keep = np.ones(len(t), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not np.any(keep):
        return 0.0
    anchors = np.stack([skb.anchor(int(l)) for l, k in zip(labels, keep) if k])
    diff = t[keep] - anchors
    return float(np.einsum("ij,ij->", diff, diff)) / diff.shape[0]


# ---------------------------------------------------------------------------
# total loss and gradient


def _loss_from_output(out: AdapterOutput, batch: PairBatch, labels, skb: Skb, config: TrainConfig, want_grad: bool):
    tokens = out.tokens
    n = len(batch)
    blocks = [tokens[sl] for sl in out.slices]
    d_tokens = np.zeros_like(tokens) if want_grad else None
    if len(blocks) == 2:
        trip, _, g = _triplet(blocks[0], blocks[1], None, config.margin, None, want_grad)
        if want_grad:
            d_tokens[out.slices[0]] += g[0]
            d_tokens[out.slices[1]] += g[1]
    else:
        trip = 0.0
    anchors = np.stack([skb.anchor(int(l)) for l in labels])
    target = np.vstack([anchors] * len(blocks))
    diff = tokens - target
    reg = float(np.einsum("ij,ij->", diff, diff)) / tokens.shape[0]
    if want_grad:
        d_tokens += config.reg_weight * 2.0 * diff / tokens.shape[0]
    total = trip + config.reg_weight * reg
    return LossBreakdown(trip, reg, total, n), d_tokens


def _retained(batch: PairBatch, labels, mask):
    keep = np.ones(len(batch), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return batch.subset(keep), np.asarray(labels)[keep], keep


def total_loss(
    batch: PairBatch,
    params: AdapterParams,
    skb: Skb,
    labels,
    mask,
    config: TrainConfig,
    topology: Topology | None = None,
) -> LossBreakdown:
    """Loss over retained pairs only; masked pairs never enter the graph."""
    sub, lab, keep = _retained(batch, labels, mask)
    if len(sub) == 0:
        return LossBreakdown(0.0, 0.0, 0.0, 0)
    out = adapter_forward(sub.slices, params, topology)
    loss, _ = _loss_from_output(out, sub, lab, skb, config, want_grad=False)
    return loss


def backward(
    batch: PairBatch,
    params: AdapterParams,
    skb: Skb,
    labels,
    mask,
    config: TrainConfig,
    topology: Topology | None = None,
) -> tuple[dict[str, np.ndarray], LossBreakdown, Topology | None]:
    """Analytic gradients of ``total_loss`` for every trainable block."""
    sub, lab, keep = _retained(batch, labels, mask)
    if len(sub) == 0:
        return {k: np.zeros_like(v) for k, v in params.arrays.items()}, LossBreakdown(0.0, 0.0, 0.0, 0), None
    out = adapter_forward(sub.slices, params, topology)
    loss, d_tokens = _loss_from_output(out, sub, lab, skb, config, want_grad=True)
    return adapter_backward(out, params, d_tokens), loss, out.topology


# ---------------------------------------------------------------------------
# labeling pass and local update


@dataclass
class BatchAssessment:
    labels: np.ndarray
    anchor_sims: np.ndarray
    confidence: np.ndarray
    mask: np.ndarray


def assess_batch(batch: PairBatch, params: AdapterParams, skb: Skb, q: float) -> BatchAssessment:
    """Provisional labels, confidences and the retain mask for one batch."""
    out = adapter_forward(batch.slices, params)
    blocks = [out.tokens[sl] for sl in out.slices]
    labels, sims = pair_labels(blocks, skb)
    if len(blocks) == 2:
        conf = batch_confidence(blocks[0], blocks[1])
    else:
        conf = anchor_gap_confidence(blocks[0], skb)
    return BatchAssessment(labels, sims, conf, mask_low_confidence(conf, q))


def touched_blocks(params: AdapterParams, shard: ClientShard) -> list[str]:
    names = ["cross:W"]
    for sig in shard.signatures:
        names += [f"in:{sig.key}:W", f"in:{sig.key}:b"]
    for head in sorted({params.head(s.modality) for s in shard.signatures}):
        names += [f"mp:{head}:W", f"out:{head}:W"]
    return sorted(names)


@dataclass
class LocalStats:
    mean_loss: float
    retained_fraction: float
    retained_samples: int
    steps: int
    labels: list[ProvisionalLabel] = field(default_factory=list)
    mask: list[bool] = field(default_factory=list)

    @property
    def label_stats(self):
        return label_statistics(self.labels)


def shuffle_rng(seed: int, client_id: int, round_index: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, client_id, round_index, epoch])


def apply_adam(
    params: AdapterParams,
    grads: dict[str, np.ndarray],
    adam: dict[str, AdamState],
    names: Sequence[str],
    config: TrainConfig,
) -> tuple[AdapterParams, dict[str, AdamState]]:
    arrays = dict(params.arrays)
    adam = dict(adam)
    for name in names:
        state = adam.get(name) or AdamState.zeros_like(arrays[name])
        arrays[name], adam[name] = adam_step(
            arrays[name], grads[name], state, config.lr, config.beta1, config.beta2, config.adam_eps
        )
    return params.with_arrays(arrays), adam


def local_update(
    params: AdapterParams,
    shard: ClientShard,
    ledger: LabelLedger,
    skb: Skb,
    config: TrainConfig,
    adam: dict[str, AdamState] | None = None,
    round_index: int = 0,
) -> tuple[AdapterParams, dict[str, AdamState], LocalStats]:
    """``local_epochs`` seeded passes of label -> mask -> backward -> Adam.

    Pruned samples are skipped. Labels, confidences and flags reported in the
    stats come from the last epoch, the most recent view of each sample.
    """
    if len(shard) == 0:
        raise ValueError(f"client {shard.client_id} has an empty shard")
    pruned = ledger.pruned()
    active = np.array([k for k, s in enumerate(shard.image_ids) if int(s) not in pruned], dtype=int)
    adam = dict(adam or {})
    names = touched_blocks(params, shard)
    losses, kept, seen, steps = [], 0, 0, 0
    last: dict[int, tuple[int, float, float, bool]] = {}
    for epoch in range(config.local_epochs):
        if active.size == 0:
            break
        order = active[shuffle_rng(config.seed, shard.stream, round_index, epoch).permutation(active.size)]
        for start in range(0, order.size, config.batch_size):
            batch = shard_batch(shard, order[start:start + config.batch_size])
            a = assess_batch(batch, params, skb, config.q)
            grads, loss, _ = backward(batch, params, skb, a.labels, a.mask, config)
            params, adam = apply_adam(params, grads, adam, names, config)
            losses.append(loss.total)
            kept += int(a.mask.sum())
            seen += len(batch)
            steps += 1
            if epoch == config.local_epochs - 1:
                for sid, lab, sim, conf, m in zip(batch.pair_ids, a.labels, a.anchor_sims, a.confidence, a.mask):
                    last[int(sid)] = (int(lab), float(sim), float(conf), bool(m))
    labels, mask = [], []
    for sid in sorted(last):
        lab, sim, conf, m = last[sid]
        labels.append(ProvisionalLabel(sid, "pair", lab, sim, conf))
        mask.append(m)
    stats = LocalStats(
        mean_loss=float(np.mean(losses)) if losses else 0.0,
        retained_fraction=kept / seen if seen else 0.0,
        retained_samples=int(sum(mask)),
        steps=steps,
        labels=labels,
        mask=mask,
    )
    return params, adam, stats
