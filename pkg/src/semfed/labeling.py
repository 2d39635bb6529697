"""Error-aware provisional labeling.

Each client labels its own tokens with the nearest SKB anchor, scores every
label by how clearly the true pair stands out in the batch similarity
matrix, masks the weakest fraction from the gradient step, and tracks
repeat offenders in a ledger. A sample is pruned only once it has been
flagged for several consecutive rounds *and* the federation-wide confidence
of its anchor is low.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .skb import Skb, anchor_similarities

ACTIVE, TRACKED, PRUNED = "active", "tracked", "pruned"


@dataclass(frozen=True)
class ProvisionalLabel:
    sample_id: int
    modality: str
    anchor_id: int
    anchor_similarity: float
    confidence: float | None = None


@dataclass(frozen=True)
class AnchorStat:
    count: int
    mean_confidence: float


LabelStats = dict  # anchor_id -> AnchorStat


def provisional_labels(tokens: Mapping[str, tuple[np.ndarray, np.ndarray]], skb: Skb) -> list[ProvisionalLabel]:
    """Label every token with its best-aligned anchor (modalities in sorted order)."""
    out = []
    for modality in sorted(tokens):
        ids, tok = tokens[modality]
        if len(ids) == 0:
            continue
        sims = anchor_similarities(tok, skb)
        best = np.argmax(sims, axis=1)
        for sid, b, row in zip(ids, best, sims):
            out.append(ProvisionalLabel(int(sid), modality, skb.class_ids[b], float(row[b])))
    return out


def pair_labels(token_blocks: Sequence[np.ndarray], skb: Skb) -> tuple[np.ndarray, np.ndarray]:
    """One anchor per sample from the sum of its modality tokens.

    Both tokens of a pair are pulled toward the same anchor, so the label
    must be a joint one; per-token labels could pull the pair apart.
    """
    pooled = np.sum(token_blocks, axis=0)
    sims = anchor_similarities(pooled, skb)
    best = np.argmax(sims, axis=1)
    ids = np.asarray(skb.class_ids)[best]
    return ids, sims[np.arange(len(best)), best]


def _margins(sim: np.ndarray, pairing: np.ndarray) -> np.ndarray:
    n = sim.shape[0]
    pos = sim[np.arange(n), pairing]
    neg = sim.copy()
    neg[np.arange(n), pairing] = -np.inf
    return pos - neg.max(axis=1)


def batch_confidence(tokens_img: np.ndarray, tokens_txt: np.ndarray, pairing=None) -> np.ndarray:
    """True-pair margin over the best in-batch distractor, both directions averaged."""
    a = np.atleast_2d(np.asarray(tokens_img, dtype=np.float64))
    b = np.atleast_2d(np.asarray(tokens_txt, dtype=np.float64))
    n = a.shape[0]
    if n == 0:
        return np.zeros(0)
    p = np.arange(n) if pairing is None else np.asarray(pairing, dtype=int)
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    sim = a @ b.T
    if n == 1:
        return np.array([sim[0, p[0]]])
    fwd = _margins(sim, p)
    inv = np.empty(n, dtype=int)
    inv[p] = np.arange(n)
    # text p(i) against all images; its true partner is image i
    bwd_by_text = _margins(sim.T, inv)
    return 0.5 * (fwd + bwd_by_text[p])


def anchor_gap_confidence(tokens: np.ndarray, skb: Skb) -> np.ndarray:
    """Single-modality fallback: top-1 minus top-2 anchor similarity."""
    sims = anchor_similarities(tokens, skb)
    top2 = -np.sort(-sims, axis=1)[:, :2]
    return top2[:, 0] - top2[:, 1]


def mask_low_confidence(confidences, q: float) -> np.ndarray:
    """Retain all but the floor(q*n) least confident samples (True = retained)."""
    if not 0.0 <= q < 1.0:
        raise ValueError(f"q must be in [0, 1), got {q}")
    c = np.asarray(confidences, dtype=np.float64)
    n = c.size
    n_drop = int(np.floor(q * n))
    mask = np.ones(n, dtype=bool)
    if n_drop:
        # stable sort: equal confidences flag the lower index first
        mask[np.argsort(c, kind="stable")[:n_drop]] = False
    return mask


def label_statistics(labels: Iterable[ProvisionalLabel]) -> LabelStats:
    acc: dict[int, list[float]] = {}
    for lab in labels:
        if lab.confidence is None:
            continue
        acc.setdefault(lab.anchor_id, []).append(lab.confidence)
    return {a: AnchorStat(len(v), float(np.mean(v))) for a, v in sorted(acc.items())}


# ---------------------------------------------------------------------------
# ledger


@dataclass(frozen=True)
class LedgerEntry:
    status: str = ACTIVE
    consecutive_low: int = 0
    history: tuple[tuple[int, float, bool], ...] = ()
    last_anchor: int | None = None


@dataclass(frozen=True)
class LabelLedger:
    entries: Mapping[int, LedgerEntry] = field(default_factory=dict)

    @classmethod
    def for_samples(cls, sample_ids: Iterable[int]) -> "LabelLedger":
        return cls({int(s): LedgerEntry() for s in sample_ids})

    def status(self, sample_id: int) -> str:
        return self.entries[sample_id].status

    def pruned(self) -> set[int]:
        return {s for s, e in self.entries.items() if e.status == PRUNED}

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelLedger) and dict(self.entries) == dict(other.entries)


def ledger_update(
    ledger: LabelLedger,
    round_index: int,
    labels: Sequence[ProvisionalLabel],
    mask: Sequence[bool],
) -> LabelLedger:
    if len(labels) != len(mask):
        raise ValueError("labels and mask are not aligned")
    entries = dict(ledger.entries)
    for lab, keep in zip(labels, mask):
        sid = int(lab.sample_id)
        e = entries.get(sid, LedgerEntry())
        if e.status == PRUNED:
            continue
        flagged = not bool(keep)
        conf = float(lab.confidence) if lab.confidence is not None else float("nan")
        entries[sid] = LedgerEntry(
            status=TRACKED if flagged else ACTIVE,
            consecutive_low=e.consecutive_low + 1 if flagged else 0,
            history=e.history + ((round_index, conf, flagged),),
            last_anchor=lab.anchor_id,
        )
    return LabelLedger(entries)


def consensus_threshold(consensus: LabelStats, percentile: float = 25.0) -> float:
    if not consensus:
        return float("-inf")
    return float(np.percentile([s.mean_confidence for s in consensus.values()], percentile))


def ledger_prune(
    ledger: LabelLedger,
    consensus: LabelStats,
    patience: int,
    tau_g: float,
) -> tuple[LabelLedger, list[int]]:
    """Prune tracked samples flagged ``patience`` rounds running whose anchor is weak globally."""
    entries = dict(ledger.entries)
    pruned = []
    for sid in sorted(entries):
        e = entries[sid]
        if e.status != TRACKED or e.consecutive_low < patience:
            continue
        stat = consensus.get(e.last_anchor)
        # an anchor nobody else reports has no evidence of consistency
        if stat is None or stat.mean_confidence < tau_g:
            entries[sid] = replace(e, status=PRUNED)
            pruned.append(sid)
    return LabelLedger(entries), pruned


def replay_ledger(sample_ids: Iterable[int], events) -> LabelLedger:
    """Rebuild a ledger from ``(round, labels, mask)`` events."""
    ledger = LabelLedger.for_samples(sample_ids)
    for round_index, labels, mask in events:
        ledger = ledger_update(ledger, round_index, labels, mask)
    return ledger


def ledger_dumps(ledger: LabelLedger) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "status", "consecutive_low", "last_anchor"])
    for sid in sorted(ledger.entries):
        e = ledger.entries[sid]
        w.writerow([sid, e.status, e.consecutive_low, "" if e.last_anchor is None else e.last_anchor])
    return buf.getvalue()


def ledger_loads(text: str) -> LabelLedger:
    rows = list(csv.DictReader(io.StringIO(text)))
    entries = {}
    for r in rows:
        if r["status"] not in (ACTIVE, TRACKED, PRUNED):
            raise ValueError(f"unknown ledger status {r['status']!r}")
        entries[int(r["sample_id"])] = LedgerEntry(
            status=r["status"],
            consecutive_low=int(r["consecutive_low"]),
            last_anchor=None if r["last_anchor"] == "" else int(r["last_anchor"]),
        )
    return LabelLedger(entries)


def save_ledger(ledger: LabelLedger, path) -> None:
    Path(path).write_text(ledger_dumps(ledger), encoding="utf-8")


def load_ledger(path) -> LabelLedger:
    return ledger_loads(Path(path).read_text(encoding="utf-8"))
