"""Bidirectional Recall@K and RSUM for image-text retrieval."""
from __future__ import annotations

from typing import Sequence

import numpy as np

RECALL_KS = (1, 5, 10)
METRIC_KEYS = tuple(f"r{k}_{d}" for d in ("i2t", "t2i") for k in RECALL_KS)


def _as_targets(ground_truth, n_rows: int) -> list[np.ndarray]:
    if isinstance(ground_truth, np.ndarray) and ground_truth.ndim == 1:
        return [np.array([int(g)]) for g in ground_truth]
    out = []
    for g in ground_truth:
        arr = np.atleast_1d(np.asarray(g, dtype=int))
        out.append(arr)
    if len(out) != n_rows:
        raise ValueError(f"{len(out)} ground-truth entries for {n_rows} queries")
    return out


def best_ranks(sim: np.ndarray, ground_truth) -> np.ndarray:
    """1-based rank of the best-placed correct column in each row.

    Columns are ordered by descending similarity, ties by lower column index.
    """
    sim = np.asarray(sim, dtype=np.float64)
    n, m = sim.shape
    targets = _as_targets(ground_truth, n)
    cols = np.arange(m)
    ranks = np.empty(n, dtype=int)
    for r, tgt in enumerate(targets):
        if tgt.size == 0:
            raise ValueError(f"query {r} has no ground-truth target")
        row = sim[r]
        s = row[tgt][:, None]
        ahead = (row[None, :] > s) | ((row[None, :] == s) & (cols[None, :] < tgt[:, None]))
        ranks[r] = int(ahead.sum(axis=1).min()) + 1
    return ranks


def recall_at_k(sim, ground_truth, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    ranks = best_ranks(sim, ground_truth)
    return 100.0 * float(np.mean(ranks <= k))


def _pair_targets(pairing, n_img: int, n_txt: int):
    if isinstance(pairing, np.ndarray) and pairing.ndim == 1 or (
        isinstance(pairing, Sequence) and pairing and np.ndim(pairing[0]) == 0
    ):
        pairs = [(i, int(t)) for i, t in enumerate(pairing)]
    else:
        pairs = [(int(i), int(t)) for i, t in pairing]
    i2t: list[list[int]] = [[] for _ in range(n_img)]
    t2i: list[list[int]] = [[] for _ in range(n_txt)]
    for i, t in pairs:
        i2t[i].append(t)
        t2i[t].append(i)
    return i2t, t2i


def rsum(tokens_img, tokens_txt, pairing=None) -> tuple[float, dict[str, float]]:
    """Sum of Recall@{1,5,10} over image->text and text->image (max 600).

    ``pairing`` is either an array mapping image row -> text row or an
    iterable of (image_row, text_row) pairs for one-to-many ground truth.
    Defaults to the identity.
    """
    a = np.atleast_2d(np.asarray(tokens_img, dtype=np.float64))
    b = np.atleast_2d(np.asarray(tokens_txt, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("empty evaluation set")
    if pairing is None:
        pairing = np.arange(a.shape[0])
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    sim = a @ b.T
    i2t, t2i = _pair_targets(pairing, a.shape[0], b.shape[0])
    r_i2t = best_ranks(sim, i2t)
    r_t2i = best_ranks(sim.T, t2i)
    out = {}
    for k in RECALL_KS:
        out[f"r{k}_i2t"] = 100.0 * float(np.mean(r_i2t <= k))
    for k in RECALL_KS:
        out[f"r{k}_t2i"] = 100.0 * float(np.mean(r_t2i <= k))
    return float(sum(out[key] for key in METRIC_KEYS)), out
