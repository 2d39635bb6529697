"""Synchronous federated rounds over the shared adapter.

Reports are always reduced in ascending client-id order, so results do not
depend on the order clients finish in.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .adapter import AdapterHyper, AdapterParams, EncoderSignature
from .dataio import ClientShard
from .labeling import (
    AnchorStat,
    LabelLedger,
    LabelStats,
    consensus_threshold,
    label_statistics,
    ledger_prune,
    ledger_update,
)
from .mathops import AdamState
from .skb import FormatError, Skb
from .trainer import TrainConfig, local_update, touched_blocks

log = logging.getLogger(__name__)

ERROR_LEVELS = ("none", "mild", "severe")


@dataclass(frozen=True)
class ClientProfile:
    client_id: int
    signatures: tuple[EncoderSignature, ...]
    compute_speed: float = 1.0
    dropout_prob: float = 0.0
    label_error_level: str = "none"

    def __post_init__(self):
        if not self.signatures:
            raise ValueError("a client needs at least one modality")
        if not self.compute_speed > 0:
            raise ValueError("compute_speed must be positive")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError("dropout_prob must be in [0, 1)")
        if self.label_error_level not in ERROR_LEVELS:
            raise ValueError(f"label_error_level must be one of {ERROR_LEVELS}")

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(sorted({s.modality for s in self.signatures}))


@dataclass
class RoundReport:
    client_id: int
    params_after: AdapterParams
    retained_samples: int
    label_stats: LabelStats
    wall_time: float
    touched: tuple[str, ...] = ()
    mean_loss: float = 0.0
    retained_fraction: float = 0.0


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 50
    seed: int = 0
    aggregate: bool = True
    prune: bool = True
    patience: int = 3
    tau_percentile: float = 25.0
    label_stats_every: int = 1


@dataclass
class ClientState:
    profile: ClientProfile
    shard: ClientShard
    ledger: LabelLedger
    adam: dict[str, AdamState] = field(default_factory=dict)
    params: AdapterParams | None = None  # only used without aggregation


@dataclass
class GlobalState:
    round_index: int
    params: AdapterParams
    clients: dict[int, ClientState]
    skb: Skb
    consensus: LabelStats = field(default_factory=dict)
    pruned_log: list[tuple[int, int, int]] = field(default_factory=list)  # (round, client, sample)


@dataclass
class RoundOutcome:
    participants: list[int]
    mean_loss: float
    retained_fraction: float
    pruned_total: int
    sim_duration: float


def select_clients(round_index: int, profiles: Sequence[ClientProfile], seed: int) -> list[int]:
    """Independent Bernoulli(1 - dropout_prob) participation, seeded per round."""
    if not profiles:
        raise ValueError("no client profiles")
    ordered = sorted(profiles, key=lambda p: p.client_id)
    draws = np.random.default_rng([seed, 0x5E1, round_index]).random(len(ordered))
    return [p.client_id for p, u in zip(ordered, draws) if u >= p.dropout_prob]


def aggregate_params(reports: Sequence[RoundReport], base: AdapterParams | None = None) -> AdapterParams:
    """Sample-weighted mean of client parameters, block by block.

    Only clients that touched a block vote on it; a block nobody touched
    keeps its ``base`` value. The mean is formed as ``p_0 + sum w_k (p_k - p_0)``
    so identical reports reproduce their parameters bit-exactly.
    """
    if not reports:
        raise ValueError("no reports to aggregate")
    reports = sorted(reports, key=lambda r: r.client_id)
    ref = base if base is not None else reports[0].params_after
    for r in reports:
        for name in ref.names():
            if name not in r.params_after.arrays or r.params_after.arrays[name].shape != ref.arrays[name].shape:
                raise ValueError(f"client {r.client_id}: parameter block {name} has the wrong shape")
    out = {}
    for name in ref.names():
        voters = [r for r in reports if not r.touched or name in r.touched]
        if not voters:
            out[name] = ref.arrays[name].copy()
            continue
        w = np.array([r.retained_samples for r in voters], dtype=np.float64)
        if w.sum() == 0:
            w = np.ones_like(w)
        w = w / w.sum()
        first = voters[0].params_after.arrays[name]
        acc = first.copy()
        for wk, r in zip(w[1:], voters[1:]):
            acc = acc + wk * (r.params_after.arrays[name] - first)
        out[name] = acc
    return ref.with_arrays(out)


def aggregate_label_stats(reports: Sequence[RoundReport]) -> LabelStats:
    if not reports:
        raise ValueError("no reports")
    counts: dict[int, int] = {}
    sums: dict[int, float] = {}
    for r in sorted(reports, key=lambda r: r.client_id):
        for anchor, st in r.label_stats.items():
            counts[anchor] = counts.get(anchor, 0) + st.count
            sums[anchor] = sums.get(anchor, 0.0) + st.count * st.mean_confidence
    return {a: AnchorStat(counts[a], sums[a] / counts[a]) for a in sorted(counts) if counts[a] > 0}


def run_round(state: GlobalState, train: TrainConfig, fed: FederationConfig) -> tuple[GlobalState, RoundOutcome]:
    """Select, broadcast, train locally, aggregate, then prune on every client."""
    rnd = state.round_index
    profiles = [c.profile for c in state.clients.values()]
    chosen = select_clients(rnd, profiles, fed.seed)
    clients = dict(state.clients)
    reports: list[RoundReport] = []
    losses, fracs = [], []
    for cid in chosen:
        cs = clients[cid]
        start = state.params if fed.aggregate else (cs.params or state.params)
        try:
            params, adam, stats = local_update(start, cs.shard, cs.ledger, state.skb, train, cs.adam, rnd)
        except Exception:
            log.exception("round %d: client %d failed and is dropped from the round", rnd, cid)
            continue
        ledger = ledger_update(cs.ledger, rnd, stats.labels, stats.mask)
        clients[cid] = replace(cs, ledger=ledger, adam=adam, params=None if fed.aggregate else params)
        reports.append(
            RoundReport(
                client_id=cid,
                params_after=params,
                retained_samples=stats.retained_samples,
                label_stats=stats.label_stats,
                wall_time=stats.steps / cs.profile.compute_speed,
                touched=tuple(touched_blocks(start, cs.shard)),
                mean_loss=stats.mean_loss,
                retained_fraction=stats.retained_fraction,
            )
        )
        losses.append(stats.mean_loss)
        fracs.append(stats.retained_fraction)

    if not reports:
        log.info("round %d skipped: no participants", rnd)
        new = replace(state, round_index=rnd + 1, clients=clients)
        return new, RoundOutcome([], float("nan"), float("nan"), len(state.pruned_log), 0.0)

    params = aggregate_params(reports, state.params) if fed.aggregate else state.params
    consensus = state.consensus
    if rnd % max(1, fed.label_stats_every) == 0:
        consensus = aggregate_label_stats(reports)

    pruned_log = list(state.pruned_log)
    if fed.prune:
        own = {r.client_id: r.label_stats for r in reports}
        for cid in sorted(clients):
            cs = clients[cid]
            if fed.aggregate:
                cons = consensus
            else:
                cons = own.get(cid)
                if cons is None:
                    continue
            tau = consensus_threshold(cons, fed.tau_percentile)
            ledger, gone = ledger_prune(cs.ledger, cons, fed.patience, tau)
            if gone:
                clients[cid] = replace(cs, ledger=ledger)
                pruned_log.extend((rnd, cid, s) for s in gone)

    new = GlobalState(rnd + 1, params, clients, state.skb, consensus, pruned_log)
    outcome = RoundOutcome(
        participants=[r.client_id for r in reports],
        mean_loss=float(np.mean(losses)),
        retained_fraction=float(np.mean(fracs)),
        pruned_total=len(pruned_log),
        sim_duration=max(r.wall_time for r in reports),
    )
    return new, outcome


def run_rounds(
    state: GlobalState,
    train: TrainConfig,
    fed: FederationConfig,
    rounds: int,
    on_round: Callable[[GlobalState, RoundOutcome | None], None] | None = None,
) -> GlobalState:
    """Run ``rounds`` rounds; ``on_round`` sees the initial state (outcome None) and each round."""
    if on_round:
        on_round(state, None)
    for _ in range(rounds):
        state, outcome = run_round(state, train, fed)
        if on_round:
            on_round(state, outcome)
    return state


# ---------------------------------------------------------------------------
# checkpoints


CHECKPOINT_MAGIC = b"SEMC"
CHECKPOINT_VERSION = 1
_CK_HEAD = struct.Struct("<4sIII")


def write_checkpoint(params: AdapterParams, round_index: int, fh) -> None:
    """``SEMC``, u32 version, u32 round, u32 header length, JSON header, float64 LE blocks.

    The header lists hyperparameters, encoder signatures and every block's
    shape in vectorization (sorted-name) order; values follow in that order.
    """
    header = json.dumps(
        {
            "hyper": params.hyper.__dict__,
            "signatures": [[s.modality, s.family, s.dim] for s in params.signatures],
            "blocks": [[k, list(params.arrays[k].shape)] for k in params.names()],
        },
        sort_keys=True,
    ).encode()
    fh.write(_CK_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, round_index, len(header)))
    fh.write(header)
    fh.write(np.ascontiguousarray(params.vectorize(), dtype="<f8").tobytes())


def read_checkpoint(fh) -> tuple[AdapterParams, int]:
    head = fh.read(_CK_HEAD.size)
    if len(head) != _CK_HEAD.size:
        raise FormatError("truncated checkpoint header")
    magic, version, round_index, hlen = _CK_HEAD.unpack(head)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    raw = fh.read(hlen)
    if len(raw) != hlen:
        raise FormatError("truncated checkpoint header")
    meta = json.loads(raw)
    blocks = [(name, tuple(shape)) for name, shape in meta["blocks"]]
    total = sum(int(np.prod(s)) for _, s in blocks)
    payload = fh.read(8 * total)
    if len(payload) != 8 * total:
        raise FormatError("truncated checkpoint payload")
    if fh.read(1):
        raise FormatError("trailing bytes after checkpoint payload")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    arrays, off = {}, 0
    for name, shape in blocks:
        size = int(np.prod(shape))
        arrays[name] = flat[off:off + size].reshape(shape).copy()
        off += size
    hyper = AdapterHyper(**meta["hyper"])
    sigs = tuple(EncoderSignature(m, int(f), int(d)) for m, f, d in meta["signatures"])
    return AdapterParams(arrays, hyper, sigs), int(round_index)


def save_checkpoint(params: AdapterParams, round_index: int, path) -> None:
    with open(Path(path), "wb") as fh:
        write_checkpoint(params, round_index, fh)


def load_checkpoint(path) -> tuple[AdapterParams, int]:
    with open(Path(path), "rb") as fh:
        return read_checkpoint(fh)
