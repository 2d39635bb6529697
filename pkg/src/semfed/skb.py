"""Semantic knowledge base: unit-norm class anchors shared by every party."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .mathops import ZeroNormError, as_matrix

SKB_MAGIC = b"SKB1"
_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """Malformed or truncated binary file."""


@dataclass(frozen=True)
class Alignment:
    anchor_id: int
    similarity: float


@dataclass(frozen=True, eq=False)
class Skb:
    anchors: np.ndarray
    class_ids: tuple[int, ...]
    version: int = 1

    @property
    def d_s(self) -> int:
        return self.anchors.shape[1]

    @property
    def n_classes(self) -> int:
        return self.anchors.shape[0]

    def index_of(self, class_id: int) -> int:
        return self.class_ids.index(class_id)

    def anchor(self, class_id: int) -> np.ndarray:
        return self.anchors[self.index_of(class_id)]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Skb):
            return NotImplemented
        return (
            self.version == other.version
            and self.class_ids == other.class_ids
            and self.anchors.shape == other.anchors.shape
            and self.anchors.tobytes() == other.anchors.tobytes()
        )


def build_skb(prototypes, class_ids: Sequence[int], version: int = 1) -> Skb:
    protos = as_matrix(prototypes, "prototypes")
    if protos.ndim != 2 or protos.shape[0] < 2:
        raise ValueError("need a C x d_s prototype matrix with C >= 2")
    ids = tuple(int(c) for c in class_ids)
    if len(ids) != protos.shape[0]:
        raise ValueError(f"{len(ids)} class ids for {protos.shape[0]} prototypes")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate class ids")
    norms = np.linalg.norm(protos, axis=1)
    if np.any(norms == 0.0):
        raise ZeroNormError(f"zero-norm prototype rows: {np.flatnonzero(norms == 0).tolist()}")
    anchors = protos / norms[:, None]
    anchors.setflags(write=False)
    return Skb(anchors, ids, version)


def anchor_similarities(tokens: np.ndarray, skb: Skb) -> np.ndarray:
    """Cosine of every token row against every anchor (n x C)."""
    t = np.atleast_2d(as_matrix(tokens, "tokens"))
    norms = np.linalg.norm(t, axis=1)
    if np.any(norms == 0.0):
        raise ZeroNormError("cannot align a zero token")
    return np.clip((t / norms[:, None]) @ skb.anchors.T, -1.0, 1.0)


def align_token(token, skb: Skb) -> Alignment:
    t = as_matrix(token, "token").ravel()
    if t.size != skb.d_s:
        raise ValueError(f"token length {t.size} != d_s {skb.d_s}")
    sims = anchor_similarities(t[None, :], skb)[0]
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    best = int(np.argmax(sims))
    return Alignment(skb.class_ids[best], float(sims[best]))


def write_skb(skb: Skb, fh: BinaryIO) -> None:
    c, d = skb.anchors.shape
    fh.write(_HEADER.pack(SKB_MAGIC, skb.version, c, d))
    fh.write(np.ascontiguousarray(skb.anchors, dtype="<f8").tobytes())
    fh.write(np.asarray(skb.class_ids, dtype="<u4").tobytes())


def read_skb(fh: BinaryIO) -> Skb:
    head = fh.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise FormatError("truncated SKB header")
    magic, version, c, d = _HEADER.unpack(head)
    if magic != SKB_MAGIC:
        raise FormatError(f"bad SKB magic {magic!r}")
    payload = fh.read(8 * c * d)
    if len(payload) != 8 * c * d:
        raise FormatError("truncated SKB anchor payload")
    ids_raw = fh.read(4 * c)
    if len(ids_raw) != 4 * c:
        raise FormatError("truncated SKB class-id table")
    anchors = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(c, d)
    anchors.setflags(write=False)
    ids = tuple(int(i) for i in np.frombuffer(ids_raw, dtype="<u4"))
    if len(set(ids)) != len(ids):
        raise FormatError("duplicate class ids in SKB file")
    return Skb(anchors, ids, version)


def skb_save(skb: Skb, destination) -> None:
    with open(Path(destination), "wb") as fh:
        write_skb(skb, fh)


def skb_load(source) -> Skb:
    with open(Path(source), "rb") as fh:
        return read_skb(fh)
