"""Frozen-feature files, synthetic multimodal data, non-IID partitioning and label errors."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .adapter import MODALITY_TAGS, EncoderSignature, FeatureSlice
from .skb import FormatError, Skb, build_skb

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"SEMF"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIBHIQ")
_TAG_TO_MODALITY = {v: k for k, v in MODALITY_TAGS.items()}

IMAGE_FAMILY = 0
TEXT_FAMILY = 1


@dataclass(frozen=True, eq=False)
class FeatureSet:
    signature: EncoderSignature
    sample_ids: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        if self.features.shape != (len(self.sample_ids), self.signature.dim):
            raise ValueError(
                f"features {self.features.shape} vs {len(self.sample_ids)} ids, dim {self.signature.dim}"
            )
        if len(np.unique(self.sample_ids)) != len(self.sample_ids):
            raise ValueError("duplicate sample ids in feature set")

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureSet):
            return NotImplemented
        return (
            self.signature == other.signature
            and np.array_equal(self.sample_ids, other.sample_ids)
            and self.features.tobytes() == other.features.tobytes()
        )

    def row_index(self) -> dict[int, int]:
        return {int(s): i for i, s in enumerate(self.sample_ids)}


def write_features(fs: FeatureSet, fh: BinaryIO) -> None:
    sig = fs.signature
    if sig.modality not in MODALITY_TAGS:
        raise ValueError(f"modality {sig.modality!r} has no file tag")
    fh.write(
        _FEATURE_HEADER.pack(
            FEATURE_MAGIC, FEATURE_VERSION, MODALITY_TAGS[sig.modality], sig.family, sig.dim, len(fs.sample_ids)
        )
    )
    fh.write(np.asarray(fs.sample_ids, dtype="<u8").tobytes())
    fh.write(np.ascontiguousarray(fs.features, dtype="<f8").tobytes())


def read_features(fh: BinaryIO) -> FeatureSet:
    head = fh.read(_FEATURE_HEADER.size)
    if len(head) != _FEATURE_HEADER.size:
        raise FormatError("truncated feature header")
    magic, version, tag, family, dim, n = _FEATURE_HEADER.unpack(head)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad feature magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature file version {version}")
    if tag not in _TAG_TO_MODALITY:
        raise FormatError(f"unknown modality tag {tag}")
    ids_raw = fh.read(8 * n)
    if len(ids_raw) != 8 * n:
        raise FormatError("truncated sample-id table")
    payload = fh.read(8 * n * dim)
    if len(payload) != 8 * n * dim:
        raise FormatError(f"payload holds {len(payload)} bytes, header promises {8 * n * dim}")
    if fh.read(1):
        raise FormatError("trailing bytes after feature payload")
    ids = np.frombuffer(ids_raw, dtype="<u8").astype(np.int64)
    feats = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(n, dim)
    return FeatureSet(EncoderSignature(_TAG_TO_MODALITY[tag], family, dim), ids, feats)


def save_features(fs: FeatureSet, destination) -> None:
    with open(destination, "wb") as fh:
        write_features(fs, fh)


def load_features(source) -> FeatureSet:
    with open(source, "rb") as fh:
        return read_features(fh)


@dataclass
class DatasetManifest:
    pairings: list[tuple[int, int]]
    class_labels: dict[int, int]
    splits: dict[str, list[int]]
    skb_prototypes_file: str | None = None

    def __post_init__(self):
        imgs = [p[0] for p in self.pairings]
        txts = [p[1] for p in self.pairings]
        if len(set(imgs)) != len(imgs) or len(set(txts)) != len(txts):
            raise ValueError("pairings must be a partial bijection")
        if set(self.splits.get("train", [])) & set(self.splits.get("eval", [])):
            raise ValueError("train and eval splits overlap")

    def partner(self) -> dict[int, int]:
        return {int(i): int(t) for i, t in self.pairings}

    def to_json(self) -> str:
        return json.dumps(
            {
                "pairings": [list(p) for p in self.pairings],
                "class_labels": {str(k): v for k, v in sorted(self.class_labels.items())},
                "splits": self.splits,
                "skb_prototypes_file": self.skb_prototypes_file,
            },
            indent=1,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        return cls(
            [(int(a), int(b)) for a, b in d["pairings"]],
            {int(k): int(v) for k, v in d["class_labels"].items()},
            {k: [int(x) for x in v] for k, v in d["splits"].items()},
            d.get("skb_prototypes_file"),
        )


@dataclass
class PairedData:
    """Image and text feature sets with O(1) row lookup by sample id."""

    image: FeatureSet
    text: FeatureSet
    _img_rows: dict[int, int] = field(init=False, repr=False)
    _txt_rows: dict[int, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._img_rows = self.image.row_index()
        self._txt_rows = self.text.row_index()

    def slices(self, image_ids: Sequence[int], text_ids: Sequence[int]) -> tuple[FeatureSlice, FeatureSlice]:
        ii = np.array([self._img_rows[int(s)] for s in image_ids], dtype=int)
        ti = np.array([self._txt_rows[int(s)] for s in text_ids], dtype=int)
        return (
            FeatureSlice(self.image.signature, np.asarray(image_ids, dtype=np.int64), self.image.features[ii]),
            FeatureSlice(self.text.signature, np.asarray(text_ids, dtype=np.int64), self.text.features[ti]),
        )


@dataclass
class ClientShard:
    """One client's training pairs; ``text_ids[k]`` is what the client believes pairs with ``image_ids[k]``."""

    client_id: int
    image_ids: np.ndarray
    text_ids: np.ndarray
    data: PairedData
    stream_id: int | None = None  # shuffle stream; defaults to client_id

    @property
    def stream(self) -> int:
        return self.client_id if self.stream_id is None else self.stream_id

    def __len__(self) -> int:
        return len(self.image_ids)

    @property
    def signatures(self) -> tuple[EncoderSignature, ...]:
        return (self.data.image.signature, self.data.text.signature)


# ---------------------------------------------------------------------------
# synthetic data


def _full_rank_map(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    while True:
        m = rng.normal(0.0, 1.0 / np.sqrt(cols), size=(rows, cols))
        if np.linalg.matrix_rank(m) == min(rows, cols):
            return m


def synthetic_latent(
    n_classes: int, n_per_class: int, d_s: int, noise_sigma: float, seed: int
) -> tuple[Skb, np.ndarray, np.ndarray]:
    """SKB, per-sample class and latent = anchor(class) + N(0, noise_sigma^2 I)."""
    if n_classes < 2 or d_s < 2:
        raise ValueError("need n_classes >= 2 and d_s >= 2")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = np.random.default_rng([seed, 0x5A])
    skb = build_skb(rng.normal(size=(n_classes, d_s)), range(n_classes))
    classes = np.repeat(np.arange(n_classes), n_per_class)
    latent = skb.anchors[classes] + noise_sigma * rng.normal(size=(len(classes), d_s))
    return skb, classes, latent


def generate_synthetic(
    n_classes: int = 20,
    n_per_class: int = 50,
    d_s: int = 64,
    d_img: int = 256,
    d_txt: int = 128,
    noise_sigma: float = 0.1,
    seed: int = 0,
    eval_fraction: float = 0.2,
) -> tuple[PairedData, DatasetManifest, Skb]:
    """Two linear views of one noisy latent per sample, classes defined by SKB anchors.

    image = M_img latent, text = M_txt latent (see ``synthetic_latent``).
    Image and text of a sample share its sample id.
    """
    if d_img < d_s or d_txt < d_s:
        raise ValueError("encoder dims must be >= d_s so the latent stays recoverable")
    skb, classes, latent = synthetic_latent(n_classes, n_per_class, d_s, noise_sigma, seed)
    rng = np.random.default_rng([seed, 0x5B])
    m_img = _full_rank_map(rng, d_img, d_s)
    m_txt = _full_rank_map(rng, d_txt, d_s)
    ids = np.arange(len(classes), dtype=np.int64)
    image = FeatureSet(EncoderSignature("image", IMAGE_FAMILY, d_img), ids, latent @ m_img.T)
    text = FeatureSet(EncoderSignature("text", TEXT_FAMILY, d_txt), ids.copy(), latent @ m_txt.T)

    n_eval = int(round(eval_fraction * n_per_class))
    train, evals = [], []
    for c in range(n_classes):
        members = rng.permutation(np.flatnonzero(classes == c))
        evals.extend(sorted(members[:n_eval].tolist()))
        train.extend(sorted(members[n_eval:].tolist()))
    manifest = DatasetManifest(
        pairings=[(int(i), int(i)) for i in ids],
        class_labels={int(i): int(c) for i, c in zip(ids, classes)},
        splits={"train": sorted(train), "eval": sorted(evals)},
    )
    return PairedData(image, text), manifest, skb


# ---------------------------------------------------------------------------
# partitioning and label errors


def dirichlet_proportions(
    manifest: DatasetManifest, n_clients: int, alpha: float, seed: int, max_retries: int = 1000
) -> dict[int, np.ndarray]:
    """Per-class client proportions such that every client gets >= 1 training sample."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    by_class = _train_by_class(manifest)
    rng = np.random.default_rng([seed, 0xD1])
    for _ in range(max_retries):
        props = {c: rng.dirichlet(np.full(n_clients, float(alpha))) for c in sorted(by_class)}
        sizes = np.zeros(n_clients, dtype=int)
        for c, members in by_class.items():
            sizes += np.diff(_cuts(props[c], len(members)))
        if np.all(sizes >= 1):
            return props
    raise RuntimeError(
        f"could not give every one of {n_clients} clients a sample after {max_retries} draws; "
        "use a larger dataset or a larger alpha"
    )


def _train_by_class(manifest: DatasetManifest, split: str = "train") -> dict[int, list[int]]:
    by_class: dict[int, list[int]] = {}
    for sid in manifest.splits[split]:
        by_class.setdefault(manifest.class_labels[sid], []).append(sid)
    return {c: sorted(v) for c, v in sorted(by_class.items())}


def _cuts(p: np.ndarray, m: int) -> np.ndarray:
    cum = np.rint(np.cumsum(p) * m).astype(int)
    cum[-1] = m
    return np.concatenate([[0], np.maximum.accumulate(np.clip(cum, 0, m))])


def split_by_proportions(
    manifest: DatasetManifest, props: dict[int, np.ndarray], split: str, seed: int
) -> list[list[int]]:
    n_clients = len(next(iter(props.values())))
    shards: list[list[int]] = [[] for _ in range(n_clients)]
    rng = np.random.default_rng([seed, 0xD2, 0 if split == "train" else 1])
    for c, members in _train_by_class(manifest, split).items():
        order = rng.permutation(members)
        cuts = _cuts(props[c], len(order))
        for k in range(n_clients):
            shards[k].extend(int(s) for s in order[cuts[k]:cuts[k + 1]])
    return [sorted(s) for s in shards]


def partition_dirichlet(manifest: DatasetManifest, n_clients: int, alpha: float, seed: int) -> list[list[int]]:
    """Disjoint, covering, nonempty per-client shards of the train split."""
    props = dirichlet_proportions(manifest, n_clients, alpha, seed)
    return split_by_proportions(manifest, props, "train", seed)


def inject_label_error(text_ids: Sequence[int], rate: float, seed: int) -> np.ndarray:
    """Mis-pair exactly floor(rate * m) of the pairs by deranging their texts."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must be in [0, 1]")
    texts = np.array(text_ids, dtype=np.int64)
    m = len(texts)
    k = int(np.floor(rate * m))
    if k == 0:
        return texts
    rng = np.random.default_rng([seed, 0xE1])
    chosen = rng.permutation(m)[:k]
    out = texts.copy()
    if k >= 2:
        # rotating a shuffled cycle leaves no selected pair in place
        out[chosen] = texts[np.roll(chosen, 1)]
        return out
    rest = np.setdiff1d(np.arange(m), chosen)
    if rest.size == 0:
        log.warning("single pair cannot be mis-paired; left unchanged")
        return out
    other = int(rng.choice(rest))
    log.info("one selected pair swapped with unselected pair %d", other)
    out[chosen[0]], out[other] = texts[other], texts[chosen[0]]
    return out
