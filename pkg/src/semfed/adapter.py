"""Graph-based multimodal adapter.

Frozen encoder features are projected to per-node hidden embeddings, wired
into a per-batch semantic graph (Gaussian-kernel edges inside a modality,
mapped-cosine edges across modalities), refined by attention message passing
and finally projected to unit-norm tokens in the SKB space.

Row-vector convention throughout: an embedding is a row, ``x @ W``.

Trainable blocks (canonical names, also the vectorization order when sorted)::

    cross:W                 d_h x d_h   cross-modal mapping
    in:<modality>:<fam>:W   d_m x d_h   input projection per encoder signature
    in:<modality>:<fam>:b   1 x d_h
    mp:<head>:W             d_h x d_h   message transform
    out:<head>:W            d_h x d_s   output projection

``<head>`` is ``shared`` unless per-modality heads are enabled, in which case
it is the modality name.
"""
from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .mathops import ZeroNormError, as_matrix, masked_row_softmax

log = logging.getLogger(__name__)

MODALITY_TAGS = {"image": 0, "text": 1, "speech": 2}
SHARED_HEAD = "shared"


@dataclass(frozen=True, order=True)
class EncoderSignature:
    modality: str
    family: int
    dim: int

    @property
    def key(self) -> str:
        return f"{self.modality}:{self.family}"


@dataclass(frozen=True)
class AdapterHyper:
    d_h: int = 128
    d_s: int = 64
    attn_scale: float = 1.5
    k_intra: int = 8
    k_cross: int = 8
    sigma: float = 1.0
    layers: int = 1
    per_modality_heads: bool = False
    cross_edges: bool = True

    def __post_init__(self):
        if not self.attn_scale > 0:
            raise ValueError("attn_scale must be positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.k_intra < 0 or self.k_cross < 0 or self.layers < 0:
            raise ValueError("k_intra, k_cross and layers must be >= 0")


@dataclass(eq=False)
class AdapterParams:
    arrays: dict[str, np.ndarray]
    hyper: AdapterHyper
    signatures: tuple[EncoderSignature, ...]

    def names(self) -> list[str]:
        return sorted(self.arrays)

    def head(self, modality: str) -> str:
        return modality if self.hyper.per_modality_heads else SHARED_HEAD

    def heads(self) -> list[str]:
        if not self.hyper.per_modality_heads:
            return [SHARED_HEAD]
        return sorted({s.modality for s in self.signatures})

    def signature_for(self, modality: str, family: int) -> EncoderSignature:
        for s in self.signatures:
            if s.modality == modality and s.family == family:
                return s
        raise KeyError(f"encoder signature {modality}:{family} is not registered")

    def copy(self) -> "AdapterParams":
        return replace(self, arrays={k: v.copy() for k, v in self.arrays.items()})

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "AdapterParams":
        if set(arrays) != set(self.arrays):
            raise KeyError("parameter block names differ")
        return replace(self, arrays=dict(arrays))

    def vectorize(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in self.names()])

    def bit_equal(self, other: "AdapterParams") -> bool:
        return (
            self.names() == other.names()
            and self.hyper == other.hyper
            and all(
                self.arrays[k].shape == other.arrays[k].shape
                and self.arrays[k].tobytes() == other.arrays[k].tobytes()
                for k in self.names()
            )
        )

    def max_abs_diff(self, other: "AdapterParams") -> float:
        return max(float(np.max(np.abs(self.arrays[k] - other.arrays[k]))) for k in self.names())


def block_names(signatures: Iterable[EncoderSignature], hyper: AdapterHyper) -> dict[str, tuple[int, int]]:
    sigs = sorted(set(signatures))
    shapes: dict[str, tuple[int, int]] = {"cross:W": (hyper.d_h, hyper.d_h)}
    for s in sigs:
        shapes[f"in:{s.key}:W"] = (s.dim, hyper.d_h)
        shapes[f"in:{s.key}:b"] = (1, hyper.d_h)
    heads = sorted({s.modality for s in sigs}) if hyper.per_modality_heads else [SHARED_HEAD]
    for h in heads:
        shapes[f"mp:{h}:W"] = (hyper.d_h, hyper.d_h)
        shapes[f"out:{h}:W"] = (hyper.d_h, hyper.d_s)
    return shapes


def init_params(signatures: Iterable[EncoderSignature], hyper: AdapterHyper, seed: int) -> AdapterParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, one seeded stream per block.

    Per-block streams mean registering another encoder family leaves the
    other blocks' initial values untouched.
    """
    sigs = tuple(sorted(set(signatures)))
    keys = [s.key for s in sigs]
    if len(set(keys)) != len(keys):
        raise ValueError("each (modality, family) must map to exactly one dim")
    arrays = {}
    for name, shape in sorted(block_names(sigs, hyper).items()):
        fan_in = shape[0] if not name.endswith(":b") else arrays[name[:-1] + "W"].shape[0]
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        s = 1.0 / np.sqrt(fan_in)
        arrays[name] = rng.uniform(-s, s, size=shape)
    return AdapterParams(arrays, hyper, sigs)


@dataclass(frozen=True)
class FeatureSlice:
    """Rows of one frozen-encoder feature matrix entering a batch."""

    signature: EncoderSignature
    sample_ids: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[1] != self.signature.dim:
            raise ValueError(
                f"features shape {self.features.shape} does not match signature dim {self.signature.dim}"
            )
        if len(self.sample_ids) != self.features.shape[0]:
            raise ValueError("sample_ids / feature rows length mismatch")


@dataclass
class NodeSet:
    embeddings: np.ndarray
    modalities: tuple[str, ...]
    sample_ids: np.ndarray
    preact: np.ndarray | None = None

    def __len__(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class Edges:
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    kind: str

    @classmethod
    def empty(cls, kind: str) -> "Edges":
        return cls(np.zeros(0, int), np.zeros(0, int), np.zeros(0), kind)

    def __len__(self) -> int:
        return len(self.src)

    def mask(self, n: int) -> np.ndarray:
        m = np.zeros((n, n), dtype=bool)
        m[self.src, self.dst] = True
        return m


@dataclass
class SemanticGraph:
    """Nodes plus directed out-edges; node ``src`` aggregates from ``dst``."""

    nodes: NodeSet
    intra: Edges
    cross: Edges

    def edge_list(self) -> list[tuple[int, int, float, str]]:
        out = []
        for e in (self.intra, self.cross):
            out.extend(zip(e.src.tolist(), e.dst.tolist(), e.weight.tolist(), [e.kind] * len(e)))
        return out

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        n = len(self.nodes)
        w = np.zeros((n, n))
        m = np.zeros((n, n), dtype=bool)
        for e in (self.intra, self.cross):
            w[e.src, e.dst] = e.weight
            m[e.src, e.dst] = True
        return w, m


@dataclass(frozen=True)
class Topology:
    """Frozen edge selection, reused when the graph must not be re-selected."""

    intra: np.ndarray
    cross: np.ndarray


# ---------------------------------------------------------------------------
# component operations


def project_inputs(features: Sequence[FeatureSlice], params: AdapterParams) -> NodeSet:
    blocks, pre, mods, ids = [], [], [], []
    for fs in features:
        name = f"in:{fs.signature.key}:W"
        if name not in params.arrays:
            raise KeyError(f"encoder signature {fs.signature.key} has no input projection; register it first")
        if params.arrays[name].shape[0] != fs.signature.dim:
            raise ValueError(f"signature {fs.signature.key} dim {fs.signature.dim} != registered projection")
        x = as_matrix(fs.features, "features")
        z = x @ params.arrays[name] + params.arrays[f"in:{fs.signature.key}:b"]
        pre.append(z)
        blocks.append(np.maximum(z, 0.0))
        mods.extend([fs.signature.modality] * x.shape[0])
        ids.append(np.asarray(fs.sample_ids))
    if not blocks:
        raise ValueError("empty batch")
    return NodeSet(
        np.vstack(blocks),
        tuple(mods),
        np.concatenate(ids),
        np.vstack(pre),
    )


def _modality_codes(nodes: NodeSet) -> np.ndarray:
    table = {m: i for i, m in enumerate(sorted(set(nodes.modalities)))}
    return np.array([table[m] for m in nodes.modalities], dtype=int)


def _select_topk(scores: np.ndarray, candidates: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k over candidate entries; ties go to the lower column."""
    n, m = scores.shape
    if k == 0 or n == 0:
        return np.zeros_like(candidates)
    if k >= m:
        return candidates.copy()
    masked = np.where(candidates, scores, -np.inf)
    kth = -np.partition(-masked, k - 1, axis=1)[:, k - 1]
    greater = masked > kth[:, None]
    tied = (masked == kth[:, None]) & candidates
    room = k - greater.sum(axis=1)
    return (greater | (tied & (np.cumsum(tied, axis=1) <= room[:, None]))) & candidates


def _kernel_matrix(h: np.ndarray, sigma: float) -> np.ndarray:
    sq = np.einsum("ij,ij->i", h, h)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (h @ h.T), 0.0)
    return np.exp(-d2 / (2.0 * sigma * sigma))


def _safe_normalize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    valid = norms > 0
    xn = np.zeros_like(x)
    xn[valid] = x[valid] / norms[valid, None]
    return xn, norms, valid


def _edges_from_mask(mask: np.ndarray, weights: np.ndarray, kind: str) -> Edges:
    src, dst = np.nonzero(mask)
    return Edges(src, dst, weights[src, dst], kind)


def build_intra_edges(nodes: NodeSet, sigma: float, k_intra: int) -> Edges:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    codes = _modality_codes(nodes)
    cand = codes[:, None] == codes[None, :]
    np.fill_diagonal(cand, False)
    kern = _kernel_matrix(nodes.embeddings, sigma)
    return _edges_from_mask(_select_topk(kern, cand, k_intra), kern, "intra")


def _cross_views(h: np.ndarray, w_x: np.ndarray):
    hn, hnorm, hvalid = _safe_normalize(h)
    g = h @ w_x
    gn, gnorm, gvalid = _safe_normalize(g)
    raw = np.clip(hn @ hn.T, -1.0, 1.0)
    ref = np.clip(gn @ gn.T, -1.0, 1.0)
    return hn, hnorm, gn, gnorm, g, raw, ref, hvalid & gvalid


def _cross_candidates(nodes: NodeSet, valid: np.ndarray) -> np.ndarray:
    codes = _modality_codes(nodes)
    cand = codes[:, None] != codes[None, :]
    cand &= valid[:, None] & valid[None, :]
    if not np.all(valid):
        log.debug("zero-norm nodes %s contribute no cross edges", np.flatnonzero(~valid).tolist())
    return cand


def build_cross_edges(nodes: NodeSet, params: AdapterParams, k_cross: int) -> Edges:
    if len(set(nodes.modalities)) < 2 or not params.hyper.cross_edges:
        return Edges.empty("cross")
    *_, raw, ref, valid = _cross_views(nodes.embeddings, params.arrays["cross:W"])
    sel = _select_topk(ref, _cross_candidates(nodes, valid), k_cross)
    return _edges_from_mask(sel, 0.5 * (raw + ref), "cross")


def _head_rows(modalities: Sequence[str], params: AdapterParams) -> dict[str, np.ndarray]:
    heads = np.array([params.head(m) for m in modalities])
    return {h: np.flatnonzero(heads == h) for h in params.heads() if np.any(heads == h)}


def _apply_heads(x: np.ndarray, rows: dict[str, np.ndarray], params: AdapterParams, prefix: str, width: int):
    out = np.zeros((x.shape[0], width))
    for h, idx in rows.items():
        out[idx] = x[idx] @ params.arrays[f"{prefix}:{h}:W"]
    return out


def _normalize_or_raise(u: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.einsum("ij,ij->i", u, u))
    if np.any(norms == 0.0):
        bad = np.flatnonzero(norms == 0.0).tolist()
        raise ZeroNormError(f"{what}: zero vector at nodes {bad}")
    return u / norms[:, None], norms


def _attention(graph: SemanticGraph, params: AdapterParams) -> tuple[np.ndarray, np.ndarray]:
    w, m = graph.dense()
    return masked_row_softmax(w, m, params.hyper.attn_scale), m


def message_pass(graph: SemanticGraph, params: AdapterParams) -> NodeSet:
    nodes = graph.nodes
    attn, _ = _attention(graph, params)
    rows = _head_rows(nodes.modalities, params)
    h = nodes.embeddings
    if params.hyper.layers == 0:
        h, _ = _normalize_or_raise(h, "message passing")
    for _ in range(params.hyper.layers):
        msg = attn @ _apply_heads(h, rows, params, "mp", params.hyper.d_h)
        h, _ = _normalize_or_raise(h + msg, "message passing residual")
    return NodeSet(h, nodes.modalities, nodes.sample_ids)


def emit_tokens(nodes: NodeSet, params: AdapterParams) -> np.ndarray:
    rows = _head_rows(nodes.modalities, params)
    y = _apply_heads(nodes.embeddings, rows, params, "out", params.hyper.d_s)
    tokens, _ = _normalize_or_raise(y, "output projection")
    return tokens


# ---------------------------------------------------------------------------
# composed forward with caches for the analytic backward


@dataclass
class AdapterOutput:
    graph: SemanticGraph
    tokens: np.ndarray
    by_modality: dict[str, tuple[np.ndarray, np.ndarray]]
    slices: list[slice]
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def topology(self) -> Topology:
        return self.cache["topology"]


def adapter_forward(
    batch: Sequence[FeatureSlice],
    params: AdapterParams,
    topology: Topology | None = None,
) -> AdapterOutput:
    """Project, wire, pass messages and emit tokens for one batch.

    With ``topology`` given, edge selection is reused and only the edge
    weights are recomputed from the current parameters.
    """
    if not batch or sum(len(fs.sample_ids) for fs in batch) == 0:
        raise ValueError("empty batch")
    hp = params.hyper
    nodes = project_inputs(batch, params)
    h0 = nodes.embeddings
    n = h0.shape[0]
    codes = _modality_codes(nodes)

    kern = _kernel_matrix(h0, hp.sigma)
    use_cross = hp.cross_edges and len(set(nodes.modalities)) >= 2
    if use_cross:
        hn, hnorm, gn, gnorm, g, raw, ref, valid = _cross_views(h0, params.arrays["cross:W"])
    if topology is None:
        cand = codes[:, None] == codes[None, :]
        np.fill_diagonal(cand, False)
        intra = _select_topk(kern, cand, hp.k_intra)
        if use_cross:
            cross = _select_topk(ref, _cross_candidates(nodes, valid), hp.k_cross)
        else:
            cross = np.zeros((n, n), dtype=bool)
        topology = Topology(intra, cross)
    else:
        if topology.intra.shape != (n, n):
            raise ValueError("topology does not match batch size")
        intra, cross = topology.intra, topology.cross
        if use_cross and np.any(cross & ~(valid[:, None] & valid[None, :])):
            raise ZeroNormError("frozen cross edge touches a zero-norm node")

    cross_w = 0.5 * (raw + ref) if use_cross else np.zeros((n, n))
    if not use_cross:
        cross = np.zeros((n, n), dtype=bool)
    graph = SemanticGraph(
        nodes,
        _edges_from_mask(intra, kern, "intra"),
        _edges_from_mask(cross, cross_w, "cross"),
    )
    edge_mask = intra | cross
    weights = np.where(intra, kern, 0.0) + np.where(cross, cross_w, 0.0)
    attn = masked_row_softmax(weights, edge_mask, hp.attn_scale)

    rows = _head_rows(nodes.modalities, params)
    hs, ps, unorms = [h0], [], []
    h = h0
    if hp.layers == 0:
        h, un = _normalize_or_raise(h, "message passing")
        hs, unorms = [h0, h], [un]
    for _ in range(hp.layers):
        p = _apply_heads(h, rows, params, "mp", hp.d_h)
        h, un = _normalize_or_raise(h + attn @ p, "message passing residual")
        ps.append(p)
        unorms.append(un)
        hs.append(h)
    y = _apply_heads(h, rows, params, "out", hp.d_s)
    tokens, ynorm = _normalize_or_raise(y, "output projection")

    slices, by_mod, start = [], {}, 0
    for fs in batch:
        sl = slice(start, start + len(fs.sample_ids))
        slices.append(sl)
        m = fs.signature.modality
        if m in by_mod:
            ids, tok = by_mod[m]
            by_mod[m] = (np.concatenate([ids, fs.sample_ids]), np.vstack([tok, tokens[sl]]))
        else:
            by_mod[m] = (np.asarray(fs.sample_ids), tokens[sl])
        start = sl.stop

    cache = dict(
        topology=topology, batch=batch, kern=kern, intra=intra, cross=cross,
        edge_mask=edge_mask, attn=attn, rows=rows, hs=hs, ps=ps, unorms=unorms,
        ynorm=ynorm, use_cross=use_cross,
    )
    if use_cross:
        cache.update(hn=hn, hnorm=hnorm, gn=gn, gnorm=gnorm)
    out_nodes = NodeSet(h, nodes.modalities, nodes.sample_ids)
    cache["out_nodes"] = out_nodes
    return AdapterOutput(graph, tokens, by_mod, slices, cache)


def _normalize_backward(xn: np.ndarray, norms: np.ndarray, dxn: np.ndarray) -> np.ndarray:
    safe = np.where(norms > 0, norms, 1.0)
    return (dxn - xn * np.einsum("ij,ij->i", xn, dxn)[:, None]) / safe[:, None]


def adapter_backward(out: AdapterOutput, params: AdapterParams, d_tokens: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every trainable block, given dL/dtokens.

    Edge selection is held fixed; gradients flow through edge weights,
    attention, messages, projections and every normalization.
    """
    c = out.cache
    hp = params.hyper
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    rows = c["rows"]
    hs, ps, unorms = c["hs"], c["ps"], c["unorms"]
    attn, edge_mask = c["attn"], c["edge_mask"]

    d_y = _normalize_backward(out.tokens, c["ynorm"], d_tokens)
    h_last = hs[-1]
    d_h = np.zeros_like(h_last)
    for head, idx in rows.items():
        w_o = params.arrays[f"out:{head}:W"]
        grads[f"out:{head}:W"] += h_last[idx].T @ d_y[idx]
        d_h[idx] = d_y[idx] @ w_o.T

    d_attn = np.zeros_like(attn)
    if hp.layers == 0:
        d_h = _normalize_backward(hs[1], unorms[0], d_h)
    for layer in reversed(range(hp.layers)):
        d_u = _normalize_backward(hs[layer + 1], unorms[layer], d_h)
        h_in = hs[layer]
        d_attn += d_u @ ps[layer].T
        d_p = attn.T @ d_u
        d_h = d_u.copy()
        for head, idx in rows.items():
            w_g = params.arrays[f"mp:{head}:W"]
            grads[f"mp:{head}:W"] += h_in[idx].T @ d_p[idx]
            d_h[idx] += d_p[idx] @ w_g.T

    # softmax over scaled edge weights
    d_attn = np.where(edge_mask, d_attn, 0.0)
    d_logit = attn * (d_attn - np.sum(attn * d_attn, axis=1, keepdims=True))
    d_weight = hp.attn_scale * d_logit

    h0 = hs[0]
    d_kern = np.where(c["intra"], d_weight, 0.0)
    if np.any(d_kern):
        d_d2 = d_kern * c["kern"] * (-1.0 / (2.0 * hp.sigma * hp.sigma))
        rs = d_d2.sum(axis=1)
        cs = d_d2.sum(axis=0)
        d_h += 2.0 * ((rs + cs)[:, None] * h0 - d_d2 @ h0 - d_d2.T @ h0)

    if c["use_cross"]:
        d_sim = 0.5 * np.where(c["cross"], d_weight, 0.0)
        if np.any(d_sim):
            hn, gn = c["hn"], c["gn"]
            d_hn = d_sim @ hn + d_sim.T @ hn
            d_h += _normalize_backward(hn, c["hnorm"], d_hn)
            d_gn = d_sim @ gn + d_sim.T @ gn
            d_g = _normalize_backward(gn, c["gnorm"], d_gn)
            grads["cross:W"] += h0.T @ d_g
            d_h += d_g @ params.arrays["cross:W"].T

    pre = out.graph.nodes.preact
    d_z = d_h * (pre > 0)
    for fs, sl in zip(c["batch"], out.slices):
        key = fs.signature.key
        grads[f"in:{key}:W"] += np.asarray(fs.features, dtype=np.float64).T @ d_z[sl]
        grads[f"in:{key}:b"] += d_z[sl].sum(axis=0, keepdims=True)

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in block {name}")
    return grads
