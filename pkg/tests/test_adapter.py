import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semfed.adapter import (
    AdapterHyper,
    EncoderSignature,
    FeatureSlice,
    NodeSet,
    SemanticGraph,
    adapter_forward,
    build_cross_edges,
    build_intra_edges,
    emit_tokens,
    init_params,
    message_pass,
    project_inputs,
)
from semfed.mathops import ZeroNormError, cosine_similarity, gaussian_kernel, masked_row_softmax

IMG = EncoderSignature("image", 0, 5)
TXT = EncoderSignature("text", 1, 3)


def _params(d_h=4, d_s=3, seed=0, **kw):
    return init_params((IMG, TXT), AdapterHyper(d_h=d_h, d_s=d_s, **kw), seed)


def _batch(rng, n_img, n_txt):
    return (
        FeatureSlice(IMG, np.arange(n_img), rng.normal(size=(n_img, IMG.dim))),
        FeatureSlice(TXT, np.arange(n_txt), rng.normal(size=(n_txt, TXT.dim))),
    )


def _nodes(emb, mods):
    return NodeSet(np.asarray(emb, dtype=float), tuple(mods), np.arange(len(mods)))


def test_init_is_seeded_per_block():
    a = _params(seed=3)
    b = _params(seed=3)
    assert a.bit_equal(b)
    c = init_params((IMG, TXT, EncoderSignature("image", 2, 7)), a.hyper, 3)
    # adding an encoder family leaves existing blocks unchanged
    assert all(np.array_equal(a.arrays[k], c.arrays[k]) for k in a.names())
    assert a.names() == sorted(a.names())
    assert not _params(seed=4).bit_equal(a)


def test_project_inputs_trivial_cases():
    p = _params(d_h=5)
    arrays = dict(p.arrays)
    arrays["in:image:0:W"] = np.zeros((5, 5))
    arrays["in:image:0:b"] = np.zeros((1, 5))
    x = np.abs(np.random.default_rng(0).normal(size=(3, 5)))
    out = project_inputs([FeatureSlice(IMG, np.arange(3), x)], p.with_arrays(arrays))
    assert np.all(out.embeddings == 0)
    arrays["in:image:0:W"] = np.eye(5)
    out = project_inputs([FeatureSlice(IMG, np.arange(3), x)], p.with_arrays(arrays))
    assert np.array_equal(out.embeddings, x)


def test_project_inputs_matches_matvec_oracle():
    rng = np.random.default_rng(1)
    p = _params(d_h=4)
    batch = _batch(rng, 3, 2)
    out = project_inputs(batch, p)
    rows = []
    for fs in batch:
        w, b = p.arrays[f"in:{fs.signature.key}:W"], p.arrays[f"in:{fs.signature.key}:b"][0]
        for x in fs.features:
            rows.append([max(0.0, sum(x[i] * w[i, j] for i in range(len(x))) + b[j]) for j in range(4)])
    assert np.allclose(out.embeddings, rows, atol=1e-12, rtol=0)
    assert out.modalities == ("image",) * 3 + ("text",) * 2


def test_project_inputs_unknown_signature():
    with pytest.raises(KeyError):
        project_inputs([FeatureSlice(EncoderSignature("image", 9, 5), np.arange(1), np.ones((1, 5)))], _params())


def test_intra_edges_trivial():
    nodes = _nodes([[1.0, 0.0], [0.0, 1.0]], ["image", "text"])
    assert len(build_intra_edges(nodes, 1.0, 3)) == 0
    nodes = _nodes([[1.0, 2.0], [1.0, 2.0]], ["image", "image"])
    e = build_intra_edges(nodes, 0.5, 1)
    assert sorted(zip(e.src.tolist(), e.dst.tolist(), e.weight.tolist())) == [(0, 1, 1.0), (1, 0, 1.0)]


def test_intra_edges_match_bruteforce():
    rng = np.random.default_rng(4)
    emb = rng.normal(size=(5, 3))
    nodes = _nodes(emb, ["image"] * 5)
    e = build_intra_edges(nodes, 1.3, 2)
    want = set()
    for i in range(5):
        scored = sorted(((gaussian_kernel(emb[i], emb[j], 1.3), -j) for j in range(5) if j != i), reverse=True)
        want |= {(i, -negj) for _, negj in scored[:2]}
    assert set(zip(e.src.tolist(), e.dst.tolist())) == want
    for s, d, w in zip(e.src, e.dst, e.weight):
        assert w == pytest.approx(gaussian_kernel(emb[s], emb[d], 1.3), abs=1e-12)


def test_cross_edges_trivial():
    p = _params(d_h=3)
    assert len(build_cross_edges(_nodes(np.eye(3), ["image"] * 3), p, 2)) == 0
    arrays = dict(p.arrays)
    arrays["cross:W"] = np.eye(3)
    rng = np.random.default_rng(2)
    emb = rng.normal(size=(4, 3))
    nodes = _nodes(emb, ["image", "image", "text", "text"])
    e = build_cross_edges(nodes, p.with_arrays(arrays), 2)
    for s, d, w in zip(e.src, e.dst, e.weight):
        assert w == pytest.approx(cosine_similarity(emb[s], emb[d]), abs=1e-12)


def test_cross_edges_match_bruteforce():
    rng = np.random.default_rng(8)
    p = _params(d_h=4)
    w_x = p.arrays["cross:W"]
    emb = rng.normal(size=(6, 4))
    mods = ["image"] * 3 + ["text"] * 3
    e = build_cross_edges(_nodes(emb, mods), p, 2)
    got = {(s, d): w for s, d, w in zip(e.src.tolist(), e.dst.tolist(), e.weight.tolist())}
    want = {}
    for i in range(6):
        cands = [j for j in range(6) if mods[j] != mods[i]]
        refined = {j: cosine_similarity(emb[i] @ w_x, emb[j] @ w_x) for j in cands}
        keep = sorted(cands, key=lambda j: (-refined[j], j))[:2]
        for j in keep:
            want[(i, j)] = 0.5 * (cosine_similarity(emb[i], emb[j]) + refined[j])
    assert got.keys() == want.keys()
    for key in want:
        assert got[key] == pytest.approx(want[key], abs=1e-12)


def test_cross_edges_skip_zero_nodes():
    p = _params(d_h=3)
    nodes = _nodes([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], ["image", "image", "text"])
    e = build_cross_edges(nodes, p, 2)
    assert 0 not in e.src.tolist() and 0 not in e.dst.tolist()


def test_message_pass_isolated_node():
    p = _params(d_h=3)
    nodes = _nodes([[3.0, 0.0, 4.0]], ["image"])
    graph = SemanticGraph(nodes, build_intra_edges(nodes, 1.0, 2), build_cross_edges(nodes, p, 2))
    out = message_pass(graph, p)
    assert out.embeddings.tolist() == [[0.6, 0.0, 0.8]]


def test_message_pass_symmetry():
    p = _params(d_h=2)
    nodes = _nodes([[1.0, 2.0], [2.0, 1.0]], ["image", "image"])
    graph = SemanticGraph(nodes, build_intra_edges(nodes, 1.0, 1), build_cross_edges(nodes, p, 1))
    arrays = dict(p.arrays)
    arrays["mp:shared:W"] = np.array([[0.3, -0.2], [-0.2, 0.3]])  # commutes with the swap
    out = message_pass(graph, p.with_arrays(arrays)).embeddings
    assert np.allclose(out[0], out[1][::-1], atol=1e-15)


def test_message_pass_dense_reference():
    rng = np.random.default_rng(11)
    p = _params(d_h=3)
    emb = np.abs(rng.normal(size=(4, 3)))
    nodes = _nodes(emb, ["image", "image", "text", "text"])
    graph = SemanticGraph(nodes, build_intra_edges(nodes, 1.0, 1), build_cross_edges(nodes, p, 1))
    w_g = p.arrays["mp:shared:W"]
    weights = {(s, d): w for s, d, w, _ in graph.edge_list()}
    want = []
    for i in range(4):
        nbrs = [d for (s, d) in weights if s == i]
        logits = np.array([1.5 * weights[(i, d)] for d in nbrs])
        a = np.exp(logits - logits.max())
        a /= a.sum()
        u = emb[i] + sum(ai * (emb[d] @ w_g) for ai, d in zip(a, nbrs))
        want.append(u / np.linalg.norm(u))
    assert np.allclose(message_pass(graph, p).embeddings, want, atol=1e-12, rtol=0)


def test_emit_tokens():
    p = _params(d_h=3, d_s=3)
    arrays = dict(p.arrays)
    arrays["out:shared:W"] = np.linalg.qr(np.random.default_rng(0).normal(size=(3, 3)))[0]
    h = _nodes([[0.6, 0.0, 0.8]], ["image"])
    tok = emit_tokens(h, p.with_arrays(arrays))
    assert abs(np.linalg.norm(tok) - 1.0) <= 1e-12
    arrays["out:shared:W"] = np.zeros((3, 3))
    with pytest.raises(ZeroNormError):
        emit_tokens(h, p.with_arrays(arrays))
    rng = np.random.default_rng(3)
    emb = rng.normal(size=(4, 3))
    y = emb @ p.arrays["out:shared:W"]
    assert np.allclose(emit_tokens(_nodes(emb, ["text"] * 4), p), y / np.linalg.norm(y, axis=1, keepdims=True),
                       atol=1e-12, rtol=0)


def test_forward_single_node():
    p = _params(d_h=4, d_s=3)
    x = np.random.default_rng(5).normal(size=(1, 5))
    out = adapter_forward([FeatureSlice(IMG, np.arange(1), x)], p)
    h = np.maximum(x @ p.arrays["in:image:0:W"] + p.arrays["in:image:0:b"], 0)
    y = (h / np.linalg.norm(h)) @ p.arrays["out:shared:W"]
    assert np.allclose(out.tokens, y / np.linalg.norm(y), atol=1e-12, rtol=0)


def test_forward_matches_manual_composition():
    rng = np.random.default_rng(6)
    p = _params(d_h=6, d_s=4, k_intra=3, k_cross=2)
    batch = _batch(rng, 8, 8)
    out = adapter_forward(batch, p)
    nodes = project_inputs(batch, p)
    graph = SemanticGraph(nodes, build_intra_edges(nodes, 1.0, 3), build_cross_edges(nodes, p, 2))
    tokens = emit_tokens(message_pass(graph, p), p)
    assert np.array_equal(out.tokens, tokens)
    assert sorted(out.graph.edge_list()) == sorted(graph.edge_list())
    ids, tok = out.by_modality["text"]
    assert np.array_equal(tok, tokens[8:])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_forward_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    p = _params(d_h=16, d_s=3, k_intra=2, k_cross=2)
    img, txt = _batch(rng, 6, 6)
    pi, pt = rng.permutation(6), rng.permutation(6)
    base = adapter_forward((img, txt), p).tokens
    perm = adapter_forward(
        (FeatureSlice(IMG, img.sample_ids[pi], img.features[pi]), FeatureSlice(TXT, txt.sample_ids[pt], txt.features[pt])),
        p,
    ).tokens
    assert np.allclose(perm[:6], base[:6][pi], atol=1e-12)
    assert np.allclose(perm[6:], base[6:][pt], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 4), st.integers(0, 4), st.integers(0, 2))
def test_forward_invariants(seed, k_intra, k_cross, layers):
    rng = np.random.default_rng(seed)
    p = _params(d_h=16, d_s=3, k_intra=k_intra, k_cross=k_cross, layers=layers)
    batch = _batch(rng, 5, 4)
    out = adapter_forward(batch, p)
    assert np.allclose(np.linalg.norm(out.tokens, axis=1), 1.0, atol=1e-9)
    g = out.graph
    for edges, k in ((g.intra, k_intra), (g.cross, k_cross)):
        if len(edges):
            assert np.bincount(edges.src).max() <= k
        assert np.all(edges.src != edges.dst)
        assert np.all(np.isfinite(edges.weight))
    assert np.all((g.intra.weight > 0) & (g.intra.weight <= 1))
    again = adapter_forward(batch, p)
    assert again.tokens.tobytes() == out.tokens.tobytes()


def test_frozen_topology_reuses_edges():
    rng = np.random.default_rng(7)
    p = _params(d_h=5, d_s=3, k_intra=2, k_cross=2)
    batch = _batch(rng, 4, 4)
    first = adapter_forward(batch, p)
    nudged = p.with_arrays({k: v + 0.05 for k, v in p.arrays.items()})
    frozen = adapter_forward(batch, nudged, first.topology)
    assert np.array_equal(frozen.topology.intra, first.topology.intra)
    assert np.array_equal(frozen.topology.cross, first.topology.cross)


def test_attention_rows_follow_softmax():
    rng = np.random.default_rng(9)
    p = _params(d_h=5, d_s=3, k_intra=2, k_cross=2)
    out = adapter_forward(_batch(rng, 3, 3), p)
    w, m = out.graph.dense()
    assert np.allclose(out.cache["attn"], masked_row_softmax(w, m, 1.5), atol=1e-15)
