import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semfed.mathops import ZeroNormError
from semfed.skb import FormatError, align_token, build_skb, read_skb, skb_load, skb_save, write_skb


def test_identity_prototypes_unchanged():
    skb = build_skb(np.eye(3), [0, 1, 2])
    assert np.array_equal(skb.anchors, np.eye(3))


def test_rows_are_normalized():
    skb = build_skb([[3.0, 4.0], [0.0, 2.0]], [7, 9])
    assert skb.anchors[0].tolist() == [0.6, 0.8]
    assert skb.anchor(9).tolist() == [0.0, 1.0]


def test_build_errors():
    with pytest.raises(ValueError):
        build_skb(np.eye(2), [1, 1])
    with pytest.raises(ZeroNormError):
        build_skb([[1.0, 0.0], [0.0, 0.0]], [0, 1])
    with pytest.raises(ValueError):
        build_skb(np.eye(3), [0, 1])


def test_align_exact_anchor():
    skb = build_skb(np.eye(5), [0, 1, 2, 3, 4])
    al = align_token(skb.anchor(3) * 2.5, skb)
    assert al.anchor_id == 3 and al.similarity == 1.0


def test_align_bisector_goes_to_lower_index():
    skb = build_skb(np.eye(3), [10, 11, 12])
    assert align_token([0.0, 1.0, 1.0], skb).anchor_id == 11
    assert align_token([1.0, 1.0, 0.0], skb).anchor_id == 10


def test_align_matches_bruteforce():
    rng = np.random.default_rng(5)
    for _ in range(50):
        skb = build_skb(rng.normal(size=(5, 6)), [4, 2, 8, 0, 6])
        t = rng.normal(size=6)
        t /= np.linalg.norm(t)
        best, best_sim = None, -2.0
        for cid in skb.class_ids:
            a = skb.anchor(cid)
            s = float(t @ a) / (np.linalg.norm(t) * np.linalg.norm(a))
            if s > best_sim:
                best, best_sim = cid, s
        al = align_token(t, skb)
        assert al.anchor_id == best
        assert al.similarity == pytest.approx(best_sim, abs=1e-12)


def test_align_errors():
    skb = build_skb(np.eye(3), [0, 1, 2])
    with pytest.raises(ValueError):
        align_token([1.0, 0.0], skb)
    with pytest.raises(ZeroNormError):
        align_token([0.0, 0.0, 0.0], skb)


@settings(max_examples=40)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_align_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    skb = build_skb(rng.normal(size=(6, 4)), list(range(6)))
    t = rng.normal(size=4)
    a, b = align_token(t, skb), align_token(t * scale, skb)
    assert a.anchor_id == b.anchor_id
    assert a.similarity == pytest.approx(b.similarity, abs=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 2**31))
def test_every_anchor_aligns_to_itself(seed):
    rng = np.random.default_rng(seed)
    skb = build_skb(rng.normal(size=(7, 5)), list(range(100, 107)))
    for cid in skb.class_ids:
        al = align_token(skb.anchor(cid), skb)
        assert al.anchor_id == cid
        assert abs(al.similarity - 1.0) <= 1e-9


def test_roundtrip(tmp_path):
    skb = build_skb(np.random.default_rng(0).normal(size=(4, 3)), [3, 1, 2, 0], version=2)
    skb_save(skb, tmp_path / "k.skb")
    assert skb_load(tmp_path / "k.skb") == skb


def test_reads_independently_written_file():
    anchors = [[0.6, 0.8, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]
    raw = b"SKB1" + struct.pack("<III", 1, 2, 4)
    raw += b"".join(struct.pack("<d", v) for row in anchors for v in row)
    raw += struct.pack("<II", 5, 9)
    skb = read_skb(io.BytesIO(raw))
    assert skb.class_ids == (5, 9)
    assert skb.anchors.tolist() == anchors
    buf = io.BytesIO()
    write_skb(skb, buf)
    assert buf.getvalue() == raw


def test_bad_files():
    buf = io.BytesIO()
    write_skb(build_skb(np.eye(2), [0, 1]), buf)
    raw = buf.getvalue()
    with pytest.raises(FormatError):
        read_skb(io.BytesIO(b"XXXX" + raw[4:]))
    with pytest.raises(FormatError):
        read_skb(io.BytesIO(raw[:-3]))
    with pytest.raises(FormatError):
        read_skb(io.BytesIO(raw[:10]))
