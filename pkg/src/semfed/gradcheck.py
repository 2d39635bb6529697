"""Finite-difference check of the analytic adapter gradients.

The instance generator rejects draws that sit close to a non-smooth point
(an inactive/active hinge boundary, a near-tie for the hardest negative, a
ReLU pre-activation near zero), since central differences straddling such a
point measure a different one-sided derivative.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import AdapterHyper, EncoderSignature, FeatureSlice, adapter_forward, init_params
from .mathops import finite_diff_grad
from .skb import build_skb
from .trainer import PairBatch, TrainConfig, backward, total_loss

MAX_PARAMS = 20_000
TOLERANCE = 1e-4
KINK_GAP = 1e-4
REL_FLOOR = 1e-6  # denominators below this count as absolute error


@dataclass(frozen=True)
class GradCheckSizes:
    d_h: int = 8
    d_s: int = 4
    n: int = 6
    d_img: int = 10
    d_txt: int = 7
    n_anchors: int = 3
    k_intra: int = 2
    k_cross: int = 2
    layers: int = 1


@dataclass
class GradCheckReport:
    seed: int
    n_params: int
    per_block: dict[str, float]
    attempts: int

    @property
    def max_rel_error(self) -> float:
        return max(self.per_block.values())

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= TOLERANCE

    def lines(self) -> list[str]:
        out = [f"{name:<24s} {err:.3e}" for name, err in sorted(self.per_block.items())]
        out.append(f"max relative error {self.max_rel_error:.3e} over {self.n_params} params "
                   f"({'ok' if self.ok else 'FAIL'}, tolerance {TOLERANCE:g})")
        return out


def _near_kink(batch, params, skb, labels, config) -> bool:
    out = adapter_forward(batch.slices, params)
    if np.min(np.abs(out.graph.nodes.preact)) < KINK_GAP:
        return True
    a, b = (out.tokens[sl] for sl in out.slices)
    an = a / np.linalg.norm(a, axis=1, keepdims=True)
    bn = b / np.linalg.norm(b, axis=1, keepdims=True)
    sim = an @ bn.T
    pos = np.diag(sim).copy()
    np.fill_diagonal(sim, -np.inf)
    for m in (sim, sim.T):
        top2 = np.sort(m, axis=1)[:, -2:]
        if np.min(top2[:, 1] - top2[:, 0]) < KINK_GAP:
            return True
        if np.min(np.abs(config.margin - pos + top2[:, 1])) < KINK_GAP:
            return True
    return False


def make_instance(seed: int, sizes: GradCheckSizes = GradCheckSizes(), max_attempts: int = 100):
    """Seeded small instance away from non-smooth points; returns (batch, params, skb, labels, config, attempts)."""
    config = TrainConfig()
    hyper = AdapterHyper(d_h=sizes.d_h, d_s=sizes.d_s, k_intra=sizes.k_intra, k_cross=sizes.k_cross,
                         layers=sizes.layers)
    sig_i = EncoderSignature("image", 0, sizes.d_img)
    sig_t = EncoderSignature("text", 1, sizes.d_txt)
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, attempt])
        params = init_params((sig_i, sig_t), hyper, int(rng.integers(2**31)))
        ids = np.arange(sizes.n)
        batch = PairBatch(
            (FeatureSlice(sig_i, ids, rng.normal(size=(sizes.n, sizes.d_img))),
             FeatureSlice(sig_t, ids, rng.normal(size=(sizes.n, sizes.d_txt)))),
            ids,
        )
        skb = build_skb(rng.normal(size=(sizes.n_anchors, sizes.d_s)), list(range(sizes.n_anchors)))
        labels = rng.integers(0, sizes.n_anchors, sizes.n)
        if not _near_kink(batch, params, skb, labels, config):
            return batch, params, skb, labels, config, attempt + 1
    raise RuntimeError(f"no kink-free instance found in {max_attempts} attempts")


def grad_check(seed: int = 0, sizes: GradCheckSizes = GradCheckSizes(), perturb: float = 0.0) -> GradCheckReport:
    """Max relative error per block between ``backward`` and central differences.

    ``perturb`` is added to one analytic gradient entry; it exists so tests
    can confirm the check actually fails on a wrong gradient.
    """
    batch, params, skb, labels, config, attempts = make_instance(seed, sizes)
    n_params = params.vectorize().size
    if n_params > MAX_PARAMS:
        raise ValueError(f"instance has {n_params} parameters; grad_check is limited to {MAX_PARAMS}")
    grads, _, topo = backward(batch, params, skb, labels, None, config)
    if perturb:
        first = params.names()[0]
        grads[first] = grads[first].copy()
        grads[first].flat[0] += perturb
    per_block = {}
    for name in params.names():
        def f(x, name=name):
            arrays = dict(params.arrays)
            arrays[name] = x
            return total_loss(batch, params.with_arrays(arrays), skb, labels, None, config, topo).total

        num = finite_diff_grad(f, params.arrays[name])
        ana = grads[name]
        denom = np.maximum(np.maximum(np.abs(num), np.abs(ana)), REL_FLOOR)
        per_block[name] = float(np.max(np.abs(num - ana) / denom))
    return GradCheckReport(seed, n_params, per_block, attempts)
