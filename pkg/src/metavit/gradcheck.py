"""Finite-difference verification of the reverse-mode gradients.

Every differentiable kernel and block is checked in float64 against
central differences with step 1e-5. The reported number per case is

    max |analytic - numeric| / max(1, max |analytic|, max |numeric|)

over the sampled coordinates, i.e. the worst deviation normalized by the
gradient scale (with a floor of one so exactly-zero gradients compare by
absolute error).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import (
    AttentionConfig,
    MhaParams,
    Scaling,
    multi_head_attention,
    scaled_dot_product_attention,
)
from .blocks import CABlock, DCABlock, ParamStore, SABlock, TokenGrid
from .model import Model, variant
from .tensor import Tensor

FD_STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckCase:
    name: str
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def fd_check(loss_fn, leaves: list[Tensor], sample: int | None = None,
             seed: int = 0, h: float = FD_STEP) -> float:
    """Compare backward() gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must rebuild its graph from the current leaf data on every
    call. When ``sample`` is given, at most that many coordinates are probed
    per leaf (uniformly chosen); otherwise all coordinates are probed.
    """
    rng = np.random.default_rng(seed)
    T.zero_grads(leaves)
    loss = loss_fn()
    T.backward(loss)
    analytic = [np.array(p.grad, copy=True) if p.grad is not None
                else np.zeros_like(p.data) for p in leaves]

    worst_abs = 0.0
    scale = max(1.0, max((np.abs(a).max() if a.size else 0.0) for a in analytic))
    for leaf, grads in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        count = flat.size if sample is None else min(sample, flat.size)
        coords = (np.arange(flat.size) if sample is None
                  else rng.choice(flat.size, size=count, replace=False))
        for idx in coords:
            original = flat[idx]
            flat[idx] = original + h
            above = loss_fn().item()
            flat[idx] = original - h
            below = loss_fn().item()
            flat[idx] = original
            numeric = (above - below) / (2.0 * h)
            scale = max(scale, abs(numeric))
            worst_abs = max(worst_abs, abs(grads.reshape(-1)[idx] - numeric))
    return worst_abs / scale


def _weighted_sum(*outputs, seed: int = 7) -> Tensor:
    rng = np.random.default_rng(seed)
    total = None
    for out in outputs:
        w = Tensor(rng.standard_normal(out.shape))
        term = T.sum_all(T.mul(out, w))
        total = term if total is None else T.add(total, term)
    return total


def _kernel_cases(seed: int) -> list[CheckCase]:
    rng = np.random.default_rng(seed)
    cases = []

    def leaf(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    a, b = leaf(4, 5), leaf(5, 3)
    cases.append(CheckCase("matmul", fd_check(lambda: _weighted_sum(T.matmul(a, b)), [a, b])))

    ab, bb = leaf(2, 4, 5), leaf(2, 5, 3)
    cases.append(CheckCase(
        "matmul-batched", fd_check(lambda: _weighted_sum(T.matmul(ab, bb)), [ab, bb])
    ))

    x = leaf(4, 6)
    cases.append(CheckCase("softmax_rows", fd_check(lambda: _weighted_sum(T.softmax_rows(x)), [x])))

    xn, g, bta = leaf(3, 8), leaf(8), leaf(8)
    cases.append(CheckCase(
        "layer_norm", fd_check(lambda: _weighted_sum(T.layer_norm(xn, g, bta)), [xn, g, bta])
    ))

    xg = leaf(5, 7)
    cases.append(CheckCase("gelu", fd_check(lambda: _weighted_sum(T.gelu(xg)), [xg])))

    xc, wc, bc = leaf(2, 3, 6, 6), leaf(4, 3, 3, 3), leaf(4)
    cases.append(CheckCase(
        "conv2d",
        fd_check(lambda: _weighted_sum(T.conv2d(xc, wc, bc, stride=2, padding=1)), [xc, wc, bc]),
    ))

    xd, wd, bd = leaf(2, 4, 5, 5), leaf(4, 1, 3, 3), leaf(4)
    cases.append(CheckCase(
        "conv2d-depthwise",
        fd_check(
            lambda: _weighted_sum(T.conv2d(xd, wd, bd, stride=1, padding=1, groups=4)),
            [xd, wd, bd],
        ),
    ))

    xp = leaf(6, 5)
    cases.append(CheckCase(
        "global_avg_pool", fd_check(lambda: _weighted_sum(T.global_avg_pool(xp)), [xp])
    ))

    logits = leaf(4, 5)
    labels = rng.integers(0, 5, size=4)
    cases.append(CheckCase(
        "cross_entropy", fd_check(lambda: T.cross_entropy(logits, labels), [logits])
    ))

    q, k, v = leaf(4, 8), leaf(6, 8), leaf(6, 8)
    cases.append(CheckCase(
        "sdpa",
        fd_check(
            lambda: _weighted_sum(scaled_dot_product_attention(q, k, v, scale=8 ** 0.5)),
            [q, k, v],
        ),
    ))
    return cases


def _mha_case(seed: int) -> CheckCase:
    rng = np.random.default_rng(seed)
    dim, head_dim = 8, 4
    cfg = AttentionConfig(dim, head_dim, Scaling.ENTROPY_INVARIANT)

    def leaf(*shape):
        return Tensor(rng.standard_normal(shape) * 0.5, requires_grad=True)

    params = MhaParams(*(leaf(dim, dim) if i % 2 == 0 else leaf(dim) for i in range(8)))
    q, k, v = leaf(5, dim), leaf(3, dim), leaf(3, dim)
    leaves = [q, k, v, params.wq, params.bq, params.wk, params.bk,
              params.wv, params.bv, params.wo, params.bo]
    err = fd_check(
        lambda: _weighted_sum(multi_head_attention(q, k, v, cfg, params)), leaves
    )
    return CheckCase("multi_head_attention", err)


def _block_case(kind: str, seed: int, sequential: bool = False) -> CheckCase:
    rng = np.random.default_rng(seed)
    dim, head_dim, expansion = 8, 4, 2
    n_side, m = 4, 4  # 16 image tokens, 4 meta tokens
    store = ParamStore(seed, dtype=np.float64)
    if kind == "ca":
        block = CABlock(store, "blk", dim, head_dim, expansion)
    elif kind == "dca":
        block = DCABlock(store, "blk", dim, head_dim, expansion, sequential=sequential)
    else:
        block = SABlock(store, "blk", dim, head_dim, expansion)
    # keep weights O(1) so gradient scales are meaningful for the check
    for name, p in store.params.items():
        if p.data.ndim >= 2:
            p.data = rng.standard_normal(p.shape) * 0.3

    tokens = Tensor(rng.standard_normal((n_side * n_side, dim)), requires_grad=True)
    meta = Tensor(rng.standard_normal((m, dim)), requires_grad=True)
    leaves = [tokens, meta] + list(store.params.values())

    def loss_fn():
        grid_out, meta_out = block(TokenGrid(tokens, n_side, n_side), meta)
        return _weighted_sum(grid_out.tokens, meta_out)

    label = kind if not sequential else "dca-sequential"
    return CheckCase(f"block-{label}", fd_check(loss_fn, leaves, sample=6, seed=seed))


def _model_case(seed: int, sample_params: int = 24) -> CheckCase:
    spec = variant("tiny-narrow", num_classes=3)
    model = Model(spec, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    img = Tensor(rng.standard_normal((3, 64, 64)))
    labels = np.array([rng.integers(0, 3)])

    def loss_fn():
        return T.cross_entropy(model.forward_classify(img), labels)

    names = sorted(model.parameters())
    picked = rng.choice(len(names), size=min(sample_params, len(names)), replace=False)
    leaves = [model.parameters()[names[i]] for i in picked]
    return CheckCase("model-tiny-narrow", fd_check(loss_fn, leaves, sample=2, seed=seed))


def run_suite(seed: int = 0, include_model: bool = True) -> list[CheckCase]:
    """The full gradient-check battery; every case must stay below 1e-4."""
    cases = _kernel_cases(seed)
    cases.append(_mha_case(seed + 1))
    cases.append(_block_case("ca", seed + 2))
    cases.append(_block_case("dca", seed + 3))
    cases.append(_block_case("dca", seed + 4, sequential=True))
    cases.append(_block_case("sa", seed + 5))
    if include_model:
        cases.append(_model_case(seed + 6))
    return cases
