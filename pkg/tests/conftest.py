import numpy as np
import pytest

from metavit.blocks import ParamStore


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop matrix product used as an independent oracle."""
    p, q = a.shape
    q2, r = b.shape
    assert q == q2
    out = np.zeros((p, r), dtype=np.float64)
    for i in range(p):
        for j in range(r):
            acc = 0.0
            for k in range(q):
                acc += float(a[i, k]) * float(b[k, j])
            out[i, j] = acc
    return out


def naive_conv2d(x, w, b, stride=1, padding=0, groups=1) -> np.ndarray:
    """Direct sliding-window convolution oracle (batched, grouped)."""
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    bsz, cin, h, wd = x.shape
    cout, cin_g, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((bsz, cout, ho, wo), dtype=np.float64)
    cout_g = cout // groups
    for bi in range(bsz):
        for o in range(cout):
            g = o // cout_g
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, g * cin_g:(g + 1) * cin_g,
                               i * stride:i * stride + k, j * stride:j * stride + k]
                    out[bi, o, i, j] = (patch * w[o]).sum() + b[o]
    return out[0] if squeeze else out


def naive_attention(q, k, v, scale) -> np.ndarray:
    """Double-loop scaled dot-product attention oracle."""
    n1, c = q.shape
    n2 = k.shape[0]
    out = np.zeros((n1, v.shape[1]), dtype=np.float64)
    for i in range(n1):
        logits = np.array([np.dot(q[i], k[j]) / scale for j in range(n2)])
        logits -= logits.max()
        weights = np.exp(logits)
        weights /= weights.sum()
        for j in range(n2):
            out[i] += weights[j] * v[j]
    return out


def zero_block_params(store: ParamStore) -> None:
    """Zero every parameter of a block so residual paths become identities."""
    for p in store.params.values():
        p.data = np.zeros_like(p.data)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
