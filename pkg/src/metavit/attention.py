"""Scaled dot-product attention and the multi-head wrapper.

Two scale-factor modes are supported. Standard scaling divides the
query-key logits by sqrt(width). Entropy-invariant scaling divides by
(ln N1 / ln N2) * sqrt(width) instead, which keeps attention entropy
stable when query and key counts differ, as they do in cross-attention
between a long image-token stream and a short meta-token stream. The two
coincide whenever N1 == N2 because the log ratio is 1, and the ratio
makes the factor independent of the logarithm base.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


class Scaling(Enum):
    STANDARD = "standard"
    ENTROPY_INVARIANT = "entropy-invariant"


@dataclass(frozen=True)
class AttentionConfig:
    """Width bookkeeping for a multi-head attention site."""

    dim: int
    head_dim: int = 32
    scaling: Scaling = Scaling.STANDARD

    def __post_init__(self):
        if self.dim <= 0 or self.head_dim <= 0:
            raise ConfigError(f"dim/head_dim must be positive, got {self.dim}/{self.head_dim}")
        if self.dim % self.head_dim:
            raise ConfigError(
                f"head_dim {self.head_dim} does not divide embedding width {self.dim}"
            )

    @property
    def num_heads(self) -> int:
        return self.dim // self.head_dim


def entropy_scale(n_query: int, n_key: int, width: int) -> float:
    """(ln N1 / ln N2) * sqrt(C); degenerate below two tokens on either side."""
    if n_query < 2 or n_key < 2:
        raise ConfigError(
            f"entropy_scale needs at least 2 tokens on each side, got {n_query}/{n_key}"
        )
    if width < 1:
        raise ConfigError(f"entropy_scale width must be >= 1, got {width}")
    return (math.log(n_query) / math.log(n_key)) * math.sqrt(width)


def scaled_dot_product_attention(
    q: Tensor, k: Tensor, v: Tensor, scale: float, return_attn: bool = False
):
    """softmax(q k^T / scale) v over the last two axes.

    Shapes: q (..., N1, C), k and v (..., N2, C). Returns the output, or
    (output, attention) when ``return_attn`` is set.
    """
    if scale <= 0:
        raise ConfigError(f"attention scale must be positive, got {scale}")
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {q.shape} != key width {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key count {k.shape} != value count {v.shape}")
    logits = T.mul(T.matmul(q, T.swap_last_axes(k)), 1.0 / scale)
    attn = T.softmax_rows(logits)
    out = T.matmul(attn, v)
    if return_attn:
        return out, attn
    return out


@dataclass
class MhaParams:
    """Projection weights for one multi-head attention call (each C x C)."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


def _split_heads(x: Tensor, heads: int, head_dim: int) -> Tensor:
    lead = x.shape[:-2]
    n = x.shape[-2]
    x = T.reshape(x, lead + (n, heads, head_dim))
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return T.permute(x, axes)  # (..., heads, N, head_dim)


def _merge_heads(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    x = T.permute(x, axes)  # (..., N, heads, head_dim)
    lead = x.shape[:-2]
    return T.reshape(x, lead[:-1] + (lead[-1], x.shape[-2] * x.shape[-1]))


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    cfg: AttentionConfig,
    params: MhaParams,
    retained: dict | None = None,
) -> Tensor:
    """Project, split into dim/head_dim heads, attend per head, reproject.

    With entropy-invariant scaling the per-head scale is
    entropy_scale(N1, N2, head_dim); standard scaling uses sqrt(head_dim).
    When ``retained`` is given, the head-averaged attention matrix is stored
    under the key ``"attn"`` as a plain array for later visualization.
    """
    for name, t in (("q", q), ("k", k), ("v", v)):
        if t.shape[-1] != cfg.dim:
            raise ConfigError(
                f"{name} width {t.shape[-1]} does not match configured dim {cfg.dim}"
            )
    n_query = q.shape[-2]
    n_key = k.shape[-2]
    heads = cfg.num_heads

    qp = _split_heads(T.linear(q, params.wq, params.bq), heads, cfg.head_dim)
    kp = _split_heads(T.linear(k, params.wk, params.bk), heads, cfg.head_dim)
    vp = _split_heads(T.linear(v, params.wv, params.bv), heads, cfg.head_dim)

    if cfg.scaling is Scaling.ENTROPY_INVARIANT:
        scale = entropy_scale(n_query, n_key, cfg.head_dim)
    else:
        scale = math.sqrt(cfg.head_dim)

    out, attn = scaled_dot_product_attention(qp, kp, vp, scale, return_attn=True)
    if retained is not None:
        retained["attn"] = attn.data.mean(axis=-3)  # average over heads
    return T.linear(_merge_heads(out), params.wo, params.bo)
