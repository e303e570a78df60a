"""Variant registry, model assembly, and forward passes.

The architecture is hierarchical with four spatial resolutions. Block
group S0 (cross-attention, meta-update only) and S1 (dual cross-attention)
both run on the stride-4 grid at width D1; S2 (dual cross-attention) runs
at stride 8 / D2 after a downsample; S3 and S4 (standard attention) run at
stride 16 / D3 and stride 32 / D4. Meta tokens keep their count at every
stage and track the image width through a linear projection inside each
downsample transition.

Classification pools the image and meta streams separately (each behind
its own final norm), adds the pooled vectors, and applies one linear head.
Dense-prediction consumers take the four image-token grids instead.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .blocks import (
    CABlock,
    DCABlock,
    Downsample,
    ImageStem,
    LayerNormParams,
    MetaStem,
    ParamStore,
    SABlock,
    TokenGrid,
)
from .errors import ConfigError, ContractError, InputError
from .tensor import Tensor


@dataclass(frozen=True)
class VariantSpec:
    """Architecture description: block counts S0..S4 and stage widths D1..D4."""

    name: str
    blocks: tuple[int, int, int, int, int]
    dims: tuple[int, int, int, int]
    meta_len: int = 16
    meta_dim0: int = 64
    head_dim: int = 32
    expansion: int = 4
    cpe_kernel: int = 3
    num_classes: int = 1000
    use_ca_stage: bool = True
    use_meta_stem: bool = True
    use_meta_pooling: bool = True
    dca_sequential: bool = False

    def __post_init__(self):
        if len(self.blocks) != 5 or len(self.dims) != 4:
            raise ConfigError("need 5 block counts and 4 stage widths")
        if any(b < 0 for b in self.blocks):
            raise ConfigError(f"block counts must be non-negative: {self.blocks}")
        if any(d <= 0 or d % self.head_dim for d in self.dims):
            raise ConfigError(
                f"stage widths {self.dims} must be positive multiples of "
                f"head_dim {self.head_dim}"
            )
        if self.meta_len < 2:
            raise ConfigError(f"meta_len must be >= 2, got {self.meta_len}")
        if self.expansion < 1 or self.meta_dim0 < 1 or self.num_classes < 1:
            raise ConfigError("expansion, meta_dim0, num_classes must be positive")


_REGISTRY: dict[str, VariantSpec] = {
    "tiny": VariantSpec("tiny", (1, 2, 2, 8, 2), (64, 128, 192, 320)),
    "small": VariantSpec("small", (1, 2, 2, 6, 2), (96, 192, 320, 384)),
    "base": VariantSpec("base", (2, 4, 4, 18, 4), (96, 192, 384, 512)),
    # desk-scale variant for fast tests and the toy trainer; not a published size
    "tiny-narrow": VariantSpec("tiny-narrow", (1, 1, 1, 2, 1), (32, 64, 96, 128)),
}


def variant_names() -> list[str]:
    return list(_REGISTRY)


def variant(name: str, **overrides) -> VariantSpec:
    """Fetch a registry row, optionally overriding fields (meta_len, toggles...)."""
    try:
        spec = _REGISTRY[name]
    except KeyError:
        raise ConfigError(
            f"unknown variant {name!r}; known: {', '.join(_REGISTRY)}"
        ) from None
    return replace(spec, **overrides) if overrides else spec


class Model:
    """A built network: parameter store plus the stage pipeline."""

    def __init__(self, spec: VariantSpec, seed: int, dtype=np.float32):
        self.spec = spec
        self.seed = seed
        store = ParamStore(seed, dtype=dtype)
        self.store = store
        d1, d2, d3, d4 = spec.dims

        self.stem = ImageStem(store, "stem", d1)
        meta_width0 = spec.meta_dim0 if spec.use_meta_stem else d1
        self.meta_init = store.weight("meta.init", (spec.meta_len, meta_width0))
        self.meta_stem = (
            MetaStem(store, "meta_stem", spec.meta_dim0, d1) if spec.use_meta_stem else None
        )

        def make_group(idx: int, count: int, dim: int, kind: str) -> list:
            group = []
            for i in range(count):
                name = f"s{idx}.b{i}"
                if kind == "ca":
                    group.append(CABlock(store, name, dim, spec.head_dim, spec.expansion))
                elif kind == "dca":
                    group.append(
                        DCABlock(
                            store,
                            name,
                            dim,
                            spec.head_dim,
                            spec.expansion,
                            sequential=spec.dca_sequential,
                            cpe_kernel=spec.cpe_kernel,
                        )
                    )
                else:
                    group.append(
                        SABlock(
                            store, name, dim, spec.head_dim, spec.expansion,
                            cpe_kernel=spec.cpe_kernel,
                        )
                    )
            return group

        s0 = spec.blocks[0] if spec.use_ca_stage else 0
        self.groups = [
            make_group(0, s0, d1, "ca"),
            make_group(1, spec.blocks[1], d1, "dca"),
            make_group(2, spec.blocks[2], d2, "dca"),
            make_group(3, spec.blocks[3], d3, "sa"),
            make_group(4, spec.blocks[4], d4, "sa"),
        ]
        self.downsamples = [
            Downsample(store, "ds1", d1, d2),
            Downsample(store, "ds2", d2, d3),
            Downsample(store, "ds3", d3, d4),
        ]
        self.meta_projs = []
        for i, (din, dout) in enumerate(((d1, d2), (d2, d3), (d3, d4)), start=1):
            w = store.weight(f"ds{i}.meta_proj.w", (din, dout))
            b = store.zeros(f"ds{i}.meta_proj.b", (dout,))
            self.meta_projs.append((w, b))

        self.head_ln_img = LayerNormParams(store, "head.ln_img", d4)
        self.head_ln_meta = (
            LayerNormParams(store, "head.ln_meta", d4) if spec.use_meta_pooling else None
        )
        self.head_w = store.weight("head.fc.w", (d4, spec.num_classes))
        self.head_b = store.zeros("head.fc.b", (spec.num_classes,))
        self._retained_maps: np.ndarray | None = None
        self._retained_extent: tuple[int, int] | None = None

    # -- bookkeeping ------------------------------------------------------

    @property
    def dtype(self):
        return self.store.dtype

    def parameters(self) -> dict[str, Tensor]:
        return self.store.params

    def param_count(self) -> int:
        return self.store.total_size()

    def zero_grads(self) -> None:
        T.zero_grads(self.parameters().values())

    # -- forward ----------------------------------------------------------

    def _check_input(self, img: Tensor) -> Tensor:
        if img.ndim not in (3, 4) or img.shape[-3] != 3:
            raise InputError(f"expected (3,H,W) or (B,3,H,W) input, got {img.shape}")
        h, w = img.shape[-2], img.shape[-1]
        if h % 32 or w % 32:
            raise InputError(f"input extents must be divisible by 32, got {h}x{w}")
        if h < 64 or w < 64:
            raise InputError(
                f"input extents must be at least 64 so the last-stage grid "
                f"stays 2x2 or larger, got {h}x{w}"
            )
        if img.dtype != self.dtype:
            img = Tensor(img.data.astype(self.dtype))
        return img

    def _forward(self, img: Tensor, retain_attention: bool = False):
        img = self._check_input(img)
        batched = img.ndim == 4
        grid = self.stem(img)

        meta = self.meta_init
        if batched:
            meta = T.broadcast_to_batch(meta, img.shape[0])
        if self.meta_stem is not None:
            meta = self.meta_stem(meta)

        self._retained_maps = None
        self._retained_extent = None
        features: list[TokenGrid] = []
        for gi, group in enumerate(self.groups):
            last_dca = gi == 2 and retain_attention
            for bi, blk in enumerate(group):
                if isinstance(blk, DCABlock):
                    retain = last_dca and bi == len(group) - 1
                    grid, meta = blk(grid, meta, retain_attention=retain)
                    if retain:
                        self._retained_maps = blk.retained.get("attn")
                        self._retained_extent = (grid.height, grid.width)
                else:
                    grid, meta = blk(grid, meta)
            if gi >= 1:
                features.append(grid)
                if gi < 4:
                    grid = self.downsamples[gi - 1](grid)
                    w, b = self.meta_projs[gi - 1]
                    meta = T.linear(meta, w, b)
        if retain_attention and self._retained_maps is None:
            raise ContractError(
                "attention retention requested but the model has no dual "
                "cross-attention block in the stride-8 group"
            )
        return features, grid, meta

    def forward_features(self, img: Tensor) -> list[TokenGrid]:
        """The stride-4/8/16/32 image-token grids (meta tokens excluded)."""
        features, _, _ = self._forward(img)
        return features

    def forward_classify(self, img: Tensor, retain_attention: bool = False) -> Tensor:
        features, grid, meta = self._forward(img, retain_attention=retain_attention)
        pooled = T.global_avg_pool(self.head_ln_img(grid.tokens))
        if self.spec.use_meta_pooling:
            pooled = T.add(pooled, T.global_avg_pool(self.head_ln_meta(meta)))
        return T.linear(pooled, self.head_w, self.head_b)

    # -- attention maps ---------------------------------------------------

    def attention_maps(self) -> np.ndarray:
        """Per-meta-token attention over the stride-8 grid from the last forward.

        Shape (M, H/8, W/8); every map sums to one. Requires the previous
        forward pass to have run with attention retention enabled.
        """
        if self._retained_maps is None:
            raise ContractError(
                "no retained attention; run forward_classify(img, retain_attention=True)"
            )
        attn = self._retained_maps
        if attn.ndim == 3:  # batched forward: first image
            attn = attn[0]
        h, w = self._retained_extent
        attn = attn / attn.sum(axis=-1, keepdims=True)
        return attn.reshape(self.spec.meta_len, h, w)


def build_variant(spec: VariantSpec | str, seed: int, dtype=np.float32) -> Model:
    """Deterministically initialize a model from an architecture description."""
    if isinstance(spec, str):
        spec = variant(spec)
    return Model(spec, seed, dtype=dtype)


def export_attention_maps(model: Model, img: Tensor) -> np.ndarray:
    """Run a retained forward pass on one image and return its (M, h, w) maps."""
    if img.ndim != 3:
        raise InputError(f"attention export takes a single (3,H,W) image, got {img.shape}")
    with T.no_grad():
        model.forward_classify(img, retain_attention=True)
    return model.attention_maps()
