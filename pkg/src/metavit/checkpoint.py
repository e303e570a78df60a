"""Named-tensor binary checkpoints.

Wire format, all integers little-endian:

    magic   4 bytes  "LMVT"
    version u32      currently 1
    count   u32      number of tensor records
    record  repeated:
        name_len u16
        name     UTF-8 bytes
        dtype    u8   (0 = float32)
        ndim     u8
        dims     u32 * ndim
        payload  little-endian scalars, row-major

Model parameters are stored under their registry names. The architecture
description rides along as reserved ``config/*`` tensors (small float32
arrays of exactly representable integers) so a checkpoint alone suffices
to rebuild the model. Round trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError
from .model import Model, VariantSpec, variant_names, _REGISTRY

MAGIC = b"LMVT"
VERSION = 1
DTYPE_F32 = 0

_CONFIG_PREFIX = "config/"


def write_record(f, name: str, arr: np.ndarray) -> None:
    """Append one tensor record in the checkpoint wire layout."""
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError(f"tensor name too long: {len(raw)} bytes")
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)
    f.write(struct.pack("<BB", DTYPE_F32, arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(arr.astype("<f4", copy=False).tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(
            f"truncated file while reading {what}", offset=f.tell() - len(buf)
        )
    return buf


def read_record(f) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
    name = _read_exact(f, name_len, "tensor name").decode("utf-8")
    start = f.tell()
    dtype_code, ndim = struct.unpack("<BB", _read_exact(f, 2, "dtype/ndim"))
    if dtype_code != DTYPE_F32:
        raise FormatError(f"unknown dtype code {dtype_code}", offset=start)
    dims = struct.unpack(
        "<" + "I" * ndim, _read_exact(f, 4 * ndim, "dims")
    )
    count = 1
    for d in dims:
        count *= d
    payload = _read_exact(f, 4 * count, f"payload of {name!r}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return name, arr


def save_tensors(path: str, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            write_record(f, name, arr)


def load_tensors(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != VERSION:
            raise FormatError(f"unsupported version {version}", offset=4)
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            name, arr = read_record(f)
            if name in out:
                raise FormatError(f"duplicate tensor {name!r}", offset=f.tell())
            out[name] = arr
        trailing = f.read(1)
        if trailing:
            raise FormatError("trailing bytes after final record", offset=f.tell() - 1)
    return out


def _config_tensors(spec: VariantSpec) -> dict[str, np.ndarray]:
    return {
        _CONFIG_PREFIX + "blocks": np.array(spec.blocks, dtype=np.float32),
        _CONFIG_PREFIX + "dims": np.array(spec.dims, dtype=np.float32),
        _CONFIG_PREFIX + "scalars": np.array(
            [spec.meta_len, spec.meta_dim0, spec.head_dim, spec.expansion,
             spec.cpe_kernel, spec.num_classes],
            dtype=np.float32,
        ),
        _CONFIG_PREFIX + "toggles": np.array(
            [spec.use_ca_stage, spec.use_meta_stem, spec.use_meta_pooling,
             spec.dca_sequential],
            dtype=np.float32,
        ),
    }


def _spec_from_config(cfg: dict[str, np.ndarray]) -> VariantSpec:
    try:
        blocks = tuple(int(x) for x in cfg[_CONFIG_PREFIX + "blocks"])
        dims = tuple(int(x) for x in cfg[_CONFIG_PREFIX + "dims"])
        scalars = [int(x) for x in cfg[_CONFIG_PREFIX + "scalars"]]
        toggles = [bool(x) for x in cfg[_CONFIG_PREFIX + "toggles"]]
    except KeyError as missing:
        raise FormatError(f"checkpoint is missing {missing.args[0]!r}") from None
    name = "custom"
    for known in variant_names():
        row = _REGISTRY[known]
        if row.blocks == blocks and row.dims == dims:
            name = known
            break
    return VariantSpec(
        name,
        blocks,
        dims,
        meta_len=scalars[0],
        meta_dim0=scalars[1],
        head_dim=scalars[2],
        expansion=scalars[3],
        cpe_kernel=scalars[4],
        num_classes=scalars[5],
        use_ca_stage=toggles[0],
        use_meta_stem=toggles[1],
        use_meta_pooling=toggles[2],
        dca_sequential=toggles[3],
    )


def save_checkpoint(model: Model, path: str) -> None:
    tensors = _config_tensors(model.spec)
    for name, p in model.parameters().items():
        tensors[name] = p.data
    save_tensors(path, tensors)


def load_checkpoint(path: str) -> Model:
    table = load_tensors(path)
    cfg = {k: v for k, v in table.items() if k.startswith(_CONFIG_PREFIX)}
    weights = {k: v for k, v in table.items() if not k.startswith(_CONFIG_PREFIX)}
    spec = _spec_from_config(cfg)
    model = Model(spec, seed=0)
    params = model.parameters()
    missing = sorted(set(params) - set(weights))
    extra = sorted(set(weights) - set(params))
    if missing or extra:
        raise FormatError(
            f"parameter table mismatch: missing {missing[:3]}, unexpected {extra[:3]}"
        )
    for name, p in params.items():
        arr = weights[name]
        if arr.shape != p.shape:
            raise FormatError(
                f"tensor {name!r} has shape {arr.shape}, model expects {p.shape}"
            )
        p.data = np.ascontiguousarray(arr, dtype=np.float32)
    return model
