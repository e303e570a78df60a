"""Dense tensor type with reverse-mode automatic differentiation.

Tensors wrap contiguous row-major numpy buffers (float32 by default,
float64 for gradient checking). Every kernel is a pure function of its
inputs: it allocates a fresh output and, when gradients are enabled and
required, records a vector-Jacobian-product closure linking the output
to its parents. ``backward`` replays those records in reverse execution
order and accumulates gradients into ``Tensor.grad``.

There is no global mutable state; the autograd on/off switch and the
optional multiply-accumulate meters are thread-local.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ContractError, DimensionError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the context (forward-only mode)."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class MacCounter:
    """Counts multiply-accumulate operations executed by matmul/conv kernels.

    Elementwise arithmetic, normalizations, and activations are not counted;
    the meter reflects the same convention as the analytic ``macs`` column
    of complexity reports plus the attention matrix products.
    """

    def __init__(self):
        self.total = 0

    def __enter__(self):
        meters = getattr(_local, "meters", None)
        if meters is None:
            meters = []
            _local.meters = meters
        meters.append(self)
        return self

    def __exit__(self, *exc):
        _local.meters.remove(self)
        return False


def _count_macs(n: int) -> None:
    for meter in getattr(_local, "meters", ()):
        meter.total += int(n)


class Tensor:
    """Dense row-major numeric array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self.op})"

    # operator sugar used throughout blocks and tests
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents, vjp, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out.op = op
    else:
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Graph:
    """Ordered record of the operations reachable from a root tensor.

    The node list is a topological linearization consistent with forward
    execution order; the reverse pass walks it once, back to front.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    ``loss`` must be a scalar. Visits each recorded operation exactly once,
    in reverse execution order.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph.trace(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g.astype(parent.dtype, copy=True)
            else:
                parent.grad += g


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise and shape kernels


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _node(out, (a, b), vjp, "sub")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), vjp, "mul")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _node(out, (a,), vjp, "reshape")


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def vjp(g):
        return (g.transpose(inverse),)

    return _node(out, (a,), vjp, "permute")


def swap_last_axes(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)

    def vjp(g):
        return (np.broadcast_to(g, a.shape),)

    return _node(out, (a,), vjp, "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = np.asarray(a.data.mean(), dtype=a.dtype)

    def vjp(g):
        return (np.broadcast_to(g / n, a.shape),)

    return _node(out, (a,), vjp, "mean")


def broadcast_to_batch(a: Tensor, batch: int) -> Tensor:
    """Tile a parameter tensor along a new leading batch axis."""
    out = np.broadcast_to(a.data, (batch,) + a.shape).copy()

    def vjp(g):
        return (g.sum(axis=0),)

    return _node(out, (a,), vjp, "broadcast")


# ---------------------------------------------------------------------------
# core numeric kernels


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b`` with optional equal leading batch dims.

    2-D operands are classic matrices; higher-rank operands are stacks of
    matrices whose leading dims must match (or be absent on one side, as for
    shared weight matrices). Backward: dA = dC.B^T, dB = A^T.dC, with batch
    reduction when an operand was unbatched.
    """
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape}"
        )
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(
            f"matmul batch dimensions disagree: {a.shape} @ {b.shape}"
        )
    out = a.data @ b.data
    batch = int(np.prod(out.shape[:-2], dtype=np.int64)) if out.ndim > 2 else 1
    _count_macs(batch * a.shape[-2] * a.shape[-1] * b.shape[-1])

    def vjp(g):
        da = g @ np.swapaxes(b.data, -1, -2)
        db = np.swapaxes(a.data, -1, -2) @ g
        if da.shape != a.shape:
            da = da.sum(axis=tuple(range(da.ndim - a.ndim)))
        if db.shape != b.shape:
            db = db.sum(axis=tuple(range(db.ndim - b.ndim)))
        return da, db

    return _node(out, (a, b), vjp, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ w + b`` for x of any rank."""
    if x.ndim == 2:
        y = matmul(x, w)
    else:
        lead = x.shape[:-1]
        flat = reshape(x, (-1, x.shape[-1]))
        y = reshape(matmul(flat, w), lead + (w.shape[-1],))
    if b is not None:
        y = add(y, b)
    return y


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, stabilized by max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _node(out, (x,), vjp, "softmax_rows")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if x.shape[-1] != gamma.shape[-1] or gamma.shape != beta.shape:
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match "
            f"feature width {x.shape[-1]}"
        )
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = gamma.data * xhat + beta.data

    def vjp(g):
        ggam = g * gamma.data
        dgamma = _unbroadcast(g * xhat, gamma.shape)
        dbeta = _unbroadcast(g, beta.shape)
        m1 = ggam.mean(axis=-1, keepdims=True)
        m2 = (ggam * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (ggam - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta), vjp, "layer_norm")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * phi

    def vjp(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (phi + x.data * pdf),)

    return _node(out, (x,), vjp, "gelu")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the token axis: (..., N, D) -> (..., D)."""
    n = x.shape[-2]
    out = x.data.mean(axis=-2)

    def vjp(g):
        return (np.repeat(np.expand_dims(g / n, -2), n, axis=-2),)

    return _node(out, (x,), vjp, "global_avg_pool")


# ---------------------------------------------------------------------------
# convolution


def _conv_out_extent(extent: int, k: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - k) // stride + 1


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-D cross-correlation.

    ``x`` is (Cin, H, W) or (B, Cin, H, W); ``w`` is (Cout, Cin/groups, k, k).
    ``groups == Cin == Cout`` is the depthwise case and takes a fast path of
    k*k shifted multiply-adds instead of im2col.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input/weight, got {x.shape}, {w.shape}")
    bsz, cin, h, wd_ = xd.shape
    cout, cin_g, kh, kw = w.shape
    if kh != kw:
        raise DimensionError(f"conv2d kernels must be square, got {w.shape}")
    k = kh
    if cin % groups or cout % groups:
        raise DimensionError(
            f"groups={groups} must divide channels Cin={cin}, Cout={cout}"
        )
    if cin_g != cin // groups:
        raise DimensionError(
            f"weight shape {w.shape} inconsistent with Cin={cin}, groups={groups}"
        )
    if h + 2 * padding < k or wd_ + 2 * padding < k:
        raise DimensionError(
            f"kernel {k}x{k} larger than padded input {h + 2 * padding}x{wd_ + 2 * padding}"
        )
    ho = _conv_out_extent(h, k, stride, padding)
    wo = _conv_out_extent(wd_, k, stride, padding)

    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd

    depthwise = groups == cin == cout
    if depthwise:
        out = np.zeros((bsz, cout, ho, wo), dtype=xd.dtype)
        wdw = w.data[:, 0]  # (C, k, k)
        for ki in range(k):
            for kj in range(k):
                sl = xp[:, :, ki : ki + ho * stride : stride, kj : kj + wo * stride : stride]
                out += wdw[:, ki, kj][None, :, None, None] * sl
        _count_macs(bsz * cout * ho * wo * k * k)
    else:
        # im2col: gather (B, Hout, Wout, Cin, k, k) windows, one gemm per group
        s0, s1, s2, s3 = xp.strides
        win = np.lib.stride_tricks.as_strided(
            xp,
            (bsz, ho, wo, cin, k, k),
            (s0, stride * s2, stride * s3, s1, s2, s3),
        )
        win = win.reshape(bsz, ho, wo, groups, cin_g * k * k)
        wmat = w.data.reshape(groups, cout // groups, cin_g * k * k)
        out = np.einsum("bhwgi,goi->bgohw", win, wmat, optimize=True)
        out = np.ascontiguousarray(out.reshape(bsz, cout, ho, wo))
        _count_macs(bsz * cout * ho * wo * cin_g * k * k)

    if b is not None:
        out = out + b.data[None, :, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        if squeeze:
            gg = g[None] if g.ndim == 3 else g
        else:
            gg = g
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.data)
        if depthwise:
            wdw_ = w.data[:, 0]
            for ki in range(k):
                for kj in range(k):
                    sl = xp[:, :, ki : ki + ho * stride : stride, kj : kj + wo * stride : stride]
                    dw[:, 0, ki, kj] = (gg * sl).sum(axis=(0, 2, 3))
                    dxp[:, :, ki : ki + ho * stride : stride, kj : kj + wo * stride : stride] += (
                        wdw_[:, ki, kj][None, :, None, None] * gg
                    )
        else:
            s0, s1, s2, s3 = xp.strides
            win = np.lib.stride_tricks.as_strided(
                xp,
                (bsz, ho, wo, cin, k, k),
                (s0, stride * s2, stride * s3, s1, s2, s3),
            ).reshape(bsz, ho, wo, groups, cin_g * k * k)
            gr = gg.reshape(bsz, groups, cout // groups, ho, wo)
            dw[...] = np.einsum("bhwgi,bgohw->goi", win, gr, optimize=True).reshape(w.shape)
            wmat_ = w.data.reshape(groups, cout // groups, cin_g, k, k)
            for ki in range(k):
                for kj in range(k):
                    contrib = np.einsum(
                        "bgohw,goi->bgihw", gr, wmat_[:, :, :, ki, kj], optimize=True
                    ).reshape(bsz, cin, ho, wo)
                    dxp[:, :, ki : ki + ho * stride : stride, kj : kj + wo * stride : stride] += contrib
        if padding:
            dx = dxp[:, :, padding:-padding, padding:-padding]
        else:
            dx = dxp
        if squeeze:
            dx = dx[0]
        grads = [dx, dw]
        if b is not None:
            grads.append(gg.sum(axis=(0, 2, 3)))
        return tuple(grads)

    out_final = out[0] if squeeze else out
    return _node(out_final, parents, vjp, "conv2d")


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits: Tensor, labels, label_smoothing: float = 0.0) -> Tensor:
    """Mean softmax cross-entropy. Gradient is (p - q) / batch.

    ``labels`` is an integer array of class indices; with smoothing s the
    target distribution is (1 - s) * onehot + s / K.
    """
    squeeze = logits.ndim == 1
    z = logits.data[None] if squeeze else logits.data
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    bsz, ncls = z.shape
    if labels.shape[0] != bsz:
        raise DimensionError(
            f"cross_entropy got {bsz} logit rows but {labels.shape[0]} labels"
        )
    zmax = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True)) + zmax
    logp = z - lse
    q = np.full_like(z, label_smoothing / ncls)
    q[np.arange(bsz), labels] += 1.0 - label_smoothing
    loss = -(q * logp).sum(axis=-1).mean()

    def vjp(g):
        p = np.exp(logp)
        dz = (p - q) * (g / bsz)
        return (dz[0] if squeeze else dz,)

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), vjp, "cross_entropy")
