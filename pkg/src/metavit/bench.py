"""Wall-clock micro-benchmarks for attention blocks and whole models.

Timing uses the monotonic high-resolution clock only. Runs are warmed up,
then every measured iteration is recorded individually; the median is the
headline number for comparisons (robust to scheduler jitter), with mean
and standard deviation reported alongside. BLAS thread pools are pinned
to one thread during measurement so latency ratios track arithmetic cost.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import DCABlock, ParamStore, SABlock, TokenGrid
from .errors import UsageError
from .model import Model, VariantSpec
from .tensor import Tensor

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - available in the supported env
    from contextlib import nullcontext

    def threadpool_limits(limits=None):
        return nullcontext()

MIN_ITERS = 30
MIN_WARMUP = 10


@dataclass
class BenchResult:
    case: str
    n: int
    m: int
    d: int
    warmup: int
    iters: int
    median_s: float
    mean_s: float
    stddev_s: float
    throughput: float  # items per second, iters / total measured time

    def row(self) -> dict:
        return {
            "case": self.case, "n": self.n, "m": self.m, "d": self.d,
            "warmup": self.warmup, "iters": self.iters,
            "median_s": f"{self.median_s:.6g}", "mean_s": f"{self.mean_s:.6g}",
            "stddev_s": f"{self.stddev_s:.6g}", "throughput": f"{self.throughput:.6g}",
        }


def _time_loop(fn, warmup: int, iters: int) -> list[float]:
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            fn()
        samples = []
        for _ in range(iters):
            t0 = time.perf_counter()
            fn()
            t1 = time.perf_counter()
            samples.append(t1 - t0)
    return samples


def _result(case: str, n: int, m: int, d: int, warmup: int, samples: list[float]) -> BenchResult:
    total = sum(samples)
    return BenchResult(
        case=case, n=n, m=m, d=d, warmup=warmup, iters=len(samples),
        median_s=statistics.median(samples),
        mean_s=statistics.fmean(samples),
        stddev_s=statistics.stdev(samples) if len(samples) > 1 else 0.0,
        throughput=len(samples) / total,
    )


def _check_iters(iters: int) -> None:
    if iters < MIN_ITERS:
        raise UsageError(f"need at least {MIN_ITERS} measured iterations, got {iters}")


def bench_block_pair(
    n: int, m: int, d: int, e: int = 4, iters: int = MIN_ITERS,
    warmup: int = MIN_WARMUP, seed: int = 0,
) -> tuple[BenchResult, BenchResult]:
    """Forward-only latency of one dual cross-attention vs one standard block.

    Both blocks are freshly built from the same seed and fed the same random
    token grid. Speedup is sa.median_s / dca.median_s.
    """
    _check_iters(iters)
    side = int(round(n ** 0.5))
    if side * side != n:
        raise UsageError(f"n={n} must be a perfect square to form a token grid")
    store = ParamStore(seed)
    dca = DCABlock(store, "bench.dca", d, head_dim=min(32, d), expansion=e)
    sa = SABlock(store, "bench.sa", d, head_dim=min(32, d), expansion=e)
    rng = np.random.default_rng(seed)
    tokens = rng.standard_normal((n, d)).astype(np.float32)
    meta = rng.standard_normal((m, d)).astype(np.float32)

    def run(block):
        def fn():
            with T.no_grad():
                block(TokenGrid(Tensor(tokens), side, side), Tensor(meta))
        return fn

    dca_samples = _time_loop(run(dca), warmup, iters)
    sa_samples = _time_loop(run(sa), warmup, iters)
    return (
        _result("dca", n, m, d, warmup, dca_samples),
        _result("sa", n, m, d, warmup, sa_samples),
    )


def speedup(sa: BenchResult, dca: BenchResult) -> float:
    return sa.median_s / dca.median_s


def bench_model(
    spec: VariantSpec, input_hw, iters: int = MIN_ITERS,
    warmup: int = MIN_WARMUP, seed: int = 0,
) -> BenchResult:
    """Images per second over the full classification forward pass."""
    _check_iters(iters)
    if isinstance(input_hw, int):
        input_hw = (input_hw, input_hw)
    model = Model(spec, seed)
    rng = np.random.default_rng(seed)
    img = rng.standard_normal((3,) + tuple(input_hw)).astype(np.float32)

    def fn():
        with T.no_grad():
            model.forward_classify(Tensor(img))

    samples = _time_loop(fn, warmup, iters)
    n_tokens = (input_hw[0] // 4) * (input_hw[1] // 4)
    return _result(f"model:{spec.name}@{input_hw[0]}", n_tokens, spec.meta_len,
                   spec.dims[0], warmup, samples)
