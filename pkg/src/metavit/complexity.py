"""Analytic cost accounting: formula units, MACs, and parameter counts.

Three quantities are reported per layer and never mixed:

``formula_units``
    The block cost formulas evaluated verbatim, in exact integer
    arithmetic: a standard-attention block costs (2E+4)*N*D^2 + 2*N^2*D
    and a dual cross-attention block (2E+4)*(N+M)*D^2 + 2*N*M*D. The dual
    block's attention term counts 2*N*M*D even though its two branches
    each execute N*M*D multiply-accumulate pairs; ``strict_dual=True``
    switches that term to 4*N*M*D. The cross-attention block row follows
    the same accounting pattern (it has no published row of its own):
    2*M*D^2 + 2*N*D^2 + 2*N*M*D + 2*E*(N+M)*D^2.

``macs``
    Module-level multiply-accumulates of convolutions and linear layers
    only: stems, positional-encoding convs, query/key/value/output
    projections, feed-forward layers, downsample convs, meta projections,
    and the classifier. Softmax-side attention matrix products,
    normalizations, and activations are excluded, matching the common
    module-hook profiler convention behind published MAC tables.

``attn_macs``
    The excluded attention matrix products (logits and weighted sums),
    counted at their true cost per branch, reported separately so nothing
    is silently dropped or doubled.

``count_model`` walks the exact stage layout used by ``build_variant``,
so its parameter totals equal the built model's parameter count exactly.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

from .errors import ConfigError, UsageError
from .model import VariantSpec

CONVENTION_NOTE = (
    "macs = conv + linear module MACs only (projections, FFN, stems, CPE, "
    "downsamples, head); attention matrix products are reported separately "
    "as attn_macs; normalizations and activations are not counted"
)

_KINDS = ("dca", "sa", "ca")


def count_block(kind: str, n: int, m: int, d: int, e: int, strict_dual: bool = False) -> int:
    """Formula units of one attention block, exact integer arithmetic."""
    if kind not in _KINDS:
        raise ConfigError(f"unknown block kind {kind!r}; expected one of {_KINDS}")
    if n < 0 or m < 0 or d <= 0 or e <= 0:
        raise ConfigError(f"bad block size n={n} m={m} d={d} e={e}")
    if kind == "dca":
        attn = 4 * n * m * d if strict_dual else 2 * n * m * d
        return (2 * e + 4) * (n + m) * d * d + attn
    if kind == "sa":
        return (2 * e + 4) * n * d * d + 2 * n * n * d
    # cross-attention row, derived from the same accounting pattern
    return 2 * m * d * d + 2 * n * d * d + 2 * n * m * d + 2 * e * (n + m) * d * d


@dataclass
class ComplexityEntry:
    name: str
    kind: str
    n: int
    m: int
    d: int
    e: int
    formula_units: int
    attn_macs: int
    macs: int
    params: int


@dataclass
class ComplexityReport:
    entries: list[ComplexityEntry] = field(default_factory=list)
    note: str = CONVENTION_NOTE

    def _total(self, attr: str) -> int:
        return sum(getattr(entry, attr) for entry in self.entries)

    @property
    def total_formula_units(self) -> int:
        return self._total("formula_units")

    @property
    def total_attn_macs(self) -> int:
        return self._total("attn_macs")

    @property
    def total_macs(self) -> int:
        return self._total("macs")

    @property
    def total_params(self) -> int:
        return self._total("params")


def _ffn_params(d: int, e: int) -> int:
    hidden = e * d
    return d * hidden + hidden + hidden * d + d


def _block_params(kind: str, d: int, e: int, cpe_kernel: int) -> int:
    shared_qkv = 3 * (d * d + d)
    wo = d * d + d
    ln = 2 * d
    if kind == "ca":
        return shared_qkv + wo + 3 * ln + _ffn_params(d, e)
    cpe = d * cpe_kernel * cpe_kernel + d
    return cpe + shared_qkv + 2 * wo + 4 * ln + _ffn_params(d, e)


def _block_macs(kind: str, n: int, m: int, d: int, e: int, cpe_kernel: int) -> int:
    if kind == "ca":
        proj = 2 * m * d * d + 2 * n * d * d
        ffn = 2 * e * m * d * d  # image stream passes through untouched
        return proj + ffn
    cpe = cpe_kernel * cpe_kernel * d * n
    proj = 4 * (n + m) * d * d
    ffn = 2 * e * (n + m) * d * d
    return cpe + proj + ffn


def _block_attn_macs(kind: str, n: int, m: int, d: int) -> int:
    if kind == "ca":
        return 2 * n * m * d
    if kind == "dca":
        return 4 * n * m * d
    return 2 * n * n * d + 2 * m * m * d


def count_model(
    spec: VariantSpec, input_hw, strict_dual: bool = False
) -> ComplexityReport:
    """Per-layer accounting over the exact stage layout of a built model."""
    if isinstance(input_hw, int):
        h = w = input_hw
    else:
        h, w = input_hw
    if h % 32 or w % 32 or h < 64 or w < 64:
        raise ConfigError(f"input extents must be multiples of 32 and >= 64, got {h}x{w}")

    d1, d2, d3, d4 = spec.dims
    m = spec.meta_len
    e = spec.expansion
    k = spec.cpe_kernel
    report = ComplexityReport()

    mid = d1 // 2
    stem_macs = 9 * 3 * mid * (h // 2) * (w // 2) + 9 * mid * d1 * (h // 4) * (w // 4)
    stem_params = 3 * mid * 9 + mid + mid * d1 * 9 + d1
    report.entries.append(
        ComplexityEntry("stem", "stem", (h // 4) * (w // 4), 0, d1, e, 0, 0, stem_macs, stem_params)
    )

    meta_d0 = spec.meta_dim0 if spec.use_meta_stem else d1
    report.entries.append(
        ComplexityEntry("meta.init", "param", 0, m, meta_d0, e, 0, 0, 0, m * meta_d0)
    )
    if spec.use_meta_stem:
        d0 = spec.meta_dim0
        report.entries.append(
            ComplexityEntry(
                "meta_stem", "stem", 0, m, d1, e, 0, 0,
                m * (d0 * d1 + d1 * d1),
                d0 * d1 + d1 + d1 * d1 + d1,
            )
        )

    group_kind = ["ca", "dca", "dca", "sa", "sa"]
    group_dim = [d1, d1, d2, d3, d4]
    group_n = [
        (h // 4) * (w // 4),
        (h // 4) * (w // 4),
        (h // 8) * (w // 8),
        (h // 16) * (w // 16),
        (h // 32) * (w // 32),
    ]
    counts = list(spec.blocks)
    if not spec.use_ca_stage:
        counts[0] = 0

    for gi in range(5):
        kind = group_kind[gi]
        d = group_dim[gi]
        n = group_n[gi]
        for bi in range(counts[gi]):
            report.entries.append(
                ComplexityEntry(
                    f"s{gi}.b{bi}", kind, n, m, d, e,
                    count_block(kind, n, m, d, e, strict_dual=strict_dual),
                    _block_attn_macs(kind, n, m, d),
                    _block_macs(kind, n, m, d, e, k),
                    _block_params(kind, d, e, k),
                )
            )
        if gi in (1, 2, 3):
            din, dout = group_dim[gi], group_dim[gi + 1]
            n_out = group_n[gi + 1]
            report.entries.append(
                ComplexityEntry(
                    f"ds{gi}", "downsample", n_out, m, dout, e, 0, 0,
                    9 * din * dout * n_out + m * din * dout,
                    9 * din * dout + dout + din * dout + dout,
                )
            )

    head_params = 2 * d4 + d4 * spec.num_classes + spec.num_classes
    if spec.use_meta_pooling:
        head_params += 2 * d4
    report.entries.append(
        ComplexityEntry(
            "head", "head", group_n[4], m, d4, e, 0, 0,
            d4 * spec.num_classes, head_params,
        )
    )
    return report


_COLUMNS = ("name", "kind", "n", "m", "d", "e", "formula_units", "attn_macs", "macs", "params")


def _rows(report: ComplexityReport) -> list[list]:
    rows = [
        [getattr(entry, c) for c in _COLUMNS] for entry in report.entries
    ]
    rows.append(
        ["total", "total", "", "", "", "",
         report.total_formula_units, report.total_attn_macs,
         report.total_macs, report.total_params]
    )
    return rows


def emit_report(report: ComplexityReport, fmt: str = "table") -> str:
    """Render a report as an aligned table, CSV, or JSON text."""
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(_COLUMNS)
        writer.writerows(_rows(report))
        return buf.getvalue()
    if fmt == "json":
        doc = {
            "convention": report.note,
            "entries": [
                {c: getattr(entry, c) for c in _COLUMNS} for entry in report.entries
            ],
            "totals": {
                "formula_units": report.total_formula_units,
                "attn_macs": report.total_attn_macs,
                "macs": report.total_macs,
                "params": report.total_params,
            },
        }
        return json.dumps(doc, indent=2) + "\n"
    if fmt == "table":
        rows = [list(_COLUMNS)] + [[str(v) for v in row] for row in _rows(report)]
        widths = [max(len(r[i]) for r in rows) for i in range(len(_COLUMNS))]
        lines = []
        for idx, row in enumerate(rows):
            lines.append("  ".join(v.rjust(w) if i > 1 else v.ljust(w)
                                   for i, (v, w) in enumerate(zip(row, widths))))
            if idx == 0:
                lines.append("  ".join("-" * w for w in widths))
        lines.append("")
        lines.append(f"note: {report.note}")
        return "\n".join(lines) + "\n"
    raise UsageError(f"unknown report format {fmt!r}; expected table, csv, or json")
