"""Analytic parameter and FLOP accounting for built networks.

Counting never touches tensor data: it walks :meth:`Network.trace`, so an
uninitialised network (``build_network(spec)`` without an rng) is enough.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from .network import (DEFAULT_OPTIONS, STEM_GLANCE, STRIDED_GLANCE, ArchOptions, VariantSpec,
                      build_network, parse_variant)

MAC = "MAC"
MULADD2 = "MULADD2"
CONVENTIONS = (MAC, MULADD2)
SCOPES = ("full", "encoder")
RESIZE_MACS = 4


@dataclass
class CostReport:
    variant: str
    input_shape: tuple
    convention: str
    scope: str
    total_params: int
    params_by_stage: list
    total_flops: int
    flops_by_layer: list = field(repr=False, default_factory=list)

    @property
    def gflops(self):
        return self.total_flops / 1e9


def _stage_of(name):
    return name.split(".", 1)[0]


def count_params(net, scope="full"):
    """Learnable scalars (batch-norm running statistics excluded), grouped by stage."""
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}")
    groups = {}
    for layer in net.layers():
        stage = _stage_of(layer.name)
        if scope == "encoder" and stage == "decoder":
            continue
        groups[stage] = groups.get(stage, 0) + layer.param_count()
    return sum(groups.values()), list(groups.items())


def op_flops(rec, convention=MAC, count_elementwise=False):
    """FLOPs of one traced op."""
    per_mac = 2 if convention == MULADD2 else 1
    out_elems = 1
    for s in rec.out_shape:
        out_elems *= s
    if rec.kind == "conv":
        layer = rec.layer
        return out_elems * (layer.in_channels // layer.groups) * layer.kernel ** 2 * per_mac
    if rec.kind == "resize":
        return out_elems * RESIZE_MACS * per_mac
    if rec.kind == "pool":
        return out_elems
    if count_elementwise and rec.kind in ("bn", "relu", "add"):
        return out_elems
    return 0


def count_flops(net, input_shape, convention=MAC, scope="full", count_elementwise=False):
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {CONVENTIONS}")
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}")
    _, records = net.trace(tuple(input_shape))
    by_layer = []
    for rec in records:
        if scope == "encoder" and rec.part == "decoder":
            continue
        f = op_flops(rec, convention, count_elementwise)
        if f:
            by_layer.append((rec.name, f))
    return sum(f for _, f in by_layer), by_layer


def cost_report(net, input_shape, convention=MAC, scope="full", count_elementwise=False):
    total_params, by_stage = count_params(net, scope)
    total_flops, by_layer = count_flops(net, input_shape, convention, scope, count_elementwise)
    return CostReport(net.spec.name, tuple(input_shape), convention, scope, total_params, by_stage,
                      total_flops, by_layer)


# ---------------------------------------------------------------- calibration

@dataclass(frozen=True)
class ReferenceRow:
    """A published cost figure and the precision it was printed with."""

    variant: str
    params: float            # learnable scalars
    params_half_unit: float  # half of the last printed digit
    gflops: float
    gflops_half_unit: float = 0.05
    input_hw: tuple = (512, 1024)
    num_classes: int = 20
    source: str = ""


def _rows():
    rows = []
    exact = {3: 164e3, 6: 405e3, 9: 758e3, 12: 1.2e6}
    exact_half = {3: 500, 6: 500, 9: 500, 12: 0.05e6}
    flops = {3: 8.0, 6: 10.3, 9: 13.5, 12: 17.5}
    for d in (3, 6, 9, 12):
        rows.append(ReferenceRow(f"pdfnet{d}", exact[d], exact_half[d], flops[d], source="cityscapes"))
    flops_2s = {3: 2.7, 6: 4.5, 9: 7.5, 12: 11.1}
    params_2s = {3: 0.1, 6: 0.3, 9: 0.7, 12: 1.1}
    for d in (3, 6, 9, 12):
        rows.append(ReferenceRow(f"pdfnet{d}-2s", params_2s[d] * 1e6, 0.05e6, flops_2s[d], source="cityscapes"))
    params_df = {3: 0.9, 6: 2.3, 9: 4.6, 12: 7.6}
    flops_df = {3: 28.1, 6: 42.1, 9: 61.7, 12: 86.9}
    for d in (3, 6, 9, 12):
        rows.append(ReferenceRow(f"dfnet{d}", params_df[d] * 1e6, 0.05e6, flops_df[d], source="cityscapes-df"))
    return rows


def _camvid_rows():
    params = {"pdfnet3": 0.2, "pdfnet3-2s": 0.1, "pdfnet6": 0.4, "pdfnet6-2s": 0.3,
              "pdfnet9": 0.7, "pdfnet9-2s": 0.6, "pdfnet12": 1.2, "pdfnet12-2s": 1.1}
    flops = {"pdfnet3": 2.3, "pdfnet3-2s": 0.8, "pdfnet6": 3.0, "pdfnet6-2s": 1.4,
             "pdfnet9": 4.1, "pdfnet9-2s": 2.4, "pdfnet12": 5.4, "pdfnet12-2s": 3.6}
    return [ReferenceRow(v, params[v] * 1e6, 0.05e6, flops[v], input_hw=(368, 480), num_classes=12,
                         source="camvid") for v in params]


CITYSCAPES_REFERENCE = _rows()
CAMVID_REFERENCE = _camvid_rows()


def rounding_error(value, reference, half_unit):
    """Relative distance from ``value`` to the interval the printed reference stands for."""
    gap = max(0.0, abs(value - reference) - half_unit)
    return gap / reference


@dataclass
class Residual:
    row: ReferenceRow
    params: int
    gflops: float

    @property
    def params_rel(self):
        return (self.params - self.row.params) / self.row.params

    @property
    def gflops_rel(self):
        return (self.gflops - self.row.gflops) / self.row.gflops

    @property
    def error(self):
        return max(rounding_error(self.params, self.row.params, self.row.params_half_unit),
                   rounding_error(self.gflops, self.row.gflops, self.row.gflops_half_unit))


@dataclass
class Calibration:
    options: ArchOptions
    convention: str
    scope: str
    max_error: float
    residuals: list
    candidates: list  # (options, convention, scope, max_error) for every grid point

    @property
    def ok(self):
        return self.max_error <= 0.25


def evaluate(rows, options, convention, scope):
    out = []
    for row in rows:
        spec = parse_variant(row.variant, row.num_classes)
        net = build_network(spec, options=options)
        params, _ = count_params(net, scope)
        flops, _ = count_flops(net, (1, spec.in_channels) + tuple(row.input_hw), convention, scope)
        out.append(Residual(row, params, flops / 1e9))
    return out


def calibrate(rows=None, bn_choices=("both", "pointwise"), stem_choices=(STEM_GLANCE, STRIDED_GLANCE),
              conventions=CONVENTIONS, scopes=SCOPES):
    """Grid-search the unstated counting and wiring choices against published costs.

    Each grid point is scored by the largest relative miss over all rows, where
    a miss is measured from the rounding interval of the printed figure.  The
    point with the smallest score wins; ties go to the smaller mean miss.  A
    winner that still misses by more than 25% is returned with ``ok == False``
    rather than raising.
    """
    rows = CITYSCAPES_REFERENCE if rows is None else rows
    candidates = []
    best = None
    for bn, stem, conv, scope in itertools.product(bn_choices, stem_choices, conventions, scopes):
        opts = ArchOptions(bn_after=bn, stem_2s=stem)
        residuals = evaluate(rows, opts, conv, scope)
        errors = [r.error for r in residuals]
        score = (max(errors), sum(errors) / len(errors))
        candidates.append((opts, conv, scope, score[0]))
        if best is None or score < best[3]:
            best = (opts, conv, scope, score, residuals)
    opts, conv, scope, score, residuals = best
    return Calibration(opts, conv, scope, score[0], residuals, candidates)


# the grid point calibrate() selects on the Cityscapes rows
CALIBRATED_CONVENTION = MAC
CALIBRATED_SCOPE = "encoder"


def format_report(report, table=None):
    lines = [
        f"variant      {report.variant}",
        f"input        {'x'.join(str(s) for s in report.input_shape)}",
        f"convention   {report.convention} (scope: {report.scope})",
    ]
    if table is not None:
        lines.append(f"stages       {table}")
    lines.append(f"params       {report.total_params}")
    for name, count in report.params_by_stage:
        lines.append(f"  {name:<10} {count}")
    lines.append(f"GFLOPs       {report.gflops:.6g}")
    return "\n".join(lines)


def report_line(report):
    h, w = report.input_shape[2:]
    return f"{report.variant},{report.total_params},{report.gflops:.6g}@{h}x{w}"
