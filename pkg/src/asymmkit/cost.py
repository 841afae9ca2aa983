"""Static MAdds / parameter accounting.

One MAdd is one multiply-accumulate.  Only convolutions cost MAdds (the two
1x1 maps inside squeeze-excite included); batch norm, activations, pooling
and the SE gating product are free.  Parameter counts include BN affine
terms and the classifier bias, so they equal the trainable element count of
the built network.

Operator classes follow the kernel shape: depthwise (groups == channels),
pointwise (1x1, one group), vanilla (any other dense conv).
"""

from __future__ import annotations

import json
from decimal import ROUND_HALF_UP, Decimal
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

from .blocks import BlockPlan
from .ops import ConvParams
from .zoo import NetworkSpec, resolve

CLASSES = ("DW", "PW", "vanilla")


class CostError(ValueError):
    pass


def conv_madds(p: ConvParams, out_h: int, out_w: int) -> int:
    return out_h * out_w * p.out_channels * p.kernel * p.kernel * (p.in_channels // p.groups)


def conv_param_count(p: ConvParams, bias: bool = False) -> int:
    k = p.kernel
    return p.out_channels * k * k * (p.in_channels // p.groups) + (p.out_channels if bias else 0)


def operator_class(p: ConvParams) -> str:
    if p.is_depthwise:
        return "DW"
    if p.is_pointwise:
        return "PW"
    return "vanilla"


@dataclass(frozen=True)
class LayerCost:
    layer: str
    cls: str
    madds: int
    params: int


@dataclass(frozen=True)
class BlockCost:
    """Per-block MAdds split: first PW, DW, SE maps, second PW."""

    pw1: int
    dw: int
    se: int
    pw2: int

    @property
    def total(self) -> int:
        return self.pw1 + self.dw + self.se + self.pw2


@dataclass
class CostReport:
    name: str
    width_multiplier: float
    resolution: int
    layers: list[LayerCost] = field(default_factory=list)
    blocks: list[BlockCost] = field(default_factory=list)

    @property
    def madds(self) -> int:
        return sum(l.madds for l in self.layers)

    @property
    def params(self) -> int:
        return sum(l.params for l in self.layers)

    def class_madds(self) -> dict[str, int]:
        out = dict.fromkeys(CLASSES, 0)
        for l in self.layers:
            if l.cls in out:
                out[l.cls] += l.madds
        return out

    def class_percentages(self) -> dict[str, float]:
        cm = self.class_madds()
        total = sum(cm.values())
        return {k: 100.0 * v / total for k, v in cm.items()}


def _conv(layers, name, p, out, bn=False, bias=False):
    params = conv_param_count(p, bias) + (2 * p.out_channels if bn else 0)
    layers.append(LayerCost(name, operator_class(p), conv_madds(p, out, out), params))


def block_cost(plan: BlockPlan, size: int) -> BlockCost:
    """MAdds of one block applied to a ``size`` x ``size`` input."""
    out = plan.out_size(size)
    pw1 = conv_madds(plan.expand_params, size, size) if plan.has_expand else 0
    dw = conv_madds(plan.dw_params, out, out)
    se = 2 * plan.dw_width * plan.se_width
    pw2 = conv_madds(plan.project_params, out, out)
    return BlockCost(pw1, dw, se, pw2)


def _block_layers(layers, prefix, bp: BlockPlan, size):
    out = bp.out_size(size)
    if bp.has_expand:
        _conv(layers, f"{prefix}.expand", bp.expand_params, size, bn=True)
    _conv(layers, f"{prefix}.dw", bp.dw_params, out, bn=True)
    if bp.se_width:
        _conv(layers, f"{prefix}.se.reduce", ConvParams.pointwise(bp.dw_width, bp.se_width), 1)
        _conv(layers, f"{prefix}.se.expand", ConvParams.pointwise(bp.se_width, bp.dw_width), 1)
    _conv(layers, f"{prefix}.project", bp.project_params, out, bn=True)


def network_cost(spec: NetworkSpec) -> CostReport:
    plan = resolve(spec)
    report = CostReport(spec.name, spec.width_multiplier, spec.resolution)
    layers = report.layers
    _conv(layers, "stem", plan.stem, plan.stem.out_size(spec.resolution), bn=True)
    for i, (bp, size) in enumerate(zip(plan.blocks, plan.sizes), 1):
        _block_layers(layers, f"block{i}", bp, size)
        report.blocks.append(block_cost(bp, size))
    f = plan.final_size
    if plan.last_params is not None:
        _conv(layers, "head.conv", plan.last_params, f, bn=True)
    if plan.hidden_params is not None:
        _conv(layers, "head.hidden", plan.hidden_params, 1)
    _conv(layers, "classifier", plan.classifier_params, 1, bias=True)
    return report


def class_breakdown(spec: NetworkSpec) -> dict[str, float]:
    """Share of convolution MAdds per operator class, in percent."""
    return network_cost(spec).class_percentages()


def complexity_ratio(t: float, r: float, c: float, k: int) -> float:
    """Analytic MAdds ratio asymmetrical / inverted-residual for a stride-1
    block without SE: ``1 + r k^2 / (2 t c + k^2 t)``."""
    if not (t > r >= 0) or c < 1 or k < 1:
        raise CostError(f"complexity_ratio needs t > r >= 0, c >= 1, k >= 1 (t={t}, r={r}, c={c}, k={k})")
    return 1.0 + r * k * k / (2 * t * c + k * k * t)


def twin_plan(plan: BlockPlan) -> BlockPlan:
    """The inverted-residual block with the same p, c, k, s as ``plan``."""
    p = plan.dw_width - plan.rate_eff * plan.in_channels
    if p == plan.in_channels:
        return replace(plan, kind="mmblock", expand_out=0, copies=1, rate_eff=0)
    return replace(plan, kind="mmblock", expand_out=p, copies=0, rate_eff=0)


@dataclass(frozen=True)
class RatioCheck:
    block: int
    t: float
    r: int
    c: int
    k: int
    exact: float
    analytic: Optional[float]


def exact_block_ratios(spec: NetworkSpec, stride_one_only: bool = True) -> list[RatioCheck]:
    """Exact cost ratio of every block vs its inverted-residual twin, SE off."""
    plan = resolve(spec)
    out = []
    for i, (bp, size) in enumerate(zip(plan.blocks, plan.sizes), 1):
        if stride_one_only and bp.stride != 1:
            continue
        bp = replace(bp, se_width=0)
        twin = twin_plan(bp)
        exact = block_cost(bp, size).total / block_cost(twin, size).total
        c = bp.in_channels
        t = (twin.dw_width) / c
        analytic = None
        if c == bp.out_channels and t > bp.rate_eff:
            analytic = complexity_ratio(t, bp.rate_eff, c, bp.kernel)
        out.append(RatioCheck(i, t, bp.rate_eff, c, bp.kernel, exact, analytic))
    return out


# ------------------------------------------------------------------ emitters


def millions(n: int) -> str:
    """Millions with one decimal, rounding half away from zero."""
    return str((Decimal(n) / 10 ** 6).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def format_table(report: CostReport) -> str:
    w = max(len(l.layer) for l in report.layers)
    lines = [f"{'layer':<{w}}  {'class':<7}  {'madds':>12}  {'params':>10}"]
    for l in report.layers:
        lines.append(f"{l.layer:<{w}}  {l.cls:<7}  {l.madds:>12,d}  {l.params:>10,d}")
    pct = report.class_percentages()
    lines.append("")
    lines.append(f"network     {report.name} (width {report.width_multiplier:g}, input {report.resolution})")
    lines.append(f"MAdds (M)   {millions(report.madds)}")
    lines.append(f"Params (M)  {millions(report.params)}")
    lines.append("breakdown   " + "  ".join(f"{k} {pct[k]:.1f}%" for k in CLASSES))
    return "\n".join(lines)


def format_struct(report: CostReport) -> str:
    doc = {
        "network": report.name,
        "multiplier": report.width_multiplier,
        "resolution": report.resolution,
        "madds": report.madds,
        "params": report.params,
        "breakdown": report.class_percentages(),
        "layers": [{"layer": l.layer, "class": l.cls, "madds": l.madds, "params": l.params}
                   for l in report.layers],
        "blocks": [asdict(b) for b in report.blocks],
    }
    return json.dumps(doc, indent=2)
