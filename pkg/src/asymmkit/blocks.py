"""Inverted residual, pruned and asymmetrical bottleneck blocks.

All three share one dataflow::

    x --[1x1 expand + BN + act]--> generated ---+
    x (copies) ------------------------------- concat --> DW + BN + act
        --> [SE] --> 1x1 project + BN --> (+ x when shapes allow)

and differ only in how many channels the first pointwise conv produces and
how many copies of ``x`` are stacked in front of them:

=========  =====================  =============  ===========
kind       expand output          x copies       DW width
=========  =====================  =============  ===========
mmblock    p                      0              p
pruned     p - c_in               1              p
asymm      p - r * c_in           2 r            p + r * c_in
=========  =====================  =============  ===========

The asymmetry rate is clamped to 0 unless ``r * c_in < p``; at rate 0 the
asymmetrical block is computed by exactly the mmblock code path.  When the
expanded size equals ``c_in`` no expand conv is built and ``x`` feeds the
depthwise conv directly.  ``dwsep`` is the plain depthwise separable pair
(DW + BN + act, PW + BN + act) used by the MobileNetV1 reference network.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .ops import BatchNormState, ConvParams
from .tensor import TensorError, check_tensor, concat_channels

KINDS = ("mmblock", "pruned", "asymm", "dwsep")
NONLINEARITIES = ("relu", "hswish")


class BlockSpecError(ValueError):
    pass


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    kernel: int
    expand: Optional[int]  # p; None for dwsep
    out_channels: int
    stride: int = 1
    use_se: bool = False
    nonlinearity: str = "relu"
    rate: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BlockSpecError(f"unknown block kind {self.kind!r}")
        if self.nonlinearity not in NONLINEARITIES:
            raise BlockSpecError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.kernel < 1 or self.stride < 1 or self.out_channels < 1 or self.rate < 0:
            raise BlockSpecError(f"invalid block geometry: {self}")
        if self.kind != "dwsep" and (self.expand is None or self.expand < 1):
            raise BlockSpecError(f"{self.kind} block needs an expanded size p >= 1")


def effective_rate(rate: int, in_channels: int, expand: int) -> int:
    """Asymmetry rate actually applied: ``rate`` if ``rate * c_in < p`` else 0."""
    return rate if rate * in_channels < expand else 0


@dataclass(frozen=True)
class BlockPlan:
    """Channel bookkeeping of one block instance."""

    kind: str
    in_channels: int
    expand_out: int      # channels produced by the first PW; 0 = no first PW
    copies: int          # copies of x stacked ahead of the generated channels
    out_channels: int
    kernel: int
    stride: int
    se_width: int        # 0 = no SE
    nonlinearity: str
    project_act: bool
    residual: bool
    rate_eff: int = 0

    @property
    def dw_width(self) -> int:
        return self.copies * self.in_channels + self.expand_out

    @property
    def has_expand(self) -> bool:
        return self.expand_out > 0

    @property
    def expand_params(self) -> ConvParams:
        return ConvParams.pointwise(self.in_channels, self.expand_out)

    @property
    def dw_params(self) -> ConvParams:
        return ConvParams.depthwise(self.dw_width, self.kernel, self.stride)

    @property
    def project_params(self) -> ConvParams:
        return ConvParams.pointwise(self.dw_width, self.out_channels)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Trainable tensors of the block, in canonical order."""
        shapes: dict[str, tuple[int, ...]] = {}
        if self.has_expand:
            shapes["expand.weight"] = self.expand_params.weight_shape
            shapes["expand.bn.gamma"] = (self.expand_out,)
            shapes["expand.bn.beta"] = (self.expand_out,)
        shapes["dw.weight"] = self.dw_params.weight_shape
        shapes["dw.bn.gamma"] = (self.dw_width,)
        shapes["dw.bn.beta"] = (self.dw_width,)
        if self.se_width:
            shapes["se.reduce.weight"] = (self.se_width, self.dw_width, 1, 1)
            shapes["se.expand.weight"] = (self.dw_width, self.se_width, 1, 1)
        shapes["project.weight"] = self.project_params.weight_shape
        shapes["project.bn.gamma"] = (self.out_channels,)
        shapes["project.bn.beta"] = (self.out_channels,)
        return shapes

    def buffer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for role, width in (("expand", self.expand_out), ("dw", self.dw_width),
                            ("project", self.out_channels)):
            if role == "expand" and not self.has_expand:
                continue
            shapes[f"{role}.bn.running_mean"] = (width,)
            shapes[f"{role}.bn.running_var"] = (width,)
        return shapes

    def out_size(self, size: int) -> int:
        return self.dw_params.out_size(size)


def default_se_width(dw_width: int) -> int:
    from .zoo import make_divisible
    return make_divisible(dw_width / 4)


def plan_block(spec: BlockSpec, in_channels: int, se_width: Optional[int] = None) -> BlockPlan:
    """Resolve a block spec against its actual input width.

    Raises :class:`BlockSpecError` for a pruned block with ``p <= c_in``.
    """
    c, p = in_channels, spec.expand
    rate_eff = 0
    project_act = False
    residual = spec.stride == 1 and c == spec.out_channels
    if spec.kind == "dwsep":
        expand_out, copies, project_act, residual = 0, 1, True, False
    elif spec.kind == "pruned":
        if p <= c:
            raise BlockSpecError(f"pruned block needs p > c_in (p={p}, c_in={c})")
        expand_out, copies = p - c, 1
    else:
        rate_eff = effective_rate(spec.rate, c, p) if spec.kind == "asymm" else 0
        if rate_eff:
            expand_out, copies = p - rate_eff * c, 2 * rate_eff
        elif p == c:
            expand_out, copies = 0, 1
        else:
            expand_out, copies = p, 0
    dw_width = copies * c + expand_out
    if spec.use_se:
        se_width = default_se_width(dw_width) if se_width is None else se_width
    else:
        se_width = 0
    return BlockPlan(spec.kind, c, expand_out, copies, spec.out_channels, spec.kernel,
                     spec.stride, se_width, spec.nonlinearity, project_act, residual, rate_eff)


def init_block_params(plan: BlockPlan, rng: np.random.Generator, dtype=np.float64) -> dict:
    """Fan-in scaled normal conv weights, BN gamma=1 / beta=0, fresh buffers."""
    params = {}
    for name, shape in plan.param_shapes().items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype)
        else:
            params[name] = np.zeros(shape, dtype)
    for name, shape in plan.buffer_shapes().items():
        params[name] = (np.ones if name.endswith("var") else np.zeros)(shape, dtype)
    return params


def _bn(params: dict, role: str, momentum: float = 0.9, eps: float = 1e-5) -> BatchNormState:
    return BatchNormState(
        params[f"{role}.bn.gamma"], params[f"{role}.bn.beta"],
        params[f"{role}.bn.running_mean"], params[f"{role}.bn.running_var"],
        momentum, eps,
    )


def _check_params(plan: BlockPlan, params: dict):
    for name, shape in {**plan.param_shapes(), **plan.buffer_shapes()}.items():
        if name not in params:
            raise TensorError(f"block params missing {name!r}")
        if tuple(params[name].shape) != shape:
            raise TensorError(f"block param {name!r} has shape {params[name].shape}, expected {shape}")


def forward(x: np.ndarray, plan: BlockPlan, params: dict, mode: str = "train",
            bn_momentum: float = 0.9):
    """Run one block.  Returns ``(y, cache)`` for :func:`backward`."""
    check_tensor(x)
    if x.shape[1] != plan.in_channels:
        raise TensorError(f"block expects {plan.in_channels} channels, got {x.shape[1]}")
    _check_params(plan, params)
    cache = {"x": x}
    parts = [x] * plan.copies
    if plan.has_expand:
        e = ops.conv2d_forward(x, params["expand.weight"], plan.expand_params)
        e_bn, cache["expand.bn"] = ops.batchnorm_forward(e, _bn(params, "expand", bn_momentum), mode)
        cache["expand.pre"] = e_bn
        parts.append(ops.activation(e_bn, plan.nonlinearity))
    cat = concat_channels(parts)
    cache["cat"] = cat
    d = ops.conv2d_forward(cat, params["dw.weight"], plan.dw_params)
    d_bn, cache["dw.bn"] = ops.batchnorm_forward(d, _bn(params, "dw", bn_momentum), mode)
    cache["dw.pre"] = d_bn
    h = ops.activation(d_bn, plan.nonlinearity)
    if plan.se_width:
        cache["se.in"] = h
        h = ops.squeeze_excite(h, params["se.reduce.weight"], params["se.expand.weight"])
    cache["project.in"] = h
    y = ops.conv2d_forward(h, params["project.weight"], plan.project_params)
    y, cache["project.bn"] = ops.batchnorm_forward(y, _bn(params, "project", bn_momentum), mode)
    if plan.project_act:
        cache["project.pre"] = y
        y = ops.activation(y, plan.nonlinearity)
    if plan.residual:
        y = y + x
    return y, cache


def backward(plan: BlockPlan, params: dict, cache: dict, grad_out: np.ndarray):
    """Gradients ``(grad_x, grads)`` from a :func:`forward` cache."""
    grads = {}
    x = cache["x"]
    g = grad_out
    if plan.project_act:
        g = ops.activation_backward(cache["project.pre"], plan.nonlinearity, g)
    g, grads["project.bn.gamma"], grads["project.bn.beta"] = ops.batchnorm_backward(cache["project.bn"], g)
    g, grads["project.weight"] = ops.conv2d_backward(
        cache["project.in"], params["project.weight"], plan.project_params, g)
    if plan.se_width:
        g, grads["se.reduce.weight"], grads["se.expand.weight"] = ops.squeeze_excite_backward(
            cache["se.in"], params["se.reduce.weight"], params["se.expand.weight"], g)
    g = ops.activation_backward(cache["dw.pre"], plan.nonlinearity, g)
    g, grads["dw.bn.gamma"], grads["dw.bn.beta"] = ops.batchnorm_backward(cache["dw.bn"], g)
    g, grads["dw.weight"] = ops.conv2d_backward(cache["cat"], params["dw.weight"], plan.dw_params, g)
    c = plan.in_channels
    gx = np.zeros_like(x)
    for i in range(plan.copies):
        gx += g[:, i * c:(i + 1) * c]
    if plan.has_expand:
        ge = g[:, plan.copies * c:]
        ge = ops.activation_backward(cache["expand.pre"], plan.nonlinearity, ge)
        ge, grads["expand.bn.gamma"], grads["expand.bn.beta"] = ops.batchnorm_backward(cache["expand.bn"], ge)
        ge, grads["expand.weight"] = ops.conv2d_backward(x, params["expand.weight"], plan.expand_params, ge)
        gx += ge
    if plan.residual:
        gx += grad_out
    return gx, {k: grads[k] for k in plan.param_shapes()}


# ----------------------------------------------------------- spec-level wrappers


def _plan_for(x: np.ndarray, spec: BlockSpec, params: dict, kind: str) -> BlockPlan:
    if spec.kind != kind:
        raise BlockSpecError(f"expected a {kind} spec, got {spec.kind}")
    se_w = params["se.reduce.weight"].shape[0] if "se.reduce.weight" in params else None
    return plan_block(spec, x.shape[1], se_w)


def mmblock_forward(x, spec: BlockSpec, params: dict, mode: str = "train") -> np.ndarray:
    return forward(x, _plan_for(x, spec, params, "mmblock"), params, mode)[0]


def pruned_forward(x, spec: BlockSpec, params: dict, mode: str = "train") -> np.ndarray:
    return forward(x, _plan_for(x, spec, params, "pruned"), params, mode)[0]


def asymm_forward(x, spec: BlockSpec, params: dict, mode: str = "train") -> np.ndarray:
    return forward(x, _plan_for(x, spec, params, "asymm"), params, mode)[0]


def block_backward(x, spec: BlockSpec, params: dict, grad_out, mode: str = "train"):
    """Gradients of the block output w.r.t. ``x`` and every trainable tensor.

    Running statistics in ``params`` are left untouched.
    """
    plan = _plan_for(x, spec, params, spec.kind)
    scratch = {k: (v.copy() if k.endswith(("running_mean", "running_var")) else v)
               for k, v in params.items()}
    _, cache = forward(x, plan, scratch, mode)
    return backward(plan, scratch, cache, grad_out)
