"""Instantiate a :class:`~asymmkit.zoo.NetworkSpec` as a trainable network.

Layer layout: stem conv + BN + act, the block rows, then the head
(1x1 conv + BN + act, global average pool, 1x1 conv + act, 1x1 classifier
conv with bias).  Tensor names are ``"<layer index>.<role>"`` with a
zero-padded index, e.g. ``"03.dw.weight"``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import blocks, ops
from .ops import BatchNormState
from .store import ParamStore
from .tensor import TensorError, check_tensor, global_avg_pool, global_avg_pool_backward
from .zoo import NetworkPlan, NetworkSpec, resolve


def _he(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Network:
    """Forward/backward over a resolved plan; tensors live in a ParamStore."""

    def __init__(self, plan: NetworkPlan, store: ParamStore, bn_momentum: float = 0.9):
        self.plan = plan
        self.store = store
        self.bn_momentum = bn_momentum
        n = len(plan.blocks)
        self.width = _index_width(n)
        self.stem_name = self._name(0)
        self.block_names = [self._name(i + 1) for i in range(n)]
        self.last_name = self._name(n + 1)
        self.hidden_name = self._name(n + 2)
        self.classifier_name = self._name(n + 3)
        self._views = {p: store.view(p + ".") for p in
                       [self.stem_name, *self.block_names, self.last_name,
                        self.hidden_name, self.classifier_name]}

    def _name(self, i: int) -> str:
        return f"{i:0{self.width}d}"

    @property
    def dtype(self):
        return next(iter(self.store.params.values())).value.dtype

    def _bn(self, prefix: str) -> BatchNormState:
        v = self._views[prefix]
        return BatchNormState(v["bn.gamma"], v["bn.beta"], v["bn.running_mean"],
                              v["bn.running_var"], self.bn_momentum)

    def forward(self, x: np.ndarray, mode: str = "train"):
        """Logits of shape (n, classes) and a tape for :meth:`backward`."""
        check_tensor(x)
        if x.dtype != self.dtype:
            raise TensorError(f"input dtype {x.dtype} != network dtype {self.dtype}")
        plan, tape = self.plan, {}
        v = self._views[self.stem_name]
        tape["stem.x"] = x
        h = ops.conv2d_forward(x, v["conv.weight"], plan.stem)
        h, tape["stem.bn"] = ops.batchnorm_forward(h, self._bn(self.stem_name), mode)
        tape["stem.pre"] = h
        h = ops.activation(h, plan.stem_nl)
        caches = []
        for bp, name in zip(plan.blocks, self.block_names):
            h, cache = blocks.forward(h, bp, self._views[name], mode, self.bn_momentum)
            caches.append(cache)
        tape["blocks"] = caches
        nl = plan.head.nonlinearity
        if plan.last_params is not None:
            v = self._views[self.last_name]
            tape["last.x"] = h
            h = ops.conv2d_forward(h, v["conv.weight"], plan.last_params)
            h, tape["last.bn"] = ops.batchnorm_forward(h, self._bn(self.last_name), mode)
            tape["last.pre"] = h
            h = ops.activation(h, nl)
        tape["pool.shape"] = h.shape
        h = global_avg_pool(h)
        if plan.hidden_params is not None:
            tape["hidden.x"] = h
            h = ops.conv2d_forward(h, self._views[self.hidden_name]["conv.weight"], plan.hidden_params)
            tape["hidden.pre"] = h
            h = ops.activation(h, nl)
        v = self._views[self.classifier_name]
        tape["classifier.x"] = h
        h = ops.conv2d_forward(h, v["conv.weight"], plan.classifier_params)
        h = h + v["conv.bias"][None, :, None, None]
        return h.reshape(h.shape[0], -1), tape

    def backward(self, tape: dict, grad_logits: np.ndarray):
        """Input gradient and a dict of gradients keyed by full tensor name."""
        plan, grads = self.plan, {}
        nl = plan.head.nonlinearity
        g = grad_logits.reshape(grad_logits.shape[0], -1, 1, 1)
        c = self.classifier_name
        grads[f"{c}.conv.bias"] = g.sum(axis=(0, 2, 3))
        g, grads[f"{c}.conv.weight"] = ops.conv2d_backward(
            tape["classifier.x"], self._views[c]["conv.weight"], plan.classifier_params, g)
        if plan.hidden_params is not None:
            g = ops.activation_backward(tape["hidden.pre"], nl, g)
            g, grads[f"{self.hidden_name}.conv.weight"] = ops.conv2d_backward(
                tape["hidden.x"], self._views[self.hidden_name]["conv.weight"], plan.hidden_params, g)
        g = global_avg_pool_backward(g, tape["pool.shape"])
        if plan.last_params is not None:
            n = self.last_name
            g = ops.activation_backward(tape["last.pre"], nl, g)
            g, grads[f"{n}.bn.gamma"], grads[f"{n}.bn.beta"] = ops.batchnorm_backward(tape["last.bn"], g)
            g, grads[f"{n}.conv.weight"] = ops.conv2d_backward(
                tape["last.x"], self._views[n]["conv.weight"], plan.last_params, g)
        for bp, name, cache in reversed(list(zip(plan.blocks, self.block_names, tape["blocks"]))):
            g, bg = blocks.backward(bp, self._views[name], cache, g)
            for role, arr in bg.items():
                grads[f"{name}.{role}"] = arr
        n = self.stem_name
        g = ops.activation_backward(tape["stem.pre"], plan.stem_nl, g)
        g, grads[f"{n}.bn.gamma"], grads[f"{n}.bn.beta"] = ops.batchnorm_backward(tape["stem.bn"], g)
        g, grads[f"{n}.conv.weight"] = ops.conv2d_backward(
            tape["stem.x"], self._views[n]["conv.weight"], plan.stem, g)
        return g, {k: grads[k] for k in self.store.params}

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, mode="infer")[0]


def _index_width(n_blocks: int) -> int:
    return max(2, len(str(n_blocks + 4)))


def _add_bn(store: ParamStore, prefix: str, width: int, dtype) -> None:
    store.add(f"{prefix}.bn.gamma", np.ones(width, dtype), no_decay=True)
    store.add(f"{prefix}.bn.beta", np.zeros(width, dtype), no_decay=True)


def _add_bn_buffers(store: ParamStore, prefix: str, width: int, dtype) -> None:
    store.add_buffer(f"{prefix}.bn.running_mean", np.zeros(width, dtype))
    store.add_buffer(f"{prefix}.bn.running_var", np.ones(width, dtype))


def build_network(spec: NetworkSpec, seed: int = 0, dtype=np.float64,
                  bn_momentum: float = 0.9) -> tuple[Network, ParamStore]:
    """Resolve ``spec`` and initialise its tensors deterministically from ``seed``."""
    plan = resolve(spec)
    rng = np.random.default_rng(seed)
    store = ParamStore()
    n = len(plan.blocks)
    width = _index_width(n)
    name = lambda i: f"{i:0{width}d}"  # noqa: E731

    store.add(f"{name(0)}.conv.weight", _he(rng, plan.stem.weight_shape, dtype))
    _add_bn(store, name(0), plan.stem.out_channels, dtype)
    for i, bp in enumerate(plan.blocks, 1):
        init = blocks.init_block_params(bp, rng, dtype)
        for role in bp.param_shapes():
            store.add(f"{name(i)}.{role}", init[role], no_decay=".bn." in role)
    if plan.last_params is not None:
        store.add(f"{name(n + 1)}.conv.weight", _he(rng, plan.last_params.weight_shape, dtype))
        _add_bn(store, name(n + 1), plan.head.last_channels, dtype)
    if plan.hidden_params is not None:
        store.add(f"{name(n + 2)}.conv.weight", _he(rng, plan.hidden_params.weight_shape, dtype))
    cp = plan.classifier_params
    store.add(f"{name(n + 3)}.conv.weight", _he(rng, cp.weight_shape, dtype))
    store.add(f"{name(n + 3)}.conv.bias", np.zeros(cp.out_channels, dtype), no_decay=True)

    _add_bn_buffers(store, name(0), plan.stem.out_channels, dtype)
    for i, bp in enumerate(plan.blocks, 1):
        for role, shape in bp.buffer_shapes().items():
            init = np.ones if role.endswith("var") else np.zeros
            store.add_buffer(f"{name(i)}.{role}", init(shape, dtype))
    if plan.last_params is not None:
        _add_bn_buffers(store, name(n + 1), plan.head.last_channels, dtype)
    return Network(plan, store, bn_momentum), store


@dataclass(frozen=True)
class ShapeTrace:
    layer: str
    shape: tuple[int, int, int, int]


def shape_trace(spec: NetworkSpec, batch: int = 1) -> list[ShapeTrace]:
    """Input shape of every stem/block/head layer, without running anything."""
    plan = resolve(spec)
    r = spec.resolution
    out = [ShapeTrace("stem", (batch, 3, r, r))]
    for i, (bp, size) in enumerate(zip(plan.blocks, plan.sizes), 1):
        out.append(ShapeTrace(f"block{i}", (batch, bp.in_channels, size, size)))
    f = plan.final_size
    out.append(ShapeTrace("head", (batch, plan.head.in_channels, f, f)))
    out.append(ShapeTrace("pool", (batch, plan.pooled_channels, f, f)))
    return out
