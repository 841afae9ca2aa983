"""SGD with momentum, warmup + cosine schedule, gradient checks, toy training."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import blocks, ops
from .blocks import BlockPlan
from .data import Dataset, DatasetError
from .network import Network, build_network
from .ops import ConvParams
from .store import ParamStore
from .zoo import NetworkSpec

__all__ = [
    "ParamStore", "TrainConfig", "lr_at", "sgd_step", "gradcheck", "GradcheckReport",
    "BlockModule", "ConvModule", "train_toy",
]


class NumericError(ArithmeticError):
    """Non-finite values or a failed numeric check."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 3e-5
    epochs: int = 125
    warmup_epochs: int = 5
    batch_size: int = 16
    seed: int = 0
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("lr, momentum and weight decay must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup epochs must lie in [0, epochs]")


def lr_at(step: float, config: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Linear warmup from 0, then half-cosine decay to 0 at the last step."""
    total = config.epochs * steps_per_epoch
    warm = config.warmup_epochs * steps_per_epoch
    if step < warm:
        return config.lr * step / warm
    if total == warm:
        return config.lr
    progress = min(1.0, (step - warm) / (total - warm))
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_step(store: ParamStore, lr: float, config: TrainConfig) -> None:
    """``v = m v + g + wd w`` (no decay on BN terms and biases); ``w -= lr v``."""
    for p in store.params.values():
        g = p.grad
        if config.weight_decay and not p.no_decay:
            g = g + config.weight_decay * p.value
        p.momentum *= config.momentum
        p.momentum += g
        p.value -= lr * p.momentum
        p.grad[...] = 0


# ------------------------------------------------------------------ gradcheck


class ConvModule:
    """A single bias-free convolution wrapped for :func:`gradcheck`."""

    def __init__(self, params: ConvParams, weight: np.ndarray):
        self.conv = params
        self.params = {"weight": weight}

    def forward(self, x, mode="train"):
        return ops.conv2d_forward(x, self.params["weight"], self.conv), x

    def backward(self, x, g):
        gx, gw = ops.conv2d_backward(x, self.params["weight"], self.conv, g)
        return gx, {"weight": gw}


class BlockModule:
    """One block (plan + tensor dict) wrapped for :func:`gradcheck`."""

    def __init__(self, plan: BlockPlan, params: dict):
        self.plan = plan
        self.all = params
        self.params = {k: params[k] for k in plan.param_shapes()}

    def forward(self, x, mode="train"):
        return blocks.forward(x, self.plan, self.all, mode)

    def backward(self, cache, g):
        return blocks.backward(self.plan, self.all, cache, g)


class NetworkModule:
    def __init__(self, net: Network):
        self.net = net
        self.params = {n: p.value for n, p in net.store.params.items()}

    def forward(self, x, mode="train"):
        return self.net.forward(x, mode)

    def backward(self, tape, g):
        return self.net.backward(tape, g)


@dataclass
class GradcheckReport:
    max_rel_err: float
    max_param_err: float
    max_input_err: float
    param_coords: int
    input_coords: int
    worst: str = ""

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def _sample_coords(params: dict, n: int, rng) -> list[tuple[str, int]]:
    names = [k for k in params if params[k].size]
    if not names:
        return []
    coords = [(name, int(rng.integers(params[name].size))) for name in names]
    sizes = np.array([params[k].size for k in names], dtype=np.float64)
    for _ in range(max(0, n - len(coords))):
        name = names[int(rng.choice(len(names), p=sizes / sizes.sum()))]
        coords.append((name, int(rng.integers(params[name].size))))
    return coords


def gradcheck(model, input_shape, seed: int = 0, n_params: int = 100, n_inputs: int = 50,
              eps: float = 1e-5, x: Optional[np.ndarray] = None) -> GradcheckReport:
    """Central-difference check of ``model``'s backward pass in float64.

    The scalar loss is ``sum(output * P)`` for a fixed random projection
    ``P``.  Accepts a :class:`~asymmkit.network.Network`, or any object with
    ``params`` (name -> array), ``forward(x, mode) -> (y, cache)`` and
    ``backward(cache, grad_y) -> (grad_x, grads)``.
    """
    if isinstance(model, Network):
        model = NetworkModule(model)
    rng = np.random.default_rng(seed)
    if x is None:
        x = rng.standard_normal(tuple(input_shape))
    if x.dtype != np.float64 or any(p.dtype != np.float64 for p in model.params.values()):
        raise NumericError("gradcheck needs float64 inputs and parameters")
    y, cache = model.forward(x, "train")
    proj = rng.standard_normal(y.shape)
    gx, grads = model.backward(cache, proj)

    def loss(inp):
        out = model.forward(inp, "train")[0]
        val = float(np.sum(out * proj))
        if not math.isfinite(val):
            raise NumericError("non-finite loss during gradcheck")
        return val

    worst, worst_name = 0.0, ""
    p_err = 0.0
    coords = _sample_coords(model.params, n_params, rng)
    for name, idx in coords:
        arr = model.params[name].reshape(-1)
        old = arr[idx]
        arr[idx] = old + eps
        lp = loss(x)
        arr[idx] = old - eps
        lm = loss(x)
        arr[idx] = old
        e = rel_err(grads[name].reshape(-1)[idx], (lp - lm) / (2 * eps))
        p_err = max(p_err, e)
        if e > worst:
            worst, worst_name = e, f"{name}[{idx}]"
    i_err = 0.0
    xf = x.reshape(-1)
    n_in = min(n_inputs, xf.size)
    for idx in rng.choice(xf.size, size=n_in, replace=False):
        old = xf[idx]
        xf[idx] = old + eps
        lp = loss(x)
        xf[idx] = old - eps
        lm = loss(x)
        xf[idx] = old
        e = rel_err(gx.reshape(-1)[idx], (lp - lm) / (2 * eps))
        i_err = max(i_err, e)
        if e > worst:
            worst, worst_name = e, f"input[{idx}]"
    return GradcheckReport(worst, p_err, i_err, len(coords), n_in, worst_name)


# ------------------------------------------------------------------ training


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.epochs[-1]["train_acc"] if self.epochs else 0.0

    def first_step_reaching(self, acc: float) -> Optional[int]:
        for e in self.epochs:
            if e["train_acc"] >= acc:
                return e["step"]
        return None


def evaluate(net: Network, data: Dataset, batch_size: int = 64) -> float:
    correct = 0
    for i in range(0, len(data), batch_size):
        logits = net.predict(data.images[i:i + batch_size])
        correct += int(np.sum(logits.argmax(axis=1) == data.labels[i:i + batch_size]))
    return correct / len(data)


def train_toy(spec: NetworkSpec, data: Dataset, config: TrainConfig,
              on_record: Optional[Callable[[dict], None]] = None,
              dtype=np.float32, stop_at: Optional[float] = None):
    """Train ``spec`` on ``data``; returns ``(network, store, log)``.

    Batches are taken in dataset order every epoch.  Every step and every
    epoch-end evaluation (infer-mode accuracy over the
    whole dataset) is appended to the log and passed to ``on_record``.
    ``stop_at`` ends training once the epoch accuracy reaches that value.
    """
    if len(data) == 0:
        raise DatasetError("dataset is empty")
    if data.labels.max() >= spec.num_classes:
        raise DatasetError(f"labels reach {data.labels.max()}, head has {spec.num_classes} classes")
    net, store = build_network(spec, seed=config.seed, dtype=dtype)
    images = data.images.astype(dtype, copy=False)
    spe = math.ceil(len(data) / config.batch_size)
    total = config.epochs * spe
    if config.max_steps is not None:
        total = min(total, config.max_steps)
    log = TrainLog()
    emit = on_record or (lambda rec: None)
    step = 0
    for epoch in range(config.epochs):
        for b in range(spe):
            if step >= total:
                break
            idx = slice(b * config.batch_size, (b + 1) * config.batch_size)
            lr = lr_at(step, config, spe)
            with np.errstate(over="ignore", invalid="ignore"):
                logits, tape = net.forward(images[idx], "train")
                loss, g = ops.softmax_cross_entropy(logits, data.labels[idx])
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at step {step}")
            acc = float(np.mean(logits.argmax(axis=1) == data.labels[idx]))
            _, grads = net.backward(tape, g.astype(dtype))
            store.accumulate(grads)
            sgd_step(store, lr, config)
            rec = {"step": step, "lr": lr, "loss": loss, "acc": acc}
            log.steps.append(rec)
            emit(rec)
            step += 1
        ev = {"epoch": epoch, "step": step, "train_acc": evaluate(net, data)}
        log.epochs.append(ev)
        emit(ev)
        if step >= total or (stop_at is not None and ev["train_acc"] >= stop_at):
            break
    return net, store, log


def format_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=False)
