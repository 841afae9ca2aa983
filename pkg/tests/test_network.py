from dataclasses import replace

import numpy as np
import pytest

from asymmkit.cost import network_cost
from asymmkit.network import build_network, shape_trace
from asymmkit.tensor import TensorError
from asymmkit.zoo import BUILTIN_NAMES, builtin_spec, scale_spec


def tiny(name="asymmnet-s", alpha=0.35, res=32, classes=10):
    return replace(scale_spec(builtin_spec(name), alpha), resolution=res, num_classes=classes)


def test_large_shape_trace():
    trace = shape_trace(builtin_spec("asymmnet-l"))
    sizes = [112, 112, 56, 56, 28, 28, 28, 14, 14, 14, 14, 14, 14, 7, 7]
    chans = [16, 16, 24, 24, 40, 40, 40, 80, 80, 80, 80, 112, 112, 160, 160]
    assert trace[0].shape == (1, 3, 224, 224)
    assert [t.shape for t in trace[1:16]] == [(1, c, s, s) for c, s in zip(chans, sizes)]
    assert trace[16].shape == (1, 160, 7, 7)
    assert trace[17].shape == (1, 960, 7, 7)


def test_small_pre_pool_features():
    assert shape_trace(builtin_spec("asymmnet-s"), batch=2)[-1].shape == (2, 576, 7, 7)


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_pre_pool_size_at_64(name):
    spec = replace(builtin_spec(name), resolution=64)
    assert shape_trace(spec)[-1].shape[2:] == (2, 2)


def test_forward_shapes_and_dtype():
    net, _ = build_network(tiny(), dtype=np.float32)
    x = np.random.default_rng(0).standard_normal((4, 3, 32, 32)).astype(np.float32)
    logits, _ = net.forward(x)
    assert logits.shape == (4, 10) and logits.dtype == np.float32
    with pytest.raises(TensorError):
        net.forward(x.astype(np.float64))


def test_build_is_deterministic():
    _, a = build_network(tiny(), seed=3)
    _, b = build_network(tiny(), seed=3)
    _, c = build_network(tiny(), seed=4)
    assert list(a.state()) == list(b.state())
    assert all(np.array_equal(a[k], b[k]) for k in a.state())
    assert not np.array_equal(a["00.conv.weight"], c["00.conv.weight"])


def test_names_sorted_by_layer_then_role():
    _, store = build_network(tiny())
    names = list(store.params)
    layers = [n.split(".")[0] for n in names]
    assert layers == sorted(layers)
    assert names[0] == "00.conv.weight"
    assert names[-1].endswith("conv.bias")
    assert all(".running_" in n for n in store.buffers)


def test_no_decay_flags():
    _, store = build_network(tiny())
    for name, p in store.params.items():
        assert p.no_decay == (".bn." in name or name.endswith(".bias"))


@pytest.mark.parametrize("name", BUILTIN_NAMES)
@pytest.mark.parametrize("alpha", [0.35, 0.5, 0.75, 1.0, 1.25])
def test_params_match_cost_analyzer(name, alpha):
    spec = scale_spec(builtin_spec(name), alpha)
    _, store = build_network(spec, dtype=np.float32)
    assert store.num_params() == network_cost(spec).params


def test_rate_zero_params_match_mbv3():
    a = builtin_spec("asymmnet-l").with_rate(0)
    _, sa = build_network(a, dtype=np.float32)
    _, sm = build_network(builtin_spec("mbv3-l"), dtype=np.float32)
    assert sa.num_params() == sm.num_params()


def test_infer_mode_leaves_buffers():
    net, store = build_network(tiny())
    before = {k: v.copy() for k, v in store.buffers.items()}
    net.predict(np.random.default_rng(1).standard_normal((2, 3, 32, 32)))
    assert all(np.array_equal(before[k], store.buffers[k]) for k in before)
    net.forward(np.random.default_rng(1).standard_normal((2, 3, 32, 32)), "train")
    assert any(not np.array_equal(before[k], store.buffers[k]) for k in before)


@pytest.mark.parametrize("name", ["mbv1", "mbv2", "pruned-s", "mbv3-l"])
def test_other_builtins_run(name):
    net, _ = build_network(tiny(name, 0.35, 32, 5))
    gx, grads = net.backward(*_fwd(net))
    assert gx.shape == (2, 3, 32, 32) and len(grads) == len(net.store.params)


def _fwd(net):
    x = np.random.default_rng(2).standard_normal((2, 3, 32, 32))
    logits, tape = net.forward(x)
    return tape, np.ones_like(logits)
