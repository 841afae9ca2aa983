import numpy as np
import pytest

from asymmkit import blocks, ops
from asymmkit.blocks import BlockSpec, BlockSpecError, init_block_params, plan_block
from asymmkit.ops import BatchNormState, ConvParams
from asymmkit.train import BlockModule, gradcheck


def make(spec, c_in, seed=0):
    plan = plan_block(spec, c_in)
    return plan, init_block_params(plan, np.random.default_rng(seed))


def test_zero_branch_is_identity():
    spec = BlockSpec("mmblock", 3, 24, 8, 1, True, "hswish")
    plan, params = make(spec, 8)
    params["project.weight"][...] = 0
    x = np.random.default_rng(1).standard_normal((2, 8, 5, 5))
    assert np.array_equal(blocks.mmblock_forward(x, spec, params), x)


def test_mmblock_table_shape():
    spec = BlockSpec("mmblock", 3, 64, 24, 2)
    _, params = make(spec, 16)
    x = np.random.default_rng(2).standard_normal((1, 16, 112, 112)).astype(np.float32)
    params = {k: v.astype(np.float32) for k, v in params.items()}
    assert blocks.mmblock_forward(x, spec, params, "infer").shape == (1, 24, 56, 56)


def _straight_line(x, plan, p, nl):
    """The block written out as plain op calls."""
    def bn(h, role):
        st = BatchNormState(p[f"{role}.bn.gamma"], p[f"{role}.bn.beta"],
                            p[f"{role}.bn.running_mean"].copy(), p[f"{role}.bn.running_var"].copy())
        return ops.batchnorm_forward(h, st, "train")[0]
    parts = [x] * plan.copies
    if plan.has_expand:
        e = ops.conv2d_forward(x, p["expand.weight"], ConvParams.pointwise(x.shape[1], plan.expand_out))
        parts.append(ops.activation(bn(e, "expand"), nl))
    h = np.concatenate(parts, axis=1) if len(parts) > 1 else parts[0]
    h = ops.activation(bn(ops.conv2d_forward(h, p["dw.weight"], ConvParams.depthwise(
        plan.dw_width, plan.kernel, plan.stride)), "dw"), nl)
    if plan.se_width:
        h = ops.squeeze_excite(h, p["se.reduce.weight"], p["se.expand.weight"])
    y = bn(ops.conv2d_forward(h, p["project.weight"], ConvParams.pointwise(
        plan.dw_width, plan.out_channels)), "project")
    return y + x if plan.residual else y


@pytest.mark.parametrize("spec,c", [
    (BlockSpec("mmblock", 3, 24, 8, 1, True, "hswish"), 8),
    (BlockSpec("pruned", 5, 20, 12, 2, False, "relu"), 8),
    (BlockSpec("asymm", 3, 24, 8, 1, True, "hswish", 1), 8),
    (BlockSpec("asymm", 3, 40, 8, 1, False, "relu", 2), 8),
])
def test_matches_straight_line_composition(spec, c):
    plan, params = make(spec, c, seed=3)
    x = np.random.default_rng(4).standard_normal((2, c, 6, 6))
    want = _straight_line(x, plan, params, spec.nonlinearity)
    got = blocks.forward(x, plan, {k: v.copy() for k, v in params.items()})[0]
    assert np.array_equal(got, want)


def test_pruned_channel_split():
    plan = plan_block(BlockSpec("pruned", 3, 72, 24), 24)
    assert (plan.expand_out, plan.copies, plan.dw_width) == (48, 1, 72)


def test_pruned_needs_room():
    with pytest.raises(BlockSpecError):
        plan_block(BlockSpec("pruned", 3, 16, 16), 16)


def test_pruned_duplicated_features_visible_in_concat():
    spec = BlockSpec("pruned", 3, 16, 8, 1, False, "relu")
    plan, params = make(spec, 8)
    params["expand.weight"][...] = np.eye(8).reshape(8, 8, 1, 1)
    params["expand.bn.running_var"][...] = 1 - 1e-5
    x = np.abs(np.random.default_rng(5).standard_normal((1, 8, 4, 4))) + 0.1
    _, cache = blocks.forward(x, plan, params, "infer")
    reused, generated = cache["cat"][:, :8], cache["cat"][:, 8:]
    assert np.array_equal(reused, x)
    assert np.allclose(generated, x, rtol=1e-12, atol=0)


def test_asymm_copies_are_bitwise_x():
    spec = BlockSpec("asymm", 3, 24, 8, 1, False, "relu", 2)
    plan, params = make(spec, 8)
    assert plan.copies == 4 and plan.expand_out == 8 and plan.dw_width == 40
    x = np.random.default_rng(6).standard_normal((2, 8, 4, 4))
    _, cache = blocks.forward(x, plan, params)
    for i in range(4):
        assert np.array_equal(cache["cat"][:, i * 8:(i + 1) * 8], x)


def test_asymm_rate_clamped():
    plan = plan_block(BlockSpec("asymm", 3, 16, 16, 1, True, "relu", 1), 16)
    assert plan.rate_eff == 0 and plan.dw_width == 16
    twin = plan_block(BlockSpec("mmblock", 3, 16, 16, 1, True, "relu"), 16)
    assert plan.param_shapes() == twin.param_shapes()
    assert blocks.effective_rate(2, 8, 16) == 0 and blocks.effective_rate(1, 8, 16) == 1


def test_asymm_table_channel_arithmetic():
    plan = plan_block(BlockSpec("asymm", 5, 120, 40, 1, True, "relu", 1), 40)
    assert plan.expand_out == 80 and plan.copies * 40 == 80 and plan.dw_width == 160
    assert plan.param_shapes()["se.reduce.weight"][1] == 160


@pytest.mark.parametrize("seed", range(5))
def test_rate_zero_degenerates_bitwise(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(2, 9))
    p = int(rng.integers(c + 1, 4 * c))
    spec = BlockSpec("asymm", int(rng.choice([3, 5])), p, c, int(rng.choice([1, 2])),
                     bool(rng.integers(2)), str(rng.choice(["relu", "hswish"])), 0)
    twin = BlockSpec("mmblock", *[getattr(spec, f) for f in
                                  ("kernel", "expand", "out_channels", "stride", "use_se", "nonlinearity")])
    _, params = make(spec, c, seed)
    x = rng.standard_normal((2, c, 6, 6))
    g = rng.standard_normal(blocks.asymm_forward(x, spec, dict(params), "infer").shape)
    assert np.array_equal(blocks.asymm_forward(x, spec, params, "infer"),
                          blocks.mmblock_forward(x, twin, params, "infer"))
    ga = blocks.block_backward(x, spec, params, g)
    gm = blocks.block_backward(x, twin, params, g)
    assert np.array_equal(ga[0], gm[0])
    assert ga[1].keys() == gm[1].keys()
    assert all(np.array_equal(ga[1][k], gm[1][k]) for k in ga[1])


def test_zero_grad_out_gives_zero_grads():
    spec = BlockSpec("asymm", 3, 24, 8, 1, True, "hswish", 1)
    _, params = make(spec, 8)
    x = np.random.default_rng(7).standard_normal((2, 8, 4, 4))
    gx, grads = blocks.block_backward(x, spec, params, np.zeros((2, 8, 4, 4)))
    assert not gx.any() and not any(v.any() for v in grads.values())


def test_block_backward_keeps_running_stats():
    spec = BlockSpec("mmblock", 3, 16, 8)
    _, params = make(spec, 8)
    before = {k: v.copy() for k, v in params.items()}
    x = np.random.default_rng(8).standard_normal((2, 8, 4, 4))
    blocks.block_backward(x, spec, params, np.ones((2, 8, 4, 4)))
    assert all(np.array_equal(before[k], params[k]) for k in params)


@pytest.mark.parametrize("spec,c", [
    (BlockSpec("mmblock", 3, 24, 8, 1, True, "hswish"), 8),
    (BlockSpec("mmblock", 3, 8, 8, 1, False, "relu"), 8),
    (BlockSpec("pruned", 3, 24, 8, 1, True, "relu"), 8),
    (BlockSpec("asymm", 3, 24, 8, 1, True, "hswish", 1), 8),
    (BlockSpec("asymm", 5, 32, 12, 2, True, "relu", 1), 8),
    (BlockSpec("dwsep", 3, None, 12, 2, False, "relu"), 8),
])
def test_block_gradcheck(spec, c):
    plan, params = make(spec, c, seed=9)
    rep = gradcheck(BlockModule(plan, params), (2, c, 6, 6), seed=9)
    assert rep.param_coords >= 100 and rep.input_coords >= 50
    assert rep.max_rel_err < 1e-5, rep.worst


def test_shape_preserved_when_residual():
    rng = np.random.default_rng(10)
    for kind in ("mmblock", "pruned", "asymm"):
        spec = BlockSpec(kind, 3, 20, 6, 1, True, "hswish", 1)
        plan, params = make(spec, 6)
        assert plan.residual
        x = rng.standard_normal((2, 6, 5, 5))
        assert blocks.forward(x, plan, params)[0].shape == x.shape


def test_wrong_kind_and_missing_params():
    spec = BlockSpec("mmblock", 3, 16, 8)
    _, params = make(spec, 8)
    x = np.zeros((2, 8, 4, 4))
    with pytest.raises(BlockSpecError):
        blocks.asymm_forward(x, spec, params)
    del params["dw.weight"]
    with pytest.raises(Exception):
        blocks.mmblock_forward(x, spec, params)


def test_spec_validation():
    with pytest.raises(BlockSpecError):
        BlockSpec("ghost", 3, 16, 8)
    with pytest.raises(BlockSpecError):
        BlockSpec("asymm", 3, 16, 8, rate=-1)
    with pytest.raises(BlockSpecError):
        BlockSpec("mmblock", 3, None, 8)
