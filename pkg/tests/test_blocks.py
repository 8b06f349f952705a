import numpy as np
import pytest

from microdet import nn, ops
from microdet.errors import ConfigError, ShapeError, StateError
from microdet.gradsuite import BLOCKS, TOLERANCE, run_check
from microdet.rng import Rng
from microdet.tensor import Tensor, no_grad
from microdet.weights import decode_tdw, encode_tdw


def f64(mod):
    mod.to(np.float64)
    mod.eval()
    return mod


def randomize_bn(mod, seed=0):
    r = Rng(seed)
    for _, m in mod.named_modules():
        if isinstance(m, nn.BatchNorm2d):
            k = m.gamma.shape[0]
            m.gamma.data[:] = r.uniform(0.5, 1.5, k)
            m.beta.data[:] = r.normal(0, 0.3, k)
            m.set_buffer("running_mean", r.normal(0, 0.3, k).astype(m.running_mean.dtype))
            m.set_buffer("running_var", r.uniform(0.5, 1.5, k).astype(m.running_var.dtype))


def x64(*shape, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal(shape))


def run(mod, *a):
    with no_grad():
        return mod(*a).data


# CBS

def test_cbs_shape_and_gamma_zero():
    m = nn.CBS(3, 16, 3, 2)
    assert m(Tensor(np.zeros((1, 3, 32, 32), np.float32))).shape == (1, 16, 16, 16)
    m = f64(nn.CBS(3, 4, 3, 1))
    m.train()
    beta = np.array([0.3, -0.2, 1.0, 0.0])
    m.bn.gamma.data[:] = 0.0
    m.bn.beta.data[:] = beta
    y = run(m, x64(2, 3, 5, 5))
    silu = beta / (1 + np.exp(-beta))
    np.testing.assert_allclose(y, np.broadcast_to(silu[None, :, None, None], y.shape), rtol=1e-15)


def test_cbs_even_kernel_rejected():
    with pytest.raises(ConfigError):
        nn.CBS(3, 4, 2)


# ghost

def test_ghost_channel_arithmetic_and_identity_slice():
    m = f64(nn.GhostConv(nn.GhostSpec(16, 32, 2, 1, 3)))
    randomize_bn(m)
    assert m.primary.conv.weight.shape == (16, 16, 1, 1)
    assert m.cheap.conv.weight.shape == (16, 1, 3, 3)
    x = x64(1, 16, 6, 6)
    y = run(m, x)
    assert y.shape == (1, 32, 6, 6)
    np.testing.assert_array_equal(y[:, :16], run(m.primary, x))


@pytest.mark.parametrize("c_out,s", [(8, 2), (12, 3), (12, 4), (9, 3), (5, 1)])
def test_ghost_output_channels(c_out, s):
    m = nn.GhostConv(nn.GhostSpec(4, c_out, s, 1, 3))
    assert m(Tensor(np.zeros((1, 4, 4, 4), np.float32))).shape[1] == c_out


def test_ghost_s1_is_plain_cbs():
    m = f64(nn.GhostConv(nn.GhostSpec(4, 6, 1, 3, 3), rng=Rng(2)))
    plain = f64(nn.CBS(4, 6, 3, rng=Rng(2).spawn(0)))
    x = x64(1, 4, 5, 5)
    assert m.cheap is None
    np.testing.assert_array_equal(run(m, x), run(plain, x))


def test_ghost_spec_rejects_indivisible():
    with pytest.raises(ConfigError):
        nn.GhostSpec(4, 7, 2)


def test_ghost_macs_closed_form_and_below_plain():
    c_in, c_out, k, hw = 16, 32, 3, 8
    x = Tensor(np.zeros((1, c_in, hw, hw), np.float32))
    with no_grad(), ops.count_macs() as g:
        nn.GhostConv(nn.GhostSpec(c_in, c_out, 2, k, 3))(x)
    with no_grad(), ops.count_macs() as p:
        nn.CBS(c_in, c_out, k)(x)
    m = c_out // 2
    assert g.total == hw * hw * (c_in * m * k * k + m * 1 * 3 * 3)
    assert p.total == hw * hw * c_in * c_out * k * k
    assert g.total < p.total


def test_ghost_bottleneck_shapes_and_zero_main_path():
    m = nn.GhostBottleneck(8, 16, 8, 1)
    assert m(Tensor(np.zeros((1, 8, 6, 6), np.float32))).shape == (1, 8, 6, 6)
    assert nn.GhostBottleneck(8, 16, 12, 2)(Tensor(np.zeros((1, 8, 6, 6), np.float32))).shape == (1, 12, 3, 3)
    m = f64(nn.GhostBottleneck(8, 16, 8, 1))
    for bn in (m.ghost2.primary.bn, m.ghost2.cheap.bn):
        bn.gamma.data[:] = 0.0
        bn.beta.data[:] = 0.0
    x = x64(2, 8, 5, 5)
    np.testing.assert_array_equal(run(m, x), x.data)
    with pytest.raises(ConfigError):
        nn.GhostBottleneck(8, 8, 8, 3)


# C3

def test_c3_n0_degenerates():
    m = f64(nn.C3(6, 10, 0))
    randomize_bn(m)
    x = x64(1, 6, 4, 4)
    with no_grad():
        ref = m.cv3(ops.concat([m.cv1(x), m.cv2(x)], axis=1)).data
    np.testing.assert_array_equal(run(m, x), ref)
    assert ref.shape == (1, 10, 4, 4)


# RepConvN

def test_rep_fused_kernel_center_pad():
    m = f64(nn.RepConvN(3, 4))
    m.conv3.weight.data[:] = 0.0
    w1 = np.random.default_rng(0).standard_normal((4, 3, 1, 1))
    m.conv1.weight.data[:] = w1
    k, _ = m.fused_kernel()
    s = 1 / np.sqrt(1 + 1e-5)
    expect = np.zeros((4, 3, 3, 3))
    expect[:, :, 1, 1] = w1[:, :, 0, 0] * s
    np.testing.assert_allclose(k, expect, rtol=1e-15)


def test_rep_bn_folding_formula():
    m = f64(nn.RepConvN(2, 3))
    randomize_bn(m, 4)
    k, b = m.fused_kernel()
    bn3, bn1 = m.bn3, m.bn1
    sd3 = np.sqrt(bn3.running_var + bn3.eps)
    sd1 = np.sqrt(bn1.running_var + bn1.eps)
    k_ref = m.conv3.weight.data * (bn3.gamma.data / sd3)[:, None, None, None]
    k_ref[:, :, 1, 1] += m.conv1.weight.data[:, :, 0, 0] * (bn1.gamma.data / sd1)[:, None]
    b_ref = (bn3.beta.data - bn3.running_mean * bn3.gamma.data / sd3) + (bn1.beta.data - bn1.running_mean * bn1.gamma.data / sd1)
    np.testing.assert_allclose(k, k_ref, rtol=1e-14)
    np.testing.assert_allclose(b, b_ref, rtol=1e-14, atol=1e-15)


def test_rep_zero_branches_give_beta_bias():
    m = f64(nn.RepConvN(2, 3))
    randomize_bn(m, 5)
    m.conv3.weight.data[:] = 0.0
    m.conv1.weight.data[:] = 0.0
    k, b = m.fused_kernel()
    assert not k.any()
    np.testing.assert_allclose(b, m.bn3.beta.data + m.bn1.beta.data - m.bn3.running_mean * m.bn3.gamma.data
                               / np.sqrt(m.bn3.running_var + 1e-5) - m.bn1.running_mean * m.bn1.gamma.data
                               / np.sqrt(m.bn1.running_var + 1e-5), rtol=1e-14)


@pytest.mark.parametrize("stride", [1, 2])
def test_rep_fuse_equivalence_f64(stride):
    m = f64(nn.RepConvN(5, 7, stride, rng=Rng(9)))
    randomize_bn(m, 9)
    x = x64(2, 5, 9, 9, seed=3)
    ref = run(m, x)
    m.fuse()
    assert np.max(np.abs(run(m, x) - ref)) < 1e-10


def test_rep_state_machine():
    m = nn.RepConvN(2, 2)
    with pytest.raises(StateError):
        m.fused_kernel()                          # training-mode BN
    m.eval()
    with pytest.raises(StateError):
        m(Tensor(np.zeros((1, 2, 3, 3), np.float32)), mode="deploy")
    m.fuse()
    with pytest.raises(StateError):
        m.fuse()
    with pytest.raises(StateError):
        m(Tensor(np.zeros((1, 2, 3, 3), np.float32)), mode="train")


# FC block

def test_fc_depth1_single_input_degenerate():
    m = f64(nn.FCBlock(4, 6, depth=1))
    randomize_bn(m, 1)
    x = x64(1, 4, 5, 5)
    with no_grad():
        ref = m.out(ops.concat([m.passthrough(x), m.convs[0](m.reps[0](m.entry(x)))], axis=1)).data
    np.testing.assert_array_equal(run(m, [x]), ref)


def test_fc_channel_contract_and_spatial_error():
    m = nn.FCBlock(12, 8, depth=2)
    a = Tensor(np.zeros((1, 4, 4, 4), np.float32))
    b = Tensor(np.zeros((1, 8, 4, 4), np.float32))
    assert m([a, b]).shape == (1, 8, 4, 4)
    assert nn.FCBlock(12, 8)([Tensor(np.zeros((1, 12, 4, 4), np.float32))]).shape == (1, 8, 4, 4)
    with pytest.raises(ShapeError):
        m([a, Tensor(np.zeros((1, 8, 2, 2), np.float32))])


# coordinate attention

def test_ca_saturated_gates_pass_input_through():
    m = f64(nn.CoordAttention(4))
    for g in (m.gate_h, m.gate_w):
        g.weight.data[:] = 0.0
        g.bias.data[:] = 20.0
    x = Tensor(np.random.default_rng(0).uniform(-1, 1, (2, 4, 5, 3)))
    assert np.max(np.abs(run(m, x) - x.data)) < 1e-8


@pytest.mark.parametrize("r", [1, 4, 16, 64])
def test_ca_shape_preserving(r):
    assert nn.CoordAttention(32, r)(Tensor(np.zeros((2, 32, 8, 8), np.float32))).shape == (2, 32, 8, 8)


# transformer

def _ln(t, eps=1e-5):
    return (t - t.mean(-1, keepdims=True)) / np.sqrt(t.var(-1, keepdims=True) + eps)


def test_transformer_zeroed_paths_leave_layernorm_identity():
    m = f64(nn.TransformerEncoder(8, 16, heads=2, rng=Rng(1)))
    layer = m.layers[0]
    for lin in (layer.proj, layer.mlp_out):
        lin.weight.data[:] = 0.0
        lin.bias.data[:] = 0.0
    x = x64(2, 8, 4, 4)
    tok = x.data.reshape(2, 8, 16).transpose(0, 2, 1) + m.pos.data
    ref = _ln(_ln(tok)).transpose(0, 2, 1).reshape(2, 8, 4, 4)
    y = run(m, x)
    assert y.shape == x.shape
    np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-12)


def test_transformer_attention_rows_and_errors():
    m = f64(nn.TransformerEncoder(8, 16, heads=2))
    run(m, x64(1, 8, 3, 3))
    rows = m.layers[0].last_attention.sum(axis=-1)
    assert np.max(np.abs(rows - 1.0)) < 1e-12
    with pytest.raises(ConfigError):
        nn.TransformerEncoder(6, 16, heads=4)
    with pytest.raises(ShapeError):
        m(x64(1, 8, 5, 5))


# SPPF

def test_sppf_constant_and_shape():
    m = f64(nn.SPPF(6, 5))
    randomize_bn(m, 2)
    y = run(m, Tensor(np.full((1, 6, 4, 4), 0.7)))
    assert y.shape == (1, 5, 4, 4)
    np.testing.assert_allclose(y, np.broadcast_to(y[:, :, :1, :1], y.shape), rtol=0, atol=1e-15)
    assert nn.SPPF(64, 32)(Tensor(np.zeros((1, 64, 4, 4), np.float32))).shape == (1, 32, 4, 4)


# serialization

def test_block_params_round_trip_bit_identical():
    m = nn.FCBlock(8, 8, rng=Rng(3))
    randomize_bn(m, 3)
    m.eval()
    state = decode_tdw(encode_tdw(m.state_dict()))
    x = Tensor(np.random.default_rng(1).standard_normal((1, 8, 4, 4)).astype(np.float32))
    ref = run(m, x)
    fresh = nn.FCBlock(8, 8, rng=Rng(99))
    fresh.load_state_dict(state)
    fresh.eval()
    assert run(fresh, x).tobytes() == ref.tobytes()
    names = [n for n, _ in m.named_parameters()]
    assert len(names) == len(set(names))


@pytest.mark.parametrize("name", list(BLOCKS))
def test_block_grad_check(name):
    assert run_check(name, seed=3) < TOLERANCE
