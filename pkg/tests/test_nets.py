import numpy as np
import pytest

from canalseg.nets import (
    AttentionGate,
    ChannelAttention,
    CoarseNet,
    FineNet,
    LengthMismatch,
    NetConfig,
    ResidualBlock,
    attention_gate,
    channel_attention,
    forward_coarse,
    forward_fine,
    load_net,
    residual_block,
    save_net,
    supervised_loss,
    zero_weights,
)
from canalseg.tensorkit import Adam, ops
from canalseg.tensorkit.ops import ShapeMismatch

from . import oracles


def _sig(z):
    return 1 / (1 + np.exp(-z))


def _pointwise(x, conv):
    """1^3 convolution written as a channel contraction."""
    w = conv.weight.value[:, :, 0, 0, 0].astype(np.float64)
    return np.einsum("oc,ncdhw->nodhw", w, x) + conv.bias.value[None, :, None, None, None]


# --- attention gate -------------------------------------------------------


def test_gate_matches_additive_formula():
    rng = np.random.default_rng(0)
    gate = AttentionGate(3, 4, 2, rng)
    x = rng.normal(size=(2, 3, 4, 6, 2)).astype(np.float32)
    g = rng.normal(size=(2, 4, 2, 3, 1)).astype(np.float32)
    # oracle upsamples g first, then applies w_g
    g_up = np.stack([np.stack([oracles.trilinear_voxel(g[n, c], x.shape[2:]) for c in range(4)]) for n in range(2)])
    pre = _pointwise(x, gate.w_x) + _pointwise(g_up, gate.w_g)
    alpha = _sig(_pointwise(np.maximum(pre, 0), gate.psi))
    np.testing.assert_allclose(attention_gate(x, g, gate), alpha * x, atol=1e-5)


def test_gate_zero_psi_halves_input():
    rng = np.random.default_rng(1)
    gate = AttentionGate(2, 2, 2, rng)
    gate.psi.weight.value[...] = 0
    gate.psi.bias.value[...] = 0
    x = rng.normal(size=(1, 2, 2, 2, 2)).astype(np.float32)
    out = attention_gate(x, rng.normal(size=(1, 2, 1, 1, 1)).astype(np.float32), gate)
    np.testing.assert_allclose(out, 0.5 * x)
    assert not attention_gate(np.zeros_like(x), np.ones((1, 2, 1, 1, 1), np.float32), gate).any()


def test_gate_rejects_wrong_gating_dims():
    gate = AttentionGate(2, 2, 1, np.random.default_rng(0))
    with pytest.raises(ShapeMismatch):
        gate.forward(np.zeros((1, 2, 4, 4, 4), np.float32), np.zeros((1, 2, 4, 4, 4), np.float32))


# --- channel attention ----------------------------------------------------


def test_se_matches_formula():
    rng = np.random.default_rng(2)
    se = ChannelAttention(6, 3, rng)
    x = rng.normal(size=(2, 6, 3, 2, 4)).astype(np.float32)
    s = x.astype(np.float64).mean(axis=(2, 3, 4))
    z = np.maximum(s @ se.fc1.weight.value.T + se.fc1.bias.value, 0)
    scale = _sig(z @ se.fc2.weight.value.T + se.fc2.bias.value)
    np.testing.assert_allclose(channel_attention(x, se), x * scale[:, :, None, None, None], atol=1e-5)


def test_se_zero_dense_halves_input():
    se = zero_weights(ChannelAttention(4, 2, np.random.default_rng(0)))
    x = np.random.default_rng(3).normal(size=(1, 4, 2, 2, 2)).astype(np.float32)
    np.testing.assert_allclose(channel_attention(x, se), 0.5 * x)


def test_gate_and_se_never_amplify():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 4, 4, 4, 4)).astype(np.float32) * 5
    gate = AttentionGate(4, 3, 2, rng)
    se = ChannelAttention(4, 2, rng)
    g = rng.normal(size=(2, 3, 2, 2, 2)).astype(np.float32) * 5
    assert np.all(np.abs(attention_gate(x, g, gate)) <= np.abs(x))
    assert np.all(np.abs(channel_attention(x, se)) <= np.abs(x))


# --- residual block -------------------------------------------------------


def test_residual_zero_convs_is_relu():
    block = zero_weights(ResidualBlock(3, 3, np.random.default_rng(0)))
    for bn in (block.bn1, block.bn2):
        bn.gamma.value[...] = 1
    x = np.random.default_rng(5).normal(size=(2, 3, 4, 4, 4)).astype(np.float32)
    np.testing.assert_allclose(residual_block(x, block), np.maximum(x, 0))


@pytest.mark.parametrize("cin", [2, 4])
def test_residual_matches_composed_primitives(cin):
    rng = np.random.default_rng(6)
    block = ResidualBlock(cin, 4, rng)
    x = rng.normal(size=(2, cin, 4, 4, 4)).astype(np.float32)

    def bn(h, layer):
        rm, rv = np.zeros(h.shape[1], np.float32), np.ones(h.shape[1], np.float32)
        return ops.batchnorm_forward(h, layer.gamma.value, layer.beta.value, rm, rv, train=True)[0]

    h = np.maximum(bn(ops.conv3_forward(x, block.conv1.weight.value, block.conv1.bias.value), block.bn1), 0)
    h = bn(ops.conv3_forward(h, block.conv2.weight.value, block.conv2.bias.value), block.bn2)
    short = x if block.proj is None else ops.conv3_forward(x, block.proj.weight.value, block.proj.bias.value)
    expected = np.maximum(h + short, 0)
    got = residual_block(x, block, train=True)
    assert got.shape == (2, 4, 4, 4, 4)
    np.testing.assert_allclose(got, expected, atol=1e-5)


# --- coarse net -----------------------------------------------------------


def test_coarse_shapes_and_modes():
    net = CoarseNet(NetConfig(levels=3, base_channels=2, input_dims=(32, 32, 32)))
    x = np.random.default_rng(0).random((1, 1, 32, 32, 32)).astype(np.float32)
    main, aux = net.forward(x, train=True)
    assert main.shape == (1, 1, 32, 32, 32)
    assert [a.shape for a in aux] == [(1, 1, 32, 32, 32)] * 2
    assert all(((a >= 0) & (a <= 1)).all() for a in [main, *aux])
    main_eval, aux_eval = forward_coarse(net, x)
    assert main_eval.shape == main.shape and aux_eval == []


def test_coarse_zero_weights_half_everywhere():
    net = zero_weights(CoarseNet(NetConfig(levels=2, base_channels=2, input_dims=(8, 8, 8))))
    x = np.random.default_rng(1).random((2, 1, 8, 8, 8)).astype(np.float32)
    main, aux = net.forward(x, train=True)
    assert np.all(main == 0.5) and all(np.all(a == 0.5) for a in aux)


def test_coarse_rejects_bad_dims():
    net = CoarseNet(NetConfig(levels=3, base_channels=2, input_dims=(8, 8, 8)))
    with pytest.raises(ShapeMismatch):
        net.forward(np.zeros((1, 1, 6, 8, 8), np.float32))
    with pytest.raises(ShapeMismatch):
        net.forward(np.zeros((1, 2, 8, 8, 8), np.float32))


def test_channel_schedule_doubles():
    cfg = NetConfig(levels=4, base_channels=3, input_dims=(8, 8, 8))
    net = CoarseNet(cfg)
    assert [blk.c2.layers[0].weight.shape[0] for blk in net.enc] == [3, 6, 12, 24]


def test_supervision_defaults_and_length():
    assert NetConfig().supervision_weights == (1.0, 0.5, 0.25)
    with pytest.raises(LengthMismatch):
        NetConfig(levels=3, supervision_weights=(1.0, 0.5))
    with pytest.raises(ValueError):
        NetConfig(levels=3, input_dims=(10, 8, 8))


# --- supervised loss ------------------------------------------------------


def _with_loss(loss, g):
    """A constant prediction whose dice loss against g equals ``loss``."""
    # g has 10 ones; p = c on those voxels only: L = 1 - (2*10c + 1) / (10c + 10 + 1)
    c = (11 * (1 - loss) - 1) / (20 - 10 * (1 - loss))
    return np.where(g > 0, c, 0.0)


def test_supervised_loss_hand_value():
    g = np.zeros((1, 1, 4, 4, 4))
    g.flat[:10] = 1
    heads = [_with_loss(v, g) for v in (0.2, 0.4, 0.6)]
    for p, v in zip(heads, (0.2, 0.4, 0.6)):
        assert ops.dice_loss(p, g)[0] == pytest.approx(v)
    loss, _, _ = supervised_loss(heads[0], heads[1:], g, (1.0, 0.5, 0.25))
    assert loss == pytest.approx((0.2 + 0.2 + 0.15) / 1.75)
    assert round(loss, 4) == 0.3143


def test_supervised_loss_reductions():
    g = (np.random.default_rng(0).random((1, 1, 4, 4, 4)) > 0.5).astype(np.float32)
    assert supervised_loss(g, [g, g], g, (1, 0.5, 0.25))[0] == pytest.approx(0)
    p = np.random.default_rng(1).random(g.shape).astype(np.float32)
    assert supervised_loss(p, [], g, (1.0,))[0] == ops.dice_loss(p, g)[0]
    with pytest.raises(LengthMismatch):
        supervised_loss(p, [p, p], g, (1.0, 0.5))


@pytest.mark.parametrize("seed", range(5))
def test_one_adam_step_decreases_loss(seed):
    net = CoarseNet(NetConfig(levels=2, base_channels=2, input_dims=(8, 8, 8), seed=seed))
    rng = np.random.default_rng(100 + seed)
    x = rng.random((2, 1, 8, 8, 8)).astype(np.float32)
    g = (rng.random(x.shape) > 0.8).astype(np.float32)
    opt = Adam(net.parameters(), lr=1e-3)

    def loss(backward):
        main, aux = net.forward(x, train=True)
        value, dmain, daux = supervised_loss(main, aux, g, net.config.supervision_weights)
        if backward:
            net.backward(dmain, daux)
        return value

    before = loss(True)
    opt.step()
    assert loss(False) < before


# --- fine net -------------------------------------------------------------


def _fine_inputs(rng, n=1, dims=(32, 24, 16)):
    return [rng.random((n, 1, d, d, d)).astype(np.float32) for d in dims]


def test_fine_shapes():
    net = FineNet(NetConfig(levels=3, base_channels=2, input_dims=(32, 32, 32)))
    out = forward_fine(net, *_fine_inputs(np.random.default_rng(0), 2))
    assert out.shape == (2, 1, 32, 32, 32)
    assert ((out >= 0) & (out <= 1)).all()


def test_fine_zero_weights_half():
    net = zero_weights(FineNet(NetConfig(levels=3, base_channels=2, input_dims=(16, 16, 16))))
    out = net.forward(*_fine_inputs(np.random.default_rng(1), dims=(16, 12, 8)), train=True)
    assert np.all(out == 0.5)


def test_fine_needs_aux_inputs_when_multiscale():
    net = FineNet(NetConfig(levels=3, base_channels=2, input_dims=(16, 16, 16)))
    with pytest.raises(ShapeMismatch):
        net.forward(np.zeros((1, 1, 16, 16, 16), np.float32))


def test_multiscale_off_equals_net_without_stems():
    cfg = dict(levels=3, base_channels=2, input_dims=(16, 16, 16), seed=9)
    plain = FineNet(NetConfig(multiscale=False, **cfg))
    fused = FineNet(NetConfig(multiscale=True, **cfg))
    assert plain.stems == [] and len(fused.stems) == 2
    # The fused encoder's input width equals its output width, so its shortcut
    # is the identity; give the plain net the matching channel embedding.
    for l in fused.fused:
        proj = plain.enc[l].proj
        c = proj.weight.shape[1]
        proj.weight.value[...] = 0
        proj.weight.value[:c, :, 0, 0, 0] = np.eye(c)
        proj.bias.value[...] = 0
    shared = dict(plain.named_parameters())
    for name, p in fused.named_parameters():
        if name.startswith("stems."):
            p.value[...] = 0
        elif p.shape == shared[name].shape:
            p.value[...] = shared[name].value
        else:
            # encoder input grew by the stem channels; those inputs are zero
            c = shared[name].shape[1]
            p.value[:, :c] = shared[name].value
    for (_, a), (_, b) in zip(plain.named_buffers(), [nb for nb in fused.named_buffers() if not nb[0].startswith("stems.")]):
        b[...] = a
    x1, x2, x3 = _fine_inputs(np.random.default_rng(2), dims=(16, 12, 8))
    np.testing.assert_allclose(fused.forward(x1, x2, x3, train=False), plain.forward(x1, train=False), atol=1e-6)


def test_residual_flag_drops_shortcuts():
    on = FineNet(NetConfig(levels=2, base_channels=2, input_dims=(8, 8, 8), residual=True))
    off = FineNet(NetConfig(levels=2, base_channels=2, input_dims=(8, 8, 8), residual=False))
    assert any("proj" in n for n, _ in on.named_parameters())
    assert not any("proj" in n for n, _ in off.named_parameters())


# --- checkpoints ----------------------------------------------------------


@pytest.mark.parametrize("arch", [CoarseNet, FineNet])
def test_checkpoint_roundtrip(tmp_path, arch):
    net = arch(NetConfig(levels=2, base_channels=2, input_dims=(8, 8, 8), seed=5))
    for p in net.parameters():
        p.step_count = 7
    for _, b in net.named_buffers():
        b[...] = np.random.default_rng(0).random(b.shape)
    save_net(net, tmp_path / "n.ckpt")
    back = load_net(tmp_path / "n.ckpt")
    assert type(back) is arch and back.config == net.config and back.step_count == 7
    for (na, a), (nb, b) in zip(net.named_parameters(), back.named_parameters()):
        assert na == nb and np.array_equal(a.value, b.value)
    for (_, a), (_, b) in zip(net.named_buffers(), back.named_buffers()):
        assert np.array_equal(a, b)
    save_net(back, tmp_path / "again.ckpt")
    assert (tmp_path / "n.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()
