"""The two segmentation networks.

``CoarseNet`` is a 3-D attention U-Net with deep supervision: decoder
context gates every encoder skip, and auxiliary sigmoid heads on the deeper
decoder levels add loss terms during training only.

``FineNet`` is a residual 3-D U-Net whose skips pass through squeeze-and-
excitation channel attention. Two extra, coarser views of the same VOI are
resampled to the grid of encoder levels 1 and 2, run through a small stem
and concatenated with the pooled features there.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .tensorkit import ops
from .tensorkit.checkpoint import read_checkpoint, write_checkpoint
from .tensorkit.layers import (
    BatchNorm,
    Conv3,
    ConvT3,
    Dense,
    MaxPool2,
    Module,
    ReLU,
    Resize,
    Sigmoid,
    conv_bn_relu,
)
from .tensorkit.ops import ShapeMismatch


class LengthMismatch(ValueError):
    pass


@dataclass
class NetConfig:
    levels: int = 3
    base_channels: int = 8
    input_dims: tuple[int, int, int] = (64, 64, 64)
    supervision_weights: tuple[float, ...] | None = None
    se_reduction: int = 4
    multiscale: bool = True
    residual: bool = True
    seed: int = 0

    def __post_init__(self):
        self.input_dims = tuple(int(d) for d in self.input_dims)
        if self.supervision_weights is None:
            self.supervision_weights = tuple(0.5 ** i for i in range(self.levels))
        self.supervision_weights = tuple(float(w) for w in self.supervision_weights)
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if self.base_channels < 1 or self.se_reduction < 1:
            raise ValueError("base_channels and se_reduction must be >= 1")
        f = 2 ** (self.levels - 1)
        if len(self.input_dims) != 3 or any(d % f or d < f for d in self.input_dims):
            raise ValueError(f"input dims {self.input_dims} not divisible by {f}")
        if len(self.supervision_weights) != self.levels:
            raise LengthMismatch(
                f"{len(self.supervision_weights)} supervision weights for {self.levels} levels"
            )

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        d["supervision_weights"] = list(self.supervision_weights)
        return d


def _concat(a, b):
    return np.concatenate([a, b], axis=1)


# ---------------------------------------------------------------------------
# blocks


class DoubleConv(Module):
    def __init__(self, cin, cout, rng, input_grad=True):
        self.c1 = conv_bn_relu(cin, cout, rng=rng, input_grad=input_grad)
        self.c2 = conv_bn_relu(cout, cout, rng=rng)

    def forward(self, x, train=True):
        return self.c2.forward(self.c1.forward(x, train), train)

    def backward(self, dy):
        return self.c1.backward(self.c2.backward(dy))


class ResidualBlock(Module):
    """relu(BN(conv(relu(BN(conv(x))))) + proj(x)); proj is 1^3 conv when channels change.

    With ``residual=False`` the shortcut is dropped and this is a plain double conv.
    """

    def __init__(self, cin, cout, rng, residual=True, input_grad=True):
        self.residual, self.input_grad = residual, input_grad
        self.conv1 = Conv3(cin, cout, rng=rng, input_grad=input_grad)
        self.bn1, self.relu1 = BatchNorm(cout), ReLU()
        self.conv2, self.bn2 = Conv3(cout, cout, rng=rng), BatchNorm(cout)
        self.proj = None
        if residual and cin != cout:
            self.proj = Conv3(cin, cout, k=1, rng=rng, input_grad=input_grad)

    def forward(self, x, train=True):
        h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x, train), train))
        h = self.bn2.forward(self.conv2.forward(h, train), train)
        if self.residual:
            h = h + (self.proj.forward(x, train) if self.proj else x)
        self._pre = h
        return ops.relu(h)

    def backward(self, dy):
        d = ops.relu_backward(dy, self._pre)
        dx = self.conv1.backward(self.bn1.backward(self.relu1.backward(
            self.conv2.backward(self.bn2.backward(d)))))
        if self.residual:
            ds = self.proj.backward(d) if self.proj else d
            if self.input_grad:
                dx = dx + ds
        return dx


class AttentionGate(Module):
    """Additive gate: alpha = sigmoid(psi(relu(Wx*x + up(Wg*g)))), output alpha * x."""

    def __init__(self, cx, cg, f_int, rng):
        self.w_x = Conv3(cx, f_int, k=1, rng=rng)
        self.w_g = Conv3(cg, f_int, k=1, rng=rng)
        self.psi = Conv3(f_int, 1, k=1, rng=rng)
        self.up = Resize()

    def forward(self, x, g, train=True):
        if g.shape[0] != x.shape[0] or tuple(2 * n for n in g.shape[2:]) != x.shape[2:]:
            raise ShapeMismatch(f"gating signal {g.shape} must be half of skip {x.shape}")
        # the 1^3 conv commutes with trilinear upsampling, so gate at low resolution
        gg = self.up.forward(self.w_g.forward(g, train), out_dims=x.shape[2:])
        self._pre = self.w_x.forward(x, train) + gg
        self._alpha = ops.sigmoid(self.psi.forward(ops.relu(self._pre), train))
        self._x = x
        return self._alpha * x

    def backward(self, dy):
        a = self._alpha
        dlogit = (dy * self._x).sum(axis=1, keepdims=True) * a * (1 - a)
        dsum = ops.relu_backward(self.psi.backward(dlogit), self._pre)
        dx = dy * a + self.w_x.backward(dsum)
        dg = self.w_g.backward(self.up.backward(dsum))
        return dx, dg


class ChannelAttention(Module):
    """Squeeze-and-excitation: per-channel rescale from globally pooled features."""

    def __init__(self, channels, reduction, rng):
        hidden = max(1, channels // reduction)
        self.fc1 = Dense(channels, hidden, rng=rng)
        self.fc2 = Dense(hidden, channels, rng=rng)

    def forward(self, x, train=True):
        s = x.mean(axis=(2, 3, 4))
        self._z = self.fc1.forward(s, train)
        self._scale = ops.sigmoid(self.fc2.forward(ops.relu(self._z), train))
        self._x = x
        return x * self._scale[:, :, None, None, None]

    def backward(self, dy):
        x, a = self._x, self._scale
        dlogit = (dy * x).sum(axis=(2, 3, 4)) * a * (1 - a)
        ds = self.fc1.backward(ops.relu_backward(self.fc2.backward(dlogit), self._z))
        n = x.shape[2] * x.shape[3] * x.shape[4]
        return dy * a[:, :, None, None, None] + (ds / n)[:, :, None, None, None]


# Initial foreground probability of every head. Starting the output near the
# (small) foreground fraction instead of 0.5 spares the optimiser thousands of
# steps spent pushing the background down.
HEAD_PRIOR = 0.01


class Head(Module):
    """1^3 conv to one channel followed by a sigmoid."""

    def __init__(self, cin, rng):
        self.conv = Conv3(cin, 1, k=1, rng=rng)
        self.conv.bias.value[...] = np.log(HEAD_PRIOR / (1 - HEAD_PRIOR))
        self.act = Sigmoid()

    def forward(self, x, train=True):
        return self.act.forward(self.conv.forward(x, train))

    def backward(self, dy):
        return self.conv.backward(self.act.backward(dy))


# ---------------------------------------------------------------------------
# networks


class Net(Module):
    arch = ""

    @property
    def step_count(self) -> int:
        return max((p.step_count for p in self.parameters()), default=0)


class CoarseNet(Net):
    arch = "coarse"

    def __init__(self, config: NetConfig | None = None):
        self.config = cfg = config or NetConfig()
        rng = np.random.default_rng(cfg.seed)
        L, ch = cfg.levels, cfg.channels
        self.enc = [
            DoubleConv(1 if l == 0 else ch(l - 1), ch(l), rng, input_grad=l > 0) for l in range(L)
        ]
        self.pools = [MaxPool2() for _ in range(L - 1)]
        self.up = [ConvT3(ch(l + 1), ch(l), rng=rng) for l in range(L - 1)]
        self.gates = [AttentionGate(ch(l), ch(l + 1), max(1, ch(l) // 2), rng) for l in range(L - 1)]
        self.dec = [DoubleConv(2 * ch(l), ch(l), rng) for l in range(L - 1)]
        self.head = Head(ch(0), rng)
        # aux_heads[i] supervises decoder level i + 1 (the bottleneck is the deepest)
        self.aux_heads = [Head(ch(l), rng) for l in range(1, L)]
        self.aux_up = [Resize() for _ in range(1, L)]

    def forward(self, x, train=True):
        """Returns (main, aux). ``aux`` is empty outside training."""
        ops._check5(x)
        L = self.config.levels
        f = 2 ** (L - 1)
        if x.shape[1] != 1 or any(n % f for n in x.shape[2:]):
            raise ShapeMismatch(f"input {x.shape} must be (N, 1, D, H, W) with dims divisible by {f}")
        self._train = train
        skips, h = [], x
        for l in range(L):
            if l:
                h = self.pools[l - 1].forward(h)
            h = self.enc[l].forward(h, train)
            skips.append(h)
        decoded = {L - 1: h}
        d = h
        for l in reversed(range(L - 1)):
            u = self.up[l].forward(d, train)
            gated = self.gates[l].forward(skips[l], d, train)
            d = self.dec[l].forward(_concat(gated, u), train)
            decoded[l] = d
        main = self.head.forward(d, train)
        aux = []
        if train:
            for i in range(L - 1):
                a = self.aux_heads[i].forward(decoded[i + 1], train)
                aux.append(self.aux_up[i].forward(a, out_dims=x.shape[2:]))
        return main, aux

    def backward(self, dmain, daux=()):
        L = self.config.levels
        if len(daux) not in (0, L - 1):
            raise LengthMismatch(f"{len(daux)} aux gradients for {L - 1} aux heads")
        grads = {l: None for l in range(L)}

        def add(l, g):
            grads[l] = g if grads[l] is None else grads[l] + g

        add(0, self.head.backward(dmain))
        for i, g in enumerate(daux):
            add(i + 1, self.aux_heads[i].backward(self.aux_up[i].backward(g)))
        skip_grads = [None] * L
        for l in range(L - 1):
            dcat = self.dec[l].backward(grads[l])
            c = self.config.channels(l)
            dskip, dg = self.gates[l].backward(dcat[:, :c])
            skip_grads[l] = dskip
            add(l + 1, dg + self.up[l].backward(np.ascontiguousarray(dcat[:, c:])))
        dh = grads[L - 1]
        for l in reversed(range(L)):
            if l < L - 1:
                dh = dh + skip_grads[l]
            dh = self.enc[l].backward(dh)
            if l:
                dh = self.pools[l - 1].backward(dh)
        return dh


class FineNet(Net):
    arch = "fine"

    def __init__(self, config: NetConfig | None = None):
        self.config = cfg = config or NetConfig(input_dims=(48, 48, 48))
        rng = np.random.default_rng(cfg.seed)
        L, ch = cfg.levels, cfg.channels
        self.fused = [l for l in (1, 2) if l < L] if cfg.multiscale else []
        self.stems = [conv_bn_relu(1, ch(l - 1), rng=rng, input_grad=False) for l in self.fused]
        self.stem_resize = [Resize() for _ in self.fused]
        self.enc = []
        for l in range(L):
            cin = 1 if l == 0 else ch(l - 1) * (2 if l in self.fused else 1)
            self.enc.append(ResidualBlock(cin, ch(l), rng, cfg.residual, input_grad=l > 0))
        self.pools = [MaxPool2() for _ in range(L - 1)]
        self.se = [ChannelAttention(ch(l), cfg.se_reduction, rng) for l in range(L - 1)]
        self.up = [ConvT3(ch(l + 1), ch(l), rng=rng) for l in range(L - 1)]
        self.dec = [ResidualBlock(2 * ch(l), ch(l), rng, cfg.residual) for l in range(L - 1)]
        self.head = Head(ch(0), rng)

    def forward(self, x1, x2=None, x3=None, train=True):
        ops._check5(x1)
        L = self.config.levels
        f = 2 ** (L - 1)
        if x1.shape[1] != 1 or any(n % f for n in x1.shape[2:]):
            raise ShapeMismatch(f"input {x1.shape} must be (N, 1, D, H, W) with dims divisible by {f}")
        aux_inputs = {1: x2, 2: x3}
        skips, h = [], self.enc[0].forward(x1, train)
        skips.append(h)
        for l in range(1, L):
            p = self.pools[l - 1].forward(h)
            if l in self.fused:
                xa = aux_inputs[l]
                if xa is None:
                    raise ShapeMismatch(f"multi-scale net needs an input for level {l}")
                i = self.fused.index(l)
                xa = self.stem_resize[i].forward(xa, out_dims=p.shape[2:])
                p = _concat(p, self.stems[i].forward(xa, train))
            h = self.enc[l].forward(p, train)
            skips.append(h)
        d = h
        for l in reversed(range(L - 1)):
            u = self.up[l].forward(d, train)
            d = self.dec[l].forward(_concat(self.se[l].forward(skips[l], train), u), train)
        return self.head.forward(d, train)

    def backward(self, dout):
        L = self.config.levels
        d = self.head.backward(dout)
        skip_grads = [None] * L
        for l in range(L - 1):
            dcat = self.dec[l].backward(d)
            c = self.config.channels(l)
            skip_grads[l] = self.se[l].backward(dcat[:, :c])
            d = self.up[l].backward(np.ascontiguousarray(dcat[:, c:]))
        dh = d
        for l in reversed(range(L)):
            if l < L - 1:
                dh = dh + skip_grads[l]
            dp = self.enc[l].backward(dh)
            if l == 0:
                return dp
            if l in self.fused:
                i = self.fused.index(l)
                c = self.config.channels(l - 1)
                self.stems[i].backward(np.ascontiguousarray(dp[:, c:]))
                dp = dp[:, :c]
            dh = self.pools[l - 1].backward(np.ascontiguousarray(dp))


# ---------------------------------------------------------------------------
# functional entry points


def attention_gate(x_skip, g, gate: AttentionGate, train=True):
    return gate.forward(x_skip, g, train)


def residual_block(x, block: ResidualBlock, train=True):
    return block.forward(x, train)


def channel_attention(x, block: ChannelAttention, train=True):
    return block.forward(x, train)


def forward_coarse(net: CoarseNet, x, train=False):
    return net.forward(x, train)


def forward_fine(net: FineNet, x1, x2=None, x3=None, train=False):
    return net.forward(x1, x2, x3, train)


def supervised_loss(main, aux, g, weights):
    """Weight-normalised sum of dice losses over the main and auxiliary heads.

    Returns (loss, dmain, daux).
    """
    heads = [main, *aux]
    if len(heads) > len(weights):
        raise LengthMismatch(f"{len(heads)} heads but {len(weights)} weights")
    weights = list(weights)[: len(heads)]
    total_w = float(sum(weights))
    loss, grads = 0.0, []
    for p, w in zip(heads, weights):
        l, dp = ops.dice_loss(p, g)
        loss += w * l
        grads.append(dp * (w / total_w))
    return loss / total_w, grads[0], grads[1:]


def zero_weights(net: Module) -> Module:
    for p in net.parameters():
        p.value[...] = 0
    return net


# ---------------------------------------------------------------------------
# checkpoints

ARCHS = {"coarse": CoarseNet, "fine": FineNet}


def save_net(net: Net, path) -> None:
    tensors = [(name, "param", p.value) for name, p in net.named_parameters()]
    tensors += [(name, "buffer", b) for name, b in net.named_buffers()]
    meta = {"arch": net.arch, "config": net.config.to_dict(), "step_count": net.step_count}
    write_checkpoint(path, meta, tensors)


def load_net(path) -> Net:
    manifest, arrays = read_checkpoint(path)
    arch = manifest.get("arch")
    if arch not in ARCHS:
        raise ValueError(f"{path}: unknown architecture {arch!r}")
    net = ARCHS[arch](NetConfig(**manifest["config"]))
    for name, p in net.named_parameters():
        p.value[...] = arrays[name]
        p.step_count = int(manifest.get("step_count", 0))
    for name, b in net.named_buffers():
        b[...] = arrays[name]
    return net
