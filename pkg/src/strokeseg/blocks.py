"""Network blocks: conv/residual stacks, the attention gate and the
self-attention family used at the U-Net bottleneck and skip paths.

Parameters live in small dataclasses holding :class:`Tensor` leaves (and
numpy buffers for normalisation statistics). Every block is a pure function
of its input and its parameter object; ``training`` switches batch-norm
between batch and running statistics.

Attention maps returned by the ``return_attention`` variants are laid out as
``(batch[, head], query position, source position)`` so each row sums to one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Iterator

import numpy as np

from .autodiff import (
    Tensor,
    attention,
    batch_norm,
    concat,
    conv_forward,
    conv_transpose,
    interpolate,
    matmul,
    relu,
    sigmoid,
    softmax,
)
from .autodiff.tensor import get_dtype

# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor | None


@dataclass
class ConvTransposeParams:
    weight: Tensor  # Cin x Cout x K
    bias: Tensor | None
    stride: int = 2
    padding: int = 0
    output_padding: int = 0


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass
class LinearParams:
    weight: Tensor  # in x out
    bias: Tensor


@dataclass
class ConvBlockParams:
    conv1: ConvParams
    norm1: NormParams | None
    conv2: ConvParams
    norm2: NormParams | None

    @property
    def in_channels(self) -> int:
        return self.conv1.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.conv2.weight.shape[0]


@dataclass
class ResidualBlockParams(ConvBlockParams):
    shortcut: ConvParams | None = None


@dataclass
class UpConvParams:
    """Transposed convolution optionally followed by norm + ReLU."""

    up: ConvTransposeParams
    norm: NormParams | None = None


@dataclass
class AttentionGateParams:
    gate_conv: ConvParams
    skip_conv: ConvParams
    combiner: ConvParams


@dataclass
class GSAParams:
    key: ConvParams    # M: t -> t'
    query: ConvParams  # N: t -> t'
    value: ConvParams  # W: t -> t


@dataclass
class TSAParams:
    """Scaled dot-product attention over flattened positions.

    Projections left as ``None`` act as the identity, i.e. queries, keys and
    values are the position-encoded features themselves.
    """

    channels: int
    q: LinearParams | None = None
    k: LinearParams | None = None
    v: LinearParams | None = None

    @property
    def d_k(self) -> int:
        return self.channels if self.k is None else self.k.weight.shape[1]


@dataclass
class SAAParams:
    psi1: Tensor
    psi2: Tensor


@dataclass
class MHSAParams:
    heads: int
    q: LinearParams
    k: LinearParams
    v: LinearParams
    o: LinearParams
    up: ConvTransposeParams | None = None  # cross-attention: decoder upsampling

    @property
    def embed(self) -> int:
        return self.k.weight.shape[1]


# ---------------------------------------------------------------------------
# initialisation


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_conv(rng, cin: int, cout: int, kernel: int, ndim: int, bias: bool = True) -> ConvParams:
    shape = (cout, cin) + (kernel,) * ndim
    w = _he_uniform(rng, shape, cin * kernel ** ndim)
    return ConvParams(w, _zeros((cout,)) if bias else None)


def init_conv_transpose(rng, cin: int, cout: int, kernel: int, ndim: int, stride: int = 2) -> ConvTransposeParams:
    shape = (cin, cout) + (kernel,) * ndim
    w = _he_uniform(rng, shape, cin * kernel ** ndim)
    if kernel == stride:
        return ConvTransposeParams(w, _zeros((cout,)), stride, 0, 0)
    pad = (kernel - 1) // 2
    return ConvTransposeParams(w, _zeros((cout,)), stride, pad, stride - kernel + 2 * pad)


def init_norm(channels: int) -> NormParams:
    return NormParams(
        Tensor(np.ones(channels), requires_grad=True),
        _zeros((channels,)),
        np.zeros(channels, dtype=get_dtype()),
        np.ones(channels, dtype=get_dtype()),
    )


def init_linear(rng, fan_in: int, fan_out: int) -> LinearParams:
    return LinearParams(_he_uniform(rng, (fan_in, fan_out), fan_in), _zeros((fan_out,)))


def init_conv_block(rng, cin: int, cout: int, ndim: int, norm: bool = True) -> ConvBlockParams:
    c1 = init_conv(rng, cin, cout, 3, ndim)
    c2 = init_conv(rng, cout, cout, 3, ndim)
    return ConvBlockParams(c1, init_norm(cout) if norm else None, c2, init_norm(cout) if norm else None)


def init_residual_block(rng, cin: int, cout: int, ndim: int, norm: bool = True) -> ResidualBlockParams:
    base = init_conv_block(rng, cin, cout, ndim, norm)
    shortcut = init_conv(rng, cin, cout, 1, ndim) if cin != cout else None
    return ResidualBlockParams(base.conv1, base.norm1, base.conv2, base.norm2, shortcut)


def init_attention_gate(rng, skip_channels: int, gate_channels: int, ndim: int,
                        inter_channels: int | None = None) -> AttentionGateParams:
    inter = inter_channels or max(1, skip_channels // 2)
    return AttentionGateParams(
        init_conv(rng, gate_channels, inter, 1, ndim),
        init_conv(rng, skip_channels, inter, 1, ndim),
        init_conv(rng, inter, 1, 1, ndim),
    )


def init_gsa(rng, channels: int, ndim: int = 2, reduction: int = 8) -> GSAParams:
    reduced = max(1, channels // reduction)
    return GSAParams(
        init_conv(rng, channels, reduced, 1, ndim),
        init_conv(rng, channels, reduced, 1, ndim),
        init_conv(rng, channels, channels, 1, ndim),
    )


def init_tsa(rng, channels: int, d_k: int | None = None, project: bool = True) -> TSAParams:
    if not project:
        return TSAParams(channels)
    d_k = d_k or channels
    return TSAParams(channels, init_linear(rng, channels, d_k), init_linear(rng, channels, d_k),
                     init_linear(rng, channels, channels))


def init_saa() -> SAAParams:
    # both scales start at exactly zero so the fused output is the base features
    return SAAParams(_zeros((1,)), _zeros((1,)))


def init_mhsa(rng, embed: int, heads: int = 4, query_channels: int | None = None,
              upsample_channels: int | None = None, ndim: int = 2) -> MHSAParams:
    if embed % heads:
        raise ValueError(f"embedding {embed} not divisible by {heads} heads")
    qin = query_channels or embed
    up = None
    if upsample_channels is not None:
        up = init_conv_transpose(rng, upsample_channels, upsample_channels, 2, ndim)
    return MHSAParams(heads, init_linear(rng, qin, embed), init_linear(rng, embed, embed),
                      init_linear(rng, embed, embed), init_linear(rng, embed, embed), up)


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor | np.ndarray]]:
    """Walk nested parameter containers yielding ``(dotted.name, leaf)``.

    Learnable tensors and normalisation buffers are both yielded; buffers are
    numpy arrays.
    """
    if isinstance(obj, (Tensor, np.ndarray)):
        yield prefix, obj
    elif is_dataclass(obj):
        for f in fields(obj):
            value = getattr(obj, f.name)
            if value is None or isinstance(value, (int, float, str)):
                continue
            yield from named_tensors(value, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, dict):
        for key, value in obj.items():
            yield from named_tensors(value, f"{prefix}.{key}" if prefix else str(key))
    elif isinstance(obj, (list, tuple)):
        for i, value in enumerate(obj):
            yield from named_tensors(value, f"{prefix}.{i}" if prefix else str(i))


# ---------------------------------------------------------------------------
# primitives


def _conv(x: Tensor, p: ConvParams) -> Tensor:
    k = p.weight.shape[2]
    return conv_forward(x, p.weight, p.bias, stride=1, padding=k // 2)


def _norm(x: Tensor, p: NormParams | None, training: bool) -> Tensor:
    if p is None:
        return x
    return batch_norm(x, p.gamma, p.beta, p.running_mean, p.running_var, training)


def linear(x: Tensor, p: LinearParams) -> Tensor:
    return matmul(x, p.weight) + p.bias


def up_conv(x: Tensor, p: UpConvParams, training: bool = False) -> Tensor:
    u = p.up
    y = conv_transpose(x, u.weight, u.bias, u.stride, u.padding, u.output_padding)
    if p.norm is not None:
        y = relu(_norm(y, p.norm, training))
    return y


def positional_encoding(n: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal encoding, ``n`` positions by ``dim`` features."""
    pos = np.arange(n)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(get_dtype())


def _tokens(x: Tensor) -> Tensor:
    """``B x C x *S`` to ``B x n x C`` with the sinusoidal encoding added."""
    b, c = x.shape[:2]
    n = math.prod(x.shape[2:])
    seq = x.reshape(b, c, n).transpose(0, 2, 1)
    return seq + Tensor(positional_encoding(n, c))


def _untokens(seq: Tensor, like_shape) -> Tensor:
    b, c = seq.shape[0], seq.shape[2]
    return seq.transpose(0, 2, 1).reshape((b, c) + tuple(like_shape[2:]))


# ---------------------------------------------------------------------------
# blocks


def conv_block(x: Tensor, p: ConvBlockParams, training: bool = False) -> Tensor:
    """Two 3^d same-padded convolutions, each followed by norm and ReLU."""
    if x.shape[1] != p.in_channels:
        raise ValueError(f"conv block expects {p.in_channels} channels, got {x.shape[1]}")
    h = relu(_norm(_conv(x, p.conv1), p.norm1, training))
    return relu(_norm(_conv(h, p.conv2), p.norm2, training))


def residual_block(x: Tensor, p: ResidualBlockParams, training: bool = False) -> Tensor:
    """``relu(main(x) + shortcut(x))``; the shortcut is a 1x1 projection when widths differ."""
    if x.shape[1] != p.in_channels:
        raise ValueError(f"residual block expects {p.in_channels} channels, got {x.shape[1]}")
    h = relu(_norm(_conv(x, p.conv1), p.norm1, training))
    h = _norm(_conv(h, p.conv2), p.norm2, training)
    s = x if p.shortcut is None else _conv(x, p.shortcut)
    return relu(h + s)


def attention_gate(skip: Tensor, gate: Tensor, p: AttentionGateParams, return_coefficients: bool = False):
    """Additive attention gate: re-weight ``skip`` by a sigmoid map driven by ``gate``.

    ``gate`` comes from one level deeper (half the spatial extent); its
    projection is interpolated up to the skip resolution.
    """
    sp_skip, sp_gate = skip.shape[2:], gate.shape[2:]
    if len(sp_skip) != len(sp_gate) or any(g > s for g, s in zip(sp_gate, sp_skip)):
        raise ValueError(f"gate extents {sp_gate} incompatible with skip extents {sp_skip}")
    g = _conv(gate, p.gate_conv)
    if sp_gate != sp_skip:
        g = interpolate(g, size=sp_skip)
    a = relu(g + _conv(skip, p.skip_conv))
    coeff = sigmoid(_conv(a, p.combiner))
    out = skip * coeff
    return (out, coeff) if return_coefficients else out


def gsa_forward(f_base: Tensor, p: GSAParams, return_attention: bool = False):
    """Global spatial (position) attention.

    Affinity ``E[i, j] = M_i . N_j`` is normalised over source positions
    ``i`` for each target ``j``; target ``j`` receives ``sum_i W_i A[i, j]``.
    """
    b, t = f_base.shape[:2]
    n = math.prod(f_base.shape[2:])
    m = _conv(f_base, p.key).reshape(b, -1, n)          # B x t' x n
    nq = _conv(f_base, p.query).reshape(b, -1, n)       # B x t' x n
    w = _conv(f_base, p.value).reshape(b, t, n)         # B x t x n
    energy = matmul(m.transpose(0, 2, 1), nq)           # B x n(i) x n(j)
    attn = softmax(energy, axis=1)
    out = matmul(w, attn).reshape(f_base.shape)
    if return_attention:
        return out, attn.data.transpose(0, 2, 1)
    return out


def tsa_forward(f_base: Tensor, p: TSAParams, return_attention: bool = False):
    """Transformer self-attention ``softmax(Q K^T / sqrt(d_k)) V`` over positions."""
    if f_base.shape[1] != p.channels:
        raise ValueError(f"TSA expects {p.channels} channels, got {f_base.shape[1]}")
    seq = _tokens(f_base)
    q = seq if p.q is None else linear(seq, p.q)
    k = seq if p.k is None else linear(seq, p.k)
    v = seq if p.v is None else linear(seq, p.v)
    scale = 1.0 / math.sqrt(p.d_k)
    out = _untokens(attention(q, k, v, scale), f_base.shape)
    if return_attention:
        return out, _attention_map(q, k, scale)
    return out


def saa_fuse(f_tsa: Tensor, f_gsa: Tensor, f_base: Tensor, p: SAAParams) -> Tensor:
    """``psi1 * F_tsa + psi2 * F_gsa + F_base``."""
    if not f_tsa.shape == f_gsa.shape == f_base.shape:
        raise ValueError(f"SAA inputs differ in shape: {f_tsa.shape}, {f_gsa.shape}, {f_base.shape}")
    return p.psi1 * f_tsa + p.psi2 * f_gsa + f_base


def saa_forward(f_base: Tensor, gsa: GSAParams, tsa: TSAParams, saa: SAAParams) -> Tensor:
    return saa_fuse(tsa_forward(f_base, tsa), gsa_forward(f_base, gsa), f_base, saa)


def _attention_map(q: Tensor, k: Tensor, scale: float) -> np.ndarray:
    scores = q.data @ np.swapaxes(k.data, -1, -2) * scale
    return softmax(Tensor(scores), axis=-1).data


def _split_heads(seq: Tensor, heads: int) -> Tensor:
    b, n, e = seq.shape
    return seq.reshape(b, n, heads, e // heads).transpose(0, 2, 1, 3)


def _merge_heads(seq: Tensor) -> Tensor:
    b, h, n, d = seq.shape
    return seq.transpose(0, 2, 1, 3).reshape(b, n, h * d)


def _multi_head(q_src: Tensor, kv_src: Tensor, p: MHSAParams):
    q = _split_heads(linear(q_src, p.q), p.heads)
    k = _split_heads(linear(kv_src, p.k), p.heads)
    v = _split_heads(linear(kv_src, p.v), p.heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    return linear(_merge_heads(attention(q, k, v, scale)), p.o), (q, k, scale)


def mhsa_forward(x: Tensor, p: MHSAParams, return_attention: bool = False):
    """``x`` plus multi-head self-attention over its spatial positions."""
    if x.shape[1] != p.embed:
        raise ValueError(f"MHSA expects {p.embed} channels, got {x.shape[1]}")
    if p.embed % p.heads:
        raise ValueError(f"embedding {p.embed} not divisible by {p.heads} heads")
    seq = _tokens(x)
    out, qks = _multi_head(seq, seq, p)
    out = x + _untokens(out, x.shape)
    return (out, _attention_map(*qks)) if return_attention else out


def mhca_forward(skip: Tensor, decoder: Tensor, p: MHSAParams, return_attention: bool = False):
    """Cross-attention from decoder queries onto skip keys/values.

    The decoder features are brought to the skip resolution first (learned
    transposed convolution when ``p.up`` is set, else linear interpolation);
    the skip plus its attended features is concatenated with them on
    channels.
    """
    if skip.shape[1] != p.embed:
        raise ValueError(f"MHCA expects {p.embed} skip channels, got {skip.shape[1]}")
    if decoder.shape[2:] != skip.shape[2:]:
        if p.up is not None:
            u = p.up
            decoder = conv_transpose(decoder, u.weight, u.bias, u.stride, u.padding, u.output_padding)
        else:
            decoder = interpolate(decoder, size=skip.shape[2:])
    if decoder.shape[2:] != skip.shape[2:]:
        raise ValueError(f"decoder extents {decoder.shape[2:]} cannot match skip {skip.shape[2:]}")
    if decoder.shape[1] != p.q.weight.shape[0]:
        raise ValueError(f"MHCA expects {p.q.weight.shape[0]} decoder channels, got {decoder.shape[1]}")
    out, qks = _multi_head(_tokens(decoder), _tokens(skip), p)
    fused = concat([skip + _untokens(out, skip.shape), decoder], axis=1)
    return (fused, _attention_map(*qks)) if return_attention else fused
