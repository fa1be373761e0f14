"""The eight U-Net style architectures behind one forward interface."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, is_dataclass

import numpy as np

from . import blocks as B
from .autodiff import Tensor, concat, conv_forward, dropout, interpolate, max_pool, pad, sigmoid

VARIANTS_2D = ("unet2d", "resunet2d", "attnunet2d", "transattn2d", "unettransformer2d")
VARIANTS_3D = ("unet3d", "resunet3d", "attnunet3d")
VARIANTS = VARIANTS_2D + VARIANTS_3D

PUBLISHED_CHANNELS = {
    "2d": (64, 128, 256, 512, 1024),
    "unettransformer2d": (64, 128, 256, 512),
    "3d": (16, 32, 64, 128),
}

PUBLISHED_EXTENTS = {
    "unet2d": (192, 192),
    "resunet2d": (192, 192),
    "attnunet2d": (192, 192),
    "transattn2d": (192, 192),
    "unettransformer2d": (192, 192),
    "unet3d": (144, 172, 128),
    "resunet3d": (144, 172, 128),
    "attnunet3d": (144, 176, 128),
}

# approximate learnable-parameter counts reported for full-width models
PUBLISHED_PARAMETER_COUNTS = {
    "unet2d": 31_000_000,
    "resunet2d": 32_000_000,
    "attnunet2d": 34_000_000,
    "transattn2d": 25_000_000,
    "unettransformer2d": 11_000_000,
    "unet3d": 1_400_000,
    "resunet3d": 1_420_000,
    "attnunet3d": 1_610_000,
}


class ModelSpecError(ValueError):
    pass


@dataclass
class ModelSpec:
    """Declarative description of one architecture.

    ``channels`` and ``levels`` default to the published widths divided by
    ``width_scale``. ``input_extents`` defaults to the published input size;
    pass an explicit tuple for reduced fixtures, or ``()`` to accept any
    extents.
    """

    variant: str
    width_scale: float = 1
    dropout: float = 0.2
    channels: tuple[int, ...] | None = None
    levels: int | None = None
    input_extents: tuple[int, ...] | None = None
    norm: bool = True
    heads: int = 4

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelSpecError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.width_scale <= 0:
            raise ModelSpecError("width_scale must be positive")
        if not 0 <= self.dropout < 1:
            raise ModelSpecError("dropout must lie in [0, 1)")
        if self.channels is None:
            key = "unettransformer2d" if self.variant == "unettransformer2d" else ("3d" if self.is_3d else "2d")
            self.channels = tuple(max(1, int(round(c / self.width_scale))) for c in PUBLISHED_CHANNELS[key])
        self.channels = tuple(int(c) for c in self.channels)
        if self.levels is None:
            self.levels = len(self.channels) - 1
        if len(self.channels) != self.levels + 1:
            raise ModelSpecError(f"{self.levels} levels need {self.levels + 1} channel widths, got {self.channels}")
        if self.input_extents is None:
            self.input_extents = PUBLISHED_EXTENTS[self.variant]
        self.input_extents = tuple(int(n) for n in self.input_extents)
        if self.input_extents and len(self.input_extents) != self.ndim:
            raise ModelSpecError(f"{self.variant} needs {self.ndim} spatial extents, got {self.input_extents}")
        if self.variant == "unettransformer2d":
            bad = [c for c in self.channels if c % self.heads]
            if bad:
                raise ModelSpecError(f"channel widths {bad} not divisible by {self.heads} heads")

    @property
    def is_3d(self) -> bool:
        return self.variant.endswith("3d")

    @property
    def ndim(self) -> int:
        return 3 if self.is_3d else 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["input_extents"] = list(self.input_extents)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        d["input_extents"] = tuple(d["input_extents"])
        return cls(**d)


@dataclass
class Model:
    spec: ModelSpec
    seed: int
    arch: dict
    training: bool = False

    def parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in B.named_tensors(self.arch) if isinstance(v, Tensor)}

    def buffers(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in B.named_tensors(self.arch) if isinstance(v, np.ndarray)}

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def __call__(self, batch: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        return forward(self, batch, rng)

    def astype(self, dtype) -> "Model":
        """Convert parameters and normalisation buffers to ``dtype`` in place."""
        dtype = np.dtype(dtype)
        for t in self.parameters().values():
            t.data = t.data.astype(dtype, copy=False)
        for norm in _norms(self.arch):
            norm.running_mean = norm.running_mean.astype(dtype, copy=False)
            norm.running_var = norm.running_var.astype(dtype, copy=False)
        return self


def _norms(obj):
    if isinstance(obj, B.NormParams):
        yield obj
    elif is_dataclass(obj):
        for f in fields(obj):
            yield from _norms(getattr(obj, f.name))
    elif isinstance(obj, dict):
        for v in obj.values():
            yield from _norms(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            yield from _norms(v)


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    """Initialise an architecture deterministically from ``seed``.

    Conv and projection weights are He-uniform, biases zero, norm scales one.
    """
    rng = np.random.default_rng(seed)
    ch, nd, v = spec.channels, spec.ndim, spec.variant
    L = spec.levels
    residual = v.startswith("resunet")
    make_block = B.init_residual_block if residual else B.init_conv_block

    arch: dict = {"encoder": [], "up": [], "decoder": []}
    cin = 1
    for k in range(L):
        arch["encoder"].append(make_block(rng, cin, ch[k], nd, spec.norm))
        cin = ch[k]
    arch["base"] = make_block(rng, ch[L - 1], ch[L], nd, spec.norm)

    if v == "transattn2d":
        arch["gsa"] = B.init_gsa(rng, ch[L], nd)
        arch["tsa"] = B.init_tsa(rng, ch[L], project=False)
        arch["saa"] = B.init_saa()
    if v == "unettransformer2d":
        arch["mhsa"] = B.init_mhsa(rng, ch[L], spec.heads, ndim=nd)
        arch["mhca"] = []
    if v.startswith("attnunet"):
        arch["gates"] = []

    for k in reversed(range(L)):
        deeper = ch[k + 1]
        if v in ("unet2d", "unet3d", "resunet2d", "resunet3d"):
            arch["up"].append(B.UpConvParams(B.init_conv_transpose(rng, deeper, ch[k], 2, nd)))
            arch["decoder"].append(make_block(rng, 2 * ch[k], ch[k], nd, spec.norm))
        elif v.startswith("attnunet"):
            arch["up"].append(B.UpConvParams(B.init_conv_transpose(rng, deeper, ch[k], 3, nd),
                                             B.init_norm(ch[k]) if spec.norm else None))
            arch["gates"].append(B.init_attention_gate(rng, ch[k], deeper, nd))
            arch["decoder"].append(make_block(rng, 2 * ch[k], ch[k], nd, spec.norm))
        elif v == "transattn2d":
            # parameter-free upsampling: each decoder block emits the next
            # shallower width so the concatenation stays balanced
            incoming = ch[L] if k == L - 1 else ch[k]
            out = ch[k - 1] if k > 0 else ch[0]
            arch["decoder"].append(make_block(rng, incoming + ch[k], out, nd, spec.norm))
        elif v == "unettransformer2d":
            arch["mhca"].append(B.init_mhsa(rng, ch[k], spec.heads, query_channels=deeper,
                                            upsample_channels=deeper, ndim=nd))
            arch["decoder"].append(make_block(rng, ch[k] + deeper, ch[k], nd, spec.norm))
    arch["head"] = B.init_conv(rng, ch[0], 1, 1, nd)
    if not arch["up"]:
        del arch["up"]
    return Model(spec, seed, arch)


def parameter_count(model: Model) -> int:
    return sum(t.size for t in model.parameters().values())


def _block(x: Tensor, p, training: bool) -> Tensor:
    if isinstance(p, B.ResidualBlockParams):
        return B.residual_block(x, p, training)
    return B.conv_block(x, p, training)


def forward(model: Model, batch: Tensor, rng: np.random.Generator | None = None) -> Tensor:
    """Map ``B x 1 x *S`` images to ``B x 1 x *S`` lesion probabilities.

    Spatial extents that are not multiples of ``2**levels`` are zero-padded
    at the far end and the output is cropped back.
    """
    spec, arch, training = model.spec, model.arch, model.training
    nd, L = spec.ndim, spec.levels
    if batch.ndim != nd + 2 or batch.shape[1] != 1:
        raise ValueError(f"{spec.variant} expects B x 1 x {nd} spatial axes, got {batch.shape}")
    sp = batch.shape[2:]
    if spec.input_extents and sp != spec.input_extents:
        raise ValueError(f"{spec.variant} expects spatial extents {spec.input_extents}, got {sp}")
    if training and spec.dropout > 0 and rng is None:
        rng = np.random.default_rng(model.seed)
    mult = 2 ** L
    padded = tuple(math.ceil(n / mult) * mult for n in sp)
    x = batch
    if padded != sp:
        x = pad(x, [(0, 0), (0, 0)] + [(0, p - n) for p, n in zip(padded, sp)])

    def drop(t):
        return dropout(t, spec.dropout, rng, training) if training else t

    skips = []
    h = x
    for k in range(L):
        h = drop(_block(h, arch["encoder"][k], training))
        skips.append(h)
        h = max_pool(h, 2)
    h = _block(h, arch["base"], training)
    v = spec.variant
    if v == "transattn2d":
        h = B.saa_forward(h, arch["gsa"], arch["tsa"], arch["saa"])
    elif v == "unettransformer2d":
        h = B.mhsa_forward(h, arch["mhsa"])
    h = drop(h)

    for i, k in enumerate(reversed(range(L))):
        skip = skips[k]
        if v in ("unet2d", "unet3d", "resunet2d", "resunet3d"):
            u = B.up_conv(h, arch["up"][i], training)
            h = _block(concat([skip, u], axis=1), arch["decoder"][i], training)
        elif v.startswith("attnunet"):
            u = B.up_conv(h, arch["up"][i], training)
            gated = B.attention_gate(skip, h, arch["gates"][i])
            h = _block(concat([gated, u], axis=1), arch["decoder"][i], training)
        elif v == "transattn2d":
            u = interpolate(h, size=skip.shape[2:])
            h = _block(concat([skip, u], axis=1), arch["decoder"][i], training)
        else:
            h = _block(B.mhca_forward(skip, h, arch["mhca"][i]), arch["decoder"][i], training)

    head = arch["head"]
    out = sigmoid(conv_forward(h, head.weight, head.bias))
    if padded != sp:
        out = out[(slice(None), slice(None)) + tuple(slice(0, n) for n in sp)]
    return out
