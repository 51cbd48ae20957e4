"""Transformer encoder with CAMO multi-level output fusion.

The encoder stack produces one output per layer. CAMO then

1. projects the per-token channel concatenation of all layer outputs through
   an affine map and LeakyReLU (the joint representation ``z_f``),
2. refines each layer output ``Z_i`` (``i >= 2``) by attending from it to the
   already-refined ``Z_{i-1}``, added back with residual weight ``alpha``,
3. returns ``z_o = beta * z_f + Z_N``.

With ``alpha = beta = 0`` the result is bit-for-bit the vanilla encoder's
last-layer output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import MultiHeadParams, multi_head
from .layers import FeedForward, LayerNorm, Linear
from .tensor import Tensor

DEFAULT_ALPHA = 0.1
DEFAULT_BETA = 0.2
# best cell of the published alpha/beta grid (CIDEr 72.7152); reference only
BEST_GRID_BETA = 0.4


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    n_layers: int = 3
    d_model: int = 512
    n_heads: int = 8
    d_ff: int = 2048
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    camo: bool = True
    fuse_from: str = "raw"
    slope: float = 0.01

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError("encoder needs at least one layer")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ConfigError(f"alpha and beta must lie in [0, 1], got {self.alpha}, {self.beta}")
        if self.fuse_from not in ("raw", "refined"):
            raise ConfigError(f"fuse_from must be 'raw' or 'refined', got {self.fuse_from!r}")


@dataclass
class EncoderLayerParams:
    attn: MultiHeadParams
    norm1: LayerNorm
    ff: FeedForward
    norm2: LayerNorm

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, n_heads: int, d_ff: int) -> "EncoderLayerParams":
        return cls(
            MultiHeadParams.init(rng, d_model, n_heads),
            LayerNorm.init(d_model),
            FeedForward.init(rng, d_model, d_ff),
            LayerNorm.init(d_model),
        )


@dataclass
class CamoParams:
    mlp: Linear
    refine: list[MultiHeadParams]

    @classmethod
    def init(cls, rng: np.random.Generator, n_layers: int, d_model: int, n_heads: int) -> "CamoParams":
        mlp = Linear.init(rng, n_layers * d_model, d_model)
        refine = [MultiHeadParams.init(rng, d_model, n_heads, out_proj=False) for _ in range(n_layers - 1)]
        return cls(mlp, refine)


@dataclass
class EncoderParams:
    layers: list[EncoderLayerParams]
    camo: CamoParams | None = None

    @classmethod
    def init(cls, config: EncoderConfig, rng: np.random.Generator, camo_rng: np.random.Generator | None = None) -> "EncoderParams":
        """Initialise the stack; CAMO weights come from ``camo_rng``.

        Drawing CAMO weights from a separate stream keeps the base-stack
        initialisation identical between CAMO and vanilla builds.
        """
        layers = [EncoderLayerParams.init(rng, config.d_model, config.n_heads, config.d_ff) for _ in range(config.n_layers)]
        camo = None
        if config.camo:
            camo = CamoParams.init(camo_rng if camo_rng is not None else rng, config.n_layers, config.d_model, config.n_heads)
        return cls(layers, camo)


@dataclass
class EncoderBundle:
    layer_outputs: list[Tensor]
    z_f: Tensor | None
    z_o: Tensor
    raw_outputs: list[Tensor] = field(default_factory=list)


def encoder_layer(x: Tensor, p: EncoderLayerParams) -> Tensor:
    """Post-norm layer: LN(x + MHA(x)), then LN(h + FFN(h))."""
    h = p.norm1(T.add(x, multi_head(x, x, p.attn)))
    return p.norm2(T.add(h, p.ff(h)))


def encode_base(v: Tensor, layers: list[EncoderLayerParams]) -> list[Tensor]:
    if v.ndim != 2 or v.shape[0] < 1:
        raise ValueError(f"expected [T x d_model] features with T >= 1, got {v.shape}")
    outputs = []
    z = v
    for p in layers:
        z = encoder_layer(z, p)
        outputs.append(z)
    return outputs


def fuse_joint(outputs: list[Tensor], p: CamoParams, slope: float = 0.01) -> Tensor:
    shapes = {z.shape for z in outputs}
    if len(shapes) != 1:
        raise ValueError(f"layer outputs differ in shape: {sorted(shapes)}")
    width = sum(z.shape[-1] for z in outputs)
    if p.mlp.weight.shape[0] != width:
        raise ConfigError(f"joint projection expects {p.mlp.weight.shape[0]} input channels, got {width}")
    return T.leaky_relu(p.mlp(T.concat(outputs, axis=-1)), slope)


def cross_refine(z_i: Tensor, z_prev: Tensor, step: MultiHeadParams, alpha) -> Tensor:
    """``alpha * attend(query=z_i, key/value=z_prev) + z_i``."""
    if z_i.shape != z_prev.shape:
        raise ValueError(f"shapes differ: {z_i.shape} vs {z_prev.shape}")
    return T.add(T.scale(multi_head(z_i, z_prev, step), alpha), z_i)


def camo_forward(v: Tensor, config: EncoderConfig, params: EncoderParams, alpha=None, beta=None) -> EncoderBundle:
    """Run the encoder and fuse its outputs.

    ``alpha``/``beta`` override the config values; passing 1-element tensors
    makes the output differentiable with respect to them.
    """
    alpha = config.alpha if alpha is None else alpha
    beta = config.beta if beta is None else beta
    raw = encode_base(v, params.layers)
    if not config.camo:
        return EncoderBundle(list(raw), None, raw[-1], raw)
    if params.camo is None:
        raise ConfigError("CAMO is enabled but no CAMO parameters were given")
    z_f = fuse_joint(raw, params.camo, config.slope) if config.fuse_from == "raw" else None
    refined = [raw[0]]
    for i in range(1, len(raw)):
        refined.append(cross_refine(raw[i], refined[i - 1], params.camo.refine[i - 1], alpha))
    if z_f is None:
        z_f = fuse_joint(refined, params.camo, config.slope)
    z_o = T.add(T.scale(z_f, beta), refined[-1])
    return EncoderBundle(refined, z_f, z_o, raw)


def vanilla_forward(v: Tensor, params: EncoderParams) -> Tensor:
    return encode_base(v, params.layers)[-1]
