"""Captioning model: feature projection, (CAMO) encoder and decoder."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decoder import DecoderConfig, DecoderParams, beam_generate, decode_forward, greedy_generate
from .encoder import EncoderBundle, EncoderConfig, EncoderParams, camo_forward
from .layers import Linear, named_parameters
from .tensor import Tensor

# independent RNG streams per component, so enabling CAMO never perturbs
# the initialisation of the shared parts
_STREAM_BASE, _STREAM_CAMO = 0, 1


@dataclass
class ModelConfig:
    d_feat: int = 2048
    d_model: int = 512
    n_heads: int = 8
    d_ff: int = 2048
    enc_layers: int = 3
    dec_layers: int = 3
    vocab_size: int = 10000
    max_len: int = 20
    alpha: float = 0.1
    beta: float = 0.2
    camo: bool = True
    fuse_from: str = "raw"
    slope: float = 0.01

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(
            n_layers=self.enc_layers,
            d_model=self.d_model,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            alpha=self.alpha,
            beta=self.beta,
            camo=self.camo,
            fuse_from=self.fuse_from,
            slope=self.slope,
        )

    def decoder(self) -> DecoderConfig:
        return DecoderConfig(
            n_layers=self.dec_layers,
            d_model=self.d_model,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            vocab_size=self.vocab_size,
            max_len=self.max_len,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelParams:
    feat_proj: Linear
    encoder: EncoderParams
    decoder: DecoderParams


class CaptionModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.enc_config = config.encoder()
        self.dec_config = config.decoder()
        base = np.random.default_rng([seed, _STREAM_BASE])
        camo_rng = np.random.default_rng([seed, _STREAM_CAMO])
        feat_proj = Linear.init(base, config.d_feat, config.d_model)
        encoder = EncoderParams.init(self.enc_config, base, camo_rng)
        decoder = DecoderParams.init(self.dec_config, base)
        self.params = ModelParams(feat_proj, encoder, decoder)

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(named_parameters(self.params))

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def encode(self, features, alpha=None, beta=None) -> EncoderBundle:
        feats = features if isinstance(features, Tensor) else T.tensor(np.asarray(features, dtype=np.float64))
        if feats.ndim != 2 or feats.shape[1] != self.config.d_feat:
            raise ValueError(f"features must be [T x {self.config.d_feat}], got {feats.shape}")
        v = self.params.feat_proj(feats)
        return camo_forward(v, self.enc_config, self.params.encoder, alpha=alpha, beta=beta)

    def decode(self, tokens, z_o: Tensor, return_attention: bool = False):
        return decode_forward(tokens, z_o, self.params.decoder, self.dec_config, return_attention)

    def greedy(self, features, max_len: int | None = None, itos=None):
        with T.no_grad():
            z_o = self.encode(features).z_o
        return greedy_generate(z_o, self.params.decoder, self.dec_config, max_len, itos)

    def beam(self, features, beam_size: int = 3, max_len: int | None = None, itos=None):
        with T.no_grad():
            z_o = self.encode(features).z_o
        return beam_generate(z_o, self.params.decoder, self.dec_config, beam_size, max_len, itos)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.numpy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            p.assign(state[name])
