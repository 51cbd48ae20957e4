"""Transformer caption decoder plus greedy and beam-search generation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import MultiHeadParams, causal_mask, multi_head, sinusoidal_encoding, xavier
from .layers import FeedForward, LayerNorm, Linear
from .tensor import Tensor

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3


@dataclass
class DecoderConfig:
    n_layers: int = 3
    d_model: int = 512
    n_heads: int = 8
    d_ff: int = 2048
    vocab_size: int = 10000
    max_len: int = 20

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.max_len < 2:
            raise ValueError("max_len must be at least 2")
        if self.n_layers < 1:
            raise ValueError("decoder needs at least one layer")


@dataclass
class DecoderLayerParams:
    self_attn: MultiHeadParams
    norm1: LayerNorm
    cross_attn: MultiHeadParams
    norm2: LayerNorm
    ff: FeedForward
    norm3: LayerNorm

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, n_heads: int, d_ff: int) -> "DecoderLayerParams":
        return cls(
            MultiHeadParams.init(rng, d_model, n_heads),
            LayerNorm.init(d_model),
            MultiHeadParams.init(rng, d_model, n_heads),
            LayerNorm.init(d_model),
            FeedForward.init(rng, d_model, d_ff),
            LayerNorm.init(d_model),
        )


@dataclass
class DecoderParams:
    embed: Tensor
    layers: list[DecoderLayerParams]
    out: Linear

    @classmethod
    def init(cls, config: DecoderConfig, rng: np.random.Generator) -> "DecoderParams":
        embed = T.tensor(xavier(rng, config.vocab_size, config.d_model), requires_grad=True)
        layers = [DecoderLayerParams.init(rng, config.d_model, config.n_heads, config.d_ff) for _ in range(config.n_layers)]
        return cls(embed, layers, Linear.init(rng, config.d_model, config.vocab_size))


@dataclass
class GenerationResult:
    tokens: list[int]
    text: str
    log_probs: list[float]
    attention: np.ndarray | None = None  # [steps, h, T] cross-attention of the last layer

    @property
    def total_log_prob(self) -> float:
        return float(np.sum(self.log_probs))


def decode_forward(tokens, z_o: Tensor, params: DecoderParams, config: DecoderConfig, return_attention: bool = False):
    """Teacher-forced logits ``[len(tokens), vocab]``.

    With ``return_attention`` also returns the last layer's cross-attention
    weights as ``[h, len(tokens), T]``.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    n = len(ids)
    if n == 0:
        raise ValueError("empty token sequence")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError(f"token id out of range [0, {config.vocab_size})")
    if n > config.max_len + 1:
        raise ValueError(f"sequence of {n} tokens exceeds max_len={config.max_len}")
    x = T.add(T.embedding(params.embed, ids), T.tensor(sinusoidal_encoding(n, config.d_model)))
    mask = causal_mask(n)
    attn = None
    for layer in params.layers:
        h = layer.norm1(T.add(x, multi_head(x, x, layer.self_attn, mask)))
        c, attn = multi_head(h, z_o, layer.cross_attn, return_weights=True)
        h = layer.norm2(T.add(h, c))
        x = layer.norm3(T.add(h, layer.ff(h)))
    logits = params.out(x)
    if return_attention:
        return logits, attn
    return logits


def _step_log_probs(prefix: list[int], z_o: Tensor, params: DecoderParams, config: DecoderConfig):
    with T.no_grad():
        logits, attn = decode_forward(prefix, z_o, params, config, return_attention=True)
        logp = T.log_softmax(logits, axis=-1).data[-1]
    return logp, attn[:, -1, :]


def detokenize(tokens, itos=None) -> str:
    if itos is None:
        return ""
    words = []
    for t in tokens:
        if t == EOS_ID:
            break
        if t in (PAD_ID, BOS_ID):
            continue
        words.append(itos[t])
    return " ".join(words)


def greedy_generate(z_o: Tensor, params: DecoderParams, config: DecoderConfig, max_len: int | None = None, itos=None) -> GenerationResult:
    """Argmax decoding; ``tokens`` excludes BOS and includes EOS when emitted."""
    max_len = config.max_len if max_len is None else min(max_len, config.max_len)
    prefix = [BOS_ID]
    logps, attns = [], []
    for _ in range(max_len):
        logp, attn = _step_log_probs(prefix, z_o, params, config)
        tok = int(np.argmax(logp))
        prefix.append(tok)
        logps.append(float(logp[tok]))
        attns.append(attn)
        if tok == EOS_ID:
            break
    tokens = prefix[1:]
    return GenerationResult(tokens, detokenize(tokens, itos), logps, np.stack(attns))


@dataclass(order=True)
class _Hyp:
    score: float
    tokens: list[int] = field(compare=False)
    log_probs: list[float] = field(compare=False)
    attns: list[np.ndarray] = field(compare=False)


def beam_generate(z_o: Tensor, params: DecoderParams, config: DecoderConfig, beam_size: int = 3, max_len: int | None = None, itos=None) -> GenerationResult:
    """Beam search; finished hypotheses are ranked by log-prob per token."""
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    max_len = config.max_len if max_len is None else min(max_len, config.max_len)
    alive = [_Hyp(0.0, [], [], [])]
    finished: list[_Hyp] = []
    for _ in range(max_len):
        cand_scores, cand_logps, cand_attn = [], [], []
        for hyp in alive:
            logp, attn = _step_log_probs([BOS_ID] + hyp.tokens, z_o, params, config)
            cand_scores.append(hyp.score + logp)
            cand_logps.append(logp)
            cand_attn.append(attn)
        flat = np.concatenate(cand_scores)
        step = np.concatenate(cand_logps)
        vocab = config.vocab_size
        # ties on the running score fall back to the step log-prob, then index,
        # so beam_size=1 reproduces argmax decoding exactly
        order = np.lexsort((np.arange(flat.size), -step, -flat))[:beam_size]
        next_alive = []
        for idx in order:
            h, tok = divmod(int(idx), vocab)
            parent = alive[h]
            hyp = _Hyp(
                float(flat[idx]),
                parent.tokens + [tok],
                parent.log_probs + [float(cand_logps[h][tok])],
                parent.attns + [cand_attn[h]],
            )
            (finished if tok == EOS_ID else next_alive).append(hyp)
        alive = next_alive
        if not alive:
            break
    finished.extend(alive)
    best = max(finished, key=lambda hyp: hyp.score / len(hyp.tokens))
    return GenerationResult(best.tokens, detokenize(best.tokens, itos), best.log_probs, np.stack(best.attns))


def sample_generate(z_o: Tensor, params: DecoderParams, config: DecoderConfig, rng: np.random.Generator, max_len: int | None = None) -> list[int]:
    """Multinomial sampling from the model distribution (SCST exploration)."""
    max_len = config.max_len if max_len is None else min(max_len, config.max_len)
    prefix = [BOS_ID]
    for _ in range(max_len):
        logp, _ = _step_log_probs(prefix, z_o, params, config)
        probs = np.exp(logp)
        tok = int(rng.choice(len(probs), p=probs / probs.sum()))
        prefix.append(tok)
        if tok == EOS_ID:
            break
    return prefix[1:]
