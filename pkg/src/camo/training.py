"""Two-stage optimisation: token cross-entropy, then self-critical sequence training."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .decoder import BOS_ID, EOS_ID, PAD_ID, detokenize, sample_generate, greedy_generate
from .metrics import CiderD, tok
from .model import CaptionModel
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# -- losses ---------------------------------------------------------------------


def xe_loss(logits: Tensor, targets: Sequence[int], pad_id: int = PAD_ID) -> Tensor:
    """Mean negative log-likelihood over non-pad target positions."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != len(targets):
        raise ValueError(f"logits {logits.shape} do not match {len(targets)} targets")
    keep = np.flatnonzero(targets != pad_id)
    if keep.size == 0:
        raise ValueError("all target positions are padding")
    logp = T.log_softmax(logits, axis=-1)
    if keep.size != len(targets):
        logp = T.select_rows(logp, keep)
    return T.scale(T.mean(T.pick(logp, targets[keep])), -1.0)


# -- schedules ------------------------------------------------------------------


def warmup_lr(step: int, d_model: int, warmup_iters: int) -> float:
    """d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ValueError("step counts from 1")
    return d_model**-0.5 * min(step**-0.5, step * warmup_iters**-1.5)


def step_lr(epoch: int, base_lr: float = 1.0) -> float:
    """Piecewise epoch schedule; at shared boundaries the lower branch wins."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if epoch <= 3:
        return base_lr * epoch / 4
    if epoch <= 10:
        return base_lr
    if epoch <= 12:
        return base_lr * 0.2
    return base_lr * 0.2**2


# -- Adam -----------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-9) -> AdamState:
    """One bias-corrected Adam step; parameters are reassigned in place."""
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        if m.shape != p.shape:
            raise ValueError(f"optimizer state for {name} has shape {m.shape}, param {p.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.assign(p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps))
    return state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm is not None and total > max_norm:
        factor = max_norm / total
        for k in grads:
            grads[k] = grads[k] * factor
    return total


# -- config / logs --------------------------------------------------------------


@dataclass
class TrainConfig:
    stage: str = "xe"
    epochs: int = 20
    batch_size: int = 8
    schedule: str = "warmup"
    base_lr: float = 1.0
    lr: float = 5e-6
    warmup_iters: int = 4000
    seed: int = 0
    alpha: float = 0.1
    beta: float = 0.2
    adam_beta1: float = 0.9
    adam_beta2: float | None = None
    adam_eps: float = 1e-9
    grad_clip: float | None = None

    def __post_init__(self):
        if self.stage not in ("xe", "scst"):
            raise ValueError(f"stage must be xe or scst, got {self.stage!r}")
        if self.schedule not in ("warmup", "step"):
            raise ValueError(f"schedule must be warmup or step, got {self.schedule!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.warmup_iters < 1:
            raise ValueError("epochs, batch_size and warmup_iters must be positive")

    @property
    def betas(self) -> tuple[float, float]:
        b2 = self.adam_beta2
        if b2 is None:
            b2 = 0.98 if self.schedule == "warmup" else 0.999
        return self.adam_beta1, b2

    def learning_rate(self, iteration: int, epoch: int, d_model: int) -> float:
        if self.schedule == "warmup":
            return self.base_lr * warmup_lr(iteration, d_model, self.warmup_iters)
        return self.lr * step_lr(epoch, self.base_lr)


@dataclass
class TrainLogRecord:
    epoch: int
    iteration: int
    lr: float
    loss: float | None = None
    mean_reward: float | None = None
    wallclock: float = 0.0

    def to_json(self) -> str:
        return json.dumps({k: v for k, v in dataclasses.asdict(self).items() if v is not None})


class JsonlLogger:
    def __init__(self, path=None):
        self._fh = open(path, "w", encoding="utf-8") if path else None
        self.records: list[TrainLogRecord] = []

    def __call__(self, rec: TrainLogRecord) -> None:
        self.records.append(rec)
        if self._fh:
            self._fh.write(rec.to_json() + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


# -- examples -------------------------------------------------------------------


@dataclass
class Example:
    image_id: int
    features: np.ndarray
    tokens: list[int]
    refs: list[list[str]]


def make_examples(manifest, features: dict, vocab, max_len: int, per_caption: bool = True) -> list[Example]:
    """One example per (image, caption) pair, or one per image."""
    refs = manifest.captions_by_image()
    out = []
    for img in manifest.images:
        if img.feature_key not in features:
            raise KeyError(f"no features for key {img.feature_key!r}")
        feats = np.asarray(features[img.feature_key], dtype=np.float64)
        ref_toks = [tok(c) for c in refs[img.id]]
        caps = refs[img.id] if per_caption else refs[img.id][:1]
        for cap in caps:
            out.append(Example(img.id, feats, vocab.encode(cap, max_len), ref_toks))
    return out


def unique_images(examples: Sequence[Example]) -> list[Example]:
    seen, out = set(), []
    for ex in examples:
        if ex.image_id not in seen:
            seen.add(ex.image_id)
            out.append(ex)
    return out


def example_loss(model: CaptionModel, ex: Example) -> Tensor:
    z_o = model.encode(ex.features).z_o
    logits = model.decode(ex.tokens[:-1], z_o)
    return xe_loss(logits, ex.tokens[1:])


def _collect_grads(model: CaptionModel) -> dict[str, np.ndarray]:
    return {n: p.grad for n, p in model.named_parameters().items() if p.grad is not None}


# -- XE stage -------------------------------------------------------------------


def train_xe(
    model: CaptionModel,
    examples: Sequence[Example],
    config: TrainConfig,
    logger: Callable[[TrainLogRecord], None] | None = None,
    state: AdamState | None = None,
    on_epoch_end: Callable[[int, float], bool] | None = None,
) -> AdamState:
    """Teacher-forced cross-entropy training; deterministic given ``config.seed``.

    ``on_epoch_end(epoch, mean_loss)`` may return True to stop early.
    """
    if not examples:
        raise TrainingError("no training examples")
    rng = np.random.default_rng([config.seed, 2])
    state = state or AdamState()
    params = model.named_parameters()
    start = time.perf_counter()
    iteration = state.step
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(examples))
        epoch_losses = []
        for b in range(0, len(order), config.batch_size):
            batch = [examples[i] for i in order[b : b + config.batch_size]]
            iteration += 1
            lr = config.learning_rate(iteration, epoch, model.config.d_model)
            model.zero_grad()
            losses = [example_loss(model, ex) for ex in batch]
            loss = T.scale(_tree_sum(losses), 1.0 / len(batch))
            loss.backward()
            grads = _collect_grads(model)
            clip_grad_norm(grads, config.grad_clip)
            adam_update(params, grads, state, lr, config.betas, config.adam_eps)
            epoch_losses.append(loss.item() * len(batch))
            if logger:
                logger(TrainLogRecord(epoch, iteration, lr, loss=loss.item(), wallclock=time.perf_counter() - start))
        if on_epoch_end and on_epoch_end(epoch, sum(epoch_losses) / len(examples)):
            break
    return state


def _tree_sum(ts: Sequence[Tensor]) -> Tensor:
    out = ts[0]
    for t in ts[1:]:
        out = T.add(out, t)
    return out


# -- SCST stage -----------------------------------------------------------------


@dataclass
class ScstResult:
    loss: float
    mean_reward: float
    greedy_reward: float
    advantages: list[float]
    updated: bool


def _words(tokens, itos) -> list[str]:
    return detokenize(tokens, itos).split()


def scst_step(batch: Sequence[Example], model: CaptionModel, metric: CiderD, itos, rng: np.random.Generator, state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-9, grad_clip: float | None = None) -> ScstResult:
    """One self-critical policy-gradient step.

    Each image gets one multinomial sample and a greedy baseline; the
    advantage is the reward difference. Batches whose advantages are all zero
    leave parameters and optimizer state untouched.
    """
    dec = model.params.decoder
    items = []
    for ex in batch:
        with T.no_grad():
            z_o = model.encode(ex.features).z_o
        sample = sample_generate(z_o, dec, model.dec_config, rng)
        greedy = greedy_generate(z_o, dec, model.dec_config).tokens
        try:
            r_s = metric.score_one(_words(sample, itos), ex.refs)
            r_g = metric.score_one(_words(greedy, itos), ex.refs)
        except Exception as exc:
            raise TrainingError(f"reward computation failed for image {ex.image_id}: {exc}") from exc
        items.append((ex, sample, r_s, r_g))
    advantages = [r_s - r_g for _, _, r_s, r_g in items]
    mean_reward = float(np.mean([it[2] for it in items]))
    greedy_reward = float(np.mean([it[3] for it in items]))
    if all(a == 0.0 for a in advantages):
        return ScstResult(0.0, mean_reward, greedy_reward, advantages, False)
    model.zero_grad()
    terms = []
    for (ex, sample, _, _), adv in zip(items, advantages):
        if adv == 0.0:
            continue
        z_o = model.encode(ex.features).z_o
        logits = model.decode([BOS_ID] + sample[:-1], z_o)
        logp = T.sum(T.pick(T.log_softmax(logits, axis=-1), sample))
        terms.append(T.scale(logp, -adv))
    loss = T.scale(_tree_sum(terms), 1.0 / len(batch))
    loss.backward()
    grads = _collect_grads(model)
    clip_grad_norm(grads, grad_clip)
    adam_update(model.named_parameters(), grads, state, lr, betas, eps)
    return ScstResult(loss.item(), mean_reward, greedy_reward, advantages, True)


def train_scst(model: CaptionModel, examples: Sequence[Example], config: TrainConfig, metric: CiderD, itos, logger: Callable[[TrainLogRecord], None] | None = None, iterations: int | None = None) -> list[ScstResult]:
    """SCST over unique images.

    With ``iterations`` set, epochs repeat until exactly that many steps ran.
    """
    images = unique_images(examples)
    if not images:
        raise TrainingError("no training images")
    order_rng = np.random.default_rng([config.seed, 3])
    sample_rng = np.random.default_rng([config.seed, 4])
    state = AdamState()
    results: list[ScstResult] = []
    start = time.perf_counter()
    iteration = 0
    epoch = 0
    while True:
        epoch += 1
        if iterations is None and epoch > config.epochs:
            return results
        order = order_rng.permutation(len(images))
        for b in range(0, len(order), config.batch_size):
            if iterations is not None and iteration >= iterations:
                return results
            iteration += 1
            lr = config.learning_rate(iteration, epoch, model.config.d_model)
            batch = [images[i] for i in order[b : b + config.batch_size]]
            res = scst_step(batch, model, metric, itos, sample_rng, state, lr, config.betas, config.adam_eps, config.grad_clip)
            results.append(res)
            if logger:
                logger(TrainLogRecord(epoch, iteration, lr, loss=res.loss, mean_reward=res.mean_reward, wallclock=time.perf_counter() - start))


def perturb_parameters(model: CaptionModel, scale: float, seed: int) -> None:
    """Add seeded Gaussian noise (std ``scale``) to every parameter."""
    rng = np.random.default_rng(seed)
    for _, p in sorted(model.named_parameters().items()):
        p.assign(p.data + scale * rng.standard_normal(p.shape))


def evaluate_model(model: CaptionModel, examples: Sequence[Example], itos, metric: CiderD | None = None, beam_size: int = 1) -> tuple[float, dict[int, str]]:
    """Greedy/beam captions for unique images and their corpus CIDEr-D."""
    images = unique_images(examples)
    preds = {}
    for ex in images:
        res = model.greedy(ex.features, itos=itos) if beam_size == 1 else model.beam(ex.features, beam_size, itos=itos)
        preds[ex.image_id] = res.text
    metric = metric or CiderD.from_references([ex.refs for ex in images])
    score, _ = metric.compute([tok(preds[ex.image_id]) for ex in images], [ex.refs for ex in images])
    return score, preds
