"""Tiny feed-forward k-gram language model with exact analytic gradients.

Architecture: concat(embeddings of the previous k tokens) -> tanh hidden ->
affine logits. QA pairs are formatted BOS q SEP a EOS and the loss is taken
on the answer tokens plus the closing EOS only.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .corpus import BOS, EOS, PAD, SEP, QaPair, Vocab
from .errors import ConfigurationError, DataError


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context_k: int = 8
    embed_dim: int = 32
    hidden_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "context_k", "embed_dim", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.seed < 0:
            raise ConfigurationError("seed must be >= 0")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "context_k": self.context_k,
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        return cls(**doc)


@dataclass
class Params:
    """Model parameters; float64 in memory, float32 in checkpoints."""

    emb: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    _FIELDS = ("emb", "w1", "b1", "w2", "b2")

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.emb, self.w1, self.b1, self.w2, self.b2)

    def copy(self) -> "Params":
        return Params(*(a.copy() for a in self.arrays()))

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_flat(self, flat: np.ndarray) -> "Params":
        out = []
        pos = 0
        for a in self.arrays():
            out.append(flat[pos:pos + a.size].reshape(a.shape).copy())
            pos += a.size
        return Params(*out)

    def add_flat_(self, flat: np.ndarray, scale: float) -> None:
        pos = 0
        for a in self.arrays():
            a += scale * flat[pos:pos + a.size].reshape(a.shape)
            pos += a.size

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def vocab_size(self) -> int:
        return self.emb.shape[0]

    def context_k(self) -> int:
        return self.w1.shape[0] // self.emb.shape[1]


def init_params(config: ModelConfig) -> Params:
    """Uniform(-0.1, 0.1) init from the seeded generator, fixed draw order."""
    rng = np.random.default_rng(config.seed)
    k, d, h, v = config.context_k, config.embed_dim, config.hidden_dim, config.vocab_size

    def u(*shape):
        return rng.uniform(-0.1, 0.1, shape)

    return Params(emb=u(v, d), w1=u(k * d, h), b1=u(h), w2=u(h, v), b2=u(v))


def zero_params(config: ModelConfig) -> Params:
    k, d, h, v = config.context_k, config.embed_dim, config.hidden_dim, config.vocab_size
    return Params(np.zeros((v, d)), np.zeros((k * d, h)), np.zeros(h),
                  np.zeros((h, v)), np.zeros(v))


def config_for_params(params: Params, seed: int = 0) -> ModelConfig:
    v, d = params.emb.shape
    return ModelConfig(vocab_size=v, context_k=params.w1.shape[0] // d,
                       embed_dim=d, hidden_dim=params.w1.shape[1], seed=seed)


def _check_ids(params: Params, ids) -> None:
    v = params.emb.shape[0]
    arr = np.asarray(ids)
    if arr.size and (arr.min() < 0 or arr.max() >= v):
        raise DataError(f"token id out of range [0, {v})")


def forward_logits(params: Params, context: Sequence[int]) -> np.ndarray:
    """Logits over the vocabulary for one k-token context."""
    k = params.context_k()
    if len(context) != k:
        raise DataError(f"context must have length {k}, got {len(context)}")
    _check_ids(params, context)
    ctx = np.asarray(context, dtype=np.int64).reshape(1, k)
    return kernels.logits_batch(*params.arrays(), ctx)[0]


def per_sample_grad(params: Params, context: Sequence[int], target: int):
    """Next-token cross-entropy loss and its exact flat gradient."""
    k = params.context_k()
    if len(context) != k:
        raise DataError(f"context must have length {k}, got {len(context)}")
    _check_ids(params, context)
    _check_ids(params, [target])
    ctx = np.asarray(context, dtype=np.int64).reshape(1, k)
    tgt = np.asarray([target], dtype=np.int64)
    losses, flat = kernels.per_sample_flat_grads(*params.arrays(), ctx, tgt)
    return float(losses[0]), flat[0]


# --- sample construction ---------------------------------------------------

def qa_sequence(pair: QaPair, vocab: Vocab) -> list[int]:
    return [BOS] + vocab.encode(pair.question) + [SEP] + vocab.encode(pair.answer) + [EOS]


def _window(seq: list[int], t: int, k: int) -> list[int]:
    ctx = seq[max(0, t - k):t]
    return [PAD] * (k - len(ctx)) + ctx


def build_samples(pairs: Sequence[QaPair], vocab: Vocab, k: int,
                  answer_override: dict[int, tuple[str, ...]] | None = None):
    """(contexts, targets) over the answer tokens (+ EOS) of every pair.

    answer_override maps pair ids to substitute answers (used by PO).
    """
    contexts: list[list[int]] = []
    targets: list[int] = []
    for pair in pairs:
        answer = pair.answer
        if answer_override and pair.id in answer_override:
            answer = answer_override[pair.id]
        seq = [BOS] + vocab.encode(pair.question) + [SEP] + vocab.encode(answer) + [EOS]
        first_answer_pos = len(pair.question) + 2
        for t in range(first_answer_pos, len(seq)):
            contexts.append(_window(seq, t, k))
            targets.append(seq[t])
    if not targets:
        raise ConfigurationError("no training samples (empty pair list)")
    return (np.asarray(contexts, dtype=np.int64),
            np.asarray(targets, dtype=np.int64))


# --- training ---------------------------------------------------------------

def _append_log(log_file, record: dict) -> None:
    if log_file is None:
        return
    with open(log_file, "a") as fh:
        fh.write(json.dumps(record) + "\n")


def train(params: Params, pairs: Sequence[QaPair], vocab: Vocab, epochs: int,
          lr: float = 0.05, batch_size: int = 16, seed: int = 0,
          start_epoch: int = 0, log_file=None,
          answer_override: dict | None = None) -> Params:
    """Plain mini-batch SGD on mean cross-entropy; deterministic per seed.

    The shuffle for epoch e is drawn from generator (seed, e), so running E
    epochs and then E more with start_epoch=E reproduces a single 2E-epoch
    run exactly.
    """
    if epochs < 0:
        raise ConfigurationError("epochs must be >= 0")
    if epochs > 0 and not pairs:
        raise ConfigurationError("cannot train on an empty pair list")
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    out = params.copy()
    if epochs == 0:
        return out
    contexts, targets = build_samples(pairs, vocab, out.context_k(), answer_override)
    n = len(targets)
    for e in range(start_epoch, start_epoch + epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([seed, e]).permutation(n)
        total = 0.0
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            loss, *grads = kernels.batch_mean_grad(*out.arrays(),
                                                   contexts[idx], targets[idx])
            total += loss * len(idx)
            for a, g in zip(out.arrays(), grads):
                a -= lr * g
        _append_log(log_file, {"epoch": e, "mean_loss": total / n,
                               "wall_ms": (time.perf_counter() - t0) * 1e3})
    return out


def finetune(params: Params, pairs: Sequence[QaPair], vocab: Vocab, epochs: int,
             lr: float = 0.05, batch_size: int = 16, seed: int = 0,
             start_epoch: int = 0, log_file=None) -> Params:
    """Identical update rule to train(); stage stamping happens at checkpoint level."""
    return train(params, pairs, vocab, epochs, lr=lr, batch_size=batch_size,
                 seed=seed, start_epoch=start_epoch, log_file=log_file)


# --- scoring and generation --------------------------------------------------

def _prefix_ids(pair_question: Sequence[str], vocab: Vocab) -> list[int]:
    return [BOS] + vocab.encode(pair_question) + [SEP]


def sequence_logprob(params: Params, question: Sequence[str],
                     response: Sequence[str], vocab: Vocab) -> tuple[float, int]:
    """Sum of next-token log-probs of response given question + SEP."""
    if not response:
        raise DataError("response must be nonempty")
    k = params.context_k()
    seq = _prefix_ids(question, vocab) + vocab.encode(response)
    n_resp = len(response)
    start = len(seq) - n_resp
    ctx = np.asarray([_window(seq, t, k) for t in range(start, len(seq))],
                     dtype=np.int64)
    tgt = np.asarray(seq[start:], dtype=np.int64)
    _check_ids(params, ctx)
    logps = kernels.score_targets(*params.arrays(), ctx, tgt)
    return float(logps.sum()), n_resp


def generate_greedy(params: Params, question: Sequence[str], vocab: Vocab,
                    max_len: int = 16) -> tuple[str, ...]:
    """Greedy argmax decoding; ties break to the lowest token id; stops at EOS."""
    if max_len < 1:
        raise ConfigurationError("max_len must be >= 1")
    k = params.context_k()
    seq = _prefix_ids(question, vocab)
    out_ids: list[int] = []
    for _ in range(max_len):
        ctx = np.asarray([_window(seq, len(seq), k)], dtype=np.int64)
        logits = kernels.logits_batch(*params.arrays(), ctx)[0]
        nxt = int(np.argmax(logits))
        if nxt == EOS:
            break
        out_ids.append(nxt)
        seq.append(nxt)
    return vocab.decode(out_ids)
