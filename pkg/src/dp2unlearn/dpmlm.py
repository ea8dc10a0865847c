"""Exponential-mechanism token substitution over answer text.

P(w'|w) is proportional to exp(u(w,w') * epsilon), where the utility u is
cosine similarity of static PPMI co-occurrence embeddings, clipped and then
affine-normalized into [0,1] so that u(w,w) = 1. Privacy composes
sequentially per document: eps_doc = (#substituted positions) * eps_token.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .budget import Mechanism, PrivacyBudget
from .corpus import SPECIAL_TOKENS, Corpus, QaPair, Split, Vocab
from .errors import ConfigurationError

# Template glue words; everything else in an answer counts as content.
STOPWORDS = frozenset("""
a an the of in at on by as is was are were and to for with from over under
has have had does did do who whom what which when where how many much most
every so far now up out also his her their its this that these those not no
i am can
""".split())

SELECTOR_ANSWER_CONTENT = "answer_content"
SELECTOR_ALL_ANSWER = "all_answer"
SELECTOR_CUSTOM = "custom"
SELECTOR_NONE = "none"
_SELECTORS = (SELECTOR_ANSWER_CONTENT, SELECTOR_ALL_ANSWER, SELECTOR_CUSTOM,
              SELECTOR_NONE)

# The paper-calibrated logit clamp; with a cosine scorer it only declares the
# clamp range applied before normalization.
DEFAULT_CLIP_MIN = -5.2093
DEFAULT_CLIP_MAX = 20.3048


@dataclass(frozen=True)
class SanitizerConfig:
    epsilon_per_token: float
    clip_min: float = DEFAULT_CLIP_MIN
    clip_max: float = DEFAULT_CLIP_MAX
    selector: str = SELECTOR_ANSWER_CONTENT
    custom_tokens: frozenset[str] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epsilon_per_token < 0:
            raise ConfigurationError("epsilon_per_token must be >= 0")
        if not self.clip_min < self.clip_max:
            raise ConfigurationError("clip_min must be < clip_max")
        if self.selector not in _SELECTORS:
            raise ConfigurationError(
                f"selector must be one of {_SELECTORS}, got {self.selector!r}")
        if self.selector == SELECTOR_CUSTOM and not self.custom_tokens:
            raise ConfigurationError("custom selector needs a custom_tokens set")
        if self.seed < 0:
            raise ConfigurationError("seed must be >= 0")


@dataclass(frozen=True)
class SanitizationReceipt:
    doc_id: int
    positions: tuple[int, ...]
    epsilon_per_token: float
    epsilon_doc: float
    delta: float = 0.0

    def __post_init__(self):
        expected = len(self.positions) * self.epsilon_per_token
        if abs(self.epsilon_doc - expected) > 1e-12 * max(1.0, expected):
            raise ConfigurationError("epsilon_doc must equal #positions * epsilon_per_token")

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "positions": list(self.positions),
            "epsilon_per_token": self.epsilon_per_token,
            "epsilon_doc": self.epsilon_doc,
            "delta": self.delta,
        }


class UtilityScorer:
    """Cosine-similarity utility over a static embedding table.

    Embeddings are row-aligned with vocab ids. Scores are clipped to the
    effective range [max(clip_min,-1), min(clip_max,1)] and affine-mapped to
    [0,1]; the self-score is always 1.
    """

    def __init__(self, embeddings: np.ndarray, clip_min: float = DEFAULT_CLIP_MIN,
                 clip_max: float = DEFAULT_CLIP_MAX):
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.ndim != 2:
            raise ConfigurationError("embedding table must be 2-d")
        lo, hi = max(clip_min, -1.0), min(clip_max, 1.0)
        if not lo < hi:
            raise ConfigurationError(
                "clip bounds leave an empty cosine range after intersection with [-1,1]")
        self.embeddings = emb
        self.clip_min = clip_min
        self.clip_max = clip_max
        self._lo, self._hi = lo, hi
        norms = np.linalg.norm(emb, axis=1)
        self._unit = np.divide(emb, norms[:, None], out=np.zeros_like(emb),
                               where=norms[:, None] > 0)

    def scores(self, source_id: int, candidate_ids: Sequence[int]) -> np.ndarray:
        """Normalized utilities u(source, candidate) in [0,1]."""
        cands = np.asarray(candidate_ids, dtype=np.int64)
        cos = self._unit[cands] @ self._unit[source_id]
        cos[cands == source_id] = 1.0  # self-similarity maximal even for zero rows
        clipped = np.clip(cos, self._lo, self._hi)
        return (clipped - self._lo) / (self._hi - self._lo)

    def save(self, path: str | Path) -> None:
        np.savez(path, embeddings=self.embeddings,
                 clip=np.array([self.clip_min, self.clip_max]))

    @classmethod
    def load(cls, path: str | Path) -> "UtilityScorer":
        with np.load(path) as doc:
            return cls(doc["embeddings"], float(doc["clip"][0]), float(doc["clip"][1]))

    @classmethod
    def train_ppmi(cls, corpus: Corpus, dim: int = 16, window: int = 7,
                   clip_min: float = DEFAULT_CLIP_MIN,
                   clip_max: float = DEFAULT_CLIP_MAX) -> "UtilityScorer":
        """PPMI co-occurrence vectors over the raw corpus text (question +
        both answer wordings), reduced to `dim` via SVD.

        The window is wide enough to reach the entity name from any fact-slot
        position; with a narrow window, slot values of one template share
        exactly proportional count rows and tie at cosine 1.0.
        """
        v = len(corpus.vocab)
        counts = np.zeros((v, v))
        for pair in corpus.pairs:
            q = corpus.vocab.encode(pair.question)
            for body in (pair.answer, pair.paraphrased_answer):
                ids = q + corpus.vocab.encode(body)
                for i, a in enumerate(ids):
                    for j in range(max(0, i - window), min(len(ids), i + window + 1)):
                        if j != i:
                            counts[a, ids[j]] += 1.0
        total = counts.sum()
        if total == 0:
            raise ConfigurationError("corpus has no text to train the scorer on")
        row = counts.sum(axis=1, keepdims=True)
        col = counts.sum(axis=0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            pmi = np.log(counts * total / (row * col))
        ppmi = np.where(np.isfinite(pmi) & (pmi > 0), pmi, 0.0)
        u, s, _ = np.linalg.svd(ppmi, full_matrices=False)
        dim = min(dim, len(s))
        return cls(u[:, :dim] * np.sqrt(s[:dim]), clip_min, clip_max)


def substitution_distribution(token_id: int, candidate_ids: Sequence[int],
                              epsilon: float, scorer: UtilityScorer) -> np.ndarray:
    """Exponential-mechanism distribution exp(u*eps) / sum, max-subtracted."""
    if len(candidate_ids) == 0:
        raise ConfigurationError("candidate set must be nonempty")
    if epsilon < 0:
        raise ConfigurationError("epsilon must be >= 0")
    u = scorer.scores(token_id, candidate_ids)
    w = u * epsilon
    w -= w.max()
    e = np.exp(w)
    return e / e.sum()


def _selected(token: str, cfg: SanitizerConfig) -> bool:
    if cfg.selector == SELECTOR_NONE:
        return False
    if cfg.selector == SELECTOR_ALL_ANSWER:
        return True
    if cfg.selector == SELECTOR_CUSTOM:
        return token in cfg.custom_tokens
    return token not in STOPWORDS


def select_positions(pair: QaPair, cfg: SanitizerConfig) -> list[int]:
    return [i for i, t in enumerate(pair.answer) if _selected(t, cfg)]


def _candidate_ids(vocab: Vocab) -> np.ndarray:
    return np.asarray(vocab.content_ids(), dtype=np.int64)


def sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from a probability vector."""
    cum = np.cumsum(probs)
    return min(int(np.searchsorted(cum, rng.random(), side="right")),
               len(probs) - 1)


def _resample(tokens: list[str], positions: list[int], cfg: SanitizerConfig,
              scorer: UtilityScorer, rng: np.random.Generator,
              vocab: Vocab, cands: np.ndarray) -> None:
    for pos in positions:
        token_id = vocab.token_to_id[tokens[pos]]
        probs = substitution_distribution(token_id, cands, cfg.epsilon_per_token,
                                          scorer)
        tokens[pos] = vocab.id_to_token[int(cands[sample_index(probs, rng)])]


def sanitize_answer(pair: QaPair, cfg: SanitizerConfig, scorer: UtilityScorer,
                    rng: np.random.Generator, vocab: Vocab
                    ) -> tuple[QaPair, SanitizationReceipt]:
    """Resample each selected position of the pair's trained text (answer and
    paraphrase wording) independently; the question and the perturbed/refusal
    evaluation fields stay untouched.

    Receipt positions index the answer first, then the paraphrase offset by
    len(answer); the per-document budget composes over all of them.
    """
    a_pos = select_positions(pair, cfg)
    p_pos = [i for i, t in enumerate(pair.paraphrased_answer)
             if _selected(t, cfg)]
    positions = [*a_pos, *(len(pair.answer) + i for i in p_pos)]
    receipt = SanitizationReceipt(
        doc_id=pair.id, positions=tuple(positions),
        epsilon_per_token=cfg.epsilon_per_token,
        epsilon_doc=len(positions) * cfg.epsilon_per_token)
    if not positions:
        return pair, receipt
    cands = _candidate_ids(vocab)
    answer = list(pair.answer)
    paraphrase = list(pair.paraphrased_answer)
    _resample(answer, a_pos, cfg, scorer, rng, vocab, cands)
    _resample(paraphrase, p_pos, cfg, scorer, rng, vocab, cands)
    new_pair = dataclasses.replace(pair, answer=tuple(answer),
                                   paraphrased_answer=tuple(paraphrase),
                                   sanitized=True)
    return new_pair, receipt


def sanitize_corpus(corpus: Corpus, cfg: SanitizerConfig,
                    scorer: UtilityScorer | None = None,
                    seed: int | None = None
                    ) -> tuple[Corpus, list[SanitizationReceipt]]:
    """Sanitize every profile pair; aux (public) pairs pass through as-is.

    Deterministic per seed: each document draws from substream (seed, doc id),
    so sanitization order does not matter.
    """
    if scorer is None:
        scorer = UtilityScorer.train_ppmi(corpus, clip_min=cfg.clip_min,
                                          clip_max=cfg.clip_max)
    if seed is None:
        seed = cfg.seed
    new_pairs = []
    receipts = []
    for pair in corpus.pairs:
        if pair.split in (Split.RETAIN, Split.FORGET):
            rng = np.random.default_rng([seed, pair.id])
            new_pair, receipt = sanitize_answer(pair, cfg, scorer, rng, corpus.vocab)
        else:
            new_pair = pair
            receipt = SanitizationReceipt(doc_id=pair.id, positions=(),
                                          epsilon_per_token=cfg.epsilon_per_token,
                                          epsilon_doc=0.0)
        new_pairs.append(new_pair)
        receipts.append(receipt)
    sanitized = dataclasses.replace(corpus, pairs=tuple(new_pairs), sanitized=True,
                                    _by_id={})
    return sanitized, receipts


def budget_from_receipts(receipts: Sequence[SanitizationReceipt],
                         epsilon_per_token: float) -> PrivacyBudget:
    steps = sum(len(r.positions) for r in receipts)
    return PrivacyBudget.compose(Mechanism.DP_MLM, epsilon_per_token, 0.0, steps)


def save_receipts(path: str | Path, receipts: Sequence[SanitizationReceipt]) -> None:
    with open(path, "w") as fh:
        for r in receipts:
            fh.write(json.dumps(r.to_dict()) + "\n")
