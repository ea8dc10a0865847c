"""Evaluation suite: ROUGE-L recall, conditional probabilities, truth ratio,
model utility (harmonic mean of nine values), forget quality via the
two-sample KS test, and supplementary distribution statistics.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels, lm
from .corpus import Corpus, QaPair, Split, Vocab
from .errors import DataError
from .lm import Params

DEFAULT_BINS = 20
DEFAULT_MAX_LEN = 16


@dataclass(frozen=True)
class TruthRatioSample:
    pair_id: int
    tr: float

    def __post_init__(self):
        if not (math.isfinite(self.tr) and self.tr >= 0):
            raise DataError(f"truth ratio must be finite and >= 0, got {self.tr}")


# --- text similarity --------------------------------------------------------

def rouge_l_recall(reference: Sequence[str], hypothesis: Sequence[str]) -> float:
    """LCS(reference, hypothesis) / |reference|."""
    if len(reference) == 0:
        raise DataError("reference must be nonempty")
    if len(hypothesis) == 0:
        return 0.0
    ids = {t: i for i, t in enumerate(dict.fromkeys([*reference, *hypothesis]))}
    a = np.asarray([ids[t] for t in reference], dtype=np.int64)
    b = np.asarray([ids[t] for t in hypothesis], dtype=np.int64)
    return kernels.lcs_len(a, b) / len(reference)


# --- probability metrics ------------------------------------------------------

def _norm_logprob(params: Params, question, response, vocab: Vocab) -> float:
    """Length-normalized log-probability: log P(r|Q) / |r|."""
    logp, n = lm.sequence_logprob(params, question, response, vocab)
    return logp / n


def cond_prob(params: Params, question, response, vocab: Vocab) -> float:
    """P(r|Q)^(1/|r|), the geometric mean of the per-token probabilities."""
    return math.exp(_norm_logprob(params, question, response, vocab))


def cond_prob_mc(params: Params, question, options: Sequence[Sequence[str]],
                 correct_index: int, vocab: Vocab) -> float:
    """P(r_correct|Q) / sum_i P(r_i|Q) over length-normalized probabilities."""
    if len(options) < 2:
        raise DataError("multiple choice needs >= 2 options")
    if not 0 <= correct_index < len(options):
        raise DataError(f"correct_index {correct_index} out of range")
    logs = np.asarray([_norm_logprob(params, question, opt, vocab) for opt in options])
    m = logs.max()
    weights = np.exp(logs - m)
    return float(weights[correct_index] / weights.sum())


def truth_ratio(params: Params, pair: QaPair, vocab: Vocab) -> TruthRatioSample:
    """Mean normalized probability of the perturbed answers over that of the
    paraphrased answer. Computed in log space to avoid underflow."""
    if not pair.paraphrased_answer or not pair.perturbed_answers:
        raise DataError(f"pair {pair.id}: truth ratio needs paraphrase and perturbations")
    logs = np.asarray([
        _norm_logprob(params, pair.question, r, vocab) for r in pair.perturbed_answers
    ])
    m = logs.max()
    log_num = m + math.log(np.exp(logs - m).sum() / len(logs))
    log_den = _norm_logprob(params, pair.question, pair.paraphrased_answer, vocab)
    return TruthRatioSample(pair_id=pair.id, tr=math.exp(log_num - log_den))


def normalize_tr_for_utility(tr: float) -> float:
    if tr < 0:
        raise DataError(f"truth ratio must be >= 0, got {tr}")
    return max(0.0, 1.0 - tr)


def model_utility(values: Sequence[float]) -> float:
    """Harmonic mean of the nine per-set metric values; 0 if any value is 0."""
    vals = list(values)
    for v in vals:
        if not 0.0 <= v <= 1.0:
            raise DataError(f"utility inputs must lie in [0,1], got {v}")
    if any(v == 0.0 for v in vals):
        return 0.0
    return len(vals) / sum(1.0 / v for v in vals)


# --- distribution statistics -------------------------------------------------

def ks_two_sample(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sample KS statistic and asymptotic p-value.

    D is the maximum absolute gap between the empirical CDFs; p comes from the
    Kolmogorov series Q(lam) = 2 * sum_j (-1)^(j-1) exp(-2 j^2 lam^2) at
    lam = D * sqrt(nm/(n+m)), truncated when a term drops below 1e-12.
    """
    sa = np.sort(np.asarray(a, dtype=np.float64))
    sb = np.sort(np.asarray(b, dtype=np.float64))
    n, m = len(sa), len(sb)
    if n < 2 or m < 2:
        raise DataError("KS test needs at least 2 samples on each side")
    grid = np.concatenate([sa, sb])
    cdf_a = np.searchsorted(sa, grid, side="right") / n
    cdf_b = np.searchsorted(sb, grid, side="right") / m
    d = float(np.abs(cdf_a - cdf_b).max())
    return d, _ks_p_value(d, n, m)


def _ks_p_value(d: float, n: int, m: int) -> float:
    if d <= 0.0:
        return 1.0
    lam = d * math.sqrt(n * m / (n + m))
    if lam < 0.05:
        return 1.0  # survival function is 1 to double precision here
    total = 0.0
    sign = 1.0
    for j in range(1, 1_000_000):
        term = math.exp(-2.0 * j * j * lam * lam)
        total += sign * term
        if term < 1e-12:
            break
        sign = -sign
    return min(1.0, max(0.0, 2.0 * total))


def _shared_histograms(a, b, bins: int) -> tuple[np.ndarray, np.ndarray]:
    if bins < 2:
        raise DataError("bins must be >= 2")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    hi = max(a.max(initial=0.0), b.max(initial=0.0))
    if hi <= 0.0:
        hi = 1.0
    p, _ = np.histogram(a, bins=bins, range=(0.0, hi))
    q, _ = np.histogram(b, bins=bins, range=(0.0, hi))
    return p / len(a), q / len(b)


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def jsd_from_hists(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)
    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def jsd(a: Sequence[float], b: Sequence[float], bins: int = DEFAULT_BINS) -> float:
    """Jensen-Shannon divergence (natural log, in [0, ln 2]) of the shared-bin
    histograms of the two samples."""
    p, q = _shared_histograms(a, b, bins)
    return jsd_from_hists(p, q)


def entropy_from_hist(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    mask = p > 0
    return float(-np.sum(p[mask] * np.log(p[mask])))


def entropy_diff(a: Sequence[float], b: Sequence[float],
                 bins: int = DEFAULT_BINS) -> float:
    """|H(P) - H(Q)| over shared-bin histograms, natural log."""
    p, q = _shared_histograms(a, b, bins)
    return abs(entropy_from_hist(p) - entropy_from_hist(q))


def wasserstein_1d(a: Sequence[float], b: Sequence[float]) -> float:
    """W1 distance: integral of |F_a - F_b|; for equal sizes this is the mean
    absolute difference of the sorted samples."""
    sa = np.sort(np.asarray(a, dtype=np.float64))
    sb = np.sort(np.asarray(b, dtype=np.float64))
    if len(sa) == 0 or len(sb) == 0:
        raise DataError("wasserstein distance needs nonempty samples")
    if len(sa) == len(sb):
        return float(np.mean(np.abs(sa - sb)))
    grid = np.sort(np.concatenate([sa, sb]))
    deltas = np.diff(grid)
    cdf_a = np.searchsorted(sa, grid[:-1], side="right") / len(sa)
    cdf_b = np.searchsorted(sb, grid[:-1], side="right") / len(sb)
    return float(np.sum(np.abs(cdf_a - cdf_b) * deltas))


# --- full evaluation -----------------------------------------------------------

@dataclass
class SetMetrics:
    rouge_l: float
    cond_prob: float
    truth_ratio_normalized: float

    def to_dict(self) -> dict:
        return {"rouge_l": self.rouge_l, "cond_prob": self.cond_prob,
                "truth_ratio_normalized": self.truth_ratio_normalized}

    @classmethod
    def from_dict(cls, doc: dict) -> "SetMetrics":
        return cls(**doc)


@dataclass
class EvalReport:
    retain: SetMetrics
    real_authors: SetMetrics
    real_world: SetMetrics
    forget_rouge_l: float
    forget_cond_prob: float
    forget_truth_ratio_samples: list[float]
    reference_truth_ratio_samples: list[float]
    model_utility: float
    forget_quality_p: float
    ks_statistic: float
    jsd: float
    wasserstein: float
    entropy_diff: float
    bins: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "retain": self.retain.to_dict(),
            "real_authors": self.real_authors.to_dict(),
            "real_world": self.real_world.to_dict(),
            "forget": {
                "rouge_l": self.forget_rouge_l,
                "cond_prob": self.forget_cond_prob,
                "truth_ratio_samples": self.forget_truth_ratio_samples,
            },
            "reference_truth_ratio_samples": self.reference_truth_ratio_samples,
            "model_utility": self.model_utility,
            "forget_quality_p": self.forget_quality_p,
            "ks_statistic": self.ks_statistic,
            "jsd": self.jsd,
            "wasserstein": self.wasserstein,
            "entropy_diff": self.entropy_diff,
            "bins": self.bins,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        return cls(
            retain=SetMetrics.from_dict(doc["retain"]),
            real_authors=SetMetrics.from_dict(doc["real_authors"]),
            real_world=SetMetrics.from_dict(doc["real_world"]),
            forget_rouge_l=doc["forget"]["rouge_l"],
            forget_cond_prob=doc["forget"]["cond_prob"],
            forget_truth_ratio_samples=list(doc["forget"]["truth_ratio_samples"]),
            reference_truth_ratio_samples=list(doc["reference_truth_ratio_samples"]),
            model_utility=doc["model_utility"],
            forget_quality_p=doc["forget_quality_p"],
            ks_statistic=doc["ks_statistic"],
            jsd=doc["jsd"],
            wasserstein=doc["wasserstein"],
            entropy_diff=doc["entropy_diff"],
            bins=doc["bins"],
            extra=doc.get("extra", {}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _as_params(model) -> Params:
    if isinstance(model, Params):
        return model
    return model.params()  # Checkpoint


def _set_metrics(params: Params, pairs: list[QaPair], vocab: Vocab,
                 multiple_choice: bool, max_len: int) -> SetMetrics:
    rouges, cps, trs = [], [], []
    for pair in pairs:
        hyp = lm.generate_greedy(params, pair.question, vocab, max_len=max_len)
        rouges.append(rouge_l_recall(pair.answer, hyp))
        if multiple_choice:
            options = [pair.answer, *pair.perturbed_answers]
            cps.append(cond_prob_mc(params, pair.question, options, 0, vocab))
        else:
            cps.append(cond_prob(params, pair.question, pair.answer, vocab))
        trs.append(normalize_tr_for_utility(truth_ratio(params, pair, vocab).tr))
    return SetMetrics(rouge_l=float(np.mean(rouges)), cond_prob=float(np.mean(cps)),
                      truth_ratio_normalized=float(np.mean(trs)))


def evaluate(model, corpus: Corpus, reference, bins: int = DEFAULT_BINS,
             max_len: int = DEFAULT_MAX_LEN, extra: dict | None = None) -> EvalReport:
    """Full evaluation of a model against the retain-only reference.

    Forget quality is the KS p-value between the truth-ratio samples of the
    model and of the reference on the forget set.
    """
    params = _as_params(model)
    ref_params = _as_params(reference)
    vocab = corpus.vocab
    forget_pairs = corpus.subset(Split.FORGET)
    if not forget_pairs:
        raise DataError("corpus has no forget pairs to evaluate")

    retain = _set_metrics(params, corpus.subset(Split.RETAIN), vocab, False, max_len)
    real_authors = _set_metrics(params, corpus.subset(Split.REAL_AUTHORS), vocab,
                                True, max_len)
    real_world = _set_metrics(params, corpus.subset(Split.REAL_WORLD), vocab,
                              True, max_len)

    f_rouge, f_cp, f_trs = [], [], []
    ref_trs = []
    for pair in forget_pairs:
        hyp = lm.generate_greedy(params, pair.question, vocab, max_len=max_len)
        f_rouge.append(rouge_l_recall(pair.answer, hyp))
        f_cp.append(cond_prob(params, pair.question, pair.answer, vocab))
        f_trs.append(truth_ratio(params, pair, vocab).tr)
        ref_trs.append(truth_ratio(ref_params, pair, vocab).tr)

    nine = [retain.rouge_l, retain.cond_prob, retain.truth_ratio_normalized,
            real_authors.rouge_l, real_authors.cond_prob,
            real_authors.truth_ratio_normalized,
            real_world.rouge_l, real_world.cond_prob,
            real_world.truth_ratio_normalized]
    mu = model_utility(nine)
    d, p = ks_two_sample(f_trs, ref_trs)

    return EvalReport(
        retain=retain, real_authors=real_authors, real_world=real_world,
        forget_rouge_l=float(np.mean(f_rouge)),
        forget_cond_prob=float(np.mean(f_cp)),
        forget_truth_ratio_samples=[float(x) for x in f_trs],
        reference_truth_ratio_samples=[float(x) for x in ref_trs],
        model_utility=mu, forget_quality_p=p, ks_statistic=d,
        jsd=jsd(f_trs, ref_trs, bins=bins),
        wasserstein=wasserstein_1d(f_trs, ref_trs),
        entropy_diff=entropy_diff(f_trs, ref_trs, bins=bins),
        bins=bins, extra=extra or {},
    )
