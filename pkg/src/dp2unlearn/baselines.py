"""Approximate-unlearning baselines applied to the full-data model.

All four methods start from the same full-data parameters and run exactly the
configured number of epochs with shared fine-tune settings. GD and KL iterate
the retain set in the same shuffled batches as plain fine-tuning and pair each
retain batch with an equally sized forget batch, so zeroing the forget weight
reproduces plain retain fine-tuning exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels, lm
from .checkpoint import Checkpoint, CheckpointMeta, Stage, data_fingerprint
from .corpus import QaPair, Vocab
from .errors import ConfigurationError, NumericError
from .lm import Params, build_samples

METHOD_GA = "ga"
METHOD_GD = "gd"
METHOD_KL = "kl"
METHOD_PO = "po"
METHODS = (METHOD_GA, METHOD_GD, METHOD_KL, METHOD_PO)


@dataclass(frozen=True)
class BaselineConfig:
    method: str
    epochs: int
    lr: float = 0.05
    batch_size: int = 16
    seed: int = 0
    retain_weight: float = 1.0
    forget_weight: float = 1.0
    # PO trains the refusal in the canonical-answer slot; it inherits the
    # canonical wording's 3x training weight (see pipeline.training_pairs)
    refusal_weight: int = 3
    divergence_threshold: float = 1e3
    reference_checkpoint: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.lr <= 0 or self.batch_size < 1 or self.seed < 0:
            raise ConfigurationError("invalid lr/batch_size/seed")


def _checkpoint(params: Params, cfg: BaselineConfig, method: str,
                consumed_ids: Sequence[int], extra: dict | None = None) -> Checkpoint:
    model_cfg = lm.config_for_params(params, seed=cfg.seed)
    meta = CheckpointMeta(stage=Stage.BASELINE, epochs_trained=cfg.epochs,
                          seed=cfg.seed, data_fingerprint=data_fingerprint(consumed_ids),
                          method=method, extra=extra or {})
    return Checkpoint.from_params(model_cfg, params, meta)


def _guard(loss: float, params: Params, step: int, threshold: float,
           last_finite: Params) -> None:
    if not np.isfinite(loss) or loss > threshold:
        raise NumericError(f"unlearning objective diverged (loss={loss!r})",
                           step=step, last_params=last_finite)
    if not params.all_finite():
        raise NumericError("parameters became non-finite", step=step,
                           last_params=last_finite)


def ga_unlearn(full_params: Params, forget: Sequence[QaPair], vocab: Vocab,
               cfg: BaselineConfig) -> Checkpoint:
    """Gradient ascent on the mean forget cross-entropy."""
    if not forget:
        raise ConfigurationError("GA needs a nonempty forget set")
    out = full_params.copy()
    contexts, targets = build_samples(forget, vocab, out.context_k())
    n = len(targets)
    step = 0
    for e in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, e]).permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            last = out.copy()
            loss, *grads = kernels.batch_mean_grad(*out.arrays(),
                                                   contexts[idx], targets[idx])
            for a, g in zip(out.arrays(), grads):
                a += cfg.lr * g  # ascent
            step += 1
            _guard(loss, out, step, cfg.divergence_threshold, last)
    return _checkpoint(out, cfg, METHOD_GA, [p.id for p in forget])


def _forget_batch_stream(n_forget: int, seed: int, epoch: int):
    """Endless shuffled index stream over the forget samples."""
    rng = np.random.default_rng([seed, epoch, 1])
    while True:
        for i in rng.permutation(n_forget):
            yield i


def _paired_unlearn(full_params: Params, forget: Sequence[QaPair],
                    retain: Sequence[QaPair], vocab: Vocab, cfg: BaselineConfig,
                    ref_params: Params | None, use_kl: bool) -> Params:
    if not forget or not retain:
        raise ConfigurationError("paired unlearning needs nonempty retain and forget sets")
    out = full_params.copy()
    r_ctx, r_tgt = build_samples(retain, vocab, out.context_k())
    f_ctx, f_tgt = build_samples(forget, vocab, out.context_k())
    n_r, n_f = len(r_tgt), len(f_tgt)
    step = 0
    for e in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, e]).permutation(n_r)
        fstream = _forget_batch_stream(n_f, cfg.seed, e)
        for lo in range(0, n_r, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            last = out.copy()
            if use_kl:
                ref_probs = kernels.probs_batch(*ref_params.arrays(), r_ctx[idx])
                r_loss, *r_grads = kernels.batch_soft_grad(*out.arrays(),
                                                           r_ctx[idx], ref_probs)
            else:
                r_loss, *r_grads = kernels.batch_mean_grad(*out.arrays(),
                                                           r_ctx[idx], r_tgt[idx])
            objective = cfg.retain_weight * r_loss
            if cfg.forget_weight != 0.0:
                fidx = np.asarray([next(fstream) for _ in range(len(idx))])
                f_loss, *f_grads = kernels.batch_mean_grad(*out.arrays(),
                                                           f_ctx[fidx], f_tgt[fidx])
                objective -= cfg.forget_weight * f_loss
            else:
                f_grads = None
            for j, (a, g) in enumerate(zip(out.arrays(), r_grads)):
                a -= cfg.lr * cfg.retain_weight * g
                if f_grads is not None:
                    a += cfg.lr * cfg.forget_weight * f_grads[j]
            step += 1
            _guard(abs(objective), out, step, cfg.divergence_threshold, last)
    return out


def gd_unlearn(full_params: Params, forget: Sequence[QaPair],
               retain: Sequence[QaPair], vocab: Vocab,
               cfg: BaselineConfig) -> Checkpoint:
    """Gradient difference: descend L_retain - L_forget with paired batches."""
    out = _paired_unlearn(full_params, forget, retain, vocab, cfg, None, False)
    ids = [p.id for p in retain] + [p.id for p in forget]
    return _checkpoint(out, cfg, METHOD_GD, ids)


def kl_unlearn(full_params: Params, forget: Sequence[QaPair],
               retain: Sequence[QaPair], ref_params: Params, vocab: Vocab,
               cfg: BaselineConfig) -> Checkpoint:
    """KL anchoring to the frozen full-data model on retain next-token
    distributions, combined with forget-loss ascent."""
    if ref_params is None:
        raise ConfigurationError("KL needs the frozen full-data reference model")
    out = _paired_unlearn(full_params, forget, retain, vocab, cfg, ref_params, True)
    ids = [p.id for p in retain] + [p.id for p in forget]
    return _checkpoint(out, cfg, METHOD_KL, ids)


def po_unlearn(full_params: Params, forget: Sequence[QaPair],
               retain: Sequence[QaPair], vocab: Vocab,
               cfg: BaselineConfig) -> Checkpoint:
    """Preference-style relabeling: forget answers become the refusal string,
    then plain cross-entropy descent on the edited dataset."""
    if not forget or not retain:
        raise ConfigurationError("PO needs nonempty retain and forget sets")
    for p in forget:
        if not p.refusal_answer:
            raise ConfigurationError(f"pair {p.id} lacks a refusal answer")
    override = {p.id: p.refusal_answer for p in forget}
    combined = sorted([*retain, *(list(forget) * cfg.refusal_weight)],
                      key=lambda p: p.id)
    out = lm.train(full_params, combined, vocab, cfg.epochs, lr=cfg.lr,
                   batch_size=cfg.batch_size, seed=cfg.seed,
                   answer_override=override)
    ids = [p.id for p in combined]
    return _checkpoint(out, cfg, METHOD_PO, ids)


def mean_answer_loss(params: Params, pairs: Sequence[QaPair], vocab: Vocab,
                     answer_override: dict | None = None) -> float:
    """Mean next-token cross-entropy over the answer tokens of the pairs."""
    contexts, targets = build_samples(pairs, vocab, params.context_k(),
                                      answer_override)
    logps = kernels.score_targets(*params.arrays(), contexts, targets)
    return float(-logps.mean())
