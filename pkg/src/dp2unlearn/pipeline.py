"""Three-stage unlearning pipeline and the RFS-R exact-unlearning reference.

Stage A trains the disclosure-protected base model once (DP-MLM sanitized
text, or DP-SGD on raw text) and persists it; stage B fine-tunes it on the
raw data for deployment; stage C services each forget request by discarding
the deployed model and re-fine-tuning the *base* model on the remaining
retain data only. Aux (RealAuthors/RealWorld) pairs stand in for public
pretraining data: they are included in every training run and are never
forgettable.
"""

from __future__ import annotations

import dataclasses
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import dpmlm, dpsgd, lm, metrics
from .budget import PrivacyBudget
from .checkpoint import (Checkpoint, CheckpointMeta, Stage, data_fingerprint,
                         load_checkpoint, save_checkpoint)
from .corpus import Corpus, QaPair, retain_after_requests
from .dpmlm import SanitizerConfig
from .dpsgd import DpSgdConfig
from .errors import ConfigurationError, DataError, StateError
from .lm import ModelConfig, Params

MECHANISM_DPMLM = "dpmlm"
MECHANISM_DPSGD = "dpsgd"


@dataclass(frozen=True)
class ForgetRequest:
    request_id: int
    pair_ids: frozenset[int]
    received_at: int = 0

    def to_dict(self) -> dict:
        return {"request_id": self.request_id, "pair_ids": sorted(self.pair_ids)}

    @classmethod
    def from_dict(cls, doc: dict, received_at: int = 0) -> "ForgetRequest":
        return cls(request_id=doc["request_id"],
                   pair_ids=frozenset(doc["pair_ids"]),
                   received_at=received_at)


@dataclass(frozen=True)
class PipelineConfig:
    model: ModelConfig
    epochs_e: int = 12
    epochs_e_prime: int = 6
    lr: float = 0.05
    batch_size: int = 16
    # stages B/C and baselines share one fine-tune config; None = same as training
    finetune_lr: float | None = None
    finetune_batch_size: int | None = None
    seed: int = 0
    mechanism: str = MECHANISM_DPMLM
    dpsgd_cfg: DpSgdConfig | None = None
    sanitizer_cfg: SanitizerConfig | None = None

    def __post_init__(self):
        if self.mechanism not in (MECHANISM_DPMLM, MECHANISM_DPSGD):
            raise ConfigurationError(f"unknown mechanism {self.mechanism!r}")
        if self.mechanism == MECHANISM_DPSGD and self.dpsgd_cfg is None:
            raise ConfigurationError("dpsgd mechanism needs a DpSgdConfig")
        if self.mechanism == MECHANISM_DPMLM and self.sanitizer_cfg is None:
            raise ConfigurationError("dpmlm mechanism needs a SanitizerConfig")
        if self.epochs_e < 1 or self.epochs_e_prime < 0:
            raise ConfigurationError("epoch counts must be E >= 1, E' >= 0")

    @property
    def ft_lr(self) -> float:
        return self.lr if self.finetune_lr is None else self.finetune_lr

    @property
    def ft_batch_size(self) -> int:
        return self.batch_size if self.finetune_batch_size is None else self.finetune_batch_size


def training_pairs(corpus: Corpus, profile_subset: Sequence[QaPair]) -> list[QaPair]:
    """Training set for one run: the profile subset plus the always-public aux
    pairs, each pair expanded with a shadow copy trained on its paraphrase
    wording (answer and paraphrase swapped).

    A tiny k-gram model cannot transfer a fact binding across rewordings the
    way a pretrained LLM does, so both wordings of every trained document are
    supervised; unlearning then removes both. Shadows share the document's
    pair id for auditing and fingerprints.
    """
    base = [*profile_subset, *corpus.aux_pairs()]
    # 3:1 weighting (canonical three times, paraphrase once) keeps greedy
    # decoding on the canonical wording while still making the reworded
    # answer scoreable.
    shadows = [dataclasses.replace(p, answer=p.paraphrased_answer,
                                   paraphrased_answer=p.answer) for p in base]
    return sorted([*base, *base, *base, *shadows], key=lambda p: p.id)


class PipelineState:
    """Owns the state directory: base/deployed checkpoints, request log,
    append-only audit log and the privacy budget report."""

    def __init__(self, state_dir: str | Path, config: PipelineConfig):
        self.state_dir = Path(state_dir)
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.base_path = self.state_dir / "base.ckpt"
        self.deployed_path = self.state_dir / "deployed.ckpt"
        self.requests_path = self.state_dir / "requests.jsonl"
        self.audit_path = self.state_dir / "audit.jsonl"
        self.budget_path = self.state_dir / "budget.json"
        self.receipts_path = self.state_dir / "receipts.jsonl"
        self._lock_path = self.state_dir / ".lock"

    @contextmanager
    def _lock(self):
        try:
            fd = os.open(self._lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StateError(f"pipeline already running in {self.state_dir} "
                             f"(stale lock file? {self._lock_path})") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            self._lock_path.unlink(missing_ok=True)

    # -- request log --

    def load_requests(self) -> list[ForgetRequest]:
        if not self.requests_path.exists():
            return []
        out = []
        for i, line in enumerate(self.requests_path.read_text().splitlines()):
            if line.strip():
                out.append(ForgetRequest.from_dict(json.loads(line), received_at=i))
        return out

    def _append_request(self, request: ForgetRequest) -> None:
        with open(self.requests_path, "a") as fh:
            fh.write(json.dumps(request.to_dict()) + "\n")

    # -- audit log --

    def _next_run_id(self) -> int:
        if not self.audit_path.exists():
            return 0
        last = -1
        for line in self.audit_path.read_text().splitlines():
            if line.strip():
                last = max(last, json.loads(line)["run"])
        return last + 1

    def _audit(self, stage: Stage, pair_ids: Sequence[int]) -> None:
        run = self._next_run_id()
        with open(self.audit_path, "a") as fh:
            for pid in sorted(pair_ids):
                fh.write(json.dumps({"run": run, "stage": stage.value,
                                     "pair_id": pid}) + "\n")

    def audit_entries(self) -> list[dict]:
        if not self.audit_path.exists():
            return []
        return [json.loads(l) for l in self.audit_path.read_text().splitlines()
                if l.strip()]


def _save_deployed(state: PipelineState, ckpt: Checkpoint) -> None:
    tmp = state.deployed_path.with_suffix(".tmp")
    save_checkpoint(tmp, ckpt)
    os.replace(tmp, state.deployed_path)  # atomic swap


def stage_a(state: PipelineState, corpus: Corpus) -> Checkpoint:
    """Unlearning-ready training of the disclosure-protected base model."""
    cfg = state.config
    with state._lock():
        train_set = training_pairs(corpus, corpus.profile_pairs())
        if cfg.mechanism == MECHANISM_DPMLM:
            sanitized, receipts = dpmlm.sanitize_corpus(corpus, cfg.sanitizer_cfg)
            dpmlm.save_receipts(state.receipts_path, receipts)
            budget = dpmlm.budget_from_receipts(receipts,
                                                cfg.sanitizer_cfg.epsilon_per_token)
            sanitized_train = training_pairs(sanitized, sanitized.profile_pairs())
            params = lm.train(lm.init_params(cfg.model), sanitized_train,
                              corpus.vocab, cfg.epochs_e, lr=cfg.lr,
                              batch_size=cfg.batch_size, seed=cfg.seed,
                              log_file=state.state_dir / "train_a.jsonl")
        else:
            params, budget = dpsgd.train_dp(lm.init_params(cfg.model), train_set,
                                            corpus.vocab, cfg.epochs_e,
                                            cfg.dpsgd_cfg,
                                            log_file=state.state_dir / "train_a.jsonl")
        meta = CheckpointMeta(stage=Stage.BASE_DP, epochs_trained=cfg.epochs_e,
                              seed=cfg.seed, privacy=budget,
                              data_fingerprint=data_fingerprint(p.id for p in train_set),
                              extra={"mechanism": cfg.mechanism})
        ckpt = Checkpoint.from_params(cfg.model, params, meta)
        save_checkpoint(state.base_path, ckpt)
        state.budget_path.write_text(json.dumps(budget.to_dict(), indent=1) + "\n")
        state._audit(Stage.BASE_DP, [p.id for p in train_set])
    return ckpt


def stage_b(state: PipelineState, corpus: Corpus) -> Checkpoint:
    """Pre-unlearning fine-tuning on the raw full data; deployable model."""
    cfg = state.config
    if not state.base_path.exists():
        raise StateError("stage B requires a stage-A base checkpoint")
    base = load_checkpoint(state.base_path)
    if base.metadata.stage is not Stage.BASE_DP:
        raise StateError(f"base checkpoint has stage {base.metadata.stage.value}, "
                         "expected BaseDP")
    with state._lock():
        train_set = training_pairs(corpus, corpus.profile_pairs())
        params = lm.finetune(base.params(), train_set, corpus.vocab,
                             cfg.epochs_e_prime, lr=cfg.ft_lr,
                             batch_size=cfg.ft_batch_size, seed=cfg.seed,
                             log_file=state.state_dir / "train_b.jsonl")
        meta = CheckpointMeta(stage=Stage.FULL_DATA,
                              epochs_trained=cfg.epochs_e_prime, seed=cfg.seed,
                              privacy=None,
                              data_fingerprint=data_fingerprint(p.id for p in train_set))
        ckpt = Checkpoint.from_params(cfg.model, params, meta)
        _save_deployed(state, ckpt)
        state._audit(Stage.FULL_DATA, [p.id for p in train_set])
    return ckpt


def stage_c(state: PipelineState, corpus: Corpus, request: ForgetRequest) -> Checkpoint:
    """Unlearning execution: discard the deployed model, re-fine-tune the
    persisted base model on the retain set only."""
    cfg = state.config
    if not state.base_path.exists():
        raise StateError("stage C requires the persisted stage-A base checkpoint")
    base = load_checkpoint(state.base_path)
    if base.metadata.stage is not Stage.BASE_DP:
        raise StateError("stage C must resume from a BaseDP checkpoint")
    if not request.pair_ids:
        raise DataError("forget request is empty")
    with state._lock():
        requests = state.load_requests() + [request]
        retain = retain_after_requests(corpus, requests)  # validates the log
        if not retain:
            raise ConfigurationError("all profile pairs forgotten; nothing to fine-tune on")
        train_set = training_pairs(corpus, retain)
        params = lm.finetune(base.params(), train_set, corpus.vocab,
                             cfg.epochs_e_prime, lr=cfg.ft_lr,
                             batch_size=cfg.ft_batch_size, seed=cfg.seed,
                             log_file=state.state_dir / "train_c.jsonl")
        meta = CheckpointMeta(stage=Stage.UNLEARNED,
                              epochs_trained=cfg.epochs_e_prime, seed=cfg.seed,
                              privacy=base.metadata.privacy,
                              data_fingerprint=data_fingerprint(p.id for p in train_set),
                              extra={"request_id": request.request_id})
        ckpt = Checkpoint.from_params(cfg.model, params, meta)
        state._append_request(request)
        _save_deployed(state, ckpt)
        state._audit(Stage.UNLEARNED, [p.id for p in train_set])
    return ckpt


def rfsr(corpus: Corpus, requests: Sequence[ForgetRequest],
         config: PipelineConfig) -> Checkpoint:
    """Retraining from scratch on the retain set: the exact-unlearning gold
    reference. Full E epochs from a fresh seeded init."""
    retain = retain_after_requests(corpus, requests)
    if not retain:
        raise ConfigurationError("empty retain set; cannot retrain from scratch")
    train_set = training_pairs(corpus, retain)
    params = lm.train(lm.init_params(config.model), train_set, corpus.vocab,
                      config.epochs_e, lr=config.lr, batch_size=config.batch_size,
                      seed=config.seed)
    meta = CheckpointMeta(stage=Stage.RFSR, epochs_trained=config.epochs_e,
                          seed=config.seed,
                          data_fingerprint=data_fingerprint(p.id for p in train_set))
    return Checkpoint.from_params(config.model, params, meta)


def convergence_probe(corpus: Corpus, config: PipelineConfig,
                      max_epochs: int = 40, threshold: float = 0.95,
                      max_len: int = 16) -> int | None:
    """First epoch at which training-set ROUGE-L crosses the threshold.

    Reports the convergence point used to pick E for a corpus; returns None
    if the threshold is never reached within max_epochs.
    """
    train_set = training_pairs(corpus, corpus.profile_pairs())
    params = lm.init_params(config.model)
    for epoch in range(max_epochs):
        params = lm.train(params, train_set, corpus.vocab, 1, lr=config.lr,
                          batch_size=config.batch_size, seed=config.seed,
                          start_epoch=epoch)
        scores = [metrics.rouge_l_recall(
            p.answer, lm.generate_greedy(params, p.question, corpus.vocab, max_len))
            for p in train_set]
        if sum(scores) / len(scores) >= threshold:
            return epoch + 1
    return None
