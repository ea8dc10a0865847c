import numpy as np
import pytest

from dp2unlearn import corpus as corpus_mod
from dp2unlearn import lm


@pytest.fixture(scope="session")
def small_corpus():
    return corpus_mod.generate_corpus(4, 3, seed=11, forget_ratio=0.25)


@pytest.fixture(scope="session")
def desk_corpus():
    return corpus_mod.generate_corpus(20, 10, seed=7)


@pytest.fixture()
def tiny_model():
    cfg = lm.ModelConfig(vocab_size=7, context_k=3, embed_dim=4, hidden_dim=5, seed=1)
    return cfg, lm.init_params(cfg)


def rouge_of(params, pairs, vocab, max_len=16):
    from dp2unlearn import metrics
    vals = [metrics.rouge_l_recall(p.answer,
                                   lm.generate_greedy(params, p.question, vocab, max_len))
            for p in pairs]
    return float(np.mean(vals))
