"""Kernel backend dispatch.

The hot inner loops (batched forward/backward, per-sample clipped gradient
sums, sequence scoring, LCS) exist twice: a numba-jitted version and a
pure-numpy fallback. Selection: env var DP2U_BACKEND in {auto, numba, numpy}
(default auto = numba when importable), or set_backend() at runtime.
`benchmarks/bench_backends.py` compares the two.
"""

from __future__ import annotations

import os

from ..errors import ConfigurationError
from . import np_kernels

_BACKEND_NAME = "numpy"
_impl = np_kernels


def set_backend(name: str) -> str:
    """Switch the active kernel backend; returns the backend actually used."""
    global _BACKEND_NAME, _impl
    if name == "auto":
        try:
            from . import nb_kernels
            _impl, _BACKEND_NAME = nb_kernels, "numba"
        except ImportError:
            _impl, _BACKEND_NAME = np_kernels, "numpy"
    elif name == "numba":
        from . import nb_kernels
        _impl, _BACKEND_NAME = nb_kernels, "numba"
    elif name == "numpy":
        _impl, _BACKEND_NAME = np_kernels, "numpy"
    else:
        raise ConfigurationError(f"unknown kernel backend {name!r}")
    return _BACKEND_NAME


def backend_name() -> str:
    return _BACKEND_NAME


def logits_batch(emb, w1, b1, w2, b2, contexts):
    return _impl.logits_batch(emb, w1, b1, w2, b2, contexts)


def probs_batch(emb, w1, b1, w2, b2, contexts):
    return _impl.probs_batch(emb, w1, b1, w2, b2, contexts)


def score_targets(emb, w1, b1, w2, b2, contexts, targets):
    return _impl.score_targets(emb, w1, b1, w2, b2, contexts, targets)


def batch_mean_grad(emb, w1, b1, w2, b2, contexts, targets):
    return _impl.batch_mean_grad(emb, w1, b1, w2, b2, contexts, targets)


def batch_soft_grad(emb, w1, b1, w2, b2, contexts, ref_probs):
    return _impl.batch_soft_grad(emb, w1, b1, w2, b2, contexts, ref_probs)


def per_sample_flat_grads(emb, w1, b1, w2, b2, contexts, targets):
    return _impl.per_sample_flat_grads(emb, w1, b1, w2, b2, contexts, targets)


def clipped_grad_sum(emb, w1, b1, w2, b2, contexts, targets, clip):
    return _impl.clipped_grad_sum(emb, w1, b1, w2, b2, contexts, targets, clip)


def lcs_len(a, b):
    return int(_impl.lcs_len(a, b))


set_backend(os.environ.get("DP2U_BACKEND", "auto"))
