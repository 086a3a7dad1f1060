"""Masked-LM loss, phrase/context structure loss, and the multi-task compositions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, SamplingError, ShapeError

GAMMA_PRE = 0.5
GAMMA_FINE = 0.23
NEGATIVES_PER_PHRASE = 5


@dataclass
class LossBreakdown:
    l_w: Optional[float]
    l_g: float
    l_neg: float
    l_task: Optional[float]
    total: float

    def as_row(self, step, ppl=None):
        def fmt(x):
            return "" if x is None else repr(float(x))

        return ",".join([str(step), fmt(self.l_w), fmt(self.l_g), fmt(self.l_neg), fmt(self.l_task), fmt(self.total), fmt(ppl)])


LOG_HEADER = "step,l_w,l_g,l_neg,l_task,total,ppl"


def mlm_loss(logits, targets):
    """Mean softmax cross-entropy over masked positions."""
    targets = np.asarray(targets, dtype=np.intp).reshape(-1)
    if targets.size == 0:
        raise ContractError("mlm_loss needs at least one masked position")
    if logits.shape[0] != targets.size:
        raise ShapeError(f"{logits.shape[0]} logit rows for {targets.size} targets")
    return -T.pick(T.log_softmax_lastdim(logits), targets).mean()


cross_entropy = mlm_loss


def structure_prob(s, c):
    """sigmoid(s . c) along the last axis."""
    s, c = T.as_tensor(s), T.as_tensor(c)
    if s.shape[-1] != c.shape[-1]:
        raise ShapeError(f"structure_prob: dimension mismatch {s.shape} vs {c.shape}")
    return T.sigmoid((s * c).sum(axis=-1))


def sample_negatives(sentence_ids, k, rng):
    """Draw ``k`` negative phrase indices per phrase, uniformly with replacement.

    The pool is phrases from other sentences, falling back to the other
    phrases of the same sentence when the batch holds a single sentence.
    """
    sentence_ids = np.asarray(sentence_ids)
    everyone = np.arange(len(sentence_ids))
    out = np.empty((len(sentence_ids), k), dtype=np.intp)
    for m, sid in enumerate(sentence_ids):
        pool = everyone[sentence_ids != sid]
        if pool.size == 0:
            pool = everyone[everyone != m]
        if pool.size == 0:
            raise SamplingError("no negative phrase available: batch contains a single phrase")
        out[m] = pool[rng.integers(0, pool.size, size=k)]
    return out


def structure_loss(s, c, s_neg):
    """Summed structure objective over phrases.

    ``s`` and ``c`` are ``[P, d]`` (phrase embedding, phrasal context at its
    opening token); ``s_neg`` is ``[P, k, d]``.  Returns ``(l_g, l_neg)`` where
    ``l_g = sum_m (1 - p(s_m|c_m)) + mean_j p(s_neg_mj|c_m)`` and ``l_neg`` is
    the negative-sampling part alone.
    """
    if s.shape[0] == 0:
        raise ContractError("structure_loss needs at least one phrase")
    if s_neg.shape[1] == 0:
        raise SamplingError("structure_loss needs at least one negative per phrase")
    pos = structure_prob(s, c)
    neg = structure_prob(s_neg, c.reshape(c.shape[0], 1, c.shape[1])).mean(axis=-1)
    l_neg = neg.sum()
    l_g = (1.0 - pos).sum() + l_neg
    return l_g, l_neg


REDUCTIONS = ("phrase-mean", "sentence-mean", "sum")


def reduction_denominator(reduction, n_phrases, n_sentences):
    if reduction == "phrase-mean":
        return n_phrases
    if reduction == "sentence-mean":
        return n_sentences
    if reduction == "sum":
        return 1
    raise ConfigError(f"unknown structure reduction {reduction!r}; expected one of {REDUCTIONS}")


def pretrain_loss(l_w, l_g, gamma_pre=GAMMA_PRE):
    return l_w + l_g * gamma_pre


def finetune_loss(l_task, l_g, gamma_fine=GAMMA_FINE):
    return l_task + l_g * gamma_fine
