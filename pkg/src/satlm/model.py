"""Structure-aware language model: encoder, structure module and optional classifier."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import objectives as O
from . import syntax as S
from . import tensor as T
from .encoder import Encoder, EncoderConfig, init_parameters
from .errors import ConfigError, ModeError


@dataclass
class StepOutput:
    total: T.Tensor
    l_w: Optional[T.Tensor]
    l_g: T.Tensor
    l_neg: T.Tensor
    l_task: Optional[T.Tensor]
    segmentations: list
    distances: np.ndarray
    logits: Optional[T.Tensor] = None

    def breakdown(self):
        def val(t):
            return None if t is None else t.item()

        return O.LossBreakdown(val(self.l_w), val(self.l_g), val(self.l_neg), val(self.l_task), val(self.total))


class StructureAwareModel:
    def __init__(self, config: EncoderConfig, seed=0, alpha_init=S.ALPHA_INIT, params=None):
        self.config = config
        self.alpha_init = tuple(float(a) for a in alpha_init)
        if params is None:
            rng = np.random.default_rng(seed)
            params = init_parameters(config, rng)
            params.update(S.init_parameters(config.d_model, rng, self.alpha_init))
        self.params = params
        self.encoder = Encoder(config, params)

    # -- parameters -----------------------------------------------------

    @property
    def n_classes(self):
        w = self.params.get("cls.w")
        return None if w is None else w.shape[1]

    def add_classifier(self, n_classes, seed=0):
        rng = np.random.default_rng(seed)
        d = self.config.d_model
        self.params["cls.w"] = T.parameter(rng.normal(0.0, 1.0 / math.sqrt(d), (d, n_classes)))
        self.params["cls.b"] = T.parameter(np.zeros(n_classes))

    def expected_shapes(self, n_classes=None):
        """Parameter name -> shape implied by the config (used to validate checkpoints)."""
        cfg = self.config
        shapes = {k: v.shape for k, v in init_parameters(cfg, _ShapeRng()).items()}
        shapes.update({k: v.shape for k, v in S.init_parameters(cfg.d_model, _ShapeRng()).items()})
        if n_classes:
            shapes["cls.w"] = (cfg.d_model, n_classes)
            shapes["cls.b"] = (n_classes,)
        return shapes

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def syntax_parameter_names(self):
        return [k for k in self.params if k.startswith("syntax.")]

    # -- forward pieces -------------------------------------------------

    def structure(self, acts, batch, lam, rng, golds=None, negatives=O.NEGATIVES_PER_PHRASE,
                  segmentations=None, two_token_open=False, resegment=False, reduction="phrase-mean"):
        """Structure objective for a batch.

        Returns ``(l_g, l_neg, segmentations, distances)``.  The summed
        objective is divided by the phrase count (``phrase-mean``), the sentence
        count (``sentence-mean``) or left as is (``sum``).  Passing
        ``segmentations`` freezes the discrete decisions (used for gradient checks).
        """
        ctx = S.build_contexts(acts, self.config.structure_layer, self.params["syntax.alpha_logits"])
        valid = batch.mask
        d = S.distance_head(ctx.word_ctx, self.params, valid)
        if golds is not None:
            segs, gold_d = S.segment_batch(d.data, batch.lengths, lam, golds, two_token_open, resegment)
            d_used = T.Tensor(gold_d)
        else:
            if segmentations is None:
                segs, _ = S.segment_batch(d.data, batch.lengths, lam, None, two_token_open)
            else:
                segs = segmentations
            d_used = d
        phrases = S.phrase_embeddings(segs, d_used, ctx.word_ctx)
        neg_idx = O.sample_negatives(phrases.sentence_ids, negatives, rng)
        dim = self.config.d_model
        c = T.take(ctx.phrasal_ctx.reshape(-1, dim), phrases.openings)
        s_neg = T.take(phrases.embeddings, neg_idx)
        l_g, l_neg = O.structure_loss(phrases.embeddings, c, s_neg)
        denom = O.reduction_denominator(reduction, len(phrases.spans), len(batch))
        return l_g / denom, l_neg / denom, segs, d_used.data

    def pretrain_forward(self, batch, plan, lam, gamma_pre, rng, golds=None, negatives=O.NEGATIVES_PER_PHRASE,
                         segmentations=None, two_token_open=False, reduction="phrase-mean"):
        masked = batch_with_ids(batch, plan.input_ids)
        acts = self.encoder.encode(masked)
        logits = self.encoder.mlm_logits(acts.hidden[-1], plan.flat_positions)
        l_w = O.mlm_loss(logits, plan.targets)
        l_g, l_neg, segs, d = self.structure(acts, masked, lam, rng, golds, negatives, segmentations,
                                             two_token_open, reduction=reduction)
        total = O.pretrain_loss(l_w, l_g, gamma_pre)
        return StepOutput(total, l_w, l_g, l_neg, None, segs, d, logits)

    def class_logits(self, acts, batch):
        if "cls.w" not in self.params:
            raise ConfigError("model has no classification head; call add_classifier first")
        valid = batch.mask.astype(np.float64)
        pooled = (acts.hidden[-1] * valid[..., None]).sum(axis=1) * (1.0 / batch.lengths[:, None].astype(np.float64))
        return pooled @ self.params["cls.w"] + self.params["cls.b"]

    def finetune_forward(self, batch, labels, lam, gamma_fine, rng, golds=None,
                         negatives=O.NEGATIVES_PER_PHRASE, segmentations=None, two_token_open=False,
                         reduction="phrase-mean"):
        if golds is not None:
            raise ModeError("supervised structure injection is not allowed during fine-tuning")
        acts = self.encoder.encode(batch)
        logits = self.class_logits(acts, batch)
        l_task = O.cross_entropy(logits, labels)
        l_g, l_neg, segs, d = self.structure(acts, batch, lam, rng, None, negatives, segmentations,
                                             two_token_open, reduction=reduction)
        total = O.finetune_loss(l_task, l_g, gamma_fine)
        return StepOutput(total, None, l_g, l_neg, l_task, segs, d, logits)

    # -- inference ------------------------------------------------------

    def distances(self, batch):
        """Predicted distances as a list of per-sentence numpy arrays."""
        acts = self.encoder.encode(batch)
        ctx = S.build_contexts(acts, self.config.structure_layer, self.params["syntax.alpha_logits"])
        d = S.distance_head(ctx.word_ctx, self.params, batch.mask).data
        return [d[b, : int(n)].copy() for b, n in enumerate(batch.lengths)]

    def induce(self, batch, lam, golds=None, two_token_open=False, resegment=False):
        """``[(distances, segmentation)]`` per sentence; gold syntax replaces predictions if given."""
        if golds is not None:
            out = []
            for b, n in enumerate(batch.lengths):
                out.append(S.inject_gold(golds[b], int(n), lam, resegment, two_token_open))
            return out
        return [(d, S.segment_phrases(d, lam, two_token_open)) for d in self.distances(batch)]

    def predict_proba(self, batch):
        acts = self.encoder.encode(batch)
        return T.softmax_lastdim(self.class_logits(acts, batch)).data


def batch_with_ids(batch, ids):
    from .data import TokenBatch

    return TokenBatch(np.asarray(ids), batch.lengths, batch.sentences, batch.indices)


class _ShapeRng:
    """Stand-in generator returning zeros; only shapes matter."""

    def normal(self, loc, scale, size):
        return np.zeros(size)
