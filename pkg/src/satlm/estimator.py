"""scikit-learn style wrappers around pre-training, induction and fine-tuning."""

from __future__ import annotations

import copy

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import checkpoint
from . import syntax as S
from .data import build_vocab, tokenize
from .encoder import EncoderConfig
from .metrics import induce_corpus, masked_perplexity
from .model import StructureAwareModel
from .training import TrainConfig, finetune, predict_labels, pretrain


def check_sentences(X):
    """Normalise ``X`` to a list of token lists.

    Accepts raw strings (lower-cased and whitespace-split) or sequences of
    string tokens.  Empty corpora and empty sentences are rejected.
    """
    if isinstance(X, str):
        raise ValueError("expected a collection of sentences, got a single string")
    out = []
    for i, sent in enumerate(X):
        if isinstance(sent, str):
            toks = tokenize(sent)
        else:
            toks = list(sent)
            if not all(isinstance(t, str) for t in toks):
                raise ValueError(f"sentence {i}: tokens must be strings")
        if not toks:
            raise ValueError(f"sentence {i} is empty")
        out.append(toks)
    if not out:
        raise ValueError("no sentences given")
    return out


def check_golds(golds, sentences):
    if golds is None:
        return None
    golds = list(golds)
    if len(golds) != len(sentences):
        raise ValueError(f"{len(golds)} gold analyses for {len(sentences)} sentences")
    return golds


class StructureAwareLM(TransformerMixin, BaseEstimator):
    """Masked LM pre-trained jointly with phrase induction.

    ``fit`` pre-trains on a corpus, ``transform`` returns per-token syntactic
    distances, and ``predict`` returns the induced phrase spans.
    """

    def __init__(self, n_layers=6, n_heads=4, d_model=64, d_ff=256, max_len=64, structure_layer=None,
                 lr=3e-5, weight_decay=0.01, batch_size=16, epochs=5, seed=0, gamma_pre=0.5,
                 lambda_unsup=0.5, lambda_sup=0.7, mode="unsupervised", gold_mode="dep-depth",
                 negatives=5, min_freq=1, structure_reduction="phrase-mean", alpha_init=S.ALPHA_INIT):
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_model = d_model
        self.d_ff = d_ff
        self.max_len = max_len
        self.structure_layer = structure_layer
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.gamma_pre = gamma_pre
        self.lambda_unsup = lambda_unsup
        self.lambda_sup = lambda_sup
        self.mode = mode
        self.gold_mode = gold_mode
        self.negatives = negatives
        self.min_freq = min_freq
        self.structure_reduction = structure_reduction
        self.alpha_init = alpha_init

    def _train_config(self):
        return TrainConfig(lr=self.lr, weight_decay=self.weight_decay, batch_size=self.batch_size,
                           epochs=self.epochs, seed=self.seed, gamma_pre=self.gamma_pre,
                           lambda_unsup=self.lambda_unsup, lambda_sup=self.lambda_sup, mode=self.mode,
                           gold_mode=self.gold_mode, negatives=self.negatives,
                           structure_reduction=self.structure_reduction)

    def fit(self, X, y=None, golds=None, out_dir=None):
        """Pre-train; ``golds`` (one GoldSyntax per sentence) is required in supervised mode."""
        sents = check_sentences(X)
        golds = check_golds(golds, sents)
        config = self._train_config()
        self.vocab_ = build_vocab(sents, self.min_freq)
        enc = EncoderConfig(len(self.vocab_), self.n_layers, self.n_heads, self.d_model, self.d_ff,
                            self.max_len, self.structure_layer)
        self.model_ = StructureAwareModel(enc, self.seed, self.alpha_init)
        self.history_ = pretrain(self.model_, sents, self.vocab_, config, golds, out_dir)
        return self

    def _lam(self, lam):
        if lam is not None:
            return lam
        return self.lambda_sup if self.mode == "supervised" else self.lambda_unsup

    def transform(self, X):
        """Predicted syntactic distances, one array per sentence."""
        check_is_fitted(self, "model_")
        sents = check_sentences(X)
        return [d for d, _ in induce_corpus(self.model_, sents, self.vocab_, self._lam(None))]

    def predict(self, X, golds=None, lam=None):
        """Induced phrase spans per sentence; gold syntax is injected when given."""
        check_is_fitted(self, "model_")
        sents = check_sentences(X)
        golds = check_golds(golds, sents)
        induced = induce_corpus(self.model_, sents, self.vocab_, self._lam(lam), golds)
        return [seg.spans for _, seg in induced]

    def perplexity(self, X, seed=0):
        check_is_fitted(self, "model_")
        return masked_perplexity(self.model_, check_sentences(X), self.vocab_, seed)

    def score(self, X, y=None):
        """Negative masked perplexity (higher is better)."""
        return -self.perplexity(X)

    def save(self, path):
        check_is_fitted(self, "model_")
        checkpoint.save_checkpoint(self.model_, path, self.vocab_, self._train_config())

    @classmethod
    def load(cls, path):
        model, vocab, train = checkpoint.load_checkpoint(path)
        cfg = model.config
        kwargs = dict(n_layers=cfg.n_layers, n_heads=cfg.n_heads, d_model=cfg.d_model, d_ff=cfg.d_ff,
                      max_len=cfg.max_len, structure_layer=cfg.structure_layer, alpha_init=model.alpha_init)
        if train:
            kwargs.update({k: v for k, v in train.items() if k in cls._get_param_names()})
        est = cls(**kwargs)
        est.model_, est.vocab_, est.history_ = model, vocab, []
        return est


class StructureAwareClassifier(ClassifierMixin, BaseEstimator):
    """Sentence classifier fine-tuned from a pre-trained :class:`StructureAwareLM`.

    When ``base`` is None a fresh language model with default settings is
    pre-trained on the training sentences first.
    """

    def __init__(self, base=None, lr=3e-5, weight_decay=0.01, batch_size=16, epochs=5, seed=0,
                 gamma_fine=0.23, lambda_unsup=0.5, negatives=5, structure_reduction="phrase-mean"):
        self.base = base
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.gamma_fine = gamma_fine
        self.lambda_unsup = lambda_unsup
        self.negatives = negatives
        self.structure_reduction = structure_reduction

    def fit(self, X, y, out_dir=None):
        sents = check_sentences(X)
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(sents):
            raise ValueError(f"y must be 1-D with one label per sentence ({len(sents)}), got shape {y.shape}")
        base = self.base
        if base is None:
            base = StructureAwareLM(seed=self.seed).fit(sents)
        check_is_fitted(base, "model_")
        self.classes_, codes = np.unique(y, return_inverse=True)
        self.vocab_ = base.vocab_
        self.model_ = StructureAwareModel(base.model_.config, alpha_init=base.model_.alpha_init,
                                          params=copy.deepcopy(base.model_.params))
        self.model_.params.pop("cls.w", None)
        self.model_.params.pop("cls.b", None)
        config = TrainConfig(lr=self.lr, weight_decay=self.weight_decay, batch_size=self.batch_size,
                             epochs=self.epochs, seed=self.seed, gamma_fine=self.gamma_fine,
                             lambda_unsup=self.lambda_unsup, negatives=self.negatives,
                             structure_reduction=self.structure_reduction)
        self.history_ = finetune(self.model_, sents, codes, self.vocab_, config, out_dir,
                                 label_names=list(self.classes_))
        return self

    def predict_proba(self, X):
        from .data import encode_and_batch

        check_is_fitted(self, "model_")
        sents = check_sentences(X)
        out = np.empty((len(sents), len(self.classes_)))
        for batch in encode_and_batch(sents, self.vocab_, 64, self.model_.config.max_len):
            out[batch.indices] = self.model_.predict_proba(batch)
        return out

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[predict_labels(self.model_, check_sentences(X), self.vocab_)]
