"""Masking, Adam, pre-training and fine-tuning loops, config files."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, fields
from typing import List, Optional

import numpy as np

from . import objectives as O
from .checkpoint import save_checkpoint
from .data import MASK_ID, encode_and_batch, make_batch
from .encoder import EncoderConfig
from .errors import ConfigError, DataError, NumericError, SamplingError

log = logging.getLogger(__name__)

LR_GRID = (8e-6, 1e-5, 2e-5, 3e-5)
BATCH_SIZES = (16, 24, 32)


@dataclass
class TrainConfig:
    lr: float = 3e-5
    weight_decay: float = 0.01
    batch_size: int = 16
    epochs: int = 5
    seed: int = 0
    gamma_pre: float = O.GAMMA_PRE
    gamma_fine: float = O.GAMMA_FINE
    lambda_unsup: float = 0.5
    lambda_sup: float = 0.7
    mode: str = "unsupervised"
    gold_mode: str = "dep-depth"
    negatives: int = O.NEGATIVES_PER_PHRASE
    mask_prob: float = 0.15
    missing_tree: str = "abort"
    two_token_open: bool = False
    structure_reduction: str = "phrase-mean"
    freeze: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.lr <= 0 or self.weight_decay < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("learning rate and batch size must be positive, decay and epochs non-negative")
        if self.mode not in ("unsupervised", "supervised"):
            raise ConfigError(f"mode must be 'unsupervised' or 'supervised', got {self.mode!r}")
        if self.missing_tree not in ("abort", "skip"):
            raise ConfigError("missing_tree must be 'abort' or 'skip'")
        if self.gold_mode not in ("dep-depth", "const-height"):
            raise ConfigError(f"unknown gold_mode {self.gold_mode!r}")
        for name in ("lambda_unsup", "lambda_sup", "mask_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.structure_reduction not in O.REDUCTIONS:
            raise ConfigError(f"structure_reduction must be one of {O.REDUCTIONS}")
        if self.negatives < 1:
            raise ConfigError("negatives must be at least 1")

    @property
    def lam(self):
        return self.lambda_sup if self.mode == "supervised" else self.lambda_unsup

    def to_dict(self):
        return asdict(self)


# -- config files -------------------------------------------------------------

_ENCODER_KEYS = {f.name: f.type for f in fields(EncoderConfig)}
_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}


def _coerce(key, text, default):
    if isinstance(default, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None
    return text.strip()


_ENCODER_DEFAULTS = {"vocab_size": 0, "n_layers": 6, "n_heads": 4, "d_model": 64, "d_ff": 256, "max_len": 64,
                     "structure_layer": 0}


def parse_overrides(pairs):
    """``key = value`` strings -> ``(train_kwargs, encoder_kwargs)``; unknown keys rejected."""
    train, enc = {}, {}
    defaults = TrainConfig()
    for raw in pairs:
        key, sep, value = raw.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"expected key = value, got {raw!r}")
        if key in _TRAIN_KEYS:
            train[key] = _coerce(key, value.strip(), getattr(defaults, key))
        elif key in _ENCODER_KEYS:
            enc[key] = _coerce(key, value.strip(), _ENCODER_DEFAULTS[key])
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return train, enc


def read_config(path):
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh]
    return parse_overrides(ln for ln in lines if ln and not ln.startswith("#"))


def write_config(path, train_config, encoder_overrides=None):
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in train_config.to_dict().items():
            fh.write(f"{key} = {value}\n")
        for key, value in (encoder_overrides or {}).items():
            fh.write(f"{key} = {value}\n")


# -- masking ------------------------------------------------------------------


@dataclass
class MaskingPlan:
    input_ids: np.ndarray  # [B, n] ids after replacement
    positions: List[List[int]]  # 0-based masked positions per sentence
    targets: np.ndarray  # original ids, flattened in (sentence, position) order
    actions: List[List[str]]  # "mask" | "random" | "keep"
    flat_positions: np.ndarray  # rows into a [B * n] view

    @property
    def n_masked(self):
        return int(self.targets.size)


def mask_batch(batch, rng, vocab_size, n_reserved=3, mask_prob=0.15):
    """Choose ~15% of tokens per sentence (at least one) and apply 80/10/10 replacement.

    The per-sentence count is ``mask_prob * length`` rounded stochastically so
    its expectation is exact before the one-token floor.
    """
    ids = batch.ids.copy()
    width = ids.shape[1]
    positions, targets, actions, flat = [], [], [], []
    for b, length in enumerate(batch.lengths):
        length = int(length)
        if length == 0:
            log.warning("skipping empty sentence %d in masking", b)
            positions.append([])
            actions.append([])
            continue
        expected = mask_prob * length
        count = int(math.floor(expected + rng.random()))
        count = min(max(count, 1), length)
        chosen = sorted(int(i) for i in rng.choice(length, size=count, replace=False))
        acts = []
        for pos in chosen:
            targets.append(ids[b, pos])
            flat.append(b * width + pos)
            roll = rng.random()
            if roll < 0.8:
                ids[b, pos] = MASK_ID
                acts.append("mask")
            elif roll < 0.9:
                ids[b, pos] = int(rng.integers(n_reserved, vocab_size)) if vocab_size > n_reserved else MASK_ID
                acts.append("random")
            else:
                acts.append("keep")
        positions.append(chosen)
        actions.append(acts)
    return MaskingPlan(ids, positions, np.array(targets, dtype=np.int64), actions, np.array(flat, dtype=np.int64))


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params, lr=3e-5, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in parameter {name!r}")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= lr * update + lr * self.weight_decay * p.data


def adam_step(params, state, lr=None):
    """Functional wrapper: apply one update of ``state`` (an :class:`Adam`) to ``params``."""
    state.params = params
    state.step(lr)
    return params, state


# -- loops --------------------------------------------------------------------


def _check_golds(sentences, golds, config):
    if config.mode != "supervised":
        return list(range(len(sentences)))
    if golds is None:
        raise DataError("supervised mode needs gold trees and dependencies for every sentence")
    keep = []
    for i, sent in enumerate(sentences):
        g = golds[i] if i < len(golds) else None
        ok = g is not None and g.const is not None and len(g) == len(sent)
        if config.gold_mode == "dep-depth":
            ok = ok and g.dep is not None
        if ok:
            keep.append(i)
        elif config.missing_tree == "abort":
            raise DataError(f"sentence {i} has no usable gold syntax")
    if len(keep) < len(sentences):
        log.warning("skipped %d sentences without gold syntax", len(sentences) - len(keep))
    return keep


def _golds_for(batch, golds, config):
    if config.mode != "supervised":
        return None
    out = []
    for i in batch.indices:
        g = golds[i]
        g.mode = config.gold_mode
        out.append(g)
    return out


def _write_log(fh, row):
    if fh is not None:
        fh.write(row + "\n")
        fh.flush()


def pretrain(model, sentences, vocab, config, golds=None, out_dir=None, callback=None):
    """Multi-task MLM + structure pre-training.

    ``sentences`` are token lists.  When ``out_dir`` is given a CSV log
    ``train_log.csv`` and per-epoch checkpoints ``epoch{k}.satl`` are written.
    Returns the list of per-step :class:`LossBreakdown` records.
    """
    keep = _check_golds(sentences, golds, config)
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params, config.lr, weight_decay=config.weight_decay)
    history = []
    fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        fh = open(os.path.join(out_dir, "train_log.csv"), "w", encoding="utf-8")
        _write_log(fh, O.LOG_HEADER)
    try:
        step = 0
        for epoch in range(1, config.epochs + 1):
            order = [keep[i] for i in rng.permutation(len(keep))]
            for batch in encode_and_batch(sentences, vocab, config.batch_size, model.config.max_len, order):
                plan = mask_batch(batch, rng, len(vocab), vocab.n_reserved, config.mask_prob)
                model.zero_grad()
                try:
                    out = model.pretrain_forward(batch, plan, config.lam, config.gamma_pre, rng,
                                                 _golds_for(batch, golds, config), config.negatives,
                                                 two_token_open=config.two_token_open,
                                                 reduction=config.structure_reduction)
                except SamplingError as exc:
                    log.warning("step %d: %s; batch skipped", step + 1, exc)
                    continue
                if not config.freeze:
                    out.total.backward()
                    opt.step()
                step += 1
                rec = out.breakdown()
                history.append(rec)
                _write_log(fh, rec.as_row(step, math.exp(rec.l_w)))
                if callback is not None:
                    callback(step, rec)
            if out_dir is not None:
                save_checkpoint(model, os.path.join(out_dir, f"epoch{epoch}.satl"), vocab, config)
    finally:
        if fh is not None:
            fh.close()
    return history


def finetune(model, sentences, labels, vocab, config, out_dir=None, callback=None, label_names=None):
    """Classification fine-tuning with the structure objective kept trainable.

    ``labels`` are integer class ids.  A classification head is attached if
    the model does not have one.
    """
    if config.mode == "supervised":
        from .errors import ModeError

        raise ModeError("supervised structure injection is not allowed during fine-tuning")
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1 if label_names is None else len(label_names)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DataError("label outside the known label set")
    if model.n_classes is None:
        model.add_classifier(n_classes, config.seed)
    elif model.n_classes != n_classes:
        raise DataError(f"model head has {model.n_classes} classes, data has {n_classes}")
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params, config.lr, weight_decay=config.weight_decay)
    history = []
    fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        fh = open(os.path.join(out_dir, "finetune_log.csv"), "w", encoding="utf-8")
        _write_log(fh, O.LOG_HEADER)
    try:
        step = 0
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(sentences))
            for batch in encode_and_batch(sentences, vocab, config.batch_size, model.config.max_len, order):
                model.zero_grad()
                try:
                    out = model.finetune_forward(batch, labels[batch.indices], config.lambda_unsup,
                                                 config.gamma_fine, rng, None, config.negatives,
                                                 two_token_open=config.two_token_open,
                                                 reduction=config.structure_reduction)
                except SamplingError as exc:
                    log.warning("step %d: %s; batch skipped", step + 1, exc)
                    continue
                if not config.freeze:
                    out.total.backward()
                    opt.step()
                step += 1
                rec = out.breakdown()
                history.append(rec)
                _write_log(fh, rec.as_row(step))
                if callback is not None:
                    callback(step, rec)
            if out_dir is not None:
                save_checkpoint(model, os.path.join(out_dir, f"epoch{epoch}.satl"), vocab, config)
    finally:
        if fh is not None:
            fh.close()
    return history


def predict_labels(model, sentences, vocab, batch_size=64):
    preds = []
    for batch in encode_and_batch(sentences, vocab, batch_size, model.config.max_len):
        preds.extend(np.argmax(model.predict_proba(batch), axis=1).tolist())
    return np.array(preds, dtype=np.int64)


def accuracy(model, sentences, labels, vocab):
    return float(np.mean(predict_labels(model, sentences, vocab) == np.asarray(labels)))


def steps_per_epoch(n_sentences, batch_size):
    return math.ceil(n_sentences / batch_size)


__all__ = [
    "TrainConfig",
    "MaskingPlan",
    "mask_batch",
    "Adam",
    "adam_step",
    "pretrain",
    "finetune",
    "make_batch",
]
