"""Transformer encoder stack with masked-LM output head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, TruncationError, VocabularyError

MASK_LOGIT = -1e9


@dataclass
class EncoderConfig:
    vocab_size: int
    n_layers: int = 6
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    max_len: int = 64
    structure_layer: Optional[int] = None

    def __post_init__(self):
        if self.structure_layer is None:
            self.structure_layer = self.n_layers // 2
        self.validate()

    def validate(self):
        if min(self.vocab_size, self.n_layers, self.n_heads, self.d_model, self.d_ff, self.max_len) < 1:
            raise ConfigError("encoder sizes must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 1 < self.structure_layer < self.n_layers:
            raise ConfigError(
                f"structure_layer must satisfy 1 < l < n_layers, got l={self.structure_layer}, "
                f"n_layers={self.n_layers}"
            )

    def to_dict(self):
        return asdict(self)


@dataclass
class LayerActivations:
    """``hidden[0]`` is the embedding output; ``hidden[k]`` is the output of layer k.

    ``attention[k - 1]`` holds layer k's maps with shape ``[B, heads, n, n]``.
    """

    hidden: list
    attention: list
    lengths: np.ndarray = field(default=None)

    def attention_maps(self, layer, sentence):
        """Per-head ``n x n`` numpy maps for one sentence of a 1-based layer, padding stripped."""
        n = int(self.lengths[sentence])
        return self.attention[layer - 1].data[sentence, :, :n, :n]


def init_parameters(config, rng):
    d, f = config.d_model, config.d_ff
    p = {
        "tok_emb": rng.normal(0.0, 0.02, (config.vocab_size, d)),
        "pos_emb": rng.normal(0.0, 0.02, (config.max_len, d)),
        "mlm_bias": np.zeros(config.vocab_size),
    }
    for i in range(config.n_layers):
        pre = f"layer{i}."
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + name] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        p[pre + "ff1.w"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, f))
        p[pre + "ff1.b"] = np.zeros(f)
        p[pre + "ff2.w"] = rng.normal(0.0, 1.0 / math.sqrt(f), (f, d))
        p[pre + "ff2.b"] = np.zeros(d)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
    return {k: T.parameter(v) for k, v in p.items()}


class Encoder:
    """N-layer encoder reading its weights from a shared parameter dict."""

    def __init__(self, config, params):
        self.config = config
        self.params = params

    def embed(self, ids):
        """Token plus learned absolute position embeddings, scaled by sqrt(d_model).

        ``ids`` is ``[n]`` or ``[B, n]``; the result gains a trailing ``d_model`` axis.
        """
        ids = np.asarray(ids, dtype=np.int64)
        n = ids.shape[-1]
        if n > self.config.max_len:
            raise TruncationError(f"sequence length {n} exceeds max_len={self.config.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise VocabularyError(f"token id out of range for vocab_size={self.config.vocab_size}")
        tok = T.take(self.params["tok_emb"], ids.reshape(-1)).reshape(ids.shape + (self.config.d_model,))
        pos = T.take(self.params["pos_emb"], np.arange(n))
        return (tok + pos) * math.sqrt(self.config.d_model)

    def attention_layer(self, index, h, valid=None):
        """One block: multi-head attention E, then LN(FF(LN(E)) + E).

        ``h`` is ``[B, n, d]`` (or ``[n, d]``); ``valid`` is a boolean ``[B, n]``
        key mask.  Returns the new hidden state and the ``[B, heads, n, n]`` maps.
        """
        squeeze = h.ndim == 2
        if squeeze:
            h = h.reshape(1, *h.shape)
            valid = None if valid is None else np.asarray(valid)[None]
        p, cfg = self.params, self.config
        pre = f"layer{index}."
        B, n, d = h.shape
        heads, dk = cfg.n_heads, d // cfg.n_heads

        def split(x):
            return x.reshape(B, n, heads, dk).transpose(0, 2, 1, 3)

        q = split(h @ p[pre + "wq"])
        k = split(h @ p[pre + "wk"])
        v = split(h @ p[pre + "wv"])
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dk))
        if valid is not None:
            bias = np.where(np.asarray(valid, dtype=bool), 0.0, MASK_LOGIT)[:, None, None, :]
            scores = scores + bias
        attn = T.softmax_lastdim(scores)
        e = (attn @ v).transpose(0, 2, 1, 3).reshape(B, n, d) @ p[pre + "wo"]
        normed = T.layer_norm(e, p[pre + "ln1.g"], p[pre + "ln1.b"])
        ff = T.relu(normed @ p[pre + "ff1.w"] + p[pre + "ff1.b"]) @ p[pre + "ff2.w"] + p[pre + "ff2.b"]
        out = T.layer_norm(ff + e, p[pre + "ln2.g"], p[pre + "ln2.b"])
        if squeeze:
            return out.reshape(n, d), attn.reshape(heads, n, n)
        return out, attn

    def encode(self, batch):
        """Run all layers over a TokenBatch, keeping every hidden state and attention map."""
        h = self.embed(batch.ids)
        hidden, attention = [h], []
        for i in range(self.config.n_layers):
            h, attn = self.attention_layer(i, h, batch.mask)
            hidden.append(h)
            attention.append(attn)
        return LayerActivations(hidden, attention, np.asarray(batch.lengths))

    def mlm_logits(self, h_top, positions):
        """Vocabulary logits at the given flat positions of ``h_top``.

        The projection is tied to the token embedding table.
        """
        positions = np.asarray(positions, dtype=np.int64).reshape(-1)
        if positions.size == 0:
            raise ContractError("mlm_logits needs at least one masked position")
        flat = h_top.reshape(-1, self.config.d_model)
        if positions.max() >= flat.shape[0] or positions.min() < 0:
            raise ContractError("masked position outside the sentence")
        rows = T.take(flat, positions)
        return rows @ self.params["tok_emb"].transpose() + self.params["mlm_bias"]
