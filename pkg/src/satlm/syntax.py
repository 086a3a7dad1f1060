"""Syntactic-distance structure module.

Builds word and phrasal contexts from three consecutive middle layers,
predicts a scalar distance per token with a small convolutional head,
greedily segments a sentence into phrases from those distances, and pools
each phrase into one vector with distance-weighted attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import AlignmentError, ConfigError, ContractError
from .treebank import gold_distances, gold_spans

ALPHA_INIT = (0.35, 0.40, 0.25)
KERNEL_WIDTH = 3


def init_parameters(d_model, rng, alpha_init=ALPHA_INIT):
    alpha_init = np.asarray(alpha_init, dtype=np.float64)
    if alpha_init.shape != (3,) or np.any(alpha_init <= 0) or not math.isclose(alpha_init.sum(), 1.0):
        raise ConfigError(f"alpha_init must be three positive weights summing to 1, got {alpha_init}")
    p = {
        # softmax(log a) == a for a on the simplex
        "syntax.alpha_logits": np.log(alpha_init),
        "syntax.conv.k": rng.normal(0.0, 1.0 / math.sqrt(KERNEL_WIDTH * d_model), (KERNEL_WIDTH, d_model, d_model)),
        "syntax.conv.b": np.zeros(d_model),
        "syntax.proj.w": rng.normal(0.0, 1.0 / math.sqrt(d_model), (d_model, 1)),
        "syntax.proj.b": np.zeros(1),
    }
    return {k: T.parameter(v) for k, v in p.items()}


@dataclass
class SyntacticContexts:
    word_ctx: T.Tensor  # hidden[l - 1]
    phrasal_ctx: T.Tensor  # convex mix of hidden[l - 1 .. l + 1]
    alphas: T.Tensor  # [3], sums to one


def build_contexts(acts, l, alpha_logits):
    n_layers = len(acts.hidden) - 1
    if not 1 < l < n_layers:
        raise ConfigError(f"structure layer l={l} needs 1 < l < {n_layers}")
    alphas = T.softmax_lastdim(alpha_logits)
    mix = None
    for offset, h in enumerate(acts.hidden[l - 1 : l + 2]):
        term = h * T.take(alphas, [offset])
        mix = term if mix is None else mix + term
    return SyntacticContexts(acts.hidden[l - 1], mix, alphas)


def distance_head(word_ctx, params, valid=None):
    """conv(k=3) -> relu -> linear, giving one distance per token.

    ``word_ctx`` is ``[B, n, d]`` (or ``[n, d]``).  Padded positions are zeroed
    before the convolution so they act as the same-padding zeros.
    """
    x = word_ctx
    if valid is not None:
        x = x * np.asarray(valid, dtype=np.float64)[..., None]
    hidden = T.relu(T.conv1d(x, params["syntax.conv.k"], params["syntax.conv.b"]))
    d = hidden @ params["syntax.proj.w"] + params["syntax.proj.b"]
    return d.reshape(d.shape[:-1])


# -- segmentation -------------------------------------------------------------


def _log_sigmoid(x):
    # log(sigmoid(x)) = -softplus(-x), stable for large |x|
    return -math.log1p(math.exp(-x)) if x >= 0 else x - math.log1p(math.exp(x))


def log_membership_prob(d, span, j):
    start, end = span
    if j != end + 1 or j > len(d) or start < 1 or start > end:
        raise ContractError(f"token {j} is not the next token after span {span} in a length-{len(d)} sentence")
    return sum(_log_sigmoid(float(d[j - 1]) - float(d[k - 1])) for k in range(start, end + 1))


def membership_prob(d, span, j):
    """Probability that token ``j`` joins the open phrase ``span`` (all 1-based).

    The product of sigmoid(d_j - d_k) over every token k already in the span.
    """
    return math.exp(log_membership_prob(d, span, j))


@dataclass
class PhraseSegmentation:
    spans: List[Tuple[int, int]]
    decision_probs: List[float] = field(default_factory=list)  # per token; nan for token 1

    def __len__(self):
        return len(self.spans)

    @property
    def admission_probs(self):
        """p* recorded when each token entered its phrase; openers count as 1."""
        out = list(self.decision_probs)
        for start, _ in self.spans:
            out[start - 1] = 1.0
        return out


def segment_phrases(d, lam, two_token_open=False):
    """Greedy left-to-right phrase segmentation.

    A token joins the open phrase when its membership probability is strictly
    above ``lam``; otherwise the phrase closes and a new one opens at it.  With
    ``two_token_open`` each new phrase absorbs its second token unconditionally.
    """
    d = np.asarray(d, dtype=np.float64)
    n = len(d)
    if n == 0:
        return PhraseSegmentation([], [])
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    # compare in log space so tiny-but-positive probabilities still beat lam = 0
    log_lam = math.log(lam) if lam > 0 else -math.inf
    spans, probs = [], [math.nan]
    start = 1
    for j in range(2, n + 1):
        logp = log_membership_prob(d, (start, j - 1), j)
        probs.append(math.exp(logp))
        if (two_token_open and j == start + 1) or logp > log_lam:
            continue
        spans.append((start, j - 1))
        start = j
    spans.append((start, n))
    return PhraseSegmentation(spans, probs)


def segmentation_from_spans(d, spans):
    """Segmentation with fixed spans, recording membership probabilities under ``d``."""
    d = np.asarray(d, dtype=np.float64)
    probs = [math.nan] * len(d)
    for start, end in spans:
        for j in range(start + 1, end + 1):
            probs[j - 1] = membership_prob(d, (start, j - 1), j)
    return PhraseSegmentation(list(spans), probs)


# -- phrasal attention --------------------------------------------------------


@dataclass
class PhraseBatch:
    """All phrases of a batch, pooled.

    ``embeddings`` is ``[P, d]``; ``weights`` is ``[P, B * n]`` with each row
    supported on its phrase's tokens.  ``openings`` are flat token rows.
    """

    embeddings: T.Tensor
    weights: T.Tensor
    openings: np.ndarray
    sentence_ids: np.ndarray
    spans: List[Tuple[int, int]]


def phrase_embeddings(segmentations, d, word_ctx):
    """Pool every phrase in a batch: u = softmax(d_i * p*_i) over the span, s = sum u_i c_i.

    ``d`` is ``[B, n]`` and ``word_ctx`` ``[B, n, dim]``.  The p* factors are
    constants, so gradients reach ``d`` and ``word_ctx`` but not the
    segmentation decisions.
    """
    B, n = d.shape
    dim = word_ctx.shape[-1]
    rows = sum(len(s.spans) for s in segmentations)
    factors = np.zeros((rows, B * n))
    offsets = np.full((rows, B * n), T.DTYPE(-1e9))
    openings, sentence_ids, spans = [], [], []
    r = 0
    for b, seg in enumerate(segmentations):
        adm = seg.admission_probs
        for start, end in seg.spans:
            cols = b * n + np.arange(start - 1, end)
            factors[r, cols] = adm[start - 1 : end]
            offsets[r, cols] = 0.0
            openings.append(b * n + start - 1)
            sentence_ids.append(b)
            spans.append((start, end))
            r += 1
    scores = d.reshape(1, B * n) * factors + offsets
    weights = T.softmax_lastdim(scores)
    pooled = weights @ word_ctx.reshape(B * n, dim)
    return PhraseBatch(pooled, weights, np.array(openings, dtype=np.intp), np.array(sentence_ids), spans)


@dataclass
class PhraseEmbedding:
    embedding: T.Tensor  # [dim]
    weights: np.ndarray  # attention over the span tokens
    span: Tuple[int, int]


def phrase_embed(seg, d, word_ctx):
    """Single-sentence phrasal attention; ``d`` is ``[n]`` and ``word_ctx`` ``[n, dim]``."""
    d = T.as_tensor(d)
    word_ctx = T.as_tensor(word_ctx)
    if word_ctx.shape[0] != d.shape[0] or (seg.spans and seg.spans[-1][1] != d.shape[0]):
        raise AlignmentError("segmentation does not match the context length")
    n = d.shape[0]
    batch = phrase_embeddings([seg], d.reshape(1, n), word_ctx.reshape(1, *word_ctx.shape))
    out = []
    for r, (start, end) in enumerate(batch.spans):
        out.append(
            PhraseEmbedding(T.take(batch.embeddings, r), batch.weights.data[r, start - 1 : end].copy(), (start, end))
        )
    return out


# -- supervised injection -----------------------------------------------------


def inject_gold(gold, n, lam=0.7, resegment=False, two_token_open=False):
    """Gold distances and segmentation replacing the predicted ones for one sentence.

    By default the segmentation is the gold lowest-constituent partition.  With
    ``resegment`` the gold distances are re-segmented greedily at ``lam``.
    """
    if len(gold) != n:
        raise AlignmentError(f"gold syntax covers {len(gold)} tokens, sentence has {n}")
    d = gold_distances(gold, gold.mode)
    if resegment:
        return d, segment_phrases(d, lam, two_token_open)
    spans = [(s, e) for s, e, _ in gold_spans(gold.const)]
    return d, segmentation_from_spans(d, spans)


def segment_batch(d, lengths, lam, golds: Optional[Sequence] = None, two_token_open=False, resegment=False):
    """Per-sentence segmentations for a ``[B, n]`` distance array.

    Returns ``(segmentations, distances)`` where ``distances`` is the numpy
    ``[B, n]`` array actually used (gold values replace predictions when
    ``golds`` is given).
    """
    d = np.array(d, dtype=np.float64)
    segs = []
    for b, length in enumerate(lengths):
        length = int(length)
        if golds is not None:
            gd, seg = inject_gold(golds[b], length, lam, resegment, two_token_open)
            d[b, :length] = gd
        else:
            seg = segment_phrases(d[b, :length], lam, two_token_open)
        segs.append(seg)
    return segs, d


# -- dump format --------------------------------------------------------------


def format_induction(tokens, d, seg):
    """``tok:dist`` pairs (tab-separated), ``|||``, then the spans."""
    pairs = "\t".join(f"{t}:{float(x):.2f}" for t, x in zip(tokens, d))
    spans = " ".join(f"({s},{e})" for s, e in seg.spans)
    return f"{pairs}\t|||\t{spans}"


def parse_induction(line):
    """Inverse of :func:`format_induction`: ``(tokens, distances, spans)``."""
    left, sep, right = line.partition("|||")
    if not sep:
        raise ContractError("induction line lacks the '|||' separator")
    tokens, dists = [], []
    for pair in left.split():
        tok, _, val = pair.rpartition(":")
        tokens.append(tok)
        dists.append(float(val))
    spans = []
    for item in right.split():
        s, e = item.strip("()").split(",")
        spans.append((int(s), int(e)))
    return tokens, np.array(dists), spans
