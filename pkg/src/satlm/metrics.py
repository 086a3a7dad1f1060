"""Evaluation quantities for induced structure and language-model quality."""

from __future__ import annotations

import io
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import objectives as O
from .data import encode_and_batch
from .errors import AlignmentError, ContractError
from .treebank import MAIN_TYPES, bucket_label

log = logging.getLogger(__name__)


def masked_nll(model, sentences, vocab, seed=0, batch_size=32, mask_prob=0.15):
    """Total masked-token NLL and masked-token count under deterministic masking."""
    from .training import mask_batch

    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    for batch in encode_and_batch(sentences, vocab, batch_size, model.config.max_len):
        plan = mask_batch(batch, rng, len(vocab), vocab.n_reserved, mask_prob)
        if plan.n_masked == 0:
            continue
        acts = model.encoder.encode(_with_ids(batch, plan.input_ids))
        logits = model.encoder.mlm_logits(acts.hidden[-1], plan.flat_positions)
        total += O.mlm_loss(logits, plan.targets).item() * plan.n_masked
        count += plan.n_masked
    return total, count


def masked_perplexity(model, sentences, vocab, seed=0, batch_size=32):
    """exp(mean NLL over masked positions, corpus-wide)."""
    total, count = masked_nll(model, sentences, vocab, seed, batch_size)
    if count == 0:
        raise ContractError("no masked tokens in the evaluation corpus")
    return math.exp(total / count)


def _with_ids(batch, ids):
    from .model import batch_with_ids

    return batch_with_ids(batch, ids)


# -- span F1 ------------------------------------------------------------------


def _span_set(spans):
    return {(int(s[0]), int(s[1])) for s in spans if int(s[1]) > int(s[0])}


def span_f1(induced, gold):
    """Micro-averaged unlabeled span precision, recall and F1.

    ``induced`` and ``gold`` are per-sentence collections of ``(start, end)``
    spans (extra tuple fields such as labels are ignored).  Length-1 spans are
    excluded from both sides.
    """
    if len(induced) != len(gold):
        raise AlignmentError(f"{len(induced)} induced sentences vs {len(gold)} gold")
    match = n_ind = n_gold = 0
    for a, b in zip(induced, gold):
        a, b = _span_set(a), _span_set(b)
        match += len(a & b)
        n_ind += len(a)
        n_gold += len(b)
    p = match / n_ind if n_ind else 0.0
    r = match / n_gold if n_gold else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


# -- dependency alignment -----------------------------------------------------


def _dep_indicator(graph, both_directions=True):
    n = len(graph)
    ind = np.zeros((n, n))
    for head, dep in graph.edges():
        ind[head - 1, dep - 1] = 1.0
        if both_directions:
            ind[dep - 1, head - 1] = 1.0
    return ind


def dependency_alignment(attention, deps, both_directions=True):
    """Share of attention mass on token pairs linked by a dependency.

    ``attention`` is a list of ``n x n`` maps (one per sentence) and ``deps``
    the matching list of dependency graphs or ``n x n`` 0/1 indicator arrays.
    With ``both_directions`` an edge counts from head to dependent and back.
    """
    if len(attention) != len(deps):
        raise AlignmentError(f"{len(attention)} attention maps vs {len(deps)} dependency graphs")
    num = den = 0.0
    for alpha, dep in zip(attention, deps):
        alpha = np.asarray(alpha, dtype=np.float64)
        ind = np.asarray(dep, dtype=np.float64) if isinstance(dep, np.ndarray) else _dep_indicator(dep, both_directions)
        if alpha.shape != ind.shape:
            raise AlignmentError(f"attention shape {alpha.shape} vs dependency shape {ind.shape}")
        num += float((alpha * ind).sum())
        den += float(alpha.sum())
    return num / den if den else 0.0


def dependency_alignment_by_head(model, sentences, deps, vocab, both_directions=True, batch_size=32):
    """``[n_layers, n_heads]`` alignment scores over a corpus (padding excluded)."""
    cfg = model.config
    num = np.zeros((cfg.n_layers, cfg.n_heads))
    den = np.zeros_like(num)
    for batch in encode_and_batch(sentences, vocab, batch_size, cfg.max_len):
        acts = model.encoder.encode(batch)
        for b, idx in enumerate(batch.indices):
            ind = _dep_indicator(deps[idx], both_directions)
            if ind.shape[0] != batch.lengths[b]:
                raise AlignmentError(f"sentence {idx}: dependency graph length differs from tokens")
            for layer in range(1, cfg.n_layers + 1):
                maps = acts.attention_maps(layer, b)
                num[layer - 1] += (maps * ind).sum(axis=(1, 2))
                den[layer - 1] += maps.sum(axis=(1, 2))
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


# -- PhrDev -------------------------------------------------------------------


def align_span(span, gold_spans):
    """Gold span with maximal token overlap; leftmost wins ties."""
    best, best_overlap = None, -1
    for g in sorted(gold_spans, key=lambda s: (s[0], s[1])):
        overlap = max(0, min(span[1], g[1]) - max(span[0], g[0]) + 1)
        if overlap > best_overlap:
            best, best_overlap = g, overlap
    return best


def phr_dev_sentence(induced_spans, gold_spans):
    deltas = []
    for span in induced_spans:
        g = align_span(span, gold_spans)
        deltas.append(abs((span[1] - span[0] + 1) - (g[1] - g[0] + 1)))
    return float(np.std(deltas)) if deltas else 0.0


def phr_dev(induced, gold):
    """Per-sentence std of induced-vs-gold phrase length differences.

    Returns ``(mean, median, n_skipped)`` over sentences; sentences without
    gold spans are skipped.
    """
    if len(induced) != len(gold):
        raise AlignmentError(f"{len(induced)} induced sentences vs {len(gold)} gold")
    values, skipped = [], 0
    for ind, g in zip(induced, gold):
        spans = ind.spans if hasattr(ind, "spans") else ind
        g = [(s[0], s[1]) for s in g]
        if not g:
            skipped += 1
            continue
        values.append(phr_dev_sentence(spans, g))
    if not values:
        return 0.0, 0.0, skipped
    return float(np.mean(values)), float(np.median(values)), skipped


# -- Diff statistic -----------------------------------------------------------


def diff_raw(d):
    """Mean absolute gap to the minimum-distance (sub-root) token, leftmost on ties."""
    d = np.asarray(d, dtype=np.float64)
    if d.size == 0:
        raise ContractError("diff statistic needs a non-empty sentence")
    r = int(np.argmin(d))
    return float(np.abs(d - d[r]).mean())


def diff_statistic(distances):
    """Raw and corpus min-max normalized Diff values, one per sentence."""
    raw = np.array([diff_raw(d) for d in distances])
    lo, hi = raw.min(), raw.max()
    if len(raw) < 2 or hi == lo:
        log.warning("Diff normalization is degenerate over %d sentence(s); reporting 0", len(raw))
        return raw, np.zeros_like(raw)
    return raw, (raw - lo) / (hi - lo)


# -- phrase types -------------------------------------------------------------


def phrase_type_proportions(induced, gold_labeled):
    """Label each induced span by the exactly matching gold constituent.

    ``gold_labeled`` holds per-sentence ``(label, start, end)`` triples; the
    innermost (last listed) constituent wins when several share a span.
    Returns ``(proportions, average_length)``.
    """
    counts = Counter()
    lengths = []
    for ind, gold in zip(induced, gold_labeled):
        spans = ind.spans if hasattr(ind, "spans") else ind
        by_span = {}
        for label, s, e in gold:
            by_span[(s, e)] = label
        for s, e in spans:
            counts[bucket_label(by_span.get((s, e), "Other"))] += 1
            lengths.append(e - s + 1)
    total = sum(counts.values())
    props = {t: (counts[t] / total if total else 0.0) for t in MAIN_TYPES + ("Other",)}
    return props, (float(np.mean(lengths)) if lengths else 0.0)


# -- report -------------------------------------------------------------------


@dataclass
class EvalReport:
    perplexity: Optional[float] = None
    span_p: float = 0.0
    span_r: float = 0.0
    span_f1: float = 0.0
    dep_align: Optional[np.ndarray] = None  # [layers, heads]
    phr_dev_mean: float = 0.0
    phr_dev_median: float = 0.0
    diff_normalized: List[float] = field(default_factory=list)
    phrase_type_proportions: Dict[str, float] = field(default_factory=dict)
    avg_len: float = 0.0

    def diff_histogram(self, bins=10):
        hist, edges = np.histogram(self.diff_normalized, bins=bins, range=(0.0, 1.0))
        return hist, edges

    def summary(self):
        out = {
            "perplexity": self.perplexity,
            "span_p": self.span_p,
            "span_r": self.span_r,
            "span_f1": self.span_f1,
            "phr_dev_mean": self.phr_dev_mean,
            "phr_dev_median": self.phr_dev_median,
            "avg_len": self.avg_len,
        }
        for k, v in self.phrase_type_proportions.items():
            out[f"prop_{k}"] = v
        if self.dep_align is not None:
            best = np.unravel_index(np.argmax(self.dep_align), self.dep_align.shape)
            out["dep_align_best"] = float(self.dep_align[best])
            out["dep_align_best_layer"] = int(best[0]) + 1
            out["dep_align_best_head"] = int(best[1]) + 1
        return out

    def to_csv(self):
        buf = io.StringIO()
        buf.write("# spans\nprecision,recall,f1\n")
        buf.write(f"{float(self.span_p)!r},{float(self.span_r)!r},{float(self.span_f1)!r}\n\n")
        if self.dep_align is not None:
            buf.write("# dep_align\nlayer,head,score\n")
            for (layer, head), v in np.ndenumerate(self.dep_align):
                buf.write(f"{layer + 1},{head + 1},{float(v)!r}\n")
            buf.write("\n")
        buf.write("# phr_dev\nmean,median\n")
        buf.write(f"{float(self.phr_dev_mean)!r},{float(self.phr_dev_median)!r}\n\n")
        hist, edges = self.diff_histogram()
        buf.write("# diff_histogram\nbin_lo,bin_hi,count\n")
        for c, lo, hi in zip(hist, edges[:-1], edges[1:]):
            buf.write(f"{lo:.1f},{hi:.1f},{int(c)}\n")
        buf.write("\n# phrase_types\ntype,proportion\n")
        for k, v in self.phrase_type_proportions.items():
            buf.write(f"{k},{float(v)!r}\n")
        buf.write(f"avg_len,{float(self.avg_len)!r}\n")
        return buf.getvalue()

    def to_kv(self):
        return "".join(f"{k} = {'' if v is None else v}\n" for k, v in self.summary().items())


def induce_corpus(model, sentences, vocab, lam, golds=None, batch_size=32, two_token_open=False):
    """``[(distances, segmentation)]`` for every sentence, in corpus order."""
    out = [None] * len(sentences)
    for batch in encode_and_batch(sentences, vocab, batch_size, model.config.max_len):
        g = None if golds is None else [golds[i] for i in batch.indices]
        for i, item in zip(batch.indices, model.induce(batch, lam, g, two_token_open)):
            out[i] = item
    return out


def evaluate(model, sentences, vocab, golds, lam=0.5, seed=0, batch_size=32, inject=False):
    """Full report on a treebank: perplexity, span F1, alignment, PhrDev, Diff, phrase types.

    ``golds`` holds one :class:`GoldSyntax` per sentence.  With ``inject`` the
    gold structure replaces the model's own induction.
    """
    from .treebank import gold_spans

    if len(golds) != len(sentences):
        raise AlignmentError(f"{len(sentences)} sentences vs {len(golds)} gold analyses")
    induced = induce_corpus(model, sentences, vocab, lam, golds if inject else None, batch_size)
    segs = [seg for _, seg in induced]
    labeled = [g.const.constituents() for g in golds]
    flat = [[(s, e) for s, e, _ in gold_spans(g.const)] for g in golds]
    rep = EvalReport()
    rep.perplexity = masked_perplexity(model, sentences, vocab, seed, batch_size)
    rep.span_p, rep.span_r, rep.span_f1 = span_f1([s.spans for s in segs], flat)
    if all(g.dep is not None for g in golds):
        rep.dep_align = dependency_alignment_by_head(model, sentences, [g.dep for g in golds], vocab,
                                                     batch_size=batch_size)
    rep.phr_dev_mean, rep.phr_dev_median, _ = phr_dev(segs, flat)
    _, norm = diff_statistic([d for d, _ in induced])
    rep.diff_normalized = norm.tolist()
    rep.phrase_type_proportions, rep.avg_len = phrase_type_proportions(segs, labeled)
    return rep

