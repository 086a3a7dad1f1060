"""Corpus reading, vocabulary, batching and the synthetic treebank generator."""

from __future__ import annotations

import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .errors import DataError
from .treebank import DependencyGraph, format_conllx, parse_ptb_bracketed

log = logging.getLogger(__name__)

PAD, UNK, MASK = "[PAD]", "[UNK]", "[MASK]"
RESERVED = (PAD, UNK, MASK)
PAD_ID, UNK_ID, MASK_ID = 0, 1, 2


def tokenize(line):
    return line.lower().split()


def read_corpus(path):
    with open(path, encoding="utf-8") as fh:
        return [tokenize(line) for line in fh if line.strip()]


def write_corpus(path, sentences):
    with open(path, "w", encoding="utf-8") as fh:
        for sent in sentences:
            fh.write(" ".join(sent) + "\n")


class Vocab:
    def __init__(self, itos):
        if tuple(itos[: len(RESERVED)]) != RESERVED:
            raise DataError("vocabulary must start with the reserved tokens")
        self.itos = list(itos)
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def __contains__(self, token):
        return token in self.stoi

    @property
    def n_reserved(self):
        return len(RESERVED)

    def encode(self, tokens):
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids):
        return [self.itos[i] for i in ids]


def build_vocab(corpus, min_freq=1):
    """Frequency-sorted vocabulary (count desc, then lexicographic) over tokenized sentences."""
    counts = Counter(tok for sent in corpus for tok in sent)
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    kept = [t for t, c in counts.items() if c >= min_freq and t not in RESERVED]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocab(list(RESERVED) + kept)


@dataclass
class TokenBatch:
    ids: np.ndarray  # [B, n_max] int64, right-padded with PAD_ID
    lengths: np.ndarray  # [B]
    sentences: List[List[str]] = field(default_factory=list)
    indices: List[int] = field(default_factory=list)  # positions in the source corpus

    @property
    def mask(self):
        return np.arange(self.ids.shape[1])[None, :] < self.lengths[:, None]

    def __len__(self):
        return self.ids.shape[0]

    def flat_index(self, sentence, position):
        """Row in a flattened ``[B * n_max]`` view for a 0-based token position."""
        return sentence * self.ids.shape[1] + position


def make_batch(sentences, vocab, max_len=None, indices=None):
    """Pad tokenized sentences into one batch; returns ``(batch, n_truncated)``."""
    truncated = 0
    rows = []
    for sent in sentences:
        ids = vocab.encode(sent)
        if max_len is not None and len(ids) > max_len:
            ids = ids[:max_len]
            truncated += 1
        rows.append(ids)
    width = max((len(r) for r in rows), default=0)
    arr = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        arr[i, : len(r)] = r
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    kept = [s[: len(r)] for s, r in zip(sentences, rows)]
    return TokenBatch(arr, lengths, kept, list(indices) if indices is not None else []), truncated


def encode_and_batch(sentences, vocab, batch_size, max_len=None, order=None):
    """Yield right-padded batches in corpus order (or ``order``), final ragged batch kept."""
    order = list(range(len(sentences))) if order is None else list(order)
    truncated = 0
    for lo in range(0, len(order), batch_size):
        idx = order[lo : lo + batch_size]
        batch, cut = make_batch([sentences[i] for i in idx], vocab, max_len, idx)
        truncated += cut
        yield batch
    if truncated:
        log.warning("truncated %d sentences longer than max_len=%s", truncated, max_len)


# -- synthetic PCFG treebank ------------------------------------------------

LEXICON = {
    "Det": "the a every some this that".split(),
    "Adj": "big small red old young happy quiet bright dark tall strong gentle clever lazy brave".split(),
    "N": (
        "dog cat bird man woman child teacher farmer king queen horse fox wolf mouse "
        "student doctor baker sailor artist pilot garden house river forest city park "
        "table window book letter song story ball box tree hill road bridge ship car"
    ).split(),
    "V": (
        "saw liked chased found watched helped followed heard met visited painted "
        "carried pushed called greeted admired ran walked sat jumped slept danced "
        "waited stood worked"
    ).split(),
    "P": "on in near under over behind beside with".split(),
}

# S -> NP VP ; NP -> Det N | Det Adj N ; VP -> V NP | V PP ; PP -> P NP
GRAMMAR = {
    "S": [(["NP", "VP"], 1.0)],
    "NP": [(["Det", "N"], 0.6), (["Det", "Adj", "N"], 0.4)],
    "VP": [(["V", "NP"], 0.5), (["V", "PP"], 0.5)],
    "PP": [(["P", "NP"], 1.0)],
}
HEAD_CHILD = {"S": "VP", "NP": "N", "VP": "V", "PP": "P"}


def grammar_yield_bounds(symbol="S"):
    """Minimum and maximum sentence length derivable from ``symbol``."""
    if symbol in LEXICON:
        return 1, 1
    lo, hi = math.inf, 0
    for rhs, _ in GRAMMAR[symbol]:
        bounds = [grammar_yield_bounds(s) for s in rhs]
        lo = min(lo, sum(b[0] for b in bounds))
        hi = max(hi, sum(b[1] for b in bounds))
    return lo, hi


def _zipf(n):
    w = 1.0 / np.arange(1, n + 1)
    return w / w.sum()


@dataclass
class SynthSentence:
    tokens: List[str]
    tree: str
    heads: List[int]
    postags: List[str]
    has_pp: bool


def _expand(symbol, rng, tokens, postags):
    """Returns ``(bracketed, head_index, dependents)`` with 1-based token indices."""
    if symbol in LEXICON:
        words = LEXICON[symbol]
        word = words[rng.choice(len(words), p=_zipf(len(words)))]
        tokens.append(word)
        postags.append(symbol)
        return word, len(tokens), []
    rules = GRAMMAR[symbol]
    probs = np.array([p for _, p in rules])
    rhs = rules[rng.choice(len(rules), p=probs / probs.sum())][0]
    parts, heads, arcs = [], {}, []
    for child in rhs:
        text, head, child_arcs = _expand(child, rng, tokens, postags)
        parts.append(text)
        heads[child] = head
        arcs.extend(child_arcs)
    head = heads[HEAD_CHILD[symbol]]
    arcs.extend((head, h) for c, h in heads.items() if h != head)
    return f"({symbol} {' '.join(parts)})", head, arcs


def synth_sentence(rng):
    tokens, postags = [], []
    tree, root, arcs = _expand("S", rng, tokens, postags)
    heads = [0] * len(tokens)
    for head, dep in arcs:
        heads[dep - 1] = head
    return SynthSentence(tokens, tree, heads, postags, has_pp="(PP" in tree)


def synth_corpus(grammar_seed, n_sentences):
    """Sample ``n_sentences`` from the fixed toy PCFG; deterministic given the seed."""
    if n_sentences < 1:
        raise DataError("n_sentences must be at least 1")
    rng = np.random.default_rng(grammar_seed)
    return [synth_sentence(rng) for _ in range(n_sentences)]


def synth_gold(sentences, mode="dep-depth"):
    from .treebank import GoldSyntax

    return [
        GoldSyntax(parse_ptb_bracketed(s.tree), DependencyGraph(s.heads, s.tokens), mode)
        for s in sentences
    ]


def write_synth(out_dir, sentences, stem="corpus"):
    """Write ``<stem>.txt``, ``<stem>.trees`` and ``<stem>.conllx`` into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {ext: os.path.join(out_dir, f"{stem}.{ext}") for ext in ("txt", "trees", "conllx")}
    write_corpus(paths["txt"], [s.tokens for s in sentences])
    with open(paths["trees"], "w", encoding="utf-8") as fh:
        for s in sentences:
            fh.write(s.tree + "\n")
    with open(paths["conllx"], "w", encoding="utf-8") as fh:
        fh.write("\n".join(format_conllx(DependencyGraph(s.heads, s.tokens), s.postags) for s in sentences))
    return paths
