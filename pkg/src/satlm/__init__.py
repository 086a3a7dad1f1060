"""Structure-aware masked language modeling with phrase induction on a numpy autograd core."""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Vocab, build_vocab, synth_corpus, synth_gold
from .encoder import Encoder, EncoderConfig
from .errors import SatlmError
from .estimator import StructureAwareClassifier, StructureAwareLM, check_sentences
from .metrics import EvalReport, evaluate, masked_perplexity, span_f1
from .model import StructureAwareModel
from .syntax import segment_phrases
from .training import TrainConfig, finetune, pretrain
from .treebank import DependencyGraph, GoldSyntax, parse_conllx, parse_ptb_bracketed

__version__ = "0.1.0"

__all__ = [
    "DependencyGraph",
    "Encoder",
    "EncoderConfig",
    "EvalReport",
    "GoldSyntax",
    "SatlmError",
    "StructureAwareClassifier",
    "StructureAwareLM",
    "StructureAwareModel",
    "TrainConfig",
    "Vocab",
    "build_vocab",
    "check_sentences",
    "evaluate",
    "finetune",
    "load_checkpoint",
    "masked_perplexity",
    "parse_conllx",
    "parse_ptb_bracketed",
    "pretrain",
    "save_checkpoint",
    "segment_phrases",
    "span_f1",
    "synth_corpus",
    "synth_gold",
]
