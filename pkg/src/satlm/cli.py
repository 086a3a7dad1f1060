"""Command-line entry point: ``satlm {synth,pretrain,finetune,induce,eval,probe-dep}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import syntax as S
from .checkpoint import load_checkpoint, save_checkpoint
from .data import build_vocab, read_corpus, synth_corpus, tokenize, write_synth
from .encoder import EncoderConfig
from .errors import ConfigError, DataError, SatlmError
from .metrics import dependency_alignment_by_head, evaluate, induce_corpus
from .model import StructureAwareModel
from .objectives import GAMMA_FINE, GAMMA_PRE
from .training import TrainConfig, accuracy, finetune, parse_overrides, pretrain, read_config, write_config
from .treebank import GoldSyntax, read_conllx, read_manifest, read_trees

log = logging.getLogger("satlm")

LAMBDA_UNSUP, LAMBDA_SUP = 0.5, 0.7
WEIGHT_DECAY = 0.01
ALPHA_TEXT = ",".join(f"{a:.2f}" for a in S.ALPHA_INIT)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- parser -------------------------------------------------------------------


def _add_seed(p, default=0):
    p.add_argument("--seed", type=int, default=None, help=f"random seed (default: {default})")


def _add_mode(p):
    p.add_argument("--mode", choices=("unsupervised", "supervised"), default=None,
                   help="structure source: induced or gold-injected (default: unsupervised)")


def _add_lambda(p):
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help=f"phrase admission threshold (default: {LAMBDA_UNSUP} unsupervised, {LAMBDA_SUP} supervised)")


def _add_gold(p):
    p.add_argument("--trees", help="bracketed constituency trees, one per line, aligned with --in")
    p.add_argument("--deps", help="CoNLL-X dependency file aligned with --in")
    p.add_argument("--manifest", help="key = value file naming sentences/trees/deps (replaces --in/--trees/--deps)")


def _add_training(p, gamma_flag):
    p.add_argument("--config", help="key = value config file (flags override it)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override any training or encoder config key (repeatable)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default: 3e-05)")
    p.add_argument("--epochs", type=int, default=None, help="training epochs (default: 5)")
    p.add_argument("--batch-size", type=int, default=None, help="sentences per batch (default: 16)")
    p.add_argument("--weight-decay", type=float, default=None, help=f"decoupled weight decay (default: {WEIGHT_DECAY})")
    if gamma_flag == "pre":
        p.add_argument("--gamma-pre", type=float, default=None,
                       help=f"structure-loss weight during pre-training (default: {GAMMA_PRE})")
    else:
        p.add_argument("--gamma-fine", type=float, default=None,
                       help=f"structure-loss weight during fine-tuning (default: {GAMMA_FINE})")


def build_parser():
    parser = _Parser(prog="satlm", description="Structure-aware masked language model toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="write a synthetic treebank (sentences, trees, dependencies)")
    _add_seed(p, 7)
    p.add_argument("--n", type=int, default=2000, help="number of sentences (default: 2000)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--stem", default="corpus", help="file name stem (default: corpus)")

    p = sub.add_parser("pretrain", help="pre-train the masked LM with the structure objective")
    p.add_argument("--in", dest="input", help="training corpus, one whitespace-tokenized sentence per line")
    p.add_argument("--out", required=True, help="output directory for checkpoints and the loss log")
    _add_gold(p)
    _add_seed(p)
    _add_mode(p)
    _add_lambda(p)
    _add_training(p, "pre")
    p.add_argument("--layer", type=int, default=None,
                   help="encoder layer feeding the structure module (default: n_layers // 2)")
    p.add_argument("--alpha-init", default=None,
                   help=f"initial mixing weights over layers l-1, l, l+1 (default: {ALPHA_TEXT})")
    p.add_argument("--min-freq", type=int, default=1, help="vocabulary frequency cut-off (default: 1)")

    p = sub.add_parser("finetune", help="fine-tune a checkpoint on labeled sentences")
    p.add_argument("--ckpt", required=True, help="pre-trained checkpoint")
    p.add_argument("--in", dest="input", required=True, help="labeled data, one 'label<TAB>sentence' per line")
    p.add_argument("--out", required=True, help="output directory")
    _add_seed(p)
    _add_mode(p)
    _add_lambda(p)
    _add_training(p, "fine")

    p = sub.add_parser("induce", help="dump distances and induced phrases")
    p.add_argument("--ckpt", required=True, help="checkpoint")
    p.add_argument("--in", dest="input", help="sentences, one per line")
    p.add_argument("--out", help="output file (default: standard output)")
    _add_gold(p)
    _add_seed(p)
    _add_mode(p)
    _add_lambda(p)

    p = sub.add_parser("eval", help="evaluate perplexity and induced structure against a treebank")
    p.add_argument("--ckpt", required=True, help="checkpoint")
    p.add_argument("--in", dest="input", help="sentences, one per line")
    p.add_argument("--out", help="CSV report path; the key = value summary goes to standard output")
    _add_gold(p)
    _add_seed(p)
    _add_mode(p)
    _add_lambda(p)

    p = sub.add_parser("probe-dep", help="dependency alignment of every attention head, per layer")
    p.add_argument("--ckpt", required=True, help="checkpoint")
    p.add_argument("--in", dest="input", help="sentences, one per line")
    p.add_argument("--deps", help="CoNLL-X dependency file aligned with --in")
    p.add_argument("--manifest", help="key = value file naming sentences/trees/deps")
    p.add_argument("--out", help="CSV path (default: standard output)")
    p.add_argument("--layer", type=int, default=None, help="probe a single layer (default: all layers)")
    _add_seed(p)
    return parser


# -- helpers ------------------------------------------------------------------


def _resolve_inputs(args):
    paths = {"sentences": getattr(args, "input", None), "trees": getattr(args, "trees", None),
             "deps": getattr(args, "deps", None)}
    if getattr(args, "manifest", None):
        paths.update(read_manifest(args.manifest))
    if not paths["sentences"]:
        raise ConfigError("no input sentences: pass --in or --manifest")
    return paths


def _load_golds(paths, n_sentences, gold_mode="dep-depth"):
    trees = read_trees(paths["trees"]) if paths.get("trees") else None
    deps = read_conllx(paths["deps"]) if paths.get("deps") else None
    if trees is None and deps is None:
        return None
    for name, items in (("trees", trees), ("dependencies", deps)):
        if items is not None and len(items) != n_sentences:
            raise DataError(f"{len(items)} {name} for {n_sentences} sentences")
    return [GoldSyntax(trees[i] if trees else None, deps[i] if deps else None, gold_mode)
            for i in range(n_sentences)]


def _train_config(args, base=None):
    """Defaults, then the checkpoint's settings, then --config, then --set, then explicit flags."""
    values = dict(base or {})
    enc = {}
    if getattr(args, "config", None):
        t, e = read_config(args.config)
        values.update(t)
        enc.update(e)
    t, e = parse_overrides(args.overrides)
    values.update(t)
    enc.update(e)
    flags = {"seed": args.seed, "mode": args.mode, "lr": args.lr, "epochs": args.epochs,
             "batch_size": args.batch_size, "weight_decay": args.weight_decay,
             "gamma_pre": getattr(args, "gamma_pre", None), "gamma_fine": getattr(args, "gamma_fine", None)}
    values.update({k: v for k, v in flags.items() if v is not None})
    if args.lam is not None:
        values["lambda_sup" if values.get("mode") == "supervised" else "lambda_unsup"] = args.lam
    return TrainConfig(**values), enc


def _lam(args, train):
    if args.lam is not None:
        return args.lam
    mode = args.mode or (train or {}).get("mode", "unsupervised")
    key = "lambda_sup" if mode == "supervised" else "lambda_unsup"
    return (train or {}).get(key, LAMBDA_SUP if mode == "supervised" else LAMBDA_UNSUP)


def _open_out(path):
    if path is None:
        return sys.stdout
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    return open(path, "w", encoding="utf-8")


def _load(path):
    model, vocab, train = load_checkpoint(path)
    if vocab is None:
        raise DataError(f"{path}: checkpoint carries no vocabulary")
    return model, vocab, train or {}


def read_labeled(path):
    """``label<TAB>sentence`` lines -> ``(sentences, labels)``."""
    sents, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            label, sep, text = line.rstrip("\n").partition("\t")
            if not sep or not text.strip():
                raise DataError(f"{path}:{no}: expected 'label<TAB>sentence'")
            labels.append(label.strip())
            sents.append(tokenize(text))
    if not sents:
        raise DataError(f"{path}: no labeled sentences")
    return sents, labels


# -- commands -----------------------------------------------------------------


def cmd_synth(args):
    seed = 7 if args.seed is None else args.seed
    sents = synth_corpus(seed, args.n)
    paths = write_synth(args.out, sents, args.stem)
    with open(os.path.join(args.out, f"{args.stem}.manifest"), "w", encoding="utf-8") as fh:
        fh.write(f"sentences = {os.path.basename(paths['txt'])}\n")
        fh.write(f"trees = {os.path.basename(paths['trees'])}\n")
        fh.write(f"deps = {os.path.basename(paths['conllx'])}\n")
    print(f"wrote {len(sents)} sentences to {args.out}")


def cmd_pretrain(args):
    config, enc = _train_config(args)
    paths = _resolve_inputs(args)
    sents = read_corpus(paths["sentences"])
    golds = _load_golds(paths, len(sents), config.gold_mode)
    if config.mode == "supervised" and golds is None:
        raise DataError("supervised mode needs --trees/--deps (or a --manifest) for the training corpus")
    if args.layer is not None:
        enc["structure_layer"] = args.layer
    alpha = S.ALPHA_INIT
    if args.alpha_init:
        try:
            alpha = tuple(float(a) for a in args.alpha_init.split(","))
        except ValueError:
            raise ConfigError(f"--alpha-init: cannot parse {args.alpha_init!r}") from None
        if len(alpha) != 3:
            raise ConfigError("--alpha-init needs three comma-separated weights")
    vocab = build_vocab(sents, args.min_freq)
    enc.pop("vocab_size", None)
    model = StructureAwareModel(EncoderConfig(len(vocab), **enc), config.seed, alpha)
    os.makedirs(args.out, exist_ok=True)
    write_config(os.path.join(args.out, "config.txt"), config, enc)
    history = pretrain(model, sents, vocab, config, golds, args.out)
    save_checkpoint(model, os.path.join(args.out, "model.satl"), vocab, config)
    last = history[-1].total if history else float("nan")
    print(f"steps = {len(history)}\nfinal_total = {last!r}\ncheckpoint = {os.path.join(args.out, 'model.satl')}")


def cmd_finetune(args):
    model, vocab, train = _load(args.ckpt)
    base = {k: v for k, v in train.items() if k in ("gold_mode", "negatives", "structure_reduction")}
    config, _ = _train_config(args, base)
    sents, raw_labels = read_labeled(args.input)
    names = sorted(set(raw_labels))
    labels = np.array([names.index(x) for x in raw_labels])
    finetune(model, sents, labels, vocab, config, args.out, label_names=names)
    save_checkpoint(model, os.path.join(args.out, "model.satl"), vocab, config)
    with open(os.path.join(args.out, "labels.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(names) + "\n")
    print(f"classes = {len(names)}\ntrain_accuracy = {float(accuracy(model, sents, labels, vocab))!r}")


def _gold_for_induction(args, paths, n, train):
    mode = args.mode or "unsupervised"
    if mode != "supervised":
        return None
    golds = _load_golds(paths, n, train.get("gold_mode", "dep-depth"))
    if golds is None:
        raise DataError("supervised induction needs --trees/--deps (or a --manifest)")
    return golds


def cmd_induce(args):
    model, vocab, train = _load(args.ckpt)
    paths = _resolve_inputs(args)
    sents = read_corpus(paths["sentences"])
    golds = _gold_for_induction(args, paths, len(sents), train)
    induced = induce_corpus(model, sents, vocab, _lam(args, train), golds)
    fh = _open_out(args.out)
    try:
        for toks, (d, seg) in zip(sents, induced):
            fh.write(S.format_induction(toks, d, seg) + "\n")
    finally:
        if fh is not sys.stdout:
            fh.close()


def cmd_eval(args):
    model, vocab, train = _load(args.ckpt)
    paths = _resolve_inputs(args)
    sents = read_corpus(paths["sentences"])
    golds = _load_golds(paths, len(sents), train.get("gold_mode", "dep-depth"))
    if golds is None or any(g.const is None for g in golds):
        raise DataError("eval needs gold trees (--trees or a --manifest)")
    seed = 0 if args.seed is None else args.seed
    rep = evaluate(model, sents, vocab, golds, _lam(args, train), seed, inject=args.mode == "supervised")
    if args.out:
        with _open_out(args.out) as fh:
            fh.write(rep.to_csv())
        sys.stdout.write(rep.to_kv())
    else:
        sys.stdout.write(rep.to_csv() + "\n# summary\n" + rep.to_kv())


def cmd_probe_dep(args):
    model, vocab, _ = _load(args.ckpt)
    paths = _resolve_inputs(args)
    sents = read_corpus(paths["sentences"])
    if not paths.get("deps"):
        raise DataError("probe-dep needs --deps (or a --manifest)")
    deps = read_conllx(paths["deps"])
    if len(deps) != len(sents):
        raise DataError(f"{len(deps)} dependency graphs for {len(sents)} sentences")
    scores = dependency_alignment_by_head(model, sents, deps, vocab)
    layers = range(1, model.config.n_layers + 1)
    if args.layer is not None:
        if args.layer not in layers:
            raise ConfigError(f"--layer must lie in 1..{model.config.n_layers}")
        layers = [args.layer]
    fh = _open_out(args.out)
    try:
        fh.write("# heads\nlayer,head,score\n")
        for layer in layers:
            for head, v in enumerate(scores[layer - 1], 1):
                fh.write(f"{layer},{head},{float(v)!r}\n")
        fh.write("\n# layers\nlayer,mean,max\n")
        for layer in layers:
            row = scores[layer - 1]
            fh.write(f"{layer},{float(row.mean())!r},{float(row.max())!r}\n")
    finally:
        if fh is not sys.stdout:
            fh.close()


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "induce": cmd_induce,
    "eval": cmd_eval,
    "probe-dep": cmd_probe_dep,
}


def run(argv=None):
    """Parse ``argv`` and dispatch; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        COMMANDS[args.command](args)
    except SatlmError as exc:
        print(f"satlm {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"satlm {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
