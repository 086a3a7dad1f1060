import math
import os

import numpy as np
import pytest

from satlm import tensor as T
from satlm import training as TR
from satlm.checkpoint import to_bytes
from satlm.data import MASK_ID, Vocab, make_batch, synth_corpus, synth_gold
from satlm.errors import ConfigError, DataError, ModeError, NumericError
from satlm.training import Adam, TrainConfig, mask_batch, parse_overrides, pretrain

from conftest import tiny_model


# -- masking ------------------------------------------------------------------


def random_batch(r, n_sent, lo, hi, vocab_size=50):
    sents = [[f"w{int(i)}" for i in r.integers(3, vocab_size, size=r.integers(lo, hi + 1))] for _ in range(n_sent)]
    vocab = Vocab(["[PAD]", "[UNK]", "[MASK]"] + [f"w{i}" for i in range(3, vocab_size)])
    return make_batch(sents, vocab)[0], vocab


def test_masking_is_deterministic():
    batch, vocab = random_batch(np.random.default_rng(0), 8, 3, 12)
    a = mask_batch(batch, np.random.default_rng(9), len(vocab))
    b = mask_batch(batch, np.random.default_rng(9), len(vocab))
    assert np.array_equal(a.input_ids, b.input_ids) and a.positions == b.positions and a.actions == b.actions


def test_length_one_masks_one():
    batch, vocab = random_batch(np.random.default_rng(0), 20, 1, 1)
    plan = mask_batch(batch, np.random.default_rng(0), len(vocab))
    assert all(len(p) == 1 for p in plan.positions)


def test_masked_fraction_and_replacement_mix():
    r = np.random.default_rng(1)
    masked = tokens = 0
    kinds = {"mask": 0, "random": 0, "keep": 0}
    while tokens < 10_000:
        batch, vocab = random_batch(r, 16, 8, 30)
        plan = mask_batch(batch, r, len(vocab))
        masked += plan.n_masked
        tokens += int(batch.lengths.sum())
        for b, (pos, acts) in enumerate(zip(plan.positions, plan.actions)):
            assert all(p < batch.lengths[b] for p in pos)
            for p, a in zip(pos, acts):
                kinds[a] += 1
                if a == "mask":
                    assert plan.input_ids[b, p] == MASK_ID
                elif a == "keep":
                    assert plan.input_ids[b, p] == batch.ids[b, p]
                else:
                    assert plan.input_ids[b, p] >= 3
        assert np.array_equal(plan.targets, batch.ids.reshape(-1)[plan.flat_positions])
    assert 0.13 <= masked / tokens <= 0.17
    assert abs(kinds["mask"] / masked - 0.8) < 0.05
    assert abs(kinds["random"] / masked - 0.1) < 0.04


# -- optimizer ----------------------------------------------------------------


def test_adam_zero_gradient_no_decay_is_identity():
    p = T.parameter(np.array([0.3, -1.2]))
    p.grad = np.zeros(2)
    Adam({"p": p}, lr=1e-3, weight_decay=0.0).step()
    assert p.data.tolist() == [0.3, -1.2]


def test_adam_first_step():
    p = T.parameter(np.array([0.0]))
    p.grad = np.array([0.5])
    Adam({"p": p}, lr=1e-5, weight_decay=0.0).step()
    assert abs(p.data[0] - (-1e-5 * 0.5 / (0.5 + 1e-8))) < 1e-20
    assert abs(p.data[0] + 1e-5) < 1e-12


def test_adam_decoupled_decay():
    p, q = T.parameter(np.array([2.0])), T.parameter(np.array([2.0]))
    p.grad, q.grad = np.array([0.5]), np.array([0.5])
    Adam({"p": p}, lr=1e-3, weight_decay=0.0).step()
    Adam({"q": q}, lr=1e-3, weight_decay=0.01).step()
    assert abs((p.data[0] - q.data[0]) - 1e-3 * 0.01 * 2.0) < 1e-15


def test_adam_nan_names_parameter():
    p = T.parameter(np.array([1.0]))
    p.grad = np.array([np.nan])
    with pytest.raises(NumericError, match="'enc.w'"):
        Adam({"enc.w": p}).step()


# -- config -------------------------------------------------------------------


def test_config_validation_and_overrides(tmp_path):
    with pytest.raises(ConfigError):
        TrainConfig(mode="semi")
    with pytest.raises(ConfigError):
        TrainConfig(lambda_unsup=1.5)
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_overrides(["learning_rate = 0.1"])
    train, enc = parse_overrides(["lr = 1e-4", "two-token-open = yes", "n_layers = 4"])
    assert train == {"lr": 1e-4, "two_token_open": True} and enc == {"n_layers": 4}
    cfg = TrainConfig(lr=2e-5, mode="supervised")
    path = tmp_path / "cfg"
    TR.write_config(path, cfg, {"d_model": 32})
    train, enc = TR.read_config(path)
    assert TrainConfig(**train) == cfg and enc == {"d_model": 32}
    assert cfg.lam == 0.7 and TrainConfig().lam == 0.5


# -- loops --------------------------------------------------------------------


def test_steps_per_epoch(synth_small):
    sents = [s.tokens for s in synth_corpus(1, 100)]
    from satlm.data import build_vocab

    vocab = build_vocab(sents)
    model = tiny_model(len(vocab))
    assert len(pretrain(model, sents, vocab, TrainConfig(epochs=1, batch_size=16))) == 7 == TR.steps_per_epoch(100, 16)


def test_freeze_changes_nothing(synth_small):
    _, toks, vocab = synth_small
    model = tiny_model(len(vocab))
    before = {k: v.data.copy() for k, v in model.params.items()}
    hist = pretrain(model, toks, vocab, TrainConfig(epochs=1, freeze=True))
    assert hist and all(np.array_equal(before[k], v.data) for k, v in model.params.items())


def test_gamma_zero_reduces_to_mlm(synth_small):
    _, toks, vocab = synth_small
    hist = pretrain(tiny_model(len(vocab)), toks, vocab, TrainConfig(epochs=1, gamma_pre=0.0))
    assert all(r.total == r.l_w and r.l_g > 0 for r in hist)


def test_one_optimizer_pass_per_step(synth_small, monkeypatch):
    _, toks, vocab = synth_small
    calls = []
    original = Adam.step
    monkeypatch.setattr(Adam, "step", lambda self, lr=None: (calls.append(1), original(self, lr))[1])
    hist = pretrain(tiny_model(len(vocab)), toks, vocab, TrainConfig(epochs=1))
    assert len(calls) == len(hist)


def test_training_is_bit_reproducible(synth_small, tmp_path):
    _, toks, vocab = synth_small
    blobs = []
    for run in ("a", "b"):
        model = tiny_model(len(vocab), seed=4)
        pretrain(model, toks, vocab, TrainConfig(epochs=2, seed=4), out_dir=tmp_path / run)
        blobs.append(to_bytes(model, vocab))
    assert blobs[0] == blobs[1]
    for name in ("train_log.csv", "epoch1.satl", "epoch2.satl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_log_file_columns(synth_small, tmp_path):
    _, toks, vocab = synth_small
    pretrain(tiny_model(len(vocab)), toks, vocab, TrainConfig(epochs=1), out_dir=tmp_path)
    rows = (tmp_path / "train_log.csv").read_text().splitlines()
    assert rows[0] == "step,l_w,l_g,l_neg,l_task,total,ppl"
    step, l_w, l_g, l_neg, l_task, total, ppl = rows[1].split(",")
    assert l_task == "" and float(total) == float(l_w) + float(l_g) * 0.5
    assert math.isclose(float(ppl), math.exp(float(l_w)))


def test_loss_decreases_for_some_grid_lr():
    from satlm.data import build_vocab
    from satlm.encoder import EncoderConfig
    from satlm.model import StructureAwareModel

    sents = [s.tokens for s in synth_corpus(5, 800)]
    vocab = build_vocab(sents)
    improved = False
    for lr in TR.LR_GRID[::-1]:
        model = StructureAwareModel(EncoderConfig(len(vocab), n_layers=4, structure_layer=2), seed=0)
        totals = [r.total for r in pretrain(model, sents, vocab, TrainConfig(lr=lr, epochs=1))]
        assert len(totals) == 50
        improved = np.mean(totals[-10:]) < np.mean(totals[:10])
        if improved:
            break
    assert improved


def test_supervised_needs_gold(synth_small):
    sents, toks, vocab = synth_small
    with pytest.raises(DataError):
        pretrain(tiny_model(len(vocab)), toks, vocab, TrainConfig(mode="supervised"))
    golds = synth_gold(sents)
    golds[3] = None
    with pytest.raises(DataError, match="sentence 3"):
        pretrain(tiny_model(len(vocab)), toks, vocab, TrainConfig(mode="supervised", epochs=1), golds)
    hist = pretrain(tiny_model(len(vocab)), toks, vocab,
                    TrainConfig(mode="supervised", epochs=1, missing_tree="skip"), golds)
    assert len(hist) == TR.steps_per_epoch(len(toks) - 1, 16)


def test_finetune_rejects_supervised_mode(synth_small):
    _, toks, vocab = synth_small
    with pytest.raises(ModeError):
        TR.finetune(tiny_model(len(vocab)), toks, [0] * len(toks), vocab, TrainConfig(mode="supervised"))


def test_finetune_attaches_head_and_logs(synth_small, tmp_path):
    sents, toks, vocab = synth_small
    labels = np.array([int(s.has_pp) for s in sents])
    model = tiny_model(len(vocab))
    hist = TR.finetune(model, toks, labels, vocab, TrainConfig(epochs=1), out_dir=tmp_path)
    assert model.n_classes == 2 and len(hist) == TR.steps_per_epoch(len(toks), 16)
    rows = (tmp_path / "finetune_log.csv").read_text().splitlines()[1:]
    for row in rows:
        _, l_w, l_g, _, l_task, total, _ = row.split(",")
        assert l_w == "" and float(total) == float(l_task) + float(l_g) * 0.23
