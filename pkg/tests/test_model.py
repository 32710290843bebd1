import numpy as np
import pytest
import torch

from faithd2t.corpus import SyntheticSpec, TableExample, Vocabulary, generate_synthetic, linearize, tokenize
from faithd2t.losses import nll_loss, r2d2_loss, rd_sentence_loss, rd_token_loss, unlikelihood_loss
from faithd2t.model import (
    CheckpointError,
    ConfigError,
    ModelConfig,
    Seq2SeqModel,
    discriminate,
    forward_teacher_forced,
    greedy_decode,
    init_from_generator,
    load_checkpoint,
    new_model,
    nucleus_filter,
    nucleus_sample,
    query_match,
    read_checkpoint,
    save_checkpoint,
    selective_read,
    sentence_discriminate,
    teacher_forced_batch,
    token_discriminate,
)

EXS = generate_synthetic(SyntheticSpec(seed=2, n_examples=12, min_rows=2, max_rows=3))
VOCAB = Vocabulary.from_examples(EXS)


def tiny(**kw):
    cfg = dict(d_model=16, n_heads=2, d_ff=32, dropout=0.0)
    cfg.update(kw)
    return new_model(VOCAB, **cfg)


def xy(i=0):
    return linearize(EXS[i], VOCAB), tokenize(EXS[i].reference, VOCAB)


class TestForward:
    def test_shapes_and_normalization(self):
        m = tiny(sentence_head=True, token_head=True)
        m.eval()
        x, y = xy()
        tr = forward_teacher_forced(m, x, y)
        assert len(tr) == len(y) + 1
        assert tr.probs.shape == (len(y) + 1, len(VOCAB))
        assert tr.hidden.shape == (len(y) + 1, 16)
        np.testing.assert_allclose(tr.probs.sum(-1).detach().numpy(), 1.0, atol=1e-6)
        assert int(tr.targets[-1]) == VOCAB.eos_id

    def test_untrained_gold_probability(self):
        m = tiny(copy=False)
        m.eval()
        probs = []
        for i in range(len(EXS)):
            probs.extend(forward_teacher_forced(m, *xy(i)).gold_probs().tolist())
        mean = float(np.mean(probs))
        assert 0.1 / len(VOCAB) < mean < 10 / len(VOCAB)

    def test_batched_equals_single(self):
        m = tiny()
        m.eval()
        xs = [list(linearize(e, VOCAB).tokens) for e in EXS[:4]]
        ys = [list(tokenize(e.reference, VOCAB).tokens) for e in EXS[:4]]
        bt = teacher_forced_batch(m, xs, ys)
        for i in range(4):
            single = teacher_forced_batch(m, xs[i : i + 1], ys[i : i + 1])
            n = int(single.mask.sum())
            torch.testing.assert_close(bt.log_probs[i, :n], single.log_probs[0, :n], atol=1e-5, rtol=0)

    def test_train_and_eval_paths_agree(self):
        # the inference fast path must not change results when dropout is off
        m = tiny()
        xs = [list(linearize(e, VOCAB).tokens) for e in EXS[:3]]
        ys = [list(tokenize(e.reference, VOCAB).tokens) for e in EXS[:3]]
        m.train()
        a = teacher_forced_batch(m, xs, ys).log_probs.detach()
        m.eval()
        with torch.no_grad():
            b = teacher_forced_batch(m, xs, ys).log_probs
        torch.testing.assert_close(a, b, atol=1e-5, rtol=0)

    def test_eval_deterministic(self):
        m = tiny(dropout=0.3)
        m.eval()
        x, y = xy(1)
        a = forward_teacher_forced(m, x, y).probs
        b = forward_teacher_forced(m, x, y).probs
        assert torch.equal(a, b)

    def test_no_leak_from_future(self):
        m = tiny()
        m.eval()
        x, y = xy()
        ids = list(y.tokens)
        changed = ids[:-1] + [VOCAB.id("won") if ids[-1] != VOCAB.id("won") else VOCAB.id("in")]
        a = teacher_forced_batch(m, [list(x.tokens)], [ids]).log_probs
        b = teacher_forced_batch(m, [list(x.tokens)], [changed]).log_probs
        n = len(ids)
        torch.testing.assert_close(a[0, :n], b[0, :n])

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            ModelConfig(vocab_size=10, d_model=10, n_heads=3)
        with pytest.raises(ConfigError):
            ModelConfig(vocab_size=0)
        with pytest.raises(ConfigError):
            ModelConfig(vocab_size=10, dtype="float16")


class TestFeatures:
    def test_query_match(self):
        src = torch.tensor([[4, 10, 11, 6, 7, 12, 10, 7, 11, 13]])
        assert query_match(src).tolist() == [[False, False, False, False, False, False, True, False, True, False]]

    def test_selective_read(self):
        src = torch.tensor([[4, 10, 6, 7, 10, 11]])
        memory = torch.arange(6, dtype=torch.float64)[None, :, None].repeat(1, 1, 2)
        out = selective_read(torch.tensor([[1, 10, 11, 12]]), src, memory)
        assert out[0, :, 0].tolist() == [0.0, (1 + 4) / 2, 5.0, 0.0]


class TestHeads:
    def test_zero_heads(self):
        m = tiny(sentence_head=True, token_head=True)
        for head in (m.sentence_head, m.token_head):
            torch.nn.init.zeros_(head.weight)
            torch.nn.init.zeros_(head.bias)
        tr = forward_teacher_forced(m, *xy())
        assert sentence_discriminate(m, tr).item() == 0.5
        tok = token_discriminate(m, tr)
        assert tok.shape == (len(tr),) and torch.all(tok == 0.5)

    def test_range(self):
        m = tiny(sentence_head=True, token_head=True)
        for seed in range(100):
            torch.manual_seed(seed)
            i = seed % len(EXS)
            x, y = xy(i)
            ids = torch.randint(8, len(VOCAB), (len(y),)).tolist()
            tr = forward_teacher_forced(m, x, type(y)(ids, [VOCAB.token(t) for t in ids]))
            out = discriminate(m, tr)
            assert 0 < out.sentence_prob.item() < 1
            assert torch.all((out.token_probs > 0) & (out.token_probs < 1))

    def test_disabled_head(self):
        m = tiny()
        with pytest.raises(ConfigError):
            token_discriminate(m, forward_teacher_forced(m, *xy()))


class TestNucleus:
    def test_filter(self):
        out = nucleus_filter(np.array([0.5, 0.3, 0.15, 0.05]), 0.9)
        np.testing.assert_allclose(out, np.array([0.5, 0.3, 0.15, 0.0]) / 0.95)

    def test_full_and_greedy(self):
        p = np.array([0.1, 0.6, 0.3])
        np.testing.assert_allclose(nucleus_filter(p, 1.0), p)
        np.testing.assert_allclose(nucleus_filter(p, 0.01), [0, 1, 0])
        with pytest.raises(ValueError):
            nucleus_filter(p, 0.0)

    def test_sampling_determinism_and_greedy(self):
        m = tiny()
        m.eval()
        x, _ = xy()
        empty = tokenize("", VOCAB)
        a = nucleus_sample(m, x, empty, 0.9, 6, np.random.default_rng(3))
        b = nucleus_sample(m, x, empty, 0.9, 6, np.random.default_rng(3))
        assert a == b
        g = nucleus_sample(m, x, empty, 1e-9, 6, np.random.default_rng(0))
        assert list(g.tokens) == greedy_decode(m, [list(x.tokens)], 6)[0][: len(g)]


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        m = tiny(token_head=True, dropout=0.1)
        m.eval()
        path = tmp_path / "m.ckpt"
        save_checkpoint(m, path, extra={"epoch": 3})
        back = load_checkpoint(path)
        back.eval()
        x, y = xy()
        assert torch.equal(forward_teacher_forced(m, x, y).probs, forward_teacher_forced(back, x, y).probs)
        assert back.vocab == VOCAB
        assert back.checkpoint_extra == {"epoch": 3}
        assert path.read_bytes()[:8] == b"FD2TCKPT"
        save_checkpoint(back, tmp_path / "again.ckpt", extra={"epoch": 3})
        assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()

    def test_mismatch(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(tiny(), path)
        with pytest.raises(CheckpointError, match="vocab_size"):
            load_checkpoint(path, expect=ModelConfig(vocab_size=len(VOCAB) + 1, d_model=16, n_heads=2,
                                                     d_ff=32, dropout=0.0))

    def test_corrupt(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\0" * 30)
        with pytest.raises(CheckpointError):
            read_checkpoint(path)

    def test_fresh_heads(self, tmp_path):
        warm = tiny()
        path = tmp_path / "w.ckpt"
        save_checkpoint(warm, path)
        a = init_from_generator(path, sentence_head=True, token_head=True, seed=1)
        b = init_from_generator(path, sentence_head=True, token_head=True, seed=2)
        for name, p in warm.state_dict().items():
            assert torch.equal(p, a.state_dict()[name])
        assert not torch.equal(a.token_head.weight, b.token_head.weight)
        c = init_from_generator(path, sentence_head=True, token_head=True, seed=1)
        assert torch.equal(a.token_head.weight, c.token_head.weight)


class TestGradients:
    """Model-through-loss gradients against central differences in float64."""

    def _micro(self):
        ex = TableExample("m", ["A", "B"], [["x", "1"], ["y", "2"]], "x got 1", query="what did x get")
        vocab = Vocabulary.from_examples([ex])
        assert len(vocab) <= 20
        model = new_model(vocab, d_model=8, n_heads=2, d_ff=8, enc_layers=1, dec_layers=1, dropout=0.0,
                          dtype="float64", sentence_head=True, token_head=True, seed=3)
        src = list(linearize(ex, vocab).tokens)
        good = list(tokenize("x got 1", vocab).tokens)
        bad = list(tokenize("x got 2", vocab).tokens)
        return model, src, good, bad

    def _loss(self, model, src, good, bad):
        bt = teacher_forced_batch(model, [src], [good, bad], [0, 0])
        gold = bt.gold_log_probs().exp()
        tok = torch.sigmoid(model.token_head(bt.hidden)).squeeze(-1)
        sent = torch.sigmoid(model.sentence_head(bt.hidden[:, -1])).squeeze(-1)
        n = len(good)
        span = torch.tensor([0.0, 0.0, 1.0])
        nll = nll_loss(gold[0, :n + 1])
        ul = unlikelihood_loss(gold[1, :n], span)
        rd_t = rd_token_loss(tok[0], torch.ones(n + 1, dtype=torch.float64)) + rd_sentence_loss(sent[0], 1.0)
        rd_f = rd_token_loss(tok[1], torch.tensor([1.0, 1.0, 0.0, 0.0])) + rd_sentence_loss(sent[1], 0.0)
        return r2d2_loss(nll, [ul], rd_t, [rd_f], 0.4)

    def test_finite_differences(self):
        model, src, good, bad = self._micro()
        model.train()
        loss = self._loss(model, src, good, bad)
        params = [p for p in model.parameters() if p.requires_grad]
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        rng = np.random.default_rng(0)
        h = 1e-4  # see the acceptance suite for why not smaller
        checked = 0
        for p, g in zip(params, grads):
            if g is None:
                g = torch.zeros_like(p)
            flat = p.data.view(-1)
            for idx in rng.choice(flat.numel(), size=min(4, flat.numel()), replace=False):
                old = flat[idx].item()
                with torch.no_grad():
                    flat[idx] = old + h
                    up = float(self._loss(model, src, good, bad))
                    flat[idx] = old - h
                    dn = float(self._loss(model, src, good, bad))
                    flat[idx] = old
                fd = (up - dn) / (2 * h)
                an = float(g.view(-1)[idx])
                rel = abs(an - fd) / max(abs(an), abs(fd), 1e-7)
                assert rel < 1e-4 or abs(an - fd) < 1e-8, (p.shape, idx, an, fd)
                checked += 1
        assert checked > 80
