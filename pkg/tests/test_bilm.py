import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from lmlab import numcore
from lmlab.bilm import (BilmConfig, batch_loss_and_grads, bilm_embeddings,
                        extract_states, init_bilm, load_bilm, mean_loss,
                        save_bilm, train_bilm)
from lmlab.corpus import build_vocab, encode, tokenize
from lmlab.errors import ContractError, DataError
from lmlab.lm import LmConfig, LmModel
from lmlab import lm as lm_mod
from lmlab.numcore import grad_check


def make_corpus(text, max_size=50):
    vocab = build_vocab(tokenize(text), max_size)
    return encode(text, vocab)


def tiny_corpus():
    return make_corpus("the cat sat on the mat . a dog ran far away . birds sing .")


class TestUniform:
    def test_zero_output_joint_loss_is_two_ln_v(self):
        corpus = tiny_corpus()
        model = init_bilm(corpus.vocab, BilmConfig(emb_dim=6, hidden=4))
        v = len(corpus.vocab)
        assert_allclose(mean_loss(model, corpus), 2 * math.log(v), rtol=1e-12)

    def test_per_sentence_joint_loss_uniform(self):
        corpus = tiny_corpus()
        model = init_bilm(corpus.vocab, BilmConfig(emb_dim=6, hidden=4))
        v = len(corpus.vocab)
        for sent in corpus.sentences():
            loss, _ = batch_loss_and_grads(model, [sent.word_ids])
            assert_allclose(loss, 2 * math.log(v), rtol=1e-12)


class TestGradients:
    def _check(self, cfg, text="the cat sat . dogs run ."):
        corpus = make_corpus(text)
        model = init_bilm(corpus.vocab, cfg)
        # move off the all-zero output saddle before differentiating
        rng = np.random.default_rng(9)
        model.w_out_f += rng.normal(scale=0.3, size=model.w_out_f.shape)
        model.w_out_b += rng.normal(scale=0.3, size=model.w_out_b.shape)
        model.b_out_f += rng.normal(scale=0.3, size=model.b_out_f.shape)
        model.b_out_b += rng.normal(scale=0.3, size=model.b_out_b.shape)
        sentences = [s.word_ids for s in corpus.sentences()]
        _, grads = batch_loss_and_grads(model, sentences)
        params = model.params()
        rep = grad_check(
            lambda p: batch_loss_and_grads(model, sentences)[0], params, grads)
        assert rep.ok, f"{rep.max_rel_error} at {rep.worst_param}"

    def test_joint_gradients(self):
        self._check(BilmConfig(emb_dim=5, hidden=3, seed=1))

    def test_joint_gradients_with_compression(self):
        self._check(BilmConfig(emb_dim=6, hidden=3, compress_dim=4, seed=2))


class TestTraining:
    def test_overfits_one_repeated_sentence(self):
        corpus = make_corpus("\n\n".join(["the small cat sat on the old mat ."] * 12))
        cfg = BilmConfig(emb_dim=12, hidden=16, epochs=60, batch_size=1,
                         learning_rate=5e-3, seed=42)
        model = train_bilm(corpus, cfg)
        assert mean_loss(model, corpus) < 0.05

    def test_deterministic(self):
        corpus = tiny_corpus()
        cfg = BilmConfig(emb_dim=6, hidden=4, epochs=2, seed=42)
        a = train_bilm(corpus, cfg)
        b = train_bilm(corpus, cfg)
        for k, v in a.params().items():
            assert (v == b.params()[k]).all(), k

    def test_loss_log_decreases(self):
        corpus = make_corpus("\n\n".join(["a b c d ."] * 8))
        log: list[float] = []
        train_bilm(corpus, BilmConfig(emb_dim=8, hidden=8, epochs=40, batch_size=1,
                                      learning_rate=1e-2, seed=42), loss_log=log)
        assert log[-1] < log[0] * 0.5

    def test_empty_corpus_rejected(self):
        vocab = build_vocab(tokenize("a"), 10)
        with pytest.raises(DataError):
            train_bilm(encode("", vocab), BilmConfig(emb_dim=4, hidden=3))

    def test_sentence_isolation(self):
        # state resets per sentence, so a sentence's loss ignores neighbors
        corpus_a = make_corpus("the cat sat . dogs run fast .")
        model = init_bilm(corpus_a.vocab, BilmConfig(emb_dim=5, hidden=4, seed=3))
        rng = np.random.default_rng(5)
        model.w_out_f += rng.normal(scale=0.2, size=model.w_out_f.shape)
        sents = [s.word_ids for s in corpus_a.sentences()]
        alone = [batch_loss_and_grads(model, [w])[0] for w in sents]
        together, _ = batch_loss_and_grads(model, sents)
        reversed_total, _ = batch_loss_and_grads(model, sents[::-1])
        assert together == pytest.approx(sum(alone), rel=1e-12)
        assert reversed_total == together


class TestExtraction:
    def _asym_model(self, corpus, **kw):
        model = init_bilm(corpus.vocab, BilmConfig(emb_dim=5, hidden=3, seed=7, **kw))
        rng = np.random.default_rng(13)
        for p in (model.fwd, model.bwd):
            p.w_x += rng.normal(scale=0.4, size=p.w_x.shape)
            p.w_h += rng.normal(scale=0.4, size=p.w_h.shape)
            p.b += rng.normal(scale=0.4, size=p.b.shape)
        return model

    def test_single_word_sentence_manual_unroll(self):
        corpus = make_corpus("cat .")
        # "cat ." is one sentence of two real tokens; take the first word
        model = self._asym_model(corpus)
        wid_cat = corpus.vocab.id_of("cat")
        wid_dot = corpus.vocab.id_of(".")
        from lmlab.corpus import BOS_ID, EOS_ID
        f_hs, f_cs, _ = numcore.lstm_forward(
            model.fwd, model.input_vectors([BOS_ID, wid_cat, wid_dot]))
        b_hs, b_cs, _ = numcore.lstm_forward(
            model.bwd, model.input_vectors([EOS_ID, wid_dot, wid_cat]))
        pairs = dict()
        for wid, vec in extract_states(model, corpus):
            pairs.setdefault(wid, []).append(vec)
        # fwd state after consuming "cat" is step 1; bwd state is step 2
        expected_cat = np.concatenate([f_cs[1], b_cs[2]])
        assert_allclose(pairs[wid_cat][0], expected_cat, rtol=0, atol=0)
        expected_dot = np.concatenate([f_cs[2], b_cs[1]])
        assert_allclose(pairs[wid_dot][0], expected_dot, rtol=0, atol=0)

    def test_forward_half_comes_first(self):
        corpus = make_corpus("cat .")
        model = self._asym_model(corpus)
        h = model.hidden
        from lmlab.corpus import BOS_ID
        wid_cat = corpus.vocab.id_of("cat")
        _, f_cs, _ = numcore.lstm_forward(
            model.fwd, model.input_vectors([BOS_ID, wid_cat]))
        first = next(vec for wid, vec in extract_states(model, corpus)
                     if wid == wid_cat)
        assert (first[:h] == f_cs[1]).all()
        assert not (first[h:] == f_cs[1]).all()

    def test_average_combine(self):
        corpus = make_corpus("cat dog .")
        cat_model = self._asym_model(corpus)
        avg_model = self._asym_model(corpus, combine="average")
        cat_vecs = {w: v for w, v in extract_states(cat_model, corpus)}
        avg_vecs = {w: v for w, v in extract_states(avg_model, corpus)}
        h = cat_model.hidden
        for wid, vec in cat_vecs.items():
            assert_allclose(avg_vecs[wid], (vec[:h] + vec[h:]) / 2.0, rtol=1e-15)

    def test_hidden_state_kind(self):
        corpus = make_corpus("cat .")
        model = self._asym_model(corpus, state_kind="h")
        from lmlab.corpus import BOS_ID, EOS_ID
        wid_cat = corpus.vocab.id_of("cat")
        wid_dot = corpus.vocab.id_of(".")
        f_hs, _, _ = numcore.lstm_forward(
            model.fwd, model.input_vectors([BOS_ID, wid_cat, wid_dot]))
        b_hs, _, _ = numcore.lstm_forward(
            model.bwd, model.input_vectors([EOS_ID, wid_dot, wid_cat]))
        first = next(vec for wid, vec in extract_states(model, corpus)
                     if wid == wid_cat)
        assert_allclose(first, np.concatenate([f_hs[1], b_hs[2]]), rtol=0, atol=0)

    def test_occurrence_counts(self):
        corpus = tiny_corpus()
        model = init_bilm(corpus.vocab, BilmConfig(emb_dim=5, hidden=3))
        seen = [wid for wid, _ in extract_states(model, corpus)]
        assert len(seen) == corpus.num_words()
        flat = [w for s in corpus.sentences() for w in s.word_ids]
        assert seen == flat

    def test_clip_bounds_states(self):
        corpus = tiny_corpus()
        model = self._asym_model(corpus, clip=3.0)
        model.fwd.w_x *= 10
        model.bwd.w_x *= 10
        for _, vec in extract_states(model, corpus):
            assert np.abs(vec).max() <= 3.0

    def test_embeddings_average_and_dim(self):
        corpus = tiny_corpus()
        model = self._asym_model(corpus)
        table = bilm_embeddings(model, corpus)
        assert table.dim == 2 * model.hidden
        assert table.provenance == "bilm"
        occ: dict[int, list] = {}
        for wid, vec in extract_states(model, corpus):
            occ.setdefault(wid, []).append(vec)
        for wid, vecs in occ.items():
            ref = np.mean(np.stack(vecs), axis=0)
            assert np.abs(table.matrix[wid] - ref).max() <= 1e-12


class TestForwardHalfIsAnLm:
    def test_restricted_forward_matches_lm_probs(self):
        corpus = tiny_corpus()
        cfg = BilmConfig(emb_dim=8, hidden=6, epochs=8, seed=42)
        bilm = train_bilm(corpus, cfg)
        uni = LmModel(
            vocab=corpus.vocab, emb=bilm.emb, compress=None, lstm=bilm.fwd,
            w_out=bilm.w_out_f, b_out=bilm.b_out_f,
            config=LmConfig(emb_dim=cfg.emb_dim, hidden=cfg.hidden),
        )
        for sent in corpus.sentences():
            logp_uni = lm_mod.token_log_probs(uni, sent.word_ids)
            from lmlab.corpus import BOS_ID, EOS_ID
            in_ids = [BOS_ID] + sent.word_ids
            hs, _, _ = numcore.lstm_forward(bilm.fwd, bilm.input_vectors(in_ids))
            _, _, _, _, logp_bi = numcore.sequence_output_loss(
                bilm.w_out_f, bilm.b_out_f, hs,
                np.asarray(sent.word_ids + [EOS_ID]))
            assert_allclose(logp_uni, logp_bi, rtol=1e-12)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        corpus = tiny_corpus()
        model = train_bilm(corpus, BilmConfig(emb_dim=5, hidden=4, epochs=2,
                                              compress_dim=3, seed=42))
        path = tmp_path / "bilm.ckpt"
        save_bilm(path, model)
        back = load_bilm(path)
        for k, v in model.params().items():
            assert (v == back.params()[k]).all(), k
        assert back.config == model.config
        assert back.vocab.id_to_token == model.vocab.id_to_token
        a = {w: v for w, v in extract_states(model, corpus)}
        b = {w: v for w, v in extract_states(back, corpus)}
        for w in a:
            assert (a[w] == b[w]).all()

    def test_wrong_kind_rejected(self, tmp_path):
        path = tmp_path / "x.ckpt"
        numcore.save_checkpoint(path, "lm", {}, {"a": np.ones(2)})
        with pytest.raises(DataError):
            load_bilm(path)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [
        dict(emb_dim=0), dict(hidden=0), dict(state_kind="x"),
        dict(combine="sum"), dict(clip=0.0),
    ])
    def test_bad_values_rejected(self, kwargs):
        with pytest.raises(ContractError):
            BilmConfig(**kwargs)
