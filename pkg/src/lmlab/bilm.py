"""Sentence-level bidirectional LSTM language model.

Two independent recurrences over a shared input embedding: the forward one
predicts the next word, the backward one the previous word. State is zeroed
at every sentence boundary in both directions; nothing crosses sentences.
Per-word contextual states (cell by default) feed the averaging route in
`embed`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .corpus import BOS_ID, EOS_ID, Corpus, Vocab
from .embed import EmbeddingTable, average_states
from .errors import ContractError, DataError
from . import numcore
from .numcore import AdamState, LstmParams, adam_update

log = logging.getLogger(__name__)

STATE_KINDS = ("c", "h")
COMBINE_MODES = ("concat", "average")


@dataclass
class BilmConfig:
    emb_dim: int = 256
    hidden: int = 128
    compress_dim: int | None = None
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    clip: float | None = None
    state_kind: str = "c"
    combine: str = "concat"
    seed: int = 42

    def __post_init__(self):
        if self.emb_dim < 1 or self.hidden < 1:
            raise ContractError("emb_dim and hidden must be >= 1")
        if self.state_kind not in STATE_KINDS:
            raise ContractError(f"state_kind must be one of {STATE_KINDS}")
        if self.combine not in COMBINE_MODES:
            raise ContractError(f"combine must be one of {COMBINE_MODES}")
        if self.clip is not None and self.clip <= 0:
            raise ContractError("clip must be positive when set")


@dataclass
class BiLmModel:
    vocab: Vocab
    emb: np.ndarray                    # (V, emb_dim), shared by both directions
    compress: np.ndarray | None        # (in_dim, emb_dim) or None
    fwd: LstmParams
    bwd: LstmParams
    w_out_f: np.ndarray                # (V, H)
    b_out_f: np.ndarray
    w_out_b: np.ndarray
    b_out_b: np.ndarray
    config: BilmConfig

    def __post_init__(self):
        if self.fwd.hidden_size != self.bwd.hidden_size:
            raise ContractError("forward and backward hidden sizes differ")

    @property
    def hidden(self) -> int:
        return self.fwd.hidden_size

    def input_vectors(self, ids) -> np.ndarray:
        x = self.emb[np.asarray(ids, dtype=np.int64)]
        if self.compress is not None:
            x = x @ self.compress.T
        return x

    def params(self) -> dict[str, np.ndarray]:
        out = {
            "emb": self.emb,
            "fwd_w_x": self.fwd.w_x, "fwd_w_h": self.fwd.w_h, "fwd_b": self.fwd.b,
            "bwd_w_x": self.bwd.w_x, "bwd_w_h": self.bwd.w_h, "bwd_b": self.bwd.b,
            "w_out_f": self.w_out_f, "b_out_f": self.b_out_f,
            "w_out_b": self.w_out_b, "b_out_b": self.b_out_b,
        }
        if self.compress is not None:
            out["compress"] = self.compress
        return out


def init_bilm(vocab: Vocab, cfg: BilmConfig) -> BiLmModel:
    """Seeded init: embeddings uniform(+-1/sqrt(dim)), LSTMs via numcore,
    output layers zero so the untrained model is uniform in both directions.
    """
    rng = np.random.default_rng(cfg.seed)
    v_size = len(vocab.id_to_token)
    emb = rng.uniform(-1, 1, size=(v_size, cfg.emb_dim)) / np.sqrt(cfg.emb_dim)
    if cfg.compress_dim is not None:
        compress = rng.uniform(-1, 1, size=(cfg.compress_dim, cfg.emb_dim)) / np.sqrt(cfg.emb_dim)
        in_dim = cfg.compress_dim
    else:
        compress = None
        in_dim = cfg.emb_dim
    fwd = numcore.init_lstm_params(in_dim, cfg.hidden, rng)
    bwd = numcore.init_lstm_params(in_dim, cfg.hidden, rng)
    return BiLmModel(
        vocab=vocab, emb=emb, compress=compress, fwd=fwd, bwd=bwd,
        w_out_f=np.zeros((v_size, cfg.hidden)), b_out_f=np.zeros(v_size),
        w_out_b=np.zeros((v_size, cfg.hidden)), b_out_b=np.zeros(v_size),
        config=cfg,
    )


def _direction_sequences(word_ids: list[int]) -> tuple[tuple, tuple]:
    fwd_in = [BOS_ID] + word_ids
    fwd_tg = word_ids + [EOS_ID]
    bwd_in = [EOS_ID] + word_ids[::-1]
    bwd_tg = word_ids[::-1] + [BOS_ID]
    return (fwd_in, fwd_tg), (bwd_in, bwd_tg)


def _sentence_losses_and_grads(model: BiLmModel, word_ids: list[int],
                               grads: dict[str, np.ndarray] | None) -> float:
    """Joint loss (fwd token-mean + bwd token-mean) for one sentence.

    When `grads` is given, exact gradients are accumulated into it.
    """
    cfg = model.config
    total = 0.0
    for direction, (in_ids, tg_ids) in zip(("f", "b"), _direction_sequences(word_ids)):
        lstm = model.fwd if direction == "f" else model.bwd
        w_out = model.w_out_f if direction == "f" else model.w_out_b
        b_out = model.b_out_f if direction == "f" else model.b_out_b
        inputs = model.input_vectors(in_ids)
        loss, g = numcore.seq_loss_and_grads(lstm, w_out, b_out, inputs,
                                             np.asarray(tg_ids), clip=cfg.clip)
        total += loss
        if grads is not None:
            pre = "fwd_" if direction == "f" else "bwd_"
            grads[pre + "w_x"] += g.lstm.w_x
            grads[pre + "w_h"] += g.lstm.w_h
            grads[pre + "b"] += g.lstm.b
            grads["w_out_f" if direction == "f" else "w_out_b"] += g.w_out
            grads["b_out_f" if direction == "f" else "b_out_b"] += g.b_out
            d_x = g.inputs
            if model.compress is not None:
                emb_rows = model.emb[np.asarray(in_ids, dtype=np.int64)]
                grads["compress"] += d_x.T @ emb_rows
                d_x = d_x @ model.compress
            np.add.at(grads["emb"], np.asarray(in_ids, dtype=np.int64), d_x)
    return total


def batch_loss_and_grads(model: BiLmModel, sentences) -> tuple[float, dict[str, np.ndarray]]:
    """Sum over the batch of per-sentence joint losses, with exact grads."""
    grads = {k: np.zeros_like(v) for k, v in model.params().items()}
    total = 0.0
    for word_ids in sentences:
        total += _sentence_losses_and_grads(model, word_ids, grads)
    return total, grads


def train_bilm(corpus: Corpus, cfg: BilmConfig,
               loss_log: list | None = None) -> BiLmModel:
    """Joint Adam training over both directions, sentences in corpus order."""
    if corpus.num_sentences() == 0:
        raise DataError("cannot train a bidirectional LM on an empty corpus")
    model = init_bilm(corpus.vocab, cfg)
    params = model.params()
    adam = AdamState.for_params(params, alpha=cfg.learning_rate)
    batches = _batched([s.word_ids for s in corpus.sentences()], cfg.batch_size)
    for _ in range(cfg.epochs):
        for batch in batches:
            loss, grads = batch_loss_and_grads(model, batch)
            adam_update(params, grads, adam)
            if loss_log is not None:
                loss_log.append(loss / len(batch))
    return model


def _batched(items: list, size: int) -> list[list]:
    return [items[i:i + size] for i in range(0, len(items), size)]


def mean_loss(model: BiLmModel, corpus: Corpus) -> float:
    """Joint nats per predicted position: fwd NLL plus bwd NLL over the
    shared position count (real tokens + one framing target per direction).
    With zero output layers this is 2 ln V.
    """
    total_nll = 0.0
    total_positions = 0
    for sent in corpus.sentences():
        word_ids = sent.word_ids
        for direction, (in_ids, tg_ids) in zip(("f", "b"), _direction_sequences(word_ids)):
            lstm = model.fwd if direction == "f" else model.bwd
            w_out = model.w_out_f if direction == "f" else model.w_out_b
            b_out = model.b_out_f if direction == "f" else model.b_out_b
            hs, _, _ = numcore.lstm_forward(lstm, model.input_vectors(in_ids),
                                            clip=model.config.clip)
            _, _, _, _, target_logp = numcore.sequence_output_loss(
                w_out, b_out, hs, np.asarray(tg_ids))
            total_nll += -target_logp.sum()
        total_positions += len(word_ids) + 1
    if total_positions == 0:
        raise DataError("no positions to evaluate")
    return total_nll / total_positions


def extract_states(model: BiLmModel, corpus: Corpus):
    """Yield (token id, contextual state) per real-word occurrence.

    The forward state is taken after consuming the word left-to-right, the
    backward state after consuming it right-to-left; concatenation puts the
    forward half first. BOS/EOS never appear in the stream.
    """
    cfg = model.config
    use_cell = cfg.state_kind == "c"
    for sent in corpus.sentences():
        word_ids = sent.word_ids
        t_len = len(word_ids)
        if t_len == 0:
            continue
        fwd_in = [BOS_ID] + word_ids
        bwd_in = [EOS_ID] + word_ids[::-1]
        f_hs, f_cs, _ = numcore.lstm_forward(model.fwd, model.input_vectors(fwd_in),
                                             clip=cfg.clip)
        b_hs, b_cs, _ = numcore.lstm_forward(model.bwd, model.input_vectors(bwd_in),
                                             clip=cfg.clip)
        f_states = f_cs if use_cell else f_hs
        b_states = b_cs if use_cell else b_hs
        for t in range(1, t_len + 1):
            fwd_vec = f_states[t]
            bwd_vec = b_states[t_len - t + 1]
            if cfg.combine == "concat":
                vec = np.concatenate([fwd_vec, bwd_vec])
            else:
                vec = (fwd_vec + bwd_vec) / 2.0
            yield word_ids[t - 1], vec


def bilm_embeddings(model: BiLmModel, corpus: Corpus) -> EmbeddingTable:
    """Average each word's contextual states over all of its occurrences."""
    if corpus.num_words() == 0:
        raise DataError("corpus has no word occurrences to embed")
    dim = 2 * model.hidden if model.config.combine == "concat" else model.hidden
    return average_states(extract_states(model, corpus), model.vocab, dim,
                          provenance="bilm")


def save_bilm(path, model: BiLmModel) -> None:
    cfg = model.config
    meta = {
        "config": {
            "emb_dim": cfg.emb_dim, "hidden": cfg.hidden,
            "compress_dim": cfg.compress_dim, "epochs": cfg.epochs,
            "batch_size": cfg.batch_size, "learning_rate": cfg.learning_rate,
            "clip": cfg.clip, "state_kind": cfg.state_kind,
            "combine": cfg.combine, "seed": cfg.seed,
        },
        "vocab": {"tokens": list(model.vocab.id_to_token),
                  "counts": list(model.vocab.counts)},
    }
    numcore.save_checkpoint(path, "bilm", meta, model.params())


def load_bilm(path) -> BiLmModel:
    kind, meta, arrays = numcore.load_checkpoint(path)
    if kind != "bilm":
        raise DataError(f"{path}: checkpoint kind {kind!r}, expected 'bilm'")
    cfg = BilmConfig(**meta["config"])
    vocab = Vocab(id_to_token=meta["vocab"]["tokens"],
                  counts=list(meta["vocab"]["counts"]))
    return BiLmModel(
        vocab=vocab, emb=arrays["emb"], compress=arrays.get("compress"),
        fwd=LstmParams(arrays["fwd_w_x"], arrays["fwd_w_h"], arrays["fwd_b"]),
        bwd=LstmParams(arrays["bwd_w_x"], arrays["bwd_w_h"], arrays["bwd_b"]),
        w_out_f=arrays["w_out_f"], b_out_f=arrays["b_out_f"],
        w_out_b=arrays["w_out_b"], b_out_b=arrays["b_out_b"],
        config=cfg,
    )
