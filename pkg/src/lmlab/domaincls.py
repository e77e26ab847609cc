"""Bi-LSTM domain classifier over labeled text units.

A forward recurrence produces h_t, a backward one g_t; every timestep gets a
domain distribution z_t = softmax(Z [g_t; h_t] + b_o), backward state first.
Training supervises all timesteps with the unit's label. The per-timestep
concatenations, averaged per word, are the global-semantic embedding route.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, Vocab
from .embed import EmbeddingTable, average_states
from .errors import ContractError, DataError
from . import numcore
from .numcore import AdamState, LstmParams, adam_update

log = logging.getLogger(__name__)

GRANULARITIES = ("paragraph", "sentence")


@dataclass
class DomainConfig:
    emb_dim: int = 256
    hidden: int = 128
    compress_dim: int | None = None
    granularity: str = "paragraph"
    epochs: int = 5
    learning_rate: float = 1e-3
    clip: float | None = None
    seed: int = 42

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ContractError(f"granularity must be one of {GRANULARITIES}")
        if self.clip is not None and self.clip <= 0:
            raise ContractError("clip must be positive when set")


@dataclass
class DomainModel:
    vocab: Vocab
    num_domains: int
    emb: np.ndarray
    compress: np.ndarray | None
    fwd: LstmParams                    # produces h_t, left to right
    bwd: LstmParams                    # produces g_t, right to left
    z_out: np.ndarray                  # (D, 2H) applied to [g_t; h_t]
    b_out: np.ndarray                  # (D,)
    config: DomainConfig

    def __post_init__(self):
        h = self.fwd.hidden_size
        if self.bwd.hidden_size != h:
            raise ContractError("forward and backward hidden sizes differ")
        if self.z_out.shape != (self.num_domains, 2 * h) or self.b_out.shape != (self.num_domains,):
            raise ContractError(f"output layer shape {self.z_out.shape} does not match "
                                f"D={self.num_domains}, H={h}")

    @property
    def hidden(self) -> int:
        return self.fwd.hidden_size

    def input_vectors(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.emb.shape[0]):
            raise ContractError("token id outside embedding table")
        x = self.emb[ids]
        if self.compress is not None:
            x = x @ self.compress.T
        return x

    def params(self) -> dict[str, np.ndarray]:
        out = {
            "emb": self.emb,
            "fwd_w_x": self.fwd.w_x, "fwd_w_h": self.fwd.w_h, "fwd_b": self.fwd.b,
            "bwd_w_x": self.bwd.w_x, "bwd_w_h": self.bwd.w_h, "bwd_b": self.bwd.b,
            "z_out": self.z_out, "b_out": self.b_out,
        }
        if self.compress is not None:
            out["compress"] = self.compress
        return out


def init_domain_model(vocab: Vocab, num_domains: int, cfg: DomainConfig) -> DomainModel:
    if num_domains < 1:
        raise ContractError("need at least one domain")
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
    return DomainModel(
        vocab=vocab, num_domains=num_domains, emb=emb, compress=compress,
        fwd=fwd, bwd=bwd,
        z_out=np.zeros((num_domains, 2 * cfg.hidden)), b_out=np.zeros(num_domains),
        config=cfg,
    )


def _bidi_states(model: DomainModel, word_ids):
    """(hs, gs, caches): h_t left-to-right, g_t right-to-left, both (T, H)."""
    inputs = model.input_vectors(word_ids)
    clip = model.config.clip
    f_hs, _, f_cache = numcore.lstm_forward(model.fwd, inputs, clip=clip)
    b_hs, _, b_cache = numcore.lstm_forward(model.bwd, inputs[::-1], clip=clip)
    gs = b_hs[::-1]
    return f_hs, gs, (f_cache, b_cache)


def classify_stepwise(model: DomainModel, word_ids) -> np.ndarray:
    """Domain distribution at every timestep of the unit, shape (T, D)."""
    if len(word_ids) == 0:
        raise ContractError("cannot classify an empty unit")
    hs, gs, _ = _bidi_states(model, word_ids)
    logits = np.concatenate([gs, hs], axis=1) @ model.z_out.T + model.b_out
    return numcore.softmax(logits)


def _unit_loss_and_grads(model: DomainModel, word_ids, label: int,
                         grads: dict[str, np.ndarray] | None) -> float:
    hs, gs, (f_cache, b_cache) = _bidi_states(model, word_ids)
    t_len = len(word_ids)
    s = np.concatenate([gs, hs], axis=1)
    logp = numcore.log_softmax(s @ model.z_out.T + model.b_out)
    loss = -logp[:, label].mean()
    if grads is None:
        return loss
    d_logits = np.exp(logp)
    d_logits[:, label] -= 1.0
    d_logits /= t_len
    grads["z_out"] += d_logits.T @ s
    grads["b_out"] += d_logits.sum(axis=0)
    d_s = d_logits @ model.z_out
    hsz = model.hidden
    d_gs = d_s[:, :hsz]
    d_hs = d_s[:, hsz:]
    f_grads, d_in_f = numcore.lstm_backward(model.fwd, f_cache, d_hs)
    b_grads, d_in_b_rev = numcore.lstm_backward(model.bwd, b_cache, d_gs[::-1])
    grads["fwd_w_x"] += f_grads.w_x
    grads["fwd_w_h"] += f_grads.w_h
    grads["fwd_b"] += f_grads.b
    grads["bwd_w_x"] += b_grads.w_x
    grads["bwd_w_h"] += b_grads.w_h
    grads["bwd_b"] += b_grads.b
    d_x = d_in_f + d_in_b_rev[::-1]
    ids = np.asarray(word_ids, dtype=np.int64)
    if model.compress is not None:
        grads["compress"] += d_x.T @ model.emb[ids]
        d_x = d_x @ model.compress
    np.add.at(grads["emb"], ids, d_x)
    return loss


def unit_loss_and_grads(model: DomainModel, word_ids, label: int):
    """Mean-over-timesteps cross-entropy for one unit plus exact gradients."""
    grads = {k: np.zeros_like(v) for k, v in model.params().items()}
    loss = _unit_loss_and_grads(model, word_ids, label, grads)
    return loss, grads


def training_units(corpus: Corpus, granularity: str) -> list[tuple[list[int], int]]:
    """(token stream, label) pairs in corpus order; unlabeled unit -> error."""
    units = []
    for p_idx, para in enumerate(corpus.paragraphs):
        if para.label is None:
            raise DataError(f"paragraph {p_idx} has no domain label")
        if granularity == "paragraph":
            units.append((para.word_ids(), para.label))
        else:
            for sent in para.sentences:
                units.append((sent.word_ids, para.label))
    return [(ids, lab) for ids, lab in units if ids]


def train_domaincls(corpus: Corpus, cfg: DomainConfig,
                    loss_log: list | None = None) -> DomainModel:
    """Per-unit Adam updates; units visited in corpus order each epoch."""
    units = training_units(corpus, cfg.granularity)
    if not units:
        raise DataError("no non-empty labeled units to train on")
    n_domains = max(lab for _, lab in units) + 1
    model = init_domain_model(corpus.vocab, n_domains, cfg)
    params = model.params()
    adam = AdamState.for_params(params, alpha=cfg.learning_rate)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    for _ in range(cfg.epochs):
        for word_ids, label in units:
            for g in grads.values():
                g.fill(0.0)
            loss = _unit_loss_and_grads(model, word_ids, label, grads)
            adam_update(params, grads, adam)
            if loss_log is not None:
                loss_log.append(loss)
    return model


def mean_loss(model: DomainModel, corpus: Corpus, granularity: str | None = None) -> float:
    granularity = granularity or model.config.granularity
    units = training_units(corpus, granularity)
    if not units:
        raise DataError("no units to evaluate")
    return float(np.mean([_unit_loss_and_grads(model, ids, lab, None)
                          for ids, lab in units]))


def predict_unit(model: DomainModel, word_ids) -> int:
    """Majority vote over per-timestep argmax domains; ties -> lower id."""
    z = classify_stepwise(model, word_ids)
    votes = np.bincount(z.argmax(axis=1), minlength=model.num_domains)
    return int(votes.argmax())


def unit_accuracy(model: DomainModel, corpus: Corpus, granularity: str | None = None) -> float:
    granularity = granularity or model.config.granularity
    units = training_units(corpus, granularity)
    if not units:
        raise DataError("no units to score")
    hits = sum(1 for ids, lab in units if predict_unit(model, ids) == lab)
    return hits / len(units)


def extract_states(model: DomainModel, corpus: Corpus, granularity: str | None = None):
    """Yield (token id, s_t) with s_t = [g_t; h_t] per occurrence."""
    granularity = granularity or model.config.granularity
    for para in corpus.paragraphs:
        streams = [para.word_ids()] if granularity == "paragraph" else \
            [s.word_ids for s in para.sentences]
        for word_ids in streams:
            if not word_ids:
                continue
            hs, gs, _ = _bidi_states(model, word_ids)
            for t, wid in enumerate(word_ids):
                yield wid, np.concatenate([gs[t], hs[t]])


def domain_embeddings(model: DomainModel, corpus: Corpus,
                      granularity: str | None = None) -> EmbeddingTable:
    if corpus.num_words() == 0:
        raise DataError("corpus has no word occurrences to embed")
    return average_states(extract_states(model, corpus, granularity), model.vocab,
                          2 * model.hidden, provenance="domaincls")


def save_domaincls(path, model: DomainModel) -> None:
    cfg = model.config
    meta = {
        "config": {
            "emb_dim": cfg.emb_dim, "hidden": cfg.hidden,
            "compress_dim": cfg.compress_dim, "granularity": cfg.granularity,
            "epochs": cfg.epochs, "learning_rate": cfg.learning_rate,
            "clip": cfg.clip, "seed": cfg.seed,
        },
        "num_domains": model.num_domains,
        "vocab": {"tokens": list(model.vocab.id_to_token),
                  "counts": list(model.vocab.counts)},
    }
    numcore.save_checkpoint(path, "domaincls", meta, model.params())


def load_domaincls(path) -> DomainModel:
    kind, meta, arrays = numcore.load_checkpoint(path)
    if kind != "domaincls":
        raise DataError(f"{path}: checkpoint kind {kind!r}, expected 'domaincls'")
    cfg = DomainConfig(**meta["config"])
    vocab = Vocab(id_to_token=meta["vocab"]["tokens"],
                  counts=list(meta["vocab"]["counts"]))
    return DomainModel(
        vocab=vocab, num_domains=meta["num_domains"],
        emb=arrays["emb"], compress=arrays.get("compress"),
        fwd=LstmParams(arrays["fwd_w_x"], arrays["fwd_w_h"], arrays["fwd_b"]),
        bwd=LstmParams(arrays["bwd_w_x"], arrays["bwd_w_h"], arrays["bwd_b"]),
        z_out=arrays["z_out"], b_out=arrays["b_out"], config=cfg,
    )
