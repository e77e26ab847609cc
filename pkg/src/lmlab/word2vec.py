"""CBOW and skip-gram embedding training with negative sampling.

Plain SGD with a linearly decayed learning rate, exact gradients of the
negative-sampling objective, single-threaded, sentence order fixed by the
corpus. The framing and OOV tokens never train; their rows keep the seeded
initialization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, SPECIAL_IDS
from .embed import EmbeddingTable
from .errors import ContractError, DataError

log = logging.getLogger(__name__)

MODES = ("cbow", "skipgram")


@dataclass
class W2vConfig:
    dim: int = 256
    window: int = 5
    negatives: int = 5
    mode: str = "cbow"
    epochs: int = 5
    learning_rate: float = 0.025
    min_count: int = 1
    exponent: float = 0.75
    subsample: float = 0.0
    seed: int = 42

    def __post_init__(self):
        if self.dim < 1 or self.window < 1 or self.negatives < 1:
            raise ContractError("dim, window and negatives must all be >= 1")
        if not 0.0 < self.exponent <= 1.0:
            raise ContractError(f"exponent {self.exponent} outside (0, 1]")
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 0 or self.learning_rate <= 0.0:
            raise ContractError("epochs must be >= 0 and learning_rate positive")


class UnigramTable:
    """Cumulative-probability sampler over ids weighted by count^exponent."""

    def __init__(self, ids, counts, exponent: float = 0.75):
        self.ids = np.asarray(ids, dtype=np.int64)
        counts = np.asarray(counts, dtype=np.float64)
        if self.ids.size == 0:
            raise ContractError("unigram table needs at least one id")
        if counts.shape != self.ids.shape or (counts <= 0).any():
            raise ContractError("counts must be positive and align with ids")
        weights = counts ** exponent
        self.probs = weights / weights.sum()
        self.cdf = np.cumsum(self.probs)
        self.cdf[-1] = 1.0


def negative_sample(table: UnigramTable, rng) -> int:
    """Draw one id with probability count^exponent / sum."""
    return int(table.ids[np.searchsorted(table.cdf, rng.random(), side="right")])


def _ns_forward_backward(v, w_out, pos_row, neg_rows):
    """Negative-sampling loss and gradients for one predictor vector v.

    Returns (loss, d_v, [(row, d_row), ...]); rows equal to the positive
    are dropped from neg_rows by the caller.
    """
    loss = 0.0
    d_v = np.zeros_like(v)
    row_grads = []
    for row, label in [(pos_row, 1.0)] + [(r, 0.0) for r in neg_rows]:
        u = w_out[row]
        s = u @ v
        p = 1.0 / (1.0 + np.exp(-s)) if s >= 0 else np.exp(s) / (1.0 + np.exp(s))
        if label == 1.0:
            loss -= np.log(max(p, 1e-300))
        else:
            loss -= np.log(max(1.0 - p, 1e-300))
        coef = p - label
        d_v += coef * u
        row_grads.append((row, coef * v))
    return loss, d_v, row_grads


def ns_loss_and_grads(v, u_pos, u_negs):
    """Standalone objective for one (predictor, positive, negatives) triple.

    Returns (loss, d_v, d_u_pos, d_u_negs) with exact gradients; used by the
    finite-difference harness.
    """
    v = np.asarray(v, dtype=np.float64)
    u_pos = np.asarray(u_pos, dtype=np.float64)
    u_negs = np.asarray(u_negs, dtype=np.float64)
    w_out = np.vstack([u_pos[None, :], u_negs])
    loss, d_v, row_grads = _ns_forward_backward(v, w_out, 0, list(range(1, w_out.shape[0])))
    d_u = np.zeros_like(w_out)
    for row, g in row_grads:
        d_u[row] += g
    return loss, d_v, d_u[0], d_u[1:]


def _draw_negatives(table: UnigramTable, rng, k: int, forbidden: int) -> list[int]:
    # draws equal to the positive target are discarded, not replaced
    out = []
    for _ in range(k):
        nid = negative_sample(table, rng)
        if nid != forbidden:
            out.append(nid)
    return out


def train_word2vec(corpus: Corpus, cfg: W2vConfig,
                   loss_log: list | None = None) -> EmbeddingTable:
    """Train input-side embeddings over the corpus, one row per vocab id.

    Visits sentences in corpus order each epoch; the window half-width is
    drawn uniformly from [1, window] per center word. loss_log, if given,
    collects one objective value per center visit.
    """
    vocab = corpus.vocab
    v_size = len(vocab.id_to_token)
    if corpus.num_sentences() == 0:
        raise DataError("cannot train word2vec on an empty corpus")
    rng = np.random.default_rng(cfg.seed)
    w_in = rng.uniform(-0.5 / cfg.dim, 0.5 / cfg.dim, size=(v_size, cfg.dim))
    w_out = np.zeros((v_size, cfg.dim))

    trainable = np.zeros(v_size, dtype=bool)
    for wid in range(v_size):
        if wid not in SPECIAL_IDS and vocab.counts[wid] >= cfg.min_count:
            trainable[wid] = True
    sentences = [[wid for wid in s.word_ids if trainable[wid]] for s in corpus.sentences()]
    total_centers = sum(len(s) for s in sentences)
    if total_centers == 0:
        raise DataError("corpus has no trainable tokens (all OOV or below min_count)")

    table_ids = np.flatnonzero(trainable)
    unigram = UnigramTable(table_ids, [vocab.counts[i] for i in table_ids], cfg.exponent)
    total_count = sum(vocab.counts[i] for i in table_ids)

    lr0 = cfg.learning_rate
    lr_floor = lr0 * 1e-4
    schedule_len = max(cfg.epochs * total_centers, 1)
    seen = 0
    for _ in range(cfg.epochs):
        for sent in sentences:
            if cfg.subsample > 0.0:
                kept = []
                for wid in sent:
                    freq = vocab.counts[wid] / total_count
                    p_keep = min(1.0, np.sqrt(cfg.subsample / freq))
                    if rng.random() < p_keep:
                        kept.append(wid)
                sent = kept
            n = len(sent)
            for t in range(n):
                lr = max(lr0 * (1.0 - seen / schedule_len), lr_floor)
                seen += 1
                center = sent[t]
                b = int(rng.integers(1, cfg.window + 1))
                ctx = [sent[j] for j in range(max(0, t - b), min(n, t + b + 1)) if j != t]
                if not ctx:
                    continue
                if cfg.mode == "cbow":
                    v = w_in[ctx].mean(axis=0)
                    negs = _draw_negatives(unigram, rng, cfg.negatives, center)
                    loss, d_v, row_grads = _ns_forward_backward(v, w_out, center, negs)
                    for row, g in row_grads:
                        w_out[row] -= lr * g
                    for cid in ctx:
                        w_in[cid] -= lr * d_v / len(ctx)
                    if loss_log is not None:
                        loss_log.append(loss)
                else:
                    pair_losses = 0.0
                    for target in ctx:
                        negs = _draw_negatives(unigram, rng, cfg.negatives, target)
                        loss, d_v, row_grads = _ns_forward_backward(
                            w_in[center], w_out, target, negs)
                        for row, g in row_grads:
                            w_out[row] -= lr * g
                        w_in[center] -= lr * d_v
                        pair_losses += loss
                    if loss_log is not None:
                        loss_log.append(pair_losses / len(ctx))
    norms = np.linalg.norm(w_in, axis=1)
    if not np.isfinite(norms).all() or norms.max() >= 1e3:
        log.warning("word2vec: embedding norms reached %.3g, training may have diverged",
                    float(norms.max()))
    return EmbeddingTable(tokens=list(vocab.id_to_token), matrix=w_in, provenance="word2vec")
