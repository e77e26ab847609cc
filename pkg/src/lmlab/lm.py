"""Unidirectional LSTM language model with pluggable input stages.

The input stage is either a learned embedding (baseline) or a frozen
pre-trained table, optionally followed by a learned compression layer.
Training is sentence-level with state reset, full backprop through time,
Adam, and optional early stopping on validation perplexity. The module
also owns the per-position word-rank probe and the experiment suite that
renders result tables.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import BOS_ID, EOS_ID, Corpus, Vocab
from .embed import EmbeddingTable, align_to_vocab
from .errors import ContractError, DataError
from . import numcore
from .numcore import AdamState, LstmParams, adam_update

log = logging.getLogger(__name__)

INPUT_KINDS = ("learned", "pretrained")


@dataclass
class InputSpec:
    """How the LM turns token ids into LSTM inputs.

    kind "learned": a trainable V x emb_dim embedding (the baseline).
    kind "pretrained": rows from `table`, frozen unless `trainable`;
    `compression` None defers to the provenance policy (on for classifier
    states, off for word2vec), and `compress_dim` sets the reduced size.
    """

    kind: str = "learned"
    table: EmbeddingTable | None = None
    compression: bool | None = None
    compress_dim: int | None = None
    trainable: bool = False

    def __post_init__(self):
        if self.kind not in INPUT_KINDS:
            raise ContractError(f"input kind must be one of {INPUT_KINDS}")
        if self.kind == "pretrained" and self.table is None:
            raise ContractError("pretrained input stage needs a table")

    def wants_compression(self) -> bool:
        if self.kind == "learned":
            return False
        if self.compression is not None:
            return self.compression
        return self.table.provenance == "domaincls"


@dataclass
class LmConfig:
    emb_dim: int = 256
    hidden: int = 128
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    patience: int = 2
    clip: float | None = None
    seed: int = 42

    def __post_init__(self):
        if self.emb_dim < 1 or self.hidden < 1 or self.batch_size < 1:
            raise ContractError("emb_dim, hidden and batch_size must be >= 1")
        if self.clip is not None and self.clip <= 0:
            raise ContractError("clip must be positive when set")


@dataclass
class LmModel:
    vocab: Vocab
    emb: np.ndarray                    # (V, E) learned or aligned pre-trained rows
    compress: np.ndarray | None        # (E', E) or None
    lstm: LstmParams
    w_out: np.ndarray                  # (V, H)
    b_out: np.ndarray
    config: LmConfig
    frozen: bool = False
    input_kind: str = "learned"

    def input_vectors(self, ids) -> np.ndarray:
        x = self.emb[np.asarray(ids, dtype=np.int64)]
        if self.compress is not None:
            x = x @ self.compress.T
        return x

    def trainable_params(self) -> dict[str, np.ndarray]:
        out = {
            "w_x": self.lstm.w_x, "w_h": self.lstm.w_h, "b": self.lstm.b,
            "w_out": self.w_out, "b_out": self.b_out,
        }
        if not self.frozen:
            out["emb"] = self.emb
        if self.compress is not None:
            out["compress"] = self.compress
        return out


def init_lm(vocab: Vocab, spec: InputSpec, cfg: LmConfig) -> LmModel:
    """Seeded init; pre-trained rows are aligned to the vocab id order
    (missing words become zero rows with a warning), output layer zero."""
    rng = np.random.default_rng(cfg.seed)
    v_size = len(vocab.id_to_token)
    if spec.kind == "learned":
        emb = rng.uniform(-1, 1, size=(v_size, cfg.emb_dim)) / np.sqrt(cfg.emb_dim)
        compress = None
        in_dim = cfg.emb_dim
        frozen = False
    else:
        emb = align_to_vocab(spec.table, vocab)
        e_pre = spec.table.dim
        if spec.wants_compression():
            e_prime = spec.compress_dim or cfg.emb_dim
            compress = rng.uniform(-1, 1, size=(e_prime, e_pre)) / np.sqrt(e_pre)
            in_dim = e_prime
        else:
            compress = None
            in_dim = e_pre
        frozen = not spec.trainable
    lstm = numcore.init_lstm_params(in_dim, cfg.hidden, rng)
    return LmModel(
        vocab=vocab, emb=emb, compress=compress, lstm=lstm,
        w_out=np.zeros((v_size, cfg.hidden)), b_out=np.zeros(v_size),
        config=cfg, frozen=frozen, input_kind=spec.kind,
    )


def _sentence_loss_and_grads(model: LmModel, word_ids: list[int],
                             grads: dict[str, np.ndarray] | None) -> float:
    in_ids = [BOS_ID] + word_ids
    targets = np.asarray(word_ids + [EOS_ID])
    inputs = model.input_vectors(in_ids)
    loss, g = numcore.seq_loss_and_grads(model.lstm, model.w_out, model.b_out,
                                         inputs, targets, clip=model.config.clip)
    if grads is not None:
        grads["w_x"] += g.lstm.w_x
        grads["w_h"] += g.lstm.w_h
        grads["b"] += g.lstm.b
        grads["w_out"] += g.w_out
        grads["b_out"] += g.b_out
        d_x = g.inputs
        ids = np.asarray(in_ids, dtype=np.int64)
        if model.compress is not None:
            grads["compress"] += d_x.T @ model.emb[ids]
            d_x = d_x @ model.compress
        if "emb" in grads:
            np.add.at(grads["emb"], ids, d_x)
    return loss


def batch_loss_and_grads(model: LmModel, sentences) -> tuple[float, dict[str, np.ndarray]]:
    """Sum of per-sentence token-mean losses over the batch, exact grads.

    A sentence appearing twice in the batch contributes twice, in loss and
    in gradient.
    """
    grads = {k: np.zeros_like(v) for k, v in model.trainable_params().items()}
    total = 0.0
    for word_ids in sentences:
        total += _sentence_loss_and_grads(model, word_ids, grads)
    return total, grads


def train_lm(corpus: Corpus, spec: InputSpec, cfg: LmConfig,
             valid_corpus: Corpus | None = None,
             loss_log: list | None = None) -> LmModel:
    """Adam over batches of sentences in corpus order.

    With a validation corpus, training keeps the best-perplexity epoch's
    parameters and stops once `patience` epochs pass without improvement.
    Frozen embedding rows are never touched.
    """
    if corpus.num_sentences() == 0:
        raise DataError("cannot train a language model on an empty corpus")
    model = init_lm(corpus.vocab, spec, cfg)
    params = model.trainable_params()
    adam = AdamState.for_params(params, alpha=cfg.learning_rate)
    sentences = [s.word_ids for s in corpus.sentences()]
    batches = [sentences[i:i + cfg.batch_size]
               for i in range(0, len(sentences), cfg.batch_size)]
    best_ppl = np.inf
    best_snapshot = None
    stale = 0
    for _ in range(cfg.epochs):
        for batch in batches:
            loss, grads = batch_loss_and_grads(model, batch)
            adam_update(params, grads, adam)
            if loss_log is not None:
                loss_log.append(loss / len(batch))
        if valid_corpus is not None:
            ppl = perplexity(model, valid_corpus)
            if ppl < best_ppl:
                best_ppl = ppl
                best_snapshot = {k: v.copy() for k, v in params.items()}
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    if best_snapshot is not None:
        for k, v in best_snapshot.items():
            params[k][...] = v
    return model


def token_log_probs(model: LmModel, word_ids: list[int]) -> np.ndarray:
    """ln p of each predicted position (w_1..w_T, EOS), state reset first."""
    in_ids = [BOS_ID] + word_ids
    targets = np.asarray(word_ids + [EOS_ID])
    hs, _, _ = numcore.lstm_forward(model.lstm, model.input_vectors(in_ids),
                                    clip=model.config.clip)
    _, _, _, _, target_logp = numcore.sequence_output_loss(
        model.w_out, model.b_out, hs, targets)
    return target_logp


def mean_loss(model: LmModel, corpus: Corpus) -> float:
    """Corpus-level nats per predicted token (real tokens + EOS, no BOS)."""
    total = 0.0
    count = 0
    for sent in corpus.sentences():
        logp = token_log_probs(model, sent.word_ids)
        total += -logp.sum()
        count += len(logp)
    if count == 0:
        raise DataError("no tokens to evaluate")
    return total / count


def perplexity(model: LmModel, corpus: Corpus) -> float:
    return float(np.exp(mean_loss(model, corpus)))


@dataclass
class RankResult:
    rank: int
    vocab_size: int
    target_id: int
    target_token: str
    target_prob: float
    top: list[tuple[str, float]]

    def headline(self) -> str:
        return f"position {self.rank:,} out of a vocabulary of {self.vocab_size:,}"


def rank_probe(model: LmModel, word_ids: list[int], position: int,
               top_n: int = 10) -> RankResult:
    """Rank of the true word among the model's predictions at `position`.

    `position` is a 0-based index into the sentence's real tokens. Rank 1 is
    the argmax; probability ties break toward the lower token id.
    """
    if not 0 <= position < len(word_ids):
        raise ContractError(f"position {position} outside [0, {len(word_ids)})")
    prefix = [BOS_ID] + word_ids[:position]
    hs, _, _ = numcore.lstm_forward(model.lstm, model.input_vectors(prefix),
                                    clip=model.config.clip)
    probs = numcore.softmax(hs[-1] @ model.w_out.T + model.b_out)
    target = word_ids[position]
    p_t = probs[target]
    higher = int((probs > p_t).sum())
    tied_before = int(((probs == p_t) & (np.arange(len(probs)) < target)).sum())
    rank = 1 + higher + tied_before
    order = np.lexsort((np.arange(len(probs)), -probs))
    top = [(model.vocab.id_to_token[i], float(probs[i])) for i in order[:top_n]]
    return RankResult(rank=rank, vocab_size=len(probs), target_id=target,
                      target_token=model.vocab.id_to_token[target],
                      target_prob=float(p_t), top=top)


def save_lm(path, model: LmModel) -> None:
    cfg = model.config
    meta = {
        "config": {
            "emb_dim": cfg.emb_dim, "hidden": cfg.hidden, "epochs": cfg.epochs,
            "batch_size": cfg.batch_size, "learning_rate": cfg.learning_rate,
            "patience": cfg.patience, "clip": cfg.clip, "seed": cfg.seed,
        },
        "frozen": model.frozen,
        "input_kind": model.input_kind,
        "vocab": {"tokens": list(model.vocab.id_to_token),
                  "counts": list(model.vocab.counts)},
    }
    arrays = {"emb": model.emb, "w_x": model.lstm.w_x, "w_h": model.lstm.w_h,
              "b": model.lstm.b, "w_out": model.w_out, "b_out": model.b_out}
    if model.compress is not None:
        arrays["compress"] = model.compress
    numcore.save_checkpoint(path, "lm", meta, arrays)


def load_lm(path) -> LmModel:
    kind, meta, arrays = numcore.load_checkpoint(path)
    if kind != "lm":
        raise DataError(f"{path}: checkpoint kind {kind!r}, expected 'lm'")
    cfg = LmConfig(**meta["config"])
    vocab = Vocab(id_to_token=meta["vocab"]["tokens"],
                  counts=list(meta["vocab"]["counts"]))
    return LmModel(
        vocab=vocab, emb=arrays["emb"], compress=arrays.get("compress"),
        lstm=LstmParams(arrays["w_x"], arrays["w_h"], arrays["b"]),
        w_out=arrays["w_out"], b_out=arrays["b_out"], config=cfg,
        frozen=meta["frozen"], input_kind=meta["input_kind"],
    )


# ---------------------------------------------------------------------------
# Experiment suite: one LM per manifest row over a shared corpus split,
# reported as machine-readable JSON plus an aligned text table.
# ---------------------------------------------------------------------------

@dataclass
class ReportRow:
    name: str
    dataset: str
    data_kind: str
    objective: str
    normalization: str
    compression: bool
    ppl_valid: float | None = None
    ppl_test: float | None = None
    rel_valid: float | None = None
    rel_test: float | None = None
    probe: str | None = None
    error: str | None = None


@dataclass
class EvalReport:
    rows: list[ReportRow]
    seed: int
    lm_config: dict
    notes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "lm_config": self.lm_config,
            "notes": self.notes,
            "rows": [vars(r).copy() for r in self.rows],
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        payload = json.loads(text)
        rows = [ReportRow(**r) for r in payload["rows"]]
        return cls(rows=rows, seed=payload["seed"], lm_config=payload["lm_config"],
                   notes=payload["notes"])

    def to_text(self) -> str:
        headers = ["Embeddings", "Dataset", "Type of data", "Training objective",
                   "Valid PPL", "Test PPL", "Rel. change"]
        lines = []
        for r in self.rows:
            if r.error is not None:
                lines.append([r.name, r.dataset, r.data_kind, r.objective,
                              "FAILED", "FAILED", r.error])
                continue
            lines.append([
                r.name, r.dataset, r.data_kind, r.objective,
                "-" if r.ppl_valid is None else f"{r.ppl_valid:.2f}",
                "-" if r.ppl_test is None else f"{r.ppl_test:.2f}",
                "-" if r.rel_test is None else f"{100.0 * r.rel_test:+.1f}%",
            ])
        widths = [max(len(h), *(len(row[i]) for row in lines)) if lines else len(h)
                  for i, h in enumerate(headers)]
        def fmt(cells):
            return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
        out = [fmt(headers), fmt(["-" * w for w in widths])]
        out.extend(fmt(row) for row in lines)
        probe_lines = [f"  {r.name}: {r.probe}" for r in self.rows if r.probe]
        if probe_lines:
            out.append("")
            out.append("Rank probe:")
            out.extend(probe_lines)
        return "\n".join(out) + "\n"


def _load_table_for_row(row: dict) -> EmbeddingTable:
    from .embed import load_embeddings, mean_variance_normalize, unit_normalize

    table = load_embeddings(row["embeddings"], provenance=row.get("provenance", "external"))
    norm = row.get("normalization", "none")
    if norm == "unit":
        table = unit_normalize(table)
    elif norm == "meanvar":
        table = mean_variance_normalize(table, mode=row.get("meanvar_mode", "std"))
    elif norm != "none":
        raise DataError(f"row {row.get('name')}: unknown normalization {norm!r}")
    return table


def run_experiment_suite(manifest: dict, progress=None) -> EvalReport:
    """Train one LM per manifest row on a shared split and report PPLs.

    The manifest names corpora by path, a vocabulary budget, LM config
    overrides, and rows: `{"name": "baseline"}` or a pre-trained embedding
    file with normalization/compression options. Row failures are recorded
    in place; the suite keeps going.
    """
    from .corpus import build_vocab, encode, read_text, tokenize

    seed = int(manifest.get("seed", 42))
    lm_kwargs = dict(manifest.get("lm", {}))
    lm_kwargs["seed"] = seed
    cfg = LmConfig(**lm_kwargs)
    train_text = read_text(manifest["train"])
    vocab = build_vocab(tokenize(train_text), int(manifest.get("vocab_size", 10000)))
    train = encode(train_text, vocab)
    valid = encode(read_text(manifest["valid"]), vocab) if manifest.get("valid") else None
    test = encode(read_text(manifest["test"]), vocab) if manifest.get("test") else None
    probe_spec = manifest.get("probe")

    report = EvalReport(rows=[], seed=seed,
                        lm_config={k: getattr(cfg, k) for k in (
                            "emb_dim", "hidden", "epochs", "batch_size",
                            "learning_rate", "patience", "clip", "seed")},
                        notes={"train": str(manifest["train"]),
                               "valid": str(manifest.get("valid") or ""),
                               "test": str(manifest.get("test") or ""),
                               "vocab_size": len(vocab.id_to_token)})
    base_valid = None
    base_test = None
    for row_spec in manifest["rows"]:
        name = row_spec.get("name", "unnamed")
        row = ReportRow(
            name=name,
            dataset=str(row_spec.get("dataset", "-")),
            data_kind=str(row_spec.get("data_kind", "sentences")),
            objective=str(row_spec.get("objective",
                                       "none (learned)" if "embeddings" not in row_spec
                                       else "external")),
            normalization=str(row_spec.get("normalization", "none")),
            compression=False,
        )
        try:
            if "embeddings" in row_spec:
                table = _load_table_for_row(row_spec)
                spec = InputSpec(kind="pretrained", table=table,
                                 compression=row_spec.get("compression"),
                                 compress_dim=row_spec.get("compress_dim"),
                                 trainable=bool(row_spec.get("trainable", False)))
                row.compression = spec.wants_compression()
            else:
                spec = InputSpec(kind="learned")
            if progress is not None:
                progress(f"training row '{name}'")
            model = train_lm(train, spec, cfg, valid_corpus=valid)
            if valid is not None:
                row.ppl_valid = perplexity(model, valid)
            if test is not None:
                row.ppl_test = perplexity(model, test)
            if "embeddings" not in row_spec:
                base_valid = row.ppl_valid
                base_test = row.ppl_test
            else:
                if base_valid and row.ppl_valid is not None:
                    row.rel_valid = (base_valid - row.ppl_valid) / base_valid
                if base_test and row.ppl_test is not None:
                    row.rel_test = (base_test - row.ppl_test) / base_test
            if probe_spec is not None:
                probe_ids = [vocab.id_of(t) for t in tokenize(probe_spec["text"])]
                res = rank_probe(model, probe_ids, int(probe_spec["position"]))
                row.probe = res.headline()
        except Exception as exc:
            row.error = f"{type(exc).__name__}: {exc}"
            log.warning("suite row '%s' failed: %s", name, row.error)
        report.rows.append(row)
    return report
