"""Word embedding tables: storage, normalization, averaging, text-format IO.

A table is a token list plus a float64 matrix with one row per token. Rows
come from any of the pretraining routes (word2vec, LM states, classifier
states) or an external file; provenance and applied normalization ride along
as metadata.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ParseError

log = logging.getLogger(__name__)

PROVENANCES = ("word2vec", "bilm", "domaincls", "external")
NORMALIZATIONS = ("none", "unit", "meanvar")


@dataclass
class EmbeddingTable:
    tokens: list[str]
    matrix: np.ndarray
    provenance: str = "external"
    normalization: str = "none"
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.tokens):
            raise ContractError(
                f"matrix shape {self.matrix.shape} does not match {len(self.tokens)} tokens"
            )
        if not np.isfinite(self.matrix).all():
            raise ContractError("embedding matrix contains non-finite values")
        if self.provenance not in PROVENANCES:
            raise ContractError(f"unknown provenance {self.provenance!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ContractError(f"unknown normalization {self.normalization!r}")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ContractError("duplicate tokens in embedding table")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def lookup(self, idx: int) -> np.ndarray:
        """Row `idx`; identical to multiplying the matrix by a one-hot."""
        if not 0 <= idx < self.matrix.shape[0]:
            raise ContractError(f"id {idx} outside [0, {self.matrix.shape[0]})")
        return self.matrix[idx]

    def lookup_token(self, token: str) -> np.ndarray | None:
        i = self.index.get(token)
        return None if i is None else self.matrix[i]


def unit_normalize(table: EmbeddingTable) -> EmbeddingTable:
    """Scale each row to unit L2 norm. Zero rows stay zero, with a warning."""
    norms = np.linalg.norm(table.matrix, axis=1)
    zero = norms == 0.0
    if zero.any():
        log.warning("unit_normalize: %d zero row(s) left as-is", int(zero.sum()))
    safe = np.where(zero, 1.0, norms)
    return EmbeddingTable(
        tokens=list(table.tokens),
        matrix=table.matrix / safe[:, None],
        provenance=table.provenance,
        normalization="unit",
    )


def mean_variance_normalize(table: EmbeddingTable, mode: str = "std") -> EmbeddingTable:
    """Center each dimension and divide by its spread across the vocabulary.

    mode "std" divides by the standard deviation (the conventional z-score);
    mode "variance" divides by the variance itself, matching the looser
    wording this recipe is sometimes stated with. Dimensions with spread
    below 1e-12 are centered but not scaled, with a warning.
    """
    if mode not in ("std", "variance"):
        raise ContractError(f"unknown mean-variance mode {mode!r}")
    if table.matrix.shape[0] < 2:
        raise ContractError("mean-variance normalization needs at least two rows")
    mean = table.matrix.mean(axis=0)
    var = table.matrix.var(axis=0)
    denom = np.sqrt(var) if mode == "std" else var
    flat = denom < 1e-12
    if flat.any():
        log.warning("mean_variance_normalize: %d constant dimension(s) not scaled",
                    int(flat.sum()))
    safe = np.where(flat, 1.0, denom)
    return EmbeddingTable(
        tokens=list(table.tokens),
        matrix=(table.matrix - mean) / safe,
        provenance=table.provenance,
        normalization="meanvar",
    )


def average_states(stream, vocab, dim: int, provenance: str) -> EmbeddingTable:
    """Collapse a per-occurrence (token id, state) stream into one row per
    vocabulary id by plain averaging, accumulated in stream order.

    Words with no occurrences get zero rows, reported in one warning.
    """
    v_size = len(vocab.id_to_token)
    sums = np.zeros((v_size, dim))
    counts = np.zeros(v_size)
    for wid, vec in stream:
        if not 0 <= wid < v_size:
            raise ContractError(f"token id {wid} outside vocabulary")
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (dim,):
            raise ContractError(f"state for id {wid} has shape {vec.shape}, expected ({dim},)")
        sums[wid] += vec
        counts[wid] += 1
    unseen = counts == 0
    if unseen.any():
        log.warning("average_states: %d word(s) never occurred, rows zeroed",
                    int(unseen.sum()))
    matrix = sums / np.where(unseen, 1.0, counts)[:, None]
    return EmbeddingTable(tokens=list(vocab.id_to_token), matrix=matrix,
                          provenance=provenance)


def save_embeddings(path, table: EmbeddingTable) -> None:
    """Write the classic text format: "V E" header, then one token per line
    followed by E space-separated %.17g values (round-trips float64 exactly).
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(table.tokens)} {table.dim}\n")
        for tok, row in zip(table.tokens, table.matrix):
            fh.write(tok + " " + " ".join("%.17g" % v for v in row) + "\n")


def load_embeddings(path, provenance: str = "external") -> EmbeddingTable:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        parts = header.split()
        if len(parts) != 2:
            raise ParseError(path, 1, f"expected 'V E' header, got {header.rstrip()!r}")
        try:
            v, e = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError(path, 1, f"non-integer header {header.rstrip()!r}") from None
        if v < 0 or e < 1:
            raise ParseError(path, 1, f"bad dimensions V={v} E={e}")
        tokens: list[str] = []
        matrix = np.empty((v, e))
        for row in range(v):
            line_no = row + 2
            line = fh.readline()
            if not line:
                raise ParseError(path, line_no, f"expected {v} rows, file ended at {row}")
            fields = line.split()
            if len(fields) != e + 1:
                raise ParseError(path, line_no,
                                 f"expected 1 token + {e} values, got {len(fields)} fields")
            tokens.append(fields[0])
            try:
                matrix[row] = [float(x) for x in fields[1:]]
            except ValueError as exc:
                raise ParseError(path, line_no, f"bad float: {exc}") from None
        extra = fh.readline()
        if extra.strip():
            raise ParseError(path, v + 2, "trailing content after declared rows")
    return EmbeddingTable(tokens=tokens, matrix=matrix, provenance=provenance)


def align_to_vocab(table: EmbeddingTable, vocab) -> np.ndarray:
    """Rearrange rows to match a Vocab's id order, (V, E).

    Vocabulary entries missing from the table get zero rows; a count of both
    mismatch directions is logged so silent vocabulary drift shows up.
    """
    out = np.zeros((len(vocab.id_to_token), table.dim))
    missing = 0
    for idx, tok in enumerate(vocab.id_to_token):
        row = table.lookup_token(tok)
        if row is None:
            missing += 1
        else:
            out[idx] = row
    unused = len(table.tokens) - (len(vocab.id_to_token) - missing)
    if missing:
        log.warning("align_to_vocab: %d vocabulary token(s) missing from table, rows zeroed",
                    missing)
    if unused > 0:
        log.warning("align_to_vocab: %d table token(s) not in vocabulary, dropped", unused)
    return out
