"""Text ingestion: tokenization, vocabulary construction, integer encoding.

Raw text is lowercased and split into word and punctuation tokens; blank
lines separate paragraphs and `.`, `!`, `?` end sentences. Every encoded
sentence is framed as BOS, w_1 .. w_T, EOS so that sentence-level state
reset has an explicit anchor token. Out-of-vocabulary tokens map to UNK.

Labeled corpora use one paragraph per line, prefixed ``__label__<id>\\t``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import ContractError, DataError, ParseError

UNK_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_TOKEN = "<unk>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
RESERVED_TOKENS = (UNK_TOKEN, BOS_TOKEN, EOS_TOKEN)
SPECIAL_IDS = frozenset({UNK_ID, BOS_ID, EOS_ID})

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_SENTENCE_ENDERS = frozenset({".", "!", "?"})
_LABEL_RE = re.compile(r"^__label__(\d+)\t")


def tokenize(text: str) -> list[str]:
    """Lowercased word/punctuation tokens of `text`, in order.

    Maximal alphanumeric runs are word tokens; each other non-space
    character is its own token, so "Hello, world." yields
    ["hello", ",", "world", "."]. Empty input yields [].
    """
    return _TOKEN_RE.findall(text.lower())


def split_sentences(tokens: list[str]) -> list[list[str]]:
    """Split a token stream into sentences ending at `.`, `!` or `?`.

    The terminator belongs to its sentence; trailing tokens without a
    terminator form a final sentence. Empty sentences are dropped.
    """
    sentences = []
    current: list[str] = []
    for tok in tokens:
        current.append(tok)
        if tok in _SENTENCE_ENDERS:
            sentences.append(current)
            current = []
    if current:
        sentences.append(current)
    return sentences


def split_paragraph_blocks(text: str) -> list[str]:
    """Split raw text into paragraph blocks at blank lines."""
    blocks = re.split(r"\n\s*\n", text)
    return [b for b in (block.strip() for block in blocks) if b]


@dataclass
class Vocab:
    """Token <-> id bijection with reserved UNK/BOS/EOS at ids 0..2.

    `counts[i]` is the occurrence count of token i in the stream the
    vocabulary was built from; `counts[UNK_ID]` counts the occurrences
    that fell below the frequency cutoff and were replaced.
    """

    id_to_token: list[str]
    counts: list[int]
    token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.id_to_token[:3] != list(RESERVED_TOKENS):
            raise ContractError("vocab must start with reserved UNK/BOS/EOS tokens")
        if len(self.counts) != len(self.id_to_token):
            raise ContractError("counts length must equal vocabulary size")
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ContractError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)


@dataclass
class Sentence:
    """Token ids framed as BOS, w_1..w_T, EOS."""

    ids: list[int]

    def __post_init__(self):
        if len(self.ids) < 2 or self.ids[0] != BOS_ID or self.ids[-1] != EOS_ID:
            raise ContractError("sentence must be framed as BOS .. EOS")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def word_ids(self) -> list[int]:
        """Real tokens, framing excluded."""
        return self.ids[1:-1]


@dataclass
class Paragraph:
    sentences: list[Sentence]
    label: int | None = None

    def __post_init__(self):
        if not self.sentences:
            raise ContractError("paragraph must contain at least one sentence")

    def word_ids(self) -> list[int]:
        """All real tokens of the paragraph as one stream."""
        out: list[int] = []
        for s in self.sentences:
            out.extend(s.word_ids)
        return out


@dataclass
class Corpus:
    paragraphs: list[Paragraph]
    vocab: Vocab

    def sentences(self):
        for p in self.paragraphs:
            yield from p.sentences

    def num_sentences(self) -> int:
        return sum(len(p.sentences) for p in self.paragraphs)

    def num_words(self) -> int:
        """Real token occurrences (framing excluded)."""
        return sum(len(s) - 2 for s in self.sentences())


def build_vocab(tokens, max_size: int, min_count: int = 1) -> Vocab:
    """Keep the (max_size - 3) most frequent tokens with count >= min_count.

    Frequency ties break lexicographically ascending so builds are
    reproducible. Reserved ids 0..2 are prepended; the UNK count records
    how many occurrences the cutoff dropped.
    """
    if max_size < 3:
        raise ContractError("max_size must be >= 3 to fit reserved tokens")
    freq: dict[str, int] = {}
    total = 0
    for tok in tokens:
        freq[tok] = freq.get(tok, 0) + 1
        total += 1
    eligible = sorted(
        (tok for tok, c in freq.items() if c >= min_count),
        key=lambda tok: (-freq[tok], tok),
    )
    kept = eligible[: max_size - 3]
    kept_occurrences = sum(freq[tok] for tok in kept)
    id_to_token = list(RESERVED_TOKENS) + kept
    counts = [total - kept_occurrences, 0, 0] + [freq[tok] for tok in kept]
    return Vocab(id_to_token=id_to_token, counts=counts)


def _encode_sentence(tokens: list[str], vocab: Vocab) -> Sentence:
    return Sentence([BOS_ID] + [vocab.id_of(t) for t in tokens] + [EOS_ID])


def _encode_block(block: str, vocab: Vocab, label: int | None) -> Paragraph | None:
    sentence_tokens = split_sentences(tokenize(block))
    if not sentence_tokens:
        return None
    return Paragraph([_encode_sentence(toks, vocab) for toks in sentence_tokens], label=label)


def encode(corpus_text: str, vocab: Vocab) -> Corpus:
    """Encode plain text (blank-line paragraph blocks) against `vocab`.

    OOV tokens become UNK; empty paragraphs are dropped; labels absent.
    """
    paragraphs = []
    for block in split_paragraph_blocks(corpus_text):
        para = _encode_block(block, vocab, label=None)
        if para is not None:
            paragraphs.append(para)
    return Corpus(paragraphs=paragraphs, vocab=vocab)


def encode_labeled(corpus_text: str, vocab: Vocab, num_domains: int | None = None) -> Corpus:
    """Encode a labeled corpus: one `__label__<id>\\t<paragraph>` line each.

    Blank lines are skipped. A line without the label prefix is a data
    error, as is a label >= num_domains when a domain count is given.
    """
    paragraphs = []
    for line_no, line in enumerate(corpus_text.split("\n"), start=1):
        if not line.strip():
            continue
        m = _LABEL_RE.match(line)
        if m is None:
            raise DataError(f"line {line_no}: expected '__label__<id>\\t' prefix")
        label = int(m.group(1))
        if num_domains is not None and label >= num_domains:
            raise DataError(f"line {line_no}: label {label} out of range (D={num_domains})")
        para = _encode_block(line[m.end():], vocab, label=label)
        if para is not None:
            paragraphs.append(para)
    return Corpus(paragraphs=paragraphs, vocab=vocab)


def decode_sentence(sentence: Sentence, vocab: Vocab) -> list[str]:
    """Tokens for a sentence's real ids (framing stripped)."""
    return [vocab.id_to_token[i] for i in sentence.word_ids]


def num_domains(corpus: Corpus) -> int:
    """1 + highest label present (0 for unlabeled corpora)."""
    labels = [p.label for p in corpus.paragraphs if p.label is not None]
    return max(labels) + 1 if labels else 0


def save_vocab(path, vocab: Vocab) -> None:
    """One `token<TAB>count` line per id, reserved tokens first."""
    with open(path, "w", encoding="utf-8") as fh:
        for tok, cnt in zip(vocab.id_to_token, vocab.counts):
            fh.write(f"{tok}\t{cnt}\n")


def load_vocab(path) -> Vocab:
    tokens: list[str] = []
    counts: list[int] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(path, line_no, f"expected 'token<TAB>count', got {line!r}")
            try:
                counts.append(int(parts[1]))
            except ValueError:
                raise ParseError(path, line_no, f"bad count {parts[1]!r}") from None
            tokens.append(parts[0])
    try:
        return Vocab(id_to_token=tokens, counts=counts)
    except ContractError as exc:
        raise ParseError(path, 1, str(exc)) from None


def read_text(path) -> str:
    """Read a UTF-8 text file, mapping I/O and encoding failures to DataError."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.read()
    except FileNotFoundError:
        raise DataError(f"corpus file not found: {path}") from None
    except UnicodeDecodeError as exc:
        raise DataError(f"{path} is not valid UTF-8: {exc}") from None
