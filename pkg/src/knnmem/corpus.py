"""Dataset ingestion: CSV loading, tokenization, vocabularies, splits, subsampling.

Datasets arrive as CSV files with 2 or 3 quoted fields per line:
a 1-based class index, a title, and an optional description. Inside a
field the two-character sequences ``\\n`` and ``\\"`` stand for a newline
and a double quote.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class CorpusError(ValueError):
    """Malformed dataset file or infeasible split/subsample request."""


@dataclass(frozen=True)
class Document:
    """One labeled text instance."""

    id: int
    label: int
    title: str
    body: str
    tokens: tuple[str, ...]

    @property
    def text(self) -> str:
        return f"{self.title} {self.body}" if self.body else self.title


@dataclass(frozen=True)
class LabelSpace:
    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) < 2:
            raise CorpusError("label space needs at least 2 classes")
        if len(set(self.names)) != len(self.names):
            raise CorpusError("class names must be distinct")

    @property
    def c(self) -> int:
        return len(self.names)

    @staticmethod
    def of_size(c: int) -> "LabelSpace":
        return LabelSpace(tuple(f"class_{i}" for i in range(c)))


@dataclass(frozen=True)
class SplitSpec:
    dev_per_class: int = 500
    seed: int = 0


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip non-alphanumeric edges per token."""
    tokens = []
    for raw in text.lower().split():
        start, end = 0, len(raw)
        while start < end and not (raw[start].isalpha() or raw[start].isdigit()):
            start += 1
        while end > start and not (raw[end - 1].isalpha() or raw[end - 1].isdigit()):
            end -= 1
        if end > start:
            tokens.append(raw[start:end])
    return tokens


def _decode_escapes(text: str) -> str:
    out = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch == "\\" and i + 1 < n:
            nxt = text[i + 1]
            if nxt == "n":
                out.append("\n")
                i += 2
                continue
            if nxt == '"':
                out.append('"')
                i += 2
                continue
        out.append(ch)
        i += 1
    return "".join(out)


def _parse_record(line: str, lineno: int) -> list[str]:
    """Split one quoted CSV record; escaped quotes stay raw for later decoding."""
    fields: list[str] = []
    i, n = 0, len(line)
    while True:
        if i >= n or line[i] != '"':
            raise CorpusError(f"line {lineno}: expected opening quote for field {len(fields) + 1}")
        i += 1
        buf = []
        closed = False
        while i < n:
            ch = line[i]
            if ch == "\\" and i + 1 < n:
                buf.append(ch)
                buf.append(line[i + 1])
                i += 2
                continue
            if ch == '"':
                closed = True
                i += 1
                break
            buf.append(ch)
            i += 1
        if not closed:
            raise CorpusError(f"line {lineno}: unterminated quoted field")
        fields.append("".join(buf))
        if i == n:
            return fields
        if line[i] != ",":
            raise CorpusError(f"line {lineno}: expected comma after field {len(fields)}")
        i += 1


def load_dataset(path: str | Path, label_space: LabelSpace) -> list[Document]:
    """Load a quoted-CSV dataset; labels in files are 1-based, internally 0-based."""
    path = Path(path)
    docs: list[Document] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = _parse_record(line, lineno)
            if len(fields) not in (2, 3):
                raise CorpusError(f"line {lineno}: expected 2 or 3 fields, found {len(fields)}")
            try:
                raw_label = int(fields[0])
            except ValueError:
                raise CorpusError(f"line {lineno}: class index {fields[0]!r} is not an integer") from None
            if not 1 <= raw_label <= label_space.c:
                raise CorpusError(
                    f"line {lineno}: class index {raw_label} out of range 1..{label_space.c}"
                )
            title = _decode_escapes(fields[1])
            body = _decode_escapes(fields[2]) if len(fields) == 3 else ""
            tokens = tokenize(f"{title} {body}")
            if not tokens:
                raise CorpusError(f"line {lineno}: document has no tokens after tokenization")
            docs.append(
                Document(id=len(docs), label=raw_label - 1, title=title, body=body, tokens=tuple(tokens))
            )
    if not docs:
        raise CorpusError(f"{path}: empty dataset")
    return docs


@dataclass
class Vocabulary:
    """Token and character id maps; id 0 is reserved for OOV/unknown in both."""

    word_to_id: dict[str, int] = field(default_factory=dict)
    char_to_id: dict[str, int] = field(default_factory=dict)

    OOV_ID = 0

    def word_id(self, token: str) -> int:
        return self.word_to_id.get(token, self.OOV_ID)

    def char_id(self, ch: str) -> int:
        return self.char_to_id.get(ch, self.OOV_ID)

    @property
    def n_words(self) -> int:
        return len(self.word_to_id) + 1

    @property
    def n_chars(self) -> int:
        return len(self.char_to_id) + 1

    def word_hash(self) -> str:
        blob = "\n".join(f"{t}\t{i}" for t, i in self.word_to_id.items())
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def char_hash(self) -> str:
        blob = "\n".join(f"{c}\t{i}" for c, i in self.char_to_id.items())
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def build_vocab(train: Sequence[Document], min_count: int = 1) -> Vocabulary:
    """Vocabulary from the training split only; rare tokens collapse to OOV id 0."""
    if not train:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    chars: set[str] = set()
    for doc in train:
        counts.update(doc.tokens)
        for tok in doc.tokens:
            chars.update(tok)
    vocab = Vocabulary()
    kept = sorted((t for t, n in counts.items() if n >= min_count), key=lambda t: (-counts[t], t))
    for i, tok in enumerate(kept, start=1):
        vocab.word_to_id[tok] = i
    for i, ch in enumerate(sorted(chars), start=1):
        vocab.char_to_id[ch] = i
    return vocab


def _group_by_label(corpus: Sequence[Document]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for pos, doc in enumerate(corpus):
        groups.setdefault(doc.label, []).append(pos)
    return groups


def split_dev(corpus: Sequence[Document], spec: SplitSpec) -> tuple[list[Document], list[Document]]:
    """Hold out ``dev_per_class`` instances per class by seeded shuffle."""
    groups = _group_by_label(corpus)
    rng = np.random.default_rng(spec.seed)
    dev_positions: set[int] = set()
    for label in sorted(groups):
        positions = groups[label]
        if len(positions) < spec.dev_per_class:
            raise CorpusError(
                f"class {label} has {len(positions)} instances, need {spec.dev_per_class} for the dev split"
            )
        perm = rng.permutation(len(positions))
        dev_positions.update(positions[i] for i in perm[: spec.dev_per_class])
    dev = [doc for pos, doc in enumerate(corpus) if pos in dev_positions]
    train = [doc for pos, doc in enumerate(corpus) if pos not in dev_positions]
    return train, dev


@dataclass(frozen=True)
class LowResource:
    fraction: float


@dataclass(frozen=True)
class Unbalanced:
    per_class_counts: tuple[int, ...]


def subsample(corpus: Sequence[Document], mode: LowResource | Unbalanced, seed: int) -> list[Document]:
    """Seeded per-class subsample; exact counts (unbalanced) or floor(fraction*n)."""
    groups = _group_by_label(corpus)
    wanted: dict[int, int] = {}
    if isinstance(mode, LowResource):
        if not 0.0 <= mode.fraction <= 1.0:
            raise CorpusError(f"low-resource fraction {mode.fraction} outside [0, 1]")
        for label, positions in groups.items():
            wanted[label] = int(mode.fraction * len(positions))
    elif isinstance(mode, Unbalanced):
        for label, positions in groups.items():
            if label >= len(mode.per_class_counts):
                raise CorpusError(f"no requested count for class {label}")
            count = mode.per_class_counts[label]
            if count > len(positions):
                raise CorpusError(
                    f"class {label} has {len(positions)} instances, cannot sample {count}"
                )
            wanted[label] = count
    else:
        raise CorpusError(f"unknown subsample mode {mode!r}")
    keep: set[int] = set()
    for label in sorted(groups):
        positions = groups[label]
        rng = np.random.default_rng([seed, label])
        perm = rng.permutation(len(positions))
        keep.update(positions[i] for i in perm[: wanted[label]])
    return [doc for pos, doc in enumerate(corpus) if pos in keep]


def save_corpus_cache(path: str | Path, corpus: Iterable[Document]) -> None:
    """One record per line: ``id<TAB>label<TAB>token token ...``, UTF-8."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for doc in corpus:
            fh.write(f"{doc.id}\t{doc.label}\t{' '.join(doc.tokens)}\n")


def load_corpus_cache(path: str | Path, label_space: LabelSpace | None = None) -> list[Document]:
    docs = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise CorpusError(f"line {lineno}: expected 3 tab-separated fields")
            doc_id, label, toks = int(parts[0]), int(parts[1]), parts[2].split(" ")
            toks = [t for t in toks if t]
            if not toks:
                raise CorpusError(f"line {lineno}: cached document has no tokens")
            if label_space is not None and not 0 <= label < label_space.c:
                raise CorpusError(f"line {lineno}: label {label} out of range for c={label_space.c}")
            docs.append(Document(id=doc_id, label=label, title=" ".join(toks), body="", tokens=tuple(toks)))
    if not docs:
        raise CorpusError(f"{path}: empty corpus cache")
    seen = set()
    for doc in docs:
        if doc.id in seen:
            raise CorpusError(f"duplicate document id {doc.id} in cache")
        seen.add(doc.id)
    return docs
