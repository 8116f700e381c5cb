"""Corpus ingestion, token-aligned chunking, and length-based sampling.

Corpus JSONL schema (input and output): one object per line with required
keys "id" (string) and "text" (non-empty string), optional "source" (string).
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from .errors import CorpusError
from .tokenizer import Tokenizer, TokenizerSpec, WhitespaceTokenizer, load_tokenizer


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    source: str = ""
    token_count: int = 0


@dataclass(frozen=True)
class TextChunk:
    parent_id: str
    index: int
    text: str
    token_count: int


@dataclass(frozen=True)
class CorpusHandle:
    """Immutable view over an ingested document collection.

    Safe for concurrent reads; built once by a single writer.
    """

    documents: tuple[Document, ...]
    tokenizer_spec: TokenizerSpec = field(default_factory=TokenizerSpec)

    def __post_init__(self):
        by_id: dict[str, Document] = {}
        for doc in self.documents:
            if doc.id in by_id:
                raise CorpusError(f"duplicate document id: {doc.id!r}")
            by_id[doc.id] = doc
        object.__setattr__(self, "_by_id", by_id)

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self) -> Iterator[Document]:
        return iter(self.documents)

    def get(self, doc_id: str) -> Document:
        try:
            return self._by_id[doc_id]
        except KeyError:
            raise CorpusError(f"unknown document id: {doc_id!r}") from None

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._by_id

    def ids(self) -> list[str]:
        return [d.id for d in self.documents]

    def total_tokens(self) -> int:
        return sum(d.token_count for d in self.documents)


def ingest_corpus(
    path: str | Path,
    format: str = "jsonl",
    tokenizer: Tokenizer | None = None,
    tokenizer_spec: TokenizerSpec | None = None,
) -> CorpusHandle:
    """Read a JSONL corpus, computing token counts; order preserved.

    Raises CorpusError naming the line number for malformed lines and the id
    for duplicates.
    """
    if format != "jsonl":
        raise CorpusError(f"unsupported corpus format: {format!r}")
    spec = tokenizer_spec or TokenizerSpec()
    tok = tokenizer if tokenizer is not None else load_tokenizer(spec)

    docs: list[Document] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {line_no}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise CorpusError(f"line {line_no}: record is not an object")
            if "id" not in rec:
                raise CorpusError(f"line {line_no}: missing 'id'")
            if "text" not in rec:
                raise CorpusError(f"line {line_no}: missing 'text'")
            doc_id = str(rec["id"])
            text = rec["text"]
            if not isinstance(text, str) or not text:
                raise CorpusError(f"line {line_no}: 'text' must be a non-empty string")
            if doc_id in seen:
                raise CorpusError(f"duplicate document id: {doc_id!r}")
            seen.add(doc_id)
            docs.append(
                Document(
                    id=doc_id,
                    text=text,
                    source=str(rec.get("source", "")),
                    token_count=tok.count(text),
                )
            )
    return CorpusHandle(documents=tuple(docs), tokenizer_spec=spec)


def write_corpus_jsonl(corpus: CorpusHandle, path: str | Path) -> int:
    """Write documents back out in the input schema. Returns the line count."""
    with open(path, "w", encoding="utf-8") as f:
        for doc in corpus:
            rec = {"id": doc.id, "text": doc.text}
            if doc.source:
                rec["source"] = doc.source
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
    return len(corpus)


def chunk_text(
    text: str,
    max_tokens: int,
    tok: Tokenizer | None = None,
    parent_id: str = "",
) -> list[TextChunk]:
    """Greedy left-to-right chunking at token boundaries.

    Every chunk holds at most max_tokens tokens and concatenating the chunks
    in index order reproduces the input exactly (inter-chunk whitespace
    attaches to the preceding chunk).
    """
    if max_tokens < 1:
        raise ValueError(f"max_tokens must be >= 1, got {max_tokens}")
    tok = tok or WhitespaceTokenizer()
    if not text:
        return []
    spans = tok.token_spans(text)
    if not spans:
        # whitespace-only text still round-trips as a single zero-token chunk
        return [TextChunk(parent_id=parent_id, index=0, text=text, token_count=0)]

    cuts = [0]
    for i in range(max_tokens, len(spans), max_tokens):
        cuts.append(spans[i][0])
    cuts.append(len(text))

    chunks = []
    for idx in range(len(cuts) - 1):
        piece = text[cuts[idx] : cuts[idx + 1]]
        n = min(max_tokens, len(spans) - idx * max_tokens)
        chunks.append(TextChunk(parent_id=parent_id, index=idx, text=piece, token_count=n))
    return chunks


def sample_random_chunk(
    corpus: CorpusHandle,
    chunk_tokens: int = 128,
    seed: int = 0,
    tokenizer: Tokenizer | None = None,
) -> TextChunk:
    """Sample one token-budgeted chunk: uniform document, uniform chunk within it."""
    if len(corpus) == 0:
        raise CorpusError("cannot sample from an empty corpus")
    tok = tokenizer if tokenizer is not None else load_tokenizer(corpus.tokenizer_spec)
    rng = random.Random(seed)
    doc = corpus.documents[rng.randrange(len(corpus))]
    chunks = chunk_text(doc.text, chunk_tokens, tok, parent_id=doc.id)
    return chunks[rng.randrange(len(chunks))]


def downsample_short(
    corpus: CorpusHandle,
    threshold_tokens: int = 2048,
    keep_p: float = 0.05,
    seed: int = 0,
) -> CorpusHandle:
    """Keep every document at or above the threshold; keep shorter ones
    independently with probability keep_p. Deterministic under seed."""
    if not 0.0 <= keep_p <= 1.0:
        raise ValueError(f"keep_p must be in [0, 1], got {keep_p}")
    rng = random.Random(seed)
    kept = []
    for doc in corpus:
        if doc.token_count >= threshold_tokens:
            kept.append(doc)
        elif rng.random() < keep_p:
            kept.append(doc)
    return CorpusHandle(documents=tuple(kept), tokenizer_spec=corpus.tokenizer_spec)


def select_by_length(
    corpus: CorpusHandle,
    min_tokens: int = 2048,
    max_tokens: int = 32768,
) -> list[Document]:
    """Documents with min_tokens <= token_count <= max_tokens, order preserved."""
    if min_tokens > max_tokens:
        raise ValueError(f"min_tokens {min_tokens} exceeds max_tokens {max_tokens}")
    return [d for d in corpus if min_tokens <= d.token_count <= max_tokens]
