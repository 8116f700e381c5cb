"""Deterministic tokenizers used for every token budget in the pipeline.

Two kinds are supported:

* ``whitespace-reference`` -- tokens are maximal non-whitespace runs. This is
  the dependency-free default; counts are exactly additive across whitespace
  joins.
* ``external-vocab`` -- greedy longest-match segmentation against a vocabulary
  file (JSON list or {token: id} mapping), with single-character fallback so
  every character belongs to exactly one token.

Both kinds expose token *spans* (character offsets), which is what makes
token-aligned chunking reconstruct the input byte-for-byte.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

_TOKEN_RE = re.compile(r"\S+")

WHITESPACE_KIND = "whitespace-reference"
EXTERNAL_KIND = "external-vocab"


@dataclass(frozen=True)
class TokenizerSpec:
    """Serializable description of the active tokenizer."""

    kind: str = WHITESPACE_KIND
    parameters: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "parameters": dict(self.parameters)}

    @classmethod
    def from_dict(cls, d: dict) -> "TokenizerSpec":
        return cls(kind=d.get("kind", WHITESPACE_KIND), parameters=dict(d.get("parameters", {})))


class WhitespaceTokenizer:
    """Reference tokenizer: one token per maximal non-whitespace run."""

    kind = WHITESPACE_KIND

    def token_spans(self, text: str) -> list[tuple[int, int]]:
        return [m.span() for m in _TOKEN_RE.finditer(text)]

    def count(self, text: str) -> int:
        # len(split()) avoids materializing spans for pure counting
        return len(text.split())


class ExternalVocabTokenizer:
    """Greedy longest-match against a fixed vocabulary.

    Unknown characters fall back to single-character tokens, so the spans
    always tile the input exactly.
    """

    kind = EXTERNAL_KIND

    def __init__(self, vocab: list[str]):
        if not vocab:
            raise ConfigError("external vocabulary is empty")
        self._max_len = max(len(t) for t in vocab)
        self._vocab = set(vocab)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExternalVocabTokenizer":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        if isinstance(raw, dict):
            tokens = list(raw.keys())
        elif isinstance(raw, list):
            tokens = [str(t) for t in raw]
        else:
            raise ConfigError(f"unsupported vocabulary format in {path}")
        return cls(tokens)

    def token_spans(self, text: str) -> list[tuple[int, int]]:
        spans: list[tuple[int, int]] = []
        i, n = 0, len(text)
        while i < n:
            end = min(n, i + self._max_len)
            match_end = i + 1  # single-char fallback
            for j in range(end, i, -1):
                if text[i:j] in self._vocab:
                    match_end = j
                    break
            spans.append((i, match_end))
            i = match_end
        return spans

    def count(self, text: str) -> int:
        return len(self.token_spans(text))


Tokenizer = WhitespaceTokenizer | ExternalVocabTokenizer


def load_tokenizer(spec: TokenizerSpec) -> Tokenizer:
    if spec.kind == WHITESPACE_KIND:
        return WhitespaceTokenizer()
    if spec.kind == EXTERNAL_KIND:
        vocab_path = spec.parameters.get("vocab_path")
        if not vocab_path:
            raise ConfigError("external-vocab tokenizer needs parameters.vocab_path")
        return ExternalVocabTokenizer.from_file(vocab_path)
    raise ConfigError(f"unknown tokenizer kind: {spec.kind!r}")


def count_tokens(text: str, tok: Tokenizer) -> int:
    """Deterministic nonnegative token count under the given tokenizer."""
    return tok.count(text)


def token_prefix(text: str, n_tokens: int, tok: Tokenizer) -> str:
    """Prefix of text containing exactly min(n_tokens, count) tokens.

    Cuts at the end of the n-th token, so the prefix carries no trailing
    whitespace and recounts to exactly n.
    """
    if n_tokens <= 0:
        return ""
    spans = tok.token_spans(text)
    if len(spans) <= n_tokens:
        return text
    return text[: spans[n_tokens - 1][1]]
