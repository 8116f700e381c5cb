"""Deterministic scripted backends for offline runs and tests.

Every mock is a pure function of (request text, seed), which is what makes
full pipeline runs byte-reproducible without network access.
"""

from __future__ import annotations

import hashlib
import json
import re
from typing import Callable

from . import prompts
from .errors import BackendError
from .gateway import ChatRequest
from .tokenizer import WhitespaceTokenizer, token_prefix


def classify_prompt(text: str) -> str:
    """Map a rendered prompt back to its workflow step."""
    if "# Brainstorm a potentially useful" in text:
        return "instruction"
    if text.startswith("You are a professional and faithful query-focused summarization system."):
        return "qfs"
    if text.startswith("You are a professional annotator."):
        return "answer"
    if text.startswith("You are required to reverse engineer the writing instruction"):
        return "backtranslation"
    return "other"


def extract_section(text: str, start_marker: str, end_marker: str) -> str:
    start = text.find(start_marker)
    end = text.find(end_marker, start)
    if start == -1 or end == -1:
        return ""
    return text[start + len(start_marker) : end].strip("\n")


class EchoBackend:
    """Returns the request body verbatim."""

    backend_id = "mock:echo"

    def complete(self, req: ChatRequest) -> str:
        return req.prompt


class StaticBackend:
    """Returns a fixed reply regardless of input."""

    def __init__(self, text: str, backend_id: str = "mock:static"):
        self.text = text
        self.backend_id = backend_id

    def complete(self, req: ChatRequest) -> str:
        return self.text


class ScriptedBackend:
    """Wraps an arbitrary pure function of the request."""

    def __init__(self, fn: Callable[[ChatRequest], str], backend_id: str = "mock:scripted"):
        self._fn = fn
        self.backend_id = backend_id

    def complete(self, req: ChatRequest) -> str:
        return self._fn(req)


class FlakyBackend:
    """Fails the first fail_times calls, then delegates. For retry tests."""

    def __init__(self, inner, fail_times: int, retryable: bool = True):
        self._inner = inner
        self._remaining = fail_times
        self._retryable = retryable
        self.backend_id = f"mock:flaky:{inner.backend_id}"
        self.calls = 0

    def complete(self, req: ChatRequest) -> str:
        self.calls += 1
        if self._remaining > 0:
            self._remaining -= 1
            raise BackendError("injected transient failure", retryable=self._retryable)
        return self._inner.complete(req)


_WORD_RE = re.compile(r"[a-z0-9]+")


class WorkflowMockBackend:
    """Step-aware mock covering the full synthesis workflow.

    Instruction prompts get valid JSON derived from the prepended chunk; QFS
    prompts get an extractive prefix of the context (or the no-information
    sentinel when no content word of the query appears in it); answer and
    back-translation prompts get short deterministic replies that embed the
    query/document head plus a request-hash tag.
    """

    backend_id = "mock:workflow"

    def __init__(self, seed: int = 0, summary_words: int = 100):
        self.seed = seed
        self.summary_words = summary_words
        self._tok = WhitespaceTokenizer()

    def _tag(self, text: str) -> str:
        return hashlib.blake2b(f"{self.seed}:{text}".encode("utf-8"), digest_size=4).hexdigest()

    def complete(self, req: ChatRequest) -> str:
        step = classify_prompt(req.prompt)
        if step == "instruction":
            return self._instruction(req.prompt)
        if step == "qfs":
            return self._qfs(req.prompt)
        if step == "answer":
            return self._answer(req.prompt)
        if step == "backtranslation":
            return self._backtranslation(req.prompt)
        return f"mock reply {self._tag(req.prompt)}"

    def _instruction(self, prompt: str) -> str:
        chunk = prompt.split("\n\n# Brainstorm", 1)[0]
        topic = " ".join(chunk.split()[:3]) or "general knowledge"
        tag = self._tag(prompt)
        return json.dumps(
            {
                "task_instruction": f"Compile a report on {topic} (case {tag}).",
                "search_queries": [
                    f"{topic} background",
                    f"{topic} key facts {tag}",
                    f"{topic} recent analysis",
                ],
            },
            ensure_ascii=False,
        )

    def _qfs(self, prompt: str) -> str:
        context = extract_section(prompt, prompts.CONTEXT_START, prompts.CONTEXT_END)
        query = extract_section(prompt, prompts.QUERY_START, prompts.QUERY_END)
        content_words = [w for w in _WORD_RE.findall(query.lower()) if len(w) >= 4]
        if content_words:
            lowered = context.lower()
            if not any(w in lowered for w in content_words):
                return prompts.NO_RELEVANT_INFORMATION
        return token_prefix(context, self.summary_words, self._tok)

    def _answer(self, prompt: str) -> str:
        context = extract_section(prompt, prompts.CONTEXT_START, prompts.CONTEXT_END)
        query = extract_section(prompt, prompts.QUERY_START, prompts.QUERY_END)
        limits = re.findall(r"at most (\d+) words", prompt)
        limit = limits[-1] if limits else "?"
        head = token_prefix(context, 24, self._tok)
        return f"Answer ({limit} words max, case {self._tag(prompt)}) to: {query}\n{head}"

    def _backtranslation(self, prompt: str) -> str:
        document = extract_section(prompt, prompts.DOCUMENT_START, prompts.DOCUMENT_END)
        budgets = re.findall(r"with about (\d+) words", prompt)
        budget = budgets[-1] if budgets else "?"
        head = token_prefix(document, 12, self._tok)
        return f"Write a detailed document (instruction of about {budget} words, case {self._tag(prompt)}) covering: {head}"
