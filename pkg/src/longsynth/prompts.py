"""Prompt templates and rendering.

Template bodies live as versioned text assets under templates/ and are filled
through named {placeholder} substitution only; all other braces (for example
the JSON example block in the instruction template) pass through untouched.
Choice placeholders (task/question, education level, reasoning type, word
limits) are drawn by the caller, never here.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

from .errors import TemplateError

INSTRUCTION_GENERATION = "instruction_generation"
QFS = "qfs"
ANSWER_GENERATION = "answer_generation"
BACKTRANSLATION = "backtranslation"

TEMPLATE_NAMES = (INSTRUCTION_GENERATION, QFS, ANSWER_GENERATION, BACKTRANSLATION)

_PLACEHOLDERS: dict[str, tuple[str, ...]] = {
    INSTRUCTION_GENERATION: ("chunk", "task_or_question", "education_level", "reasoning_type"),
    QFS: ("context", "query"),
    ANSWER_GENERATION: ("context", "query", "word_limit"),
    BACKTRANSLATION: ("document", "word_budget", "token_count"),
}

# option sets the caller samples from
TASK_OR_QUESTION_OPTIONS = ("task", "question")
EDUCATION_LEVEL_OPTIONS = ("high school", "college", "PhD")
REASONING_TYPE_OPTIONS = ("mathematical", "logical", "common sense")
ANSWER_WORD_LIMITS = (200, 300, 400, 500)
BACKTRANSLATION_WORD_BUDGETS = (20, 50, 100, 200)

QFS_SUMMARY_WORD_CAP = 300
NO_RELEVANT_INFORMATION = "No relevant information found."

# section markers shared by the qfs / answer / backtranslation templates
CONTEXT_START = "## Start of the context"
CONTEXT_END = "## End of the context"
QUERY_START = "## Start of the query"
QUERY_END = "## End of the query"
DOCUMENT_START = "## Start of the document (some parts may be omitted for space reasons)"
DOCUMENT_END = "## End of the document"


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str
    placeholders: tuple[str, ...]


@lru_cache(maxsize=None)
def get_template(name: str) -> PromptTemplate:
    if name not in _PLACEHOLDERS:
        raise TemplateError(f"unknown template: {name!r}")
    body = resources.files("longsynth.templates").joinpath(f"{name}.txt").read_text("utf-8")
    if body.endswith("\n"):
        body = body[:-1]
    return PromptTemplate(name=name, body=body, placeholders=_PLACEHOLDERS[name])


def render_prompt(tpl: PromptTemplate, bindings: dict) -> str:
    """Substitute every placeholder; reject missing or extra bindings by name."""
    required = set(tpl.placeholders)
    provided = set(bindings)
    missing = required - provided
    if missing:
        raise TemplateError(f"missing binding for placeholder: {sorted(missing)[0]!r}")
    extra = provided - required
    if extra:
        raise TemplateError(f"unexpected binding: {sorted(extra)[0]!r}")
    pattern = re.compile("|".join(re.escape("{" + p + "}") for p in tpl.placeholders))
    # single pass so substituted values are never re-scanned
    return pattern.sub(lambda m: str(bindings[m.group(0)[1:-1]]), tpl.body)


def recover_bindings(tpl: PromptTemplate, rendered: str) -> dict[str, str] | None:
    """Invert render_prompt: diff the rendered text against the template.

    Repeated placeholders must agree (matched via backreference). Returns None
    when the text does not come from this template.
    """
    parts = re.split("(" + "|".join(re.escape("{" + p + "}") for p in tpl.placeholders) + ")", tpl.body)
    seen: set[str] = set()
    regex = []
    for part in parts:
        if part[:1] == "{" and part[-1:] == "}" and part[1:-1] in tpl.placeholders:
            name = part[1:-1]
            if name in seen:
                regex.append(f"(?P={name})")
            else:
                seen.add(name)
                regex.append(f"(?P<{name}>.*?)")
        else:
            regex.append(re.escape(part))
    m = re.fullmatch("".join(regex), rendered, flags=re.DOTALL)
    return dict(m.groupdict()) if m else None
