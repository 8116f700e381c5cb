"""The agent workflow: instruction generation, recursive query-focused
summarization, answer generation, long-input sample assembly, instruction
back-translation, and the workflow-as-solver mode.

Each sample is an independent unit whose seed derives from (run seed, sample
index), so runs are reproducible and order-independent under scripted
backends.
"""

from __future__ import annotations

import hashlib
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from . import prompts
from .corpus import CorpusHandle, Document, TextChunk, chunk_text, sample_random_chunk
from .errors import JsonPayloadError, QfsStallError, SchemaError, SynthesisError
from .gateway import LlmGateway, extract_json_payload
from .prompts import get_template, render_prompt
from .retrieval import EmbeddingBackend, RetrievalResult, VectorIndex, retrieve_for_instruction
from .tokenizer import Tokenizer, WhitespaceTokenizer, token_prefix

logger = logging.getLogger(__name__)

INSTRUCTION_SCHEMA = {"task_instruction": str, "search_queries": list}

PIECE_SEPARATOR = "\n\n"


def derive_seed(master: int, *parts) -> int:
    """Stable sub-seed from a master seed and labelling parts."""
    tag = ":".join([str(master), *map(str, parts)])
    return int.from_bytes(hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest(), "little")


@dataclass(frozen=True)
class InstructionRecord:
    task_instruction: str
    search_queries: tuple[str, ...]
    seed_chunk_id: str
    knobs: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.search_queries:
            raise SynthesisError("instruction record has no search queries")


@dataclass
class SummaryRound:
    round_index: int
    inputs: list[TextChunk]
    outputs: list[str]
    total_output_tokens: int
    truncated: bool = False


@dataclass
class LongInputSample:
    instruction: str
    context_documents: list[str]
    response: str
    meta: dict = field(default_factory=dict)


@dataclass
class LongOutputSample:
    instruction: str
    target_document: Document
    instruction_word_budget: int


def draw_answer_word_limit(rng: random.Random) -> int:
    return rng.choice(prompts.ANSWER_WORD_LIMITS)


def generate_instruction(
    corpus: CorpusHandle,
    gateway: LlmGateway,
    seed: int,
    tokenizer: Tokenizer | None = None,
    chunk_tokens: int = 128,
    temperature: float = 1.0,
    max_json_retries: int = 2,
) -> InstructionRecord:
    """Sample a seed chunk and knobs, prompt for a task plus search queries.

    Malformed JSON triggers up to max_json_retries regenerations before the
    error propagates (callers skip the sample and log the reason).
    """
    if len(corpus) == 0:
        raise SynthesisError("cannot generate instructions from an empty corpus")
    rng = random.Random(seed)
    chunk = sample_random_chunk(corpus, chunk_tokens, seed=derive_seed(seed, "chunk"), tokenizer=tokenizer)
    knobs = {
        "task_or_question": rng.choice(prompts.TASK_OR_QUESTION_OPTIONS),
        "education_level": rng.choice(prompts.EDUCATION_LEVEL_OPTIONS),
        "reasoning_type": rng.choice(prompts.REASONING_TYPE_OPTIONS),
    }
    prompt = render_prompt(
        get_template(prompts.INSTRUCTION_GENERATION),
        {"chunk": chunk.text, **knobs},
    )
    last_error: Exception | None = None
    for _ in range(1 + max_json_retries):
        exchange = gateway.complete(prompt, kind="instruction", temperature=temperature)
        try:
            payload = extract_json_payload(exchange.response, schema=INSTRUCTION_SCHEMA)
            queries = payload["search_queries"]
            if not queries or not all(isinstance(q, str) and q for q in queries):
                raise SchemaError("'search_queries' must be a non-empty list of strings", key="search_queries")
            return InstructionRecord(
                task_instruction=str(payload["task_instruction"]),
                search_queries=tuple(queries),
                seed_chunk_id=f"{chunk.parent_id}#{chunk.index}",
                knobs=knobs,
            )
        except (JsonPayloadError, SchemaError) as exc:
            last_error = exc
            logger.warning("instruction JSON rejected (%s); regenerating", exc)
    raise SynthesisError(f"instruction generation failed after retries: {last_error}")


def qfs_summarize_chunk(
    chunk: TextChunk | str,
    query: str,
    gateway: LlmGateway,
    temperature: float = 0.0,
) -> str:
    """One query-focused summarization call over a single chunk."""
    context = chunk.text if isinstance(chunk, TextChunk) else chunk
    prompt = render_prompt(get_template(prompts.QFS), {"context": context, "query": query})
    return gateway.complete(prompt, kind="qfs", temperature=temperature).response


def recursive_qfs(
    docs: Sequence[Document | str],
    query: str,
    gateway: LlmGateway,
    budget_tokens: int = 8192,
    chunk_tokens: int = 4096,
    tokenizer: Tokenizer | None = None,
    truncate_on_stall: bool = True,
    force_first_round: bool = False,
    max_workers: int = 1,
) -> tuple[str, list[SummaryRound]]:
    """Summarize-and-shrink until the concatenation fits the token budget.

    Round 0 chunks every document at chunk_tokens and summarizes each chunk;
    later rounds re-chunk the concatenated summaries. Termination requires a
    strict token decrease per round; a non-decreasing round truncates to the
    budget with a warning (or raises when truncate_on_stall is off). With
    force_first_round the first summarization pass runs even if the input
    already fits, which is how the solver mode treats its chunks.
    """
    if budget_tokens < 512:
        raise ValueError(f"budget_tokens must be >= 512, got {budget_tokens}")
    tok = tokenizer or WhitespaceTokenizer()
    pieces: list[tuple[str, str]] = []
    for i, doc in enumerate(docs):
        if isinstance(doc, Document):
            pieces.append((doc.id, doc.text))
        else:
            pieces.append((f"piece{i}", doc))

    current_text = PIECE_SEPARATOR.join(text for _, text in pieces)
    current_tokens = tok.count(current_text)
    if current_tokens <= budget_tokens and not force_first_round:
        return current_text, []

    rounds: list[SummaryRound] = []
    round_index = 0
    while True:
        chunks: list[TextChunk] = []
        for pid, text in pieces:
            chunks.extend(chunk_text(text, chunk_tokens, tok, parent_id=pid))
        if max_workers > 1:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                summaries = list(pool.map(lambda c: qfs_summarize_chunk(c, query, gateway), chunks))
        else:
            summaries = [qfs_summarize_chunk(c, query, gateway) for c in chunks]
        summary_text = PIECE_SEPARATOR.join(summaries)
        total = tok.count(summary_text)
        rounds.append(
            SummaryRound(
                round_index=round_index,
                inputs=chunks,
                outputs=summaries,
                total_output_tokens=total,
            )
        )
        if total <= budget_tokens:
            return summary_text, rounds
        if total >= current_tokens:
            if not truncate_on_stall:
                raise QfsStallError(
                    f"round {round_index} did not shrink ({current_tokens} -> {total} tokens)"
                )
            logger.warning(
                "summarization stalled at round %d (%d -> %d tokens); truncating to budget",
                round_index,
                current_tokens,
                total,
            )
            rounds[-1].truncated = True
            return token_prefix(summary_text, budget_tokens, tok), rounds
        current_tokens = total
        pieces = [(f"round{round_index}", summary_text)]
        round_index += 1


def generate_answer(
    context: str,
    query: str,
    word_limit: int,
    gateway: LlmGateway,
    temperature: float = 0.0,
) -> str:
    """One answer-generation call; the word limit is drawn by the caller."""
    if word_limit not in prompts.ANSWER_WORD_LIMITS:
        raise ValueError(f"word_limit must be one of {prompts.ANSWER_WORD_LIMITS}, got {word_limit}")
    prompt = render_prompt(
        get_template(prompts.ANSWER_GENERATION),
        {"context": context, "query": query, "word_limit": word_limit},
    )
    return gateway.complete(prompt, kind="answer", temperature=temperature).response


def assemble_long_input(
    rec: InstructionRecord,
    relevant: RetrievalResult,
    corpus: CorpusHandle,
    n_docs: int,
    seed: int,
) -> tuple[list[Document], dict]:
    """Build the context document list: relevant hits plus corpus distractors.

    If n_docs is below the relevant count, only the top n_docs hits are used
    (recorded in meta). Distractors are drawn uniformly without replacement
    from the corpus excluding relevant ids; a corpus smaller than n_docs
    degrades to using every document, with a warning.
    """
    if n_docs < 1:
        raise ValueError(f"n_docs must be >= 1, got {n_docs}")
    rng = random.Random(seed)
    relevant_ids = relevant.ids
    meta: dict = {
        "relevant_ids": list(relevant_ids),
        "requested_n_docs": n_docs,
        "truncated_relevant": False,
        "corpus_exhausted": False,
        "distractor_policy": "corpus-excluding-relevant",
    }
    if n_docs < len(relevant_ids):
        chosen_ids = relevant_ids[:n_docs]
        meta["truncated_relevant"] = True
        meta["distractor_ids"] = []
        docs = [corpus.get(i) for i in chosen_ids]
    else:
        need = n_docs - len(relevant_ids)
        pool = [d.id for d in corpus if d.id not in set(relevant_ids)]
        if need > len(pool):
            logger.warning(
                "corpus too small for %d context documents; using all %d available",
                n_docs,
                len(relevant_ids) + len(pool),
            )
            meta["corpus_exhausted"] = True
            need = len(pool)
        distractor_ids = rng.sample(pool, need)
        meta["distractor_ids"] = list(distractor_ids)
        docs = [corpus.get(i) for i in list(relevant_ids) + distractor_ids]
    rng.shuffle(docs)
    meta["context_doc_ids"] = [d.id for d in docs]
    return docs, meta


def synthesize_long_input_sample(
    corpus: CorpusHandle,
    index: VectorIndex,
    gateway: LlmGateway,
    embed_backend: EmbeddingBackend,
    seed: int,
    per_query_k: int = 5,
    out_k: int = 5,
    qfs_budget_tokens: int = 8192,
    chunk_tokens: int = 4096,
    instruction_chunk_tokens: int = 128,
    n_docs_range: tuple[int, int] = (1, 100),
    tokenizer: Tokenizer | None = None,
    max_workers: int = 1,
) -> LongInputSample:
    """Run the full four-step workflow and assemble one training sample.

    Failures at any stage raise; the batch driver catches, logs, and moves on.
    """
    tok = tokenizer or WhitespaceTokenizer()
    rng = random.Random(derive_seed(seed, "knobs"))
    before = gateway.ledger.snapshot()

    rec = generate_instruction(
        corpus,
        gateway,
        seed=derive_seed(seed, "instruction"),
        tokenizer=tok,
        chunk_tokens=instruction_chunk_tokens,
    )
    hits = retrieve_for_instruction(rec, index, embed_backend, per_query_k=per_query_k, out_k=out_k)
    if len(hits) == 0:
        raise SynthesisError("retrieval returned no documents")
    relevant_docs = [corpus.get(i) for i in hits.ids]

    context_text, rounds = recursive_qfs(
        relevant_docs,
        rec.task_instruction,
        gateway,
        budget_tokens=qfs_budget_tokens,
        chunk_tokens=chunk_tokens,
        tokenizer=tok,
        max_workers=max_workers,
    )
    word_limit = draw_answer_word_limit(rng)
    response = generate_answer(context_text, rec.task_instruction, word_limit, gateway)
    if not response:
        raise SynthesisError("answer generation returned empty text")

    n_docs = rng.randint(*n_docs_range)
    context_docs, meta = assemble_long_input(rec, hits, corpus, n_docs, seed=derive_seed(seed, "assemble"))

    over_cap = [
        i
        for round_ in rounds
        for i, summary in enumerate(round_.outputs)
        if len(summary.split()) > prompts.QFS_SUMMARY_WORD_CAP
    ]
    meta.update(
        {
            "sample_seed": seed,
            "seed_chunk_id": rec.seed_chunk_id,
            "knobs": rec.knobs,
            "search_queries": list(rec.search_queries),
            "word_limit": word_limit,
            "qfs_rounds": [
                {
                    "round_index": r.round_index,
                    "n_chunks": len(r.inputs),
                    "total_output_tokens": r.total_output_tokens,
                    "truncated": r.truncated,
                }
                for r in rounds
            ],
            "qfs_over_cap_count": len(over_cap),
            "llm_calls": gateway.ledger.since(before),
        }
    )
    return LongInputSample(
        instruction=rec.task_instruction,
        context_documents=[d.text for d in context_docs],
        response=response,
        meta=meta,
    )


def backtranslate_document(
    doc: Document,
    gateway: LlmGateway,
    seed: int,
    tokenizer: Tokenizer | None = None,
    min_tokens: int = 2048,
    max_tokens: int = 32768,
    prompt_doc_budget_tokens: int = 8192,
) -> LongOutputSample:
    """Reverse-engineer a writing instruction for a long document.

    The prompt carries a middle-truncated view of the document when it
    exceeds the prompt budget; the sample always targets the original,
    untruncated text.
    """
    if not min_tokens <= doc.token_count <= max_tokens:
        raise SynthesisError(
            f"document {doc.id!r} has {doc.token_count} tokens, outside [{min_tokens}, {max_tokens}]"
        )
    tok = tokenizer or WhitespaceTokenizer()
    rng = random.Random(seed)
    word_budget = rng.choice(prompts.BACKTRANSLATION_WORD_BUDGETS)

    text = doc.text
    if doc.token_count > prompt_doc_budget_tokens:
        half = prompt_doc_budget_tokens // 2
        spans = tok.token_spans(text)
        head = text[: spans[half - 1][1]]
        tail = text[spans[len(spans) - half][0] :]
        text = head + "\n\n...\n\n" + tail

    prompt = render_prompt(
        get_template(prompts.BACKTRANSLATION),
        {"document": text, "word_budget": word_budget, "token_count": doc.token_count},
    )
    instruction = gateway.complete(prompt, kind="backtranslation", temperature=0.0).response
    if not instruction:
        raise SynthesisError("back-translation returned empty instruction")
    return LongOutputSample(
        instruction=instruction,
        target_document=doc,
        instruction_word_budget=word_budget,
    )


def solve_with_workflow(
    context: str,
    query: str,
    gateway: LlmGateway,
    chunk_tokens: int = 4096,
    budget_tokens: int = 8192,
    word_limit: int = 300,
    tokenizer: Tokenizer | None = None,
    max_workers: int = 1,
) -> tuple[str, dict]:
    """Answer a query over a long context with the data-synthesis workflow.

    The context is split into chunks which stand in for retrieved documents
    (no retrieval happens); every chunk is summarized once, recursion shrinks
    further if needed, then one answer call runs. Returns the answer and the
    ledger delta for this invocation.
    """
    if not context:
        raise SynthesisError("context is empty")
    tok = tokenizer or WhitespaceTokenizer()
    before = gateway.ledger.snapshot()
    chunks = chunk_text(context, chunk_tokens, tok, parent_id="context")
    summary_text, _rounds = recursive_qfs(
        [c.text for c in chunks],
        query,
        gateway,
        budget_tokens=budget_tokens,
        chunk_tokens=chunk_tokens,
        tokenizer=tok,
        force_first_round=True,
        max_workers=max_workers,
    )
    answer = generate_answer(summary_text, query, word_limit, gateway)
    return answer, gateway.ledger.since(before)


def long_input_to_json(sample: LongInputSample) -> dict:
    return {
        "kind": "long_input",
        "instruction": sample.instruction,
        "context_docs": list(sample.context_documents),
        "response": sample.response,
        "meta": sample.meta,
    }


def long_output_to_json(sample: LongOutputSample) -> dict:
    return {
        "kind": "long_output",
        "instruction": sample.instruction,
        "context_docs": [],
        "response": sample.target_document.text,
        "meta": {
            "target_doc_id": sample.target_document.id,
            "target_token_count": sample.target_document.token_count,
            "instruction_word_budget": sample.instruction_word_budget,
        },
    }
