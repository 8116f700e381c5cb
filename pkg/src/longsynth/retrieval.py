"""Dense retrieval: embedding clients, exact cosine top-k, reciprocal rank
fusion, and embedding-based near-duplicate removal.

The index is exact brute force (sorted cosine over all entries); at desk
scale this is affordable and makes every ranking testable against an
exhaustive oracle. Ties break by ascending doc id everywhere.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import requests

from .errors import BackendError, EmbeddingError

NORM_TOLERANCE = 1e-6


class EmbeddingBackend(Protocol):
    backend_id: str
    dim: int

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


class HashingEmbeddingBackend:
    """Deterministic mock embedder: hashed bag-of-words with signs.

    Identical texts map to identical vectors; texts sharing most words land
    close in cosine, which is enough to exercise retrieval and dedup offline.
    """

    def __init__(self, dim: int = 256, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.backend_id = f"mock:hashing:{dim}:{seed}"

    def _bucket(self, word: str) -> tuple[int, float]:
        h = hashlib.blake2b(f"{self.seed}:{word}".encode("utf-8"), digest_size=8).digest()
        idx = int.from_bytes(h[:4], "little") % self.dim
        sign = 1.0 if h[4] & 1 else -1.0
        return idx, sign

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for row, text in enumerate(texts):
            words = text.lower().split()
            if not words:
                out[row, 0] = 1.0
                continue
            for word in words:
                idx, sign = self._bucket(word)
                out[row, idx] += sign
            norm = np.linalg.norm(out[row])
            if norm == 0.0:
                out[row] = 0.0
                out[row, 0] = 1.0
        return out


class MappingEmbeddingBackend:
    """Fixed text -> vector table; raises on unknown text. For crafted tests
    and replaying persisted embeddings."""

    def __init__(self, table: dict[str, Sequence[float]], dim: int | None = None):
        self._table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}
        if not self._table and dim is None:
            raise EmbeddingError("empty mapping backend needs an explicit dim")
        self.dim = dim if dim is not None else len(next(iter(self._table.values())))
        self.backend_id = "mock:mapping"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        rows = []
        for text in texts:
            if text not in self._table:
                raise BackendError(f"no vector for text: {text[:40]!r}", retryable=False)
            rows.append(self._table[text])
        return np.vstack(rows) if rows else np.zeros((0, self.dim), dtype=np.float64)


class HttpEmbeddingBackend:
    """Batch embedding endpoint client (input list in, data[].embedding out)."""

    def __init__(
        self,
        base_url: str,
        model: str,
        dim: int,
        api_key_env: str = "EMBEDDING_API_KEY",
        timeout_s: float = 60.0,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.dim = dim
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s
        self._session = session or requests.Session()
        self.backend_id = f"http:{self.base_url}:{model}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.api_key_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        try:
            resp = self._session.post(
                f"{self.base_url}/embeddings",
                json={"model": self.model, "input": list(texts)},
                headers=headers,
                timeout=self.timeout_s,
            )
        except requests.RequestException as exc:
            raise BackendError(f"embedding request failed: {exc}", retryable=True) from exc
        if resp.status_code != 200:
            raise BackendError(
                f"embedding endpoint returned {resp.status_code}: {resp.text[:200]}",
                retryable=resp.status_code in {408, 429, 500, 502, 503, 504},
                status=resp.status_code,
            )
        data = sorted(resp.json()["data"], key=lambda d: d["index"])
        return np.asarray([d["embedding"] for d in data], dtype=np.float64)


def _normalize(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms == 0.0):
        bad = int(np.nonzero(norms == 0.0)[0][0])
        raise EmbeddingError(f"zero-norm embedding at position {bad}", failed_indices=[bad])
    return matrix / norms[:, None]


def embed_batch(
    texts: Sequence[str],
    client: EmbeddingBackend,
    batch_size: int = 64,
    max_attempts: int = 3,
) -> np.ndarray:
    """Embed texts in order, batched, retried, and L2-normalized.

    After max_attempts per batch, raises EmbeddingError listing the indices
    of every text in the failed batches.
    """
    if not texts:
        return np.zeros((0, client.dim), dtype=np.float64)
    rows: list[np.ndarray | None] = [None] * len(texts)
    failed: list[int] = []
    last_error: Exception | None = None
    for start in range(0, len(texts), batch_size):
        batch = list(texts[start : start + batch_size])
        vectors = None
        for _ in range(max_attempts):
            try:
                vectors = client.embed(batch)
                break
            except BackendError as exc:
                last_error = exc
                if not exc.retryable:
                    break
        if vectors is None:
            failed.extend(range(start, start + len(batch)))
            continue
        if vectors.shape != (len(batch), client.dim):
            raise EmbeddingError(
                f"backend returned shape {vectors.shape}, expected {(len(batch), client.dim)}"
            )
        for offset in range(len(batch)):
            rows[start + offset] = vectors[offset]
    if failed:
        raise EmbeddingError(
            f"embedding failed for {len(failed)} texts after {max_attempts} attempts: {last_error}",
            failed_indices=failed,
        )
    return _normalize(np.vstack(rows))


@dataclass(frozen=True)
class RetrievalResult:
    """Ranked (doc id, score) pairs; scores non-increasing, ids distinct."""

    ranked: tuple[tuple[str, float], ...]

    @property
    def ids(self) -> list[str]:
        return [doc_id for doc_id, _ in self.ranked]

    def __len__(self) -> int:
        return len(self.ranked)

    def __iter__(self):
        return iter(self.ranked)


class VectorIndex:
    """Exact cosine index over L2-normalized vectors; single-writer build,
    concurrent reads."""

    def __init__(self, ids: Sequence[str], matrix: np.ndarray):
        if len(ids) != matrix.shape[0]:
            raise EmbeddingError(f"{len(ids)} ids for {matrix.shape[0]} vectors")
        if len(set(ids)) != len(ids):
            raise EmbeddingError("duplicate ids in index")
        if matrix.size:
            norms = np.linalg.norm(matrix, axis=1)
            if np.any(np.abs(norms - 1.0) > NORM_TOLERANCE):
                raise EmbeddingError("index vectors must be L2-normalized")
        self.ids = tuple(str(i) for i in ids)
        self.matrix = np.asarray(matrix, dtype=np.float64)

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1]) if self.matrix.ndim == 2 else 0

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def build(cls, ids: Sequence[str], texts: Sequence[str], backend: EmbeddingBackend, **kwargs) -> "VectorIndex":
        return cls(ids, embed_batch(texts, backend, **kwargs))

    def save_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for doc_id, row in zip(self.ids, self.matrix):
                f.write(json.dumps({"id": doc_id, "vector": row.tolist()}) + "\n")

    @classmethod
    def load_jsonl(cls, path: str | Path) -> "VectorIndex":
        ids, rows = [], []
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                rec = json.loads(line)
                ids.append(rec["id"])
                rows.append(rec["vector"])
        matrix = np.asarray(rows, dtype=np.float64) if rows else np.zeros((0, 0))
        return cls(ids, matrix)


def query_top_k(index: VectorIndex, query: np.ndarray, k: int = 5) -> RetrievalResult:
    """The k highest-cosine entries, score-descending, ties by ascending id."""
    query = np.asarray(query, dtype=np.float64)
    if query.ndim != 1 or query.shape[0] != index.dim:
        raise EmbeddingError(f"query dim {query.shape} does not match index dim {index.dim}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        return RetrievalResult(ranked=())
    scores = index.matrix @ query
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.ids[i]))
    top = order[: min(k, len(order))]
    return RetrievalResult(ranked=tuple((index.ids[i], float(scores[i])) for i in top))


def rrf_merge(
    rankings: Sequence[Sequence[str]],
    k_rrf: int = 60,
    out_k: int | None = None,
) -> RetrievalResult:
    """Reciprocal rank fusion: score(id) = sum over rankings of 1/(k_rrf + rank).

    Ranks are 1-based. Contributions are combined with fsum so the result is
    invariant under permutations of the rankings list.
    """
    contributions: dict[str, list[float]] = {}
    for ranking in rankings:
        if len(set(ranking)) != len(ranking):
            raise ValueError("ranking contains duplicate ids")
        for rank, doc_id in enumerate(ranking, start=1):
            contributions.setdefault(doc_id, []).append(1.0 / (k_rrf + rank))
    fused = [(doc_id, math.fsum(parts)) for doc_id, parts in contributions.items()]
    fused.sort(key=lambda pair: (-pair[1], pair[0]))
    if out_k is not None:
        fused = fused[:out_k]
    return RetrievalResult(ranked=tuple(fused))


def retrieve_for_instruction(
    rec,
    index: VectorIndex,
    backend: EmbeddingBackend,
    per_query_k: int = 5,
    out_k: int = 5,
) -> RetrievalResult:
    """Embed each search query, rank per query, and fuse with RRF."""
    queries = list(rec.search_queries)
    if not queries:
        raise ValueError("instruction record has no search queries")
    vectors = embed_batch(queries, backend)
    rankings = [query_top_k(index, vectors[i], per_query_k).ids for i in range(len(queries))]
    return rrf_merge(rankings, out_k=out_k)


def dedup_by_embedding(
    items: Sequence[tuple[str, str]],
    backend: EmbeddingBackend,
    threshold: float = 0.85,
    batch_size: int = 64,
) -> list[str]:
    """Greedy leader clustering in input order.

    An item is dropped iff its cosine similarity to some earlier *kept* item
    is >= threshold. Returns kept ids, input order preserved.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    if not items:
        return []
    ids = [item_id for item_id, _ in items]
    vectors = embed_batch([text for _, text in items], backend, batch_size=batch_size)
    kept_rows: list[int] = []
    kept_ids: list[str] = []
    for i in range(len(items)):
        if kept_rows:
            sims = vectors[kept_rows] @ vectors[i]
            if float(np.max(sims)) >= threshold:
                continue
        kept_rows.append(i)
        kept_ids.append(ids[i])
    return kept_ids
