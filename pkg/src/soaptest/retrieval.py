"""Chunking, embedding, and exact vector search over knowledge-graph text.

The index is exact: every search is a full scan, so results are a
deterministic function of the corpus and the embedder. The built-in
embedder hashes whitespace tokens into a fixed number of buckets and
L2-normalizes, which keeps the whole retrieval stack offline and
reproducible; a remote OpenAI-compatible embeddings backend is available
for real deployments.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass
from typing import Iterable, Protocol

import numpy as np

from .errors import EmbedderFailure, EmptyIndex, InvalidChunkParams

SEARCH_MODES = ("semantic", "keyword", "hybrid")


@dataclass(frozen=True)
class Document:
    """One unit of structured text fed to the index."""

    id: str
    text: str


@dataclass(frozen=True)
class Chunk:
    id: int
    text: str
    vector: tuple[float, ...]
    doc_id: str
    offset: int  # token offset of the chunk within its document


@dataclass(frozen=True)
class VectorIndex:
    dimension: int
    embedder_id: str
    chunks: tuple[Chunk, ...]


class Embedder(Protocol):
    """Deterministic text -> unit vector mapping, identified by `id`."""

    id: str
    dimension: int

    def embed(self, text: str) -> np.ndarray: ...


def tokenize(text: str) -> list[str]:
    """Whitespace tokenization used for chunking and the hash embedder."""
    return text.split()


def token_bucket(token: str, dimension: int) -> int:
    """Stable bucket for a token: md5 of its normalized form mod dimension."""
    normalized = token.lower().strip(".,;:!?\"'()[]{}")
    digest = hashlib.md5(normalized.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % dimension


class HashEmbedder:
    """Bag-of-hashed-tokens embedder: offline, deterministic, unit-normalized."""

    def __init__(self, dimension: int = 256):
        self.dimension = dimension
        self.id = f"hash-{dimension}"

    def embed(self, text: str) -> np.ndarray:
        if not text.strip():
            raise EmbedderFailure("cannot embed empty text", text=text)
        vec = np.zeros(self.dimension, dtype=np.float64)
        for token in tokenize(text):
            vec[token_bucket(token, self.dimension)] += 1.0
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise EmbedderFailure("text produced no tokens", text=text)
        return vec / norm


class RemoteEmbedder:
    """OpenAI-compatible embeddings endpoint (POST <base_url>/embeddings)."""

    def __init__(self, base_url: str, api_key: str, model: str, dimension: int = 256, timeout_s: float = 60.0):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.model = model
        self.dimension = dimension
        self.timeout_s = timeout_s
        self.id = f"remote-{model}-{dimension}"

    def embed(self, text: str) -> np.ndarray:
        import requests

        if not text.strip():
            raise EmbedderFailure("cannot embed empty text", text=text)
        try:
            resp = requests.post(
                f"{self.base_url}/embeddings",
                headers={"Authorization": f"Bearer {self.api_key}"},
                json={"model": self.model, "input": text, "dimensions": self.dimension},
                timeout=self.timeout_s,
            )
        except requests.RequestException as exc:
            raise EmbedderFailure(f"embeddings request failed: {exc}", text=text) from exc
        if resp.status_code != 200:
            raise EmbedderFailure(f"embeddings endpoint returned {resp.status_code}", text=text)
        try:
            vec = np.asarray(resp.json()["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, ValueError) as exc:
            raise EmbedderFailure(f"malformed embeddings response: {exc}", text=text) from exc
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise EmbedderFailure("embeddings endpoint returned a zero vector", text=text)
        return vec / norm


def make_embedder(kind: str, dimension: int, llm_config=None) -> Embedder:
    if kind == "hash":
        return HashEmbedder(dimension)
    if kind == "remote":
        if llm_config is None:
            raise ValueError("remote embedder requires llm config")
        return RemoteEmbedder(llm_config.base_url, llm_config.api_key, llm_config.model, dimension, llm_config.timeout_s)
    raise ValueError(f"unknown embedder kind {kind!r}")


def chunk_text(document: Document, chunk_size: int = 800, overlap: int = 400) -> list[tuple[str, int]]:
    """Split a document into (chunk text, token offset) windows.

    Windows advance by `chunk_size - overlap` tokens, so consecutive chunks
    share `overlap` tokens and every token lands in at least one chunk.
    """
    if not (0 <= overlap < chunk_size):
        raise InvalidChunkParams(f"need 0 <= overlap < chunk_size, got {overlap}/{chunk_size}")
    tokens = tokenize(document.text)
    if len(tokens) <= chunk_size:
        return [(" ".join(tokens), 0)] if tokens else []
    stride = chunk_size - overlap
    chunks = []
    start = 0
    while start < len(tokens) - overlap:
        window = tokens[start:start + chunk_size]
        chunks.append((" ".join(window), start))
        start += stride
    return chunks


def build_index(
    documents: Iterable[Document],
    embedder: Embedder,
    chunk_size: int = 800,
    overlap: int = 400,
) -> VectorIndex:
    """Chunk and embed documents into an immutable exact-search index."""
    chunks: list[Chunk] = []
    for doc in documents:
        for text, offset in chunk_text(doc, chunk_size, overlap):
            vector = embedder.embed(text)
            chunks.append(Chunk(id=len(chunks), text=text, vector=tuple(vector.tolist()), doc_id=doc.id, offset=offset))
    return VectorIndex(dimension=embedder.dimension, embedder_id=embedder.id, chunks=tuple(chunks))


def _keyword_score(query_tokens: set[str], chunk_tokens: set[str]) -> float:
    if not query_tokens:
        return 0.0
    return len(query_tokens & chunk_tokens) / len(query_tokens)


def search(
    index: VectorIndex,
    query: str,
    k: int,
    mode: str = "semantic",
    embedder: Embedder | None = None,
    hybrid_weight: float = 0.5,
) -> list[tuple[Chunk, float]]:
    """Rank chunks against a query; ties break toward the smaller chunk id.

    semantic: cosine similarity in [-1, 1]; keyword: query-term overlap in
    [0, 1]; hybrid: hybrid_weight * semantic + (1 - hybrid_weight) * keyword.
    """
    if mode not in SEARCH_MODES:
        raise ValueError(f"unknown search mode {mode!r}")
    if not index.chunks:
        raise EmptyIndex("search issued against an empty index")
    if k <= 0:
        raise ValueError("k must be positive")

    query_vec = None
    if mode in ("semantic", "hybrid"):
        embedder = embedder or HashEmbedder(index.dimension)
        if embedder.id != index.embedder_id:
            raise ValueError(f"embedder {embedder.id!r} does not match index embedder {index.embedder_id!r}")
        query_vec = embedder.embed(query)
    query_tokens = {t.lower() for t in tokenize(query)}

    scored: list[tuple[Chunk, float]] = []
    for chunk in index.chunks:
        semantic = float(np.dot(query_vec, np.asarray(chunk.vector))) if query_vec is not None else 0.0
        if mode == "semantic":
            score = semantic
        else:
            keyword = _keyword_score(query_tokens, {t.lower() for t in tokenize(chunk.text)})
            score = keyword if mode == "keyword" else hybrid_weight * semantic + (1.0 - hybrid_weight) * keyword
        scored.append((chunk, score))
    scored.sort(key=lambda item: (-item[1], item[0].id))
    return scored[:k]


# --- persistence ------------------------------------------------------------

def _vector_to_b64(vector: tuple[float, ...]) -> str:
    return base64.b64encode(np.asarray(vector, dtype=np.float64).tobytes()).decode("ascii")


def _vector_from_b64(data: str, dimension: int) -> tuple[float, ...]:
    vec = np.frombuffer(base64.b64decode(data), dtype=np.float64)
    if vec.shape != (dimension,):
        raise ValueError(f"stored vector has wrong dimension {vec.shape}")
    return tuple(vec.tolist())


def index_to_lines(index: VectorIndex) -> list[str]:
    """Serialize the index as JSON lines (header first), byte-stable."""
    lines = [json.dumps({"dimension": index.dimension, "embedder": index.embedder_id}, sort_keys=True)]
    for chunk in index.chunks:
        lines.append(
            json.dumps(
                {
                    "id": chunk.id,
                    "doc": chunk.doc_id,
                    "offset": chunk.offset,
                    "text": chunk.text,
                    "vector_b64": _vector_to_b64(chunk.vector),
                },
                sort_keys=True,
            )
        )
    return lines


def index_from_lines(lines: list[str]) -> VectorIndex:
    if not lines:
        raise ValueError("index section is empty")
    header = json.loads(lines[0])
    dimension = int(header["dimension"])
    chunks = []
    for line in lines[1:]:
        obj = json.loads(line)
        chunks.append(
            Chunk(
                id=int(obj["id"]),
                text=obj["text"],
                vector=_vector_from_b64(obj["vector_b64"], dimension),
                doc_id=obj["doc"],
                offset=int(obj["offset"]),
            )
        )
    return VectorIndex(dimension=dimension, embedder_id=header["embedder"], chunks=tuple(chunks))
