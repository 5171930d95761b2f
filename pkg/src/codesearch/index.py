"""Offline embedding index and exact online top-K cosine retrieval.

The scan is exact (no approximate-NN structure): a blocked matrix-vector
product over unit-normalized float32 rows, accumulated in float64. Ties are
ordered by ascending snippet id so rankings are reproducible.

Index file format: magic ``SCSI v1\\n``; N and d as little-endian uint32;
row-major little-endian float32 vectors; a meta record per row (uint32
id-length, UTF-8 id bytes, one language byte); the 32-byte model
fingerprint; a trailing CRC32 over every preceding byte.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import CODE_TOKEN_CAP, DOC_TOKEN_CAP, LANGUAGES, CorpusSplit
from .encoder import EncoderParams, encode_batch, fingerprint
from .errors import (
    EmptyQueryError,
    IndexCorruptionError,
    IndexFormatError,
    StaleIndexError,
)
from .tokenizer import BpeModel, encode_tokens, lex_code

logger = logging.getLogger(__name__)

_INDEX_MAGIC = b"SCSI v1\n"
_SCAN_BLOCK = 65536


@dataclass(frozen=True)
class RankedResult:
    snippet_id: str
    score: float
    rank: int


@dataclass
class EmbeddingIndex:
    """Unit-normalized code vectors plus per-row snippet metadata."""

    vectors: np.ndarray          # [N, d] float32, unit rows
    ids: tuple[str, ...]
    languages: tuple[str, ...]
    model_fingerprint: bytes
    _row_by_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if len(self.ids) != self.vectors.shape[0] or len(self.languages) != len(self.ids):
            raise ValueError("metadata length must match vector count")
        self._row_by_id = {snippet_id: row for row, snippet_id in enumerate(self.ids)}
        if len(self._row_by_id) != len(self.ids):
            raise ValueError("snippet ids must be unique")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row_of(self, snippet_id: str) -> int | None:
        return self._row_by_id.get(snippet_id)


def build_index(
    split: CorpusSplit,
    params: EncoderParams,
    bpe: BpeModel,
    batch_size: int = 512,
) -> EmbeddingIndex:
    """Embed every entry's code tokens; rows follow corpus order.

    Entries that fail to encode are skipped and counted in the log, never
    aborting the build.
    """
    if len(split.entries) == 0:
        raise ValueError("cannot index an empty corpus")
    vectors = np.zeros((len(split.entries), params.dim), dtype=np.float32)
    keep = np.zeros(len(split.entries), dtype=bool)

    # Group rows by language so each batch uses one alignment map.
    by_language: dict[str, list[int]] = {}
    sequences: list[tuple[int, ...]] = []
    skipped = 0
    for row, entry in enumerate(split.entries):
        ids = tuple(encode_tokens(entry.code_tokens, bpe, cap=CODE_TOKEN_CAP))
        sequences.append(ids)
        if ids:
            by_language.setdefault(entry.language, []).append(row)
        else:
            skipped += 1
            logger.warning("skipping entry %s: empty id sequence", entry.id)

    for language, rows in sorted(by_language.items()):
        for start in range(0, len(rows), batch_size):
            chunk = rows[start : start + batch_size]
            try:
                out, _ = encode_batch([sequences[r] for r in chunk], language, params)
            except Exception:
                # Row-at-a-time fallback so one bad entry cannot sink a batch.
                for r in chunk:
                    try:
                        single, _ = encode_batch([sequences[r]], language, params)
                    except Exception as exc:
                        skipped += 1
                        logger.warning("skipping entry %s: %s", split.entries[r].id, exc)
                    else:
                        vectors[r] = single[0].astype(np.float32)
                        keep[r] = True
                continue
            vectors[chunk] = out.astype(np.float32)
            keep[chunk] = True

    if skipped:
        logger.warning("index build skipped %d of %d entries", skipped, len(split.entries))
    kept_rows = np.nonzero(keep)[0]
    if len(kept_rows) == 0:
        raise ValueError("every entry failed to encode; nothing to index")
    return EmbeddingIndex(
        vectors=vectors[kept_rows],
        ids=tuple(split.entries[r].id for r in kept_rows),
        languages=tuple(split.entries[r].language for r in kept_rows),
        model_fingerprint=fingerprint(params),
    )


def scan_scores(vectors: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Blocked exact cosine scan: float64-accumulated dot products.

    einsum reduces each row independently of its position in the block, so
    identical rows always score identically (BLAS gemv does not promise
    that), which keeps tie-breaking reproducible.
    """
    query64 = np.asarray(query, dtype=np.float64)
    scores = np.empty(vectors.shape[0], dtype=np.float64)
    for start in range(0, vectors.shape[0], _SCAN_BLOCK):
        block = vectors[start : start + _SCAN_BLOCK]
        scores[start : start + _SCAN_BLOCK] = np.einsum(
            "nd,d->n", block.astype(np.float64), query64
        )
    return scores


def rank_top_k(
    scores: np.ndarray, ids: Sequence[str], k: int
) -> list[RankedResult]:
    """Top-k by (score desc, id asc); exact under ties at the k boundary."""
    count = len(scores)
    take = min(k, count)
    if take < count:
        kth = np.partition(scores, count - take)[count - take]
        candidate_rows = np.nonzero(scores >= kth)[0]
    else:
        candidate_rows = np.arange(count)
    id_array = np.asarray(ids, dtype=object)[candidate_rows]
    order = np.lexsort((id_array, -scores[candidate_rows]))[:take]
    chosen = candidate_rows[order]
    return [
        RankedResult(snippet_id=ids[row], score=float(scores[row]), rank=position + 1)
        for position, row in enumerate(chosen)
    ]


def embed_query(
    query_text: str, params: EncoderParams, bpe: BpeModel
) -> np.ndarray:
    """Lex, BPE-encode (doc cap), and encode raw query text to a unit vector."""
    tokens = lex_code(query_text)
    ids = encode_tokens(tokens, bpe, cap=DOC_TOKEN_CAP)
    if not ids:
        raise EmptyQueryError(f"query produced no tokens: {query_text!r}")
    out, _ = encode_batch([ids], "doc", params)
    return out[0]


def query_topk(
    query_text: str,
    index: EmbeddingIndex,
    params: EncoderParams,
    bpe: BpeModel,
    k: int,
) -> list[RankedResult]:
    """Exact top-k retrieval for raw query text.

    Refuses to run when the index was built from a different checkpoint.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if index.model_fingerprint != fingerprint(params):
        raise StaleIndexError(
            "index fingerprint does not match the supplied checkpoint; rebuild the index"
        )
    query_vector = embed_query(query_text, params, bpe)
    scores = scan_scores(index.vectors, query_vector)
    return rank_top_k(scores, index.ids, k)


def save_index(index: EmbeddingIndex, path: str | Path) -> None:
    chunks = [_INDEX_MAGIC]
    chunks.append(np.array([len(index), index.dim], dtype="<u4").tobytes())
    chunks.append(np.ascontiguousarray(index.vectors, dtype="<f4").tobytes())
    for snippet_id, language in zip(index.ids, index.languages):
        id_bytes = snippet_id.encode("utf-8")
        chunks.append(np.array([len(id_bytes)], dtype="<u4").tobytes())
        chunks.append(id_bytes)
        chunks.append(bytes([LANGUAGES.index(language)]))
    chunks.append(index.model_fingerprint)
    body = b"".join(chunks)
    checksum = np.array([zlib.crc32(body)], dtype="<u4").tobytes()
    Path(path).write_bytes(body + checksum)


def load_index(path: str | Path) -> EmbeddingIndex:
    """Read an index file; wrong magic raises IndexFormatError, truncation or
    checksum failure raises IndexCorruptionError."""
    blob = Path(path).read_bytes()
    if not blob.startswith(_INDEX_MAGIC):
        raise IndexFormatError(f"{path}: bad magic bytes")
    if len(blob) < len(_INDEX_MAGIC) + 8 + 32 + 4:
        raise IndexCorruptionError(f"{path}: truncated file")
    body, stored = blob[:-4], blob[-4:]
    if zlib.crc32(body) != int(np.frombuffer(stored, dtype="<u4")[0]):
        raise IndexCorruptionError(f"{path}: checksum mismatch")

    cursor = len(_INDEX_MAGIC)
    count, dim = (int(x) for x in np.frombuffer(body[cursor : cursor + 8], dtype="<u4"))
    cursor += 8
    vector_bytes = count * dim * 4
    if len(body) < cursor + vector_bytes + 32:
        raise IndexCorruptionError(f"{path}: truncated vector block")
    vectors = (
        np.frombuffer(body[cursor : cursor + vector_bytes], dtype="<f4")
        .reshape(count, dim)
        .copy()
    )
    cursor += vector_bytes

    ids = []
    languages = []
    for _ in range(count):
        if len(body) < cursor + 4:
            raise IndexCorruptionError(f"{path}: truncated meta table")
        (id_length,) = np.frombuffer(body[cursor : cursor + 4], dtype="<u4")
        cursor += 4
        id_length = int(id_length)
        if len(body) < cursor + id_length + 1:
            raise IndexCorruptionError(f"{path}: truncated meta record")
        ids.append(body[cursor : cursor + id_length].decode("utf-8"))
        cursor += id_length
        language_byte = body[cursor]
        cursor += 1
        if language_byte >= len(LANGUAGES):
            raise IndexCorruptionError(f"{path}: bad language byte {language_byte}")
        languages.append(LANGUAGES[language_byte])

    if len(body) != cursor + 32:
        raise IndexCorruptionError(f"{path}: unexpected trailing bytes")
    return EmbeddingIndex(
        vectors=vectors,
        ids=tuple(ids),
        languages=tuple(languages),
        model_fingerprint=body[cursor : cursor + 32],
    )
