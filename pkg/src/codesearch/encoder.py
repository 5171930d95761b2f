"""Neural bag-of-words encoder with per-language alignment, self-attention
pooling over every MLP layer, and softmax-weighted layer fusion.

Token sequences are treated as bags: ``encode`` canonicalizes input order by
sorting ids, which makes the encoder's order-freeness hold bit-exactly.
Position axes are rows here ([m, d] matrices); masked positions are excluded
from the attention softmax, never zero-filled.

Checkpoint format: magic ``SCSM v1\\n``; a dims record of four little-endian
uint32 (vocab_size, d, num_layers, alignment-map count); all tensors as
little-endian float32 in fixed order (embedding table, alignment maps, MLP
layers as W then b, attention vectors doc-then-code by layer, fusion logits,
fusion scale); trailing CRC32 of the payload.
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import LANGUAGES
from .errors import (
    CheckpointFormatError,
    DimensionMismatchError,
    NotNormalizedError,
    TokenIdRangeError,
    ZeroVectorError,
)
from .tokenizer import PAD_ID

# Alignment-map order: the six code languages, then the query/doc map.
ALIGN_KEYS = LANGUAGES + ("doc",)
DOC_KEY = "doc"
MODALITY_DOC = 0
MODALITY_CODE = 1

_CHECKPOINT_MAGIC = b"SCSM v1\n"


def _nonlinearity(name: str):
    if name == "tanh":
        return np.tanh
    if name == "identity":
        return lambda x: x
    raise ValueError(f"unknown nonlinearity {name!r}")


@dataclass
class EncoderParams:
    """All learnable tensors, float64 in memory (checkpoints store float32)."""

    embed: np.ndarray          # [vocab_size, d]
    align: np.ndarray          # [len(ALIGN_KEYS), d, d]
    mlp_w: np.ndarray          # [L, d, d]
    mlp_b: np.ndarray          # [L, d]
    attn: np.ndarray           # [2, L + 1, d]; doc then code
    fusion_logits: np.ndarray  # [L + 1]
    fusion_scale: float
    nonlinearity: str = "tanh"

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    @property
    def dim(self) -> int:
        return self.embed.shape[1]

    @property
    def num_layers(self) -> int:
        return self.mlp_w.shape[0]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            embed=self.embed.copy(),
            align=self.align.copy(),
            mlp_w=self.mlp_w.copy(),
            mlp_b=self.mlp_b.copy(),
            attn=self.attn.copy(),
            fusion_logits=self.fusion_logits.copy(),
            fusion_scale=float(self.fusion_scale),
            nonlinearity=self.nonlinearity,
        )

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        """Named tensors in checkpoint order (fusion_scale as a 1-vector)."""
        return [
            ("embed", self.embed),
            ("align", self.align),
            ("mlp_w", self.mlp_w),
            ("mlp_b", self.mlp_b),
            ("attn", self.attn),
            ("fusion_logits", self.fusion_logits),
            ("fusion_scale", np.array([self.fusion_scale])),
        ]

    def all_finite(self) -> bool:
        return all(np.isfinite(t).all() for _, t in self.tensors())


def init_params(
    vocab_size: int,
    dim: int = 128,
    num_layers: int = 2,
    seed: int = 0,
    nonlinearity: str = "tanh",
) -> EncoderParams:
    """Fresh parameters: uniform(+-0.05) embeddings, identity alignment for
    the doc map, identity plus small noise for code maps, Glorot-style MLP
    weights, zero fusion logits (uniform layer weights), unit fusion scale."""
    rng = np.random.default_rng(seed)
    embed = rng.uniform(-0.05, 0.05, size=(vocab_size, dim))
    align = np.tile(np.eye(dim), (len(ALIGN_KEYS), 1, 1))
    for key_index, key in enumerate(ALIGN_KEYS):
        if key != DOC_KEY:
            align[key_index] += rng.uniform(-0.01, 0.01, size=(dim, dim))
    limit = np.sqrt(3.0 / dim)
    mlp_w = rng.uniform(-limit, limit, size=(num_layers, dim, dim))
    mlp_b = np.zeros((num_layers, dim))
    attn = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(2, num_layers + 1, dim))
    return EncoderParams(
        embed=embed,
        align=align,
        mlp_w=mlp_w,
        mlp_b=mlp_b,
        attn=attn,
        fusion_logits=np.zeros(num_layers + 1),
        fusion_scale=1.0,
        nonlinearity=nonlinearity,
    )


@dataclass(frozen=True)
class EmbeddingVector:
    """A d-dimensional embedding; ``normalized`` marks unit length."""

    values: np.ndarray
    normalized: bool


@dataclass(frozen=True)
class ForwardTrace:
    """Intermediate quantities of one encode, for backprop and inspection.

    Positions follow the canonical (sorted-id) order used by ``encode``.
    """

    ids: tuple[int, ...]
    hiddens: tuple[np.ndarray, ...]   # per layer, [m, d]
    alphas: tuple[np.ndarray, ...]    # per layer, [m]
    pooled: tuple[np.ndarray, ...]    # per layer, [d]
    layer_weights: np.ndarray         # softmax of fusion logits, [L + 1]
    fused: np.ndarray                 # pre-normalization output, [d]


def align_index(modality_lang: str) -> int:
    """Map a modality/language tag to its alignment-map row."""
    try:
        return ALIGN_KEYS.index(modality_lang)
    except ValueError:
        raise ValueError(
            f"modality_lang must be one of {ALIGN_KEYS}, got {modality_lang!r}"
        ) from None


def modality_index(modality_lang: str) -> int:
    return MODALITY_DOC if modality_lang == DOC_KEY else MODALITY_CODE


def _check_ids(ids: Sequence[int], vocab_size: int) -> None:
    if len(ids) == 0:
        raise ValueError("empty id sequence")
    for token_id in ids:
        if not 0 <= token_id < vocab_size:
            raise TokenIdRangeError(
                f"id {token_id} out of range for vocab of {vocab_size}"
            )
        if token_id == PAD_ID:
            raise TokenIdRangeError("PAD is reserved for batch padding")


def embed_and_align(
    ids: Sequence[int], modality_lang: str, params: EncoderParams
) -> np.ndarray:
    """Look up embeddings and project through the modality's alignment map.

    Returns an [m, d] matrix whose row t is W_lang @ embed[ids[t]].
    """
    _check_ids(ids, params.vocab_size)
    raw = params.embed[np.asarray(ids, dtype=np.int64)]
    return raw @ params.align[align_index(modality_lang)].T


def mlp_forward(aligned: np.ndarray, params: EncoderParams) -> list[np.ndarray]:
    """Per-position MLP: returns [H_0 .. H_L] with H_0 the aligned input."""
    activate = _nonlinearity(params.nonlinearity)
    hiddens = [aligned]
    for layer in range(params.num_layers):
        hiddens.append(activate(hiddens[-1] @ params.mlp_w[layer].T + params.mlp_b[layer]))
    return hiddens


def masked_softmax(scores: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis restricted to unmasked positions.

    Masked positions get exactly zero weight. Raises if a row has no valid
    position.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if mask is None:
        valid = np.ones(scores.shape, dtype=bool)
    else:
        valid = np.asarray(mask, dtype=bool)
    if not valid.any(axis=-1).all():
        raise ValueError("softmax over zero valid positions")
    shifted = np.where(valid, scores, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    weights = np.where(valid, np.exp(shifted), 0.0)
    return weights / weights.sum(axis=-1, keepdims=True)


def attention_pool(
    hidden: np.ndarray, weight: np.ndarray, mask: np.ndarray | None = None
) -> np.ndarray:
    """Aggregate [m, d] hidden rows into one vector by learned attention:
    weights are softmax(hidden @ weight) over valid positions."""
    alpha = masked_softmax(hidden @ weight, mask)
    return alpha @ hidden


def fuse(
    pooled: Sequence[np.ndarray],
    fusion_logits: np.ndarray,
    fusion_scale: float,
) -> np.ndarray:
    """Softmax-weighted combination of per-layer pooled vectors, scaled."""
    if len(pooled) != len(fusion_logits):
        raise ValueError(
            f"expected {len(fusion_logits)} pooled vectors, got {len(pooled)}"
        )
    layer_weights = masked_softmax(np.asarray(fusion_logits, dtype=np.float64))
    combined = np.zeros_like(pooled[0])
    for weight, vector in zip(layer_weights, pooled):
        combined = combined + weight * vector
    return fusion_scale * combined


def encode(
    ids: Sequence[int],
    modality_lang: str,
    params: EncoderParams,
    want_trace: bool = False,
) -> EmbeddingVector | tuple[EmbeddingVector, ForwardTrace]:
    """Full encoder: align, MLP, per-layer attention pooling, fusion, and
    L2 normalization. Input order is canonicalized (bag-of-words)."""
    canonical = sorted(ids)
    aligned = embed_and_align(canonical, modality_lang, params)
    hiddens = mlp_forward(aligned, params)
    modality = modality_index(modality_lang)
    alphas = []
    pooled = []
    for layer, hidden in enumerate(hiddens):
        alpha = masked_softmax(hidden @ params.attn[modality, layer])
        alphas.append(alpha)
        pooled.append(alpha @ hidden)
    fused = fuse(pooled, params.fusion_logits, params.fusion_scale)
    norm = float(np.linalg.norm(fused))
    if norm == 0.0 or not np.isfinite(norm):
        raise ZeroVectorError("encoder output has zero or non-finite norm")
    vector = EmbeddingVector(values=fused / norm, normalized=True)
    if not want_trace:
        return vector
    trace = ForwardTrace(
        ids=tuple(canonical),
        hiddens=tuple(hiddens),
        alphas=tuple(alphas),
        pooled=tuple(pooled),
        layer_weights=masked_softmax(np.asarray(params.fusion_logits, dtype=np.float64)),
        fused=fused,
    )
    return vector, trace


def cosine_sim(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Dot product of unit vectors; the retrieval relevance score."""
    if not (a.normalized and b.normalized):
        raise NotNormalizedError("cosine_sim requires normalized embeddings")
    return float(np.dot(a.values, b.values))


# --- batched forward (fast path for training, indexing, evaluation) --------

@dataclass
class BatchTrace:
    """Everything the backward pass needs, for one batch of one modality."""

    ids: np.ndarray            # [B, m] int64, PAD-padded
    mask: np.ndarray           # [B, m] float64, 1 for valid positions
    align_groups: list[tuple[int, np.ndarray]]  # (align row, batch rows)
    modality: int
    raw: np.ndarray            # [B, m, d] embedding lookups
    hiddens: list[np.ndarray]  # L + 1 arrays, [B, m, d]
    alphas: np.ndarray         # [L + 1, B, m]
    pooled: np.ndarray         # [L + 1, B, d]
    layer_weights: np.ndarray  # [L + 1]
    combined: np.ndarray       # [B, d], pre-scale fusion sum
    fused: np.ndarray          # [B, d], pre-normalization
    norms: np.ndarray          # [B]
    out: np.ndarray            # [B, d], unit rows


def encode_batch(
    sequences: Sequence[Sequence[int]],
    modality_langs: str | Sequence[str],
    params: EncoderParams,
    want_trace: bool = False,
) -> tuple[np.ndarray, BatchTrace | None]:
    """Vectorized encode of many sequences; returns unit rows [B, d].

    ``modality_langs`` is one tag for the whole batch or one per sequence.
    Sequences are canonicalized (sorted) and padded with PAD, which is
    masked out of every reduction.
    """
    batch_size = len(sequences)
    if batch_size == 0:
        raise ValueError("empty batch")
    if isinstance(modality_langs, str):
        modality_langs = [modality_langs] * batch_size
    if len(modality_langs) != batch_size:
        raise ValueError("one modality_lang per sequence required")
    modalities = {modality_index(tag) for tag in modality_langs}
    if len(modalities) != 1:
        raise ValueError("a batch must be single-modality (all doc or all code)")
    modality = modalities.pop()

    lengths = [len(seq) for seq in sequences]
    if min(lengths) == 0:
        raise ValueError("empty id sequence in batch")
    max_len = max(lengths)
    ids = np.full((batch_size, max_len), PAD_ID, dtype=np.int64)
    mask = np.zeros((batch_size, max_len), dtype=np.float64)
    for row, seq in enumerate(sequences):
        _check_ids(seq, params.vocab_size)
        ids[row, : lengths[row]] = sorted(seq)
        mask[row, : lengths[row]] = 1.0

    raw = params.embed[ids]  # PAD rows masked out of every reduction below
    aligned = np.empty_like(raw)
    align_groups = []
    align_rows = np.array([align_index(tag) for tag in modality_langs])
    for align_row in sorted(set(align_rows.tolist())):
        rows = np.nonzero(align_rows == align_row)[0]
        align_groups.append((align_row, rows))
        aligned[rows] = raw[rows] @ params.align[align_row].T

    activate = _nonlinearity(params.nonlinearity)
    hiddens = [aligned]
    for layer in range(params.num_layers):
        hiddens.append(activate(hiddens[-1] @ params.mlp_w[layer].T + params.mlp_b[layer]))

    num_layers = params.num_layers
    alphas = np.zeros((num_layers + 1, batch_size, max_len))
    pooled = np.zeros((num_layers + 1, batch_size, params.dim))
    for layer, hidden in enumerate(hiddens):
        scores = hidden @ params.attn[modality, layer]
        alpha = masked_softmax(scores, mask > 0)
        alphas[layer] = alpha
        pooled[layer] = (alpha[:, None, :] @ hidden)[:, 0, :]

    layer_weights = masked_softmax(np.asarray(params.fusion_logits, dtype=np.float64))
    combined = np.tensordot(layer_weights, pooled, axes=(0, 0))
    fused = params.fusion_scale * combined
    norms = np.linalg.norm(fused, axis=1)
    if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
        raise ZeroVectorError("encoder output has zero or non-finite norm")
    out = fused / norms[:, None]

    trace = None
    if want_trace:
        trace = BatchTrace(
            ids=ids, mask=mask, align_groups=align_groups, modality=modality,
            raw=raw, hiddens=hiddens, alphas=alphas, pooled=pooled,
            layer_weights=layer_weights, combined=combined, fused=fused,
            norms=norms, out=out,
        )
    return out, trace


# --- checkpoint serialization ----------------------------------------------

def checkpoint_payload(params: EncoderParams) -> bytes:
    """Dims record plus all tensors as little-endian float32 bytes."""
    dims = np.array(
        [params.vocab_size, params.dim, params.num_layers, len(ALIGN_KEYS)],
        dtype="<u4",
    )
    chunks = [dims.tobytes()]
    chunks.append(np.ascontiguousarray(params.embed, dtype="<f4").tobytes())
    chunks.append(np.ascontiguousarray(params.align, dtype="<f4").tobytes())
    for layer in range(params.num_layers):
        chunks.append(np.ascontiguousarray(params.mlp_w[layer], dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(params.mlp_b[layer], dtype="<f4").tobytes())
    chunks.append(np.ascontiguousarray(params.attn, dtype="<f4").tobytes())
    chunks.append(np.ascontiguousarray(params.fusion_logits, dtype="<f4").tobytes())
    chunks.append(np.array([params.fusion_scale], dtype="<f4").tobytes())
    return b"".join(chunks)


def fingerprint(params: EncoderParams) -> bytes:
    """32-byte digest identifying a checkpoint's exact float32 contents."""
    return hashlib.sha256(checkpoint_payload(params)).digest()


def save_checkpoint(params: EncoderParams, path: str | Path) -> None:
    payload = checkpoint_payload(params)
    checksum = np.array([zlib.crc32(payload)], dtype="<u4").tobytes()
    Path(path).write_bytes(_CHECKPOINT_MAGIC + payload + checksum)


def load_checkpoint(
    path: str | Path,
    expected_dims: tuple[int, int, int] | None = None,
) -> EncoderParams:
    """Read a checkpoint; validates magic, length, checksum, and optionally
    the expected (vocab_size, d, num_layers)."""
    blob = Path(path).read_bytes()
    if not blob.startswith(_CHECKPOINT_MAGIC):
        raise CheckpointFormatError(f"{path}: bad magic bytes")
    if len(blob) < len(_CHECKPOINT_MAGIC) + 16 + 4:
        raise CheckpointFormatError(f"{path}: truncated header")
    payload, stored = blob[len(_CHECKPOINT_MAGIC) : -4], blob[-4:]
    if zlib.crc32(payload) != int(np.frombuffer(stored, dtype="<u4")[0]):
        raise CheckpointFormatError(f"{path}: checksum mismatch")

    dims = np.frombuffer(payload[:16], dtype="<u4")
    vocab_size, dim, num_layers, align_count = (int(x) for x in dims)
    if align_count != len(ALIGN_KEYS):
        raise DimensionMismatchError(
            f"{path}: {align_count} alignment maps, expected {len(ALIGN_KEYS)}"
        )
    if expected_dims is not None and (vocab_size, dim, num_layers) != tuple(expected_dims):
        raise DimensionMismatchError(
            f"{path}: dims {(vocab_size, dim, num_layers)} != expected {tuple(expected_dims)}"
        )
    counts = {
        "embed": vocab_size * dim,
        "align": len(ALIGN_KEYS) * dim * dim,
        "mlp": num_layers * (dim * dim + dim),
        "attn": 2 * (num_layers + 1) * dim,
        "fusion": (num_layers + 1) + 1,
    }
    expected_bytes = 16 + 4 * sum(counts.values())
    if len(payload) != expected_bytes:
        raise CheckpointFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected_bytes}"
        )

    floats = np.frombuffer(payload[16:], dtype="<f4").astype(np.float64)
    cursor = 0

    def take(count: int, shape: tuple[int, ...]) -> np.ndarray:
        nonlocal cursor
        block = floats[cursor : cursor + count].reshape(shape)
        cursor += count
        return block.copy()

    embed = take(vocab_size * dim, (vocab_size, dim))
    align = take(len(ALIGN_KEYS) * dim * dim, (len(ALIGN_KEYS), dim, dim))
    mlp_w = np.zeros((num_layers, dim, dim))
    mlp_b = np.zeros((num_layers, dim))
    for layer in range(num_layers):
        mlp_w[layer] = take(dim * dim, (dim, dim))
        mlp_b[layer] = take(dim, (dim,))
    attn = take(2 * (num_layers + 1) * dim, (2, num_layers + 1, dim))
    fusion_logits = take(num_layers + 1, (num_layers + 1,))
    fusion_scale = float(take(1, (1,))[0])
    return EncoderParams(
        embed=embed, align=align, mlp_w=mlp_w, mlp_b=mlp_b, attn=attn,
        fusion_logits=fusion_logits, fusion_scale=fusion_scale,
    )
