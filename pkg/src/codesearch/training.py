"""Contrastive training of the encoder: triplet margin loss or in-batch
softmax loss, random and hard negative mining, hand-rolled backpropagation,
and an adaptive-moment optimizer.

Training is single-threaded and deterministic for a fixed seed. Queries are
the doc-token side, positives/negatives the code side; cosine is symmetric
so this matches the triple formulation with roles swapped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import CODE_TOKEN_CAP, DOC_TOKEN_CAP, CorpusSplit
from .encoder import BatchTrace, EncoderParams, encode_batch
from .errors import SamplingError, TrainingError, ZeroVectorError
from .tokenizer import BpeModel, encode_tokens

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
GRAD_CLIP_NORM = 5.0

LOSS_KINDS = ("margin", "in_batch_softmax")


@dataclass
class TrainConfig:
    loss_kind: str = "margin"
    margin: float = 0.5
    batch_size: int = 256
    epochs: int = 10
    learning_rate: float = 1e-3
    seed: int = 0
    hard_mining: bool = False
    temperature: float = 0.05

    def __post_init__(self) -> None:
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.loss_kind == "in_batch_softmax" and self.batch_size < 2:
            raise ValueError("in_batch_softmax needs batch_size >= 2")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


def margin_loss(sim_pos: float, sim_neg: float, margin: float) -> float:
    """Hinge: max(0, margin - sim_pos + sim_neg)."""
    return max(0.0, margin - sim_pos + sim_neg)


def in_batch_softmax_loss(sim_matrix: np.ndarray, temperature: float) -> float:
    """Mean over rows of -log softmax(S_i / tau) at the diagonal positive."""
    sim_matrix = np.asarray(sim_matrix, dtype=np.float64)
    if sim_matrix.ndim != 2 or sim_matrix.shape[0] != sim_matrix.shape[1]:
        raise ValueError("sim_matrix must be square")
    if sim_matrix.shape[0] < 2:
        raise ValueError("in-batch softmax needs at least 2 rows")
    scaled = sim_matrix / temperature
    shifted = scaled - scaled.max(axis=1, keepdims=True)
    log_softmax = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-np.mean(np.diag(log_softmax)))


def sample_negatives(
    positions: Sequence[int], corpus_size: int, rng: np.random.Generator
) -> np.ndarray:
    """Uniform draw of one negative per item, excluding the item itself.

    ``positions`` are indices into the corpus entry list; reproducible from
    the generator state.
    """
    if corpus_size < 2:
        raise SamplingError("need at least 2 corpus entries to sample negatives")
    positions = np.asarray(positions, dtype=np.int64)
    draws = rng.integers(0, corpus_size - 1, size=len(positions))
    return draws + (draws >= positions)


def mine_hard_negatives(sim_matrix: np.ndarray) -> np.ndarray:
    """Per row, the index of the highest-scoring non-diagonal entry; ties
    resolve to the smallest index."""
    sim_matrix = np.asarray(sim_matrix, dtype=np.float64)
    if sim_matrix.ndim != 2 or sim_matrix.shape[0] != sim_matrix.shape[1]:
        raise ValueError("sim_matrix must be square")
    masked = sim_matrix.copy()
    np.fill_diagonal(masked, -np.inf)
    return masked.argmax(axis=1)


@dataclass
class GradientSet:
    """Gradient (or optimizer-moment) tensors shaped like EncoderParams."""

    embed: np.ndarray
    align: np.ndarray
    mlp_w: np.ndarray
    mlp_b: np.ndarray
    attn: np.ndarray
    fusion_logits: np.ndarray
    fusion_scale: float = 0.0

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "GradientSet":
        return cls(
            embed=np.zeros_like(params.embed),
            align=np.zeros_like(params.align),
            mlp_w=np.zeros_like(params.mlp_w),
            mlp_b=np.zeros_like(params.mlp_b),
            attn=np.zeros_like(params.attn),
            fusion_logits=np.zeros_like(params.fusion_logits),
            fusion_scale=0.0,
        )

    def arrays(self) -> list[np.ndarray]:
        return [self.embed, self.align, self.mlp_w, self.mlp_b, self.attn,
                self.fusion_logits]

    def global_norm(self) -> float:
        total = sum(float(np.sum(a * a)) for a in self.arrays())
        total += self.fusion_scale ** 2
        return math.sqrt(total)

    def scale_(self, factor: float) -> None:
        for array in self.arrays():
            array *= factor
        self.fusion_scale *= factor

    def all_finite(self) -> bool:
        return (
            all(np.isfinite(a).all() for a in self.arrays())
            and math.isfinite(self.fusion_scale)
        )


def backward_batch(
    trace: BatchTrace,
    grad_out: np.ndarray,
    params: EncoderParams,
    grads: GradientSet,
) -> None:
    """Accumulate d(loss)/d(params) given d(loss)/d(normalized outputs).

    Exact analytic gradients through normalization, fusion, the attention
    softmax Jacobian, the MLP, alignment, and the embedding lookup.
    """
    num_layers = params.num_layers
    mask = trace.mask

    # L2 normalization: u = v / |v|
    inner = np.einsum("bd,bd->b", grad_out, trace.out)
    g_fused = (grad_out - inner[:, None] * trace.out) / trace.norms[:, None]

    # fusion scale and softmax-weighted combination
    grads.fusion_scale += float(np.einsum("bd,bd->", g_fused, trace.combined))
    g_combined = params.fusion_scale * g_fused
    g_layer_w = np.einsum("bd,lbd->l", g_combined, trace.pooled)
    s = trace.layer_weights
    grads.fusion_logits += s * (g_layer_w - float(np.dot(g_layer_w, s)))
    g_pooled = s[:, None, None] * g_combined[None, :, :]

    # attention pooling per layer (masked softmax Jacobian)
    dim = params.dim
    g_hidden = []
    for layer in range(num_layers + 1):
        hidden = trace.hiddens[layer]
        alpha = trace.alphas[layer]
        g_alpha = (hidden @ g_pooled[layer][:, :, None])[:, :, 0]
        grad_h = alpha[:, :, None] * g_pooled[layer][:, None, :]
        row_inner = np.einsum("bm,bm->b", alpha, g_alpha)
        g_scores = alpha * (g_alpha - row_inner[:, None])
        grads.attn[trace.modality, layer] += (
            g_scores.reshape(-1) @ hidden.reshape(-1, dim)
        )
        grad_h += g_scores[:, :, None] * params.attn[trace.modality, layer][None, None, :]
        g_hidden.append(grad_h)

    # MLP backward, folding in each layer's pooling gradient
    g_flow = g_hidden[num_layers]
    for layer in range(num_layers, 0, -1):
        h_out = trace.hiddens[layer]
        if params.nonlinearity == "tanh":
            g_z = g_flow * (1.0 - h_out * h_out)
        else:
            g_z = g_flow
        g_z = g_z * mask[:, :, None]
        grads.mlp_w[layer - 1] += (
            g_z.reshape(-1, dim).T @ trace.hiddens[layer - 1].reshape(-1, dim)
        )
        grads.mlp_b[layer - 1] += g_z.sum(axis=(0, 1))
        g_flow = g_z @ params.mlp_w[layer - 1] + g_hidden[layer - 1]

    # alignment maps and embedding table, per language group
    g_aligned = g_flow * mask[:, :, None]
    for align_row, rows in trace.align_groups:
        g_group = g_aligned[rows]
        grads.align[align_row] += (
            g_group.reshape(-1, dim).T @ trace.raw[rows].reshape(-1, dim)
        )
        g_raw = g_group @ params.align[align_row]
        valid = trace.mask[rows] > 0
        np.add.at(grads.embed, trace.ids[rows][valid], g_raw[valid])


def compute_loss_and_grads(
    params: EncoderParams,
    doc_seqs: Sequence[Sequence[int]],
    code_seqs: Sequence[Sequence[int]],
    code_langs: Sequence[str],
    config: TrainConfig,
    neg_seqs: Sequence[Sequence[int]] | None = None,
    neg_langs: Sequence[str] | None = None,
    want_grads: bool = True,
) -> tuple[float, GradientSet | None]:
    """One batch forward (and optionally backward).

    Margin loss uses ``neg_seqs`` when given, otherwise mines the hardest
    in-batch negative per row. The softmax loss contrasts each query against
    every code vector in the batch.
    """
    batch = len(doc_seqs)
    out_q, trace_q = encode_batch(doc_seqs, "doc", params, want_trace=want_grads)
    out_c, trace_c = encode_batch(code_seqs, list(code_langs), params, want_trace=want_grads)

    grads = GradientSet.zeros_like(params) if want_grads else None

    if config.loss_kind == "margin":
        out_n = None
        trace_n = None
        hard_rows = None
        if neg_seqs is not None:
            out_n, trace_n = encode_batch(
                neg_seqs, list(neg_langs), params, want_trace=want_grads
            )
        else:
            sim = out_q @ out_c.T
            hard_rows = mine_hard_negatives(sim)
            out_n = out_c[hard_rows]
        sim_pos = np.einsum("bd,bd->b", out_q, out_c)
        sim_neg = np.einsum("bd,bd->b", out_q, out_n)
        slack = config.margin - sim_pos + sim_neg
        loss = float(np.mean(np.maximum(slack, 0.0)))
        if not want_grads:
            return loss, None
        active = (slack > 0).astype(np.float64) / batch
        g_q = -active[:, None] * out_c + active[:, None] * out_n
        g_c = -active[:, None] * out_q
        if hard_rows is not None:
            np.add.at(g_c, hard_rows, active[:, None] * out_q)
            backward_batch(trace_q, g_q, params, grads)
            backward_batch(trace_c, g_c, params, grads)
        else:
            g_n = active[:, None] * out_q
            backward_batch(trace_q, g_q, params, grads)
            backward_batch(trace_c, g_c, params, grads)
            backward_batch(trace_n, g_n, params, grads)
        return loss, grads

    # in-batch softmax over the full similarity matrix
    sim = out_q @ out_c.T
    loss = in_batch_softmax_loss(sim, config.temperature)
    if not want_grads:
        return loss, None
    scaled = sim / config.temperature
    shifted = scaled - scaled.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    d_sim = (probs - np.eye(batch)) / (batch * config.temperature)
    backward_batch(trace_q, d_sim @ out_c, params, grads)
    backward_batch(trace_c, d_sim.T @ out_q, params, grads)
    return loss, grads


@dataclass
class AdamState:
    first: GradientSet
    second: GradientSet
    step: int = 0

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "AdamState":
        return cls(GradientSet.zeros_like(params), GradientSet.zeros_like(params))


def adam_update(
    params: EncoderParams,
    grads: GradientSet,
    state: AdamState,
    learning_rate: float,
) -> None:
    """In-place adaptive-moment update with bias correction."""
    state.step += 1
    correction1 = 1.0 - ADAM_BETA1 ** state.step
    correction2 = 1.0 - ADAM_BETA2 ** state.step

    param_arrays = [params.embed, params.align, params.mlp_w, params.mlp_b,
                    params.attn, params.fusion_logits]
    for param, grad, m, v in zip(
        param_arrays, grads.arrays(), state.first.arrays(), state.second.arrays()
    ):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * grad
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * grad * grad
        param -= learning_rate * (m / correction1) / (np.sqrt(v / correction2) + ADAM_EPS)

    g = grads.fusion_scale
    state.first.fusion_scale = (
        ADAM_BETA1 * state.first.fusion_scale + (1.0 - ADAM_BETA1) * g
    )
    state.second.fusion_scale = (
        ADAM_BETA2 * state.second.fusion_scale + (1.0 - ADAM_BETA2) * g * g
    )
    params.fusion_scale -= learning_rate * (
        (state.first.fusion_scale / correction1)
        / (math.sqrt(state.second.fusion_scale / correction2) + ADAM_EPS)
    )


@dataclass(frozen=True)
class EncodedEntry:
    """A corpus entry pre-tokenized to id sequences for batching."""

    doc_ids: tuple[int, ...]
    code_ids: tuple[int, ...]
    language: str


def encode_corpus(split: CorpusSplit, bpe: BpeModel) -> list[EncodedEntry]:
    """BPE-encode every entry, re-capping ids at the surface-token limits."""
    encoded = []
    for entry in split.entries:
        encoded.append(
            EncodedEntry(
                doc_ids=tuple(encode_tokens(entry.doc_tokens, bpe, cap=DOC_TOKEN_CAP)),
                code_ids=tuple(encode_tokens(entry.code_tokens, bpe, cap=CODE_TOKEN_CAP)),
                language=entry.language,
            )
        )
    return encoded


def train(
    config: TrainConfig,
    split: CorpusSplit,
    params: EncoderParams,
    bpe: BpeModel,
    log_path: str | Path | None = None,
    on_epoch: Callable[[int, EncoderParams], None] | None = None,
) -> tuple[EncoderParams, list[float]]:
    """Train a copy of ``params`` on the split; returns it with the per-epoch
    loss log. The input parameters are left untouched.

    Hard mining (margin loss only) warms up with random negatives for the
    first epoch. Gradients are clipped at global norm 5.0; a non-finite loss
    aborts with a diagnostic naming the batch.
    """
    entries = encode_corpus(split, bpe)
    if len(entries) < 2:
        raise TrainingError("training needs at least 2 corpus entries")
    params = params.copy()
    rng = np.random.default_rng(config.seed)
    state = AdamState.zeros_like(params)
    log_handle = open(log_path, "a", encoding="utf-8") if log_path else None

    def emit(line: str) -> None:
        print(line)
        if log_handle:
            log_handle.write(line + "\n")

    epoch_losses: list[float] = []
    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(entries))
            total_loss = 0.0
            total_items = 0
            for batch_index, start in enumerate(range(0, len(order), config.batch_size)):
                positions = order[start : start + config.batch_size]
                if config.loss_kind == "in_batch_softmax" and len(positions) < 2:
                    continue  # a singleton tail has no in-batch negatives
                doc_seqs = [entries[i].doc_ids for i in positions]
                code_seqs = [entries[i].code_ids for i in positions]
                code_langs = [entries[i].language for i in positions]

                neg_seqs = neg_langs = None
                if config.loss_kind == "margin" and not (
                    config.hard_mining and epoch >= 2
                ):
                    neg_positions = sample_negatives(positions, len(entries), rng)
                    neg_seqs = [entries[i].code_ids for i in neg_positions]
                    neg_langs = [entries[i].language for i in neg_positions]

                try:
                    loss, grads = compute_loss_and_grads(
                        params, doc_seqs, code_seqs, code_langs, config,
                        neg_seqs=neg_seqs, neg_langs=neg_langs,
                    )
                except ZeroVectorError as exc:
                    raise TrainingError(
                        f"non-finite encoding at epoch {epoch} batch {batch_index}: {exc}"
                    ) from exc
                if not math.isfinite(loss) or not grads.all_finite():
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch} batch {batch_index}"
                    )
                norm = grads.global_norm()
                if norm > GRAD_CLIP_NORM:
                    grads.scale_(GRAD_CLIP_NORM / norm)
                adam_update(params, grads, state, config.learning_rate)
                total_loss += loss * len(positions)
                total_items += len(positions)

            mean_loss = total_loss / max(total_items, 1)
            epoch_losses.append(mean_loss)
            emit(f"epoch {epoch} loss {mean_loss:.6f} lr {config.learning_rate:g}")
            if not params.all_finite():
                raise TrainingError(f"non-finite parameters after epoch {epoch}")
            if on_epoch is not None:
                on_epoch(epoch, params)
    finally:
        if log_handle:
            log_handle.close()
    return params, epoch_losses
