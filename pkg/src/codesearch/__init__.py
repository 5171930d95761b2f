"""Semantic code search: a neural bag-of-words bi-encoder with per-language
alignment, self-attention pooling, and layer fusion; BPE subword
tokenization; exact cosine top-K retrieval; and NDCG/MRR evaluation."""

from .corpus import (
    CODE_TOKEN_CAP,
    DOC_TOKEN_CAP,
    LANGUAGES,
    PARTITIONS,
    CorpusEntry,
    CorpusSplit,
    check_partition_disjoint,
    entry_to_line,
    load_corpus_dir,
    load_split,
    parse_corpus_line,
    split_stats,
)
from .encoder import (
    ALIGN_KEYS,
    EmbeddingVector,
    EncoderParams,
    ForwardTrace,
    attention_pool,
    cosine_sim,
    embed_and_align,
    encode,
    encode_batch,
    fingerprint,
    fuse,
    init_params,
    load_checkpoint,
    masked_softmax,
    mlp_forward,
    save_checkpoint,
)
from .evaluation import (
    EvalConfig,
    EvalReport,
    EvalTask,
    evaluate,
    evaluate_tasks,
    mrr,
    ndcg,
    render_report,
)
from .index import (
    EmbeddingIndex,
    RankedResult,
    build_index,
    load_index,
    query_topk,
    save_index,
)
from .tokenizer import (
    BpeModel,
    bpe_decode,
    bpe_encode,
    bpe_train,
    encode_tokens,
    lex_code,
    load_bpe,
    save_bpe,
)
from .training import (
    TrainConfig,
    in_batch_softmax_loss,
    margin_loss,
    mine_hard_negatives,
    sample_negatives,
    train,
)

__version__ = "0.1.0"
