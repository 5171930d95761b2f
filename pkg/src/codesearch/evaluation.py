"""Ranking-quality evaluation: NDCG and MRR per language plus the unweighted
mean across languages.

Protocol: each test query is ranked against its true snippet plus seeded
same-language distractors (999 by default), binary relevance, log2 discount,
1-based ranks, no cutoff unless configured. Ties order by ascending id,
matching retrieval.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .corpus import DOC_TOKEN_CAP, LANGUAGES, CorpusSplit
from .encoder import EncoderParams, encode_batch, fingerprint
from .errors import NoRelevantCandidateError, StaleIndexError
from .index import EmbeddingIndex
from .tokenizer import BpeModel, encode_tokens

logger = logging.getLogger(__name__)

# Published full-scale training run of this model family (weighted-fusion
# variant), kept as a reference row in reports; not a desk-scale target.
PUBLISHED_REFERENCE = {
    "model": "NBoW+Weighted (published full-scale run)",
    "mean": 0.3841,
    "go": 0.3253,
    "java": 0.4248,
    "javascript": 0.3611,
    "php": 0.3399,
    "python": 0.4717,
    "ruby": 0.3816,
}


def ndcg(
    ranking: Sequence[str],
    relevance: Mapping[str, int] | Callable[[str], int],
    cutoff: int | None = None,
) -> float:
    """Normalized discounted cumulative gain of one ranked candidate list.

    Gain of the item at 1-based rank i is rel/log2(i+1); the normalizer
    places all relevant items first. Raises NoRelevantCandidateError when
    nothing in the ranking is relevant.
    """
    if len(ranking) == 0:
        raise ValueError("ranking is empty")
    if callable(relevance):
        gains = [float(relevance(item)) for item in ranking]
    else:
        gains = [float(relevance.get(item, 0)) for item in ranking]
    total_relevant = sum(1 for g in gains if g > 0)
    if total_relevant == 0:
        raise NoRelevantCandidateError("no relevant candidate in ranking")
    limit = len(ranking) if cutoff is None else min(cutoff, len(ranking))
    dcg = sum(gains[i] / math.log2(i + 2) for i in range(limit))
    ideal_gains = sorted(gains, reverse=True)
    idcg = sum(ideal_gains[i] / math.log2(i + 2) for i in range(limit))
    return dcg / idcg


def mrr(ranks: Iterable[int | None]) -> float:
    """Mean reciprocal rank; a missing item (None) contributes zero."""
    ranks = list(ranks)
    if not ranks:
        raise ValueError("mrr needs at least one task")
    return sum(1.0 / r if r is not None else 0.0 for r in ranks) / len(ranks)


@dataclass(frozen=True)
class EvalTask:
    """One query with its single relevant snippet and the candidate pool."""

    query_tokens: tuple[str, ...]
    relevant_id: str
    candidate_ids: tuple[str, ...]
    language: str

    def __post_init__(self) -> None:
        if len(self.candidate_ids) < 2:
            raise ValueError("a task needs at least 2 candidates")
        if self.relevant_id not in self.candidate_ids:
            raise ValueError("relevant_id must be among the candidates")


@dataclass(frozen=True)
class LanguageResult:
    ndcg: float
    mrr: float
    tasks: int


@dataclass(frozen=True)
class EvalConfig:
    candidate_size: int = 1000
    seed: int = 0
    cutoff: int | None = None
    max_tasks_per_language: int | None = None


@dataclass(frozen=True)
class EvalReport:
    per_language: dict[str, LanguageResult]
    mean_ndcg: float
    mean_mrr: float
    total_tasks: int
    skipped_tasks: int
    config: dict = field(default_factory=dict)


def rank_by_score(candidate_scores: Mapping[str, float]) -> list[str]:
    """Candidates ordered by (score desc, id asc) - the retrieval tie rule."""
    return sorted(candidate_scores, key=lambda cid: (-candidate_scores[cid], cid))


def evaluate_tasks(
    tasks: Sequence[EvalTask],
    score_fn: Callable[[EvalTask], Mapping[str, float]],
    cutoff: int | None = None,
    config_echo: Mapping | None = None,
) -> EvalReport:
    """Aggregate NDCG/MRR over tasks using an arbitrary scorer.

    The scorer maps a task to per-candidate scores. Tasks whose metric is
    undefined are skipped and counted. The mean is the unweighted average
    over the languages that have tasks; absent languages produce a warning.
    """
    ndcg_by_lang: dict[str, list[float]] = {}
    ranks_by_lang: dict[str, list[int | None]] = {}
    skipped = 0
    for task in tasks:
        scores = score_fn(task)
        ranking = rank_by_score({cid: scores[cid] for cid in task.candidate_ids})
        try:
            task_ndcg = ndcg(ranking, {task.relevant_id: 1}, cutoff=cutoff)
        except NoRelevantCandidateError:
            skipped += 1
            continue
        position = ranking.index(task.relevant_id) + 1
        if cutoff is not None and position > cutoff:
            rank: int | None = None
        else:
            rank = position
        ndcg_by_lang.setdefault(task.language, []).append(task_ndcg)
        ranks_by_lang.setdefault(task.language, []).append(rank)

    per_language = {}
    for language in sorted(ndcg_by_lang):
        values = ndcg_by_lang[language]
        per_language[language] = LanguageResult(
            ndcg=sum(values) / len(values),
            mrr=mrr(ranks_by_lang[language]),
            tasks=len(values),
        )
    missing = [lang for lang in LANGUAGES if lang not in per_language]
    if missing:
        logger.warning(
            "no evaluation tasks for %s; mean computed over %d present language(s)",
            ", ".join(missing), len(per_language),
        )
    if not per_language:
        raise ValueError("no evaluable tasks")
    mean_ndcg = sum(r.ndcg for r in per_language.values()) / len(per_language)
    mean_mrr = sum(r.mrr for r in per_language.values()) / len(per_language)
    return EvalReport(
        per_language=per_language,
        mean_ndcg=mean_ndcg,
        mean_mrr=mean_mrr,
        total_tasks=sum(r.tasks for r in per_language.values()),
        skipped_tasks=skipped,
        config=dict(config_echo or {}),
    )


def build_tasks(
    split: CorpusSplit,
    index: EmbeddingIndex,
    config: EvalConfig,
) -> tuple[list[EvalTask], int]:
    """One task per test entry: the true snippet plus seeded same-language
    distractors drawn from the index. Entries missing from the index or too
    lonely in their language are skipped (counted)."""
    rng = np.random.default_rng(config.seed)
    ids_by_language: dict[str, list[str]] = {}
    for snippet_id, language in zip(index.ids, index.languages):
        ids_by_language.setdefault(language, []).append(snippet_id)

    tasks: list[EvalTask] = []
    skipped = 0
    taken: dict[str, int] = {}
    for entry in split.entries:
        cap = config.max_tasks_per_language
        if cap is not None and taken.get(entry.language, 0) >= cap:
            continue
        pool = ids_by_language.get(entry.language, [])
        if index.row_of(entry.id) is None or len(pool) < 2:
            skipped += 1
            continue
        others = [cid for cid in pool if cid != entry.id]
        want = min(config.candidate_size - 1, len(others))
        if want < 1:
            skipped += 1
            continue
        chosen = rng.choice(len(others), size=want, replace=False)
        candidates = tuple([entry.id] + [others[i] for i in chosen])
        tasks.append(
            EvalTask(
                query_tokens=entry.doc_tokens,
                relevant_id=entry.id,
                candidate_ids=candidates,
                language=entry.language,
            )
        )
        taken[entry.language] = taken.get(entry.language, 0) + 1
    return tasks, skipped


def evaluate(
    params: EncoderParams,
    bpe: BpeModel,
    index: EmbeddingIndex,
    split: CorpusSplit,
    config: EvalConfig = EvalConfig(),
) -> EvalReport:
    """Score every test query against its candidate set via the index."""
    if index.model_fingerprint != fingerprint(params):
        raise StaleIndexError("index was built from a different checkpoint")
    tasks, skipped_build = build_tasks(split, index, config)

    # Pre-encode all distinct queries in batches.
    token_lists = {task.query_tokens for task in tasks}
    query_vectors: dict[tuple[str, ...], np.ndarray] = {}
    pending = []
    for tokens in sorted(token_lists):
        ids = encode_tokens(tokens, bpe, cap=DOC_TOKEN_CAP)
        if ids:
            pending.append((tokens, ids))
    for start in range(0, len(pending), 1024):
        chunk = pending[start : start + 1024]
        out, _ = encode_batch([ids for _, ids in chunk], "doc", params)
        for (tokens, _), vector in zip(chunk, out):
            query_vectors[tokens] = vector

    vectors64 = index.vectors.astype(np.float64)

    def score_fn(task: EvalTask) -> dict[str, float]:
        query = query_vectors[task.query_tokens]
        rows = np.array([index.row_of(cid) for cid in task.candidate_ids])
        scores = vectors64[rows] @ query
        return dict(zip(task.candidate_ids, scores.tolist()))

    evaluable = [t for t in tasks if t.query_tokens in query_vectors]
    skipped_build += len(tasks) - len(evaluable)
    report = evaluate_tasks(
        evaluable,
        score_fn,
        cutoff=config.cutoff,
        config_echo={
            "candidate_size": config.candidate_size,
            "seed": config.seed,
            "cutoff": config.cutoff,
            "partition": split.partition,
        },
    )
    return EvalReport(
        per_language=report.per_language,
        mean_ndcg=report.mean_ndcg,
        mean_mrr=report.mean_mrr,
        total_tasks=report.total_tasks,
        skipped_tasks=report.skipped_tasks + skipped_build,
        config=report.config,
    )


def render_report(report: EvalReport) -> str:
    """Aligned plain-text table mirroring the published benchmark layout."""
    columns = ["Model", "NDCG", "Go", "Java", "JavaScript", "Php", "Python", "Ruby"]
    rows = []

    def metric_row(label: str, mean_value: float, getter) -> list[str]:
        cells = [label, f"{mean_value:.4f}"]
        for language in LANGUAGES:
            result = report.per_language.get(language)
            cells.append(f"{getter(result):.4f}" if result is not None else "-")
        return cells

    rows.append(metric_row("this-run", report.mean_ndcg, lambda r: r.ndcg))
    rows.append(metric_row("this-run (MRR)", report.mean_mrr, lambda r: r.mrr))
    reference = [PUBLISHED_REFERENCE["model"], f"{PUBLISHED_REFERENCE['mean']:.4f}"]
    reference += [f"{PUBLISHED_REFERENCE[lang]:.4f}" for lang in LANGUAGES]
    rows.append(reference)

    widths = [max(len(columns[i]), *(len(r[i]) for r in rows)) for i in range(len(columns))]
    lines = ["  ".join(c.ljust(widths[i]) for i, c in enumerate(columns)).rstrip()]
    for row in rows:
        lines.append("  ".join(c.ljust(widths[i]) for i, c in enumerate(row)).rstrip())
    lines.append(
        f"tasks: {report.total_tasks}  skipped: {report.skipped_tasks}"
    )
    return "\n".join(lines)


def report_to_json(report: EvalReport) -> str:
    """Machine-diffable report rendering."""
    payload = {
        "mean_ndcg": report.mean_ndcg,
        "mean_mrr": report.mean_mrr,
        "total_tasks": report.total_tasks,
        "skipped_tasks": report.skipped_tasks,
        "per_language": {
            lang: {"ndcg": r.ndcg, "mrr": r.mrr, "tasks": r.tasks}
            for lang, r in report.per_language.items()
        },
        "config": report.config,
        "reference": PUBLISHED_REFERENCE,
    }
    return json.dumps(payload, indent=2, sort_keys=True)
