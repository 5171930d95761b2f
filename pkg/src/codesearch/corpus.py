"""Docstring/function pair corpus: JSONL ingestion, validation, and stats.

One record per line, UTF-8, with fields ``id``, ``language``, ``doc_tokens``,
``code_tokens`` and optional ``raw_doc`` / ``raw_code``. Unknown extra fields
are ignored. Splits are immutable after loading and safe to share across
threads.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import (
    CorpusParseError,
    CorpusQualityError,
    CorpusSchemaError,
    PartitionOverlapError,
    UnsupportedLanguageError,
)

logger = logging.getLogger(__name__)

LANGUAGES = ("go", "java", "javascript", "php", "python", "ruby")
PARTITIONS = ("train", "valid", "test")

# Surface-token caps; BPE id sequences are re-capped to the same limits.
DOC_TOKEN_CAP = 64
CODE_TOKEN_CAP = 256

# Inline markup stripped from raw docstrings before whitespace splitting:
# backtick/asterisk emphasis and reST-style :role: markers.
_MARKUP_RE = re.compile(r"[`*]+|:[A-Za-z_]+:")


@dataclass(frozen=True)
class CorpusEntry:
    """One docstring/function pair; the unit of training and indexing."""

    id: str
    language: str
    doc_tokens: tuple[str, ...]
    code_tokens: tuple[str, ...]
    raw_doc: str | None = None
    raw_code: str | None = None


@dataclass(frozen=True)
class RejectedLine:
    """A corpus line that failed validation, kept for reporting."""

    line_number: int
    reason: str


@dataclass(frozen=True)
class CorpusSplit:
    """All entries of one partition, in file order, plus the load report."""

    partition: str
    entries: tuple[CorpusEntry, ...]
    rejected: tuple[RejectedLine, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.entries)


def summarize_docstring(raw_doc: str) -> list[str]:
    """Turn a full docstring into query tokens.

    Takes the text up to the first blank line, strips inline markup, and
    whitespace-splits. Heuristic by design; pre-tokenized records bypass it.
    """
    first_paragraph = re.split(r"\n\s*\n", raw_doc.strip(), maxsplit=1)[0]
    cleaned = _MARKUP_RE.sub(" ", first_paragraph)
    return cleaned.split()


def _string_list(record: Mapping, name: str) -> list[str]:
    value = record[name]
    if not isinstance(value, list) or not all(isinstance(t, str) for t in value):
        raise CorpusSchemaError(name, f"{name} must be an array of strings")
    return [t for t in value if t]  # drop empty-string tokens


def parse_corpus_line(
    line: str,
    doc_cap: int = DOC_TOKEN_CAP,
    code_cap: int = CODE_TOKEN_CAP,
) -> CorpusEntry:
    """Parse and validate one JSONL record into a CorpusEntry.

    Raises CorpusParseError (with byte offset) on malformed JSON,
    CorpusSchemaError naming the offending field, or
    UnsupportedLanguageError for a language outside the supported six.
    """
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        byte_offset = len(line[: exc.pos].encode("utf-8"))
        raise CorpusParseError(
            f"malformed record at byte {byte_offset}: {exc.msg}", byte_offset
        ) from exc
    if not isinstance(record, dict):
        raise CorpusParseError("record is not an object")

    for name in ("id", "language"):
        if name not in record or not isinstance(record[name], str) or not record[name]:
            raise CorpusSchemaError(name)
    language = record["language"]
    if language not in LANGUAGES:
        raise UnsupportedLanguageError(
            f"unsupported language {language!r}; expected one of "
            + "{" + ", ".join(LANGUAGES) + "}"
        )

    raw_doc = record.get("raw_doc")
    raw_code = record.get("raw_code")
    for name, value in (("raw_doc", raw_doc), ("raw_code", raw_code)):
        if value is not None and not isinstance(value, str):
            raise CorpusSchemaError(name, f"{name} must be a string")

    if "doc_tokens" in record:
        doc_tokens = _string_list(record, "doc_tokens")
    elif raw_doc is not None:
        doc_tokens = summarize_docstring(raw_doc)
    else:
        raise CorpusSchemaError("doc_tokens")
    if "code_tokens" not in record:
        raise CorpusSchemaError("code_tokens")
    code_tokens = _string_list(record, "code_tokens")

    if not doc_tokens:
        raise CorpusSchemaError("doc_tokens", "doc_tokens is empty after validation")
    if not code_tokens:
        raise CorpusSchemaError("code_tokens", "code_tokens is empty after validation")

    return CorpusEntry(
        id=record["id"],
        language=language,
        doc_tokens=tuple(doc_tokens[:doc_cap]),
        code_tokens=tuple(code_tokens[:code_cap]),
        raw_doc=raw_doc,
        raw_code=raw_code,
    )


def entry_to_line(entry: CorpusEntry) -> str:
    """Serialize an entry back to its JSONL form (round-trips via parse)."""
    record = {
        "id": entry.id,
        "language": entry.language,
        "doc_tokens": list(entry.doc_tokens),
        "code_tokens": list(entry.code_tokens),
    }
    if entry.raw_doc is not None:
        record["raw_doc"] = entry.raw_doc
    if entry.raw_code is not None:
        record["raw_code"] = entry.raw_code
    return json.dumps(record, ensure_ascii=False)


def load_split(
    path: str | Path,
    partition: str,
    max_invalid_fraction: float = 0.10,
    doc_cap: int = DOC_TOKEN_CAP,
    code_cap: int = CODE_TOKEN_CAP,
) -> CorpusSplit:
    """Load one partition file, counting (never silently dropping) bad lines.

    Invalid lines are recorded in the returned split's ``rejected`` report.
    Raises CorpusQualityError when more than ``max_invalid_fraction`` of the
    non-blank lines are invalid. Duplicate ids within the file are rejected.
    """
    if partition not in PARTITIONS:
        raise ValueError(f"partition must be one of {PARTITIONS}, got {partition!r}")
    path = Path(path)

    entries: list[CorpusEntry] = []
    rejected: list[RejectedLine] = []
    seen_ids: set[str] = set()
    total = 0
    with path.open("r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            total += 1
            try:
                entry = parse_corpus_line(line, doc_cap=doc_cap, code_cap=code_cap)
            except (CorpusParseError, CorpusSchemaError, UnsupportedLanguageError) as exc:
                rejected.append(RejectedLine(line_number, str(exc)))
                continue
            if entry.id in seen_ids:
                rejected.append(RejectedLine(line_number, f"duplicate id {entry.id!r}"))
                continue
            seen_ids.add(entry.id)
            entries.append(entry)

    if total == 0:
        logger.warning("corpus file %s is empty", path)
    elif rejected:
        fraction = len(rejected) / total
        logger.warning(
            "corpus file %s: rejected %d of %d lines (%.1f%%)",
            path, len(rejected), total, 100.0 * fraction,
        )
        if fraction > max_invalid_fraction:
            raise CorpusQualityError(
                f"{path}: {len(rejected)}/{total} lines invalid "
                f"(limit {max_invalid_fraction:.0%}); first: {rejected[0].reason}"
            )

    return CorpusSplit(partition=partition, entries=tuple(entries), rejected=tuple(rejected))


def check_partition_disjoint(splits: Iterable[CorpusSplit]) -> None:
    """Enforce that no id appears in more than one partition."""
    owner: dict[str, str] = {}
    for split in splits:
        for entry in split.entries:
            previous = owner.get(entry.id)
            if previous is not None and previous != split.partition:
                raise PartitionOverlapError(
                    f"id {entry.id!r} appears in both {previous!r} and {split.partition!r}"
                )
            owner[entry.id] = split.partition


def load_corpus_dir(
    directory: str | Path,
    partitions: Sequence[str] = PARTITIONS,
    max_invalid_fraction: float = 0.10,
) -> dict[str, CorpusSplit]:
    """Load ``<partition>.jsonl`` files from a directory and check disjointness."""
    directory = Path(directory)
    splits: dict[str, CorpusSplit] = {}
    for partition in partitions:
        path = directory / f"{partition}.jsonl"
        if path.exists():
            splits[partition] = load_split(
                path, partition, max_invalid_fraction=max_invalid_fraction
            )
    if not splits:
        raise FileNotFoundError(f"no <partition>.jsonl files found in {directory}")
    check_partition_disjoint(splits.values())
    return splits


def split_stats(splits: Iterable[CorpusSplit]) -> dict[tuple[str, str], int]:
    """Per-(language, partition) entry counts, zero-filled for all languages."""
    splits = list(splits)
    counts: Counter[tuple[str, str]] = Counter()
    for split in splits:
        for entry in split.entries:
            counts[(entry.language, split.partition)] += 1
    table = {}
    for partition in sorted({s.partition for s in splits}):
        for language in LANGUAGES:
            table[(language, partition)] = counts.get((language, partition), 0)
    return table


def format_split_stats(stats: Mapping[tuple[str, str], int]) -> str:
    """Render the stats table as aligned plain text."""
    partitions = sorted({p for (_, p) in stats})
    header = "partition  " + "".join(f"{lang:>12}" for lang in LANGUAGES) + f"{'total':>12}"
    lines = [header]
    for partition in partitions:
        row = [f"{partition:<11}"]
        row_total = 0
        for language in LANGUAGES:
            n = stats.get((language, partition), 0)
            row_total += n
            row.append(f"{n:>12}")
        row.append(f"{row_total:>12}")
        lines.append("".join(row))
    return "\n".join(lines)
