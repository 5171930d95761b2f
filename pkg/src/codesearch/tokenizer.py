"""Subword tokenization: a heuristic code lexer plus a trainable BPE model.

The corpus path consumes pre-tokenized records; the lexer here handles raw
text (queries typed at the CLI, raw function bodies). BPE merges operate
strictly within surface-token boundaries, so word boundaries are structural
and no marker symbol takes part in merges; a reserved boundary id exists for
callers that want explicit separators in encoded sequences.

Serialized model format (UTF-8, LF, bit-exact reproducible):
    BPE v1 <vocab_size>
    <left> <right>          one line per merge, in rank order
    <id> <subword>          one line per vocab entry, ids ascending from 0
Whitespace and backslashes inside subwords are escaped (``\\s`` for space,
``\\n``, ``\\t``, ``\\r``, ``\\\\``) so every line stays space-splittable.
"""

from __future__ import annotations

import heapq
import re
from collections import Counter
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import BpeFormatError, BpeTrainingError, TokenIdRangeError, VocabSizeError

PAD_ID = 0
UNK_ID = 1
BOUNDARY_ID = 2
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
BOUNDARY_TOKEN = "<w>"
SPECIALS = (PAD_TOKEN, UNK_TOKEN, BOUNDARY_TOKEN)

STRING_SENTINEL = "<str>"

_TOKEN_RE = re.compile(
    r"""
      (?P<string>"(?:\\.|[^"\\])*"|'(?:\\.|[^'\\])*')
    | (?P<number>[0-9]+(?:\.[0-9]+)?)
    | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
    | (?P<ws>\s+)
    | (?P<other>.)
    """,
    re.VERBOSE | re.DOTALL,
)
# Boundaries inside identifiers: aB -> a|B, ABc -> A|Bc.
_CAMEL_RE = re.compile(r"(?<=[a-z0-9])(?=[A-Z])|(?<=[A-Z])(?=[A-Z][a-z])")


def split_identifier(identifier: str) -> list[str]:
    """Split on underscores and camel-case boundaries, lowercased."""
    pieces = []
    for part in identifier.split("_"):
        for piece in _CAMEL_RE.split(part):
            if piece:
                pieces.append(piece.lower())
    return pieces


def lex_code(source: str, language: str | None = None) -> list[str]:
    """Tokenize raw text into surface tokens.

    Total and deterministic: identifiers are split on underscore and
    camel-case boundaries and lowercased, numeric literals pass through,
    string literals collapse to one sentinel, and every other non-space
    character becomes a single-character token. The same rules apply to all
    languages; ``language`` is a hook for language-specific refinements.
    """
    tokens: list[str] = []
    for match in _TOKEN_RE.finditer(source):
        kind = match.lastgroup
        if kind == "ws":
            continue
        if kind == "string":
            tokens.append(STRING_SENTINEL)
        elif kind == "ident":
            tokens.extend(split_identifier(match.group()))
        else:  # number, other
            tokens.append(match.group())
    return tokens


class BpeModel:
    """Ordered merge rules plus the id-indexed subword vocabulary.

    Immutable after training; encode/decode are safe to call concurrently.
    """

    def __init__(self, merges: Sequence[tuple[str, str]], vocab: Sequence[str]):
        self.merges: tuple[tuple[str, str], ...] = tuple(tuple(m) for m in merges)
        self.vocab: tuple[str, ...] = tuple(vocab)
        if self.vocab[: len(SPECIALS)] != SPECIALS:
            raise BpeFormatError(f"vocab must start with specials {SPECIALS}")
        # A content subword may shadow a special of the same string (freak
        # data can merge e.g. "<w>" out of its characters); encode then maps
        # the string to the content id, while decode stays id-keyed.
        first_seen: dict[str, int] = {}
        for position, subword in enumerate(self.vocab):
            if subword in first_seen and first_seen[subword] >= len(SPECIALS):
                raise BpeFormatError(f"vocab contains duplicate subword {subword!r}")
            first_seen.setdefault(subword, position)
        self.token_to_id: dict[str, int] = {s: i for i, s in enumerate(self.vocab)}
        self.merge_rank: dict[tuple[str, str], int] = {
            pair: rank for rank, pair in enumerate(self.merges)
        }
        for left, right in self.merges:
            if left + right not in self.token_to_id:
                raise BpeFormatError(f"merge product {left + right!r} missing from vocab")
        self._encode_cache: dict[str, tuple[int, ...]] = {}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, BpeModel)
            and self.merges == other.merges
            and self.vocab == other.vocab
        )


def _pairs_in(symbols: Sequence[str]) -> Iterable[tuple[str, str]]:
    return zip(symbols, symbols[1:])


def _merge_symbols(symbols: list[str], pair: tuple[str, str], joined: str) -> list[str]:
    """Replace occurrences of ``pair`` left-to-right, non-overlapping."""
    left, right = pair
    out: list[str] = []
    i = 0
    n = len(symbols)
    while i < n:
        if i < n - 1 and symbols[i] == left and symbols[i + 1] == right:
            out.append(joined)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def bpe_train(
    token_stream: Iterable[str] | Mapping[str, int],
    target_vocab_size: int,
) -> BpeModel:
    """Train a BPE model by greedy most-frequent-pair merging.

    Merging stops when the vocabulary reaches ``target_vocab_size`` or no
    adjacent pair occurs at least twice. Ties break lexicographically by
    (left, right), which makes training deterministic across platforms.
    """
    if isinstance(token_stream, Mapping):
        word_counts = Counter({t: c for t, c in token_stream.items() if t})
    else:
        word_counts = Counter(t for t in token_stream if t)
    if not word_counts:
        raise BpeTrainingError("token stream is empty")

    alphabet = sorted({ch for token in word_counts for ch in token})
    vocab: list[str] = list(SPECIALS) + alphabet
    content: set[str] = set(alphabet)
    if target_vocab_size < len(vocab):
        raise VocabSizeError(
            f"target_vocab_size {target_vocab_size} is below the minimum "
            f"{len(vocab)} (alphabet {len(alphabet)} + {len(SPECIALS)} specials)"
        )

    words = [(list(token), count) for token, count in sorted(word_counts.items())]
    pair_counts: Counter[tuple[str, str]] = Counter()
    pair_to_words: dict[tuple[str, str], set[int]] = {}
    for idx, (symbols, count) in enumerate(words):
        for pair in _pairs_in(symbols):
            pair_counts[pair] += count
            pair_to_words.setdefault(pair, set()).add(idx)

    # Lazy max-heap keyed (-count, pair); stale entries are skipped on pop.
    heap: list[tuple[int, tuple[str, str]]] = [
        (-count, pair) for pair, count in pair_counts.items() if count >= 2
    ]
    heapq.heapify(heap)

    def push(pair: tuple[str, str]) -> None:
        count = pair_counts[pair]
        if count >= 2:
            heapq.heappush(heap, (-count, pair))

    merges: list[tuple[str, str]] = []
    while len(vocab) < target_vocab_size and heap:
        neg_count, pair = heapq.heappop(heap)
        if pair_counts.get(pair, 0) != -neg_count:
            continue  # stale
        joined = pair[0] + pair[1]
        touched: set[tuple[str, str]] = set()
        for idx in sorted(pair_to_words.get(pair, ())):
            symbols, count = words[idx]
            if len(symbols) < 2:
                continue
            for old_pair in _pairs_in(symbols):
                pair_counts[old_pair] -= count
                word_set = pair_to_words.get(old_pair)
                if word_set is not None:
                    word_set.discard(idx)
                touched.add(old_pair)
            new_symbols = _merge_symbols(symbols, pair, joined)
            words[idx] = (new_symbols, count)
            for new_pair in _pairs_in(new_symbols):
                pair_counts[new_pair] += count
                pair_to_words.setdefault(new_pair, set()).add(idx)
                touched.add(new_pair)
        for changed in touched:
            if pair_counts.get(changed, 0) <= 0:
                pair_counts.pop(changed, None)
                pair_to_words.pop(changed, None)
            else:
                push(changed)
        merges.append(pair)
        if joined not in content:  # distinct merges can share one product
            vocab.append(joined)
            content.add(joined)

    return BpeModel(merges=merges, vocab=vocab)


def bpe_encode(token: str, model: BpeModel) -> list[int]:
    """Encode one surface token: character-initialize, then apply merges in
    rank order to a fixed point. Characters outside the alphabet map to UNK."""
    cached = model._encode_cache.get(token)
    if cached is not None:
        return list(cached)

    symbols = list(token)
    while len(symbols) >= 2:
        best_rank = None
        best_pair = None
        for pair in _pairs_in(symbols):
            rank = model.merge_rank.get(pair)
            if rank is not None and (best_rank is None or rank < best_rank):
                best_rank = rank
                best_pair = pair
        if best_pair is None:
            break
        symbols = _merge_symbols(symbols, best_pair, best_pair[0] + best_pair[1])

    ids = [model.token_to_id.get(sym, UNK_ID) for sym in symbols]
    model._encode_cache[token] = tuple(ids)
    return ids


def bpe_decode(ids: Sequence[int], model: BpeModel) -> str:
    """Concatenate subword strings; boundary ids render as spaces."""
    pieces = []
    for token_id in ids:
        if not 0 <= token_id < model.vocab_size:
            raise TokenIdRangeError(
                f"id {token_id} out of range for vocab of {model.vocab_size}"
            )
        pieces.append(" " if token_id == BOUNDARY_ID else model.vocab[token_id])
    return "".join(pieces)


def encode_tokens(
    tokens: Iterable[str],
    model: BpeModel,
    cap: int | None = None,
    mark_boundaries: bool = False,
) -> list[int]:
    """Encode a surface-token sequence to one id sequence, capped to ``cap``.

    With ``mark_boundaries`` a boundary id follows each token, which lets
    ``bpe_decode`` restore the token boundaries.
    """
    ids: list[int] = []
    for token in tokens:
        ids.extend(bpe_encode(token, model))
        if mark_boundaries:
            ids.append(BOUNDARY_ID)
    if cap is not None:
        ids = ids[:cap]
    return ids


_ESCAPES = {"\\": "\\\\", " ": "\\s", "\n": "\\n", "\t": "\\t", "\r": "\\r"}
_UNESCAPES = {"\\\\": "\\", "\\s": " ", "\\n": "\n", "\\t": "\t", "\\r": "\r"}
_UNESCAPE_RE = re.compile(r"\\[\\sntr]")


def _escape(subword: str) -> str:
    return "".join(_ESCAPES.get(ch, ch) for ch in subword)


def _unescape(text: str) -> str:
    return _UNESCAPE_RE.sub(lambda m: _UNESCAPES[m.group()], text)


def save_bpe(model: BpeModel, path: str | Path) -> None:
    """Write the model in the versioned text format."""
    lines = [f"BPE v1 {model.vocab_size}"]
    for left, right in model.merges:
        lines.append(f"{_escape(left)} {_escape(right)}")
    for token_id, subword in enumerate(model.vocab):
        lines.append(f"{token_id} {_escape(subword)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_bpe(path: str | Path) -> BpeModel:
    """Read a model written by :func:`save_bpe`; raises BpeFormatError."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise BpeFormatError(f"{path}: empty file")
    header = lines[0].split(" ")
    if len(header) != 3 or header[0] != "BPE" or header[1] != "v1":
        raise BpeFormatError(f"{path}: bad header {lines[0]!r}")
    try:
        vocab_size = int(header[2])
    except ValueError as exc:
        raise BpeFormatError(f"{path}: bad vocab size {header[2]!r}") from exc
    if vocab_size < len(SPECIALS) or len(lines) - 1 < vocab_size:
        raise BpeFormatError(f"{path}: truncated (expected {vocab_size} vocab lines)")

    merge_lines = lines[1 : len(lines) - vocab_size]
    vocab_lines = lines[len(lines) - vocab_size :]

    merges = []
    for line in merge_lines:
        parts = line.split(" ")
        if len(parts) != 2:
            raise BpeFormatError(f"{path}: bad merge line {line!r}")
        merges.append((_unescape(parts[0]), _unescape(parts[1])))
    vocab = []
    for expected_id, line in enumerate(vocab_lines):
        parts = line.split(" ", 1)
        if len(parts) != 2 or parts[0] != str(expected_id):
            raise BpeFormatError(f"{path}: bad vocab line {line!r}")
        vocab.append(_unescape(parts[1]))
    try:
        return BpeModel(merges=merges, vocab=vocab)
    except BpeFormatError as exc:
        raise BpeFormatError(f"{path}: {exc}") from exc
