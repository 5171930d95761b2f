import json

import numpy as np
import pytest

from codesearch.corpus import CorpusSplit, parse_corpus_line
from codesearch.encoder import encode, fingerprint, init_params
from codesearch.errors import (
    EmptyQueryError,
    IndexCorruptionError,
    IndexFormatError,
    StaleIndexError,
)
from codesearch.index import (
    EmbeddingIndex,
    build_index,
    load_index,
    query_topk,
    rank_top_k,
    scan_scores,
    save_index,
)
from codesearch.tokenizer import bpe_train, encode_tokens


def make_split(rows):
    entries = tuple(
        parse_corpus_line(json.dumps({
            "id": rid,
            "language": lang,
            "doc_tokens": doc,
            "code_tokens": code,
        }))
        for rid, lang, doc, code in rows
    )
    return CorpusSplit("train", entries)


@pytest.fixture(scope="module")
def setup():
    rows = [
        (f"repo/f{i}", ["python", "go", "ruby"][i % 3],
         ["find", f"item{i}"], ["def", f"item{i}", "(", ")", ":"])
        for i in range(10)
    ]
    split = make_split(rows)
    stream = {}
    for entry in split.entries:
        for token in entry.doc_tokens + entry.code_tokens:
            stream[token] = stream.get(token, 0) + 1
    bpe = bpe_train(stream, 150)
    params = init_params(bpe.vocab_size, dim=8, num_layers=1, seed=0)
    return split, bpe, params


def naive_topk(vectors: np.ndarray, ids, query, k):
    """Scalar-loop reference scorer: float64 dots, (score desc, id asc)."""
    scores = []
    for row in range(vectors.shape[0]):
        total = 0.0
        for col in range(vectors.shape[1]):
            total += float(vectors[row, col]) * float(query[col])
        scores.append(total)
    order = sorted(range(len(ids)), key=lambda r: (-scores[r], ids[r]))[:k]
    return [(ids[r], scores[r]) for r in order]


def random_unit_rows(rng, n, d):
    rows = rng.normal(size=(n, d))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return rows.astype(np.float32)


class TestBuildIndex:
    def test_single_entry_matches_encode(self, setup):
        split, bpe, params = setup
        one = CorpusSplit("train", split.entries[:1])
        index = build_index(one, params, bpe)
        assert len(index) == 1
        entry = split.entries[0]
        ids = encode_tokens(entry.code_tokens, bpe)
        expected = encode(ids, entry.language, params).values
        assert np.max(np.abs(index.vectors[0] - expected.astype(np.float32))) < 1e-6

    def test_duplicate_code_two_rows_distinct_ids(self, setup):
        _, bpe, params = setup
        rows = [
            ("a", "go", ["x"], ["def", "same", "(", ")"]),
            ("b", "go", ["y"], ["def", "same", "(", ")"]),
        ]
        index = build_index(make_split(rows), params, bpe)
        assert np.array_equal(index.vectors[0], index.vectors[1])
        assert index.ids == ("a", "b")

    def test_rows_unit_norm(self, setup):
        split, bpe, params = setup
        index = build_index(split, params, bpe)
        norms = np.linalg.norm(index.vectors.astype(np.float64), axis=1)
        assert np.max(np.abs(norms - 1.0)) < 1e-5

    def test_row_order_follows_corpus(self, setup):
        split, bpe, params = setup
        index = build_index(split, params, bpe)
        assert index.ids == tuple(e.id for e in split.entries)

    def test_empty_corpus_rejected(self, setup):
        _, bpe, params = setup
        with pytest.raises(ValueError):
            build_index(CorpusSplit("train", ()), params, bpe)

    def test_fingerprint_recorded(self, setup):
        split, bpe, params = setup
        index = build_index(split, params, bpe)
        assert index.model_fingerprint == fingerprint(params)


class TestQueryTopK:
    def test_k_beyond_size_returns_all_sorted(self, setup):
        split, bpe, params = setup
        index = build_index(split, params, bpe)
        results = query_topk("find item3", index, params, bpe, k=100)
        assert len(results) == len(split.entries)
        scores = [r.score for r in results]
        assert scores == sorted(scores, reverse=True)
        assert [r.rank for r in results] == list(range(1, len(results) + 1))

    def test_matches_naive_oracle(self, setup):
        split, bpe, params = setup
        index = build_index(split, params, bpe)
        from codesearch.index import embed_query
        query = embed_query("find item7 quickly", params, bpe)
        got = query_topk("find item7 quickly", index, params, bpe, k=5)
        expect = naive_topk(index.vectors, list(index.ids), query, 5)
        assert [r.snippet_id for r in got] == [i for i, _ in expect]
        for result, (_, score) in zip(got, expect):
            assert result.score == pytest.approx(score, abs=1e-12)

    def test_ties_order_by_ascending_id(self, setup):
        _, bpe, params = setup
        rows = [
            ("zz", "go", ["x"], ["def", "same", "(", ")"]),
            ("aa", "go", ["y"], ["def", "same", "(", ")"]),
            ("mm", "go", ["z"], ["def", "same", "(", ")"]),
        ]
        index = build_index(make_split(rows), params, bpe)
        results = query_topk("same", index, params, bpe, k=3)
        assert [r.snippet_id for r in results] == ["aa", "mm", "zz"]

    def test_stale_checkpoint_refused(self, setup):
        split, bpe, params = setup
        index = build_index(split, params, bpe)
        other = init_params(params.vocab_size, dim=8, num_layers=1, seed=99)
        with pytest.raises(StaleIndexError):
            query_topk("find item1", index, other, bpe, k=3)

    def test_empty_query_rejected(self, setup):
        split, bpe, params = setup
        index = build_index(split, params, bpe)
        with pytest.raises(EmptyQueryError):
            query_topk("   ", index, params, bpe, k=3)

    def test_k_must_be_positive(self, setup):
        split, bpe, params = setup
        index = build_index(split, params, bpe)
        with pytest.raises(ValueError):
            query_topk("find", index, params, bpe, k=0)

    def test_deterministic(self, setup):
        split, bpe, params = setup
        index = build_index(split, params, bpe)
        first = query_topk("find item2", index, params, bpe, k=4)
        second = query_topk("find item2", index, params, bpe, k=4)
        assert first == second


class TestRankTopK:
    def test_boundary_ties_resolved_by_id(self):
        scores = np.array([1.0, 0.5, 0.5, 0.5])
        ids = ["d", "c", "b", "a"]
        results = rank_top_k(scores, ids, k=2)
        assert [(r.snippet_id, r.rank) for r in results] == [("d", 1), ("a", 2)]

    def test_random_agreement_with_naive(self):
        rng = np.random.default_rng(17)
        for _ in range(10):
            n = int(rng.integers(2, 400))
            d = int(rng.integers(2, 16))
            vectors = random_unit_rows(rng, n, d)
            query = rng.normal(size=d)
            query /= np.linalg.norm(query)
            ids = [f"id{int(x):04d}" for x in rng.permutation(n)]
            k = int(rng.integers(1, n + 1))
            scores = scan_scores(vectors, query)
            got = rank_top_k(scores, ids, k)
            expect = naive_topk(vectors, ids, query, k)
            assert [r.snippet_id for r in got] == [i for i, _ in expect]


class TestSaveLoad:
    def test_round_trip_field_equal(self, setup, tmp_path):
        split, bpe, params = setup
        index = build_index(split, params, bpe)
        path = tmp_path / "code.idx"
        save_index(index, path)
        loaded = load_index(path)
        assert np.array_equal(loaded.vectors, index.vectors)
        assert loaded.ids == index.ids
        assert loaded.languages == index.languages
        assert loaded.model_fingerprint == index.model_fingerprint

    def test_file_level_round_trip_bit_exact(self, setup, tmp_path):
        split, bpe, params = setup
        index = build_index(split, params, bpe)
        first, second = tmp_path / "a.idx", tmp_path / "b.idx"
        save_index(index, first)
        save_index(load_index(first), second)
        assert first.read_bytes() == second.read_bytes()

    def test_truncated_file_rejected(self, setup, tmp_path):
        split, bpe, params = setup
        index = build_index(split, params, bpe)
        path = tmp_path / "code.idx"
        save_index(index, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 9])
        with pytest.raises(IndexCorruptionError):
            load_index(path)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(b"WHAT v0\n" + b"\x00" * 64)
        with pytest.raises(IndexFormatError):
            load_index(path)

    def test_flipped_byte_rejected(self, setup, tmp_path):
        split, bpe, params = setup
        index = build_index(split, params, bpe)
        path = tmp_path / "code.idx"
        save_index(index, path)
        blob = bytearray(path.read_bytes())
        blob[20] ^= 0x40
        path.write_bytes(bytes(blob))
        with pytest.raises(IndexCorruptionError):
            load_index(path)

    def test_unicode_ids_survive(self, setup, tmp_path):
        _, bpe, params = setup
        rows = [("répo/ƒn", "php", ["x"], ["echo", "1"]),
                ("plain", "php", ["y"], ["echo", "2"])]
        index = build_index(make_split(rows), params, bpe)
        path = tmp_path / "uni.idx"
        save_index(index, path)
        assert load_index(path).ids == ("répo/ƒn", "plain")


class TestIndexInvariants:
    def test_duplicate_ids_rejected(self):
        vectors = random_unit_rows(np.random.default_rng(0), 2, 4)
        with pytest.raises(ValueError):
            EmbeddingIndex(vectors, ("a", "a"), ("go", "go"), b"\x00" * 32)

    def test_meta_length_must_match(self):
        vectors = random_unit_rows(np.random.default_rng(0), 2, 4)
        with pytest.raises(ValueError):
            EmbeddingIndex(vectors, ("a",), ("go",), b"\x00" * 32)
