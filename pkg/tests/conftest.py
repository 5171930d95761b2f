import time
from types import SimpleNamespace

import pytest

from synthdata import overfit_corpus, records_to_split, token_counts, write_jsonl

from codesearch.encoder import init_params, save_checkpoint
from codesearch.index import build_index, save_index
from codesearch.tokenizer import bpe_train, save_bpe
from codesearch.training import TrainConfig, train


@pytest.fixture(scope="session")
def overfit_artifacts(tmp_path_factory):
    """A 64-pair toy corpus trained to memorization, with all files on disk.

    Shared by the CLI tests and the overfit acceptance criterion; the
    recorded ``elapsed`` covers corpus generation through index build.
    """
    root = tmp_path_factory.mktemp("overfit")
    started = time.perf_counter()

    records = overfit_corpus(64, seed=13)
    corpus_path = root / "train.jsonl"
    write_jsonl(records, corpus_path)
    split = records_to_split(records, "train")

    bpe = bpe_train(token_counts(split), 400)
    bpe_path = root / "bpe.txt"
    save_bpe(bpe, bpe_path)

    init = init_params(bpe.vocab_size, dim=32, num_layers=2, seed=5)
    config = TrainConfig(
        loss_kind="margin", epochs=200, batch_size=64, learning_rate=3e-3, seed=5,
    )
    params, losses = train(config, split, init, bpe)
    checkpoint_path = root / "model.ckpt"
    save_checkpoint(params, checkpoint_path)

    index = build_index(split, params, bpe)
    index_path = root / "code.idx"
    save_index(index, index_path)

    return SimpleNamespace(
        root=root,
        corpus_path=corpus_path,
        bpe_path=bpe_path,
        checkpoint_path=checkpoint_path,
        index_path=index_path,
        records=records,
        split=split,
        bpe=bpe,
        init=init,
        params=params,
        losses=losses,
        index=index,
        epochs=config.epochs,
        elapsed=time.perf_counter() - started,
    )
