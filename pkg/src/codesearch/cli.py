"""Command-line entry point wiring the whole pipeline.

Subcommands: ``tokenize-train``, ``train``, ``index``, ``query``, ``eval``.
Options resolve as flags > config file (JSON) > defaults. Output files are
written atomically (temp file + rename), so failures never leave partial
artifacts. Exit codes: 0 success, 1 runtime error, 2 usage, 3 config error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import tempfile
from collections import Counter
from pathlib import Path

from . import evaluation
from .corpus import load_split
from .encoder import init_params, load_checkpoint, save_checkpoint
from .errors import CodeSearchError, ConfigError
from .index import build_index, load_index, query_topk, save_index
from .tokenizer import bpe_train, load_bpe, save_bpe
from .training import TrainConfig, train


@contextlib.contextmanager
def _atomic_output(path: Path):
    """Yield a temp path in the target directory; rename on success only."""
    path = Path(path)
    handle, temp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    os.close(handle)
    temp_path = Path(temp_name)
    try:
        yield temp_path
        os.replace(temp_path, path)
    finally:
        if temp_path.exists():
            temp_path.unlink()


class _Options:
    """Flag > config-file > default resolution for one subcommand."""

    def __init__(self, args: argparse.Namespace):
        self.args = vars(args)
        self.config = {}
        config_path = self.args.get("config")
        if config_path is not None:
            path = Path(config_path)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            try:
                self.config = json.loads(path.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
            if not isinstance(self.config, dict):
                raise ConfigError(f"config file {path} must hold a JSON object")

    def get(self, key: str, default=None, required: bool = False):
        value = self.args.get(key)
        if value is None:
            value = self.config.get(key, default)
        if required and value is None:
            raise ConfigError(f"missing required option: {key.replace('_', '-')}")
        return value


def _require_input(path_value, label: str) -> Path:
    path = Path(path_value)
    if not path.exists():
        raise ConfigError(f"{label} not found: {path}")
    return path


def _require_output(path_value, label: str) -> Path:
    path = Path(path_value)
    if not path.parent.exists():
        raise ConfigError(f"{label} directory does not exist: {path.parent}")
    return path


def _cmd_tokenize_train(options: _Options) -> int:
    corpus = _require_input(options.get("corpus", required=True), "corpus")
    output = _require_output(options.get("output", required=True), "output")
    vocab_size = int(options.get("vocab_size", 8192))
    partition = options.get("partition", "train")

    split = load_split(corpus, partition)
    stream: Counter[str] = Counter()
    for entry in split.entries:
        stream.update(entry.doc_tokens)
        stream.update(entry.code_tokens)
    model = bpe_train(stream, vocab_size)
    with _atomic_output(output) as temp:
        save_bpe(model, temp)
    print(
        f"trained BPE on {len(split.entries)} entries: "
        f"{model.vocab_size} subwords, {len(model.merges)} merges -> {output}"
    )
    return 0


def _cmd_train(options: _Options) -> int:
    corpus = _require_input(options.get("corpus", required=True), "corpus")
    bpe_path = _require_input(options.get("bpe", required=True), "bpe model")
    output = _require_output(options.get("output", required=True), "checkpoint")
    log_path = options.get("log")
    if log_path is not None:
        log_path = _require_output(log_path, "run log")

    train_config = TrainConfig(
        loss_kind=options.get("loss", "margin"),
        margin=float(options.get("margin", 0.5)),
        batch_size=int(options.get("batch_size", 256)),
        epochs=int(options.get("epochs", 10)),
        learning_rate=float(options.get("lr", 1e-3)),
        seed=int(options.get("seed", 0)),
        hard_mining=bool(options.get("hard_mining", False)),
        temperature=float(options.get("temperature", 0.05)),
    )
    dim = int(options.get("d", 128))
    layers = int(options.get("layers", 2))
    save_every = options.get("save_every")

    split = load_split(corpus, options.get("partition", "train"))
    bpe = load_bpe(bpe_path)
    params = init_params(bpe.vocab_size, dim=dim, num_layers=layers, seed=train_config.seed)

    def snapshot(epoch: int, current) -> None:
        if save_every and epoch % int(save_every) == 0:
            with _atomic_output(output) as temp:
                save_checkpoint(current, temp)

    trained, losses = train(
        train_config, split, params, bpe, log_path=log_path, on_epoch=snapshot
    )
    with _atomic_output(output) as temp:
        save_checkpoint(trained, temp)
    final = f"{losses[-1]:.6f}" if losses else "n/a"
    print(f"trained {train_config.epochs} epoch(s), final loss {final} -> {output}")
    return 0


def _cmd_index(options: _Options) -> int:
    corpus = _require_input(options.get("corpus", required=True), "corpus")
    bpe_path = _require_input(options.get("bpe", required=True), "bpe model")
    checkpoint = _require_input(options.get("checkpoint", required=True), "checkpoint")
    output = _require_output(options.get("output", required=True), "index")

    split = load_split(corpus, options.get("partition", "train"))
    bpe = load_bpe(bpe_path)
    params = load_checkpoint(checkpoint)
    index = build_index(split, params, bpe)
    with _atomic_output(output) as temp:
        save_index(index, temp)
    print(f"indexed {len(index)} snippets (d={index.dim}) -> {output}")
    return 0


def _format_results(results) -> str:
    return "\n".join(f"{r.rank} {r.score:.4f} {r.snippet_id}" for r in results)


def _cmd_query(options: _Options) -> int:
    index_path = _require_input(options.get("index", required=True), "index")
    bpe_path = _require_input(options.get("bpe", required=True), "bpe model")
    checkpoint = _require_input(options.get("checkpoint", required=True), "checkpoint")
    k = int(options.get("k", 10))

    index = load_index(index_path)
    bpe = load_bpe(bpe_path)
    params = load_checkpoint(checkpoint)

    query_text = options.get("text")
    if query_text is not None:
        print(_format_results(query_topk(query_text, index, params, bpe, k)))
        return 0
    # REPL mode: one query per stdin line, identical output format.
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            print(_format_results(query_topk(line, index, params, bpe, k)))
        except CodeSearchError as exc:
            print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        sys.stdout.flush()
    return 0


def _cmd_eval(options: _Options) -> int:
    corpus = _require_input(options.get("corpus", required=True), "corpus")
    index_path = _require_input(options.get("index", required=True), "index")
    bpe_path = _require_input(options.get("bpe", required=True), "bpe model")
    checkpoint = _require_input(options.get("checkpoint", required=True), "checkpoint")
    report_json = options.get("report_json")
    if report_json is not None:
        report_json = _require_output(report_json, "report")

    split = load_split(corpus, options.get("partition", "test"))
    index = load_index(index_path)
    bpe = load_bpe(bpe_path)
    params = load_checkpoint(checkpoint)
    eval_config = evaluation.EvalConfig(
        candidate_size=int(options.get("candidates", 1000)),
        seed=int(options.get("seed", 0)),
        max_tasks_per_language=options.get("max_tasks"),
    )
    report = evaluation.evaluate(params, bpe, index, split, eval_config)
    print(evaluation.render_report(report))
    if report_json is not None:
        with _atomic_output(report_json) as temp:
            temp.write_text(evaluation.report_to_json(report), encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="codesearch",
        description="Train, index, query, and evaluate a semantic code search model.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def add_common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--config", help="JSON config file; flags override it")

    sub = commands.add_parser("tokenize-train", help="train the BPE subword model")
    add_common(sub)
    sub.add_argument("--corpus", help="training split (JSONL)")
    sub.add_argument("--partition", help="partition name (default train)")
    sub.add_argument("--vocab-size", dest="vocab_size", type=int)
    sub.add_argument("--output", help="where to write the BPE model")

    sub = commands.add_parser("train", help="train encoder parameters")
    add_common(sub)
    sub.add_argument("--corpus")
    sub.add_argument("--partition")
    sub.add_argument("--bpe")
    sub.add_argument("--output")
    sub.add_argument("--d", type=int, help="embedding dimension (default 128)")
    sub.add_argument("--layers", type=int, help="MLP depth (default 2)")
    sub.add_argument("--loss", choices=["margin", "in_batch_softmax"])
    sub.add_argument("--margin", type=float)
    sub.add_argument("--batch-size", dest="batch_size", type=int)
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--lr", type=float)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--temperature", type=float)
    sub.add_argument(
        "--hard-mining", dest="hard_mining", action=argparse.BooleanOptionalAction
    )
    sub.add_argument("--save-every", dest="save_every", type=int)
    sub.add_argument("--log", help="append per-epoch loss lines to this file")

    sub = commands.add_parser("index", help="embed a corpus into a vector index")
    add_common(sub)
    sub.add_argument("--corpus")
    sub.add_argument("--partition")
    sub.add_argument("--bpe")
    sub.add_argument("--checkpoint")
    sub.add_argument("--output")

    sub = commands.add_parser("query", help="top-K retrieval for a text query")
    add_common(sub)
    sub.add_argument("--index")
    sub.add_argument("--bpe")
    sub.add_argument("--checkpoint")
    sub.add_argument("--k", type=int)
    sub.add_argument("text", nargs="?", help="one-shot query; omit to read stdin")

    sub = commands.add_parser("eval", help="NDCG/MRR evaluation on a test split")
    add_common(sub)
    sub.add_argument("--corpus")
    sub.add_argument("--partition")
    sub.add_argument("--index")
    sub.add_argument("--bpe")
    sub.add_argument("--checkpoint")
    sub.add_argument("--candidates", type=int)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--max-tasks", dest="max_tasks", type=int)
    sub.add_argument("--report-json", dest="report_json")

    return parser


_COMMANDS = {
    "tokenize-train": _cmd_tokenize_train,
    "train": _cmd_train,
    "index": _cmd_index,
    "query": _cmd_query,
    "eval": _cmd_eval,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        options = _Options(args)
        return _COMMANDS[args.command](options)
    except ConfigError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except (CodeSearchError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
