"""One binary for the whole pipeline, subcommand style.

Configuration lives in flat-dotted-key JSON files (sections ``corpus``,
``model``, ``training``, ``evaluation``, ``allocation``, ``grammar``),
overridable per-run with ``--set key=value``. Unknown keys are hard
errors. Exit codes: 0 success, 1 validation error, 2 runtime failure.
Logs go to stderr; machine outputs are files only.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import corpus as C
from . import routing as R
from . import synthetic as S
from . import training as TR
from .evaluation import ablation_run, evaluate_completion, results_to_csv, results_to_json
from .model import Model, ModelConfig, load_checkpoint
from .training import TrainConfig, finetune, pretrain

log = logging.getLogger("plmoe")


class CliError(ValueError):
    """Bad usage or invalid configuration (exit code 1)."""


# ---------------------------------------------------------------------------
# run configuration

_EXTRA_KEYS = {
    "corpus": ("mode", "pl", "reference_pl", "excluded_pl"),
    "evaluation": ("split",),
    "allocation": ("total_experts", "shared", "min_per_pl", "explicit", "sizes"),
}


def _known_keys() -> set[str]:
    keys = set()
    for section, cls in (
        ("corpus", C.PipelineConfig),
        ("model", ModelConfig),
        ("training", TrainConfig),
        ("grammar", S.GrammarConfig),
    ):
        keys.update(f"{section}.{f.name}" for f in dataclasses.fields(cls))
    for section, names in _EXTRA_KEYS.items():
        keys.update(f"{section}.{n}" for n in names)
    return keys


KNOWN_KEYS = _known_keys()


class RunConfig:
    """Flat dotted-key configuration with declared-key validation."""

    def __init__(self, values: dict[str, object]):
        unknown = sorted(set(values) - KNOWN_KEYS)
        if unknown:
            raise CliError(f"unknown config keys: {unknown}")
        self.values = dict(values)

    @classmethod
    def load(cls, path: str | None, overrides: list[str] | None = None) -> "RunConfig":
        values: dict[str, object] = {}
        if path:
            p = Path(path)
            if not p.exists():
                raise CliError(f"config file not found: {p}")
            obj = json.loads(p.read_text())
            if not isinstance(obj, dict):
                raise CliError(f"config file {p} must hold a JSON object")
            values.update(obj)
        for item in overrides or []:
            if "=" not in item:
                raise CliError(f"--set needs key=value, got {item!r}")
            key, raw = item.split("=", 1)
            try:
                values[key] = json.loads(raw)
            except json.JSONDecodeError:
                values[key] = raw
        return cls(values)

    def section(self, name: str) -> dict[str, object]:
        prefix = name + "."
        return {k[len(prefix) :]: v for k, v in self.values.items() if k.startswith(prefix)}

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.values, indent=2, sort_keys=True))


def _build(cls, section: dict, **forced):
    """Instantiate a config dataclass from a section dict plus overrides."""
    obj = dict(section)
    obj.update(forced)
    names = {f.name for f in dataclasses.fields(cls)}
    bad = sorted(set(obj) - names)
    if bad:
        raise CliError(f"keys {bad} not accepted by {cls.__name__}")
    if "languages" in obj and isinstance(obj["languages"], list):
        obj["languages"] = tuple(obj["languages"])
    try:
        return cls(**obj)
    except (TypeError, ValueError) as e:
        raise CliError(str(e)) from e


def _require(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"missing {what}: {p}")
    return p


def _train_sizes(docs: list[C.CorpusDoc]) -> dict[str, int]:
    sizes: dict[str, int] = {}
    for d in docs:
        if d.split == "train":
            sizes[d.pl] = sizes.get(d.pl, 0) + len(d.tokens)
    return sizes


def _allocation(cfg: RunConfig, docs: list[C.CorpusDoc], model_cfg: ModelConfig) -> R.ExpertAllocation:
    sec = cfg.section("allocation")
    sizes = sec.get("sizes") or _train_sizes(docs)
    if not sizes:
        raise CliError("no train documents to derive an expert allocation from")
    return R.allocate_experts(
        {str(k): int(v) for k, v in sizes.items()},
        total_experts=int(sec.get("total_experts", model_cfg.experts_per_layer)),
        shared=int(sec.get("shared", model_cfg.shared_experts)),
        min_per_pl=int(sec.get("min_per_pl", 2)),
        explicit=sec.get("explicit"),
    )


def _split_mode_params(sec: dict) -> tuple[str, dict]:
    mode = str(sec.get("mode", "full"))
    params = {}
    for key in ("pl", "reference_pl", "excluded_pl"):
        if key in sec:
            params[key] = sec[key]
    return mode, params


def _pipeline_config(cfg: RunConfig) -> tuple[C.PipelineConfig, str, dict]:
    sec = cfg.section("corpus")
    mode, params = _split_mode_params(sec)
    for key in ("mode", "pl", "reference_pl", "excluded_pl"):
        sec.pop(key, None)
    return _build(C.PipelineConfig, sec), mode, params


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synthetic(args, cfg: RunConfig) -> int:
    sec = cfg.section("grammar")
    if args.pls is not None:
        sec["languages"] = tuple(S.LANGUAGES[: args.pls])
    if args.docs_per_pl is not None:
        sec["docs_per_pl"] = args.docs_per_pl
    if args.low_resource:
        lr = {}
        for item in args.low_resource:
            if "=" not in item:
                raise CliError(f"--low-resource needs pl=fraction, got {item!r}")
            pl, frac = item.split("=", 1)
            lr[pl] = float(frac)
        sec["low_resource"] = lr
    if args.seed is not None:
        sec["seed"] = args.seed
    gcfg = _build(S.GrammarConfig, sec)
    docs = S.generate(gcfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    S.write_raw_jsonl(docs, args.out, gcfg)
    log.info("wrote %d raw docs for %d languages to %s", len(docs), len(gcfg.languages), args.out)
    return 0


def cmd_build_corpus(args, cfg: RunConfig) -> int:
    pcfg, mode, params = _pipeline_config(cfg)
    raw = C.read_raw_jsonl(_require(args.raw, "raw corpus"))
    docs, vocab, table = C.build_corpus(raw, pcfg, mode, **params)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    C.write_corpus_jsonl(docs, out / "corpus.jsonl")
    vocab.save(out / "vocab.json")
    (out / "table.json").write_text(json.dumps(table.to_json(), indent=2))
    log.info("corpus: %d encoded docs, vocab %d, -> %s", len(docs), len(vocab), out)
    return 0


def cmd_train_tokenizer(args, cfg: RunConfig) -> int:
    pcfg, mode, params = _pipeline_config(cfg)
    raw = C.read_raw_jsonl(_require(args.raw, "raw corpus"))
    rows = C.derive_splits(raw, mode, **params)
    train = [d for d, s in rows if s == "train"]
    if not train:
        raise CliError("empty train split")
    table = C.build_literal_table(train, pcfg)
    norm = [t for d in train for t in C._doc_token_streams(d, table, pcfg)]
    vocab = C.train_bpe(norm, pcfg.vocab_size, pcfg, table)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    vocab.save(args.out)
    if args.table:
        Path(args.table).write_text(json.dumps(table.to_json(), indent=2))
    log.info("tokenizer: %d symbols -> %s", len(vocab), args.out)
    return 0


def cmd_encode(args, cfg: RunConfig) -> int:
    pcfg, mode, params = _pipeline_config(cfg)
    vocab = C.BpeVocab.load(_require(args.vocab, "vocabulary"))
    table = C.LiteralTable.from_json(json.loads(_require(args.table, "literal table").read_text()))
    raw = C.read_raw_jsonl(_require(args.raw, "raw corpus"))
    rows = C.derive_splits(raw, mode, **params)
    docs: list[C.CorpusDoc] = []
    for d, s in rows:
        for toks in C._doc_token_streams(d, table, pcfg):
            docs.extend(C.encode_doc(toks, vocab, d.pl, s, pcfg.max_seq))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    C.write_corpus_jsonl(docs, args.out)
    log.info("encoded %d docs -> %s", len(docs), args.out)
    return 0


def cmd_allocate(args, cfg: RunConfig) -> int:
    docs = C.read_corpus_jsonl(_require(args.corpus, "corpus"))
    sec = cfg.section("allocation")
    sizes = sec.get("sizes") or _train_sizes(docs)
    if not sizes:
        raise CliError("no train documents to derive an expert allocation from")
    if "total_experts" not in sec or "shared" not in sec:
        raise CliError("allocate needs allocation.total_experts and allocation.shared")
    alloc = R.allocate_experts(
        {str(k): int(v) for k, v in sizes.items()},
        total_experts=int(sec["total_experts"]),
        shared=int(sec["shared"]),
        min_per_pl=int(sec.get("min_per_pl", 2)),
        explicit=sec.get("explicit"),
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    alloc.save(args.out)
    log.info("allocation for %d languages -> %s", len(alloc.per_pl), args.out)
    return 0


def _model_for(cfg: RunConfig, vocab_size: int, docs, alloc_path, seed):
    mcfg = _build(ModelConfig, cfg.section("model"), vocab_size=vocab_size)
    alloc = None
    if mcfg.variant in ("pl_moe", "pl_moe_no_shared"):
        if alloc_path:
            alloc = R.ExpertAllocation.load(_require(alloc_path, "allocation"))
        else:
            alloc = _allocation(cfg, docs, mcfg)
    return Model(mcfg, alloc=alloc, seed=seed)


def _train_config(cfg: RunConfig, seed_flag: int | None, **defaults) -> TrainConfig:
    sec = dict(defaults)
    sec.update(cfg.section("training"))
    if seed_flag is not None:
        sec["seed"] = seed_flag
    return _build(TrainConfig, sec)


def cmd_pretrain(args, cfg: RunConfig) -> int:
    docs = C.read_corpus_jsonl(_require(args.corpus, "corpus"))
    vocab = C.BpeVocab.load(_require(args.vocab, "vocabulary"))
    tcfg = _train_config(cfg, args.seed)
    model = _model_for(cfg, len(vocab), docs, args.alloc, seed=tcfg.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if model.alloc is not None:
        model.alloc.save(out / "allocation.json")
    pretrain(docs, model, tcfg, out_dir=out, metrics_path=out / "metrics.csv")
    log.info("pretrained %s for %d steps -> %s", model.config.variant, tcfg.steps, out)
    return 0


def cmd_finetune(args, cfg: RunConfig) -> int:
    docs = C.read_corpus_jsonl(_require(args.corpus, "corpus"))
    _require(Path(args.checkpoint) / "manifest.json", "checkpoint manifest")
    tcfg = _train_config(
        cfg, args.seed, steps=2000, warmup_steps=0, peak_lr=5e-5, schedule="linear_decay"
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    finetune(args.checkpoint, docs, tcfg, out_dir=out)
    log.info("finetuned %s for %d steps -> %s", args.checkpoint, tcfg.steps, out)
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    docs = C.read_corpus_jsonl(_require(args.corpus, "corpus"))
    vocab = C.BpeVocab.load(_require(args.vocab, "vocabulary"))
    _require(Path(args.checkpoint) / "manifest.json", "checkpoint manifest")
    model = load_checkpoint(args.checkpoint)
    split = args.split or str(cfg.section("evaluation").get("split", "test"))
    results = {model.config.variant: evaluate_completion(model, docs, vocab, split=split)}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    results_to_json(results, args.out)
    if args.csv:
        results_to_csv(results, args.csv)
    log.info("evaluated %d %s docs -> %s", sum(d.split == split for d in docs), split, args.out)
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    docs = C.read_corpus_jsonl(_require(args.corpus, "corpus"))
    vocab = C.BpeVocab.load(_require(args.vocab, "vocabulary"))
    tcfg = _train_config(cfg, args.seed)
    variants = ("dense", "switch_moe", "pl_moe", "pl_moe_no_shared")

    def make_model(variant):
        mcfg = _build(ModelConfig, cfg.section("model"), vocab_size=len(vocab), variant=variant)
        alloc = None
        if variant.startswith("pl_moe"):
            alloc = _allocation(cfg, docs, mcfg)
        return Model(mcfg, alloc=alloc, seed=tcfg.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = ablation_run(docs, vocab, make_model, {v: tcfg for v in variants}, out_dir=out)
    results_to_json(run["results"], out / "results.json")
    results_to_csv(run["results"], out / "comparison.csv")
    (out / "val_loss.json").write_text(json.dumps(run["val"], indent=2))
    log.info("ablation over %s -> %s", ", ".join(variants), out)
    return 0


def cmd_route_stats(args, cfg: RunConfig) -> int:
    docs = C.read_corpus_jsonl(_require(args.corpus, "corpus"))
    _require(Path(args.checkpoint) / "manifest.json", "checkpoint manifest")
    model = load_checkpoint(args.checkpoint)
    if model.config.variant == "dense":
        raise CliError("route-stats needs an expert-routing checkpoint, got variant 'dense'")
    split = args.split or str(cfg.section("evaluation").get("split", "test"))
    subset = [d for d in docs if d.split == split]
    if not subset:
        raise CliError(f"no documents in split {split!r}")
    import numpy as np

    from . import tensor as T

    trace = R.RoutingTrace()
    with T.no_grad():
        for d in subset:
            model.forward(np.asarray(d.tokens)[None, :], pl=d.pl, trace=trace)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    trace.write_csv(args.out, model.config.experts_per_layer)
    log.info("routing decisions over %d docs -> %s", len(subset), args.out)
    return 0


# ---------------------------------------------------------------------------
# parser plumbing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _add_common(p):
    p.add_argument("--config", help="JSON config file with flat dotted keys")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; value parsed as JSON when possible")
    p.add_argument("--seed", type=int, help="seed forwarded to all RNG consumers")
    p.add_argument("--threads", type=int, default=1,
                   help="worker parallelism bound (modules may ignore it)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="plmoe", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic multi-language raw corpus")
    p.add_argument("--out", required=True, help="raw JSONL output path")
    p.add_argument("--pls", type=int, help="number of languages (prefix of the built-in six)")
    p.add_argument("--docs-per-pl", type=int, help="documents per language")
    p.add_argument("--low-resource", action="append", metavar="PL=FRACTION",
                   help="downscale one language's document count")
    _add_common(p)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("build-corpus", help="split, normalize, train BPE, and encode")
    p.add_argument("--raw", required=True, help="raw JSONL input")
    p.add_argument("--out-dir", required=True, help="writes corpus.jsonl, vocab.json, table.json")
    _add_common(p)
    p.set_defaults(func=cmd_build_corpus)

    p = sub.add_parser("train-tokenizer", help="train the BPE vocabulary only")
    p.add_argument("--raw", required=True)
    p.add_argument("--out", required=True, help="vocabulary JSON output")
    p.add_argument("--table", help="optional literal-table JSON output")
    _add_common(p)
    p.set_defaults(func=cmd_train_tokenizer)

    p = sub.add_parser("encode", help="encode raw docs with an existing vocabulary")
    p.add_argument("--raw", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--out", required=True, help="encoded corpus JSONL")
    _add_common(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("allocate", help="derive the expert allocation from train-set sizes")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="allocation JSON output")
    _add_common(p)
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("pretrain", help="pre-train a model on an encoded corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--alloc", help="expert allocation JSON (derived from data when omitted)")
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="adapt a checkpoint to a new corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-dir", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="token accuracy and edit similarity per language")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True, help="results JSON output")
    p.add_argument("--csv", help="optional comparison-table CSV output")
    p.add_argument("--split", help="corpus split to score (default test)")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and compare the four routing variants")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("route-stats", help="export routing decisions as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="routing CSV output")
    p.add_argument("--split", help="corpus split to trace (default test)")
    _add_common(p)
    p.set_defaults(func=cmd_route_stats)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = RunConfig.load(args.config, args.set)
        return args.func(args, cfg)
    except (CliError, C.ConfigError, R.AllocationError, ValueError) as e:
        log.error("%s", e)
        return 1
    except Exception as e:  # noqa: BLE001 - runtime failures map to exit 2
        log.error("runtime failure: %s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
