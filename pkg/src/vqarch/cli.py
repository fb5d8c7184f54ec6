"""Command-line pipeline: ingest, train-vqvae, encode, train-prior, generate, evaluate, search, analyze.

Every subcommand reads and writes plain files so stages can be rerun on their
own. Settings come from defaults, then an optional JSON config file
(``--config``), then explicit flags; flags win. Each run writes the resolved
settings to ``run-<command>.json`` in the output directory, which defaults to
``$VQARCH_OUT_DIR`` or the current directory.

Exit codes: 0 success, 1 user error (bad flags, missing or malformed inputs),
2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .codec import ParseError, build_corpus, read_corpus, to_sentence, write_corpus
from .evaluation import (
    generation_metrics,
    permutation_sensitivity,
    position_histograms,
    reconstruction_accuracy,
    total_variation,
    uniform_total_variation,
    write_histograms_csv,
)
from .prior import PriorConfig, SamplingConfig, TransformerPrior, generate
from .search import (
    SearchConfig,
    SyntheticOracle,
    TabularOracle,
    random_search_baseline,
    run_search,
    summarize,
)
from .space import (
    Benchmark,
    canonical_hash,
    enumerate_nb201,
    get_space,
    ingest_benchmark,
    make_records,
    sample_nb101,
    validate_cell,
    write_records,
)
from .vqvae import Checkpoint, EncoderConfig, VqVaeConfig, train_vqvae

logger = logging.getLogger("vqarch")

OUT_DIR_ENV = "VQARCH_OUT_DIR"


class UserError(Exception):
    """Bad input from the command line or a file; maps to exit code 1."""


@dataclass
class RunConfig:
    space: str = "nb201"
    seed: int = 0
    vqvae: VqVaeConfig = field(default_factory=VqVaeConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _merge(obj, overrides: dict, where: str):
    """Copy of dataclass ``obj`` with ``overrides`` applied, rejecting unknown keys."""
    names = {f.name for f in fields(obj)}
    unknown = set(overrides) - names
    if unknown:
        raise UserError(f"unknown key(s) in {where}: {sorted(unknown)}")
    values = {f.name: getattr(obj, f.name) for f in fields(obj)}
    values.update(overrides)
    return type(obj)(**values)


def load_run_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UserError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UserError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UserError(f"config file {path} must hold a JSON object")
    top = {k: v for k, v in raw.items() if k not in ("vqvae", "prior", "sampling", "search")}
    cfg = _merge(cfg, top, path)
    if "vqvae" in raw:
        vq = dict(raw["vqvae"])
        enc = _merge(EncoderConfig(), vq.pop("encoder", {}), f"{path}:vqvae.encoder")
        cfg.vqvae = _merge(cfg.vqvae, {**vq, "encoder": enc}, f"{path}:vqvae")
    for name in ("prior", "sampling", "search"):
        if name in raw:
            setattr(cfg, name, _merge(getattr(cfg, name), raw[name], f"{path}:{name}"))
    return cfg


def _apply_flags(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Explicit command-line flags override the config file."""
    def given(name):
        return getattr(args, name, None) is not None

    if given("space"):
        cfg.space = args.space
    if given("seed"):
        cfg.seed = args.seed
    if given("epochs"):
        if args.command == "train-vqvae":
            cfg.vqvae = _merge(cfg.vqvae, {"epochs": args.epochs}, "flags")
        else:
            cfg.prior = _merge(cfg.prior, {"epochs": args.epochs}, "flags")
    sampling = {}
    for flag, key in (("temperature", "temperature"), ("n", "num_samples"), ("max_new_tokens", "max_new_tokens")):
        if args.command == "generate" and given(flag):
            sampling[key] = getattr(args, flag)
    if args.command == "generate":
        sampling["seed"] = cfg.seed
        cfg.sampling = _merge(cfg.sampling, sampling, "flags")
    if args.command == "search":
        search = {"seed": cfg.seed}
        for flag, key in (("n", "n"), ("m", "m"), ("iterations", "iterations"), ("temperature", "temperature"),
                          ("budget", "query_budget"), ("dataset", "dataset")):
            if given(flag):
                search[key] = getattr(args, flag)
        cfg.search = _merge(cfg.search, search, "flags")
    for key, value in vars(args).items():
        if value is not None and key in _PATH_ARGS:
            cfg.paths[key] = str(value)
    return cfg


_PATH_ARGS = {"input", "dataset_file", "vqvae_ckpt", "prior_ckpt", "corpus", "generated", "train_hashes", "out", "benchmark"}


def _out_dir(args) -> Path:
    d = Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _log_run(args, cfg: RunConfig, extra: dict | None = None) -> None:
    record = {
        "command": args.command,
        "version": __version__,
        "argv": args.argv,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        record["result"] = extra
    (_out_dir(args) / f"run-{args.command}.json").write_text(json.dumps(record, indent=2, default=str))


def _need(path: str | None, what: str) -> Path:
    if path is None:
        raise UserError(f"missing required input: {what}")
    p = Path(path)
    if not p.exists():
        raise UserError(f"{what} not found: {p}")
    return p


def _load_dataset(path: Path, space, seed: int) -> Benchmark:
    try:
        return ingest_benchmark(path, space, seed=seed)
    except ValueError as exc:
        raise UserError(str(exc)) from exc


def _write_hashes(path: Path, bench: Benchmark) -> None:
    path.write_text("".join(bench.records[i].canonical_hash + "\n" for i in bench.train))


# ---- subcommands -----------------------------------------------------------


def cmd_ingest(args, cfg: RunConfig) -> dict:
    space = get_space(cfg.space)
    out = Path(args.out or _out_dir(args) / "dataset.jsonl")
    if args.input is not None:
        bench = _load_dataset(_need(args.input, "benchmark file"), space, cfg.seed)
        records = bench.records
    elif space.space_id == "nb201":
        records = make_records(enumerate_nb201(), space)
    else:
        if not args.sample:
            raise UserError("nb101 without --input needs --sample N")
        records = make_records(sample_nb101(args.sample, seed=cfg.seed), space)
    write_records(out, records)
    bench = ingest_benchmark(out, space, seed=cfg.seed)
    hashes = out.with_name(out.stem + ".train_hashes.txt")
    _write_hashes(hashes, bench)
    print(f"wrote {len(bench)} records to {out} ({len(bench.train)} train / {len(bench.validation)} validation)")
    return {"records": len(bench), "train": len(bench.train), "validation": len(bench.validation),
            "skipped": bench.skipped, "train_hashes": str(hashes)}


def cmd_train_vqvae(args, cfg: RunConfig) -> dict:
    space = get_space(cfg.space)
    bench = _load_dataset(_need(args.dataset_file, "dataset"), space, cfg.seed)
    if not bench.train:
        raise UserError("dataset has no training records")
    train = [bench.records[i].graph for i in bench.train]
    val = [bench.records[i].graph for i in bench.validation]
    metrics = Path(args.metrics_log or _out_dir(args) / "vqvae_metrics.jsonl")
    ckpt = train_vqvae(train, space, cfg.vqvae, seed=cfg.seed, metrics_path=metrics)
    out = Path(args.out or _out_dir(args) / "vqvae.ckpt")
    ckpt.save(out)
    acc = reconstruction_accuracy(ckpt, val) if val else None
    print(f"saved {out}; held-out reconstruction accuracy {acc}")
    return {"checkpoint": str(out), "reconstruction_accuracy": acc, "metrics_log": str(metrics)}


def cmd_encode(args, cfg: RunConfig) -> dict:
    ckpt = Checkpoint.load(_need(args.vqvae_ckpt, "vqvae checkpoint"))
    bench = _load_dataset(_need(args.dataset_file, "dataset"), ckpt.space, cfg.seed)
    train = [bench.records[i].graph for i in bench.train]
    seqs = [tuple(int(v) for v in s) for s in ckpt.encode_graphs(train)]
    corpus = build_corpus(seqs, seed=cfg.seed, fills_per_sequence=args.fills_per_sequence)
    out = Path(args.out or _out_dir(args) / "corpus.jsonl")
    write_corpus(out, corpus)
    print(f"wrote {len(corpus)} examples ({len(seqs)} sequences) to {out}")
    return {"examples": len(corpus), "sequences": len(seqs), "corpus": str(out)}


def cmd_train_prior(args, cfg: RunConfig) -> dict:
    ckpt = Checkpoint.load(_need(args.vqvae_ckpt, "vqvae checkpoint"))
    corpus = read_corpus(_need(args.corpus, "corpus"))
    if not corpus:
        raise UserError("corpus is empty")
    prior = TransformerPrior(ckpt.codebook_size, ckpt.n_positions, cfg.prior, seed=cfg.seed)
    losses = prior.train(corpus)
    out = Path(args.out or _out_dir(args) / "prior.ckpt")
    prior.save(out)
    print(f"saved {out}; final loss {losses[-1]:.4f}")
    return {"checkpoint": str(out), "losses": losses}


def cmd_generate(args, cfg: RunConfig) -> dict:
    ckpt = Checkpoint.load(_need(args.vqvae_ckpt, "vqvae checkpoint"))
    prior = TransformerPrior.load(_need(args.prior_ckpt, "prior checkpoint"))
    results = generate(prior, cfg.sampling, ckpt.n_positions, ckpt.codebook_size)
    parsed = [r for r in results if not isinstance(r, ParseError)]
    graphs = iter(ckpt.decode_sequences(parsed)) if parsed else iter(())
    out = Path(args.out or _out_dir(args) / "generated.jsonl")
    n_valid = 0
    with open(out, "w") as fh:
        for i, r in enumerate(results):
            rec = {"index": i, "sequence": None, "error": None, "valid": False, "hash": None}
            if isinstance(r, ParseError):
                rec["error"] = r.kind
                rec["text"] = r.text
            else:
                g = next(graphs)
                rec["sequence"] = list(r)
                rec["text"] = to_sentence(r)
                if validate_cell(g, ckpt.space).is_valid:
                    rec["valid"] = True
                    rec["hash"] = canonical_hash(g)
                    n_valid += 1
            fh.write(json.dumps(rec) + "\n")
    print(f"wrote {len(results)} samples to {out} ({n_valid} valid)")
    return {"samples": len(results), "valid": n_valid, "out": str(out)}


def _read_generated(path: Path, n_positions: int, codebook_size: int) -> list:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise UserError(f"{path}:{lineno}: not JSON") from exc
            seq = rec.get("sequence")
            if seq is None:
                out.append(ParseError(rec.get("error") or "wrong_length", rec.get("text", "")))
            elif len(seq) != n_positions or not all(isinstance(v, int) and 0 <= v < codebook_size for v in seq):
                raise UserError(f"{path}:{lineno}: sequence does not fit the checkpoint")
            else:
                out.append(tuple(seq))
    return out


def cmd_evaluate(args, cfg: RunConfig) -> dict:
    ckpt = Checkpoint.load(_need(args.vqvae_ckpt, "vqvae checkpoint"))
    samples = _read_generated(_need(args.generated, "generated samples"), ckpt.n_positions, ckpt.codebook_size)
    hashes = set(_need(args.train_hashes, "training hashes").read_text().split())
    report = generation_metrics(samples, ckpt, hashes, ckpt.space, dedup=args.dedup)
    out = Path(args.out or _out_dir(args) / "report.json")
    out.write_text(report.to_json())
    print(report.to_json())
    return report.to_dict()


def cmd_search(args, cfg: RunConfig) -> dict:
    space = get_space(cfg.space)
    records = None
    if args.benchmark is not None:
        bench = _load_dataset(_need(args.benchmark, "benchmark"), space, cfg.seed)
        if not any(cfg.search.dataset in r.metrics for r in bench.records):
            raise UserError(f"benchmark has no {cfg.search.dataset} metrics")
        records = bench.records
    if args.method == "sequence":
        ckpt = Checkpoint.load(_need(args.vqvae_ckpt, "vqvae checkpoint"))
        prior = TransformerPrior.load(_need(args.prior_ckpt, "prior checkpoint"))
        if ckpt.space.space_id != space.space_id:
            raise UserError(f"checkpoint is for {ckpt.space.space_id}, not {space.space_id}")
    traces = []
    for trial in range(args.trials):
        config = _merge(cfg.search, {"seed": cfg.search.seed + trial}, "trial")
        if records is not None:
            oracle = TabularOracle(records, config.dataset)
        else:
            oracle = SyntheticOracle(space, config.dataset, seed=args.oracle_seed)
        if args.method == "sequence":
            trace = run_search(config, oracle, prior, ckpt, space)
        else:
            trace = random_search_baseline(config, oracle, space)
        logger.info("trial %d: best val %.4f after %d queries", trial, trace.best_val_acc, trace.total_queries)
        traces.append(trace)
    summary = summarize(traces)
    summary["oracle"] = "tabular" if records is not None else "synthetic"
    summary["method"] = args.method
    out = Path(args.out or _out_dir(args) / "trace.json")
    out.write_text(json.dumps({"trials": [t.to_dict() for t in traces], "summary": summary}, indent=2))
    print(json.dumps(summary))
    return summary


def cmd_analyze(args, cfg: RunConfig) -> dict:
    ckpt = Checkpoint.load(_need(args.vqvae_ckpt, "vqvae checkpoint"))
    bench = _load_dataset(_need(args.dataset_file, "dataset"), ckpt.space, cfg.seed)
    out_dir = _out_dir(args)
    train = [bench.records[i].graph for i in bench.train]
    val = [bench.records[i].graph for i in bench.validation]
    train_seqs = ckpt.encode_graphs(train)
    result: dict = {}
    if val:
        result["reconstruction_accuracy"] = reconstruction_accuracy(ckpt, val)
    hists = position_histograms(train_seqs.tolist(), ckpt.codebook_size)
    write_histograms_csv(out_dir / "histograms_train.csv", hists)
    result["tv_uniform_vs_train"] = uniform_total_variation(hists)
    if args.generated is not None:
        samples = _read_generated(_need(args.generated, "generated samples"), ckpt.n_positions, ckpt.codebook_size)
        hashes = {bench.records[i].canonical_hash for i in bench.train}
        novel = []
        for s, g in zip(*_decoded_valid(ckpt, samples)):
            if canonical_hash(g) not in hashes:
                novel.append(list(s))
        if novel:
            gen_hists = position_histograms(novel, ckpt.codebook_size)
            write_histograms_csv(out_dir / "histograms_novel.csv", gen_hists)
            result["tv_novel_vs_train"] = total_variation(gen_hists, hists)
        result["novel_sequences"] = len(novel)
    rng = np.random.default_rng(cfg.seed)
    pick = rng.choice(len(train_seqs), size=min(args.perm_sequences, len(train_seqs)), replace=False)
    result["permutation_sensitivity"] = permutation_sensitivity(ckpt, train_seqs[pick], args.perms, seed=cfg.seed)
    (out_dir / "analysis.json").write_text(json.dumps(result, indent=2))
    print(json.dumps({k: v for k, v in result.items() if not isinstance(v, list)}))
    return result


def _decoded_valid(ckpt: Checkpoint, samples):
    seqs = [s for s in samples if not isinstance(s, ParseError)]
    graphs = ckpt.decode_sequences(seqs) if seqs else []
    keep = [(s, g) for s, g in zip(seqs, graphs) if validate_cell(g, ckpt.space).is_valid]
    return [s for s, _ in keep], [g for _, g in keep]


# ---- argument parsing ------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration; explicit flags override it")
    common.add_argument("--space", choices=["nb101", "nb201"])
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", help=f"directory for logs and default outputs (default ${OUT_DIR_ENV} or .)")
    common.add_argument("--out", help="main output file")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="vqarch", description="Discrete latent codes and a sequence prior for cell-based NAS.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", parents=[common], help="normalize a benchmark file (or build the space) into JSONL")
    s.add_argument("--input", help="benchmark JSONL; without it, nb201 is enumerated and nb101 sampled")
    s.add_argument("--sample", type=int, help="number of nb101 cells to sample when no --input is given")

    s = sub.add_parser("train-vqvae", parents=[common], help="train the graph VQ-VAE")
    s.add_argument("--dataset", dest="dataset_file", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--metrics-log")

    s = sub.add_parser("encode", parents=[common], help="encode the training split into a text corpus")
    s.add_argument("--vqvae", dest="vqvae_ckpt", required=True)
    s.add_argument("--dataset", dest="dataset_file", required=True)
    s.add_argument("--fills-per-sequence", type=int, default=1)

    s = sub.add_parser("train-prior", parents=[common], help="train the built-in sequence prior")
    s.add_argument("--corpus", required=True)
    s.add_argument("--vqvae", dest="vqvae_ckpt", required=True)
    s.add_argument("--epochs", type=int)

    s = sub.add_parser("generate", parents=[common], help="sample code sequences from the prior")
    s.add_argument("--prior", dest="prior_ckpt", required=True)
    s.add_argument("--vqvae", dest="vqvae_ckpt", required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--temperature", type=float)
    s.add_argument("--max-new-tokens", type=int)

    s = sub.add_parser("evaluate", parents=[common], help="validity / uniqueness / novelty of generated samples")
    s.add_argument("--generated", required=True)
    s.add_argument("--train-hashes", required=True)
    s.add_argument("--vqvae", dest="vqvae_ckpt", required=True)
    s.add_argument("--dedup", choices=["hash", "matrix"], default="hash")

    s = sub.add_parser("search", parents=[common], help="query-budgeted architecture search")
    s.add_argument("--dataset", choices=["cifar10", "cifar100", "imagenet16-120"])
    s.add_argument("--benchmark", help="normalized benchmark JSONL with metrics; synthetic oracle if omitted")
    s.add_argument("--method", choices=["sequence", "random"], default="sequence")
    s.add_argument("--prior", dest="prior_ckpt")
    s.add_argument("--vqvae", dest="vqvae_ckpt")
    s.add_argument("--budget", type=int)
    s.add_argument("--n", type=int)
    s.add_argument("--m", type=int)
    s.add_argument("--iterations", type=int)
    s.add_argument("--temperature", type=float)
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--oracle-seed", type=int, default=0)

    s = sub.add_parser("analyze", parents=[common], help="code histograms and permutation sensitivity")
    s.add_argument("--vqvae", dest="vqvae_ckpt", required=True)
    s.add_argument("--dataset", dest="dataset_file", required=True)
    s.add_argument("--generated")
    s.add_argument("--perms", type=int, default=100)
    s.add_argument("--perm-sequences", type=int, default=1000)
    return p


COMMANDS = {
    "ingest": cmd_ingest,
    "train-vqvae": cmd_train_vqvae,
    "encode": cmd_encode,
    "train-prior": cmd_train_prior,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "search": cmd_search,
    "analyze": cmd_analyze,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = _apply_flags(load_run_config(args.config), args)
        get_space(cfg.space)
        result = COMMANDS[args.command](args, cfg)
        _log_run(args, cfg, result)
        return 0
    except (UserError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        # config dataclasses validate their fields in __post_init__
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        logger.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
