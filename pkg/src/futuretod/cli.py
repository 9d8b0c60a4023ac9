"""Command-line entry point: ``futuretod <command> ...``.

Every command writes a ``run_manifest.json`` next to its outputs with the
resolved configuration, the seed, SHA-256 hashes of the inputs and the wall
time.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import __version__, seeding
from .config import FinetuneConfig, PretrainConfig, resolve_config
from .corpus import Utterance, corpus_stats, load_corpus
from .finetune import (
    evaluate_model, evaluate_response_selection, few_shot, finetune_classifier, finetune_response_selection,
    label_space, load_encoder, load_finetuned, read_jsonl, to_examples,
)
from .probe import export_embeddings, golden_smaller_ratio, run_probe, write_probe_csv
from .pretrain import run_pretraining, summary
from .synth import SynthSpec, write_synthetic
from .tokenizer import build_vocab

logger = logging.getLogger("futuretod")

COMMANDS = ("synth", "stats", "pretrain", "finetune", "evaluate", "probe", "export-embeddings")


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
    for q in files:
        h.update(str(q.relative_to(p) if p.is_dir() else q.name).encode())
        h.update(q.read_bytes())
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict[str, Any], seed: int,
                   inputs: dict[str, Optional[str | Path]], started: float) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "inputs": {k: {"path": str(v), "sha256": file_sha256(v)} for k, v in inputs.items() if v is not None},
        "wall_time_s": round(time.time() - started, 3),
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def _dump(doc: Any, path: Path) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")


def _model_dir(checkpoint: Path) -> Path:
    """Accept a checkpoint, a fine-tuning output (``encoder/``) or a pre-training output (``student/``)."""
    for sub in ("encoder", "student"):
        if (checkpoint / sub / "manifest.json").is_file():
            return checkpoint / sub
    return checkpoint


# ------------------------------------------------------------------- commands

def cmd_synth(args: argparse.Namespace, started: float) -> None:
    spec = SynthSpec.load(args.spec) if args.spec else SynthSpec()
    if args.seed is not None:
        spec.seed = args.seed
    spec.validate()
    out = Path(args.out)
    paths = write_synthetic(spec, out)
    logger.info("wrote %d files to %s", len(paths), out)
    doc = asdict(spec)
    write_manifest(out, "synth", doc, spec.seed, {"spec": args.spec}, started)


def cmd_stats(args: argparse.Namespace, started: float) -> None:
    dialogues = load_corpus(args.corpus)
    stats = asdict(corpus_stats(dialogues, build_vocab(dialogues, args.min_freq)))
    text = json.dumps(stats, indent=2, sort_keys=True)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stats.json").write_text(text, encoding="utf-8")
        write_manifest(out, "stats", {"min_freq": args.min_freq}, 0, {"corpus": args.corpus}, started)
    print(text)


def cmd_pretrain(args: argparse.Namespace, started: float) -> None:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.corpus:
        overrides.append(f"corpus={json.dumps(args.corpus)}")
    cfg = resolve_config(PretrainConfig, args.config, overrides)
    if not cfg.corpus:
        raise ValueError("no corpus given (config key 'corpus' or --corpus)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_pretraining(load_corpus(cfg.corpus), cfg, out)
    _dump(summary(result.state), out / "summary.json")
    config = {**cfg.to_json(), "distill_layers_effective": cfg.top_k}
    write_manifest(out, "pretrain", config, cfg.seed, {"corpus": cfg.corpus, "config": args.config}, started)


def cmd_finetune(args: argparse.Namespace, started: float) -> None:
    overrides = list(args.set or []) + [f"task={args.task}"]
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = resolve_config(FinetuneConfig, args.config, overrides)
    encoder, vocab = load_encoder(_model_dir(Path(args.checkpoint)))
    records = read_jsonl(args.data)
    space = label_space(cfg.task, records)
    train = to_examples(cfg.task, records, space)
    dev = to_examples(cfg.task, read_jsonl(args.dev), space) if args.dev else []
    if cfg.shots is not None and cfg.task == "intent":
        train = few_shot(train, cfg.shots, seeding.stream(cfg.seed, "finetune"))
    if cfg.task == "rs":
        model = finetune_response_selection(encoder, vocab, train, cfg, dev)
    else:
        model = finetune_classifier(encoder, vocab, train, space, cfg, dev)
    out = Path(args.out)
    model.save(out)
    _dump(model.history, out / "history.json")
    write_manifest(out, "finetune", cfg.to_json(), cfg.seed,
                   {"checkpoint": args.checkpoint, "data": args.data, "dev": args.dev}, started)


def evaluate_checkpoint(task: str, checkpoint: str | Path, data: str | Path, seed: int = 0):
    """Metric report for a fine-tuned checkpoint on a labeled JSONL file."""
    model = load_finetuned(checkpoint)
    if model.task != task:
        raise ValueError(f"checkpoint was fine-tuned for {model.task!r}, not {task!r}")
    examples = to_examples(task, read_jsonl(data), model.space)
    if task == "rs":
        return evaluate_response_selection(model, examples, seeding.stream(seed, "probe"))
    return evaluate_model(model, examples)


def cmd_evaluate(args: argparse.Namespace, started: float) -> None:
    seed = args.seed or 0
    report = evaluate_checkpoint(args.task, args.checkpoint, args.data, seed)
    text = json.dumps(report.to_json(), indent=2, sort_keys=True)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.save(out / "metrics.json")
        write_manifest(out, "evaluate", {"task": args.task}, seed,
                       {"checkpoint": args.checkpoint, "data": args.data}, started)
    print(text)


def cmd_probe(args: argparse.Namespace, started: float) -> None:
    seed = args.seed or 0
    encoder, vocab = load_encoder(_model_dir(Path(args.checkpoint)))
    records = read_jsonl(args.data)
    pairs = [(tuple(Utterance(**u) for u in r["history"]), Utterance(**r["response"])) for r in records]
    results = run_probe(encoder, vocab, pairs, seeding.stream(seed, "probe"), args.distractors)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_probe_csv(results, out / "probe.csv")
    doc = {
        "golden_smaller_ratio": golden_smaller_ratio(results),
        "mean_golden_distance": float(np.mean([r.golden_distance for r in results])),
        "mean_random_distance": float(np.mean([r.mean_random_distance for r in results])),
        "n": len(results),
    }
    _dump(doc, out / "probe_summary.json")
    write_manifest(out, "probe", {"distractors": args.distractors}, seed,
                   {"checkpoint": args.checkpoint, "data": args.data}, started)
    print(json.dumps(doc, indent=2, sort_keys=True))


def cmd_export(args: argparse.Namespace, started: float) -> None:
    encoder, vocab = load_encoder(_model_dir(Path(args.checkpoint)))
    records = read_jsonl(args.data)
    utts = [Utterance("user", r["text"]) for r in records]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_embeddings(encoder, vocab, utts, [r.get("label", "") for r in records], out / "embeddings.csv")
    write_manifest(out, "export-embeddings", {}, args.seed or 0,
                   {"checkpoint": args.checkpoint, "data": args.data}, started)


HANDLERS = {
    "synth": cmd_synth, "stats": cmd_stats, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "evaluate": cmd_evaluate, "probe": cmd_probe, "export-embeddings": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="futuretod", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name: str, help_: str, out_required: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=out_required, help="output directory")
        return p

    p = add("synth", "generate a synthetic corpus and labeled task files")
    p.add_argument("--spec", help="synthetic corpus spec (JSON)")

    p = add("stats", "corpus statistics as JSON", out_required=False)
    p.add_argument("--corpus", required=True)
    p.add_argument("--min-freq", type=int, default=1)

    p = add("pretrain", "run future-knowledge distillation pre-training")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--corpus", help="JSONL corpus (overrides the config key)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")

    p = add("finetune", "fine-tune on a downstream task")
    p.add_argument("--task", required=True, choices=("intent", "act", "dst", "rs"))
    p.add_argument("--data", required=True)
    p.add_argument("--dev")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")

    p = add("evaluate", "metrics for a fine-tuned checkpoint", out_required=False)
    p.add_argument("--task", required=True, choices=("intent", "act", "dst", "rs"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)

    p = add("probe", "future-knowledge distance probe")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="response-selection JSONL (history, response)")
    p.add_argument("--distractors", type=int, default=99)

    p = add("export-embeddings", "write pooled utterance embeddings as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="intent-format JSONL (text, label)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        HANDLERS[args.command](args, started)
    except Exception as exc:  # noqa: BLE001 - reported with context, non-zero exit
        logger.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
