"""Command-line front end.

Subcommands:
    make-corpus  emit a deterministic synthetic text8-format corpus
    train        optimize a model on a text file, logging JSONL metrics
    ablate       train all four communication variants under one budget
    eval         report BPC / perplexity of a checkpoint on a corpus
    generate     temperature sampling from a checkpoint
    analyze      activation + connectivity statistics and report export

Config files are JSON with an optional split: {"model": {...}, "train": {...}}.
A bare flat object is treated as the model section.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import analysis, corpus as corpus_mod
from .data import (bpc, build_vocab, evaluate_nll, generate, load_text,
                   perplexity, split_corpus)
from .model import InnConfig, InnModel
from .training import (TrainConfig, format_ablation_table, load_checkpoint,
                       run_ablation, train)


def _load_config(path: str) -> tuple[InnConfig, TrainConfig]:
    with open(path) as fh:
        raw = json.load(fh)
    if "model" in raw or "train" in raw:
        model_cfg = InnConfig.from_dict(raw.get("model", {}))
        train_cfg = TrainConfig.from_dict(raw.get("train", {}))
    else:
        model_cfg = InnConfig.from_dict(raw)
        train_cfg = TrainConfig()
    return model_cfg, train_cfg


def _prepare_split(data_path: str, vocab_size_hint: int | None = None):
    text = load_text(data_path)
    split = split_corpus(text)
    if vocab_size_hint is not None and split.vocab.size != vocab_size_hint:
        print(f"note: corpus vocabulary has {split.vocab.size} symbols, "
              f"config says {vocab_size_hint}", file=sys.stderr)
    return split


def cmd_make_corpus(args) -> int:
    text = corpus_mod.make_corpus(int(args.size_mb * 1_000_000), seed=args.seed)
    with open(args.out, "w") as fh:
        fh.write(text)
    print(f"wrote {len(text)} chars, {len(set(text))} symbols -> {args.out}")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = _load_config(args.config)
    split = _prepare_split(args.data, model_cfg.vocab_size)
    model_cfg = model_cfg.replace(vocab_size=split.vocab.size)
    if args.resume:
        model, opt, step, metrics = load_checkpoint(args.resume, model_cfg)
        history = train(model, split, train_cfg, out_dir=args.out, opt=opt,
                        start_step=step, metrics=metrics)
    else:
        model = InnModel.init(model_cfg)
        history = train(model, split, train_cfg, out_dir=args.out)
    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "train_bpc", "valid_bpc", "grad_norm"])
        for rec in history:
            writer.writerow([rec.step, rec.lr, rec.train_bpc, rec.valid_bpc,
                             rec.grad_norm])
    last = history[-1]
    print(f"done: step {last.step}, train BPC {last.train_bpc:.4f}, "
          f"valid BPC {last.valid_bpc:.4f}")
    return 0


def cmd_ablate(args) -> int:
    model_cfg, train_cfg = _load_config(args.config)
    split = _prepare_split(args.data, model_cfg.vocab_size)
    model_cfg = model_cfg.replace(vocab_size=split.vocab.size)
    if args.steps:
        train_cfg = TrainConfig.from_dict(
            {**{k: getattr(train_cfg, k) for k in train_cfg.__dataclass_fields__},
             "total_steps": args.steps})
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    table = run_ablation(split, model_cfg, train_cfg, seeds=seeds,
                         out_dir=args.out)
    print(format_ablation_table(table))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "ablation.json"), "w") as fh:
            json.dump(table, fh, indent=2)
        with open(os.path.join(args.out, "ablation.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "seed", "train_bpc", "valid_bpc",
                             "diverged"])
            for row in table:
                for run in row["runs"]:
                    writer.writerow([row["variant"], run["seed"],
                                     run["train_bpc"], run["valid_bpc"],
                                     run["diverged"]])
    return 0


def cmd_eval(args) -> int:
    model, _, step, _ = load_checkpoint(args.ckpt)
    text = load_text(args.data)
    split = split_corpus(text)
    ids = {"train": split.train_ids, "valid": split.valid_ids,
           "test": split.test_ids}[args.split]
    nll = evaluate_nll(model, ids, args.batch_size, args.window)
    out = {"checkpoint_step": step, "split": args.split,
           "nll_nats": nll, "bpc": bpc(nll), "perplexity": perplexity(nll)}
    print(json.dumps(out, indent=2))
    return 0


def cmd_generate(args) -> int:
    model, _, _, _ = load_checkpoint(args.ckpt)
    text = load_text(args.data) if args.data else None
    if text is not None:
        vocab = build_vocab(text)
    else:
        # without a corpus, fall back to the text8 alphabet
        vocab = build_vocab(" abcdefghijklmnopqrstuvwxyz")
    sample = generate(model, vocab, args.seed_text, args.length,
                      args.temperature, rng_seed=args.rng_seed)
    print(args.seed_text + sample)
    return 0


def cmd_analyze(args) -> int:
    model, _, _, _ = load_checkpoint(args.ckpt)
    text = load_text(args.data)
    split = split_corpus(text)
    values, maps = analysis.neuron_activations(
        model, split.valid_ids, args.batch_size, args.window,
        max_batches=args.max_batches)
    act = analysis.activation_stats_from_values(values)
    conn = analysis.connectivity_stats(maps)
    analysis.export_report(act, conn, args.out)
    print(json.dumps({"hubs": conn.hubs, "specialists": conn.specialists,
                      "avg_degree_per_layer": conn.avg_degree_per_layer,
                      "sparsity": act.overall_sparsity}, indent=2))
    print(f"report written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="inn", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="cmd", required=True)

    mc = sub.add_parser("make-corpus", help="emit a synthetic text8-format corpus")
    mc.add_argument("--out", required=True)
    mc.add_argument("--size-mb", type=float, default=1.0)
    mc.add_argument("--seed", type=int, default=0)
    mc.set_defaults(fn=cmd_make_corpus)

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--config", required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--resume", default=None, help="checkpoint to resume from")
    tr.set_defaults(fn=cmd_train)

    ab = sub.add_parser("ablate", help="run the communication-mode ablation")
    ab.add_argument("--config", required=True)
    ab.add_argument("--data", required=True)
    ab.add_argument("--out", default=None)
    ab.add_argument("--steps", type=int, default=None)
    ab.add_argument("--seeds", default=None, help="comma-separated seeds")
    ab.set_defaults(fn=cmd_ablate)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", choices=["train", "valid", "test"], default="test")
    ev.add_argument("--batch-size", type=int, default=8)
    ev.add_argument("--window", type=int, default=128)
    ev.set_defaults(fn=cmd_eval)

    ge = sub.add_parser("generate", help="sample text from a checkpoint")
    ge.add_argument("--ckpt", required=True)
    ge.add_argument("--seed-text", required=True)
    ge.add_argument("--length", type=int, default=200)
    ge.add_argument("--temperature", type=float, default=0.8)
    ge.add_argument("--rng-seed", type=int, default=0)
    ge.add_argument("--data", default=None,
                    help="corpus file to rebuild the vocabulary from")
    ge.set_defaults(fn=cmd_generate)

    an = sub.add_parser("analyze", help="activation/connectivity report")
    an.add_argument("--ckpt", required=True)
    an.add_argument("--data", required=True)
    an.add_argument("--out", required=True)
    an.add_argument("--batch-size", type=int, default=8)
    an.add_argument("--window", type=int, default=64)
    an.add_argument("--max-batches", type=int, default=16)
    an.set_defaults(fn=cmd_analyze)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
