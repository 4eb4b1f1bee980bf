"""Command-line entry point: ``simtoken generate|train|eval|ablate|gradcheck``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, DatasetConfig, RunConfig, config_hash, load_config
from .dataset import DatasetError, generate_dataset, load_dataset
from .evaluate import evaluate
from .experiments import VARIANTS, SEEDS, aggregate, format_table, run_matrix, save_matrix
from .model import SimToken
from .prompt import Vocab, build_vocab
from .train import CheckpointError, TrainingError, load_checkpoint, train

EXIT_CONFIG = 2


def _run_config(args) -> RunConfig:
    run = load_config(RunConfig, args.config) if args.config else RunConfig()
    if args.seed is not None:
        run = replace(run, seed=args.seed)
    if getattr(args, "dataset", None):
        run = replace(run, dataset=args.dataset)
    if args.out:
        run = replace(run, out=args.out)
    return run.validate()


def cmd_generate(args) -> int:
    cfg = load_config(DatasetConfig, args.config) if args.config else DatasetConfig()
    out = Path(args.out or "data")
    generate_dataset(cfg, args.seed if args.seed is not None else 0, out)
    corpus = load_dataset(out)
    counts = {name: len(corpus.split(name)) for name in corpus.manifest.splits.values()}
    print(f"wrote {out}: {len(corpus.scenes)} videos, expressions per split {dict(sorted(counts.items()))}")
    return 0


def _progress(rec):
    if rec["step"] % 50 == 0:
        print(f"step {rec['step']:5d} epoch {rec['epoch']:2d} total {rec['total']:.4f} "
              f"text {rec['l_text']:.4f} mask {rec['l_mask']:.4f} sa {rec['l_sa']:.4f} "
              f"({rec['wall_time']:.0f}s)", flush=True)


def cmd_train(args) -> int:
    run = _run_config(args)
    corpus = load_dataset(run.dataset)
    print(f"config hash {config_hash(run)}", flush=True)
    result = train(run, corpus, run.out, _progress)
    print(f"checkpoint {result.checkpoint}; loss {result.log[0]['total']:.4f} -> {result.log[-1]['total']:.4f}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.out or "runs/default") / "checkpoint.stk"
    params, run, vocab_hash, _ = load_checkpoint(ckpt)
    corpus = load_dataset(args.dataset or run.dataset)
    vocab_path = ckpt.parent / "vocab.json"
    vocab = Vocab.load(vocab_path) if vocab_path.exists() else build_vocab(corpus)
    if vocab.digest() != vocab_hash:
        raise CheckpointError(f"{ckpt}: vocabulary does not match the checkpoint")
    model = SimToken(run.model, vocab, corpus.manifest.config.size, run.ablation)
    out = Path(args.out) if args.out else ckpt.parent
    out.mkdir(parents=True, exist_ok=True)
    splits = (args.split,) if args.split else ("seen-test", "unseen-test", "null-test")
    report = evaluate(model, params, corpus, splits, out / "masks" if args.export_masks else None)
    report.save(out / "report.json")
    table = report.table()
    (out / "report.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def cmd_ablate(args) -> int:
    run = _run_config(args)
    corpus = load_dataset(run.dataset)
    out = Path(args.out or "runs/ablate")
    variants = tuple(args.variants.split(",")) if args.variants else tuple(VARIANTS)
    unknown = set(variants) - set(VARIANTS)
    if unknown:
        raise ConfigError(f"unknown variants {sorted(unknown)}; choose from {sorted(VARIANTS)}")
    seeds = tuple(range(args.seeds)) if args.seeds else SEEDS

    def report(res):
        s = res.summary()
        print(f"{s['variant']:8} seed {s['seed']}: seen J {s['seen_J']:.3f} unseen J {s['unseen_J']:.3f} "
              f"mix J&F {s['mix_JF']:.3f} S {s['S']}", flush=True)

    results = run_matrix(run, corpus, variants, seeds, out, report)
    save_matrix(results, out)
    print(format_table(aggregate(results)), end="")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    failures = 0

    def report(name, rep):
        nonlocal failures
        failures += not rep.passed
        print(f"{'ok  ' if rep.passed else 'FAIL'} {name:40} max rel err {rep.max_rel_error:.2e} "
              f"({rep.n_coords} coords)", flush=True)

    results = run_suite(args.seed if args.seed is not None else 0, report=report)
    print(f"{len(results) - failures}/{len(results)} gradient checks passed")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simtoken", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--out", help="output directory")
        if dataset:
            p.add_argument("--dataset", help="dataset directory override")
        return p

    common(sub.add_parser("generate", help="write a synthetic dataset")).set_defaults(func=cmd_generate)
    common(sub.add_parser("train", help="train one model"), dataset=True).set_defaults(func=cmd_train)
    p = common(sub.add_parser("eval", help="score a checkpoint"), dataset=True)
    p.add_argument("--checkpoint", help="checkpoint file (default <out>/checkpoint.stk)")
    p.add_argument("--split", choices=["seen-test", "unseen-test", "null-test"], help="evaluate one split")
    p.add_argument("--export-masks", action="store_true", help="write binary PGM masks")
    p.set_defaults(func=cmd_eval)
    p = common(sub.add_parser("ablate", help="run the ablation matrix over seeds"), dataset=True)
    p.add_argument("--seeds", type=int, help=f"number of seeds (default {len(SEEDS)})")
    p.add_argument("--variants", help=f"comma-separated subset of {','.join(VARIANTS)}")
    p.set_defaults(func=cmd_ablate)
    common(sub.add_parser("gradcheck", help="finite-difference gradient suite")).set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError, TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
