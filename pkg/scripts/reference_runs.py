"""Train the reference config over several seeds and write the reference-values page.

Usage:
    python scripts/reference_runs.py --work runs/reference --out docs/reference_runs.md

Generates the default corpus (seed 0), trains the ``full`` variant for each
seed, evaluates an untrained model for the same seeds, and records every
number alongside the config hash so that later runs can be compared to it.
"""

import argparse
import time
from pathlib import Path

from simtoken.config import DatasetConfig, RunConfig, config_hash
from simtoken.dataset import generate_dataset, load_dataset
from simtoken.evaluate import mean_sd, untrained_report
from simtoken.experiments import SEEDS, run_one, variant_run
from simtoken.prompt import build_vocab


def fmt(x):
    return "-" if x is None else f"{x:.4f}"


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", default="runs/reference", help="scratch directory for data and runs")
    ap.add_argument("--out", default="docs/reference_runs.md")
    ap.add_argument("--seeds", type=int, default=len(SEEDS))
    args = ap.parse_args(argv)

    work = Path(args.work)
    data_dir = work / "data"
    if not (data_dir / "manifest.json").exists():
        generate_dataset(DatasetConfig(), 0, data_dir)
    corpus = load_dataset(data_dir)
    base = RunConfig(dataset=str(data_dir))
    seeds = list(range(args.seeds))

    rows, untrained = [], []
    for seed in seeds:
        res = run_one(variant_run(base, "full", seed), corpus, "full", work / f"full_seed{seed}")
        rows.append(res)
        untrained.append(untrained_report(base, corpus, build_vocab(corpus), seed).seen.J)
        s = res.summary()
        print(f"seed {seed}: seen J {s['seen_J']:.3f} unseen J {s['unseen_J']:.3f} "
              f"({res.seconds:.0f}s)", flush=True)

    lines = [
        "# Reference runs",
        "",
        f"Generated by `scripts/reference_runs.py` on {time.strftime('%Y-%m-%d')}.",
        f"Dataset: `DatasetConfig()` with seed 0, hash `{config_hash(DatasetConfig())}`.",
        f"Run config: `RunConfig()` with the seed varied, hash `{config_hash(base)}` (seed 0; paths are not hashed).",
        "",
        "| seed | seen J | unseen J | mix J&F | S | audio-cue J | intra-target cos | loss first | loss last20 | untrained seen J | train s |",
        "|---|---|---|---|---|---|---|---|---|---|---|",
    ]
    for res, u in zip(rows, untrained):
        s = res.summary()
        lines.append(f"| {s['seed']} | {fmt(s['seen_J'])} | {fmt(s['unseen_J'])} | {fmt(s['mix_JF'])} | "
                     f"{fmt(s['S'])} | {fmt(s['audio_J'])} | {fmt(s['seg_cosine'])} | {s['initial_loss']:.3f} | "
                     f"{s['final_loss']:.3f} | {u:.4f} | {res.seconds:.0f} |")
    summ = [r.summary() for r in rows]
    lines.append("")
    for key in ("seen_J", "unseen_J", "mix_JF", "S"):
        m, sd = mean_sd([s[key] for s in summ])
        lines.append(f"- {key}: {m:.4f} ± {sd:.4f}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
