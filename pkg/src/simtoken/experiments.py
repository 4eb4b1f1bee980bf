"""Training-plus-evaluation runs and the ablation matrix used by the CLI and the acceptance suite."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import Ablation, RunConfig, config_hash, to_dict
from .dataset import Corpus
from .evaluate import evaluate, mean_sd
from .metrics import EvalReport
from .train import train

# Each variant is a set of ablation flags applied on top of the base run.
VARIANTS: dict[str, dict[str, bool]] = {
    "full": {},
    "no_audio": {"drop_audio": True},
    "no_audio_visual": {"drop_audio": True, "drop_vt": True, "drop_vs": True, "drop_vf": True},
    "vf_only": {"drop_vt": True, "drop_vs": True},
    "vf_vs": {"drop_vt": True},
    "no_sa": {"disable_sa": True},
}

SEEDS = (0, 1, 2)


@dataclass
class RunResult:
    variant: str
    seed: int
    config_hash: str
    initial_loss: float
    final_loss: float
    report: EvalReport
    seconds: float = 0.0  # training wall time; kept out of the summary so saved files stay reproducible

    def summary(self) -> dict:
        r = self.report
        audio = r.by_cue.get("mix", {}).get("audio-cue")
        return {
            "variant": self.variant,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "seen_J": r.seen.J,
            "unseen_J": r.unseen.J,
            "mix_J": r.mix.J,
            "mix_F": r.mix.F,
            "mix_JF": r.mix.JF,
            "S": r.S,
            "audio_J": audio.J if audio else float("nan"),
            "seg_cosine": r.seg_cosine,
        }


def variant_run(base: RunConfig, variant: str, seed: int) -> RunConfig:
    flags = {**to_dict(base.ablation), **VARIANTS[variant]}
    return replace(base, seed=seed, ablation=Ablation(**flags))


def final_loss(log: list[dict], window: int = 20) -> float:
    """Mean total loss over the last ``window`` steps, which smooths batch noise."""
    return float(np.mean([r["total"] for r in log[-window:]]))


def run_one(run: RunConfig, corpus: Corpus, variant: str = "full", out_dir=None, progress=None) -> RunResult:
    t0 = time.perf_counter()
    result = train(run, corpus, out_dir, progress)
    seconds = time.perf_counter() - t0
    report = evaluate(result.model, result.params, corpus)
    if out_dir is not None:
        report.save(Path(out_dir) / "report.json")
        (Path(out_dir) / "report.txt").write_text(report.table(), encoding="utf-8")
    return RunResult(variant, run.seed, config_hash(run), result.log[0]["total"], final_loss(result.log), report,
                     seconds)


def run_matrix(base: RunConfig, corpus: Corpus, variants=tuple(VARIANTS), seeds=SEEDS, out_dir=None,
               progress=None) -> list[RunResult]:
    results = []
    for variant in variants:
        for seed in seeds:
            run = variant_run(base, variant, seed)
            sub = None if out_dir is None else Path(out_dir) / f"{variant}_seed{seed}"
            res = run_one(run, corpus, variant, sub)
            results.append(res)
            if progress is not None:
                progress(res)
    return results


def aggregate(results: list[RunResult]) -> dict[str, dict[str, tuple[float, float]]]:
    """Mean and sample standard deviation of each summary metric per variant."""
    table: dict[str, dict[str, tuple[float, float]]] = {}
    keys = ("seen_J", "unseen_J", "mix_J", "mix_F", "mix_JF", "S", "audio_J", "seg_cosine")
    for variant in dict.fromkeys(r.variant for r in results):
        rows = [r.summary() for r in results if r.variant == variant]
        table[variant] = {k: mean_sd(row[k] for row in rows) for k in keys}
    return table


def format_table(table: dict[str, dict[str, tuple[float, float]]]) -> str:
    keys = ("seen_J", "unseen_J", "mix_JF", "mix_F", "S", "audio_J", "seg_cosine")
    lines = [f"{'variant':16}" + "".join(f"{k:>18}" for k in keys)]
    for variant, row in table.items():
        lines.append(f"{variant:16}" + "".join(f"{row[k][0]:>10.3f} +-{row[k][1]:5.3f}" for k in keys))
    return "\n".join(lines) + "\n"


def save_matrix(results: list[RunResult], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [r.summary() for r in results]
    (out / "ablation.json").write_text(json.dumps({"runs": rows, "aggregate": aggregate(results)},
                                                  indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "ablation.txt").write_text(format_table(aggregate(results)), encoding="utf-8")
