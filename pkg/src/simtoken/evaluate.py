"""Run a trained model over the test splits and score it."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import Ablation, RunConfig
from .dataset import Corpus
from .metrics import EvalReport, boundary_f, build_report, intra_target_cosine, jaccard
from .model import SimToken
from .prompt import Vocab
from .segmentor import MaskSet, export_masks

TEST_SPLITS = ("seen-test", "unseen-test")


def evaluate(model: SimToken, params: dict, corpus: Corpus, splits=TEST_SPLITS + ("null-test",),
             export_dir=None) -> EvalReport:
    """Score every expression of ``splits``; optionally write binary masks as PGM files.

    The report also carries the mean intra-target cosine similarity of the
    <SEG> embeddings over the seen and unseen splits.
    """
    scores: dict[str, list] = {}
    null_preds, embeddings, targets = [], [], []
    for split in splits:
        for rec in corpus.split(split):
            smp = model.prepare(corpus, rec)
            logits, f_seg = model.predict(params, smp)
            binary = MaskSet(logits).binary
            if export_dir is not None:
                export_masks(Path(export_dir) / split, rec.video_id, rec.expression_id, binary)
            if rec.target_object_id is None:
                null_preds.append(binary)
                continue
            scores.setdefault(split, []).append((rec.cue_modality, jaccard(binary, smp.gt),
                                                 boundary_f(binary, smp.gt)))
            if split in TEST_SPLITS:
                embeddings.append(f_seg)
                targets.append((rec.video_id, rec.target_object_id))
    cosine = intra_target_cosine(embeddings, targets) if embeddings else None
    return build_report(scores, null_preds, cosine)


def untrained_report(run: RunConfig, corpus: Corpus, vocab: Vocab, seed: int | None = None) -> EvalReport:
    model = SimToken(run.model, vocab, corpus.manifest.config.size, run.ablation or Ablation())
    params = model.init_params(run.seed if seed is None else seed)
    return evaluate(model, params, corpus)


def mean_sd(values) -> tuple[float, float]:
    arr = np.asarray(list(values), dtype=float)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0
