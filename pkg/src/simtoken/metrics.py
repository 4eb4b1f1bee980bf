"""Region Jaccard, boundary F-measure, the null-split score, and report assembly.

Conventions used here (the local definitions printed in every report header):

* ``J`` pools intersection and union over all ``T*H*W`` pixels of a video;
  an empty prediction against an empty ground truth scores 1.
* ``F`` is computed per frame from 4-neighbour boundaries (the frame border
  counts as background), matched within a Chebyshev radius, then averaged
  over frames. Both boundaries empty scores 1; exactly one empty scores 0.
* ``S`` is the mean predicted-foreground fraction over null expressions.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

CONVENTIONS = ("J: pooled over T*H*W, empty/empty = 1; "
               "F: 4-neighbour boundaries, Chebyshev radius max(1, ceil(0.0075*diag)), frame mean; "
               "S: mean predicted foreground fraction on null expressions")


class MetricError(ValueError):
    pass


def _binary_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred > 0, gt > 0


def jaccard(pred, gt) -> float:
    p, g = _binary_pair(pred, gt)
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(p & g)) / union


def default_radius(H: int, W: int) -> int:
    return max(1, math.ceil(0.0075 * math.hypot(H, W)))


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour."""
    m = np.asarray(mask) > 0
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Chebyshev (square window) dilation."""
    m = np.asarray(mask) > 0
    H, W = m.shape
    padded = np.pad(m, radius, constant_values=False)
    out = np.zeros_like(m)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            out |= padded[dy:dy + H, dx:dx + W]
    return out


def frame_boundary_f(pred: np.ndarray, gt: np.ndarray, radius: int) -> float:
    bp, bg = boundary(pred), boundary(gt)
    n_p, n_g = int(bp.sum()), int(bg.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    precision = float((bp & dilate(bg, radius)).sum()) / n_p
    recall = float((bg & dilate(bp, radius)).sum()) / n_g
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def boundary_f(pred, gt, radius: int | None = None) -> float:
    """Mean per-frame boundary F over a ``T x H x W`` (or single ``H x W``) pair."""
    p, g = _binary_pair(pred, gt)
    if p.ndim == 2:
        p, g = p[None], g[None]
    if radius is None:
        radius = default_radius(*p.shape[-2:])
    return float(np.mean([frame_boundary_f(p[t], g[t], radius) for t in range(p.shape[0])]))


def null_score(preds) -> float:
    """Mean foreground fraction; an empty collection scores 0."""
    ratios = [float(np.count_nonzero(np.asarray(m) > 0)) / np.asarray(m).size for m in preds]
    return float(np.mean(ratios)) if ratios else 0.0


# reports

@dataclass
class SplitScores:
    """Mean scores over one split; all three are ``None`` when the split is empty."""

    J: float | None
    F: float | None
    JF: float | None
    count: int

    @classmethod
    def from_lists(cls, js: list[float], fs: list[float]) -> "SplitScores":
        if not js:
            return cls(None, None, None, 0)
        J, F = float(np.mean(js)), float(np.mean(fs))
        return cls(J, F, (J + F) / 2, len(js))


@dataclass
class EvalReport:
    seen: SplitScores
    unseen: SplitScores
    mix: SplitScores
    S: float | None
    null_count: int
    by_cue: dict[str, dict[str, SplitScores]] = field(default_factory=dict)
    seg_cosine: float | None = None
    conventions: str = CONVENTIONS

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def table(self) -> str:
        head = f"{'':8}{'Seen':>24}{'Unseen':>24}{'Mix':>24}{'Null':>8}"
        sub = f"{'':8}" + f"{'J':>8}{'F':>8}{'J&F':>8}" * 3 + f"{'S':>8}"
        def cell(v):
            return f"{'-':>8}" if v is None else f"{v:8.3f}"

        cells = "".join(cell(x.J) + cell(x.F) + cell(x.JF) for x in (self.seen, self.unseen, self.mix))
        row = f"{'model':8}{cells}{cell(self.S)}"
        counts = (f"n: seen {self.seen.count}, unseen {self.unseen.count}, "
                  f"mix {self.mix.count}, null {self.null_count}")
        return "\n".join([f"# {self.conventions}", head, sub, row, counts]) + "\n"


def build_report(scores: dict[str, list[tuple[str, float, float]]], null_preds: list,
                 seg_cosine: float | None = None) -> EvalReport:
    """Aggregate per-sample ``(cue, J, F)`` triples keyed by split name."""
    def split(items):
        return SplitScores.from_lists([j for _, j, _ in items], [f for _, _, f in items])

    seen = scores.get("seen-test", [])
    unseen = scores.get("unseen-test", [])
    by_cue = {}
    for name, items in (("seen", seen), ("unseen", unseen), ("mix", seen + unseen)):
        cues = sorted({c for c, _, _ in items})
        by_cue[name] = {c: split([x for x in items if x[0] == c]) for c in cues}
    S = null_score(null_preds) if null_preds else None
    if seg_cosine is not None and not np.isfinite(seg_cosine):
        seg_cosine = None
    return EvalReport(split(seen), split(unseen), split(seen + unseen), S, len(null_preds), by_cue, seg_cosine)


def intra_target_cosine(embeddings: list[np.ndarray], targets: list) -> float:
    """Mean pairwise cosine similarity between embeddings that share a target."""
    groups: dict = {}
    for e, t in zip(embeddings, targets):
        groups.setdefault(t, []).append(np.asarray(e, dtype=float))
    sims = []
    for vecs in groups.values():
        if len(vecs) < 2:
            continue
        M = np.stack(vecs)
        M = M / np.maximum(np.linalg.norm(M, axis=1, keepdims=True), 1e-12)
        C = M @ M.T
        iu = np.triu_indices(len(vecs), k=1)
        sims.extend(C[iu].tolist())
    return float(np.mean(sims)) if sims else float("nan")
