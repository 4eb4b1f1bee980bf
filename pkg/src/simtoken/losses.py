"""Training objective: text cross-entropy, BCE + Dice mask loss, and semantic alignment."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .numerics import Graph, Node, ShapeError

DICE_EPS = 1.0
TAU = 0.07
LAMBDA = 0.1


@dataclass
class PositiveSet:
    anchor_id: str
    members: list[Node]  # graph nodes, never copies

    @property
    def K(self) -> int:
        return len(self.members)


@dataclass
class LossBreakdown:
    l_text: float
    l_bce: float
    l_dice: float
    l_mask: float
    l_sa: float
    total: float
    lam: float
    n_sa: int = 0

    def to_dict(self):
        return asdict(self)


def loss_text(g: Graph, logits: Node, targets, positions) -> Node:
    """Mean next-token cross-entropy over the supervised positions only."""
    targets, positions = list(targets), list(positions)
    if len(targets) != len(positions) or not targets:
        raise ShapeError(f"loss_text: {len(positions)} positions for {len(targets)} targets")
    V = logits.shape[1]
    start, stop = positions[0], positions[-1] + 1
    if positions != list(range(start, stop)):
        raise ShapeError("loss_text: positions must be contiguous")
    logp = g.log_softmax(g.slice(logits, 0, start, stop))
    onehot = np.zeros((len(targets), V))
    onehot[np.arange(len(targets)), targets] = 1.0
    return g.scale(g.sum(g.mul(logp, g.const(onehot))), -1.0 / len(targets))


def loss_mask(g: Graph, mask_logits: Node, gt) -> tuple[Node, Node, Node]:
    """``(l_bce, l_dice, l_bce + l_dice)`` over all ``T*H*W`` elements jointly."""
    gt = np.asarray(gt, dtype=np.float64)
    if gt.shape != mask_logits.shape:
        raise ShapeError(f"loss_mask: shape mismatch {mask_logits.shape} vs {gt.shape}")
    if not np.isin(gt, (0.0, 1.0)).all():
        raise ValueError("loss_mask: ground truth must be binary")
    gtn = g.const(gt)
    # BCE with logits: softplus(x) - y*x
    l_bce = g.mean(g.sub(g.softplus(mask_logits), g.mul(gtn, mask_logits)))
    p = g.sigmoid(mask_logits)
    inter = g.sum(g.mul(p, gtn))
    num = g.add(g.scale(inter, 2.0), g.const(DICE_EPS))
    den = g.add(g.sum(p), g.const(gt.sum() + DICE_EPS))
    l_dice = g.sub(g.const(1.0), g.div(num, den))
    return l_bce, l_dice, g.add(l_bce, l_dice)


def unit_rows(g: Graph, x: Node, eps: float = 1e-12) -> Node:
    """Scale every row of a 2-D node to unit Euclidean length."""
    n, d = x.shape
    sq = g.add(g.sum(g.mul(x, x), axis=1), g.const(np.full(n, eps)))
    inv = g.exp(g.scale(g.log(sq), -0.5))
    spread = g.matmul(g.reshape(inv, (n, 1)), g.const(np.ones((1, d))))
    return g.mul(x, spread)


def loss_sa(g: Graph, q: Node, positives, tau: float = TAU, normalize: bool = False) -> Node | None:
    """Cross-entropy between the anchor's softmax over its positives and uniform.

    With ``normalize`` the similarities are cosines rather than raw dot
    products. Returns ``None`` (a zero contribution) for an empty positive set.
    """
    members = list(positives)
    if not members:
        return None
    rows = [m if len(m.shape) == 2 else g.reshape(m, (1, m.shape[0])) for m in members]
    if any(r.shape[1] != q.shape[-1] for r in rows):
        raise ShapeError("loss_sa: anchor and positives differ in width")
    P = rows[0] if len(rows) == 1 else g.concat(rows, axis=0)
    qrow = q if len(q.shape) == 2 else g.reshape(q, (1, q.shape[0]))
    if normalize:
        P, qrow = unit_rows(g, P), unit_rows(g, qrow)
    sims = g.scale(g.matmul(qrow, g.transpose(P)), 1.0 / tau)
    return g.scale(g.mean(g.log_softmax(sims)), -1.0)


def build_positive_sets(records, seg_nodes) -> list[PositiveSet]:
    """One set per expression that has at least one same-target partner in the batch."""
    groups: dict[tuple, list[int]] = {}
    for i, rec in enumerate(records):
        if rec.target_object_id is not None:
            groups.setdefault((rec.video_id, rec.target_object_id), []).append(i)
    sets = []
    for i, rec in enumerate(records):
        if rec.target_object_id is None:
            continue
        mates = [j for j in groups[(rec.video_id, rec.target_object_id)] if j != i]
        if mates:
            sets.append(PositiveSet(rec.expression_id, [seg_nodes[j] for j in mates]))
    return sets


def total_loss(g: Graph, l_text: Node, l_mask: Node, l_sa: Node | None, lam: float = LAMBDA) -> Node:
    """``l_text + l_mask + lam * l_sa``; a missing ``l_sa`` counts as zero."""
    total = g.add(l_text, l_mask)
    if l_sa is not None:
        total = g.add(total, g.scale(l_sa, lam))
    return total


def batch_mean(g: Graph, nodes) -> Node | None:
    nodes = [n for n in nodes if n is not None]
    if not nodes:
        return None
    acc = nodes[0]
    for n in nodes[1:]:
        acc = g.add(acc, n)
    return g.scale(acc, 1.0 / len(nodes))
