"""Finite-difference checks for every differentiable op, every loss, and a tiny pipeline.

Each case is a ``(name, function, point)`` triple accepted by
:func:`simtoken.numerics.grad_check`. The pipeline cases check the total
training loss with respect to every parameter tensor of a deliberately tiny
model (width 16, one layer, one head) on a two-frame 8x8 corpus; large
tensors are probed at a few random coordinates through a selection matrix,
small ones in full.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .config import DatasetConfig, ModelConfig
from .dataset import build_corpus
from .layers import Scope
from .losses import loss_mask, loss_sa, loss_text
from .model import SimToken
from .numerics import CheckReport, Graph, Node, grad_check
from .prompt import build_vocab

TOLERANCE = 1e-5


@dataclass
class Case:
    name: str
    function: Callable[[Graph, Node], Node]
    point: np.ndarray


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def op_cases(seed: int = 0) -> list[Case]:
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(3, 4))
    B = rng.normal(size=(4, 2))
    W = rng.normal(size=(3, 4))
    gain, bias = rng.normal(size=4), rng.normal(size=4)
    row = rng.normal(size=4)
    table = rng.normal(size=(5, 3))

    def weighted(g, y):
        # a fixed, non-uniform readout so every output coordinate matters
        w = np.cos(np.arange(y.value.size) + 1.0).reshape(y.shape)
        return g.sum(g.mul(y, g.const(w)))

    cases = [
        Case("matmul.left", lambda g, x: weighted(g, g.matmul(x, g.const(B))), A),
        Case("matmul.right", lambda g, x: weighted(g, g.matmul(g.const(A), x)), B),
        Case("transpose", lambda g, x: weighted(g, g.transpose(x)), A),
        Case("reshape", lambda g, x: weighted(g, g.reshape(x, (2, 6))), A),
        Case("add", lambda g, x: weighted(g, g.add(x, g.mul(x, x))), A),
        Case("sub", lambda g, x: weighted(g, g.sub(g.const(W), g.mul(x, x))), A),
        Case("mul", lambda g, x: weighted(g, g.mul(x, g.const(W))), A),
        Case("div", lambda g, x: weighted(g, g.div(g.const(W), x)), _positive(rng, (3, 4))),
        Case("scale", lambda g, x: weighted(g, g.scale(x, -2.5)), A),
        Case("add_row", lambda g, x: weighted(g, g.add_row(g.const(A), x)), row),
        Case("exp", lambda g, x: weighted(g, g.exp(x)), A),
        Case("log", lambda g, x: weighted(g, g.log(x)), _positive(rng, (3, 4))),
        Case("sigmoid", lambda g, x: weighted(g, g.sigmoid(x)), A),
        Case("softplus", lambda g, x: weighted(g, g.softplus(x)), A * 3),
        Case("gelu", lambda g, x: weighted(g, g.gelu(x)), A),
        Case("sum.all", lambda g, x: g.sum(g.mul(x, x)), A),
        Case("sum.axis", lambda g, x: weighted(g, g.sum(g.mul(x, x), axis=1)), A),
        Case("mean.axis", lambda g, x: weighted(g, g.mean(g.mul(x, x), axis=0)), A),
        Case("concat", lambda g, x: weighted(g, g.concat([x, g.scale(x, 2.0)], axis=1)), A),
        Case("slice", lambda g, x: weighted(g, g.slice(x, 1, 1, 3)), A),
        Case("embedding", lambda g, x: weighted(g, g.embedding(x, [0, 3, 3, 1])), table),
        Case("softmax", lambda g, x: weighted(g, g.softmax(x)), A),
        Case("log_softmax", lambda g, x: weighted(g, g.log_softmax(x)), A),
        Case("layer_norm.x", lambda g, x: weighted(g, g.layer_norm(x, g.const(gain), g.const(bias))), A),
        Case("layer_norm.gain", lambda g, x: weighted(g, g.layer_norm(g.const(A), x, g.const(bias))), gain),
        Case("layer_norm.bias", lambda g, x: weighted(g, g.layer_norm(g.const(A), g.const(gain), x)), bias),
    ]
    return cases


def loss_cases(seed: int = 0) -> list[Case]:
    rng = np.random.default_rng(seed + 1)
    logits = rng.normal(size=(6, 5))
    mask_logits = rng.normal(size=(2, 4, 4))
    gt = (rng.random((2, 4, 4)) < 0.4).astype(float)
    q = rng.normal(size=(1, 3)) * 0.3
    P = rng.normal(size=(3, 3)) * 0.3

    def members(g, x):
        return [g.slice(x, 0, i, i + 1) for i in range(x.shape[0])]

    return [
        Case("loss.text", lambda g, x: loss_text(g, x, [1, 4, 2], [2, 3, 4]), logits),
        Case("loss.bce", lambda g, x: loss_mask(g, x, gt)[0], mask_logits),
        Case("loss.dice", lambda g, x: loss_mask(g, x, gt)[1], mask_logits),
        Case("loss.sa.anchor", lambda g, x: loss_sa(g, x, members(g, g.const(P)), 0.07), q),
        Case("loss.sa.members", lambda g, x: loss_sa(g, g.const(q), members(g, x), 0.07), P),
    ]


def tiny_setup(seed: int = 0):
    """A two-frame 8x8 corpus, a width-16 model, and a small batch with a non-trivial positive set."""
    dcfg = DatasetConfig(n_train=4, n_seen=1, n_unseen=1, n_null=1, frames=2, size=8, object_size=3,
                         min_objects=2, max_objects=2)
    corpus = build_corpus(dcfg, seed)
    mcfg = ModelConfig(feat_dim=8, patch=4, model_dim=16, layers=1, heads=1, max_len=64,
                       seg_dim=8, seg_patch=4, hyper_dim=4)
    model = SimToken(mcfg, build_vocab(corpus), dcfg.size)
    params = model.init_params(seed)
    # the largest same-target group (K >= 2 exercises the alignment softmax) plus one null expression
    groups: dict = {}
    for rec in corpus.split("train"):
        groups.setdefault((rec.video_id, rec.target_object_id), []).append(rec)
    batch = max((v for k, v in groups.items() if k[1] is not None), key=len)
    batch += next(v for k, v in groups.items() if k[1] is None)[:1]
    samples = [model.prepare(corpus, rec) for rec in batch]
    return model, params, samples


def pipeline_cases(seed: int = 0, probes: int = 4, lam: float = 0.1, tau: float = 0.07) -> list[Case]:
    """One case per parameter tensor of the tiny model, checking the total loss."""
    model, params, samples = tiny_setup(seed)
    rng = np.random.default_rng(seed + 2)
    cases = []
    for name in sorted(params):
        base = params[name]
        size = base.size
        idx = np.arange(size) if size <= probes else np.sort(rng.choice(size, probes, replace=False))
        select = np.zeros((size, idx.size))
        select[idx, np.arange(idx.size)] = 1.0
        rest = base.ravel().copy()
        rest[idx] = 0.0

        def function(g, x, name=name, base=base, select=select, rest=rest):
            flat = g.add(g.const(rest.reshape(-1, 1)), g.matmul(g.const(select), g.reshape(x, (x.shape[0], 1))))
            node = g.reshape(flat, base.shape)
            s = Scope(g, params, overrides={name: node})
            return model.batch_loss_in(s, samples, lam, tau)[0]

        cases.append(Case(f"pipeline.{name}", function, base.ravel()[idx].copy()))
    return cases


def all_cases(seed: int = 0) -> Iterator[Case]:
    yield from op_cases(seed)
    yield from loss_cases(seed)
    yield from pipeline_cases(seed)


def run_suite(seed: int = 0, tolerance: float = TOLERANCE, report=None) -> list[tuple[str, CheckReport]]:
    results = []
    for case in all_cases(seed):
        rep = grad_check(case.function, case.point, tolerance=tolerance)
        results.append((case.name, rep))
        if report is not None:
            report(case.name, rep)
    return results
