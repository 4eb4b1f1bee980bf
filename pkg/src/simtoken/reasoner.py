"""Toy causal transformer standing in for the multimodal language model.

Parameter layout (``V`` vocab size, ``D`` model width, ``F`` feature width,
``M`` max length, ``A`` raw audio width)::

    tok_emb V*D, pos_emb M*D, audio A*F + F, proj.{vt,vs,vf,a} 4*(F*D + D),
    per layer 8*D*D + 11*D, lnf 2*D, head D*V + V,
    and with ``patch_pos`` a shared VS/VF patch-position table L*D

Matrices are initialised uniform in ``+-1/sqrt(fan_in)`` (embedding tables use
``fan_in = D``); biases start at zero and layer-norm gains at one.
"""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .dataset import AUDIO_DIM
from .layers import Scope, block_param_count, init_block, init_linear, layer_norm, linear, transformer_block, uniform
from .numerics import Graph, Node, ShapeError
from .prompt import PromptSequence

VIEW_KEYS = {"VT": "vt", "VS": "vs", "VF": "vf", "A": "a"}


def init_params(cfg: ModelConfig, vocab_size: int, seed: int, n_patches: int = 16) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 1])
    D, F = cfg.model_dim, cfg.feat_dim
    p: dict[str, np.ndarray] = {}
    p["tok_emb"] = uniform(rng, D, (vocab_size, D))
    p["pos_emb"] = uniform(rng, D, (cfg.max_len, D))
    init_linear(rng, p, "audio", AUDIO_DIM, F)
    for key in ("vt", "vs", "vf", "a"):
        init_linear(rng, p, f"proj.{key}", F, D)
    for i in range(cfg.layers):
        init_block(rng, p, f"blk{i}", D)
    if cfg.patch_pos:
        p["patch_pos"] = uniform(rng, D, (n_patches, D))
    p["lnf.g"] = np.ones(D)
    p["lnf.b"] = np.zeros(D)
    init_linear(rng, p, "head", D, vocab_size)
    return p


def param_count(cfg: ModelConfig, vocab_size: int, n_patches: int = 16) -> int:
    V, D, F, M = vocab_size, cfg.model_dim, cfg.feat_dim, cfg.max_len
    return (V * D + M * D + AUDIO_DIM * F + F + 4 * (F * D + D)
            + cfg.layers * block_param_count(D) + 2 * D + D * V + V
            + (n_patches * D if cfg.patch_pos else 0))


def embed_sequence(s: Scope, prompt: PromptSequence, block, audio_raw, key=None) -> Node:
    """Token embeddings and projected feature slots, gathered into template order.

    Projected views are memoised per ``key`` (the video) within one graph.
    """
    g = s.g
    tok_ids = [e[1] for e in prompt.elements if e[0] == "tok"]
    pieces = [g.embedding(s["tok_emb"], tok_ids)]
    offsets = {}
    base = len(tok_ids)
    present = {e[1] for e in prompt.elements if e[0] == "feat"}
    for view in ("VT", "VS", "VF", "A"):
        if view not in present:
            continue
        rows = s.cache.get((view, key)) if key is not None else None
        if rows is None:
            if view == "A":
                raw = linear(s, g.const(audio_raw), "audio")
            else:
                raw = g.const({"VT": block.f_vt, "VS": block.f_vs, "VF": block.f_vf}[view])
            rows = linear(s, raw, f"proj.{VIEW_KEYS[view]}")
            if view in ("VS", "VF") and "patch_pos" in s.params:
                rows = g.add(rows, s["patch_pos"])
            if key is not None:
                s.cache[(view, key)] = rows
        offsets[view] = base
        base += rows.shape[0]
        pieces.append(rows)
    pool = g.concat(pieces, axis=0) if len(pieces) > 1 else pieces[0]
    order, t = [], 0
    for e in prompt.elements:
        if e[0] == "tok":
            order.append(t)
            t += 1
        else:
            order.append(offsets[e[1]] + e[2])
    return g.embedding(pool, order)


def forward(s: Scope, cfg: ModelConfig, prompt: PromptSequence, block, audio_raw, key=None) -> tuple[Node, Node]:
    """Teacher-forced pass returning ``(logits S x V, hidden S x D)``.

    ``hidden`` is the final layer-normalised state that feeds the output head.
    """
    n = len(prompt)
    if n > cfg.max_len:
        raise ShapeError(f"sequence length {n} exceeds max_len {cfg.max_len}")
    g = s.g
    x = embed_sequence(s, prompt, block, audio_raw, key)
    x = g.add(x, g.slice(s["pos_emb"], 0, 0, n))
    for i in range(cfg.layers):
        x = transformer_block(s, x, f"blk{i}", cfg.heads, causal=True)
    hidden = layer_norm(s, x, "lnf")
    return linear(s, hidden, "head"), hidden


def extract_seg(g: Graph, hidden: Node, seg_position: int) -> Node:
    """The ``1 x D`` hidden row at the <SEG> position."""
    n = hidden.shape[0]
    if not 0 <= seg_position < n:
        raise IndexError(f"seg_position {seg_position} outside sequence of length {n}")
    g.counts["extract_seg"] = g.counts.get("extract_seg", 0) + 1
    return g.slice(hidden, 0, seg_position, seg_position + 1)
