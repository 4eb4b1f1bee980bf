"""Promptable per-frame mask decoder.

One prompt embedding, computed once from the <SEG> state, conditions the
decoding of every frame independently::

    masks[t] = decode(encode_frame(frames[t]), encode_prompt(f_seg))

The decoder lets the prompt cross-attend over patch features, turns the
result into a small hypernetwork vector, and scores every pixel by a dot
product with per-pixel embeddings. Pixel embeddings come from a per-patch
linear map of the encoded patch plus a per-pixel linear map of the pixel's
own colour, so colour selection is linear in the prompt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .compression import patchify
from .config import ModelConfig
from .layers import Scope, block_param_count, init_block, init_linear, linear, transformer_block, uniform
from .numerics import Graph, Node, ShapeError


def init_params(cfg: ModelConfig, size: int, seed: int, channels: int = 3) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 2])
    P, Ds, Dh = cfg.seg_patch, cfg.seg_dim, cfg.hyper_dim
    if size % P:
        raise ShapeError(f"frame size {size} not divisible by segmentor patch {P}")
    L = (size // P) ** 2
    pix = channels * P * P
    p: dict[str, np.ndarray] = {}
    init_linear(rng, p, "seg.patch", pix, Ds)
    p["seg.pos"] = uniform(rng, Ds, (L, Ds))
    init_block(rng, p, "seg.enc", Ds)
    init_linear(rng, p, "seg.prompt", cfg.model_dim, Ds)
    for name in ("q", "k", "v", "o"):
        init_linear(rng, p, f"seg.dec.{name}", Ds, Ds, bias=False)
    init_linear(rng, p, "seg.dec.hyper", Ds, Dh)
    init_linear(rng, p, "seg.dec.up", Ds, P * P * Dh)
    init_linear(rng, p, "seg.dec.rgb", channels, Dh, bias=False)
    p["seg.dec.bias"] = np.zeros(1)
    return p


def param_count(cfg: ModelConfig, size: int, channels: int = 3) -> int:
    P, Ds, Dh, Dm = cfg.seg_patch, cfg.seg_dim, cfg.hyper_dim, cfg.model_dim
    L = (size // P) ** 2
    pix = channels * P * P
    return (pix * Ds + Ds + L * Ds + block_param_count(Ds) + Dm * Ds + Ds
            + 4 * Ds * Ds + Ds * Dh + Dh + Ds * P * P * Dh + P * P * Dh
            + channels * Dh + 1)


_PIXEL_ORDER: dict[tuple[int, int, int], np.ndarray] = {}


def pixel_order(H: int, W: int, P: int) -> np.ndarray:
    """Raster index -> position in the (patch, in-patch pixel) flattening."""
    key = (H, W, P)
    if key not in _PIXEL_ORDER:
        y, x = np.mgrid[0:H, 0:W]
        patch = (y // P) * (W // P) + x // P
        _PIXEL_ORDER[key] = (patch * P * P + (y % P) * P + x % P).ravel()
    return _PIXEL_ORDER[key]


def frame_patches(frames: np.ndarray, P: int) -> np.ndarray:
    return patchify(frames, P)


def encode_frame(s: Scope, cfg: ModelConfig, patches: np.ndarray, key=None) -> Node:
    """Patch features ``L_s x D_s`` of one frame; ``patches`` is ``L_s x 3P^2``.

    With a ``key``, the node is memoised in the scope so expressions about the
    same video share one encoding per graph.
    """
    if key is not None:
        node = s.cache.get(("frame", key))
        if node is None:
            node = s.cache[("frame", key)] = encode_frame(s, cfg, patches)
        return node
    g = s.g
    x = linear(s, g.const(patches), "seg.patch")
    x = g.add(x, s["seg.pos"])
    return transformer_block(s, x, "seg.enc", heads=1, causal=False)


def encode_prompt(s: Scope, f_seg: Node) -> Node:
    """Linear prompt encoder, ``1 x D_m -> 1 x D_s``."""
    s.g.counts["encode_prompt"] = s.g.counts.get("encode_prompt", 0) + 1
    return linear(s, f_seg, "seg.prompt")


def decode(s: Scope, cfg: ModelConfig, feats: Node, prompt: Node, patches: np.ndarray, H: int, W: int) -> Node:
    """Mask logits ``H x W`` for one frame."""
    g = s.g
    P, Ds, Dh = cfg.seg_patch, cfg.seg_dim, cfg.hyper_dim
    L = feats.shape[0]
    if L * P * P != H * W:
        raise ShapeError(f"decode: {L} patches of {P}x{P} cannot tile {H}x{W}")
    q = linear(s, prompt, "seg.dec.q", bias=False)
    k = linear(s, feats, "seg.dec.k", bias=False)
    v = linear(s, feats, "seg.dec.v", bias=False)
    attn = g.softmax(g.scale(g.matmul(q, g.transpose(k)), 1.0 / math.sqrt(Ds)))
    token = g.add(prompt, linear(s, g.matmul(attn, v), "seg.dec.o", bias=False))
    hyper = linear(s, token, "seg.dec.hyper")
    C = patches.shape[1] // (P * P)
    rgb = patches.reshape(L, C, P * P).transpose(0, 2, 1).reshape(L * P * P, C)
    pix = g.add(g.reshape(linear(s, feats, "seg.dec.up"), (L * P * P, Dh)),
                linear(s, g.const(rgb), "seg.dec.rgb", bias=False))
    logits = g.add(g.matmul(pix, g.transpose(hyper)), s["seg.dec.bias"])
    return g.reshape(g.embedding(logits, pixel_order(H, W, P)), (H, W))


def segment_video(s: Scope, cfg: ModelConfig, frames: np.ndarray, f_seg: Node,
                  patches: np.ndarray | None = None, video_key=None) -> Node:
    """Mask logits ``T x H x W``; the prompt is encoded once and reused per frame."""
    T, _, H, W = frames.shape
    if patches is None:
        patches = frame_patches(frames, cfg.seg_patch)
    prompt = encode_prompt(s, f_seg)
    per_frame = []
    for t in range(T):
        feats = encode_frame(s, cfg, patches[t], None if video_key is None else (video_key, t))
        per_frame.append(s.g.reshape(decode(s, cfg, feats, prompt, patches[t], H, W), (1, H, W)))
    return per_frame[0] if T == 1 else s.g.concat(per_frame, axis=0)


@dataclass
class MaskSet:
    logits: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits))

    @property
    def binary(self) -> np.ndarray:
        # sigmoid(x) > 0.5 exactly when x > 0
        return (self.logits > 0).astype(np.uint8)


def write_pgm(path, mask: np.ndarray) -> None:
    """Binary P5 PGM, maxval 255, foreground 255."""
    mask = np.asarray(mask)
    H, W = mask.shape
    body = np.where(mask > 0, 255, 0).astype(np.uint8).tobytes()
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode() + body)


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit P5 PGM")
    W, H = int(parts[1]), int(parts[2])
    body = parts[4]
    return (np.frombuffer(body[: W * H], dtype=np.uint8).reshape(H, W) > 0).astype(np.uint8)


def export_masks(out_dir, video_id: str, expression_id: str, binary: np.ndarray) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in range(binary.shape[0]):
        p = out / f"{video_id}_{expression_id}_{t}.pgm"
        write_pgm(p, binary[t])
        paths.append(p)
    return paths
