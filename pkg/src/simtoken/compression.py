"""Frozen toy feature extractors and parameter-free multi-view token compression."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Graph, Node, ShapeError


@dataclass(frozen=True)
class VideoFeatureBlock:
    f_v: np.ndarray   # T x L x D
    f_vt: np.ndarray  # T x D, spatial mean per frame
    f_vs: np.ndarray  # L x D, temporal mean per patch
    f_vf: np.ndarray  # L x D, first frame untouched

    @property
    def frames(self) -> int:
        return self.f_v.shape[0]

    @property
    def patches(self) -> int:
        return self.f_v.shape[1]


@dataclass(frozen=True)
class AudioFeatureBlock:
    f_a: np.ndarray  # T x D


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """``T x C x H x W`` frames to ``T x L x (C*P*P)`` flattened patches.

    Patches are ordered row-major over the patch grid; each patch flattens as
    (channel, row, column).
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4:
        raise ShapeError(f"patchify: expected T x C x H x W, got {frames.shape}")
    T, C, H, W = frames.shape
    if H % patch or W % patch:
        raise ShapeError(f"patchify: H={H}, W={W} not divisible by patch size {patch}")
    gh, gw = H // patch, W // patch
    x = frames.reshape(T, C, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(T, gh * gw, C * patch * patch)


def init_extractor(feat_dim: int, patch: int, seed: int, channels: int = 3) -> dict:
    """Frozen random patch embedder standing in for a pretrained image encoder."""
    rng = np.random.default_rng(seed)
    fan_in = channels * patch * patch
    bound = 1.0 / np.sqrt(fan_in)
    return {
        "W": rng.uniform(-bound, bound, size=(fan_in, feat_dim)),
        "b": np.zeros(feat_dim),
        "patch": patch,
    }


def extract_visual(frames: np.ndarray, extractor: dict) -> np.ndarray:
    """Per-patch linear embedding, ``T x L x D``. No gradient flows here."""
    patches = patchify(frames, extractor["patch"])
    return patches @ extractor["W"] + extractor["b"]


def compress(f_v: np.ndarray) -> VideoFeatureBlock:
    f_v = np.asarray(f_v, dtype=np.float64)
    if f_v.ndim != 3:
        raise ShapeError(f"compress: expected T x L x D, got {f_v.shape}")
    return VideoFeatureBlock(f_v, f_v.mean(axis=1), f_v.mean(axis=0), f_v[0].copy())


def compress_graph(g: Graph, f_v: Node) -> tuple[Node, Node, Node]:
    """Differentiable twin of :func:`compress` returning ``(f_vt, f_vs, f_vf)`` nodes."""
    T, L, D = f_v.shape
    f_vt = g.mean(f_v, axis=1)
    f_vs = g.mean(f_v, axis=0)
    f_vf = g.reshape(g.slice(f_v, 0, 0, 1), (L, D))
    return f_vt, f_vs, f_vf


def extract_audio(g: Graph, audio_raw: Node, W: Node, b: Node) -> Node:
    """Trainable per-frame linear projection of raw audio features, ``T x D``."""
    return g.add_row(g.matmul(audio_raw, W), b)


def token_budget(frames: int, patches: int) -> tuple[int, int]:
    """Visual tokens after compression versus feeding every patch of every frame."""
    return frames + 2 * patches, frames * patches
