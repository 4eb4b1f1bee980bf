"""Graph building blocks shared by the reasoner and the segmentor."""

from __future__ import annotations

import math

import numpy as np

from .numerics import Graph, Node


class Scope:
    """Binds a flat parameter dict to one graph, creating leaf nodes on first use.

    Parameters never touched by a forward pass stay out of the graph, so an
    ablated view's projector simply receives no gradient. ``overrides`` maps
    parameter names to ready-made nodes (used by gradient checks).
    """

    def __init__(self, graph: Graph, params: dict, trainable: bool = True, overrides=None):
        self.g = graph
        self.params = params
        self.trainable = trainable
        self.nodes: dict[str, Node] = dict(overrides or {})
        self.cache: dict = {}

    def __getitem__(self, name: str) -> Node:
        node = self.nodes.get(name)
        if node is None:
            value = self.params[name]
            node = self.g.param(value, name) if self.trainable else self.g.const(value, name)
            self.nodes[name] = node
        return node

    def grads(self, all_grads: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
        return {name: all_grads[n.id] for name, n in self.nodes.items() if n.trainable}


def uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_linear(rng, params, name, d_in, d_out, bias=True):
    params[f"{name}.W"] = uniform(rng, d_in, (d_in, d_out))
    if bias:
        params[f"{name}.b"] = np.zeros(d_out)


def init_block(rng, params, name, d):
    params[f"{name}.ln1.g"] = np.ones(d)
    params[f"{name}.ln1.b"] = np.zeros(d)
    init_linear(rng, params, f"{name}.qkv", d, 3 * d)
    init_linear(rng, params, f"{name}.o", d, d)
    params[f"{name}.ln2.g"] = np.ones(d)
    params[f"{name}.ln2.b"] = np.zeros(d)
    init_linear(rng, params, f"{name}.mlp1", d, 2 * d)
    init_linear(rng, params, f"{name}.mlp2", 2 * d, d)


def block_param_count(d: int) -> int:
    return 8 * d * d + 11 * d


def linear(s: Scope, x: Node, name: str, bias: bool = True) -> Node:
    y = s.g.matmul(x, s[f"{name}.W"])
    return s.g.add_row(y, s[f"{name}.b"]) if bias else y


def layer_norm(s: Scope, x: Node, name: str) -> Node:
    return s.g.layer_norm(x, s[f"{name}.g"], s[f"{name}.b"])


_MASKS: dict[int, np.ndarray] = {}


def causal_mask(n: int) -> np.ndarray:
    m = _MASKS.get(n)
    if m is None:
        m = np.triu(np.full((n, n), -1e9), k=1)
        _MASKS[n] = m
    return m


def self_attention(s: Scope, x: Node, name: str, heads: int, causal: bool) -> Node:
    g = s.g
    n, d = x.shape
    dh = d // heads
    qkv = linear(s, x, f"{name}.qkv")
    mask = g.const(causal_mask(n)) if causal else None
    outs = []
    for h in range(heads):
        q = g.slice(qkv, 1, h * dh, (h + 1) * dh)
        k = g.slice(qkv, 1, d + h * dh, d + (h + 1) * dh)
        v = g.slice(qkv, 1, 2 * d + h * dh, 2 * d + (h + 1) * dh)
        scores = g.scale(g.matmul(q, g.transpose(k)), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = g.add(scores, mask)
        outs.append(g.matmul(g.softmax(scores), v))
    out = outs[0] if heads == 1 else g.concat(outs, axis=1)
    return linear(s, out, f"{name}.o")


def transformer_block(s: Scope, x: Node, name: str, heads: int, causal: bool) -> Node:
    """Pre-norm block: attention then a GELU MLP, each with a residual."""
    g = s.g
    x = g.add(x, self_attention(s, layer_norm(s, x, f"{name}.ln1"), name, heads, causal))
    h = g.gelu(linear(s, layer_norm(s, x, f"{name}.ln2"), f"{name}.mlp1"))
    return g.add(x, linear(s, h, f"{name}.mlp2"))
