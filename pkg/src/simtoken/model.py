"""End-to-end model: prompt assembly, reasoner, <SEG> extraction, segmentor, losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import reasoner, segmentor
from .compression import AudioFeatureBlock, VideoFeatureBlock, compress, extract_visual, init_extractor
from .config import Ablation, ModelConfig
from .dataset import Corpus, ExpressionRecord
from .layers import Scope
from .losses import LossBreakdown, batch_mean, build_positive_sets, loss_mask, loss_sa, loss_text, total_loss
from .numerics import Graph, Node
from .prompt import PromptSequence, Vocab, assemble, response_targets


@dataclass
class Sample:
    record: ExpressionRecord
    prompt: PromptSequence
    block: VideoFeatureBlock
    audio: np.ndarray
    frames: np.ndarray
    patches: np.ndarray
    gt: np.ndarray


@dataclass
class SampleOutput:
    logits: Node
    hidden: Node
    f_seg: Node
    mask_logits: Node


class SimToken:
    def __init__(self, cfg: ModelConfig, vocab: Vocab, size: int, ablation: Ablation | None = None):
        self.cfg = cfg.validate()
        self.vocab = vocab
        self.size = size
        self.ablation = ablation or Ablation()
        self.extractor = init_extractor(cfg.feat_dim, cfg.patch, cfg.extractor_seed)
        self.targets = response_targets(vocab)
        self._scene_cache: dict[str, tuple] = {}

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        params = reasoner.init_params(self.cfg, len(self.vocab), seed, (self.size // self.cfg.patch) ** 2)
        params.update(segmentor.init_params(self.cfg, self.size, seed))
        return params

    def param_count(self) -> int:
        n_patches = (self.size // self.cfg.patch) ** 2
        return reasoner.param_count(self.cfg, len(self.vocab), n_patches) + segmentor.param_count(self.cfg, self.size)

    def prepare(self, corpus: Corpus, rec: ExpressionRecord) -> Sample:
        scene = corpus.scenes[rec.video_id]
        cached = self._scene_cache.get(rec.video_id)
        if cached is None:
            block = compress(extract_visual(scene.frames, self.extractor))
            patches = segmentor.frame_patches(scene.frames, self.cfg.seg_patch)
            cached = (block, patches)
            self._scene_cache[rec.video_id] = cached
        block, patches = cached
        prompt = assemble(block, AudioFeatureBlock(scene.audio), rec.text, self.vocab, self.ablation)
        return Sample(rec, prompt, block, scene.audio, scene.frames, patches, corpus.gt_masks(rec))

    def sample_forward(self, s: Scope, smp: Sample) -> SampleOutput:
        logits, hidden = reasoner.forward(s, self.cfg, smp.prompt, smp.block, smp.audio, smp.record.video_id)
        f_seg = reasoner.extract_seg(s.g, hidden, smp.prompt.seg_position)
        masks = segmentor.segment_video(s, self.cfg, smp.frames, f_seg, smp.patches, smp.record.video_id)
        return SampleOutput(logits, hidden, f_seg, masks)

    def batch_loss(self, params, samples: list[Sample], lam: float, tau: float, cosine: bool = True):
        """Build one graph over the batch; return ``(graph, scope, total, breakdown, outputs)``."""
        g = Graph()
        s = Scope(g, params)
        total, bd, outs = self.batch_loss_in(s, samples, lam, tau, cosine)
        return g, s, total, bd, outs

    def batch_loss_in(self, s: Scope, samples: list[Sample], lam: float, tau: float, cosine: bool = True):
        """The batch objective built inside an existing scope: ``(total, breakdown, outputs)``."""
        g = s.g
        outs = [self.sample_forward(s, smp) for smp in samples]
        texts, bces, dices = [], [], []
        for smp, out in zip(samples, outs):
            texts.append(loss_text(g, out.logits, self.targets, smp.prompt.response_positions))
            lb, ld, _ = loss_mask(g, out.mask_logits, smp.gt)
            bces.append(lb)
            dices.append(ld)
        seg = [o.f_seg for o in outs]
        sets = build_positive_sets([smp.record for smp in samples], seg)
        index = {smp.record.expression_id: i for i, smp in enumerate(samples)}
        sa_terms = [loss_sa(g, seg[index[ps.anchor_id]], ps.members, tau, normalize=cosine) for ps in sets]
        l_text = batch_mean(g, texts)
        l_bce = batch_mean(g, bces)
        l_dice = batch_mean(g, dices)
        l_mask = g.add(l_bce, l_dice)
        l_sa = batch_mean(g, sa_terms)
        total = total_loss(g, l_text, l_mask, l_sa, lam)
        bd = LossBreakdown(
            l_text=float(l_text.value), l_bce=float(l_bce.value), l_dice=float(l_dice.value),
            l_mask=float(l_mask.value), l_sa=float(l_sa.value) if l_sa is not None else 0.0,
            total=float(total.value), lam=lam, n_sa=len(sa_terms))
        return total, bd, outs

    def predict(self, params, smp: Sample) -> tuple[np.ndarray, np.ndarray]:
        """``(mask_logits T x H x W, f_seg D_m)`` for one sample."""
        g = Graph()
        s = Scope(g, params, trainable=False)
        out = self.sample_forward(s, smp)
        return out.mask_logits.value, out.f_seg.value[0]
