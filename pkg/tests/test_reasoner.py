from dataclasses import replace

import numpy as np
import pytest

from simtoken import reasoner
from simtoken.compression import AudioFeatureBlock
from simtoken.config import Ablation, ModelConfig
from simtoken.gradsuite import tiny_setup
from simtoken.layers import Scope
from simtoken.numerics import Graph, ShapeError
from simtoken.prompt import PromptSequence, assemble


@pytest.fixture(scope="module")
def tiny():
    return tiny_setup(0)


def run(model, params, smp, prompt=None, audio=None, cfg=None):
    g = Graph()
    s = Scope(g, params, trainable=False)
    logits, hidden = reasoner.forward(s, cfg or model.cfg, prompt or smp.prompt, smp.block,
                                      smp.audio if audio is None else audio)
    return logits.value, hidden.value


def test_output_shapes(tiny):
    model, params, samples = tiny
    logits, hidden = run(model, params, samples[0])
    n = len(samples[0].prompt)
    assert logits.shape == (n, len(model.vocab)) and hidden.shape == (n, model.cfg.model_dim)


def test_causality_under_random_perturbations(tiny):
    model, params, samples = tiny
    smp = samples[0]
    base, _ = run(model, params, smp)
    rng = np.random.default_rng(0)
    tok_positions = [i for i, e in enumerate(smp.prompt.elements) if e[0] == "tok"]
    for j in rng.choice(tok_positions[1:], 5, replace=False):
        elements = list(smp.prompt.elements)
        elements[j] = ("tok", (elements[j][1] + 1 + int(rng.integers(len(model.vocab) - 1))) % len(model.vocab))
        changed, _ = run(model, params, smp, PromptSequence(tuple(elements), smp.prompt.seg_position))
        np.testing.assert_array_equal(changed[:j], base[:j])
        assert not np.array_equal(changed[j:], base[j:])


def test_audio_change_only_affects_later_positions(tiny):
    model, params, samples = tiny
    smp = samples[0]
    base, _ = run(model, params, smp)
    first_audio = next(i for i, e in enumerate(smp.prompt.elements) if e[0] == "feat" and e[1] == "A")
    changed, _ = run(model, params, smp, audio=smp.audio + 1.0)
    np.testing.assert_array_equal(changed[:first_audio], base[:first_audio])
    assert not np.allclose(changed[first_audio:], base[first_audio:])


def test_zeroed_audio_carries_no_information(tiny):
    # with zero audio every A slot reduces to the same learned constant, so the
    # only remaining difference from the w/o-audio prompt is where that run sits
    model, params, samples = tiny
    smp = samples[0]
    g = Graph()
    s = Scope(g, params, trainable=False)
    x = reasoner.embed_sequence(s, smp.prompt, smp.block, np.zeros_like(smp.audio)).value
    rows = [i for i, e in enumerate(smp.prompt.elements) if e[0] == "feat" and e[1] == "A"]
    assert np.allclose(x[rows], x[rows[0]], atol=0)
    dropped = assemble(smp.block, AudioFeatureBlock(smp.audio), smp.record.text, model.vocab,
                       Ablation(drop_audio=True))
    kept = [e for e in smp.prompt.elements if not (e[0] == "feat" and e[1] == "A")]
    assert len(kept) - len(dropped.elements) == 2  # the ". Audio:" marker


def test_extract_seg_is_the_hidden_row(tiny):
    model, params, samples = tiny
    smp = samples[0]
    g = Graph()
    s = Scope(g, params, trainable=False)
    _, hidden = reasoner.forward(s, model.cfg, smp.prompt, smp.block, smp.audio)
    seg = reasoner.extract_seg(g, hidden, smp.prompt.seg_position)
    assert seg.shape == (1, model.cfg.model_dim)
    np.testing.assert_array_equal(seg.value[0], hidden.value[smp.prompt.seg_position])
    again = reasoner.extract_seg(g, hidden, smp.prompt.seg_position)
    assert again.value.tobytes() == seg.value.tobytes()
    with pytest.raises(IndexError):
        reasoner.extract_seg(g, hidden, len(smp.prompt))


def test_one_seg_extraction_per_sample(tiny):
    model, params, samples = tiny
    g, s, *_ = model.batch_loss(params, samples, 0.1, 0.07)
    assert g.counts["extract_seg"] == len(samples)


def test_length_overflow(tiny):
    model, params, samples = tiny
    with pytest.raises(ShapeError):
        run(model, params, samples[0], cfg=replace(model.cfg, max_len=len(samples[0].prompt) - 1))


@pytest.mark.parametrize("patch_pos", [False, True])
def test_param_count_formula(patch_pos):
    cfg = ModelConfig(patch_pos=patch_pos)
    V, D, F, M, A = 37, cfg.model_dim, cfg.feat_dim, cfg.max_len, 8
    params = reasoner.init_params(cfg, V, 0, n_patches=16)
    expected = V * D + M * D + A * F + F + 4 * (F * D + D) + cfg.layers * (8 * D * D + 11 * D) + 2 * D + D * V + V
    expected += 16 * D if patch_pos else 0
    assert sum(p.size for p in params.values()) == expected == reasoner.param_count(cfg, V, 16)


def test_init_scheme_and_determinism():
    cfg = ModelConfig()
    a, b, c = (reasoner.init_params(cfg, 20, s) for s in (0, 0, 1))
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a if a[k].std() > 0)
    assert np.abs(a["blk0.qkv.W"]).max() <= 1 / np.sqrt(cfg.model_dim)
    assert np.abs(a["audio.W"]).max() <= 1 / np.sqrt(8)
    assert not a["blk0.qkv.b"].any() and (a["lnf.g"] == 1).all()
