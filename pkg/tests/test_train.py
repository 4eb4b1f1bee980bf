import json
import math
from dataclasses import replace

import numpy as np
import pytest

from simtoken.config import Ablation, DatasetConfig, ModelConfig, RunConfig
from simtoken.dataset import build_corpus
from simtoken.train import (AdamW, CheckpointError, TrainingError, cosine_lr, file_digest, load_checkpoint,
                            save_checkpoint, train)

DCFG = DatasetConfig(n_train=8, n_seen=2, n_unseen=2, n_null=2, frames=2, size=8, object_size=3,
                     min_objects=2, max_objects=2)
MCFG = ModelConfig(feat_dim=8, patch=4, model_dim=16, layers=1, heads=1, max_len=64, seg_dim=8, seg_patch=4,
                   hyper_dim=4)
RUN = RunConfig(model=MCFG, epochs=2, batch_size=4)


@pytest.fixture(scope="module")
def corpus():
    return build_corpus(DCFG, 0)


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return train(RUN, corpus, out), out


def test_cosine_schedule():
    assert cosine_lr(1.0, 0, 10) == 1.0
    assert cosine_lr(1.0, 5, 10) == pytest.approx(0.5)
    assert cosine_lr(1.0, 10, 10) == pytest.approx(0.0, abs=1e-15)
    assert all(cosine_lr(1.0, s + 1, 10) <= cosine_lr(1.0, s, 10) for s in range(10))


def test_adamw_first_step_and_decoupled_decay():
    p = {"W": np.ones((2, 2)), "b": np.ones(2)}
    g = {"W": np.full((2, 2), 0.5), "b": np.full(2, -3.0)}
    opt = AdamW(p, 0.1, weight_decay=0.5)
    opt.step(p, g, 0.1)
    # bias-corrected first step moves each coordinate by lr * sign(g); only matrices decay
    np.testing.assert_allclose(p["W"], 1 - 0.1 * 0.5 - 0.1, atol=1e-7)
    np.testing.assert_allclose(p["b"], 1 + 0.1, atol=1e-7)


def test_log_records(trained):
    result, out = trained
    lines = [json.loads(x) for x in (out / "train_log.jsonl").read_text().splitlines()]
    assert lines == result.log
    assert [r["step"] for r in lines] == list(range(len(lines)))
    for r in lines:
        assert all(math.isfinite(v) for v in r.values() if isinstance(v, float))
        assert r["l_mask"] == pytest.approx(r["l_bce"] + r["l_dice"], abs=1e-12)
        assert r["total"] == pytest.approx(r["l_text"] + r["l_mask"] + r["lam"] * r["l_sa"], abs=1e-12)
    assert "wall_time" not in lines[0]


def test_checkpoints_each_epoch_and_roundtrip(trained, corpus):
    result, out = trained
    assert (out / "checkpoint_epoch1.stk").exists() and (out / "checkpoint_epoch2.stk").exists()
    params, run, vocab_hash, step = load_checkpoint(result.checkpoint)
    assert run == RUN and vocab_hash == result.vocab.digest() and step == len(result.log)
    assert params.keys() == result.params.keys()
    assert all(params[k].tobytes() == result.params[k].tobytes() for k in params)


def test_checkpoint_corruption_detected(trained, tmp_path):
    result, _ = trained
    data = result.checkpoint.read_bytes()
    bad = tmp_path / "bad.stk"
    bad.write_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    bad.write_bytes(data + b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    bad.write_bytes(data[:-3])
    with pytest.raises(ValueError):
        load_checkpoint(bad)


def test_same_seed_gives_identical_run(trained, corpus, tmp_path):
    result, out = trained
    again = train(RUN, corpus, tmp_path)
    assert file_digest(again.checkpoint) == file_digest(result.checkpoint)
    assert (tmp_path / "train_log.jsonl").read_bytes() == (out / "train_log.jsonl").read_bytes()


def test_different_seed_differs(trained, corpus):
    other = train(replace(RUN, seed=1, epochs=1), corpus)
    assert other.log[0]["total"] != trained[0].log[0]["total"]


def test_zero_lambda_matches_disabled_alignment(corpus):
    a = train(replace(RUN, lam=0.0, epochs=1), corpus)
    b = train(replace(RUN, ablation=Ablation(disable_sa=True), epochs=1), corpus)
    assert a.log == b.log
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_alignment_terms_present(trained):
    assert any(r["n_sa"] > 0 for r in trained[0].log)


def test_loss_decreases(trained):
    log = trained[0].log
    assert log[-1]["total"] < log[0]["total"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts():
    # NaN audio features poison the very first forward pass
    bad = build_corpus(DCFG, 0)
    for scene in bad.scenes.values():
        scene.audio[:] = np.nan
    with pytest.raises(TrainingError, match="step 0"):
        train(replace(RUN, epochs=1), bad)


def test_ablation_keeps_parameter_shapes(corpus):
    full = train(replace(RUN, epochs=1), corpus)
    dropped = train(replace(RUN, epochs=1, ablation=Ablation(drop_audio=True)), corpus)
    assert {k: v.shape for k, v in full.params.items()} == {k: v.shape for k, v in dropped.params.items()}
    # the dropped view's projector never receives a gradient, so only weight decay touches it
    init = dropped.model.init_params(RUN.seed)
    assert np.array_equal(dropped.params["proj.a.b"], init["proj.a.b"])
    assert not np.array_equal(full.params["proj.a.b"], init["proj.a.b"])


def test_save_checkpoint_is_stable(trained, tmp_path):
    result, _ = trained
    a, b = tmp_path / "a.stk", tmp_path / "b.stk"
    save_checkpoint(a, result.params, RUN, result.vocab, 3)
    save_checkpoint(b, result.params, RUN, result.vocab, 3)
    assert a.read_bytes() == b.read_bytes()
