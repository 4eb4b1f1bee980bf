import json

import pytest

from simtoken.cli import main
from simtoken.config import to_dict
from simtoken.gradsuite import Case, loss_cases, pipeline_cases, tiny_setup
from simtoken.numerics import grad_check
from simtoken.prompt import Vocab
from test_train import DCFG, RUN


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "data.json").write_text(json.dumps(to_dict(DCFG)))
    assert main(["generate", "--config", str(root / "data.json"), "--seed", "0", "--out", str(root / "data")]) == 0
    run = to_dict(RUN)
    run["dataset"] = str(root / "data")
    (root / "run.json").write_text(json.dumps(run))
    assert main(["train", "--config", str(root / "run.json"), "--out", str(root / "run")]) == 0
    return root


def test_generate_writes_manifest(workspace):
    assert (workspace / "data" / "manifest.json").exists()


def test_generate_is_reproducible(workspace, tmp_path):
    assert main(["generate", "--config", str(workspace / "data.json"), "--seed", "0", "--out", str(tmp_path)]) == 0
    for f in (workspace / "data").rglob("*"):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / f.relative_to(workspace / "data")).read_bytes()


@pytest.mark.parametrize("bad", [{"frames": 1}, {"holdout": ["square", "circle", "triangle", "cross"]},
                                 {"no_such_field": 3}])
def test_invalid_dataset_config_exits_2(tmp_path, capsys, bad):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps(bad))
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 2
    assert "config error" in capsys.readouterr().err


def test_invalid_run_config_exits_2(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"tau": 0.0}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 2


def test_missing_dataset_exits_1(tmp_path):
    assert main(["train", "--dataset", str(tmp_path / "nowhere"), "--out", str(tmp_path / "run")]) == 1


def test_train_outputs(workspace):
    run = workspace / "run"
    assert (run / "checkpoint.stk").exists() and (run / "vocab.json").exists()
    assert (run / "train_log.jsonl").read_text().count("\n") > 0


def test_eval_twice_gives_identical_reports(workspace, tmp_path):
    ckpt = str(workspace / "run" / "checkpoint.stk")
    assert main(["eval", "--checkpoint", ckpt, "--out", str(tmp_path / "a")]) == 0
    assert main(["eval", "--checkpoint", ckpt, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert {"seen", "unseen", "mix", "S", "conventions"} <= report.keys()


def test_null_split_report_has_only_s(workspace, tmp_path, capsys):
    ckpt = str(workspace / "run" / "checkpoint.stk")
    assert main(["eval", "--checkpoint", ckpt, "--split", "null-test", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["null_count"] == 4 and 0.0 <= report["S"] <= 1.0
    for split in ("seen", "unseen", "mix"):
        assert report[split] == {"J": None, "F": None, "JF": None, "count": 0}
    row = capsys.readouterr().out.splitlines()[3].split()
    assert row[1:10] == ["-"] * 9 and row[10] != "-"


def test_mask_export(workspace, tmp_path):
    ckpt = str(workspace / "run" / "checkpoint.stk")
    assert main(["eval", "--checkpoint", ckpt, "--split", "seen-test", "--export-masks",
                 "--out", str(tmp_path)]) == 0
    pgms = sorted((tmp_path / "masks" / "seen-test").glob("*.pgm"))
    assert pgms and all(p.read_bytes().startswith(b"P5\n8 8\n255\n") for p in pgms)


def test_vocab_mismatch_rejected(workspace, tmp_path, capsys):
    run = workspace / "run"
    for name in ("checkpoint.stk", "train_log.jsonl"):
        (tmp_path / name).write_bytes((run / name).read_bytes())
    Vocab(["a", "b"]).save(tmp_path / "vocab.json")
    assert main(["eval", "--checkpoint", str(tmp_path / "checkpoint.stk"), "--out", str(tmp_path)]) == 1
    assert "vocabulary" in capsys.readouterr().err


def test_gradcheck_command_passes(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "max rel err" in out and "loss.sa.members" in out


def test_wrong_sign_gradient_is_caught():
    case = next(c for c in loss_cases() if c.name == "loss.dice")

    def flipped(g, x, loss):
        return -g.backward(loss)[x.id]

    assert grad_check(case.function, case.point).passed
    assert not grad_check(case.function, case.point, backward=flipped).passed


def test_pipeline_cases_cover_every_parameter():
    model, params, samples = tiny_setup()
    cases = pipeline_cases()
    assert {c.name for c in cases} == {f"pipeline.{k}" for k in params}
    assert model.batch_loss(params, samples, 0.1, 0.07)[3].l_sa > 0
    assert all(isinstance(c, Case) for c in cases)


def test_config_hash_ignores_paths():
    from simtoken.config import RunConfig, config_hash
    assert config_hash(RunConfig(dataset="a", out="b")) == config_hash(RunConfig())
    assert config_hash(RunConfig(seed=1)) != config_hash(RunConfig())
