import json

import pytest

from dualdistill import cli


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture()
def toy_dir(tmp_path, capsys):
    code, _, _ = run(capsys, "toy-data", "--out", str(tmp_path), "--sentences", "60")
    assert code == 0
    cfg = json.loads((tmp_path / "run.json").read_text())
    cfg["teacher"].update(hidden_dim=16, intermediate_dim=32, num_layers=1, num_heads=2)
    cfg["student"].update(hidden_dim=8, intermediate_dim=32, num_layers=1, num_heads=1)
    cfg.update(pretrain_steps=3, steps=3, batch_size=4, eval_every=1)
    (tmp_path / "run.json").write_text(json.dumps(cfg))
    return tmp_path


def test_toy_data_files(toy_dir):
    names = {p.name for p in toy_dir.iterdir()}
    assert {"train.txt", "eval.txt", "classify_train.tsv", "classify_eval.tsv",
            "teacher_vocab.txt", "student_vocab.txt", "run.json"} <= names
    assert len((toy_dir / "classify_train.tsv").read_text().splitlines()) == 200


def test_full_flow(toy_dir, capsys):
    cfg = str(toy_dir / "run.json")
    code, out, _ = run(capsys, "pretrain-teacher", "--config", cfg)
    assert code == 0 and (toy_dir / "teacher/teacher.mdst").exists()

    code, out, _ = run(capsys, "distill", "--config", cfg)
    assert code == 0
    summary = json.loads(out)
    assert summary["mode"] == "DUAL_PROJ_UP" and summary["last"]["step"] == 3
    assert summary["last"]["wall_clock"] is None
    assert 0.0 <= summary["eval_masked_accuracy"] <= 1.0
    assert len((toy_dir / "run/metrics.jsonl").read_text().splitlines()) == 3

    code, out, _ = run(capsys, "eval-mlm", "--config", cfg)
    assert code == 0 and 0.0 <= json.loads(out)["masked_accuracy"] <= 1.0

    code, out, _ = run(capsys, "finetune", "--config", cfg, "--epochs", "1",
                       "--train", str(toy_dir / "classify_train.tsv"),
                       "--eval", str(toy_dir / "classify_eval.tsv"))
    assert code == 0 and set(json.loads(out)) >= {"accuracy", "f1"}


def test_no_kd_needs_no_teacher(toy_dir, capsys):
    code, out, _ = run(capsys, "distill", "--config", str(toy_dir / "run.json"),
                       "--mode", "NO_KD", "--out", str(toy_dir / "nokd"))
    assert code == 0
    assert json.loads(out)["last"]["L_p"] == 0.0


def test_missing_teacher_checkpoint_is_config_error(toy_dir, capsys):
    code, _, err = run(capsys, "distill", "--config", str(toy_dir / "run.json"))
    assert code == 2 and "config error" in err


def test_divergence_exit_code(toy_dir, capsys):
    cfg = json.loads((toy_dir / "run.json").read_text())
    cfg["optim"] = {"lr": 1e38, "warmup_fraction": 0.0}
    cfg["steps"] = 20
    (toy_dir / "bad.json").write_text(json.dumps(cfg))
    with pytest.warns(RuntimeWarning):
        code, _, err = run(capsys, "distill", "--config", str(toy_dir / "bad.json"), "--mode", "NO_KD")
    assert code == 3 and "diverged" in err


def test_bad_config(tmp_path, capsys):
    (tmp_path / "run.json").write_text(json.dumps({"stepz": 3}))
    code, _, err = run(capsys, "distill", "--config", str(tmp_path / "run.json"))
    assert code == 2
    code, _, _ = run(capsys, "eval-mlm")
    assert code == 2


def test_segment(toy_dir, capsys):
    code, out, _ = run(capsys, "segment", "the cat eats", "--vocab", str(toy_dir / "student_vocab.txt"))
    assert code == 0 and out.split()[0] == "the"
    code, out, _ = run(capsys, "segment", "the cat eats", "--vocab", str(toy_dir / "student_vocab.txt"),
                       "--teacher-vocab", str(toy_dir / "teacher_vocab.txt"), "--p-dt", "0")
    assert code == 0 and all(p.endswith("/t") for p in out.split())


def test_vocab_train(toy_dir, capsys):
    out_path = toy_dir / "v.txt"
    code, out, _ = run(capsys, "vocab-train", "--corpus", str(toy_dir / "train.txt"),
                       "--size", "80", "--out", str(out_path))
    assert code == 0 and json.loads(out)["size"] <= 80 and out_path.exists()


def test_size_report(capsys):
    code, out, _ = run(capsys, "size-report")
    rows = {r["model"]: r for r in json.loads(out)["rows"]}
    assert code == 0
    assert rows["teacher"]["params"] == 110_106_428 and rows["teacher"]["size_mb"] == 420.0
    assert rows["student-d48"]["params"] == 610_402
