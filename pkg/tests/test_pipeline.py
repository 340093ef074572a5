import dataclasses
import json
import math

import numpy as np
import pytest

from dualdistill import checkpoint, data, pipeline
from dualdistill import model as M
from dualdistill.distill import DistillConfig
from dualdistill.errors import ConfigError, DivergenceError, WorkbenchError
from dualdistill.optim import OptimConfig
from dualdistill.vocab import basic_tokenize, train_wordpiece


@pytest.fixture(scope="module")
def toy():
    corpus = data.toy_corpus(64, 3)
    ex = [basic_tokenize(s) for s in corpus]
    tv = train_wordpiece(corpus, 150)
    sv = train_wordpiece(corpus, 70)
    return ex, tv, sv


def small_run(tmp_path, tv, sv, mode="NO_KD", steps=4, name="run", **kw):
    teacher = M.ModelConfig(len(tv), 16, 64, 1, 2, extra_vocab_size=len(sv), role="teacher")
    student = M.student_config(len(sv), 16, 1)
    opts = dict(teacher=teacher, student=student, distill=DistillConfig(mode=mode),
                optim=OptimConfig(lr=0.005), steps=steps, batch_size=8, eval_every=2,
                checkpoint_dir=str(tmp_path / name))
    opts.update(kw)
    return pipeline.RunConfig(**opts)


def teacher_for(cfg):
    return M.init_model(cfg.teacher, np.random.default_rng(99))


class TestIngest:
    def test_hello(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("Hello World\n")
        assert list(data.ingest_corpus(p)) == [["hello", "world"]]

    def test_blank_only(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("\n  \n\t\n")
        assert list(data.ingest_corpus(p)) == []

    def test_three_line_fixture(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("The cat sat.\n\nDogs, mostly, bark!\nÉté  chaud\n", encoding="utf-8")
        assert list(data.ingest_corpus(p)) == [
            ["the", "cat", "sat", "."],
            ["dogs", ",", "mostly", ",", "bark", "!"],
            ["été", "chaud"],
        ]

    def test_errors(self, tmp_path):
        with pytest.raises(WorkbenchError) as e:
            list(data.ingest_corpus(tmp_path / "missing.txt"))
        assert e.value.code == "io"
        bad = tmp_path / "bad.txt"
        bad.write_bytes(b"ok\n\xff\xfe\n")
        with pytest.raises(WorkbenchError) as e:
            list(data.ingest_corpus(bad))
        assert e.value.code == "encoding"


class TestToyData:
    def test_corpus_deterministic(self):
        assert data.toy_corpus(50, 1) == data.toy_corpus(50, 1)
        assert data.toy_corpus(50, 1) != data.toy_corpus(50, 2)

    def test_classification_balanced(self, tmp_path):
        rows = data.toy_classification(200, 0)
        assert sum(label for label, _ in rows) == 100
        data.write_tsv(tmp_path / "d.tsv", rows)
        back = data.read_labeled_tsv(tmp_path / "d.tsv", 2)
        assert [label for label, _ in back] == [label for label, _ in rows]
        assert back[0][1] == basic_tokenize(rows[0][1])

    @pytest.mark.parametrize("line", ["2\ttext", "pos\ttext", "no tab here"])
    def test_bad_dataset(self, tmp_path, line):
        p = tmp_path / "d.tsv"
        p.write_text(f"0\tfine\n{line}\n")
        with pytest.raises(WorkbenchError) as e:
            data.read_labeled_tsv(p, 2)
        assert e.value.code == "bad-dataset"


class TestRunConfig:
    def write(self, tmp_path, toy, **extra):
        _, tv, sv = toy
        tv.save(tmp_path / "t.txt")
        sv.save(tmp_path / "s.txt")
        doc = {
            "teacher": {"hidden_dim": 16, "intermediate_dim": 64, "num_layers": 1, "num_heads": 2},
            "student": {"hidden_dim": 16, "intermediate_dim": 64, "num_layers": 1, "num_heads": 1},
            "teacher_vocab": "t.txt",
            "student_vocab": "s.txt",
            "distill": {"mode": "DUAL_PROJ_DOWN"},
            "optim": {"lr": 0.002},
            **extra,
        }
        (tmp_path / "run.json").write_text(json.dumps(doc))
        return tmp_path / "run.json"

    def test_load_fills_vocab_sizes(self, tmp_path, toy):
        _, tv, sv = toy
        cfg = pipeline.RunConfig.load(self.write(tmp_path, toy))
        assert cfg.teacher.vocab_size == len(tv)
        assert cfg.teacher.extra_vocab_size == len(sv)
        assert cfg.student.vocab_size == len(sv)
        assert cfg.teacher.role == "teacher" and cfg.student.role == "student"
        assert cfg.teacher_vocab == str(tmp_path / "t.txt")
        assert cfg.distill.mode.value == "DUAL_PROJ_DOWN" and cfg.optim.lr == 0.002

    def test_unknown_key(self, tmp_path, toy):
        with pytest.raises(ConfigError):
            pipeline.RunConfig.load(self.write(tmp_path, toy, learning_rate=1))

    def test_steps_positive(self, tmp_path, toy):
        with pytest.raises(ConfigError):
            pipeline.RunConfig.load(self.write(tmp_path, toy, steps=0))

    def test_missing_path(self, tmp_path, toy):
        cfg = pipeline.RunConfig.load(self.write(tmp_path, toy, train_corpus="nope.txt"))
        with pytest.raises(ConfigError):
            cfg.check_paths("train_corpus")

    def test_full_scale_profile(self):
        prof = pipeline.full_scale_profile()
        assert prof["optim"]["lr"] == 0.00125 and prof["batch_size"] == 4096
        assert prof["distill"]["p_dt"] == 0.5 and prof["distill"]["epsilon"] == 1.0
        assert M.count_params(M.ModelConfig.from_dict(prof["teacher"])) > 110_106_428


class TestDistillationRun:
    def test_single_step(self, tmp_path, toy):
        ex, tv, sv = toy
        cfg = small_run(tmp_path, tv, sv, steps=1)
        result = pipeline.run_distillation(cfg, None, ex, tv, sv)
        assert [m.step for m in result.metrics] == [1]
        out = tmp_path / "run"
        assert sorted(p.name for p in out.iterdir()) == ["metrics.jsonl", "student.mdst",
                                                          "student_config.json"]
        assert len((out / "metrics.jsonl").read_text().splitlines()) == 1
        init = M.init_model(cfg.student, pipeline._seeds(cfg.seed, 5)[0])
        moved = [n for n in init if not np.array_equal(init[n].data, result.student[n].data)]
        assert moved  # exactly one optimizer step happened

    def test_no_kd_never_runs_teacher(self, tmp_path, toy):
        ex, tv, sv = toy
        before = M.forward_counts["teacher"]
        result = pipeline.run_distillation(small_run(tmp_path, tv, sv, "NO_KD"), None, ex, None, sv)
        assert result.teacher_forward_calls == 0
        assert M.forward_counts["teacher"] == before
        assert all(m.L_ce_teacher == 0.0 and m.L_p == 0.0 for m in result.metrics)

    @pytest.mark.parametrize("mode", ["NO_KD", "DUAL", "DUAL_PROJ_DOWN", "DUAL_PROJ_UP"])
    def test_loss_decomposition(self, tmp_path, toy, mode):
        ex, tv, sv = toy
        cfg = small_run(tmp_path, tv, sv, mode, distill=DistillConfig(mode=mode, epsilon=0.7))
        result = pipeline.run_distillation(cfg, teacher_for(cfg), ex, tv, sv)
        for m in result.metrics:
            expected = m.L_p + 0.7 * (m.L_ce_student + m.L_ce_teacher)
            assert m.L_final == pytest.approx(expected, rel=1e-5)
            assert (m.L_p > 0) == mode.startswith("DUAL_PROJ")
            assert (m.L_ce_teacher > 0) == (mode != "NO_KD")
        names = list(checkpoint.load_tensors(result.checkpoint))
        assert not any(n.startswith("proj.") for n in names)
        assert set(names) == {n for n, _, _ in M.param_layout(cfg.student)}

    def test_dual_adds_only_teacher_term(self, tmp_path, toy):
        ex, tv, sv = toy
        base = small_run(tmp_path, tv, sv, "NO_KD", steps=6, eval_every=1, name="a")
        dual = small_run(tmp_path, tv, sv, "DUAL", steps=6, eval_every=1, name="b")
        a = pipeline.run_distillation(base, None, ex, tv, sv)
        b = pipeline.run_distillation(dual, teacher_for(dual), ex, tv, sv)
        assert [m.L_ce_student for m in a.metrics] == [m.L_ce_student for m in b.metrics]
        assert (tmp_path / "a/student.mdst").read_bytes() == (tmp_path / "b/student.mdst").read_bytes()

    def test_teacher_moves_only_under_ce(self, tmp_path, toy):
        ex, tv, sv = toy
        cfg = small_run(tmp_path, tv, sv, "DUAL_PROJ_UP", steps=2)
        teacher = teacher_for(cfg)
        before = {n: t.data.copy() for n, t in teacher.items()}
        pipeline.run_distillation(cfg, teacher, ex, tv, sv)
        assert not np.array_equal(before["layer.0.ffn.in.weight"], teacher["layer.0.ffn.in.weight"].data)

    def test_deterministic(self, tmp_path, toy):
        ex, tv, sv = toy
        runs = []
        for name in ("x", "y"):
            cfg = small_run(tmp_path, tv, sv, "DUAL_PROJ_DOWN", steps=5, name=name)
            pipeline.run_distillation(cfg, teacher_for(cfg), ex, tv, sv)
            runs.append(tmp_path / name)
        for f in ("metrics.jsonl", "student.mdst"):
            assert (runs[0] / f).read_bytes() == (runs[1] / f).read_bytes()

    def test_wall_clock_only_when_not_deterministic(self, tmp_path, toy):
        ex, tv, sv = toy
        cfg = small_run(tmp_path, tv, sv, steps=2, deterministic=False)
        result = pipeline.run_distillation(cfg, None, ex, tv, sv)
        assert all(m.wall_clock is not None for m in result.metrics)

    def test_divergence_keeps_last_good(self, tmp_path, toy, monkeypatch):
        ex, tv, sv = toy
        cfg = small_run(tmp_path, tv, sv, steps=6, eval_every=1)
        real = pipeline.total_loss
        calls = {"n": 0}

        def flaky(l_p, l_ce, eps):
            calls["n"] += 1
            out = real(l_p, l_ce, eps)
            return pipeline.T.scale(out, float("nan")) if calls["n"] == 4 else out

        monkeypatch.setattr(pipeline, "total_loss", flaky)
        with pytest.raises(DivergenceError) as e:
            pipeline.run_distillation(cfg, None, ex, tv, sv)
        assert e.value.code == "diverged"
        kept = checkpoint.load_registry(tmp_path / "run/student.mdst", cfg.student)
        assert all(np.isfinite(t.data).all() for _, t in kept.items())
        lines = (tmp_path / "run/metrics.jsonl").read_text().splitlines()
        assert [json.loads(x)["step"] for x in lines] == [1, 2, 3]

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning", "ignore:invalid:RuntimeWarning")
    def test_huge_learning_rate_diverges(self, tmp_path, toy):
        ex, tv, sv = toy
        cfg = small_run(tmp_path, tv, sv, steps=20, optim=OptimConfig(lr=1e38, warmup_fraction=0.0))
        with pytest.raises(DivergenceError):
            pipeline.run_distillation(cfg, None, ex, tv, sv)

    def test_three_hundred_steps_halve_loss(self, tmp_path, toy):
        corpus = data.toy_corpus(64, 3)
        ex = [basic_tokenize(s) for s in corpus]
        sv = train_wordpiece(corpus, 110)
        cfg = small_run(tmp_path, sv, sv, steps=300, batch_size=32, eval_every=50,
                        student=M.student_config(len(sv), 32, 2), optim=OptimConfig(lr=0.01))
        result = pipeline.run_distillation(cfg, None, ex, None, sv)
        first, last = result.metrics[0].L_final, result.metrics[-1].L_final
        assert last <= 0.5 * first, (first, last)


class TestEvaluation:
    def test_random_student_near_chance(self, toy):
        ex, _, sv = toy
        params = M.init_model(M.student_config(len(sv), 16, 1), np.random.default_rng(0))
        cfg = DistillConfig(mask_rate=0.5)
        accs = [pipeline.evaluate_masked_accuracy(params, sv, ex, cfg, seed=s) for s in range(5)]
        p = 1 / len(sv)
        # mean over 5 independent maskings of ~300 positions each
        assert abs(np.mean(accs) - p) < 3 * math.sqrt(p * (1 - p) / 1500) + 0.02

    def test_empty(self, toy):
        _, _, sv = toy
        params = M.init_model(M.student_config(len(sv), 16, 1), np.random.default_rng(0))
        with pytest.raises(WorkbenchError) as e:
            pipeline.evaluate_masked_accuracy(params, sv, [])
        assert e.value.code == "no-eval-data"

    def test_memorized_sentence(self, tmp_path):
        sentence = ["the", "small", "cat", "eats", "the", "fish", "in", "the", "kitchen", "."]
        sv = train_wordpiece([" ".join(sentence)], 60)
        cfg = small_run(tmp_path, sv, sv, steps=300, batch_size=4,
                        student=M.student_config(len(sv), 16, 1), optim=OptimConfig(lr=0.01))
        result = pipeline.run_distillation(cfg, None, [sentence], None, sv)
        acc = pipeline.evaluate_masked_accuracy(result.student, sv, [sentence] * 8,
                                                DistillConfig(mask_rate=0.3))
        assert acc == 1.0


class TestFinetune:
    def test_single_example_memorized(self, toy):
        _, _, sv = toy
        params = M.init_model(M.student_config(len(sv), 16, 1), np.random.default_rng(0))
        rows = [(1, basic_tokenize("the cat eats the fish ."))]
        out = pipeline.finetune_classifier(params, sv, rows, [], 2, epochs=20, lr=0.01)
        assert out["train_accuracy"] == 1.0

    def test_does_not_touch_input(self, toy):
        _, _, sv = toy
        params = M.init_model(M.student_config(len(sv), 16, 1), np.random.default_rng(0))
        before = params["embeddings.word"].data.copy()
        pipeline.finetune_classifier(params, sv, [(0, ["a"]), (1, ["b"])], [], 2, epochs=2)
        np.testing.assert_array_equal(before, params["embeddings.word"].data)

    def test_f1(self):
        gold = np.array([0, 1] * 10)
        assert pipeline.binary_f1(np.ones(20, dtype=int), gold) == pytest.approx(2 / 3)
        assert pipeline.binary_f1(gold, gold) == 1.0
        assert pipeline.binary_f1(np.zeros(20, dtype=int), gold) == 0.0

    def test_bad_label(self, toy):
        _, _, sv = toy
        params = M.init_model(M.student_config(len(sv), 16, 1), np.random.default_rng(0))
        with pytest.raises(WorkbenchError) as e:
            pipeline.finetune_classifier(params, sv, [(3, ["a"])], [], 2)
        assert e.value.code == "bad-dataset"


class TestSizeReport:
    def test_teacher(self):
        r = pipeline.report_model_size(M.bert_base_config())
        assert (r.params, r.size_mb, r.flops_ratio) == (110_106_428, 420.0, 1.0)

    @pytest.mark.parametrize("params,mb", [
        (110_106_428, 420.0), (1_775_910, 6.8), (5_665_926, 21.6), (19_169_094, 73.1),
    ])
    def test_mb_column(self, params, mb):
        assert pipeline.size_mb(params) == mb

    def test_degenerate_hand_sum(self):
        cfg = M.ModelConfig(vocab_size=1, hidden_dim=1, intermediate_dim=1, num_layers=0,
                            num_heads=1, max_positions=1)
        # word 1 + position 1 + type 2 + embedding LN 2 + pooler 2 + MLM transform 2,
        # MLM LN 2, decoder bias 1 + NSP 4
        assert M.count_params(cfg) == 17
        assert pipeline.report_model_size(cfg).flops_per_token == 0

    def test_student_smaller(self):
        r = pipeline.report_model_size(dataclasses.replace(M.student_config(4928, 48),
                                                           max_positions=512))
        assert r.params == 610_402
        assert 0 < r.flops_ratio < 0.01


def test_teacher_evaluated_on_teacher_segmentation(toy):
    ex, tv, sv = toy
    cfg = M.ModelConfig(len(tv), 16, 64, 1, 2, extra_vocab_size=len(sv), role="teacher")
    params = M.init_model(cfg, np.random.default_rng(0))
    assert 0.0 <= pipeline.evaluate_masked_accuracy(params, tv, ex) <= 1.0
