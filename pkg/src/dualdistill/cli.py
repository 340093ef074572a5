"""Command-line entry point.

Every subcommand accepts ``--config run.json`` plus ``--seed`` and
``--deterministic`` overrides. Exit codes: 0 success, 1 other failure,
2 configuration error, 3 divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, data, pipeline
from .distill import DistillConfig, Mode
from .errors import ConfigError, DivergenceError, WorkbenchError
from .model import ModelConfig, bert_base_config, student_config
from .vocab import Source, Vocabulary, basic_tokenize, dual_segment, segment_sequence, train_wordpiece

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("dualdistill")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _load_config(args) -> pipeline.RunConfig:
    if not args.config:
        raise ConfigError("bad-config", f"{args.command} needs --config")
    cfg = pipeline.RunConfig.load(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.deterministic is not None:
        overrides["deterministic"] = args.deterministic
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _optional_config(args) -> pipeline.RunConfig | None:
    return _load_config(args) if args.config else None


# --------------------------------------------------------------------------
# subcommands


def cmd_toy_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train.txt").write_text("\n".join(data.toy_corpus(args.sentences, args.seed or 0)) + "\n")
    (out / "eval.txt").write_text("\n".join(data.toy_corpus(args.sentences // 5, 10_000 + (args.seed or 0))) + "\n")
    rows = data.toy_classification(240, args.seed or 0)
    data.write_tsv(out / "classify_train.tsv", rows[:200])
    data.write_tsv(out / "classify_eval.tsv", rows[200:])
    corpus = data.read_lines(out / "train.txt")
    tv = train_wordpiece(corpus, args.teacher_vocab_size)
    sv = train_wordpiece(corpus, args.student_vocab_size)
    tv.save(out / "teacher_vocab.txt")
    sv.save(out / "student_vocab.txt")
    teacher = ModelConfig(len(tv), 64, 256, 4, 4, extra_vocab_size=len(sv), role="teacher")
    student = student_config(len(sv), 16, 4)
    run = {
        "teacher": teacher.to_dict(),
        "student": student.to_dict(),
        "distill": DistillConfig(mode=Mode.DUAL_PROJ_UP).to_dict(),
        "optim": {"lr": 0.005},
        "teacher_vocab": "teacher_vocab.txt",
        "student_vocab": "student_vocab.txt",
        "train_corpus": "train.txt",
        "eval_corpus": "eval.txt",
        "teacher_checkpoint": "teacher/teacher.mdst",
        "pretrain_steps": 3000,
        "steps": 1500,
        "batch_size": 32,
        "eval_every": 100,
        "checkpoint_dir": "run",
        "seed": args.seed or 0,
    }
    (out / "run.json").write_text(json.dumps(run, indent=2) + "\n")
    _emit({"dir": str(out), "teacher_vocab": len(tv), "student_vocab": len(sv)})
    return EXIT_OK


def cmd_vocab_train(args) -> int:
    cfg = _optional_config(args)
    corpus_path = args.corpus or (cfg.train_corpus if cfg else None)
    if not corpus_path:
        raise ConfigError("bad-config", "vocab-train needs --corpus or a config with train_corpus")
    vocab = train_wordpiece(data.read_lines(corpus_path), args.size)
    vocab.save(args.out)
    _emit({"out": args.out, "size": len(vocab)})
    return EXIT_OK


def cmd_pretrain_teacher(args) -> int:
    cfg = _load_config(args)
    cfg.check_paths("teacher_vocab", "train_corpus")
    if args.steps:
        cfg = dataclasses.replace(cfg, pretrain_steps=args.steps)
    out = args.out or (str(Path(cfg.teacher_checkpoint).parent) if cfg.teacher_checkpoint
                       else cfg.checkpoint_dir)
    result = pipeline.pretrain_teacher(cfg, out_dir=out)
    last = result.metrics[-1]
    _emit({"checkpoint": str(result.checkpoint), "step": last.step, "L_ce": last.L_final,
           "masked_accuracy": last.masked_accuracy})
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = _load_config(args)
    if args.mode:
        cfg = dataclasses.replace(cfg, distill=dataclasses.replace(cfg.distill, mode=Mode(args.mode)))
    if args.steps:
        cfg = dataclasses.replace(cfg, steps=args.steps)
    if args.out:
        cfg = dataclasses.replace(cfg, checkpoint_dir=args.out)
    needed = ["student_vocab", "train_corpus"]
    if cfg.distill.mode.uses_teacher:
        needed += ["teacher_vocab", "teacher_checkpoint"]
    cfg.check_paths(*needed)
    result = pipeline.run_distillation(cfg)
    first, last = result.metrics[0], result.metrics[-1]
    summary = {"checkpoint": str(result.checkpoint), "mode": cfg.distill.mode.value,
               "first": dataclasses.asdict(first), "last": dataclasses.asdict(last)}
    if cfg.eval_corpus:
        vocab = Vocabulary.load(cfg.student_vocab)
        summary["eval_masked_accuracy"] = pipeline.evaluate_masked_accuracy(
            result.student, vocab, list(data.ingest_corpus(cfg.eval_corpus)), cfg.distill,
            max_len=cfg.max_seq_len)
    _emit(summary)
    return EXIT_OK


def _student_from(args, cfg):
    ckpt = args.checkpoint or str(Path(cfg.checkpoint_dir) / pipeline.STUDENT_CHECKPOINT)
    return checkpoint.load_registry(ckpt, cfg.student), Vocabulary.load(cfg.student_vocab)


def cmd_eval_mlm(args) -> int:
    cfg = _load_config(args)
    params, vocab = _student_from(args, cfg)
    corpus = args.corpus or cfg.eval_corpus
    if not corpus:
        raise ConfigError("bad-config", "eval-mlm needs --corpus or eval_corpus in the config")
    acc = pipeline.evaluate_masked_accuracy(params, vocab, list(data.ingest_corpus(corpus)),
                                            cfg.distill, max_len=cfg.max_seq_len)
    _emit({"masked_accuracy": acc})
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    params, vocab = _student_from(args, cfg)
    train = data.read_labeled_tsv(args.train, args.classes)
    evals = data.read_labeled_tsv(args.eval, args.classes) if args.eval else []
    result = pipeline.finetune_classifier(params, vocab, train, evals, args.classes,
                                          epochs=args.epochs, lr=args.lr, seed=cfg.seed)
    _emit(result)
    return EXIT_OK


def cmd_size_report(args) -> int:
    cfg = _optional_config(args)
    teacher = bert_base_config()
    rows = [("teacher", teacher)]
    if cfg is not None:
        rows.append(("student", cfg.student))
    else:
        for d in args.dims:
            rows.append((f"student-d{d}", dataclasses.replace(
                student_config(args.student_vocab, d), max_positions=512)))
    report = []
    for name, mc in rows:
        r = pipeline.report_model_size(mc, teacher, args.seq_len)
        report.append({"model": name, "params": r.params, "size_mb": r.size_mb,
                       "flops_per_token": r.flops_per_token,
                       "flops_ratio": round(r.flops_ratio, 5)})
    _emit({"formula": pipeline.FLOPS_FORMULA, "rows": report})
    return EXIT_OK


def cmd_segment(args) -> int:
    cfg = _optional_config(args)
    vocab_path = args.vocab or (cfg.student_vocab if cfg else None)
    if not vocab_path:
        raise ConfigError("bad-config", "segment needs --vocab or a config with student_vocab")
    student = Vocabulary.load(vocab_path)
    words = basic_tokenize(" ".join(args.text))
    teacher_path = args.teacher_vocab or (cfg.teacher_vocab if cfg and args.p_dt is not None else None)
    if teacher_path:
        teacher = Vocabulary.load(teacher_path)
        p_dt = 0.5 if args.p_dt is None else args.p_dt
        seq = dual_segment(teacher, student, words, p_dt, np.random.default_rng(args.seed or 0))
        vocabs = {Source.TEACHER: teacher, Source.STUDENT: student}
        pieces = [f"{vocabs[s].token(i)}/{'s' if s == Source.STUDENT else 't'}"
                  for i, s in zip(seq.ids, seq.sources)]
    else:
        seq = segment_sequence(student, words)
        pieces = [student.token(i) for i in seq.ids]
    print(" ".join(pieces))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                        help="omit wall-clock fields so reruns are bitwise identical")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dualdistill",
                                     description="Mixed-vocabulary BERT distillation workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy-data", parents=[common], help="write a toy corpus, vocabularies and run.json")
    p.add_argument("--out", required=True)
    p.add_argument("--sentences", type=int, default=2000)
    p.add_argument("--teacher-vocab-size", type=int, default=260)
    p.add_argument("--student-vocab-size", type=int, default=110)
    p.set_defaults(func=cmd_toy_data)

    p = sub.add_parser("vocab-train", parents=[common], help="train a WordPiece vocabulary")
    p.add_argument("--corpus")
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vocab_train)

    p = sub.add_parser("pretrain-teacher", parents=[common], help="MLM-pretrain the teacher")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", help="output directory (default: teacher_checkpoint's directory)")
    p.set_defaults(func=cmd_pretrain_teacher)

    p = sub.add_parser("distill", parents=[common], help="train a student")
    p.add_argument("--mode", choices=[m.value for m in Mode])
    p.add_argument("--steps", type=int)
    p.add_argument("--out", help="checkpoint directory")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval-mlm", parents=[common], help="masked-word accuracy of a student")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.set_defaults(func=cmd_eval_mlm)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune a classifier head")
    p.add_argument("--checkpoint")
    p.add_argument("--train", required=True)
    p.add_argument("--eval")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=5e-3)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("size-report", parents=[common], help="parameter, size and FLOPs accounting")
    p.add_argument("--dims", type=int, nargs="+", default=[48, 96, 192])
    p.add_argument("--student-vocab", type=int, default=4928)
    p.add_argument("--seq-len", type=int, default=128)
    p.set_defaults(func=cmd_size_report)

    p = sub.add_parser("segment", parents=[common], help="segment text with a vocabulary")
    p.add_argument("text", nargs="+")
    p.add_argument("--vocab")
    p.add_argument("--teacher-vocab")
    p.add_argument("--p-dt", type=float)
    p.set_defaults(func=cmd_segment)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except WorkbenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
