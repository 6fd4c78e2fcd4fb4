"""Command-line entry points: build-vocab, train, eval, embed, selfcheck.

Exit codes are stable: 0 success, 1 selfcheck property failure, 2 invalid
config or unreadable input, 3 non-finite training loss, 4 checkpoint/config
mismatch. The environment variable CAL_SEED overrides the configured seed.
Every training run directory is self-describing: the resolved configuration
plus the seed reproduce the run.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, fields

from .attacks import AttackConfig
from .encoder import EncoderConfig, EncoderParams
from .metrics import (
    MetricReport,
    evaluate_classification,
    evaluate_similarity,
    evaluate_under_attack,
    encode_sentences,
)
from .selfcheck import run_selfcheck
from .text import (
    DataFormatError,
    Vocab,
    build_vocab,
    load_similarity_tsv,
    load_supervised_tsv,
    load_unsupervised_lines,
)
from .trainer import (
    Checkpoint,
    CheckpointError,
    NonFiniteLossError,
    RunLog,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train_loop,
)

EXIT_OK = 0
EXIT_SELFCHECK = 1
EXIT_BAD_INPUT = 2
EXIT_NONFINITE = 3
EXIT_CKPT_MISMATCH = 4


@dataclass
class RunConfig:
    """Flat union of dataset paths, encoder shape, and training settings."""

    mode: str = "scal"               # scal | uscal | ce | views
    train_file: str = ""
    dev_file: str = ""
    vocab_file: str = ""
    out_dir: str = "run"
    # encoder
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 256
    dropout: float = 0.1
    max_len: int = 32
    num_classes: int = 0             # 0 = infer from labels for supervised modes
    # optimization
    lr: float = 3e-5
    weight_decay: float = 0.01
    warmup_ratio: float = 0.1
    batch_size: int = 32
    max_epochs: int = 15
    max_steps: int = 0
    early_stop_patience: int = 3
    eval_interval_steps: int = 250
    seed: int = 42
    alpha: float = 0.3
    epsilon: float = 0.3
    temperature: float = 0.05
    attack_kind: str = "fgm"
    negative_mode: str = "adv-keys"
    dev_metric: str = "accuracy"
    grad_clip: float = 0.0

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        """Parse a flat key=value file; JSON is accepted as an alternative."""
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        values: dict[str, str] = {}
        if text.lstrip().startswith("{"):
            values = {str(k): v for k, v in json.loads(text).items()}
        else:
            for lineno, line in enumerate(text.splitlines(), start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, sep, value = line.partition("=")
                if not sep:
                    raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
                values[key.strip()] = value.strip()
        cfg = cls()
        return cfg.with_overrides(values)

    def with_overrides(self, values: dict) -> "RunConfig":
        known = {f.name: f.type for f in fields(self)}
        out = dataclasses.replace(self)
        for key, value in values.items():
            if key not in known:
                raise ValueError(f"unknown config field {key!r}")
            current = getattr(out, key)
            if isinstance(current, bool):
                parsed = str(value).lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                parsed = int(value)
            elif isinstance(current, float):
                parsed = float(value)
            else:
                parsed = str(value)
            setattr(out, key, parsed)
        return out

    def resolved_text(self) -> str:
        lines = [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def encoder_config(self, vocab_size: int, num_classes: int) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=vocab_size,
            hidden=self.hidden,
            layers=self.layers,
            heads=self.heads,
            ffn_dim=self.ffn_dim,
            dropout=self.dropout,
            max_len=self.max_len,
            num_classes=num_classes,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            mode=self.mode,
            lr=self.lr,
            weight_decay=self.weight_decay,
            warmup_ratio=self.warmup_ratio,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            max_steps=self.max_steps,
            early_stop_patience=self.early_stop_patience,
            eval_interval_steps=self.eval_interval_steps,
            seed=self.seed,
            alpha=self.alpha,
            epsilon=self.epsilon,
            temperature=self.temperature,
            attack_kind=self.attack_kind,
            negative_mode=self.negative_mode,
            dev_metric=self.dev_metric,
            grad_clip=self.grad_clip,
        )


def _apply_env_seed(cfg: RunConfig) -> RunConfig:
    env = os.environ.get("CAL_SEED")
    if env is not None:
        cfg = dataclasses.replace(cfg, seed=int(env))
    return cfg


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_build_vocab(args: argparse.Namespace) -> int:
    try:
        with open(args.corpus, encoding="utf-8") as fh:
            vocab = build_vocab((line for line in fh), min_freq=args.min_freq)
    except OSError as exc:
        return _fail(EXIT_BAD_INPUT, f"cannot read corpus: {exc}")
    except ValueError as exc:
        return _fail(EXIT_BAD_INPUT, str(exc))
    vocab.save(args.out)
    print(f"wrote {len(vocab)} ids ({len(vocab) - 4} tokens + 4 reserved) to {args.out}")
    return EXIT_OK


def _load_run_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {
        name: getattr(args, name)
        for name in RunConfig.field_names()
        if hasattr(args, name) and getattr(args, name) is not None
    }
    cfg = cfg.with_overrides(overrides)
    return _apply_env_seed(cfg)


def cmd_train(args: argparse.Namespace) -> int:
    try:
        cfg = _load_run_config(args)
    except (OSError, ValueError) as exc:
        return _fail(EXIT_BAD_INPUT, f"invalid config: {exc}")

    try:
        vocab = Vocab.load(cfg.vocab_file)
    except OSError as exc:
        return _fail(EXIT_BAD_INPUT, f"cannot read vocab ({cfg.vocab_file!r}): {exc}")

    supervised = cfg.mode in ("scal", "ce")
    try:
        if supervised:
            train_rows = load_supervised_tsv(cfg.train_file)
            dev_rows = load_supervised_tsv(cfg.dev_file)
        else:
            train_rows = load_unsupervised_lines(cfg.train_file)
            dev_rows = load_similarity_tsv(cfg.dev_file)
    except (OSError, DataFormatError) as exc:
        return _fail(EXIT_BAD_INPUT, f"cannot load datasets: {exc}")
    if not dev_rows:
        return _fail(EXIT_BAD_INPUT, "empty dev set")

    num_classes = 0
    if supervised:
        num_classes = cfg.num_classes or (max(r.label for r in train_rows) + 1)
        if num_classes < 2:
            return _fail(EXIT_BAD_INPUT, "invalid config: num_classes must be >= 2")

    try:
        enc_cfg = cfg.encoder_config(len(vocab), num_classes)
        enc_cfg.validate()
        tcfg = cfg.train_config()
        if not supervised and tcfg.dev_metric == "accuracy":
            tcfg.dev_metric = "spearman"
        tcfg.validate()
    except ValueError as exc:
        return _fail(EXIT_BAD_INPUT, f"invalid config: {exc}")

    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config.resolved.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.resolved_text())

    params = EncoderParams.init_random(enc_cfg, seed=tcfg.seed)
    if supervised:
        def eval_fn(p: EncoderParams) -> float:
            return evaluate_classification(p, dev_rows, vocab, tcfg.dev_metric).value
    else:
        def eval_fn(p: EncoderParams) -> float:
            return evaluate_similarity(p, dev_rows, vocab).value

    steps_path = os.path.join(cfg.out_dir, "steps.tsv")
    evals_path = os.path.join(cfg.out_dir, "evals.tsv")
    try:
        with open(steps_path, "w", encoding="utf-8") as steps_fh, open(
            evals_path, "w", encoding="utf-8"
        ) as evals_fh:
            log = RunLog(steps=steps_fh, evals=evals_fh)
            result = train_loop(train_rows, vocab, params, tcfg, eval_fn, log=log)
    except NonFiniteLossError as exc:
        return _fail(EXIT_NONFINITE, str(exc))

    ckpt_path = os.path.join(cfg.out_dir, "best.ckpt")
    save_checkpoint(result.best, ckpt_path)
    print(
        f"trained {result.steps_run} steps; best {result.best.dev_metric_name}="
        f"{result.best.dev_metric_value:.6f} at step {result.best.step}; "
        f"checkpoint: {ckpt_path}"
    )
    return EXIT_OK


def _load_checkpoint_and_vocab(args: argparse.Namespace) -> tuple[Checkpoint, Vocab]:
    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError(f"checkpoint {args.checkpoint!r} does not exist")
    ckpt = load_checkpoint(args.checkpoint)
    vocab = Vocab.load(args.vocab)
    if len(vocab) != ckpt.config.vocab_size:
        raise CheckpointError(
            f"vocab has {len(vocab)} ids but checkpoint config expects "
            f"{ckpt.config.vocab_size}"
        )
    return ckpt, vocab


def _write_report(report: MetricReport, out_dir: str | None, stem: str) -> None:
    for line in report.format_lines():
        print(line)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"{stem}.txt"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(report.format_lines()) + "\n")
        with open(os.path.join(out_dir, f"{stem}.json"), "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")


def cmd_eval(args: argparse.Namespace) -> int:
    try:
        ckpt, vocab = _load_checkpoint_and_vocab(args)
    except (FileNotFoundError, OSError) as exc:
        return _fail(EXIT_BAD_INPUT, str(exc))
    except CheckpointError as exc:
        return _fail(EXIT_CKPT_MISMATCH, str(exc))
    params = ckpt.build_params()

    try:
        if args.task == "similarity":
            pairs = load_similarity_tsv(args.data)
            report = evaluate_similarity(params, pairs, vocab)
        else:
            rows = load_supervised_tsv(args.data)
            report = evaluate_classification(params, rows, vocab, args.metric)
    except (OSError, DataFormatError) as exc:
        return _fail(EXIT_BAD_INPUT, f"cannot load dataset: {exc}")
    _write_report(report, args.out_dir, "report")

    if args.attack is not None:
        if args.task == "similarity":
            return _fail(EXIT_BAD_INPUT, "attack evaluation needs a labeled dataset")
        attack_cfg = AttackConfig(kind=args.attack, epsilon=args.epsilon)
        try:
            attack_cfg.validate()
        except ValueError as exc:
            return _fail(EXIT_BAD_INPUT, f"invalid config: {exc}")
        robust = evaluate_under_attack(params, rows, vocab, attack_cfg, args.metric)
        _write_report(robust, args.out_dir, "report_robust")
    return EXIT_OK


def cmd_embed(args: argparse.Namespace) -> int:
    try:
        ckpt, vocab = _load_checkpoint_and_vocab(args)
        sentences = load_unsupervised_lines(args.sentences)
    except (FileNotFoundError, OSError) as exc:
        return _fail(EXIT_BAD_INPUT, str(exc))
    except CheckpointError as exc:
        return _fail(EXIT_CKPT_MISMATCH, str(exc))
    if not sentences:
        return _fail(EXIT_BAD_INPUT, "no sentences to embed")
    params = ckpt.build_params()
    vectors = encode_sentences(params, sentences, vocab)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(f"{vectors.shape[1]} {vectors.shape[0]}\n")
        for row in vectors:
            fh.write(" ".join(f"{x:.6g}" for x in row) + "\n")
    print(f"wrote {vectors.shape[0]} x {vectors.shape[1]} embeddings to {args.out}")
    return EXIT_OK


def cmd_selfcheck(_args: argparse.Namespace) -> int:
    failing = run_selfcheck()
    if failing is not None:
        print(f"selfcheck failed: {failing}", file=sys.stderr)
        return EXIT_SELFCHECK
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_run_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value or JSON config file")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("int", int):
            parser.add_argument(flag, type=int, default=None)
        elif f.type in ("float", float):
            parser.add_argument(flag, type=float, default=None)
        else:
            parser.add_argument(flag, type=str, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="callab",
        description="Contrastive adversarial training lab for small text encoders",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="build a vocabulary file from a corpus")
    p.add_argument("corpus")
    p.add_argument("out")
    p.add_argument("--min-freq", type=int, default=1)
    p.set_defaults(fn=cmd_build_vocab)

    p = sub.add_parser("train", help="train an encoder (modes: scal, uscal, ce, views)")
    _add_run_config_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=("classification", "similarity"), default="classification")
    p.add_argument("--metric", choices=("accuracy", "f1", "mcc"), default="accuracy")
    p.add_argument("--attack", choices=("fgsm", "fgm"), default=None)
    p.add_argument("--epsilon", type=float, default=0.3)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("embed", help="export sentence embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--sentences", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("selfcheck", help="run gradient, attack, and metric property checks")
    p.set_defaults(fn=cmd_selfcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
