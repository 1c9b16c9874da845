"""Operator entry point: corpus generation, training, evaluation, gradcheck.

Every command is deterministic under --seed and writes its outputs under
--out with fixed filenames (checkpoint.bin, losses.tsv, report.txt,
report.kv, manifest.txt). Exit codes: 0 success, 2 usage/parameter, 3 I/O,
4 data format, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import __version__
from . import data as D
from . import finetune as F
from . import model as M
from . import pretrain as P
from . import tensor as T
from .checkpoint import check_architecture_match, load_checkpoint, save_checkpoint
from .config import ModelConfig, TrainParams, load_config_file
from .errors import (
    AlignmentError,
    CheckpointError,
    ConfigError,
    CrossmodalError,
    DataFormatError,
    DegenerateClassError,
    NumericError,
    UnsupportedOperationError,
)

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5

GRADCHECK_TOLERANCE = 1e-4


def _fmt(value: float) -> str:
    return repr(float(value))


def _write_atomic(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def _write_loss_log(path: str, rows) -> None:
    lines = ["# epoch\tsplit\tloss\tlr"]
    for row in rows:
        lines.append(f"{row.epoch}\t{row.split}\t{_fmt(row.loss)}\t{_fmt(row.lr)}")
    _write_atomic(path, "\n".join(lines) + "\n")


def _write_manifest(
    path: str,
    command: str,
    seed,
    paths: dict[str, str],
    model_config: ModelConfig | None,
    train_params: TrainParams | None,
    duration_s: float,
    summary: dict,
) -> None:
    lines = [f"command={command}", f"version={__version__}", f"seed={seed}"]
    for key in sorted(paths):
        lines.append(f"path.{key}={paths[key]}")
    if model_config is not None:
        for key, value in sorted(model_config.to_dict().items()):
            lines.append(f"config.model.{key}={value}")
    if train_params is not None:
        for key, value in sorted(train_params.to_dict().items()):
            lines.append(f"config.train.{key}={value}")
    lines.append(f"duration_s={duration_s:.3f}")
    for key in sorted(summary):
        lines.append(f"result.{key}={summary[key]}")
    _write_atomic(path, "\n".join(lines) + "\n")


def _load_corpus(data_dir: str):
    dataset_path = os.path.join(data_dir, "dataset.jsonl")
    embeddings_path = os.path.join(data_dir, "embeddings.txt")
    for path in (dataset_path, embeddings_path):
        if not os.path.exists(path):
            raise FileNotFoundError(path)
    examples = D.read_dataset(dataset_path)
    if not examples:
        raise DataFormatError(f"{dataset_path} holds no examples")
    vocab = D.Vocabulary.from_examples(examples)
    vocab, _dropped = D.load_embeddings(embeddings_path, vocab)
    examples = D.apply_vocabulary(examples, vocab)
    return examples, vocab


def _resolve_model_config(
    args, file_model: dict, examples, vocab, base: ModelConfig | None = None
) -> ModelConfig:
    """Precedence: flags > config file > checkpoint (if any) > defaults.

    The data-determined fields (vocab size and input widths) always come
    from the corpus itself.
    """
    fields = {} if base is None else base.to_dict()
    fields.update(file_model)
    for flag, key in (
        ("model_dim", "model_dim"),
        ("encoder_layers", "encoder_layers"),
        ("attention_heads", "attention_heads"),
        ("feedforward_dim", "feedforward_dim"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            fields[key] = value
    first = examples[0]
    fields["vocab_size"] = len(vocab)
    fields["audio_input_dim"] = first.audio.shape[1] * D.AUDIO_STACK
    fields["visual_input_dim"] = first.visual.shape[1]
    fields["text_embedding_dim"] = vocab.embeddings.shape[1]
    defaults = {f.name: f.default for f in dataclasses.fields(ModelConfig)}
    merged = {**{k: v for k, v in defaults.items() if v is not dataclasses.MISSING}, **fields}
    return ModelConfig.from_dict(merged)


def _resolve_train_params(args, file_train: dict) -> TrainParams:
    fields = dict(file_train)
    for flag, key in (
        ("batch_size", "batch_size"),
        ("warmup_steps", "warmup_steps"),
        ("lr_scale", "lr_scale"),
        ("k_noise", "k_noise"),
        ("grad_clip", "grad_clip"),
        ("runs", "runs"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            fields[key] = value
    defaults = TrainParams().to_dict()
    return TrainParams.from_dict({**defaults, **fields})


def _read_config_file(args) -> tuple[dict, dict]:
    if getattr(args, "config", None):
        return load_config_file(args.config)
    return {}, {}


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> int:
    out = args.out
    os.makedirs(out, exist_ok=True)
    dataset_path = os.path.join(out, "dataset.jsonl")
    if os.path.exists(dataset_path) and not args.force:
        raise ConfigError(f"{dataset_path} already exists; pass --force to overwrite")
    params = D.SynthParams(
        seed=args.seed,
        n_examples=args.examples,
        vocab_size=args.vocab,
        ambiguity_pairs=args.pairs,
        audio_dim=args.audio_dim,
        visual_dim=args.visual_dim,
        text_embedding_dim=args.emb_dim,
        n_templates=args.templates,
        sentence_len=args.sentence_len,
        cue_fidelity=args.cue_fidelity,
        world_seed=args.world_seed,
    )
    started = time.perf_counter()
    corpus = D.synth_corpus(params)
    D.write_dataset(dataset_path, corpus.examples)
    D.write_embeddings(os.path.join(out, "embeddings.txt"), corpus.tokens, corpus.embeddings)
    D.write_manifest(os.path.join(out, "generation.json"), corpus.manifest)
    _write_manifest(
        os.path.join(out, "manifest.txt"),
        "synth",
        args.seed,
        {"out": out},
        None,
        None,
        time.perf_counter() - started,
        {
            "examples": len(corpus.examples),
            "vocab_size": len(corpus.tokens),
            "pairs": params.ambiguity_pairs,
        },
    )
    print(f"wrote {len(corpus.examples)} examples to {dataset_path}")
    return 0


def cmd_pretrain(args) -> int:
    file_model, file_train = _read_config_file(args)
    examples, vocab = _load_corpus(args.data)
    config = _resolve_model_config(args, file_model, examples, vocab)
    train = _resolve_train_params(args, file_train)
    os.makedirs(args.out, exist_ok=True)

    started = time.perf_counter()
    result = P.pretrain_loop(
        examples, vocab, config, train, args.loss, args.epochs, args.seed
    )
    duration = time.perf_counter() - started
    for row in result.log:
        if row.split == "heldout":
            print(f"epoch {row.epoch}: heldout loss {row.loss:.6f}")

    save_checkpoint(os.path.join(args.out, "checkpoint.bin"), result.weights, config)
    _write_loss_log(os.path.join(args.out, "losses.tsv"), result.log)
    _write_manifest(
        os.path.join(args.out, "manifest.txt"),
        "pretrain",
        args.seed,
        {"data": args.data, "out": args.out},
        config,
        train,
        duration,
        {
            "loss_kind": args.loss,
            "epochs": args.epochs,
            "best_epoch": result.best_epoch,
            "holdout_examples": len(result.holdout_ids),
        },
    )
    return 0


def cmd_finetune(args) -> int:
    file_model, file_train = _read_config_file(args)
    examples, vocab = _load_corpus(args.data)

    base_weights = None
    ckpt_config = None
    if args.init != "random":
        base_weights, ckpt_config = load_checkpoint(args.init)
    config = _resolve_model_config(args, file_model, examples, vocab, base=ckpt_config)
    if ckpt_config is not None:
        check_architecture_match(ckpt_config, config)
    train = _resolve_train_params(args, file_train)
    os.makedirs(args.out, exist_ok=True)

    started = time.perf_counter()
    result = F.finetune_loop(
        base_weights, examples, vocab, config, train,
        args.epochs, args.seed, train.runs,
    )
    duration = time.perf_counter() - started

    save_checkpoint(os.path.join(args.out, "checkpoint.bin"), result.weights, config)
    _write_loss_log(os.path.join(args.out, "losses.tsv"), result.log)
    _write_atomic(os.path.join(args.out, "report.txt"), result.report.to_text())
    _write_atomic(os.path.join(args.out, "report.kv"), result.report.to_kv())
    _write_manifest(
        os.path.join(args.out, "manifest.txt"),
        "finetune",
        args.seed,
        {"data": args.data, "out": args.out, "init": args.init},
        config,
        train,
        duration,
        {
            "runs": train.runs,
            "epochs": args.epochs,
            "selected_run": result.selected_run,
            "macro_f1": _fmt(result.report.macro_f1),
            "macro_wa": (
                _fmt(result.report.macro_wa)
                if result.report.macro_wa is not None
                else "n/a"
            ),
        },
    )
    print(result.report.to_text(), end="")
    return 0


def _parse_drop(raw: str) -> set[str]:
    return {part.strip() for part in raw.split(",") if part.strip()}


def cmd_eval(args) -> int:
    drop = _parse_drop(args.drop)
    weights, config = load_checkpoint(args.model)
    if "head.emotion.weight" not in weights.params:
        raise CheckpointError(
            f"{args.model} has no emotion head; fine-tune before evaluating"
        )
    examples, vocab = _load_corpus(args.data)
    # The emotion path has no vocabulary-sized parameters; evaluate against
    # whatever vocabulary the supplied corpus defines.
    config = dataclasses.replace(config, vocab_size=len(vocab))
    missing = [ex.id for ex in examples if ex.emotion_scores is None]
    if missing:
        raise DataFormatError(f"examples without emotion scores: {missing[:5]}")
    examples = [F.ablate(ex, drop) for ex in examples]
    prepared = [D.prepare_inputs(ex, vocab, config) for ex in examples]
    targets = np.stack([F.binarize(ex.emotion_scores) for ex in examples])

    started = time.perf_counter()
    report = F.evaluate_model(weights, config, prepared, targets)
    duration = time.perf_counter() - started

    os.makedirs(args.out, exist_ok=True)
    _write_atomic(os.path.join(args.out, "report.txt"), report.to_text())
    _write_atomic(os.path.join(args.out, "report.kv"), report.to_kv())
    _write_manifest(
        os.path.join(args.out, "manifest.txt"),
        args.command_name,
        0,
        {"data": args.data, "out": args.out, "model": args.model},
        config,
        None,
        duration,
        {
            "drop": ",".join(sorted(drop)),
            "examples": len(examples),
            "macro_f1": _fmt(report.macro_f1),
            "macro_wa": _fmt(report.macro_wa) if report.macro_wa is not None else "n/a",
        },
    )
    print(report.to_text(), end="")
    return 0


def _gradcheck_fixture(seed: int):
    """A toy corpus and config small enough for fast finite differences."""
    config = ModelConfig(
        vocab_size=12,
        model_dim=8,
        encoder_layers=1,
        attention_heads=2,
        feedforward_dim=4,
        audio_input_dim=10,
        visual_input_dim=6,
        text_embedding_dim=5,
        max_positions=32,
    )
    rng = np.random.default_rng(seed)
    tokens = [f"tok{i}" for i in range(config.vocab_size)]
    vocab = D.Vocabulary(
        tokens=tokens,
        token_to_id={t: i for i, t in enumerate(tokens)},
        counts=rng.integers(1, 6, size=config.vocab_size).astype(np.int64),
        embeddings=rng.normal(size=(config.vocab_size, 5)),
    )
    examples = []
    for n, n_words in enumerate((5, 7)):
        ids = rng.integers(0, config.vocab_size, size=n_words)
        durations = rng.integers(6, 13, size=n_words) * 10
        edges = np.concatenate([[0], np.cumsum(durations)]).astype(float)
        total = float(edges[-1])
        examples.append(
            D.MultimodalExample(
                id=f"toy{n}",
                words=[tokens[i] for i in ids],
                word_boundaries=[
                    (float(edges[i]), float(edges[i + 1])) for i in range(n_words)
                ],
                audio=rng.normal(size=(int(total / 10), 2)),
                visual=rng.normal(size=(int(total * 25 / 1000), 6)),
                emotion_scores=np.asarray(
                    rng.integers(0, 2, size=6) * 3.0, dtype=float
                ),
            )
        )
    return config, vocab, examples


def gradcheck_losses(seed: int) -> dict[str, float]:
    """Max relative autodiff-vs-finite-difference error per loss kind."""
    config, vocab, examples = _gradcheck_fixture(seed)
    weights = M.init_weights(config, seed + 1)
    plan_rng = np.random.default_rng(seed + 2)
    prepared = [D.prepare_inputs(ex, vocab, config) for ex in examples]
    plans = [
        P.make_masking_plan(ex, config.mask_fraction, plan_rng) for ex in examples
    ]
    masked = [P.apply_mask(inp, plan) for inp, plan in zip(prepared, plans)]
    noise = P.NoiseDistribution.from_counts(vocab.counts)
    check_rng = np.random.default_rng(seed + 3)

    def softmax_fn(params):
        losses = []
        for inp, full, plan in zip(masked, prepared, plans):
            logits = M.mlm_logits(inp, params, weights.buffers, config)
            losses.append(P.masked_softmax_loss(logits, full.word_ids, plan))
        return T.scale(T.add(losses[0], losses[1]), 0.5)

    def nce_fn(params):
        # A fresh generator with a fixed seed: the candidate draws must be
        # identical on every call for finite differences to be meaningful.
        noise_rng = np.random.default_rng(seed + 4)
        losses = []
        for inp, full, plan in zip(masked, prepared, plans):
            fused = M.encode_fused(inp, params, weights.buffers, config)
            losses.append(
                P.nce_loss_from_encoding(
                    fused.values,
                    params["head.mlm.weight"],
                    params["head.mlm.bias"],
                    full.word_ids,
                    plan,
                    noise,
                    4,
                    config.vocab_size,
                    noise_rng,
                )
            )
        return T.scale(T.add(losses[0], losses[1]), 0.5)

    targets = np.stack([F.binarize(ex.emotion_scores) for ex in examples])
    pos_w = np.full(6, 1.25)
    neg_w = np.full(6, 0.85)

    def emotion_fn(params):
        losses = []
        for inp, tgt in zip(prepared, targets):
            probs = M.emotion_probs(inp, params, weights.buffers, config)
            losses.append(F.weighted_bce(probs, tgt, pos_w, neg_w))
        return T.scale(T.add(losses[0], losses[1]), 0.5)

    return {
        "masked-softmax": T.grad_check(softmax_fn, weights.params, n_samples=30, rng=check_rng),
        "nce": T.grad_check(nce_fn, weights.params, n_samples=30, rng=check_rng),
        "emotion": T.grad_check(emotion_fn, weights.params, n_samples=20, rng=check_rng),
    }


def cmd_gradcheck(args) -> int:
    if args.break_backward:
        T._matmul_grad_fudge = 1.01
    try:
        errors = gradcheck_losses(args.seed)
    finally:
        T._matmul_grad_fudge = 1.0
    ok = True
    for name, err in errors.items():
        status = "pass" if err < GRADCHECK_TOLERANCE else "FAIL"
        ok = ok and err < GRADCHECK_TOLERANCE
        print(f"{name}: max relative error {err:.3e} [{status}]")
    if not ok:
        raise NumericError(
            f"gradient check failed at tolerance {GRADCHECK_TOLERANCE:.0e}"
        )
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossmodal",
        description="Cross-modal transformer: synthetic data, pre-training, "
        "emotion fine-tuning and evaluation.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multimodal corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--examples", type=int, default=2000)
    p.add_argument("--vocab", type=int, default=64)
    p.add_argument("--pairs", type=int, default=1)
    p.add_argument("--audio-dim", type=int, default=8)
    p.add_argument("--visual-dim", type=int, default=16)
    p.add_argument("--emb-dim", type=int, default=16)
    p.add_argument("--templates", type=int, default=8)
    p.add_argument("--sentence-len", type=int, default=8)
    p.add_argument("--cue-fidelity", type=float, default=0.8)
    p.add_argument("--world-seed", type=int, default=D.DEFAULT_WORLD_SEED)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    def add_train_flags(p):
        p.add_argument("--config", help="JSON file with model/train sections")
        p.add_argument("--epochs", type=int, default=20)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--warmup-steps", dest="warmup_steps", type=int)
        p.add_argument("--lr-scale", dest="lr_scale", type=float)
        p.add_argument("--grad-clip", dest="grad_clip", type=float)
        p.add_argument("--model-dim", dest="model_dim", type=int)
        p.add_argument("--encoder-layers", dest="encoder_layers", type=int)
        p.add_argument("--attention-heads", dest="attention_heads", type=int)
        p.add_argument("--feedforward-dim", dest="feedforward_dim", type=int)

    p = sub.add_parser("pretrain", help="masked-word pre-training")
    p.add_argument("--data", required=True, help="corpus directory from synth")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--loss", choices=("softmax", "nce"), default="softmax")
    p.add_argument("--k-noise", dest="k_noise", type=int)
    add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="emotion fine-tuning")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--init", required=True, help="checkpoint path or 'random'")
    p.add_argument("--runs", type=int)
    add_train_flags(p)
    p.set_defaults(func=cmd_finetune)

    for name, drop_required in (("eval", False), ("ablate", True)):
        p = sub.add_parser(name, help="evaluate a fine-tuned checkpoint")
        p.add_argument("--model", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument(
            "--drop",
            required=drop_required,
            default="",
            help="comma-separated modalities to zero (audio, visual)",
        )
        p.set_defaults(func=cmd_eval, command_name=name)

    p = sub.add_parser("gradcheck", help="check autodiff against finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--break-backward", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UnsupportedOperationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, AlignmentError, CheckpointError, DegenerateClassError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except CrossmodalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
