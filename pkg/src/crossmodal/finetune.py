"""Emotion fine-tuning, evaluation metrics and the modality-ablation probe.

Raw annotations are ordinal scores in [0, 3]; an emotion counts as present
whenever its score is strictly positive. Training uses a per-emotion
class-weighted sigmoid cross-entropy so that the positive and negative
sides of every emotion contribute equal total mass. Reported metrics are
weighted accuracy, defined as balanced accuracy (TPR + TNR) / 2, and the
positive-class F1, both computed exactly from integer confusion counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import model as M
from . import tensor as T
from .config import ModelConfig, TrainParams
from .data import DEFAULT_FPS, ModelInputs, MultimodalExample, Vocabulary, prepare_inputs
from .errors import (
    ConfigError,
    DataFormatError,
    DegenerateClassError,
    NumericError,
    UnsupportedOperationError,
)
from .model import ModelWeights
from .pretrain import Adam, LossLogRow, LrSchedule, lr_at
from .tensor import Tensor

EMOTIONS = ("happy", "sad", "angry", "surprise", "disgust", "fear")
DECISION_THRESHOLD = 0.5
PROB_CLAMP = 1e-12

# Incremented whenever weighted_bce has to clamp a saturated probability.
clamp_events = 0


# ---------------------------------------------------------------------------
# Labels and loss


def binarize(scores: np.ndarray) -> np.ndarray:
    """Ordinal scores in [0, 3] -> binary presence targets (strictly > 0)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size and (scores.min() < 0.0 or scores.max() > 3.0):
        raise DataFormatError(
            f"emotion scores outside [0, 3]: min {scores.min()}, max {scores.max()}"
        )
    return (scores > 0.0).astype(np.int64)


def class_weights(targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-emotion (positive, negative) weights equalizing total class mass.

    w_pos = n / (2 n_pos) and w_neg = n / (2 n_neg), so the weighted
    positive mass equals the weighted negative mass for every emotion.
    """
    targets = np.asarray(targets)
    if targets.ndim != 2:
        raise DataFormatError(f"targets must be [n x emotions], got {targets.shape}")
    n = targets.shape[0]
    n_pos = targets.sum(axis=0)
    n_neg = n - n_pos
    degenerate = [
        f"emotion {j} ({'no positives' if n_pos[j] == 0 else 'no negatives'})"
        for j in range(targets.shape[1])
        if n_pos[j] == 0 or n_neg[j] == 0
    ]
    if degenerate:
        raise DegenerateClassError(
            "training split is degenerate, resample it: " + "; ".join(degenerate)
        )
    return n / (2.0 * n_pos), n / (2.0 * n_neg)


def weighted_bce(
    probs: Tensor, targets: np.ndarray, pos_w: np.ndarray, neg_w: np.ndarray
) -> Tensor:
    """Sum over emotions of weight(target) * binary cross-entropy."""
    global clamp_events
    targets = np.asarray(targets, dtype=np.float64)
    if np.any(probs.data <= PROB_CLAMP) or np.any(probs.data >= 1.0 - PROB_CLAMP):
        clamp_events += 1
    clamped = T.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    weights = np.where(targets > 0, pos_w, neg_w)
    pos_part = T.mul_const(T.log(clamped), weights * targets)
    neg_part = T.mul_const(
        T.log(T.add_const(T.neg(clamped), 1.0)), weights * (1.0 - targets)
    )
    return T.neg(T.add(T.sum_all(pos_part), T.sum_all(neg_part)))


# ---------------------------------------------------------------------------
# Metrics


def confusion(preds: np.ndarray, targets: np.ndarray) -> tuple[int, int, int, int]:
    preds = np.asarray(preds).astype(bool)
    targets = np.asarray(targets).astype(bool)
    tp = int(np.sum(preds & targets))
    fp = int(np.sum(preds & ~targets))
    tn = int(np.sum(~preds & ~targets))
    fn = int(np.sum(~preds & targets))
    return tp, fp, tn, fn


def weighted_accuracy_from_counts(tp: int, fp: int, tn: int, fn: int) -> float | None:
    """Balanced accuracy (TPR + TNR) / 2; None when either class is absent."""
    p, n = tp + fn, tn + fp
    if p == 0 or n == 0:
        return None
    return float((Fraction(tp, p) + Fraction(tn, n)) / 2)


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    """Positive-class F1; zero by convention when precision + recall is zero."""
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 0.0
    return float(Fraction(2 * tp, denom))


def weighted_accuracy(preds: np.ndarray, targets: np.ndarray) -> float | None:
    tp, fp, tn, fn = confusion(preds, targets)
    return weighted_accuracy_from_counts(tp, fp, tn, fn)


def f1(preds: np.ndarray, targets: np.ndarray) -> float:
    tp, fp, _, fn = confusion(preds, targets)
    return f1_from_counts(tp, fp, fn)


@dataclass
class EmotionEval:
    name: str
    tp: int
    fp: int
    tn: int
    fn: int
    wa: float | None
    f1: float


@dataclass
class EvalReport:
    emotions: list[EmotionEval]
    macro_wa: float | None
    macro_f1: float
    wa_undefined: list[str]  # emotions excluded from the macro WA
    extras: dict[str, float] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [
            f"{'emotion':<10} {'wa':>9} {'f1':>9} {'tp':>6} {'fp':>6} {'tn':>6} {'fn':>6}"
        ]
        for e in self.emotions:
            wa = f"{e.wa:.6f}" if e.wa is not None else "n/a"
            lines.append(
                f"{e.name:<10} {wa:>9} {e.f1:>9.6f} {e.tp:>6} {e.fp:>6} {e.tn:>6} {e.fn:>6}"
            )
        macro_wa = f"{self.macro_wa:.6f}" if self.macro_wa is not None else "n/a"
        lines.append(f"{'macro':<10} {macro_wa:>9} {self.macro_f1:>9.6f}")
        if self.wa_undefined:
            lines.append(
                "wa undefined for: "
                + ", ".join(self.wa_undefined)
                + " (excluded from macro)"
            )
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        lines = []
        for e in self.emotions:
            prefix = f"emotion.{e.name}"
            lines.append(f"{prefix}.wa={repr(e.wa) if e.wa is not None else 'n/a'}")
            lines.append(f"{prefix}.f1={e.f1!r}")
            lines.append(f"{prefix}.tp={e.tp}")
            lines.append(f"{prefix}.fp={e.fp}")
            lines.append(f"{prefix}.tn={e.tn}")
            lines.append(f"{prefix}.fn={e.fn}")
        lines.append(f"macro.wa={repr(self.macro_wa) if self.macro_wa is not None else 'n/a'}")
        lines.append(f"macro.f1={self.macro_f1!r}")
        lines.append("wa_undefined=" + ",".join(self.wa_undefined))
        for key in sorted(self.extras):
            lines.append(f"extra.{key}={self.extras[key]!r}")
        return "\n".join(lines) + "\n"


def build_report(
    preds: np.ndarray, targets: np.ndarray, names: tuple[str, ...] = EMOTIONS
) -> EvalReport:
    """Per-emotion confusion counts and metrics from [n x emotions] binaries."""
    emotions = []
    undefined = []
    was = []
    f1s = []
    for j, name in enumerate(names):
        tp, fp, tn, fn = confusion(preds[:, j], targets[:, j])
        wa = weighted_accuracy_from_counts(tp, fp, tn, fn)
        score = f1_from_counts(tp, fp, fn)
        emotions.append(EmotionEval(name, tp, fp, tn, fn, wa, score))
        if wa is None:
            undefined.append(name)
        else:
            was.append(wa)
        f1s.append(score)
    macro_wa = float(np.mean(was)) if was else None
    return EvalReport(
        emotions=emotions,
        macro_wa=macro_wa,
        macro_f1=float(np.mean(f1s)),
        wa_undefined=undefined,
    )


def predict_probs(
    weights: ModelWeights, config: ModelConfig, prepared: list[ModelInputs]
) -> np.ndarray:
    params = M.params_to_tensors(weights, requires_grad=False)
    return np.stack(
        [
            M.emotion_probs(inputs, params, weights.buffers, config).data
            for inputs in prepared
        ]
    )


def evaluate_model(
    weights: ModelWeights,
    config: ModelConfig,
    prepared: list[ModelInputs],
    targets: np.ndarray,
    names: tuple[str, ...] = EMOTIONS,
) -> EvalReport:
    probs = predict_probs(weights, config, prepared)
    preds = (probs >= DECISION_THRESHOLD).astype(np.int64)
    return build_report(preds, targets, names)


# ---------------------------------------------------------------------------
# Ablation


def ablate(example: MultimodalExample, drop: set[str]) -> MultimodalExample:
    """Zero the feature matrices of the dropped modalities; lengths unchanged."""
    if "text" in drop:
        raise UnsupportedOperationError(
            "text cannot be dropped: it is the anchor modality, every "
            "cross-modal block queries from it"
        )
    unknown = drop - {"audio", "visual"}
    if unknown:
        raise ConfigError(f"unknown modalities to drop: {sorted(unknown)}")
    if not drop:
        return example
    return MultimodalExample(
        id=example.id,
        words=list(example.words),
        word_boundaries=list(example.word_boundaries),
        audio=np.zeros_like(example.audio) if "audio" in drop else example.audio,
        visual=np.zeros_like(example.visual) if "visual" in drop else example.visual,
        emotion_scores=example.emotion_scores,
    )


# ---------------------------------------------------------------------------
# Fine-tuning loop


@dataclass
class RunRecord:
    run_index: int
    dev_scores: list[float]   # per epoch: mean of (macro WA, macro F1) on dev
    dev_f1: list[float]       # per epoch: macro F1 on dev
    best_epoch: int
    best_dev_score: float


@dataclass
class FinetuneResult:
    weights: ModelWeights
    report: EvalReport
    runs: list[RunRecord]
    selected_run: int
    split_ids: dict[str, list[str]]
    log: list[LossLogRow]


def split_dataset(
    n: int, seed: int, fractions: tuple[float, float] = (0.8, 0.1)
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic shuffled train/dev/test index split."""
    perm = np.random.default_rng(np.random.SeedSequence([seed, 101])).permutation(n)
    n_train = int(fractions[0] * n)
    n_dev = int(fractions[1] * n)
    if n_train < 1 or n_dev < 1 or n - n_train - n_dev < 1:
        raise DataFormatError(f"dataset of {n} examples is too small to split")
    return perm[:n_train], perm[n_train : n_train + n_dev], perm[n_train + n_dev :]


def _dev_score(report: EvalReport) -> float:
    wa = report.macro_wa if report.macro_wa is not None else 0.0
    return (wa + report.macro_f1) / 2.0


def finetune_loop(
    base_weights: ModelWeights | None,
    examples: list[MultimodalExample],
    vocab: Vocabulary,
    config: ModelConfig,
    train: TrainParams,
    epochs: int,
    seed: int,
    runs: int,
    names: tuple[str, ...] = EMOTIONS,
    fps: float = DEFAULT_FPS,
) -> FinetuneResult:
    """Train ``runs`` independent seeded models and keep the best by dev score.

    ``base_weights`` holds a pre-trained encoder (its classification head is
    re-initialized per run); None trains from random initialization. Within
    a run the best-dev-epoch weights are kept; across runs the one with the
    highest dev score (mean of macro WA and macro F1) wins and its test
    metrics are reported.
    """
    if not examples:
        raise DataFormatError("fine-tuning dataset is empty")
    missing = [ex.id for ex in examples if ex.emotion_scores is None]
    if missing:
        raise DataFormatError(f"examples without emotion scores: {missing[:5]}")

    prepared = [prepare_inputs(ex, vocab, config, fps) for ex in examples]
    targets = np.stack([binarize(ex.emotion_scores) for ex in examples])
    train_idx, dev_idx, test_idx = split_dataset(len(examples), seed)
    pos_w, neg_w = class_weights(targets[train_idx])

    dev_prepared = [prepared[i] for i in dev_idx]
    dev_targets = targets[dev_idx]
    test_prepared = [prepared[i] for i in test_idx]
    test_targets = targets[test_idx]

    run_records: list[RunRecord] = []
    run_weights: list[ModelWeights] = []
    log_rows: list[LossLogRow] = []

    for run in range(runs):
        run_seed = np.random.SeedSequence([seed, run])
        s_init, s_order, s_drop = run_seed.spawn(3)
        if base_weights is None:
            weights = M.init_weights(config, s_init)
        else:
            weights = M.init_emotion_head(base_weights, config, s_init)
        order_rng = np.random.default_rng(s_order)
        drop_rng = np.random.default_rng(s_drop) if config.dropout > 0 else None

        schedule = LrSchedule(train.lr_scale, train.warmup_steps, config.model_dim)
        optimizer = Adam(train.adam_beta1, train.adam_beta2, train.adam_eps)

        dev_scores: list[float] = []
        dev_f1: list[float] = []
        best = (-math.inf, 0)
        best_weights = weights.copy()
        for epoch in range(1, epochs + 1):
            order = train_idx[order_rng.permutation(len(train_idx))]
            epoch_loss = 0.0
            lr = 0.0
            for start in range(0, len(order), train.batch_size):
                batch = order[start : start + train.batch_size]
                params = M.params_to_tensors(weights, requires_grad=True)
                losses = []
                for idx in batch:
                    probs = M.emotion_probs(
                        prepared[idx], params, weights.buffers, config, drop_rng
                    )
                    losses.append(weighted_bce(probs, targets[idx], pos_w, neg_w))
                total = losses[0]
                for extra in losses[1:]:
                    total = T.add(total, extra)
                batch_loss = T.scale(total, 1.0 / len(batch))
                value = batch_loss.item()
                if not math.isfinite(value):
                    raise NumericError(
                        f"non-finite loss in run {run}, epoch {epoch}, "
                        f"step {optimizer.t + 1}"
                    )
                batch_loss.backward()
                grads = {
                    k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                    for k, t in params.items()
                }
                lr = lr_at(schedule, optimizer.t + 1)
                optimizer.step(weights.params, grads, lr, train.grad_clip)
                epoch_loss += value * len(batch)
            dev_report = evaluate_model(weights, config, dev_prepared, dev_targets, names)
            score = _dev_score(dev_report)
            dev_scores.append(score)
            dev_f1.append(dev_report.macro_f1)
            log_rows.append(
                LossLogRow(epoch, f"run{run}.train", epoch_loss / len(order), lr)
            )
            log_rows.append(LossLogRow(epoch, f"run{run}.dev_score", score, lr))
            if score > best[0]:
                best = (score, epoch)
                best_weights = weights.copy()

        run_records.append(
            RunRecord(
                run_index=run,
                dev_scores=dev_scores,
                dev_f1=dev_f1,
                best_epoch=best[1],
                best_dev_score=best[0] if epochs > 0 else -math.inf,
            )
        )
        run_weights.append(best_weights)

    selected = max(range(runs), key=lambda r: (run_records[r].best_dev_score, -r))
    winner = run_weights[selected]
    report = evaluate_model(winner, config, test_prepared, test_targets, names)
    scores = [r.best_dev_score for r in run_records]
    report.extras["selected_run"] = float(selected)
    report.extras["selected_epoch"] = float(run_records[selected].best_epoch)
    if epochs > 0:
        report.extras["runs_dev_score_mean"] = float(np.mean(scores))
        report.extras["runs_dev_score_std"] = float(np.std(scores))

    return FinetuneResult(
        weights=winner,
        report=report,
        runs=run_records,
        selected_run=selected,
        split_ids={
            "train": [examples[i].id for i in train_idx],
            "dev": [examples[i].id for i in dev_idx],
            "test": [examples[i].id for i in test_idx],
        },
        log=log_rows,
    )
