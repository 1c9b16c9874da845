"""Self-supervised masked-word pre-training.

A masking plan picks word positions; their embedding rows and the audio and
visual frames aligned to those words are set to zero (no mask token). The
model predicts the word at each text position and the loss is taken over the
masked positions only, either as a full softmax cross-entropy or as the
sampled binary-classification surrogate with a fixed normalizer.

The audio spans in a plan index the stacked rows the model consumes, so the
millisecond-to-index conversion uses the stacked hop (stack * 10 ms).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensor as T
from .config import ModelConfig, TrainParams
from .data import (
    AUDIO_HOP_MS,
    AUDIO_STACK,
    DEFAULT_FPS,
    ModelInputs,
    MultimodalExample,
    Vocabulary,
    align,
    prepare_inputs,
)
from .errors import (
    AlignmentError,
    ConfigError,
    DataFormatError,
    DimensionError,
    NumericError,
)
from .model import ModelWeights
from .tensor import Tensor


# ---------------------------------------------------------------------------
# Masking


@dataclass
class MaskingPlan:
    example_id: str
    positions: list[int]  # sorted masked word indices
    audio_spans: list[tuple[int, int]]   # stacked-row spans, half open
    visual_spans: list[tuple[int, int]]  # visual-frame spans, half open


def mask_count(n_words: int, fraction: float) -> int:
    """Number of masked words: round half up, floor of one."""
    return max(1, math.floor(fraction * n_words + 0.5))


def _word_spans(
    example: MultimodalExample, positions: list[int], fps: float
) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    for i in positions:
        start, end = example.word_boundaries[i]
        if end < start:
            raise AlignmentError(
                f"record {example.id}: word {i} has an invalid boundary "
                f"({start}, {end})"
            )
    spans = align(example.word_boundaries, hop_ms=AUDIO_HOP_MS * AUDIO_STACK, fps=fps)
    audio_spans = [spans[i][0] for i in positions]
    visual_spans = [spans[i][1] for i in positions]
    return audio_spans, visual_spans


def make_masking_plan(
    example: MultimodalExample,
    mask_fraction: float,
    rng: np.random.Generator,
    fps: float = DEFAULT_FPS,
) -> MaskingPlan:
    """Uniformly sample word positions without replacement and derive spans."""
    n = len(example.words)
    if n < 1:
        raise AlignmentError(f"record {example.id}: no words to mask")
    count = mask_count(n, mask_fraction)
    positions = sorted(int(i) for i in rng.choice(n, size=count, replace=False))
    audio_spans, visual_spans = _word_spans(example, positions, fps)
    return MaskingPlan(
        example_id=example.id,
        positions=positions,
        audio_spans=audio_spans,
        visual_spans=visual_spans,
    )


def forced_plan(
    example: MultimodalExample, positions: list[int], fps: float = DEFAULT_FPS
) -> MaskingPlan:
    """A plan that masks exactly the given positions (evaluation probes)."""
    positions = sorted(positions)
    audio_spans, visual_spans = _word_spans(example, positions, fps)
    return MaskingPlan(example.id, positions, audio_spans, visual_spans)


def apply_mask(inputs: ModelInputs, plan: MaskingPlan) -> ModelInputs:
    """Zero the masked text rows and the aligned audio/visual rows.

    Every row outside the plan is returned bit-identical.
    """
    for pos in plan.positions:
        if not 0 <= pos < inputs.text.shape[0]:
            raise DimensionError(
                f"plan position {pos} outside text length {inputs.text.shape[0]}"
            )
    for start, end in plan.audio_spans:
        if start < 0 or end > inputs.audio.shape[0]:
            raise DimensionError(
                f"plan audio span [{start},{end}) outside {inputs.audio.shape[0]} rows"
            )
    for start, end in plan.visual_spans:
        if start < 0 or end > inputs.visual.shape[0]:
            raise DimensionError(
                f"plan visual span [{start},{end}) outside {inputs.visual.shape[0]} rows"
            )
    text = inputs.text.copy()
    audio = inputs.audio.copy()
    visual = inputs.visual.copy()
    text[plan.positions] = 0.0
    for start, end in plan.audio_spans:
        audio[start:end] = 0.0
    for start, end in plan.visual_spans:
        visual[start:end] = 0.0
    return ModelInputs(
        example_id=inputs.example_id,
        audio=audio,
        visual=visual,
        text=text,
        word_ids=inputs.word_ids,
    )


# ---------------------------------------------------------------------------
# Losses


def masked_softmax_loss(
    logits: Tensor, target_ids: np.ndarray, plan: MaskingPlan
) -> Tensor:
    """Mean negative log-softmax over the masked positions only."""
    if not plan.positions:
        raise ValueError("masking plan has no positions")
    positions = np.asarray(plan.positions, dtype=np.intp)
    log_probs = T.log_softmax(logits, axis=1)
    picked = T.gather_elements(log_probs, positions, target_ids[positions])
    return T.neg(T.mean_all(picked))


@dataclass
class NoiseDistribution:
    """Add-one-smoothed unigram distribution with a cumulative sampling table."""

    probs: np.ndarray
    cumulative: np.ndarray = field(init=False)

    def __post_init__(self):
        total = self.probs.sum()
        if not np.all(self.probs > 0):
            raise ConfigError("noise distribution must be strictly positive")
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"noise probabilities sum to {total}, expected 1")
        self.cumulative = np.cumsum(self.probs)
        self.cumulative[-1] = 1.0

    @classmethod
    def from_counts(cls, counts: np.ndarray) -> "NoiseDistribution":
        counts = np.asarray(counts, dtype=np.float64)
        probs = (counts + 1.0) / (counts.sum() + counts.size)
        return cls(probs=probs / probs.sum())

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        u = rng.random(shape)
        idx = np.searchsorted(self.cumulative, u, side="right")
        return np.minimum(idx, len(self.probs) - 1).astype(np.intp)


def _draw_candidates(
    plan: MaskingPlan,
    target_ids: np.ndarray,
    noise: NoiseDistribution,
    k_noise: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Per masked position: column 0 is the target, columns 1..k are noise draws."""
    if not plan.positions:
        raise ValueError("masking plan has no positions")
    if k_noise < 1:
        raise ConfigError("k_noise must be at least 1")
    positions = np.asarray(plan.positions, dtype=np.intp)
    targets = target_ids[positions]
    noise_ids = noise.sample(rng, (len(positions), k_noise))
    candidates = np.concatenate([targets[:, None], noise_ids], axis=1)
    return positions, candidates


def _nce_from_scores(
    scores: Tensor,
    candidates: np.ndarray,
    noise: NoiseDistribution,
    k_noise: int,
    normalizer: float,
) -> Tensor:
    """Binary-classification loss over target-vs-noise score deltas.

    The model score is logit - ln(normalizer) with the normalizer held
    fixed (the vocabulary size), never learned and never 1. With
    delta(w) = score(w) - ln(k * P_noise(w)):

        loss = -[ln sigmoid(delta(target))
                 + sum_i ln(1 - sigmoid(delta(noise_i)))]

    averaged over the masked positions.
    """
    m = candidates.shape[0]
    offsets = math.log(normalizer) + np.log(k_noise * noise.probs[candidates])
    delta = T.add_const(scores, -offsets)
    target_col = T.slice_cols(delta, 0, 1)
    noise_cols = T.slice_cols(delta, 1, k_noise + 1)
    total = T.add(
        T.sum_all(T.softplus(T.neg(target_col))),
        T.sum_all(T.softplus(noise_cols)),
    )
    return T.scale(total, 1.0 / m)


def nce_loss(
    logits: Tensor,
    target_ids: np.ndarray,
    plan: MaskingPlan,
    noise: NoiseDistribution,
    k_noise: int,
    vocab_size: int,
    rng: np.random.Generator,
) -> Tensor:
    """Reference path for the sampled loss, evaluated from full logits."""
    positions, candidates = _draw_candidates(plan, target_ids, noise, k_noise, rng)
    rows = np.repeat(positions, k_noise + 1)
    scores = T.reshape(
        T.gather_elements(logits, rows, candidates.reshape(-1)),
        (len(positions), k_noise + 1),
    )
    return _nce_from_scores(scores, candidates, noise, k_noise, float(vocab_size))


def nce_loss_from_encoding(
    fused: Tensor,
    head_weight: Tensor,
    head_bias: Tensor,
    target_ids: np.ndarray,
    plan: MaskingPlan,
    noise: NoiseDistribution,
    k_noise: int,
    vocab_size: int,
    rng: np.random.Generator,
) -> Tensor:
    """Training path: scores only the sampled candidates, never the full vocabulary."""
    positions, candidates = _draw_candidates(plan, target_ids, noise, k_noise, rng)
    scores = T.linear_select(fused, head_weight, head_bias, positions, candidates)
    return _nce_from_scores(scores, candidates, noise, k_noise, float(vocab_size))


# ---------------------------------------------------------------------------
# Learning-rate schedule and optimizer


@dataclass(frozen=True)
class LrSchedule:
    scale: float
    warmup_steps: int
    model_dim: int


def lr_at(schedule: LrSchedule, step: int) -> float:
    """scale * dim^-0.5 * min(step^-0.5, step * warmup^-1.5); peak at step == warmup."""
    if step < 1:
        raise ConfigError(f"schedule step must be >= 1, got {step}")
    return (
        schedule.scale
        * schedule.model_dim ** -0.5
        * min(step ** -0.5, step * schedule.warmup_steps ** -1.5)
    )


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(
        self,
        params: dict[str, np.ndarray],
        grads: dict[str, np.ndarray],
        lr: float,
        grad_clip: float = 0.0,
    ) -> None:
        if grad_clip > 0.0:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > grad_clip:
                factor = grad_clip / norm
                grads = {k: g * factor for k, g in grads.items()}
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for key, grad in grads.items():
            if key not in self._m:
                self._m[key] = np.zeros_like(params[key])
                self._v[key] = np.zeros_like(params[key])
            m = self._m[key]
            v = self._v[key]
            m *= b1
            m += (1 - b1) * grad
            v *= b2
            v += (1 - b2) * grad * grad
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            params[key] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Loop


@dataclass
class LossLogRow:
    epoch: int
    split: str
    loss: float
    lr: float


@dataclass
class PretrainResult:
    weights: ModelWeights
    log: list[LossLogRow]
    best_epoch: int
    holdout_ids: list[str]


def _example_loss(
    loss_kind: str,
    masked: ModelInputs,
    target_ids: np.ndarray,
    plan: MaskingPlan,
    params: dict[str, Tensor],
    buffers: dict[str, np.ndarray],
    config: ModelConfig,
    noise: NoiseDistribution,
    k_noise: int,
    noise_rng: np.random.Generator,
    drop_rng: np.random.Generator | None,
) -> Tensor:
    fused = M.encode_fused(masked, params, buffers, config, drop_rng)
    if loss_kind == "softmax":
        logits = M.mlm_head(fused, params)
        return masked_softmax_loss(logits, target_ids, plan)
    return nce_loss_from_encoding(
        fused.values,
        params["head.mlm.weight"],
        params["head.mlm.bias"],
        target_ids,
        plan,
        noise,
        k_noise,
        config.vocab_size,
        noise_rng,
    )


def pretrain_loop(
    examples: list[MultimodalExample],
    vocab: Vocabulary,
    config: ModelConfig,
    train: TrainParams,
    loss_kind: str,
    epochs: int,
    seed: int,
    fps: float = DEFAULT_FPS,
) -> PretrainResult:
    """Train on the masked-word task; returns the lowest held-out-loss weights.

    Fully deterministic under ``seed``: the held-out split, shuffling,
    masking plans and noise draws all derive from it, and the held-out
    plans are re-derived identically every epoch so epoch losses are
    comparable.
    """
    if loss_kind not in ("softmax", "nce"):
        raise ConfigError(f"loss_kind must be 'softmax' or 'nce', got {loss_kind!r}")
    if not examples:
        raise DataFormatError("pre-training dataset is empty")

    prepared = [prepare_inputs(ex, vocab, config, fps) for ex in examples]
    noise = NoiseDistribution.from_counts(vocab.counts)

    root = np.random.SeedSequence(seed)
    s_init, s_order, s_mask, s_noise, s_hold, s_drop = root.spawn(6)
    weights = M.init_weights(config, s_init)
    order_rng = np.random.default_rng(s_order)
    mask_rng = np.random.default_rng(s_mask)
    noise_rng = np.random.default_rng(s_noise)
    drop_rng = np.random.default_rng(s_drop) if config.dropout > 0 else None

    n = len(examples)
    holdout_n = max(1, int(round(train.holdout_fraction * n)))
    if n - holdout_n < 1:
        raise DataFormatError(
            f"dataset of {n} examples leaves no training data after a "
            f"{holdout_n}-example held-out split"
        )
    perm = order_rng.permutation(n)
    train_idx = perm[: n - holdout_n]
    holdout_idx = perm[n - holdout_n :]

    schedule = LrSchedule(train.lr_scale, train.warmup_steps, config.model_dim)
    optimizer = Adam(train.adam_beta1, train.adam_beta2, train.adam_eps)

    log_rows: list[LossLogRow] = []
    best = (math.inf, 0)
    best_weights = weights.copy()

    def holdout_loss() -> float:
        # Same derived seed every epoch: identical plans and noise draws,
        # so the per-epoch numbers are comparable.
        hold_rng = np.random.default_rng(s_hold)
        params = M.params_to_tensors(weights, requires_grad=False)
        total = 0.0
        for idx in holdout_idx:
            plan = make_masking_plan(examples[idx], config.mask_fraction, hold_rng, fps)
            masked = apply_mask(prepared[idx], plan)
            loss = _example_loss(
                loss_kind, masked, prepared[idx].word_ids, plan, params,
                weights.buffers, config, noise, train.k_noise, hold_rng, None,
            )
            total += loss.item()
        return total / len(holdout_idx)

    for epoch in range(1, epochs + 1):
        order = train_idx[order_rng.permutation(len(train_idx))]
        epoch_loss = 0.0
        lr = 0.0
        for start in range(0, len(order), train.batch_size):
            batch = order[start : start + train.batch_size]
            params = M.params_to_tensors(weights, requires_grad=True)
            batch_losses = []
            for idx in batch:
                plan = make_masking_plan(
                    examples[idx], config.mask_fraction, mask_rng, fps
                )
                masked = apply_mask(prepared[idx], plan)
                batch_losses.append(
                    _example_loss(
                        loss_kind, masked, prepared[idx].word_ids, plan, params,
                        weights.buffers, config, noise, train.k_noise, noise_rng,
                        drop_rng,
                    )
                )
            total = batch_losses[0]
            for extra in batch_losses[1:]:
                total = T.add(total, extra)
            batch_loss = T.scale(total, 1.0 / len(batch))
            value = batch_loss.item()
            if not math.isfinite(value):
                ids = [examples[i].id for i in batch]
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, step {optimizer.t + 1} "
                    f"(examples {ids})"
                )
            batch_loss.backward()
            grads = {
                k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in params.items()
            }
            lr = lr_at(schedule, optimizer.t + 1)
            optimizer.step(weights.params, grads, lr, train.grad_clip)
            epoch_loss += value * len(batch)
        train_mean = epoch_loss / len(order)
        hold_mean = holdout_loss()
        log_rows.append(LossLogRow(epoch, "train", train_mean, lr))
        log_rows.append(LossLogRow(epoch, "heldout", hold_mean, lr))
        if hold_mean < best[0]:
            best = (hold_mean, epoch)
            best_weights = weights.copy()

    if epochs == 0:
        best_weights = weights

    return PretrainResult(
        weights=best_weights,
        log=log_rows,
        best_epoch=best[1],
        holdout_ids=[examples[i].id for i in holdout_idx],
    )


# ---------------------------------------------------------------------------
# Evaluation probe


def predict_masked_words(
    weights: ModelWeights,
    config: ModelConfig,
    inputs: ModelInputs,
    plan: MaskingPlan,
) -> np.ndarray:
    """Argmax vocabulary ids at the plan's masked positions."""
    params = M.params_to_tensors(weights, requires_grad=False)
    masked = apply_mask(inputs, plan)
    logits = M.mlm_logits(masked, params, weights.buffers, config)
    return logits.data[np.asarray(plan.positions, dtype=np.intp)].argmax(axis=1)
