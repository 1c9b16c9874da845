"""Dataset handling: file formats, alignment, stacking and the synthetic corpus.

Dataset files are line-delimited JSON. The first line is a header
``{"format": "crossmodal-dataset", "version": 1}``; every following line is
one utterance record::

    {"id": "...", "words": ["tok", ...],
     "boundaries": [[start_ms, end_ms], ...],
     "audio":  {"shape": [T, D], "data": "<base64 little-endian float64>"},
     "visual": {"shape": [T, D], "data": "..."},
     "emotions": [6 floats in [0, 3]]}        # optional

Feature payloads are raw little-endian float64 bytes, so a write/read
round-trip is bit exact. Embedding files are GloVe-style text: one token
per line followed by its vector components.

The synthetic corpus generator builds utterances whose masked-slot word is
textually unpredictable (the two members of an ambiguity pair appear in
identical contexts with probability 0.5 each) but fully determined by the
audio features, plus an independent binary visual state that drives part of
the emotion labels. The accompanying manifest records every latent draw, so
tests can compute exact oracles against the generated data.
"""

from __future__ import annotations

import base64
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError
from .config import ModelConfig

log = logging.getLogger(__name__)

DATASET_FORMAT = "crossmodal-dataset"
MANIFEST_FORMAT = "crossmodal-generation"
FORMAT_VERSION = 1

AUDIO_HOP_MS = 10.0
AUDIO_STACK = 5
DEFAULT_FPS = 25.0


# ---------------------------------------------------------------------------
# Core records


@dataclass
class MultimodalExample:
    """One utterance: tokens, their time boundaries and raw feature tracks."""

    id: str
    words: list[str]
    word_boundaries: list[tuple[float, float]]
    audio: np.ndarray   # [T_audio x audio_dim], one row per 10 ms hop
    visual: np.ndarray  # [T_visual x visual_dim], one row per 1/fps s
    emotion_scores: np.ndarray | None = None  # [6] raw Likert scores


@dataclass
class ModelInputs:
    """Feature matrices as the model consumes them (audio already stacked)."""

    example_id: str
    audio: np.ndarray    # [S x (audio_dim * stack)]
    visual: np.ndarray   # [T_visual x visual_dim]
    text: np.ndarray     # [n_words x text_embedding_dim]
    word_ids: np.ndarray  # [n_words] vocabulary ids


def validate_example(example: MultimodalExample, fps: float = DEFAULT_FPS) -> None:
    """Check the boundary and bounds invariants; raises DataFormatError."""
    if len(example.words) != len(example.word_boundaries):
        raise DataFormatError(
            f"record {example.id}: {len(example.words)} words but "
            f"{len(example.word_boundaries)} boundaries"
        )
    audio_ms = example.audio.shape[0] * AUDIO_HOP_MS
    prev_end = 0.0
    for i, (start, end) in enumerate(example.word_boundaries):
        if end < start:
            raise DataFormatError(
                f"record {example.id}: boundaries[{i}] ends before it starts"
            )
        if start < prev_end:
            raise DataFormatError(
                f"record {example.id}: boundaries[{i}] overlaps the previous word"
            )
        if start < 0 or end > audio_ms + 1e-9:
            raise DataFormatError(
                f"record {example.id}: boundaries[{i}] outside [0, {audio_ms}] ms"
            )
        if math.floor(end * fps / 1000.0) > example.visual.shape[0]:
            raise DataFormatError(
                f"record {example.id}: boundaries[{i}] beyond the visual track"
            )
        prev_end = end
    if example.emotion_scores is not None and example.emotion_scores.shape != (6,):
        raise DataFormatError(
            f"record {example.id}: emotions must be 6 values, "
            f"got shape {example.emotion_scores.shape}"
        )


# ---------------------------------------------------------------------------
# Alignment and stacking


def align(
    word_boundaries: list[tuple[float, float]],
    hop_ms: float = AUDIO_HOP_MS,
    fps: float = DEFAULT_FPS,
) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    """Convert millisecond boundaries to half-open frame index spans.

    Both conversions floor, so a boundary that falls exactly on a frame
    edge assigns that frame to the later word, consecutive words get
    disjoint spans, and very short words may map to empty spans.
    """
    spans = []
    for i, (start, end) in enumerate(word_boundaries):
        if end < start:
            raise DataFormatError(f"boundaries[{i}]: end {end} before start {start}")
        audio_span = (math.floor(start / hop_ms), math.floor(end / hop_ms))
        visual_span = (
            math.floor(start * fps / 1000.0),
            math.floor(end * fps / 1000.0),
        )
        spans.append((audio_span, visual_span))
    return spans


def stack_audio(frames: np.ndarray, stack: int = AUDIO_STACK) -> np.ndarray:
    """Concatenate non-overlapping groups of ``stack`` frames into single rows.

    The last group is zero-padded, so total energy is preserved.
    """
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise DataFormatError(f"stack_audio: need a non-empty [T x D] matrix, got {frames.shape}")
    t, dim = frames.shape
    rows = -(-t // stack)
    padded = np.zeros((rows * stack, dim))
    padded[:t] = frames
    return padded.reshape(rows, stack * dim)


# ---------------------------------------------------------------------------
# Dataset files


def _encode_matrix(arr: np.ndarray) -> dict:
    return {
        "shape": [int(s) for s in arr.shape],
        "data": base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii"),
    }


def _decode_matrix(obj, record_id: str, fieldname: str) -> np.ndarray:
    if not isinstance(obj, dict) or "shape" not in obj or "data" not in obj:
        raise DataFormatError(
            f"record {record_id}: field {fieldname}: expected {{shape, data}}"
        )
    shape = obj["shape"]
    if (
        not isinstance(shape, list)
        or len(shape) != 2
        or not all(isinstance(s, int) and s >= 0 for s in shape)
    ):
        raise DataFormatError(
            f"record {record_id}: field {fieldname}.shape: expected two non-negative ints"
        )
    try:
        raw = base64.b64decode(obj["data"], validate=True)
    except Exception:
        raise DataFormatError(
            f"record {record_id}: field {fieldname}.data: not valid base64"
        )
    expected = shape[0] * shape[1] * 8
    if len(raw) != expected:
        raise DataFormatError(
            f"record {record_id}: field {fieldname}.data: payload truncated "
            f"({len(raw)} bytes, expected {expected})"
        )
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def write_dataset(path, examples: list[MultimodalExample]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"format": DATASET_FORMAT, "version": FORMAT_VERSION},
                           sort_keys=True, separators=(",", ":")) + "\n")
        for ex in examples:
            rec = {
                "id": ex.id,
                "words": list(ex.words),
                "boundaries": [[float(s), float(e)] for s, e in ex.word_boundaries],
                "audio": _encode_matrix(ex.audio),
                "visual": _encode_matrix(ex.visual),
            }
            if ex.emotion_scores is not None:
                rec["emotions"] = [float(v) for v in ex.emotion_scores]
            f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def read_dataset(path) -> list[MultimodalExample]:
    examples: list[MultimodalExample] = []
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        return examples
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DataFormatError(f"line 1: header is not valid JSON: {e}")
    if header.get("format") != DATASET_FORMAT:
        raise DataFormatError(f"line 1: field format: expected {DATASET_FORMAT!r}")
    if header.get("version") != FORMAT_VERSION:
        raise DataFormatError(
            f"line 1: field version: unsupported version {header.get('version')!r}"
        )
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"line {lineno}: record is not valid JSON: {e}")
        for required in ("id", "words", "boundaries", "audio", "visual"):
            if required not in rec:
                raise DataFormatError(f"line {lineno}: field {required}: missing")
        rid = rec["id"]
        words = rec["words"]
        if not isinstance(words, list) or not all(isinstance(w, str) for w in words):
            raise DataFormatError(f"line {lineno}: field words: expected a list of strings")
        bounds = rec["boundaries"]
        if not isinstance(bounds, list) or any(
            not isinstance(b, list) or len(b) != 2 for b in bounds
        ):
            raise DataFormatError(
                f"line {lineno}: field boundaries: expected [start_ms, end_ms] pairs"
            )
        emotions = None
        if "emotions" in rec:
            raw = rec["emotions"]
            if not isinstance(raw, list) or len(raw) != 6:
                raise DataFormatError(
                    f"line {lineno}: field emotions: expected 6 values"
                )
            emotions = np.asarray(raw, dtype=np.float64)
        example = MultimodalExample(
            id=rid,
            words=list(words),
            word_boundaries=[(float(s), float(e)) for s, e in bounds],
            audio=_decode_matrix(rec["audio"], rid, "audio"),
            visual=_decode_matrix(rec["visual"], rid, "visual"),
            emotion_scores=emotions,
        )
        try:
            validate_example(example)
        except DataFormatError as e:
            raise DataFormatError(f"line {lineno}: {e}")
        examples.append(example)
    return examples


# ---------------------------------------------------------------------------
# Vocabulary and embeddings


@dataclass
class Vocabulary:
    """Dense token ids, occurrence counts and (once loaded) embedding rows."""

    tokens: list[str]
    token_to_id: dict[str, int]
    counts: np.ndarray                    # int64 [V]
    embeddings: np.ndarray | None = None  # [V x dim]

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_examples(cls, examples: list[MultimodalExample]) -> "Vocabulary":
        tokens: list[str] = []
        index: dict[str, int] = {}
        counts: list[int] = []
        for ex in examples:
            for w in ex.words:
                if w not in index:
                    index[w] = len(tokens)
                    tokens.append(w)
                    counts.append(0)
                counts[index[w]] += 1
        return cls(tokens=tokens, token_to_id=index, counts=np.asarray(counts, dtype=np.int64))


def write_embeddings(path, tokens: list[str], table: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for token, row in zip(tokens, table):
            f.write(token + " " + " ".join(repr(float(v)) for v in row) + "\n")


def load_embeddings(path, vocab: Vocabulary) -> tuple[Vocabulary, list[str]]:
    """Attach embedding rows to ``vocab``; tokens absent from the file are dropped.

    The returned vocabulary keeps only tokens that have an embedding row,
    with dense ids in embedding-file line order; that order is a property
    of the shared embedding table, so two corpora read against the same
    file assign every common token the same id. Also returns the list of
    dropped tokens. Duplicate file lines: the last one wins.
    """
    file_order: list[str] = []
    rows: dict[str, np.ndarray] = {}
    dim: int | None = None
    duplicates = 0
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                raise DataFormatError(
                    f"line {lineno}: expected 'token v1 v2 ...', got {line!r}"
                )
            token, values = parts[0], parts[1:]
            if dim is None:
                dim = len(values)
            elif len(values) != dim:
                raise DataFormatError(
                    f"line {lineno}: {len(values)} components, previous lines had {dim}"
                )
            if token in rows:
                duplicates += 1
            else:
                file_order.append(token)
            try:
                rows[token] = np.asarray([float(v) for v in values])
            except ValueError as e:
                raise DataFormatError(f"line {lineno}: bad float: {e}")
    if duplicates:
        log.warning("embedding file %s: %d duplicate tokens, last occurrence kept", path, duplicates)

    corpus = set(vocab.tokens)
    kept = [t for t in file_order if t in corpus]
    dropped = [t for t in vocab.tokens if t not in rows]
    if dropped:
        log.info("embedding file %s: dropping %d out-of-vocabulary tokens", path, len(dropped))
    keep_ids = [vocab.token_to_id[t] for t in kept]
    reduced = Vocabulary(
        tokens=kept,
        token_to_id={t: i for i, t in enumerate(kept)},
        counts=vocab.counts[keep_ids],
        embeddings=np.stack([rows[t] for t in kept]) if kept else np.zeros((0, dim or 0)),
    )
    return reduced, dropped


def apply_vocabulary(
    examples: list[MultimodalExample], vocab: Vocabulary
) -> list[MultimodalExample]:
    """Remove words (and their boundaries) that the vocabulary does not cover.

    Examples left with no words are dropped entirely.
    """
    out: list[MultimodalExample] = []
    removed_words = 0
    removed_examples = 0
    for ex in examples:
        keep = [i for i, w in enumerate(ex.words) if w in vocab.token_to_id]
        removed_words += len(ex.words) - len(keep)
        if not keep:
            removed_examples += 1
            continue
        if len(keep) == len(ex.words):
            out.append(ex)
        else:
            out.append(
                MultimodalExample(
                    id=ex.id,
                    words=[ex.words[i] for i in keep],
                    word_boundaries=[ex.word_boundaries[i] for i in keep],
                    audio=ex.audio,
                    visual=ex.visual,
                    emotion_scores=ex.emotion_scores,
                )
            )
    if removed_words or removed_examples:
        log.info(
            "vocabulary filter removed %d words and %d empty examples",
            removed_words,
            removed_examples,
        )
    return out


def prepare_inputs(
    example: MultimodalExample,
    vocab: Vocabulary,
    config: ModelConfig,
    fps: float = DEFAULT_FPS,
) -> ModelInputs:
    """Stack audio, look up text embeddings and check dims against the config."""
    if vocab.embeddings is None:
        raise ConfigError("vocabulary has no embeddings; call load_embeddings first")
    if not example.words:
        raise DataFormatError(f"record {example.id}: no words")
    try:
        ids = np.asarray([vocab.token_to_id[w] for w in example.words], dtype=np.intp)
    except KeyError as e:
        raise DataFormatError(
            f"record {example.id}: token {e.args[0]!r} missing from vocabulary; "
            "apply_vocabulary first"
        )
    stacked = stack_audio(example.audio)
    if stacked.shape[1] != config.audio_input_dim:
        raise ConfigError(
            f"stacked audio dim {stacked.shape[1]} != config.audio_input_dim "
            f"{config.audio_input_dim}"
        )
    if example.visual.shape[1] != config.visual_input_dim:
        raise ConfigError(
            f"visual dim {example.visual.shape[1]} != config.visual_input_dim "
            f"{config.visual_input_dim}"
        )
    if vocab.embeddings.shape[1] != config.text_embedding_dim:
        raise ConfigError(
            f"embedding dim {vocab.embeddings.shape[1]} != config.text_embedding_dim "
            f"{config.text_embedding_dim}"
        )
    if len(vocab) != config.vocab_size:
        raise ConfigError(
            f"vocabulary size {len(vocab)} != config.vocab_size {config.vocab_size}"
        )
    return ModelInputs(
        example_id=example.id,
        audio=stacked,
        visual=example.visual.astype(np.float64),
        text=vocab.embeddings[ids].astype(np.float64),
        word_ids=ids,
    )


# ---------------------------------------------------------------------------
# Synthetic corpus


DEFAULT_WORLD_SEED = 1803


@dataclass(frozen=True)
class SynthParams:
    seed: int
    n_examples: int
    vocab_size: int = 64
    ambiguity_pairs: int = 1
    audio_dim: int = 8        # per raw frame; the model sees audio_dim * 5
    visual_dim: int = 16
    text_embedding_dim: int = 16
    n_templates: int = 8
    sentence_len: int = 8
    # Seeds the corpus "world": embeddings, templates and signal vectors.
    # Corpora generated with the same world but different seeds share a
    # language, so a model pre-trained on one transfers to the other.
    world_seed: int = DEFAULT_WORLD_SEED
    fps: float = DEFAULT_FPS
    word_ms_min: int = 100
    word_ms_max: int = 200
    audio_noise: float = 0.4
    audio_signal: float = 1.0
    # Fraction of the pair signal carried by audio rows outside the slot
    # word. Must stay positive: masking zeroes the slot-aligned rows, so
    # off-slot rows are the only place the masked-word identity survives.
    context_bleed: float = 1.0
    visual_noise: float = 0.4
    visual_signal: float = 1.0
    # Probability that the textual cue word agrees with the visual state.
    # Below 1.0 so text alone cannot fully recover the visual-driven labels.
    cue_fidelity: float = 0.8


EMOTION_RULE = (
    "member",
    "not_member",
    "visual",
    "not_visual",
    "member_xor_visual",
    "not_member_xor_visual",
)


def emotion_scores_for(member: int, visual_state: int) -> np.ndarray:
    """The deterministic label rule; present emotions score 3.0 on the Likert scale."""
    x = member ^ visual_state
    bits = [member, 1 - member, visual_state, 1 - visual_state, x, 1 - x]
    return np.asarray([3.0 * b for b in bits])


@dataclass
class SynthCorpus:
    examples: list[MultimodalExample]
    tokens: list[str]
    embeddings: np.ndarray
    manifest: dict


def synth_corpus(params: SynthParams) -> SynthCorpus:
    """Generate the oracle corpus; identical params give identical output."""
    n_pair_tokens = 2 * params.ambiguity_pairs
    n_fillers = params.vocab_size - n_pair_tokens - 2
    if params.ambiguity_pairs < 1 or n_fillers < 4:
        raise ConfigError(
            f"vocab_size {params.vocab_size} cannot hold {params.ambiguity_pairs} "
            "pairs plus 2 cue words and at least 4 fillers"
        )
    if params.sentence_len < 4:
        raise ConfigError("sentence_len must be at least 4 (slot, cue, two fillers)")
    if not 0.0 < params.context_bleed <= 1.0:
        raise ConfigError("context_bleed must lie in (0, 1]")

    world_rng = np.random.default_rng(params.world_seed)
    rng = np.random.default_rng(params.seed)
    pair_words = [(f"pair{i}a", f"pair{i}b") for i in range(params.ambiguity_pairs)]
    cue_words = ("cue0", "cue1")
    fillers = [f"filler{j}" for j in range(n_fillers)]
    tokens = [w for pair in pair_words for w in pair] + list(cue_words) + fillers

    embeddings = world_rng.normal(0.0, 1.0, size=(len(tokens), params.text_embedding_dim))

    audio_base = world_rng.normal(0.0, 1.0, size=params.audio_dim)
    pair_signals = world_rng.normal(
        0.0, 1.0, size=(params.ambiguity_pairs, params.audio_dim)
    )
    pair_signals /= np.linalg.norm(pair_signals, axis=1, keepdims=True)
    pair_signals *= params.audio_signal
    visual_base = world_rng.normal(0.0, 1.0, size=params.visual_dim)
    visual_signal = world_rng.normal(0.0, 1.0, size=params.visual_dim)
    visual_signal *= params.visual_signal / np.linalg.norm(visual_signal)

    templates = []
    for _ in range(params.n_templates):
        slot_pos, cue_pos = world_rng.choice(params.sentence_len, size=2, replace=False)
        body = [
            fillers[int(j)]
            for j in world_rng.integers(0, n_fillers, params.sentence_len)
        ]
        templates.append(
            {"words": body, "slot": int(slot_pos), "cue": int(cue_pos)}
        )

    examples: list[MultimodalExample] = []
    records: dict[str, dict] = {}
    for n in range(params.n_examples):
        tpl_idx = int(rng.integers(0, params.n_templates))
        tpl = templates[tpl_idx]
        pair_idx = int(rng.integers(0, params.ambiguity_pairs))
        member = int(rng.integers(0, 2))
        visual_state = int(rng.integers(0, 2))
        cue_agrees = bool(rng.random() < params.cue_fidelity)

        words = list(tpl["words"])
        words[tpl["slot"]] = pair_words[pair_idx][member]
        words[tpl["cue"]] = cue_words[visual_state if cue_agrees else 1 - visual_state]

        durations = rng.integers(
            params.word_ms_min // 10, params.word_ms_max // 10 + 1, len(words)
        ) * 10
        edges = np.concatenate([[0], np.cumsum(durations)]).astype(np.float64)
        boundaries = [(float(edges[i]), float(edges[i + 1])) for i in range(len(words))]
        total_ms = float(edges[-1])

        t_audio = int(total_ms / AUDIO_HOP_MS)
        sign = 1.0 if member == 0 else -1.0
        strength = np.full(t_audio, params.context_bleed)
        slot_start, slot_end = boundaries[tpl["slot"]]
        lo = math.floor(slot_start / AUDIO_HOP_MS)
        hi = math.floor(slot_end / AUDIO_HOP_MS)
        strength[lo:hi] = 1.0
        audio = (
            audio_base
            + (sign * strength)[:, None] * pair_signals[pair_idx]
            + rng.normal(0.0, params.audio_noise, size=(t_audio, params.audio_dim))
        )

        t_visual = math.floor(total_ms * params.fps / 1000.0)
        vsign = 1.0 if visual_state == 1 else -1.0
        visual = (
            visual_base
            + vsign * visual_signal
            + rng.normal(0.0, params.visual_noise, size=(t_visual, params.visual_dim))
        )

        ex_id = f"ex{n:05d}"
        examples.append(
            MultimodalExample(
                id=ex_id,
                words=words,
                word_boundaries=boundaries,
                audio=audio,
                visual=visual,
                emotion_scores=emotion_scores_for(member, visual_state),
            )
        )
        records[ex_id] = {
            "template": tpl_idx,
            "pair": pair_idx,
            "member": member,
            "visual_state": visual_state,
            "cue_agrees": cue_agrees,
            "slot_position": tpl["slot"],
            "cue_position": tpl["cue"],
        }

    manifest = {
        "format": MANIFEST_FORMAT,
        "version": FORMAT_VERSION,
        "params": {
            k: (float(v) if isinstance(v, float) else v)
            for k, v in vars(params).items()
        },
        "pair_words": [list(p) for p in pair_words],
        "cue_words": list(cue_words),
        "emotion_rule": list(EMOTION_RULE),
        "audio_base": audio_base.tolist(),
        "pair_signals": pair_signals.tolist(),
        "visual_base": visual_base.tolist(),
        "visual_signal": visual_signal.tolist(),
        "templates": templates,
        "examples": records,
    }
    return SynthCorpus(
        examples=examples, tokens=tokens, embeddings=embeddings, manifest=manifest
    )


def write_manifest(path, manifest: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")


def read_manifest(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"manifest {path} is not valid JSON: {e}")
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DataFormatError(f"manifest {path}: field format: expected {MANIFEST_FORMAT!r}")
    return manifest
