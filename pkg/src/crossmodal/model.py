"""The cross-modal transformer.

Per-modality linear input projections with sinusoidal positional
embeddings, N self-attention encoder layers per modality, two cross-modal
blocks that query from the text stream and read keys/values from the
encoded audio or visual sequence, a fixed-weight fusion of the three text-
length streams, and two swappable heads (per-position vocabulary logits
for masked-word pre-training, pooled sigmoid scores for emotion
fine-tuning).

Because queries always come from the text side, the fused representation
has the text sequence length regardless of the audio and visual lengths;
text is the anchor modality and cannot be ablated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .data import ModelInputs
from .errors import ConfigError, DimensionError
from .tensor import Tensor

MODALITIES = ("audio", "visual", "text")
CROSS_BLOCKS = ("audio", "visual")  # source modality; the anchor is text


@dataclass
class ModelWeights:
    """All parameter arrays, each reachable through one stable string key.

    ``params`` holds learnable arrays; ``buffers`` holds derived constants
    (the positional table). Both round-trip through checkpoints.
    """

    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            params={k: v.copy() for k, v in self.params.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
        )


@dataclass
class EncodedSequence:
    values: Tensor  # [seq_len x model_dim]
    modality: str

    @property
    def seq_len(self) -> int:
        return self.values.shape[0]


def sinusoidal_table(max_positions: int, dim: int) -> np.ndarray:
    """Standard fixed positional embeddings: sin on even columns, cos on odd."""
    table = np.zeros((max_positions, dim))
    position = np.arange(max_positions)[:, None].astype(np.float64)
    div = np.exp(np.arange(0, dim, 2) * (-math.log(10000.0) / dim))
    table[:, 0::2] = np.sin(position * div)
    table[:, 1::2] = np.cos(position * div[: table[:, 1::2].shape[1]])
    return table


def _layer_param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, ff = config.model_dim, config.feedforward_dim
    return {
        "attn.wq": (d, d),
        "attn.bq": (d,),
        "attn.wk": (d, d),
        "attn.bk": (d,),
        "attn.wv": (d, d),
        "attn.bv": (d,),
        "attn.wo": (d, d),
        "attn.bo": (d,),
        "ln1.gain": (d,),
        "ln1.bias": (d,),
        "ff.w1": (d, ff),
        "ff.b1": (ff,),
        "ff.w2": (ff, d),
        "ff.b2": (d,),
        "ln2.gain": (d,),
        "ln2.bias": (d,),
    }


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """The full key -> shape map; key order is the sorted-key checkpoint order."""
    d = config.model_dim
    shapes: dict[str, tuple[int, ...]] = {}
    input_dims = {
        "audio": config.audio_input_dim,
        "visual": config.visual_input_dim,
        "text": config.text_embedding_dim,
    }
    for m in MODALITIES:
        shapes[f"embed.{m}.weight"] = (input_dims[m], d)
        shapes[f"embed.{m}.bias"] = (d,)
        for i in range(config.encoder_layers):
            for name, shape in _layer_param_shapes(config).items():
                shapes[f"enc.{m}.{i}.{name}"] = shape
    for m in CROSS_BLOCKS:
        for i in range(config.encoder_layers):
            for name, shape in _layer_param_shapes(config).items():
                shapes[f"cross.{m}.{i}.{name}"] = shape
    shapes["head.mlm.weight"] = (d, config.vocab_size)
    shapes["head.mlm.bias"] = (config.vocab_size,)
    shapes["head.emotion.weight"] = (d, config.num_emotions)
    shapes["head.emotion.bias"] = (config.num_emotions,)
    return shapes


def _init_array(shape: tuple[int, ...], key: str, rng: np.random.Generator) -> np.ndarray:
    if len(shape) == 1:
        if key.endswith(".gain"):
            return np.ones(shape)
        return np.zeros(shape)
    fan_in, fan_out = shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_weights(config: ModelConfig, seed: int) -> ModelWeights:
    rng = np.random.default_rng(seed)
    params = {
        key: _init_array(shape, key, rng)
        for key, shape in parameter_shapes(config).items()
    }
    buffers = {"pos.table": sinusoidal_table(config.max_positions, config.model_dim)}
    return ModelWeights(params=params, buffers=buffers)


def init_emotion_head(weights: ModelWeights, config: ModelConfig, seed: int) -> ModelWeights:
    """Fresh classification head on top of retained encoder weights.

    Drops the masked-word head; the caller gets weights ready for
    fine-tuning from a pre-trained checkpoint.
    """
    rng = np.random.default_rng(seed)
    out = weights.copy()
    out.params.pop("head.mlm.weight", None)
    out.params.pop("head.mlm.bias", None)
    d = config.model_dim
    out.params["head.emotion.weight"] = _init_array(
        (d, config.num_emotions), "head.emotion.weight", rng
    )
    out.params["head.emotion.bias"] = np.zeros(config.num_emotions)
    return out


def params_to_tensors(weights: ModelWeights, requires_grad: bool) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in weights.params.items()}


# ---------------------------------------------------------------------------
# Forward blocks


def _linear(x: Tensor, params: dict[str, Tensor], wkey: str, bkey: str) -> Tensor:
    return T.add(T.matmul(x, params[wkey]), params[bkey])


def embed_inputs(
    inputs: ModelInputs,
    params: dict[str, Tensor],
    buffers: dict[str, np.ndarray],
    config: ModelConfig,
) -> tuple[Tensor, Tensor, Tensor]:
    """Project each modality to model_dim and add positional rows."""
    expected = {
        "audio": config.audio_input_dim,
        "visual": config.visual_input_dim,
        "text": config.text_embedding_dim,
    }
    table = buffers["pos.table"]
    out = []
    for name, feats in (
        ("audio", inputs.audio),
        ("visual", inputs.visual),
        ("text", inputs.text),
    ):
        if feats.ndim != 2 or feats.shape[1] != expected[name]:
            raise ConfigError(
                f"{name} features have shape {feats.shape}, expected "
                f"[len x {expected[name]}]"
            )
        length = feats.shape[0]
        if length > table.shape[0]:
            raise ConfigError(
                f"{name} sequence length {length} exceeds max_positions {table.shape[0]}"
            )
        x = _linear(Tensor(feats), params, f"embed.{name}.weight", f"embed.{name}.bias")
        out.append(T.add_const(x, table[:length]))
    return tuple(out)


def project_qkv(
    f: Tensor, params: dict[str, Tensor], prefix: str
) -> tuple[Tensor, Tensor, Tensor]:
    q = _linear(f, params, f"{prefix}.attn.wq", f"{prefix}.attn.bq")
    k = _linear(f, params, f"{prefix}.attn.wk", f"{prefix}.attn.bk")
    v = _linear(f, params, f"{prefix}.attn.wv", f"{prefix}.attn.bv")
    return q, k, v


def scaled_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d_head)) v; every output row is a convex blend of v rows."""
    if k.shape[0] != v.shape[0]:
        raise DimensionError(
            f"scaled_attention: key length {k.shape} and value length {v.shape} differ"
        )
    head_dim = q.shape[1]
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(head_dim))
    return T.matmul(T.softmax(scores, axis=1), v)


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    heads: int,
) -> Tensor:
    d = q.shape[1]
    if d % heads != 0:
        raise ConfigError(f"width {d} not divisible by {heads} heads")
    slice_width = d // heads
    pieces = []
    for h in range(heads):
        lo, hi = h * slice_width, (h + 1) * slice_width
        pieces.append(
            scaled_attention(
                T.slice_cols(q, lo, hi),
                T.slice_cols(k, lo, hi),
                T.slice_cols(v, lo, hi),
            )
        )
    merged = pieces[0] if heads == 1 else T.concat(pieces, axis=1)
    return _linear(merged, params, f"{prefix}.attn.wo", f"{prefix}.attn.bo")


def encoder_layer(
    query_src: Tensor,
    kv_src: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    config: ModelConfig,
    drop_rng: np.random.Generator | None = None,
) -> Tensor:
    """One encoder block. Self-attention when query_src is kv_src.

    The residual into the first LayerNorm comes from the value projection
    (the query projection in the cross-modal case, which is the only
    length-compatible stream on the anchor side); set
    config.residual_source = "input" for the standard block-input residual.
    """
    q = _linear(query_src, params, f"{prefix}.attn.wq", f"{prefix}.attn.bq")
    k = _linear(kv_src, params, f"{prefix}.attn.wk", f"{prefix}.attn.bk")
    v = _linear(kv_src, params, f"{prefix}.attn.wv", f"{prefix}.attn.bv")

    attended = multi_head_attention(q, k, v, params, prefix, config.attention_heads)
    if config.dropout > 0 and drop_rng is not None:
        attended = T.dropout(attended, config.dropout, drop_rng)

    if config.residual_source == "value":
        residual = v if kv_src is query_src else q
    else:
        residual = query_src
    normed = T.layer_norm(
        T.add(residual, attended),
        params[f"{prefix}.ln1.gain"],
        params[f"{prefix}.ln1.bias"],
        config.layer_norm_eps,
    )

    hidden = T.relu(_linear(normed, params, f"{prefix}.ff.w1", f"{prefix}.ff.b1"))
    ff_out = _linear(hidden, params, f"{prefix}.ff.w2", f"{prefix}.ff.b2")
    if config.dropout > 0 and drop_rng is not None:
        ff_out = T.dropout(ff_out, config.dropout, drop_rng)
    return T.layer_norm(
        T.add(normed, ff_out),
        params[f"{prefix}.ln2.gain"],
        params[f"{prefix}.ln2.bias"],
        config.layer_norm_eps,
    )


def unimodal_encode(
    f: Tensor,
    modality: str,
    params: dict[str, Tensor],
    config: ModelConfig,
    drop_rng: np.random.Generator | None = None,
) -> EncodedSequence:
    stream = f
    for i in range(config.encoder_layers):
        stream = encoder_layer(
            stream, stream, params, f"enc.{modality}.{i}", config, drop_rng
        )
    return EncodedSequence(values=stream, modality=modality)


def cross_modal_encode(
    source: EncodedSequence,
    anchor: EncodedSequence,
    params: dict[str, Tensor],
    config: ModelConfig,
    drop_rng: np.random.Generator | None = None,
) -> EncodedSequence:
    """Anchor-length encoding of ``source``: queries evolve along the anchor
    stream while keys and values come from the encoded source in every layer."""
    if anchor.modality != "text":
        raise ConfigError("cross-modal blocks anchor on the text encoding")
    stream = anchor.values
    for i in range(config.encoder_layers):
        stream = encoder_layer(
            stream, source.values, params, f"cross.{source.modality}.{i}", config, drop_rng
        )
    return EncodedSequence(values=stream, modality=f"{source.modality}->text")


def fuse(
    e_text: EncodedSequence,
    e_audio_text: EncodedSequence,
    e_visual_text: EncodedSequence,
    config: ModelConfig,
) -> EncodedSequence:
    shapes = {
        e.values.shape for e in (e_text, e_audio_text, e_visual_text)
    }
    if len(shapes) != 1:
        raise DimensionError(
            "fuse: streams disagree in shape "
            f"{[e.values.shape for e in (e_text, e_audio_text, e_visual_text)]}; "
            "the anchor contract is broken"
        )
    w1, w2, w3 = config.fusion_weights
    combined = T.add(
        T.add(T.scale(e_text.values, w1), T.scale(e_audio_text.values, w2)),
        T.scale(e_visual_text.values, w3),
    )
    return EncodedSequence(values=combined, modality="fused")


def mlm_head(fused: EncodedSequence, params: dict[str, Tensor]) -> Tensor:
    """Per-position vocabulary logits, no pooling."""
    return _linear(fused.values, params, "head.mlm.weight", "head.mlm.bias")


def emotion_head(
    fused: EncodedSequence, params: dict[str, Tensor], config: ModelConfig
) -> Tensor:
    """Mean-pool over positions, project to the emotion classes, sigmoid."""
    pooled = T.reshape(T.mean_over_axis(fused.values, 0), (1, config.model_dim))
    logits = _linear(pooled, params, "head.emotion.weight", "head.emotion.bias")
    return T.reshape(T.sigmoid(logits), (config.num_emotions,))


# ---------------------------------------------------------------------------
# End-to-end drivers


def encode_fused(
    inputs: ModelInputs,
    params: dict[str, Tensor],
    buffers: dict[str, np.ndarray],
    config: ModelConfig,
    drop_rng: np.random.Generator | None = None,
) -> EncodedSequence:
    f_audio, f_visual, f_text = embed_inputs(inputs, params, buffers, config)
    s_audio = unimodal_encode(f_audio, "audio", params, config, drop_rng)
    s_visual = unimodal_encode(f_visual, "visual", params, config, drop_rng)
    s_text = unimodal_encode(f_text, "text", params, config, drop_rng)
    e_at = cross_modal_encode(s_audio, s_text, params, config, drop_rng)
    e_vt = cross_modal_encode(s_visual, s_text, params, config, drop_rng)
    return fuse(s_text, e_at, e_vt, config)


def mlm_logits(
    inputs: ModelInputs,
    params: dict[str, Tensor],
    buffers: dict[str, np.ndarray],
    config: ModelConfig,
    drop_rng: np.random.Generator | None = None,
) -> Tensor:
    return mlm_head(encode_fused(inputs, params, buffers, config, drop_rng), params)


def emotion_probs(
    inputs: ModelInputs,
    params: dict[str, Tensor],
    buffers: dict[str, np.ndarray],
    config: ModelConfig,
    drop_rng: np.random.Generator | None = None,
) -> Tensor:
    return emotion_head(
        encode_fused(inputs, params, buffers, config, drop_rng), params, config
    )
