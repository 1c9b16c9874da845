import numpy as np
import pytest

from crossmodal import data as D
from crossmodal.config import ModelConfig, TrainParams


def write_corpus(dirpath, corpus):
    """Persist a generated corpus the way cmd_synth does."""
    D.write_dataset(dirpath / "dataset.jsonl", corpus.examples)
    D.write_embeddings(dirpath / "embeddings.txt", corpus.tokens, corpus.embeddings)
    D.write_manifest(dirpath / "generation.json", corpus.manifest)


def bind_corpus(dirpath):
    """Load a written corpus back: examples plus embedding-backed vocabulary."""
    examples = D.read_dataset(dirpath / "dataset.jsonl")
    vocab = D.Vocabulary.from_examples(examples)
    vocab, _ = D.load_embeddings(dirpath / "embeddings.txt", vocab)
    return D.apply_vocabulary(examples, vocab), vocab


def tiny_config(vocab_size, **overrides):
    """The d=8 two-head single-layer config used for gradient checks."""
    base = dict(
        vocab_size=vocab_size,
        model_dim=8,
        encoder_layers=1,
        attention_heads=2,
        feedforward_dim=4,
        audio_input_dim=40,
        visual_input_dim=16,
        text_embedding_dim=16,
        max_positions=64,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A 60-example corpus bound to its vocabulary, shared across tests."""
    root = tmp_path_factory.mktemp("small_corpus")
    corpus = D.synth_corpus(
        D.SynthParams(seed=11, n_examples=60, vocab_size=24, sentence_len=6, n_templates=4)
    )
    write_corpus(root, corpus)
    examples, vocab = bind_corpus(root)
    return {
        "dir": root,
        "corpus": corpus,
        "examples": examples,
        "vocab": vocab,
        "config": tiny_config(len(vocab)),
    }


@pytest.fixture
def fast_train():
    return TrainParams(
        epochs=2,
        batch_size=8,
        warmup_steps=30,
        lr_scale=2.0,
        k_noise=8,
        holdout_fraction=0.1,
        runs=1,
    )
