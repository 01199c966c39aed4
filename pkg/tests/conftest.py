"""Shared fixtures: a tiny untrained model for fast unit tests and a
session-scoped overfit toy model for behavioral and end-to-end tests."""

import time

import numpy as np
import pytest

from dialoflow.data import encode_dialogue
from dialoflow.model import ModelConfig, init_params
from dialoflow.training import TrainConfig, train

from toycorpus import toy_corpus, toy_vocab

TOY_MODEL_CFG = dict(
    d_model=64,
    n_layers=3,
    n_heads=4,
    d_ff=256,
    vocab_size=45,
    max_positions=64,
    max_utterances=16,
    dropout=0.0,
)
TOY_TRAIN_CFG = dict(
    learning_rate=1e-2,
    warmup_steps=50,
    total_steps=500,
    batch_size=20,
    seed=2,
    checkpoint_interval=250,
)


@pytest.fixture(scope="session")
def tiny_setup():
    """Small untrained model over the toy vocabulary, for structural tests."""
    corpus = toy_corpus()
    vocab = toy_vocab(corpus)
    cfg = ModelConfig(
        d_model=16,
        n_layers=2,
        n_heads=2,
        d_ff=32,
        vocab_size=vocab.size,
        max_positions=64,
        max_utterances=16,
        dropout=0.0,
    )
    params = init_params(cfg, seed=0)
    encoded = [encode_dialogue(s, vocab, cfg.max_positions) for s in corpus]
    return params, cfg, vocab, corpus, encoded


@pytest.fixture(scope="session")
def trained_toy(tmp_path_factory):
    """Toy model trained to memorize the 20-dialogue corpus (runs once)."""
    corpus = toy_corpus()
    vocab = toy_vocab(corpus)
    model_cfg = ModelConfig(**TOY_MODEL_CFG)
    train_cfg = TrainConfig(**TOY_TRAIN_CFG)
    encoded = [encode_dialogue(s, vocab, model_cfg.max_positions) for s in corpus]
    out_dir = tmp_path_factory.mktemp("toy_run")
    t0 = time.monotonic()
    result = train(encoded, vocab, model_cfg, train_cfg, out_dir)
    elapsed = time.monotonic() - t0
    return {
        "params": result["params"],
        "model_cfg": model_cfg,
        "train_cfg": train_cfg,
        "vocab": vocab,
        "corpus": corpus,
        "encoded": encoded,
        "records": result["records"],
        "ckpt": result["final_checkpoint"],
        "out_dir": out_dir,
        "elapsed": elapsed,
    }


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
