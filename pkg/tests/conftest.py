"""Shared fixtures: toy scenes, a toy trained model, and the golden corpus."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # expose oracles.py

from scenecap.model import CaptionModel, ModelConfig
from scenecap.pointcloud import AnnotatedObject, PointCloud
from scenecap.text_encoder import CaptionSequence, build_vocab
from scenecap.trainer import TrainConfig, fit

DATA_DIR = Path(__file__).parent / "data"

TOY_CAPTIONS = [
    "a red chair near the wall",
    "a blue table in the corner",
    "a green sofa by the window",
    "a small bed in the room",
    "a wooden desk with a lamp",
    "a tall cabinet near the door",
    "a round table in the center",
    "a soft rug on the floor",
]


TOY_FEATURE_DIM = 8


def make_toy_cloud(i: int, n_points: int = 48, rng=None) -> PointCloud:
    """Scene i: a distinctive feature direction (one-hot-ish) plus its own scale.

    Identity must live in the direction of the feature columns, not their
    magnitude: the encoder's layer norms erase magnitude codes.
    """
    rng = rng or np.random.default_rng(1000 + i)
    coords = rng.normal(scale=0.2 + 0.1 * i, size=(n_points, 3))
    feats = rng.normal(scale=0.05, size=(n_points, TOY_FEATURE_DIM))
    feats[:, i % TOY_FEATURE_DIM] += 1.0
    box_center = coords.mean(axis=0)
    box_size = np.maximum(coords.max(axis=0) - coords.min(axis=0), 0.1)
    caption = TOY_CAPTIONS[i % len(TOY_CAPTIONS)]
    vocab_words = sorted({w for w in caption.split() if len(w) > 2})
    obj = AnnotatedObject(object_id=f"obj{i}",
                          aabb=np.concatenate([box_center, box_size]),
                          labels=set(vocab_words[:2]),
                          reference_captions=[caption])
    return PointCloud(coords=coords, features=feats, objects=[obj], seed_hint=i)


def toy_model_config(**overrides) -> ModelConfig:
    base = dict(feature_dim=TOY_FEATURE_DIM, d_model=32, d_patch=32, d_shared=16,
                m_task=2, m_patches=8, k_neighbors=4, n_layers=1, n_heads=4,
                text_layers=1, max_len=12, init_seed=3)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def toy_dataset():
    clouds = [make_toy_cloud(i) for i in range(8)]
    vocab = build_vocab(TOY_CAPTIONS)
    pairs = [(c, CaptionSequence.from_text(t, vocab))
             for c, t in zip(clouds, TOY_CAPTIONS)]
    return clouds, vocab, pairs


@pytest.fixture(scope="session")
def fresh_model(toy_dataset):
    _, vocab, _ = toy_dataset
    return CaptionModel(toy_model_config(), vocab)


@pytest.fixture(scope="session")
def trained_model(toy_dataset):
    """A lightly trained toy model shared by decoder/TTS tests."""
    clouds, vocab, pairs = toy_dataset
    model = CaptionModel(toy_model_config(), vocab)
    fit(model, pairs, TrainConfig(batch_size=8, epochs=120, lr=3e-3, seed=1))
    return model


@pytest.fixture()
def golden_corpus():
    from scenecap.metrics import load_corpus_jsonl

    return load_corpus_jsonl(DATA_DIR / "golden_corpus.jsonl")
