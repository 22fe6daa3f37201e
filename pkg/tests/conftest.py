from pathlib import Path

import numpy as np
import pytest

from app.models.schemas import ModelArchitecture, TrainConfig
from app.services.corpus import generate_corpus
from app.services.refdata import build_manifest, load_manifest
from app.services.storage import CloudStore
from app.services.trainer import load_training_items


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def toy_arch() -> ModelArchitecture:
    return ModelArchitecture.toy()


@pytest.fixture
def toy_config(toy_arch) -> TrainConfig:
    return TrainConfig(architecture=toy_arch, batch_size=2, epochs=1, top_n_refs=2, degrade_k_train=2, seed=0)


@pytest.fixture
def toy_corpus(tmp_path) -> Path:
    """两类各 4 个形状，完整 64 点，部分 32 点"""
    out = tmp_path / "corpus"
    generate_corpus(["box", "cylinder"], 4, n_points=64, seed=3, out_dir=out, partial_size=32, fmt="xyz")
    return out


@pytest.fixture
def toy_manifest(toy_corpus) -> Path:
    path = toy_corpus.parent / "refs.tsv"
    build_manifest(CloudStore(toy_corpus / "partial").load_all(), CloudStore(toy_corpus / "complete").load_all(),
                   path, k=2, top_n=2, min_cd=0.0, fmt="xyz")
    return path


@pytest.fixture
def toy_items(toy_manifest, toy_config):
    return load_training_items(load_manifest(toy_manifest), toy_config)
