"""Shared fixtures: a tiny throwaway dataset and the default benchmark.

The benchmark fixtures are session-scoped because generating 2400 images
and pretraining the starting checkpoint takes tens of seconds; every test
that needs them shares one copy.
"""

import sys

import numpy as np
import pytest

from ttt_retrieval import (
    generate_dataset,
    init_params,
    load_samples,
    make_ucdr_split,
    pretrain,
    save_manifest,
)
from ttt_retrieval.imaging import Image, Rng
from ttt_retrieval.model import ModelDims


def random_image(seed: int, h: int = 9, w: int = 9) -> Image:
    rng = np.random.default_rng(seed)
    return Image(rng.uniform(0.0, 1.0, (h, w, 3)))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """6 classes x 3 domains x 4 samples at 18px, split included."""
    root = tmp_path_factory.mktemp("tiny_ds")
    manifest = generate_dataset(root, n_classes=6, n_domains=3, per_cell=4,
                                image_size=18, seed=11)
    manifest = make_ucdr_split(manifest, unseen_fraction=1 / 3,
                               holdout_domain=1, gallery_domain=0, seed=11)
    save_manifest(manifest, root / "manifest.json")
    return manifest, root


@pytest.fixture(scope="session")
def bench_dataset(tmp_path_factory):
    """The default benchmark: 12 classes x 4 domains x 50 per cell, 36px."""
    root = tmp_path_factory.mktemp("bench_ds")
    manifest = generate_dataset(root, n_classes=12, n_domains=4, per_cell=50,
                                image_size=36, seed=0)
    manifest = make_ucdr_split(manifest, unseen_fraction=1 / 3,
                               holdout_domain=1, gallery_domain=0, seed=0)
    save_manifest(manifest, root / "manifest.json")
    return manifest, root


@pytest.fixture(scope="session")
def bench_params(bench_dataset):
    """Supervised starting checkpoint for the benchmark (defaults recipe)."""
    manifest, root = bench_dataset
    train = load_samples(manifest, root, "train")
    seen = sorted(manifest.seen_class_ids)
    index = {c: i for i, c in enumerate(seen)}
    pairs = [(s.image, index[s.class_id]) for s in train]
    dims = ModelDims(in_dim=train[0].image.flat().size, hidden=256,
                     embed_dim=64, head_k=4, n_classes=len(seen))
    params = init_params(0, dims)
    return pretrain(params, pairs, epochs=30, lr=0.01, seed=0, batch_size=64)


@pytest.fixture
def small_params():
    dims = ModelDims(in_dim=12, hidden=10, embed_dim=6, head_k=4, n_classes=3)
    return init_params(5, dims)


def seeded_rng(seed: int) -> Rng:
    return Rng(seed)


def pytest_terminal_summary(terminalreporter):
    """Echo the one-line acceptance verdicts collected during the run."""
    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None) if mod else None
    if verdicts:
        terminalreporter.section("acceptance verdicts")
        for line in verdicts:
            terminalreporter.write_line(line)
