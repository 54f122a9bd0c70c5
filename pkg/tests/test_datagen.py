"""Synthetic dataset generation, split assignment, manifest I/O."""

import json

import numpy as np
import pytest

from ttt_retrieval.datagen import (
    DatasetManifest,
    ImageSample,
    generate_dataset,
    load_manifest,
    load_samples,
    make_ucdr_split,
    render_sample,
    save_manifest,
)
from ttt_retrieval.errors import ContractError, ManifestError
from ttt_retrieval.imaging import Rng


# -- rendering --------------------------------------------------------------

def test_render_sample_deterministic_and_in_range():
    a = render_sample(3, 0, 12, 24, Rng(1))
    b = render_sample(3, 0, 12, 24, Rng(1))
    assert np.array_equal(a.pixels, b.pixels)
    assert a.pixels.shape == (24, 24, 3)
    assert a.pixels.min() >= 0.0 and a.pixels.max() <= 1.0


def test_render_styles_differ_markedly():
    images = [render_sample(2, d, 12, 24, Rng(7)) for d in range(4)]
    for i in range(4):
        for j in range(i + 1, 4):
            gap = np.abs(images[i].pixels - images[j].pixels).mean()
            assert gap > 0.05, f"domains {i} and {j} look alike"


def test_render_classes_differ_within_domain():
    a = render_sample(0, 0, 12, 24, Rng(3))
    b = render_sample(6, 0, 12, 24, Rng(3))
    assert np.abs(a.pixels - b.pixels).mean() > 0.05


# -- generation -------------------------------------------------------------

def test_generate_counts_layout_and_ids(tmp_path):
    manifest = generate_dataset(tmp_path, n_classes=3, n_domains=2,
                                per_cell=2, image_size=12, seed=5)
    assert manifest.n_classes == 3 and manifest.n_domains == 2
    assert len(manifest.samples) == 3 * 2 * 2
    assert manifest.seen_class_ids == list(range(3))
    assert manifest.generator_seed == 5
    cells = {}
    for s in manifest.samples:
        assert s.id == f"c{s.class_id:02d}_d{s.domain_id}_" + s.id[-3:]
        assert s.path == f"images/{s.id}.ppm"
        assert (tmp_path / s.path).is_file()
        assert s.split == "train"
        cells[(s.class_id, s.domain_id)] = cells.get(
            (s.class_id, s.domain_id), 0) + 1
    assert all(v == 2 for v in cells.values())
    assert len(cells) == 6


def test_generate_per_cell_one_counts(tmp_path):
    manifest = generate_dataset(tmp_path, n_classes=4, n_domains=3,
                                per_cell=1, image_size=12, seed=0)
    assert len(manifest.samples) == 12
    assert len(list((tmp_path / "images").glob("*.ppm"))) == 12


def test_generate_is_bit_reproducible(tmp_path):
    a_dir, b_dir = tmp_path / "a", tmp_path / "b"
    ma = generate_dataset(a_dir, n_classes=3, n_domains=2, per_cell=2,
                          image_size=12, seed=9)
    mb = generate_dataset(b_dir, n_classes=3, n_domains=2, per_cell=2,
                          image_size=12, seed=9)
    assert ma.to_dict() == mb.to_dict()
    for s in ma.samples:
        assert (a_dir / s.path).read_bytes() == (b_dir / s.path).read_bytes()
    mc = generate_dataset(tmp_path / "c", n_classes=3, n_domains=2,
                          per_cell=2, image_size=12, seed=10)
    changed = sum((a_dir / s.path).read_bytes()
                  != (tmp_path / "c" / s.path).read_bytes()
                  for s in ma.samples)
    assert changed == len(ma.samples)


def test_generate_contracts(tmp_path):
    with pytest.raises(ContractError):
        generate_dataset(tmp_path, n_classes=1, n_domains=2, per_cell=1,
                         image_size=12, seed=0)
    with pytest.raises(ContractError):
        generate_dataset(tmp_path, n_classes=2, n_domains=1, per_cell=1,
                         image_size=12, seed=0)
    with pytest.raises(ContractError):
        generate_dataset(tmp_path, n_classes=2, n_domains=2, per_cell=0,
                         image_size=12, seed=0)


# -- split assignment -------------------------------------------------------

def test_split_laws(tiny_dataset):
    manifest, _ = tiny_dataset
    seen = set(manifest.seen_class_ids)
    unseen = set(range(manifest.n_classes)) - seen
    assert len(unseen) == 2  # round(6 / 3)
    assert manifest.seen_domain_ids == [0, 2]  # holdout domain 1 excluded
    by_split = {}
    for s in manifest.samples:
        by_split.setdefault(s.split, []).append(s)
    for s in by_split["train"]:
        assert s.class_id in seen
        assert s.domain_id != 1
    assert all(s.domain_id == 1 for s in by_split["test_query"])
    assert {s.class_id for s in by_split["test_query"]} == set(range(6))
    assert all(s.domain_id == 0 for s in by_split["test_gallery"])
    for s in by_split["val"]:
        assert s.class_id in unseen
        assert s.domain_id not in (0, 1)
    query_ids = {s.id for s in by_split["test_query"]}
    gallery_ids = {s.id for s in by_split["test_gallery"]}
    assert not query_ids & gallery_ids


def test_split_gallery_domain_seen_cells_half_and_half(tiny_dataset):
    manifest, _ = tiny_dataset
    seen = set(manifest.seen_class_ids)
    for c in seen:
        cell = [s for s in manifest.samples
                if s.domain_id == 0 and s.class_id == c]
        splits = sorted(s.split for s in cell)
        assert splits == ["test_gallery", "test_gallery", "train", "train"]
    unseen = set(range(6)) - seen
    for c in unseen:
        cell = [s for s in manifest.samples
                if s.domain_id == 0 and s.class_id == c]
        assert all(s.split == "test_gallery" for s in cell)


def test_split_odd_cell_puts_extra_sample_in_train(tmp_path):
    manifest = generate_dataset(tmp_path, n_classes=3, n_domains=2,
                                per_cell=3, image_size=12, seed=2)
    split = make_ucdr_split(manifest, unseen_fraction=1 / 3,
                            holdout_domain=1, gallery_domain=0, seed=2)
    for c in split.seen_class_ids:
        cell = [s for s in split.samples
                if s.domain_id == 0 and s.class_id == c]
        counts = sorted(s.split for s in cell)
        assert counts == ["test_gallery", "train", "train"]


def test_split_is_deterministic_and_seed_sensitive(tmp_path):
    manifest = generate_dataset(tmp_path, n_classes=6, n_domains=3,
                                per_cell=2, image_size=12, seed=4)
    a = make_ucdr_split(manifest, seed=1)
    b = make_ucdr_split(manifest, seed=1)
    assert a.to_dict() == b.to_dict()
    landed = {tuple(make_ucdr_split(manifest, seed=s).seen_class_ids)
              for s in range(8)}
    assert len(landed) > 1  # the unseen draw actually depends on the seed


def test_split_contracts(tmp_path):
    manifest = generate_dataset(tmp_path, n_classes=4, n_domains=3,
                                per_cell=1, image_size=12, seed=6)
    with pytest.raises(ContractError, match="no unseen"):
        make_ucdr_split(manifest, unseen_fraction=0.01)
    with pytest.raises(ContractError, match="no seen"):
        make_ucdr_split(manifest, unseen_fraction=1.0)
    with pytest.raises(ContractError, match="out of range"):
        make_ucdr_split(manifest, holdout_domain=3)
    with pytest.raises(ContractError, match="out of range"):
        make_ucdr_split(manifest, gallery_domain=-1)
    with pytest.raises(ContractError, match="must differ"):
        make_ucdr_split(manifest, holdout_domain=0, gallery_domain=0)


# -- manifest i/o -----------------------------------------------------------

def test_manifest_schema_and_roundtrip(tiny_dataset, tmp_path):
    manifest, root = tiny_dataset
    d = manifest.to_dict()
    assert set(d) == {"n_classes", "n_domains", "seen_class_ids",
                      "seen_domain_ids", "generator_seed", "samples"}
    assert set(d["samples"][0]) == {"id", "path", "class_id", "domain_id",
                                    "split"}
    back = load_manifest(root / "manifest.json")
    assert back.to_dict() == d


def _write_edited(root, tmp_path, edit):
    raw = json.loads((root / "manifest.json").read_text())
    edit(raw)
    out = root / "edited_manifest.json"  # same dir so image paths resolve
    out.write_text(json.dumps(raw))
    return out


@pytest.mark.parametrize("edit,fragment", [
    (lambda r: r["samples"][0].update(class_id=99), "class_id 99"),
    (lambda r: r["samples"][0].update(domain_id=-1), "domain_id -1"),
    (lambda r: r["samples"][0].update(split="holdout"), "unknown split"),
    (lambda r: r["samples"][1].update(id=r["samples"][0]["id"]),
     "duplicate id"),
    (lambda r: r["samples"][0].pop("path"), "missing field"),
    (lambda r: r["samples"][0].update(path="images/ghost.ppm"), "not found"),
    (lambda r: r.pop("generator_seed"), "missing field"),
    (lambda r: r.update(n_classes="six"), "must be int"),
])
def test_manifest_validation_errors(tiny_dataset, tmp_path, edit, fragment):
    manifest, root = tiny_dataset
    path = _write_edited(root, tmp_path, edit)
    try:
        with pytest.raises(ManifestError, match=fragment):
            load_manifest(path)
    finally:
        path.unlink()


def test_manifest_rejects_unseen_class_in_train(tiny_dataset):
    manifest, root = tiny_dataset
    unseen = (set(range(manifest.n_classes))
              - set(manifest.seen_class_ids)).pop()

    def edit(raw):
        victim = next(s for s in raw["samples"]
                      if s["class_id"] == unseen and s["split"] == "val")
        victim["split"] = "train"

    path = _write_edited(root, None, edit)
    try:
        with pytest.raises(ManifestError, match="unseen class"):
            load_manifest(path)
    finally:
        path.unlink()


def test_manifest_rejects_invalid_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ManifestError, match="not valid JSON"):
        load_manifest(path)


def test_load_samples_filters_and_fills_pixels(tiny_dataset):
    manifest, root = tiny_dataset
    train = load_samples(manifest, root, "train")
    assert train
    assert all(s.split == "train" for s in train)
    assert all(s.image is not None and s.image.pixels.shape == (18, 18, 3)
               for s in train)
    everything = load_samples(manifest, root)
    assert len(everything) == len(manifest.samples)
    with pytest.raises(ContractError):
        load_samples(manifest, root, "holdout")


def test_load_samples_missing_file_names_sample(tmp_path):
    sample = ImageSample(id="s0", class_id=0, domain_id=0, split="train",
                         path="images/s0.ppm")
    manifest = DatasetManifest(n_classes=2, n_domains=2, seen_class_ids=[0, 1],
                               seen_domain_ids=[0, 1], generator_seed=0,
                               samples=[sample])
    with pytest.raises(ManifestError, match="s0"):
        load_samples(manifest, tmp_path)


# -- probe oracle: the generator must induce a measurable domain shift ------

def _ridge_probe(train_x, train_y, n_classes, lam=10.0):
    x = train_x - train_x.mean(axis=0)
    x = np.hstack([x, np.ones((len(x), 1))])
    onehot = np.eye(n_classes)[train_y]
    w = np.linalg.solve(x.T @ x + lam * np.eye(x.shape[1]), x.T @ onehot)
    mean = train_x.mean(axis=0)

    def predict(test_x):
        z = np.hstack([test_x - mean, np.ones((len(test_x), 1))])
        return (z @ w).argmax(axis=1)

    return predict


def test_linear_probe_shows_domain_shift(bench_dataset):
    manifest, root = bench_dataset
    samples = load_samples(manifest, root)
    by_domain = {}
    for s in samples:
        by_domain.setdefault(s.domain_id, []).append(s)
    # Half of domain 0 trains the probe; the rest of domain 0 measures
    # within-domain accuracy, full other domains measure transfer.
    train, held = [], []
    per_class_seen = {}
    for s in sorted(by_domain[0], key=lambda s: s.id):
        c = per_class_seen.get(s.class_id, 0)
        per_class_seen[s.class_id] = c + 1
        (train if c < 25 else held).append(s)
    predict = _ridge_probe(
        np.stack([s.image.flat() for s in train]),
        np.array([s.class_id for s in train]), manifest.n_classes)

    def accuracy(group):
        got = predict(np.stack([s.image.flat() for s in group]))
        return float(np.mean(got == np.array([s.class_id for s in group])))

    within = accuracy(held)
    crosses = {d: accuracy(by_domain[d])
               for d in range(1, manifest.n_domains)}
    assert within >= 0.8, f"within-domain accuracy {within:.3f}"
    # Styles 1 (strokes) and 2 (negation) restructure the pixels outright,
    # so the probe must lose at least 0.15 on each. Style 3 keeps the base
    # rendering under multiplicative noise and a pixel probe partially
    # carries over, so it only has to land strictly below within-domain.
    for d in (1, 2):
        assert within - crosses[d] >= 0.15, (
            f"domain {d}: within {within:.3f} vs cross {crosses[d]:.3f}")
    assert crosses[3] < within
    mean_cross = float(np.mean(list(crosses.values())))
    assert within - mean_cross >= 0.15, (
        f"within {within:.3f} vs mean cross {mean_cross:.3f}")
