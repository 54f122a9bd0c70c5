"""Synthetic multi-domain image benchmark and manifest I/O.

Classes are geometric prototypes (blob / stripe / checker / ring families,
three frequency variants each, one hue per class); domains are style
renderings applied on top (soft-lit photographic, pencil-like sketch,
color-inverted, heavy speckle). Every pixel is a pure function of
(seed, class, domain, sample index), so datasets regenerate bit-exactly.

The split logic mirrors cross-domain retrieval evaluation: a fraction of
classes is held out of training entirely, one domain becomes the query
side, and a designated gallery domain provides the search set.
"""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ContractError, ManifestError
from .imaging import Image, Rng, read_ppm, write_ppm

SPLITS = ("train", "val", "test_query", "test_gallery")

DOMAIN_STYLES = ("photographic", "sketch", "inverted", "noisy")


@dataclass
class ImageSample:
    """One dataset item; `image` is filled by load_samples, not the manifest."""

    id: str
    class_id: int
    domain_id: int
    split: str
    path: str | None = None
    image: Image | None = None


@dataclass
class DatasetManifest:
    n_classes: int
    n_domains: int
    seen_class_ids: list[int]
    seen_domain_ids: list[int]
    generator_seed: int
    samples: list[ImageSample] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "n_domains": self.n_domains,
            "seen_class_ids": list(self.seen_class_ids),
            "seen_domain_ids": list(self.seen_domain_ids),
            "generator_seed": self.generator_seed,
            "samples": [
                {"id": s.id, "path": s.path, "class_id": s.class_id,
                 "domain_id": s.domain_id, "split": s.split}
                for s in self.samples
            ],
        }

    def split_samples(self, split: str) -> list[ImageSample]:
        if split not in SPLITS:
            raise ContractError(f"unknown split {split!r}")
        return [s for s in self.samples if s.split == split]


# -- image synthesis --------------------------------------------------------

def _class_palette(class_id: int, n_classes: int) -> np.ndarray:
    hue = class_id / n_classes
    return np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.95))


def _pattern_field(family: int, variant: int, xx: np.ndarray, yy: np.ndarray,
                   phase: float) -> np.ndarray:
    """Intensity in [0, 1] on the (already pose-jittered) coordinate grid."""
    if family == 0:  # blobs
        t = np.zeros_like(xx)
        k = 2 + variant
        for j in range(k):
            ang = phase + 2.0 * np.pi * j / k
            cx, cy = 0.45 * np.cos(ang), 0.45 * np.sin(ang)
            t += np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / 0.055)
        return np.clip(t, 0.0, 1.0)
    if family == 1:  # stripes
        freq = 4.0 + 2.0 * variant
        ang = 0.35 + 0.7 * variant
        proj = xx * np.cos(ang) + yy * np.sin(ang)
        return 0.5 + 0.5 * np.sin(freq * np.pi * proj + phase)
    if family == 2:  # checker
        freq = (2.5 + variant) * np.pi
        return 0.5 + 0.5 * np.sin(freq * xx + phase) * np.sin(freq * yy + phase)
    # rings
    freq = (4.0 + 1.5 * variant) * np.pi
    r = np.sqrt(xx * xx + yy * yy)
    return 0.5 + 0.5 * np.cos(freq * r + phase)


def _render_base(class_id: int, n_classes: int, size: int, rng: Rng
                 ) -> tuple[np.ndarray, np.ndarray]:
    """(pattern field, colored base image) with per-sample pose jitter."""
    family, variant = class_id % 4, class_id // 4
    angle = rng.uniform(-0.22, 0.22)
    scale = rng.uniform(0.9, 1.12)
    dx = rng.uniform(-0.1, 0.1)
    dy = rng.uniform(-0.1, 0.1)
    # Phase is anchored per class with small jitter; a free phase would wash
    # out the mean spatial structure linear probes rely on.
    phase = 0.9 * class_id + rng.uniform(-0.45, 0.45)

    axis = np.linspace(-1.0, 1.0, size)
    gx, gy = np.meshgrid(axis, axis)
    ca, sa = np.cos(angle), np.sin(angle)
    xx = (gx * ca - gy * sa) * scale + dx
    yy = (gx * sa + gy * ca) * scale + dy

    t = _pattern_field(family, variant, xx, yy, phase)
    color = _class_palette(class_id, n_classes)
    bg = 0.94
    base = bg + (color[None, None, :] - bg) * t[:, :, None]
    return t, np.clip(base, 0.0, 1.0)


def _style_photographic(t, base, rng: Rng) -> np.ndarray:
    size = base.shape[0]
    axis = np.linspace(-1.0, 1.0, size)
    gx, gy = np.meshgrid(axis, axis)
    ang = rng.uniform(0.0, 2.0 * np.pi)
    light = 0.78 + 0.22 * (gx * np.cos(ang) + gy * np.sin(ang)) / np.sqrt(2.0)
    out = base * light[:, :, None]
    out = out + rng.normal(0.0, 0.015, base.shape)
    return out


def _style_sketch(t, base, rng: Rng) -> np.ndarray:
    dty, dtx = np.gradient(t)
    mag = np.hypot(dtx, dty)
    strokes = np.clip(mag * rng.uniform(5.0, 7.0), 0.0, 1.0)
    ink = 0.82 + rng.uniform(-0.06, 0.06)
    out = 1.0 - strokes[:, :, None] * ink
    return out + rng.normal(0.0, 0.01, base.shape)


def _style_inverted(t, base, rng: Rng) -> np.ndarray:
    return np.roll(1.0 - base, 1, axis=2)


def _style_noisy(t, base, rng: Rng) -> np.ndarray:
    # Heavy speckle plus a per-channel gain: the gain shifts the color
    # statistics a pixel-level probe leans on, the speckle buries texture.
    gains = rng.uniform(0.45, 1.3, 3)
    speckle = rng.uniform(0.35, 1.65, base.shape)
    return base * speckle * gains[None, None, :]


_STYLES = (_style_photographic, _style_sketch, _style_inverted, _style_noisy)


def render_sample(class_id: int, domain_id: int, n_classes: int, size: int,
                  rng: Rng) -> Image:
    """One synthetic image; every random draw comes from the given stream."""
    t, base = _render_base(class_id, n_classes, size, rng)
    style = _STYLES[domain_id % len(_STYLES)]
    return Image(np.clip(style(t, base, rng), 0.0, 1.0))


def generate_dataset(out_dir, n_classes: int = 12, n_domains: int = 4,
                     per_cell: int = 50, image_size: int = 36,
                     seed: int = 0) -> DatasetManifest:
    """Render per_cell images for every (class, domain) cell under out_dir.

    Files land in out_dir/images/<id>.ppm; the returned manifest records
    relative paths and marks everything as train (split assignment is a
    separate step). Identical arguments reproduce identical bytes.
    """
    if n_classes < 2:
        raise ContractError(f"generate_dataset: n_classes must be >= 2, got {n_classes}")
    if n_domains < 2:
        raise ContractError(f"generate_dataset: n_domains must be >= 2, got {n_domains}")
    if per_cell < 1:
        raise ContractError(f"generate_dataset: per_cell must be >= 1, got {per_cell}")
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)

    root = Rng(seed)
    samples = []
    for c in range(n_classes):
        for d in range(n_domains):
            cell_rng = root.split(c).split(d)
            for i in range(per_cell):
                img = render_sample(c, d, n_classes, image_size,
                                    cell_rng.split(i))
                sid = f"c{c:02d}_d{d}_{i:03d}"
                rel = f"images/{sid}.ppm"
                write_ppm(img, os.path.join(out_dir, rel))
                samples.append(ImageSample(id=sid, class_id=c, domain_id=d,
                                           split="train", path=rel))
    return DatasetManifest(
        n_classes=n_classes, n_domains=n_domains,
        seen_class_ids=list(range(n_classes)),
        seen_domain_ids=list(range(n_domains)),
        generator_seed=seed, samples=samples)


# -- splits -----------------------------------------------------------------

def make_ucdr_split(manifest: DatasetManifest, unseen_fraction: float = 1 / 3,
                    holdout_domain: int = 1, gallery_domain: int = 0,
                    seed: int = 0) -> DatasetManifest:
    """Assign splits for cross-domain retrieval with unseen classes.

    Held-out domain -> test_query (all classes; adaptation needs the full
    unlabeled set). Gallery domain -> test_gallery for unseen classes; its
    seen-class images are split half/half between train and test_gallery so
    the generalized protocol has seen-class distractors disjoint from
    training. Remaining domains: seen classes train, unseen classes parked
    in val.
    """
    n_unseen = round(unseen_fraction * manifest.n_classes)
    if n_unseen < 1:
        raise ContractError(
            f"make_ucdr_split: unseen fraction {unseen_fraction} yields no "
            f"unseen class")
    if n_unseen >= manifest.n_classes:
        raise ContractError(
            f"make_ucdr_split: unseen fraction {unseen_fraction} leaves no "
            f"seen class")
    if not 0 <= holdout_domain < manifest.n_domains:
        raise ContractError(
            f"make_ucdr_split: holdout domain {holdout_domain} out of range")
    if not 0 <= gallery_domain < manifest.n_domains:
        raise ContractError(
            f"make_ucdr_split: gallery domain {gallery_domain} out of range")
    if holdout_domain == gallery_domain:
        raise ContractError(
            "make_ucdr_split: holdout and gallery domain must differ")

    rng = Rng(seed)
    unseen = set(int(c) for c in
                 rng.split(0).choice(manifest.n_classes, n_unseen))
    seen = [c for c in range(manifest.n_classes) if c not in unseen]

    out = []
    for s in manifest.samples:
        if s.domain_id == holdout_domain:
            split = "test_query"
        elif s.domain_id == gallery_domain:
            split = "test_gallery" if s.class_id in unseen else None  # later
        else:
            split = "train" if s.class_id not in unseen else "val"
        out.append(replace(s, split=split or s.split))

    # Seen-class cells of the gallery domain: half train, half gallery.
    cell_rng = rng.split(1)
    for c in seen:
        members = [i for i, s in enumerate(out)
                   if s.domain_id == gallery_domain and s.class_id == c]
        order = cell_rng.split(c).permutation(len(members))
        cut = (len(members) + 1) // 2
        for rank, j in enumerate(order):
            out[members[j]] = replace(out[members[j]],
                                      split="train" if rank < cut
                                      else "test_gallery")

    return DatasetManifest(
        n_classes=manifest.n_classes, n_domains=manifest.n_domains,
        seen_class_ids=seen,
        seen_domain_ids=[d for d in range(manifest.n_domains)
                         if d != holdout_domain],
        generator_seed=manifest.generator_seed, samples=out)


# -- manifest I/O -----------------------------------------------------------

def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w") as f:
        json.dump(manifest.to_dict(), f, indent=2)
        f.write("\n")


def _require(d: dict, key: str, kind, where: str):
    if key not in d:
        raise ManifestError(f"{where}: missing field {key!r}")
    v = d[key]
    if kind is int and isinstance(v, bool) or not isinstance(v, kind):
        raise ManifestError(f"{where}: field {key!r} must be {kind.__name__}")
    return v


def load_manifest(path) -> DatasetManifest:
    """Parse and re-validate a manifest; fails on any invariant violation."""
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}: not valid JSON ({e})") from None
    root = os.path.dirname(os.path.abspath(path))

    n_classes = _require(raw, "n_classes", int, "manifest")
    n_domains = _require(raw, "n_domains", int, "manifest")
    seen_classes = _require(raw, "seen_class_ids", list, "manifest")
    seen_domains = _require(raw, "seen_domain_ids", list, "manifest")
    gen_seed = _require(raw, "generator_seed", int, "manifest")
    entries = _require(raw, "samples", list, "manifest")

    unseen = set(range(n_classes)) - set(seen_classes)
    samples = []
    ids = set()
    for entry in entries:
        sid = entry.get("id", "<missing id>")
        where = f"sample {sid}"
        _require(entry, "id", str, where)
        path_rel = _require(entry, "path", str, where)
        class_id = _require(entry, "class_id", int, where)
        domain_id = _require(entry, "domain_id", int, where)
        split = _require(entry, "split", str, where)
        if sid in ids:
            raise ManifestError(f"{where}: duplicate id")
        ids.add(sid)
        if not 0 <= class_id < n_classes:
            raise ManifestError(
                f"{where}: class_id {class_id} outside [0, {n_classes})")
        if not 0 <= domain_id < n_domains:
            raise ManifestError(
                f"{where}: domain_id {domain_id} outside [0, {n_domains})")
        if split not in SPLITS:
            raise ManifestError(f"{where}: unknown split {split!r}")
        if split == "train" and class_id in unseen:
            raise ManifestError(
                f"{where}: train sample carries unseen class {class_id}")
        full = os.path.join(root, path_rel)
        if not os.path.isfile(full):
            raise ManifestError(f"{where}: image file not found: {full}")
        samples.append(ImageSample(id=sid, class_id=class_id,
                                   domain_id=domain_id, split=split,
                                   path=path_rel))
    return DatasetManifest(n_classes=n_classes, n_domains=n_domains,
                           seen_class_ids=list(seen_classes),
                           seen_domain_ids=list(seen_domains),
                           generator_seed=gen_seed, samples=samples)


def load_samples(manifest: DatasetManifest, root, split: str | None = None
                 ) -> list[ImageSample]:
    """Materialize pixel data for (a split of) the manifest."""
    chosen = manifest.samples if split is None else manifest.split_samples(split)
    out = []
    for s in chosen:
        full = os.path.join(root, s.path)
        if not os.path.isfile(full):
            raise ManifestError(f"sample {s.id}: image file not found: {full}")
        out.append(replace(s, image=read_ppm(full)))
    return out
