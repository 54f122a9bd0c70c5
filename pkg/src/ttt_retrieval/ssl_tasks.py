"""Self-supervised batch construction and losses.

Three objectives, all label-free from the caller's point of view:
rotation prediction (4 classes), jigsaw permutation prediction (one class
per permutation in a fixed set), and a two-view decorrelation loss on the
embedding. Labels, where they exist, are manufactured from the applied
transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tape, Tensor
from .errors import ContractError, DegenerateBatchError, ShapeError
from .imaging import (
    AugmentConfig,
    Image,
    Rng,
    assemble3x3,
    augment,
    rotate,
    tile3x3,
)
from .model import images_to_tensor

ROTATION_ANGLES = (0, 90, 180, 270)


# -- permutation set --------------------------------------------------------

@dataclass
class PermutationSet:
    """Ordered tile permutations; the list position is the class label."""

    perms: list[tuple[int, ...]]
    seed: int
    min_hamming: int = field(init=False)

    def __post_init__(self):
        seen = set()
        for p in self.perms:
            if sorted(p) != list(range(9)):
                raise ContractError(f"PermutationSet: {p} is not a permutation of 0..8")
            if p in seen:
                raise ContractError(f"PermutationSet: duplicate entry {p}")
            seen.add(p)
        self.min_hamming = _min_pairwise_hamming(self.perms)
        if len(self.perms) > 1 and self.min_hamming < 2:
            raise ContractError(
                f"PermutationSet: min pairwise Hamming {self.min_hamming} < 2")

    def __len__(self) -> int:
        return len(self.perms)


def _min_pairwise_hamming(perms: Sequence[tuple[int, ...]]) -> int:
    # For a single entry there is no pair to constrain; report the maximum.
    if len(perms) < 2:
        return 9
    arr = np.asarray(perms)
    best = 9
    for i in range(len(arr) - 1):
        d = (arr[i + 1:] != arr[i]).sum(axis=1).min()
        best = min(best, int(d))
    return best


def _distinct_random_perms(count: int, rng: Rng) -> np.ndarray:
    """`count` distinct permutations of 0..8, identity excluded, draw order kept."""
    identity = tuple(range(9))
    out: list[tuple[int, ...]] = []
    seen = {identity}
    while len(out) < count:
        batch = np.argsort(rng.uniform(size=(count, 9)), axis=1)
        for row in batch:
            t = tuple(int(v) for v in row)
            if t not in seen:
                seen.add(t)
                out.append(t)
                if len(out) == count:
                    break
    return np.asarray(out)


def generate_permutation_set(size: int = 31, pool: int = 10000,
                             seed: int = 0) -> PermutationSet:
    """Greedy max-min-Hamming selection from a seeded candidate pool.

    The set starts at the identity permutation; each round adds the pool
    candidate farthest (by minimum Hamming distance) from everything chosen
    so far, breaking ties toward the lexicographically smallest candidate.
    """
    if size < 1:
        raise ContractError(f"generate_permutation_set: size must be >= 1, got {size}")
    if size > 362880:
        raise ContractError(f"generate_permutation_set: size {size} exceeds 9!")
    if size > pool + 1:
        raise ContractError(
            f"generate_permutation_set: size {size} needs a pool of at least "
            f"{size - 1}, got {pool}")

    chosen = [tuple(range(9))]
    if size > 1:
        candidates = _distinct_random_perms(pool, Rng(seed))
        # Lexicographic candidate order makes argmax hit the smallest tie.
        candidates = candidates[np.lexsort(candidates.T[::-1])]
        alive = np.ones(len(candidates), dtype=bool)
        min_dist = (candidates != np.asarray(chosen[0])).sum(axis=1)
        while len(chosen) < size:
            masked = np.where(alive, min_dist, -1)
            pick = int(np.argmax(masked))
            alive[pick] = False
            chosen.append(tuple(int(v) for v in candidates[pick]))
            d = (candidates != candidates[pick]).sum(axis=1)
            min_dist = np.minimum(min_dist, d)
    return PermutationSet(chosen, seed=seed)


def save_permutations(ps: PermutationSet, path) -> None:
    """One permutation per line, nine space-separated digits; line = label."""
    with open(path, "w") as f:
        for p in ps.perms:
            f.write(" ".join(str(v) for v in p) + "\n")


def load_permutations(path, seed: int = -1) -> PermutationSet:
    perms = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 9:
                raise ContractError(
                    f"{path}:{lineno}: expected 9 entries, got {len(parts)}")
            try:
                perms.append(tuple(int(v) for v in parts))
            except ValueError:
                raise ContractError(
                    f"{path}:{lineno}: non-integer entry") from None
    if not perms:
        raise ContractError(f"{path}: no permutations found")
    return PermutationSet(perms, seed=seed)


# -- batches ----------------------------------------------------------------

@dataclass
class SslBatch:
    """Inputs plus self-constructed supervision.

    Classification pretexts fill `labels`; the two-view objective fills
    `inputs2` instead and has no labels. `provenance` records, per row, the
    source image id and the transform index applied to it.
    """

    inputs: Tensor
    labels: list[int] | None = None
    inputs2: Tensor | None = None
    provenance: list[tuple[str, int]] = field(default_factory=list)


def _ids_or_positions(ids: Sequence[str] | None, n: int) -> list[str]:
    if ids is None:
        return [str(i) for i in range(n)]
    if len(ids) != n:
        raise ContractError(f"expected {n} ids, got {len(ids)}")
    return list(ids)


def make_rotnet_batch(samples: Sequence[Image], rng: Rng,
                      ids: Sequence[str] | None = None) -> SslBatch:
    """Rotate each image by an independent uniform angle; label = angle index."""
    if not samples:
        raise ContractError("make_rotnet_batch: empty batch")
    names = _ids_or_positions(ids, len(samples))
    rotated, labels, prov = [], [], []
    for j, img in enumerate(samples):
        angle_idx = int(rng.split(j).integers(0, 4))
        rotated.append(rotate(img, ROTATION_ANGLES[angle_idx]))
        labels.append(angle_idx)
        prov.append((names[j], angle_idx))
    return SslBatch(images_to_tensor(rotated), labels=labels, provenance=prov)


def make_jigsaw_batch(samples: Sequence[Image], perms: PermutationSet, rng: Rng,
                      ids: Sequence[str] | None = None) -> SslBatch:
    """Tile, shuffle under a uniform permutation index, reassemble; label = index."""
    if not samples:
        raise ContractError("make_jigsaw_batch: empty batch")
    names = _ids_or_positions(ids, len(samples))
    shuffled, labels, prov = [], [], []
    for j, img in enumerate(samples):
        idx = int(rng.split(j).integers(0, len(perms)))
        shuffled.append(assemble3x3(tile3x3(img), perms.perms[idx]))
        labels.append(idx)
        prov.append((names[j], idx))
    return SslBatch(images_to_tensor(shuffled), labels=labels, provenance=prov)


def make_barlow_batch(samples: Sequence[Image], aug_config: AugmentConfig,
                      rng: Rng, ids: Sequence[str] | None = None) -> SslBatch:
    """Two independently augmented views per image, rows aligned."""
    if len(samples) < 2:
        raise DegenerateBatchError(
            f"make_barlow_batch: need at least 2 samples, got {len(samples)}")
    names = _ids_or_positions(ids, len(samples))
    rng_a, rng_b = rng.split(0), rng.split(1)
    view_a = [augment(img, aug_config, rng_a.split(j))
              for j, img in enumerate(samples)]
    view_b = [augment(img, aug_config, rng_b.split(j))
              for j, img in enumerate(samples)]
    prov = [(name, 0) for name in names]
    return SslBatch(images_to_tensor(view_a), inputs2=images_to_tensor(view_b),
                    provenance=prov)


# -- decorrelation loss -----------------------------------------------------

def barlow_loss(tape: Tape, f1: Tensor, f2: Tensor, lam: float,
                eps: float = 1e-5) -> Tensor:
    """Cross-correlation of standardized views, pushed toward the identity.

    C = Z1^T Z2 / n on standardized columns; the loss charges (1 - C_jj)^2
    on the diagonal and lam * C_jk^2 off it. Built from tape primitives so
    gradients flow to both views.
    """
    if f1.shape != f2.shape:
        raise ShapeError(f"barlow_loss: shape mismatch {f1.shape} vs {f2.shape}")
    if f1.data.ndim != 2:
        raise ShapeError(f"barlow_loss: expected 2-d embeddings, got {f1.shape}")
    if lam < 0:
        raise ContractError(f"barlow_loss: lam must be >= 0, got {lam}")
    n, m = f1.shape
    z1 = tape.standardize_columns(f1, eps)
    z2 = tape.standardize_columns(f2, eps)
    c = tape.scale(tape.matmul(tape.transpose(z1), z2), 1.0 / n)
    e = tape.sub(c, Tensor(np.eye(m)))
    weights = Tensor(np.full((m, m), lam) + (1.0 - lam) * np.eye(m))
    return tape.sum(tape.mul(tape.mul(e, e), weights))
