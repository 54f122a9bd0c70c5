"""Nearest-neighbour retrieval in the embedding space and its metrics.

The gallery is embedded once (no augmentation), queries rank gallery items
by squared Euclidean distance (cosine available), and quality is reported
as mAP@k / Prec@k under two search-set protocols: unseen classes only, or
seen and unseen mixed. A cross-dataset harness runs the same evaluation
before and after adaptation on a foreign dataset.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tape
from .errors import ContractError, ProtocolError, ShapeError
from .model import ModelParams, embed, images_to_tensor
from .optimizer import LossTrace, PixelsOnly, TTTConfig, run_ttt, strip_labels
from .ssl_tasks import PermutationSet

EMBED_CHUNK = 64  # fixed chunk size keeps results independent of worker count

PROTOCOLS = ("non_generalized", "generalized")


@dataclass
class EmbeddingIndex:
    """Gallery embeddings with the metadata retrieval metrics need."""

    vectors: np.ndarray             # (G, m)
    class_ids: np.ndarray           # (G,)
    domain_ids: np.ndarray          # (G,)
    seen_flags: np.ndarray          # (G,) bool
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        self.domain_ids = np.asarray(self.domain_ids, dtype=np.int64)
        self.seen_flags = np.asarray(self.seen_flags, dtype=bool)
        g = len(self.vectors)
        if g < 1:
            raise ContractError("EmbeddingIndex: empty index")
        if self.vectors.ndim != 2:
            raise ShapeError(f"EmbeddingIndex: vectors must be 2-d, got "
                             f"{self.vectors.shape}")
        for name in ("class_ids", "domain_ids", "seen_flags"):
            if len(getattr(self, name)) != g:
                raise ContractError(
                    f"EmbeddingIndex: {name} has {len(getattr(self, name))} "
                    f"entries for {g} vectors")
        if self.ids and len(self.ids) != g:
            raise ContractError(
                f"EmbeddingIndex: ids has {len(self.ids)} entries for {g} vectors")
        if not np.isfinite(self.vectors).all():
            raise ContractError("EmbeddingIndex: non-finite embedding values")

    def __len__(self) -> int:
        return len(self.vectors)


def _embed_images(params: ModelParams, images: Sequence) -> np.ndarray:
    tape = Tape()
    return embed(tape, params, images_to_tensor(images)).data


def embed_gallery(params: ModelParams, samples: Sequence,
                  seen_class_ids: Iterable[int] = (),
                  workers: int = 1) -> EmbeddingIndex:
    """Embed samples deterministically (no augmentation), metadata carried over.

    Work is cut into fixed-size chunks before any threading decision, so the
    result is bit-identical for any worker count.
    """
    if not samples:
        raise ContractError("embed_gallery: no samples")
    seen = set(int(c) for c in seen_class_ids)
    chunks = [samples[i:i + EMBED_CHUNK]
              for i in range(0, len(samples), EMBED_CHUNK)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(
                lambda ch: _embed_images(params, [s.image for s in ch]), chunks))
    else:
        parts = [_embed_images(params, [s.image for s in ch]) for ch in chunks]
    return EmbeddingIndex(
        vectors=np.concatenate(parts, axis=0),
        class_ids=[s.class_id for s in samples],
        domain_ids=[s.domain_id for s in samples],
        seen_flags=[s.class_id in seen for s in samples],
        ids=[s.id for s in samples],
    )


def retrieve(index: EmbeddingIndex, query_f: np.ndarray, k: int,
             metric: str = "sq_euclidean") -> list[int]:
    """Positions of the min(k, G) nearest gallery vectors, nearest first.

    Exact ties are broken by ascending gallery position. Selection is done
    by value partitioning, so only the chosen prefix is ever sorted.
    """
    if k < 1:
        raise ContractError(f"retrieve: k must be >= 1, got {k}")
    q = np.asarray(query_f, dtype=np.float64)
    m = index.vectors.shape[1]
    if q.shape != (m,):
        raise ShapeError(f"retrieve: query shape {q.shape}, index expects ({m},)")
    if metric == "sq_euclidean":
        diff = index.vectors - q[None, :]
        dist = np.einsum("ij,ij->i", diff, diff)
    elif metric == "cosine":
        norms = np.linalg.norm(index.vectors, axis=1) * np.linalg.norm(q)
        dots = index.vectors @ q
        sim = np.divide(dots, norms, out=np.zeros_like(dots), where=norms > 0)
        dist = 1.0 - sim
    else:
        raise ContractError(f"retrieve: unknown metric {metric!r}")

    g = len(dist)
    kk = min(k, g)
    threshold = np.partition(dist, kk - 1)[kk - 1]
    below = np.flatnonzero(dist < threshold)
    at = np.flatnonzero(dist == threshold)
    chosen = np.concatenate([below, at[:kk - below.size]])
    order = np.lexsort((chosen, dist[chosen]))
    return [int(p) for p in chosen[order]]


def precision_at_k(relevance: Sequence[int], k: int) -> float:
    """Fraction of relevant items among the first k."""
    if k < 1:
        raise ContractError(f"precision_at_k: k must be >= 1, got {k}")
    if k > len(relevance):
        raise ContractError(
            f"precision_at_k: k={k} exceeds list length {len(relevance)}")
    return float(sum(1 for r in relevance[:k] if r)) / k


def average_precision_at_k(relevance: Sequence[int], k: int,
                           total_relevant: int) -> float:
    """AP@k with the perfect-prefix normalization max(1, min(R, k)).

    R (total_relevant) counts relevant items in the whole active search
    set, of which the list is the retrieved prefix. R = 0 scores 0.
    """
    if k < 1:
        raise ContractError(f"average_precision_at_k: k must be >= 1, got {k}")
    found = sum(1 for r in relevance if r)
    if total_relevant < 0 or total_relevant < found:
        raise ContractError(
            f"average_precision_at_k: total_relevant={total_relevant} "
            f"inconsistent with {found} relevant entries in the list")
    if total_relevant == 0:
        return 0.0
    hits = 0
    acc = 0.0
    for i, r in enumerate(relevance[:k], start=1):
        if r:
            hits += 1
            acc += hits / i
    return acc / max(1, min(total_relevant, k))


@dataclass
class PerQuery:
    id: str
    ap: float
    prec: float


@dataclass
class MetricsReport:
    """Aggregate metrics (means of the per-query records)."""

    protocol: str
    k: int
    map_at_k: float
    prec_at_k: float
    per_query: list[PerQuery] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "k": self.k,
            "map_at_k": self.map_at_k,
            "prec_at_k": self.prec_at_k,
            "per_query": [{"id": q.id, "ap": q.ap, "prec": q.prec}
                          for q in self.per_query],
        }

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")


def report_from_dict(d: dict) -> MetricsReport:
    return MetricsReport(
        protocol=d["protocol"], k=d["k"], map_at_k=d["map_at_k"],
        prec_at_k=d["prec_at_k"],
        per_query=[PerQuery(q["id"], q["ap"], q["prec"])
                   for q in d["per_query"]])


def evaluate_protocol(params: ModelParams, queries: Sequence,
                      gallery: Sequence, mode: str,
                      seen_class_ids: Iterable[int], k: int = 200,
                      workers: int = 1, metric: str = "sq_euclidean"
                      ) -> MetricsReport:
    """Rank the gallery for every query and average AP@k / Prec@k.

    mode selects the active search set: non_generalized drops seen-class
    gallery items, generalized keeps everything. Relevance is class
    equality; R is counted inside the active set. Queries must come from a
    single domain that the gallery does not contain.
    """
    if mode not in PROTOCOLS:
        raise ContractError(f"evaluate_protocol: unknown mode {mode!r}")
    if not queries:
        raise ProtocolError("evaluate_protocol: no queries")
    if not gallery:
        raise ProtocolError("evaluate_protocol: empty gallery")
    qdomains = {s.domain_id for s in queries}
    if len(qdomains) != 1:
        raise ProtocolError(
            f"evaluate_protocol: queries span domains {sorted(qdomains)}")
    gdomains = {s.domain_id for s in gallery}
    if qdomains & gdomains:
        raise ProtocolError(
            f"evaluate_protocol: query domain {qdomains.pop()} also present "
            f"in the gallery")

    seen = set(int(c) for c in seen_class_ids)
    if mode == "non_generalized":
        active = [s for s in gallery if s.class_id not in seen]
    else:
        active = list(gallery)
    if not active:
        raise ProtocolError(
            "evaluate_protocol: gallery is empty after the protocol filter")

    index = embed_gallery(params, active, seen, workers=workers)
    qvecs = embed_gallery(params, queries, seen, workers=workers)
    counts = {c: int(np.sum(index.class_ids == c))
              for c in set(int(s.class_id) for s in queries)}

    def one(i: int) -> PerQuery:
        positions = retrieve(index, qvecs.vectors[i], k, metric=metric)
        qc = int(qvecs.class_ids[i])
        rel = [1 if index.class_ids[p] == qc else 0 for p in positions]
        ap = average_precision_at_k(rel, k, counts[qc])
        prec = precision_at_k(rel, min(k, len(rel)))
        return PerQuery(id=qvecs.ids[i], ap=ap, prec=prec)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_query = list(pool.map(one, range(len(queries))))
    else:
        per_query = [one(i) for i in range(len(queries))]

    return MetricsReport(
        protocol=mode, k=k,
        map_at_k=float(np.mean([q.ap for q in per_query])),
        prec_at_k=float(np.mean([q.prec for q in per_query])),
        per_query=per_query)


@dataclass
class CrossDatasetResult:
    """Evaluation on a foreign dataset before and after adaptation."""

    before: MetricsReport
    after: MetricsReport
    delta_map: float
    delta_prec: float
    trace: LossTrace | None = None


def cross_dataset_eval(params: ModelParams, queries: Sequence,
                       gallery: Sequence, seen_class_ids: Iterable[int],
                       mode: str = "non_generalized", k: int = 200,
                       ttt_config: TTTConfig | None = None,
                       ttt_pool: Sequence | None = None,
                       perms: PermutationSet | None = None,
                       workers: int = 1) -> CrossDatasetResult:
    """Evaluate foreign-dataset queries, adapt on them, evaluate again.

    The model was trained elsewhere; only image formats need to agree.
    Adaptation sees ttt_pool (default: the queries) stripped to pixels and
    ids. Without a ttt_config the two reports are the same report.
    """
    seen = set(int(c) for c in seen_class_ids)
    before = evaluate_protocol(params, queries, gallery, mode, seen, k=k,
                               workers=workers)
    if ttt_config is None:
        return CrossDatasetResult(before, before, 0.0, 0.0, None)

    pool: list[PixelsOnly] = strip_labels(ttt_pool if ttt_pool is not None
                                          else queries)
    adapted, trace = run_ttt(params, pool, ttt_config, perms=perms)
    after = evaluate_protocol(adapted, queries, gallery, mode, seen, k=k,
                              workers=workers)
    return CrossDatasetResult(before, after,
                              after.map_at_k - before.map_at_k,
                              after.prec_at_k - before.prec_at_k, trace)
