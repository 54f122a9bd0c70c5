"""The encoder and its three-way parameter split.

The network is a composition of three named pieces: a small feed-forward
backbone, an embedding layer projecting into the m-dimensional retrieval
space, and a linear task head mapping embeddings to k pretext logits. A
fourth, optional classifier on the embedding is used only for supervised
pretraining. The split matters because adaptation assigns different
learning rates to the backbone and to the (embedding + head) group.

Parameters serialize to a simple binary checkpoint format; round-trips are
bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import DTYPE, Tape, Tensor
from .errors import CheckpointError, ContractError, ShapeError
from .imaging import Image, Rng

ROTNET_K = 4
JIGSAW_DEFAULT_K = 31

CHECKPOINT_MAGIC = b"TTTUCDR1"
CHECKPOINT_VERSION = 1


@dataclass
class ModelDims:
    """Static layer widths; in_dim is h*w*3 of the configured image size."""

    in_dim: int
    hidden: int = 256
    embed_dim: int = 64
    head_k: int = ROTNET_K
    n_classes: int = 0  # 0 means no pretraining classifier

    def __post_init__(self):
        for name in ("in_dim", "hidden", "embed_dim", "head_k"):
            if getattr(self, name) < 1:
                raise ContractError(f"ModelDims: {name} must be >= 1")
        if self.n_classes < 0:
            raise ContractError("ModelDims: n_classes must be >= 0")


@dataclass
class TaskSpec:
    """Which self-supervised objective drives adaptation.

    kind is one of rotnet / jigsaw / barlow. k is the label count for the
    classification pretexts (4 rotations; one label per permutation); the
    decorrelation objective has no labels, so k is pinned to 0 there. lam
    weights its off-diagonal term.
    """

    kind: str
    k: int = 0
    lam: float = 0.005

    def __post_init__(self):
        if self.kind not in ("rotnet", "jigsaw", "barlow"):
            raise ContractError(f"TaskSpec: unknown kind {self.kind!r}")
        if self.kind == "rotnet":
            if self.k == 0:
                self.k = ROTNET_K
            elif self.k != ROTNET_K:
                raise ContractError(f"TaskSpec: rotnet requires k=4, got {self.k}")
        elif self.kind == "jigsaw":
            if self.k == 0:
                self.k = JIGSAW_DEFAULT_K
            elif self.k < 2:
                raise ContractError(f"TaskSpec: jigsaw needs k >= 2, got {self.k}")
        else:
            self.k = 0
        if self.lam < 0:
            raise ContractError(f"TaskSpec: lam must be >= 0, got {self.lam}")


@dataclass
class ModelParams:
    """All trainable tensors, grouped by role.

    theta_bb: backbone layers as (weight, bias) pairs, applied in order.
    theta_sn: the embedding layer (hidden -> embed_dim).
    theta_a: the task head (embed_dim -> k).
    classifier: optional supervised head (embed_dim -> n_classes).
    """

    theta_bb: list[tuple[Tensor, Tensor]]
    theta_sn: tuple[Tensor, Tensor]
    theta_a: tuple[Tensor, Tensor]
    classifier: tuple[Tensor, Tensor] | None = None


def named_tensors(params: ModelParams) -> list[tuple[str, Tensor]]:
    """Canonical (name, tensor) list; the order fixes the checkpoint layout."""
    out = []
    for i, (w, b) in enumerate(params.theta_bb):
        out.append((f"bb.{i}.weight", w))
        out.append((f"bb.{i}.bias", b))
    out.append(("sn.weight", params.theta_sn[0]))
    out.append(("sn.bias", params.theta_sn[1]))
    out.append(("head.weight", params.theta_a[0]))
    out.append(("head.bias", params.theta_a[1]))
    if params.classifier is not None:
        out.append(("classifier.weight", params.classifier[0]))
        out.append(("classifier.bias", params.classifier[1]))
    return out


def parameter_groups(params: ModelParams, with_classifier: bool = False
                     ) -> tuple[list[Tensor], list[Tensor]]:
    """(backbone_group, head_group): disjoint, jointly exhaustive.

    The backbone group holds theta_bb only; the head group holds theta_sn
    and theta_a, plus the classifier when with_classifier is set (pretraining
    trains it, adaptation must not see it).
    """
    backbone = [t for pair in params.theta_bb for t in pair]
    head = [*params.theta_sn, *params.theta_a]
    if with_classifier:
        if params.classifier is None:
            raise ContractError("parameter_groups: no classifier attached")
        head.extend(params.classifier)
    return backbone, head


def init_params(seed: int, dims: ModelDims) -> ModelParams:
    """Glorot-uniform weights, zero biases, deterministic per seed."""
    rng = Rng(seed)

    def linear(fan_in: int, fan_out: int) -> tuple[Tensor, Tensor]:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = Tensor(rng.uniform(-limit, limit, (fan_in, fan_out)),
                   requires_grad=True)
        b = Tensor(np.zeros(fan_out), requires_grad=True)
        return w, b

    theta_bb = [linear(dims.in_dim, dims.hidden),
                linear(dims.hidden, dims.hidden)]
    theta_sn = linear(dims.hidden, dims.embed_dim)
    theta_a = linear(dims.embed_dim, dims.head_k)
    classifier = linear(dims.embed_dim, dims.n_classes) if dims.n_classes else None
    return ModelParams(theta_bb, theta_sn, theta_a, classifier)


def copy_params(params: ModelParams) -> ModelParams:
    """Deep copy of all tensors; gradients are not carried over."""

    def cp(pair: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
        return (Tensor(pair[0].data.copy(), requires_grad=True),
                Tensor(pair[1].data.copy(), requires_grad=True))

    return ModelParams(
        [cp(pair) for pair in params.theta_bb],
        cp(params.theta_sn),
        cp(params.theta_a),
        cp(params.classifier) if params.classifier is not None else None,
    )


def first_nonfinite(params: ModelParams) -> str | None:
    """Name of the first tensor containing NaN/Inf, or None if all finite."""
    for name, t in named_tensors(params):
        if not np.isfinite(t.data).all():
            return name
    return None


# -- forward passes ---------------------------------------------------------

def images_to_tensor(images: Sequence[Image]) -> Tensor:
    """Stack flattened pixel rows into an n x D input batch."""
    if not images:
        raise ContractError("images_to_tensor: empty batch")
    rows = [img.flat() for img in images]
    d = rows[0].size
    for i, r in enumerate(rows):
        if r.size != d:
            raise ShapeError(
                f"images_to_tensor: image {i} has {r.size} values, expected {d}")
    return Tensor(np.stack(rows))


def forward_backbone(tape: Tape, params: ModelParams, x: Tensor) -> Tensor:
    """Flattened pixels through the feed-forward stack: linear/relu per layer."""
    w0 = params.theta_bb[0][0]
    if x.data.ndim != 2 or x.shape[1] != w0.shape[0]:
        raise ShapeError(
            f"forward_backbone: input {x.shape} incompatible with first layer "
            f"{w0.shape}")
    g = x
    for w, b in params.theta_bb:
        g = tape.relu(tape.add_row(tape.matmul(g, w), b))
    return g


def forward_latent(tape: Tape, params: ModelParams, g: Tensor) -> Tensor:
    """Linear projection into the retrieval space; no nonlinearity."""
    w, b = params.theta_sn
    return tape.add_row(tape.matmul(g, w), b)


def forward_head(tape: Tape, params: ModelParams, f: Tensor,
                 task: TaskSpec | None = None) -> Tensor:
    """Linear task head on the embedding; validates width against the task."""
    w, b = params.theta_a
    if task is not None and task.kind != "barlow" and w.shape[1] != task.k:
        raise ContractError(
            f"forward_head: head width {w.shape[1]} does not match task k={task.k}")
    return tape.add_row(tape.matmul(f, w), b)


def forward_classifier(tape: Tape, params: ModelParams, f: Tensor) -> Tensor:
    if params.classifier is None:
        raise ContractError("forward_classifier: params carry no classifier")
    w, b = params.classifier
    return tape.add_row(tape.matmul(f, w), b)


def embed(tape: Tape, params: ModelParams, x: Tensor) -> Tensor:
    """The retrieval representation: embedding layer over the backbone."""
    return forward_latent(tape, params, forward_backbone(tape, params, x))


# -- checkpoint I/O ---------------------------------------------------------

def save_checkpoint(params: ModelParams, path) -> None:
    named = named_tensors(params)
    parts = [CHECKPOINT_MAGIC,
             struct.pack("<II", CHECKPOINT_VERSION, len(named))]
    for name, t in named:
        raw = name.encode("utf-8")
        arr = t.data
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def _take(buf: bytes, pos: int, n: int, field: str) -> tuple[bytes, int]:
    if pos + n > len(buf):
        raise CheckpointError(
            f"truncated {field}: expected {n} bytes at offset {pos}, "
            f"file has {len(buf) - pos}")
    return buf[pos:pos + n], pos + n


def load_checkpoint(path) -> ModelParams:
    """Rebuild ModelParams from a checkpoint file; fails loudly on any damage."""
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    raw, pos = _take(buf, 0, 8, "magic")
    if raw != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {raw!r}, want {CHECKPOINT_MAGIC!r}")
    raw, pos = _take(buf, pos, 8, "header")
    version, count = struct.unpack("<II", raw)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported version {version}, want {CHECKPOINT_VERSION}")

    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        raw, pos = _take(buf, pos, 2, "name length")
        (name_len,) = struct.unpack("<H", raw)
        raw, pos = _take(buf, pos, name_len, "name")
        name = raw.decode("utf-8")
        raw, pos = _take(buf, pos, 1, f"rank of {name}")
        rank = raw[0]
        raw, pos = _take(buf, pos, 4 * rank, f"dims of {name}")
        dims = struct.unpack(f"<{rank}I", raw)
        n_bytes = 8 * int(np.prod(dims, dtype=np.int64)) if rank else 8
        raw, pos = _take(buf, pos, n_bytes, f"payload of {name}")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(DTYPE)
    if pos != len(buf):
        raise CheckpointError(
            f"{len(buf) - pos} trailing bytes after the final tensor")

    def pair(prefix: str) -> tuple[Tensor, Tensor]:
        for suffix in ("weight", "bias"):
            if f"{prefix}.{suffix}" not in tensors:
                raise CheckpointError(f"missing tensor {prefix}.{suffix}")
        w = tensors.pop(f"{prefix}.weight")
        b = tensors.pop(f"{prefix}.bias")
        if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
            raise CheckpointError(
                f"inconsistent shapes for {prefix}: weight {w.shape}, "
                f"bias {b.shape}")
        return Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)

    n_layers = sum(1 for name in tensors if name.endswith(".weight")
                   and name.startswith("bb."))
    if n_layers == 0:
        raise CheckpointError("missing tensor bb.0.weight")
    theta_bb = [pair(f"bb.{i}") for i in range(n_layers)]
    theta_sn = pair("sn")
    theta_a = pair("head")
    classifier = pair("classifier") if "classifier.weight" in tensors else None
    if tensors:
        raise CheckpointError(f"unknown tensor name {sorted(tensors)[0]!r}")

    for i in range(1, n_layers):
        if theta_bb[i][0].shape[0] != theta_bb[i - 1][0].shape[1]:
            raise CheckpointError(
                f"inconsistent shapes: bb.{i}.weight {theta_bb[i][0].shape} "
                f"does not chain after bb.{i - 1}")
    if theta_sn[0].shape[0] != theta_bb[-1][0].shape[1]:
        raise CheckpointError(
            f"inconsistent shapes: sn.weight {theta_sn[0].shape} does not "
            f"chain after the backbone")
    if theta_a[0].shape[0] != theta_sn[0].shape[1]:
        raise CheckpointError(
            f"inconsistent shapes: head.weight {theta_a[0].shape} does not "
            f"chain after sn")
    if classifier is not None and classifier[0].shape[0] != theta_sn[0].shape[1]:
        raise CheckpointError(
            f"inconsistent shapes: classifier.weight {classifier[0].shape} "
            f"does not chain after sn")
    return ModelParams(theta_bb, theta_sn, theta_a, classifier)
