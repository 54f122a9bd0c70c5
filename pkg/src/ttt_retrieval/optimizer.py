"""Plain SGD with two learning-rate groups, and the adaptation loops.

`run_ttt` is the heart of the package: a single-epoch (by default) pass
over an unlabeled test set, minimizing one of the self-supervised
objectives and updating the backbone at a fraction of the head rate.
`pretrain` is the supervised counterpart that produces the starting
checkpoint. Both are bit-deterministic given (params, data, config).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .autodiff import Tape, Tensor
from .errors import ContractError, DivergenceError, LabelError
from .imaging import AugmentConfig, Image, Rng, augment
from .model import (
    ModelParams,
    TaskSpec,
    copy_params,
    first_nonfinite,
    forward_backbone,
    forward_classifier,
    forward_head,
    forward_latent,
    images_to_tensor,
    parameter_groups,
)
from .ssl_tasks import (
    PermutationSet,
    barlow_loss,
    generate_permutation_set,
    make_barlow_batch,
    make_jigsaw_batch,
    make_rotnet_batch,
)

HEAD_LR_RANGE = (1e-6, 1e-4)


class UnlabeledSample(Protocol):
    """What the adaptation loop is allowed to see: pixels and an id."""

    id: str
    image: Image


@dataclass
class PixelsOnly:
    """Concrete label-stripped view of a dataset sample."""

    id: str
    image: Image


def strip_labels(samples: Sequence) -> list[PixelsOnly]:
    """Project samples down to (id, image); everything else is left behind."""
    return [PixelsOnly(id=s.id, image=s.image) for s in samples]


@dataclass
class TTTConfig:
    """Recipe for one adaptation run.

    head_lr outside [1e-6, 1e-4] is rejected unless force_lr is set; 0 is
    always allowed and turns the run into a dry pass (losses recorded, no
    updates). backbone rate = head_lr * backbone_lr_ratio.
    """

    task: TaskSpec
    head_lr: float = 1e-5
    backbone_lr_ratio: float = 0.1
    batch_size: int = 64
    epochs: int = 1
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    force_lr: bool = False

    def __post_init__(self):
        lo, hi = HEAD_LR_RANGE
        if self.head_lr != 0.0 and not self.force_lr and not lo <= self.head_lr <= hi:
            raise ContractError(
                f"TTTConfig: head_lr {self.head_lr} outside [{lo}, {hi}]; "
                f"set force_lr to override")
        if self.head_lr < 0:
            raise ContractError(f"TTTConfig: head_lr must be >= 0, got {self.head_lr}")
        if self.backbone_lr_ratio < 0:
            raise ContractError(
                f"TTTConfig: backbone_lr_ratio must be >= 0, got "
                f"{self.backbone_lr_ratio}")
        if self.batch_size < 2:
            raise ContractError(
                f"TTTConfig: batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 0:
            raise ContractError(f"TTTConfig: epochs must be >= 0, got {self.epochs}")

    @property
    def backbone_lr(self) -> float:
        return self.head_lr * self.backbone_lr_ratio


@dataclass
class TraceRecord:
    batch: int
    loss: float
    lr_head: float
    lr_backbone: float


@dataclass
class LossTrace:
    """Per-batch loss history plus wall-clock seconds per epoch."""

    records: list[TraceRecord] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["batch", "loss", "lr_head", "lr_backbone"])
            for r in self.records:
                writer.writerow([r.batch, repr(r.loss), repr(r.lr_head),
                                 repr(r.lr_backbone)])


def load_trace_csv(path) -> LossTrace:
    trace = LossTrace()
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["batch", "loss", "lr_head", "lr_backbone"]:
            raise ContractError(f"{path}: unexpected trace header {header}")
        for row in reader:
            trace.records.append(TraceRecord(int(row[0]), float(row[1]),
                                             float(row[2]), float(row[3])))
    return trace


def sgd_step(params: ModelParams, lr_by_group: dict[str, float],
             with_classifier: bool = False) -> None:
    """t <- t - lr * grad for every tensor in each group, then clear grads.

    No momentum, no weight decay. Raises if any trainable tensor in scope
    has no gradient; a zero learning rate leaves tensors bit-identical.
    """
    backbone, head = parameter_groups(params, with_classifier=with_classifier)
    for group_name, tensors in (("backbone", backbone), ("head", head)):
        if group_name not in lr_by_group:
            raise ContractError(f"sgd_step: missing learning rate for {group_name}")
        lr = float(lr_by_group[group_name])
        for t in tensors:
            if t.grad is None:
                raise ContractError(
                    f"sgd_step: tensor in group {group_name} has no gradient")
            if lr != 0.0:
                t.data = np.ascontiguousarray(t.data - lr * t.grad)
            t.grad = None


def _zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


def _batch_slices(n: int, batch_size: int) -> list[tuple[int, int]]:
    out = []
    for start in range(0, n, batch_size):
        end = min(start + batch_size, n)
        if end - start >= 2:
            out.append((start, end))
    return out


def run_ttt(params: ModelParams, test_images: Sequence[UnlabeledSample],
            config: TTTConfig, perms: PermutationSet | None = None
            ) -> tuple[ModelParams, LossTrace]:
    """Adapt a copy of `params` on unlabeled images; returns (adapted, trace).

    One seeded shuffle per epoch; each batch is augmented, turned into a
    self-supervised batch for the configured task, and stepped with the
    two-group learning rates. Class labels are never consulted: the inputs
    carry pixels and ids only. A trailing batch of fewer than 2 samples is
    dropped. Non-finite losses or parameters abort with a divergence error.
    """
    if not test_images:
        raise ContractError("run_ttt: empty test set")
    task = config.task
    if task.kind == "jigsaw":
        if perms is None:
            perms = generate_permutation_set(size=task.k, seed=config.seed)
        if len(perms) != task.k:
            raise ContractError(
                f"run_ttt: permutation set size {len(perms)} does not match "
                f"task k={task.k}")

    adapted = copy_params(params)
    root = Rng(config.seed)
    train_rng = root.split(0)

    # A checkpoint head with the wrong width cannot emit task logits; give
    # the task a zero head of the right width instead. Zero, not random:
    # it starts as the calibrated uniform predictor, so the loss opens at
    # ln(k) and descends as soon as anything is learned.
    if task.kind in ("rotnet", "jigsaw"):
        m, width = adapted.theta_sn[0].shape[1], adapted.theta_a[0].shape[1]
        if width != task.k:
            adapted.theta_a = (
                Tensor(np.zeros((m, task.k)), requires_grad=True),
                Tensor(np.zeros(task.k), requires_grad=True),
            )

    trace = LossTrace()
    lrs = {"head": config.head_lr, "backbone": config.backbone_lr}
    batch_counter = 0
    n = len(test_images)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        rng_epoch = train_rng.split(epoch)
        order = rng_epoch.split(0).permutation(n)
        for b, (start, end) in enumerate(_batch_slices(n, config.batch_size)):
            rng_batch = rng_epoch.split(b + 1)
            chunk = [test_images[i] for i in order[start:end]]
            images = [s.image for s in chunk]
            ids = [s.id for s in chunk]

            tape = Tape()
            if task.kind == "barlow":
                batch = make_barlow_batch(images, config.augment,
                                          rng_batch.split(1), ids)
                g1 = forward_backbone(tape, adapted, batch.inputs)
                f1 = forward_latent(tape, adapted, g1)
                g2 = forward_backbone(tape, adapted, batch.inputs2)
                f2 = forward_latent(tape, adapted, g2)
                loss = barlow_loss(tape, f1, f2, task.lam)
            else:
                aug_rng = rng_batch.split(0)
                views = [augment(img, config.augment, aug_rng.split(j))
                         for j, img in enumerate(images)]
                if task.kind == "rotnet":
                    batch = make_rotnet_batch(views, rng_batch.split(1), ids)
                else:
                    batch = make_jigsaw_batch(views, perms, rng_batch.split(1), ids)
                g = forward_backbone(tape, adapted, batch.inputs)
                f = forward_latent(tape, adapted, g)
                logits = forward_head(tape, adapted, f, task)
                loss = tape.cross_entropy(logits, batch.labels)

            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise DivergenceError(
                    f"run_ttt: non-finite loss at batch {batch_counter}")
            tape.backward(loss)
            if task.kind == "barlow":
                # The task head is off the loss path; keep it in the update
                # with an identically-zero gradient.
                _zero_grads([*adapted.theta_a])
            sgd_step(adapted, lrs)
            bad = first_nonfinite(adapted)
            if bad is not None:
                raise DivergenceError(
                    f"run_ttt: non-finite values in {bad} after batch "
                    f"{batch_counter}")
            trace.records.append(TraceRecord(batch_counter, loss_value,
                                             config.head_lr, config.backbone_lr))
            batch_counter += 1
        trace.epoch_seconds.append(time.perf_counter() - t0)
    return adapted, trace


def pretrain(params: ModelParams, train_pairs: Sequence[tuple[Image, int]],
             epochs: int, lr: float, seed: int, batch_size: int = 64,
             aug: AugmentConfig | None = None) -> ModelParams:
    """Supervised warm-up: cross-entropy on the classifier head.

    `train_pairs` carries (image, class index) with indices already compact
    in [0, C_seen). A single learning rate applies to every group,
    classifier included. Returns a trained copy; the input is untouched.
    """
    if not train_pairs:
        raise ContractError("pretrain: empty training set")
    if params.classifier is None:
        raise ContractError("pretrain: params carry no classifier head")
    if lr < 0:
        raise ContractError(f"pretrain: lr must be >= 0, got {lr}")
    n_cls = params.classifier[0].shape[1]
    for _, y in train_pairs:
        if not 0 <= y < n_cls:
            raise LabelError(f"pretrain: label {y} outside [0, {n_cls})")
    if aug is None:
        aug = AugmentConfig()

    trained = copy_params(params)
    root = Rng(seed)
    lrs = {"head": lr, "backbone": lr}
    n = len(train_pairs)
    for epoch in range(epochs):
        rng_epoch = root.split(epoch)
        order = rng_epoch.split(0).permutation(n)
        for b, (start, end) in enumerate(_batch_slices(n, batch_size)):
            rng_batch = rng_epoch.split(b + 1)
            chunk = [train_pairs[i] for i in order[start:end]]
            aug_rng = rng_batch.split(0)
            views = [augment(img, aug, aug_rng.split(j))
                     for j, (img, _) in enumerate(chunk)]
            labels = [y for _, y in chunk]

            tape = Tape()
            g = forward_backbone(tape, trained, images_to_tensor(views))
            f = forward_latent(tape, trained, g)
            logits = forward_classifier(tape, trained, f)
            loss = tape.cross_entropy(logits, labels)
            if not np.isfinite(float(loss.data)):
                raise DivergenceError(
                    f"pretrain: non-finite loss in epoch {epoch}, batch {b}")
            tape.backward(loss)
            # theta_a takes no part in the supervised objective but stays
            # in the update set so the optimizer contract holds.
            _zero_grads([*trained.theta_a])
            sgd_step(trained, lrs, with_classifier=True)
            bad = first_nonfinite(trained)
            if bad is not None:
                raise DivergenceError(
                    f"pretrain: non-finite values in {bad} in epoch {epoch}, "
                    f"batch {b}")
    return trained
