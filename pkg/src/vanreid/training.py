"""Losses, optimizer, schedule, and batch assembly for model training.

The retrieval objective combines a batch-hard triplet hinge per stream with
softmax identity losses on the image, render, and class-summary heads. All
five terms are summed unweighted in a fixed order so runs reproduce bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .fusion import DualStreamModel, ModelOutputs
from .tensor import Tensor, backward

__all__ = [
    "batch_hard_triplet",
    "id_loss",
    "compute_losses",
    "total_loss",
    "Sgd",
    "lr_at",
    "PKSampler",
    "augment_image",
    "draw_view",
    "train_step",
    "LOSS_KEYS",
]

LOSS_KEYS = ("tri_image", "tri_render", "id_image", "id_render", "id_class")


def batch_hard_triplet(embeddings: Tensor, labels, margin: float = 0.3) -> Tensor:
    """Mean hinge over anchors using each anchor's hardest positive and
    hardest negative within the batch.

    Mining runs on detached distances; the selected entries are then gathered
    differentiably, so gradients flow through exactly the mined pairs.
    Anchors with no positive (or no negative) are skipped; an all-skipped
    batch is an error.
    """
    labels = np.asarray(labels)
    b = embeddings.shape[0]
    if labels.shape != (b,):
        raise ValueError(f"labels must be ({b},), got {labels.shape}")
    dist = ops.euclidean_distance(embeddings, embeddings)

    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(b, dtype=bool)
    neg_mask = ~same
    anchors, pos_idx, neg_idx = [], [], []
    d = dist.data
    for i in range(b):
        if not pos_mask[i].any() or not neg_mask[i].any():
            continue
        anchors.append(i)
        pos_idx.append(np.where(pos_mask[i], d[i], -np.inf).argmax())
        neg_idx.append(np.where(neg_mask[i], d[i], np.inf).argmin())
    if not anchors:
        raise ValueError("no anchor in the batch has both a positive and a negative")

    flat = ops.reshape(dist, (b * b, 1))
    rows = np.asarray(anchors)
    d_ap = ops.embedding_lookup(flat, rows * b + np.asarray(pos_idx))
    d_an = ops.embedding_lookup(flat, rows * b + np.asarray(neg_idx))
    hinge = ops.relu(ops.add(ops.sub(d_ap, d_an), float(margin)))
    return ops.reshape(ops.mean(hinge), ())


def id_loss(logits: Tensor, labels) -> Tensor:
    return ops.cross_entropy(logits, np.asarray(labels))


def total_loss(parts: dict[str, Tensor]) -> Tensor:
    """Left-fold sum over LOSS_KEYS order, skipping absent terms."""
    total = None
    for key in LOSS_KEYS:
        term = parts.get(key)
        if term is None:
            continue
        total = term if total is None else ops.add(total, term)
    if total is None:
        raise ValueError("no loss terms present")
    return total


def compute_losses(outputs: ModelOutputs, labels, margin: float = 0.3) -> dict[str, Tensor]:
    """Five-term objective; render/class terms drop out in image-only mode."""
    parts: dict[str, Tensor] = {
        "tri_image": batch_hard_triplet(outputs.embed_image, labels, margin),
        "id_image": id_loss(outputs.logits_image, labels),
    }
    if outputs.embed_render is not None:
        parts["tri_render"] = batch_hard_triplet(outputs.embed_render, labels, margin)
    if outputs.logits_render is not None:
        parts["id_render"] = id_loss(outputs.logits_render, labels)
    if outputs.logits_class is not None:
        parts["id_class"] = id_loss(outputs.logits_class, labels)
    parts["total"] = total_loss(parts)
    return parts


class Sgd:
    """Gradient descent with classical momentum: v = m*v + g; p -= lr*v."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, buf in zip(self.params, self.buffers):
            if p.grad is None:
                continue
            buf *= self.momentum
            buf += p.grad
            p.data = p.data - self.lr * buf


def lr_at(epoch: int, base: float = 1e-4, drops: tuple[int, ...] = (40, 90)) -> float:
    """Step schedule: divide by 10 at each drop epoch, inclusive."""
    if epoch < 0:
        raise ValueError(f"epoch must be nonnegative, got {epoch}")
    return base / 10 ** sum(1 for d in drops if epoch >= d)


class PKSampler:
    """Batches of p identities times k samples each.

    Identities with fewer than k samples are drawn with replacement. One
    epoch visits every identity once in a seeded shuffle.
    """

    def __init__(self, labels, p: int, k: int, rng: np.random.Generator):
        labels = np.asarray(labels)
        self.by_id = {}
        for idx, lab in enumerate(labels):
            self.by_id.setdefault(int(lab), []).append(idx)
        if len(self.by_id) < p:
            raise ValueError(f"need at least {p} identities, got {len(self.by_id)}")
        self.p = p
        self.k = k
        self.rng = rng

    def epoch(self):
        ids = sorted(self.by_id)
        order = self.rng.permutation(len(ids))
        for lo in range(0, len(ids) - self.p + 1, self.p):
            batch = []
            for j in order[lo : lo + self.p]:
                pool = self.by_id[ids[j]]
                if len(pool) >= self.k:
                    pick = self.rng.choice(len(pool), size=self.k, replace=False)
                else:
                    pick = self.rng.choice(len(pool), size=self.k, replace=True)
                batch.extend(pool[q] for q in pick)
            yield np.asarray(batch)


def draw_view(rng: np.random.Generator, num_views: int = 4) -> int:
    """Uniform seeded choice of which rendered view a batch trains on."""
    return int(rng.integers(num_views))


def augment_image(image: np.ndarray, rng: np.random.Generator,
                  flip_prob: float = 0.5, jitter: float = 0.1) -> np.ndarray:
    """Seeded horizontal flip plus per-channel brightness scaling, on the
    captured image only; rendered views stay untouched."""
    out = np.asarray(image, dtype=np.float64)
    if rng.uniform() < flip_prob:
        out = out[:, ::-1, :]
    scale = rng.uniform(1.0 - jitter, 1.0 + jitter, size=3)
    return np.clip(out * scale, 0.0, 1.0)


def train_step(model: DualStreamModel, optimizer: Sgd, images, renders, labels,
               margin: float = 0.3) -> dict[str, float]:
    """One optimization step; returns the loss values as plain floats."""
    images = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
    if renders is not None and not isinstance(renders, Tensor):
        renders = Tensor(np.asarray(renders))
    outputs = model.forward(images, renders, training=True)
    parts = compute_losses(outputs, labels, margin)
    optimizer.zero_grad()
    backward(parts["total"])
    optimizer.step()
    return {key: float(t.data) for key, t in parts.items()}
