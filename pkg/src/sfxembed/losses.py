"""Cross-entropy, cosine-similarity metric losses, batch-all miners and RegularFace.

All metric losses work in cosine-similarity space, so they are invariant to the
scale of the embeddings. Every function is differentiable with autograd; no
quantity is detached, so the gradients are those of the losses as written.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F

NORM_FLOOR = 1e-12
LOSS_KINDS = ("ce", "ce+contrastive", "ce+triplet", "ce+circle")


@dataclass
class LossConfig:
    kind: str = "ce"
    metric_weight: float = 1.0
    triplet_margin: float = 0.05
    pos_margin: float = 1.0
    neg_margin: float = 0.0
    circle_margin: float = 0.25
    circle_gamma: float = 32.0
    regularface_weight: float = 0.1
    hard_mining: bool = False

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.metric_weight < 0:
            raise ValueError("metric_weight must be >= 0")
        if not 0 < self.circle_margin < 1:
            raise ValueError("circle_margin must lie in (0, 1)")
        if self.circle_gamma <= 0:
            raise ValueError("circle_gamma must be > 0")

    @property
    def metric(self) -> str | None:
        return None if self.kind == "ce" else self.kind.split("+", 1)[1]

    def to_dict(self) -> dict:
        return asdict(self)


class PairSet(NamedTuple):
    pos: torch.Tensor  # (P, 2) with i < j
    neg: torch.Tensor  # (N, 2) with i < j


class TripletSet(NamedTuple):
    anchor: torch.Tensor
    positive: torch.Tensor
    negative: torch.Tensor

    def __len__(self):
        return len(self.anchor)


def cosine_matrix(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=1, keepdim=True).clamp_min(NORM_FLOOR)
    u = x / norms
    return u @ u.T


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    n_classes = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return F.cross_entropy(logits, labels)


def mine_pairs(labels) -> PairSet:
    labels = torch.as_tensor(labels)
    i, j = torch.triu_indices(len(labels), len(labels), offset=1)
    same = labels[i] == labels[j]
    return PairSet(torch.stack([i[same], j[same]], 1), torch.stack([i[~same], j[~same]], 1))


def mine_triplets(labels) -> TripletSet:
    labels = torch.as_tensor(labels)
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~torch.eye(n, dtype=torch.bool)
    valid = pos[:, :, None] & ~same[:, None, :]
    a, p, neg = valid.nonzero(as_tuple=True)
    return TripletSet(a, p, neg)


def contrastive_loss(embeddings, pairs: PairSet, pos_margin: float = 1.0,
                     neg_margin: float = 0.0, hard_mining: bool = False) -> torch.Tensor:
    sim = cosine_matrix(embeddings)
    pos = F.relu(pos_margin - sim[pairs.pos[:, 0], pairs.pos[:, 1]])
    neg = F.relu(sim[pairs.neg[:, 0], pairs.neg[:, 1]] - neg_margin)
    return _hinge_mean(pos, hard_mining) + _hinge_mean(neg, hard_mining)


def triplet_loss(embeddings, triplets: TripletSet, margin: float = 0.05,
                 hard_mining: bool = False) -> torch.Tensor:
    sim = cosine_matrix(embeddings)
    a, p, n = triplets
    return _hinge_mean(F.relu(sim[a, n] - sim[a, p] + margin), hard_mining)


def _hinge_mean(values: torch.Tensor, hard_only: bool) -> torch.Tensor:
    if hard_only:
        values = values[values > 0]
    if values.numel() == 0:
        return values.sum()  # zero that keeps the graph
    return values.mean()


def circle_loss(embeddings, labels, margin: float = 0.25, gamma: float = 32.0) -> torch.Tensor:
    """Per-anchor circle loss, averaged over anchors having both positives and negatives."""
    labels = torch.as_tensor(labels)
    sim = cosine_matrix(embeddings)
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~torch.eye(n, dtype=torch.bool)
    neg_mask = ~same

    alpha_p = F.relu(1 + margin - sim)
    alpha_n = F.relu(sim + margin)
    logit_p = -gamma * alpha_p * (sim - (1 - margin))
    logit_n = gamma * alpha_n * (sim - margin)
    # finite fill keeps backward NaN-free for rows with nothing to sum
    ninf = torch.full_like(sim, torch.finfo(sim.dtype).min)
    lse_p = torch.logsumexp(torch.where(pos_mask, logit_p, ninf), dim=1)
    lse_n = torch.logsumexp(torch.where(neg_mask, logit_n, ninf), dim=1)

    active = pos_mask.any(1) & neg_mask.any(1)
    if not active.any():
        return sim.sum() * 0.0
    return F.softplus(lse_p[active] + lse_n[active]).mean()


def regularface(head_weights: torch.Tensor) -> torch.Tensor:
    """Mean over classes of the largest cosine similarity to any other class weight row."""
    n_classes = head_weights.shape[0]
    if n_classes < 2:
        warnings.warn("regularface needs at least two classes; returning 0", stacklevel=2)
        return head_weights.sum() * 0.0
    sim = cosine_matrix(head_weights)
    sim = sim.masked_fill(torch.eye(n_classes, dtype=torch.bool), -math.inf)
    return sim.max(dim=1).values.mean()


def joint_loss(ce, metric=0.0, reg=0.0, metric_weight: float = 1.0,
               reg_weight: float = 0.0):
    for name, value in (("ce", ce), ("metric", metric), ("reg", reg)):
        value = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite {name} loss component: {value}")
    return ce + metric_weight * metric + reg_weight * reg


def metric_loss(embeddings, labels, config: LossConfig) -> torch.Tensor:
    kind = config.metric
    if kind is None:
        return embeddings.sum() * 0.0
    if kind == "contrastive":
        return contrastive_loss(embeddings, mine_pairs(labels), config.pos_margin,
                                config.neg_margin, config.hard_mining)
    if kind == "triplet":
        return triplet_loss(embeddings, mine_triplets(labels), config.triplet_margin,
                            config.hard_mining)
    return circle_loss(embeddings, labels, config.circle_margin, config.circle_gamma)


def compute_loss(logits, embeddings, labels, head_weights, config: LossConfig):
    """The training objective for one dataset-homogeneous batch.

    RegularFace only enters metric-learning runs.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    ce = cross_entropy(logits, labels)
    if config.metric is None:
        return joint_loss(ce)
    metric = metric_loss(embeddings, labels, config)
    reg = regularface(head_weights)
    return joint_loss(ce, metric, reg, config.metric_weight, config.regularface_weight)
