"""Contrastive, instance and Barlow-twins objectives.

All functions take row-aligned batches: row ``i`` of every matrix belongs to
the same image-text pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import torch

LEVELS = ("local", "global", "fusion")


@dataclass
class LossWeights:
    t2i: float = 2.0
    i2t: float = 1.0
    levels: dict[str, float] = field(default_factory=lambda: {k: 1.0 for k in LEVELS})
    instance: float = 1.0
    barlow: float = 0.0
    barlow_offdiag: float = 5e-3

    def __post_init__(self):
        self.levels = {**{k: 1.0 for k in LEVELS}, **dict(self.levels)}
        if set(self.levels) - set(LEVELS):
            raise ValueError(f"unknown levels {sorted(set(self.levels) - set(LEVELS))}")
        values = [self.t2i, self.i2t, self.instance, self.barlow, self.barlow_offdiag, *self.levels.values()]
        if any(v < 0 for v in values):
            raise ValueError("loss weights must be non-negative")


@dataclass
class BatchEmbeddings:
    z_local: torch.Tensor
    z_global: torch.Tensor | None
    z_fusion: torch.Tensor
    z_text: torch.Tensor
    labels: torch.Tensor

    def level(self, name: str) -> torch.Tensor | None:
        return {"local": self.z_local, "global": self.z_global, "fusion": self.z_fusion}[name]


def similarity_matrix(z_img: torch.Tensor, z_text: torch.Tensor, tau: torch.Tensor | float) -> torch.Tensor:
    """``S[i, j] = cos(z_img[i], z_text[j]) / tau``."""
    if not torch.is_tensor(tau):
        tau = torch.tensor(float(tau), dtype=z_img.dtype)
    if float(tau.detach()) <= 0:
        raise ValueError(f"temperature must be positive, got {float(tau.detach())}")
    for name, z in (("image", z_img), ("text", z_text)):
        norms = z.norm(dim=1)
        bad = torch.nonzero(norms <= 1e-12).flatten()
        if len(bad):
            raise ValueError(f"{name} row {int(bad[0])} has zero norm")
    a = z_img / z_img.norm(dim=1, keepdim=True)
    b = z_text / z_text.norm(dim=1, keepdim=True)
    return a @ b.T / tau


def info_nce_t2i(S: torch.Tensor) -> torch.Tensor:
    """Each text (column) against every image in the batch."""
    _check_square(S)
    return (torch.logsumexp(S, dim=0) - S.diagonal()).mean()


def info_nce_i2t(S: torch.Tensor) -> torch.Tensor:
    """Each image (row) against every text in the batch."""
    _check_square(S)
    return (torch.logsumexp(S, dim=1) - S.diagonal()).mean()


def _check_square(S: torch.Tensor) -> None:
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {tuple(S.shape)}")


def symmetric_info_nce(
    z_img: torch.Tensor,
    z_text: torch.Tensor,
    tau: torch.Tensor | float,
    t2i_weight: float = 2.0,
    i2t_weight: float = 1.0,
) -> torch.Tensor:
    S = similarity_matrix(z_img, z_text, tau)
    return t2i_weight * info_nce_t2i(S) + i2t_weight * info_nce_i2t(S)


def three_level_contrastive(
    batch: BatchEmbeddings,
    tau: torch.Tensor | float | Mapping[str, torch.Tensor],
    weights: LossWeights,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted sum of symmetric InfoNCE over the local, global and fusion levels.

    ``tau`` is shared across levels unless a per-level mapping is passed.
    Levels with zero weight or no embedding are skipped and reported as 0.
    Returns the total and the unweighted per-level values.
    """
    zero = batch.z_text.new_zeros(())
    total = zero
    parts = {}
    for name in LEVELS:
        z = batch.level(name)
        w = weights.levels[name]
        if z is None or w == 0:
            parts[name] = zero
            continue
        t = tau[name] if isinstance(tau, Mapping) else tau
        parts[name] = symmetric_info_nce(z, batch.z_text, t, weights.t2i, weights.i2t)
        total = total + w * parts[name]
    return total, parts


def _cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return (torch.logsumexp(logits, dim=1) - logits.gather(1, labels[:, None]).squeeze(1)).mean()


def instance_loss(
    z_img: torch.Tensor, z_text: torch.Tensor, w_shared: torch.Tensor, labels: torch.Tensor
) -> torch.Tensor:
    """Cross-entropy of both modalities through one shared classifier.

    ``w_shared`` has shape (num_tracks, dim); embeddings are used unnormalized.
    The two batch-averaged terms are summed.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    n = w_shared.shape[0]
    if labels.numel() and (int(labels.max()) >= n or int(labels.min()) < 0):
        raise ValueError(f"label out of range for {n} classes")
    return _cross_entropy(z_img @ w_shared.T, labels) + _cross_entropy(z_text @ w_shared.T, labels)


def _standardize(z: torch.Tensor, eps: float) -> torch.Tensor:
    mean = z.mean(0, keepdim=True)
    var = ((z - mean) ** 2).mean(0, keepdim=True)
    return (z - mean) / torch.sqrt(var + eps)


def barlow_twins(z_a: torch.Tensor, z_b: torch.Tensor, offdiag_weight: float = 5e-3, eps: float = 1e-5) -> torch.Tensor:
    """Push the batch cross-correlation of two views toward the identity.

    Columns are standardized with the biased batch variance.
    """
    M = z_a.shape[0]
    if M < 2:
        raise ValueError("barlow_twins needs a batch of at least 2")
    c = _standardize(z_a, eps).T @ _standardize(z_b, eps) / M
    diag = torch.diagonal(c)
    on = ((diag - 1) ** 2).sum()
    off = (c**2).sum() - (diag**2).sum()
    return on + offdiag_weight * off


def total_loss(
    batch: BatchEmbeddings,
    tau: torch.Tensor | float,
    w_shared: torch.Tensor,
    weights: LossWeights,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Contrastive + instance + Barlow-twins objective with a component log.

    The log holds unweighted component values and ``tau``; components with a
    zero weight are not evaluated and logged as 0.
    """
    total, parts = three_level_contrastive(batch, tau, weights)
    zero = batch.z_text.new_zeros(())
    l_inst = l_bt = zero
    if weights.instance > 0:
        l_inst = instance_loss(batch.z_fusion, batch.z_text, w_shared, batch.labels)
        total = total + weights.instance * l_inst
    if weights.barlow > 0:
        l_bt = barlow_twins(batch.z_fusion, batch.z_text, weights.barlow_offdiag)
        total = total + weights.barlow * l_bt
    log = {
        "l_local": _scalar(parts["local"]),
        "l_global": _scalar(parts["global"]),
        "l_fusion": _scalar(parts["fusion"]),
        "l_instance": _scalar(l_inst),
        "l_barlow": _scalar(l_bt),
        "tau": _scalar(tau),
    }
    return total, log


def _scalar(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def weighted_sum(log: Mapping[str, float], weights: LossWeights) -> float:
    """Recombine a component log into the scalar objective."""
    return (
        sum(weights.levels[k] * log[f"l_{k}"] for k in LEVELS)
        + weights.instance * log["l_instance"]
        + weights.barlow * log["l_barlow"]
    )
