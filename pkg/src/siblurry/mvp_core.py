"""Mask-and-prompt pool, prompt selection and the MVP loss terms.

Tensor conventions: features ``h`` are ``[B, D]``, the head ``W`` is
``[D, num_classes]`` so the weight vector of class ``c`` is ``W[:, c]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise ``1 - cos(a, b)`` with broadcasting over leading dims.

    Distance is 1 whenever either side has zero norm.
    """
    a, b = torch.broadcast_tensors(a, b)
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    degenerate = (na == 0) | (nb == 0)
    denom = torch.where(degenerate, torch.ones_like(na), na * nb)
    cos = (a * b).sum(-1) / denom
    if degenerate.any():
        logger.debug("cosine distance hit %d zero-norm vectors", int(degenerate.sum()))
    return torch.where(degenerate, torch.ones_like(cos), 1.0 - cos)


def pairwise_cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``[n, D] x [m, D] -> [n, m]`` distance matrix (same zero convention)."""
    return cosine_distance(a.unsqueeze(1), b.unsqueeze(0))


class PromptPool(nn.Module):
    """P entries of (key, deep prompt, logit mask, selection count)."""

    def __init__(
        self,
        pool_size: int,
        embed_dim: int,
        num_classes: int,
        prompt_shape: tuple[int, int, int],
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        g = generator
        self.keys = nn.Parameter(2 * torch.rand(pool_size, embed_dim, generator=g) - 1)
        self.prompts = nn.Parameter(2 * torch.rand(pool_size, *prompt_shape, generator=g) - 1)
        self.masks = nn.Parameter(torch.ones(pool_size, num_classes))
        self.register_buffer("counts", torch.zeros(pool_size, dtype=torch.long))

    @property
    def size(self) -> int:
        return self.keys.shape[0]

    def select(self, q: torch.Tensor, train: bool = True, top_k: int = 1) -> tuple[torch.Tensor, torch.Tensor]:
        """Nearest key(s) by cosine distance for each query row.

        Returns ``(indices, distances)``, each ``[B]`` (or ``[B, top_k]``).
        Ties go to the lowest index.  Counts move only when ``train``.
        """
        with torch.no_grad():
            dist = pairwise_cosine_distance(q.to(self.keys.dtype), self.keys)
            if top_k == 1:
                # torch.argmin returns the first minimum
                idx = dist.argmin(dim=1)
                chosen = dist.gather(1, idx[:, None])[:, 0]
            else:
                # stable sort keeps index order among equal distances
                order = torch.sort(dist, dim=1, stable=True).indices[:, :top_k]
                idx, chosen = order, dist.gather(1, order)
            if train:
                self.counts += torch.bincount(idx.reshape(-1), minlength=self.size)
        return idx, chosen

    def gather(self, idx: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-sample (prompts, masks); top-k selections are averaged."""
        if idx.dim() == 1:
            return self.prompts[idx], self.masks[idx]
        return self.prompts[idx].mean(1), self.masks[idx].mean(1)


def select_prompt(q: torch.Tensor, pool: PromptPool, train: bool = True) -> tuple[int, float]:
    """Single-query form of :meth:`PromptPool.select`."""
    idx, dist = pool.select(q.reshape(1, -1), train=train)
    return int(idx[0]), float(dist[0])


def cvpt_loss(keys: torch.Tensor, queries: torch.Tensor, counts: torch.Tensor) -> torch.Tensor:
    """Contrastive key loss with per-key temperature ``counts + 1``.

    Queries are treated as constants; only ``keys`` receive gradient.
    """
    temp = (counts.to(keys.dtype) + 1.0)[:, None]
    q = queries.detach().to(keys.dtype)
    s_p = torch.exp(pairwise_cosine_distance(keys, q) / temp).sum()
    s_n = torch.exp(pairwise_cosine_distance(keys, keys) / temp).sum()
    return -torch.log(s_n / (s_p + s_n))


def apply_mask(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Element-wise product; ``mask`` is ``[num_classes]`` or per-row ``[B, num_classes]``."""
    return logits * mask


def per_sample_row_gradients(
    h: torch.Tensor, labels: torch.Tensor, W: torch.Tensor, mask: torch.Tensor | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Analytic CE gradients w.r.t. label columns of the head.

    For sample ``j`` with logits ``z_j = mask_j * (h_j W)`` the gradient of its
    CE w.r.t. ``W[:, c]`` is ``mask_j[c] * (softmax(z_j)[c] - [y_j == c]) * h_j``.

    Returns ``(own, mean)``: ``own[i]`` is sample i's gradient for column
    ``y_i`` and ``mean[i]`` is the batch average of all samples' gradients for
    that same column.  Both ``[B, D]``.
    """
    with torch.no_grad():
        z = h @ W
        if mask is not None:
            z = z * mask
        coef = z.softmax(dim=1) - F.one_hot(labels, W.shape[1]).to(z.dtype)
        if mask is not None:
            coef = coef * mask
        B = h.shape[0]
        rows = torch.arange(B)
        own = coef[rows, labels][:, None] * h
        col_mean = (coef.T @ h) / B  # [num_classes, D]
        return own, col_mean[labels]


def ignore_scores(
    h: torch.Tensor, labels: torch.Tensor, W: torch.Tensor, mask: torch.Tensor | None = None
) -> torch.Tensor:
    """Cosine distance between each sample's label-column gradient and the batch mean, in [0, 2]."""
    own, mean = per_sample_row_gradients(h, labels, W, mask)
    if (mean.norm(dim=1) == 0).any():
        logger.info("degenerate batch: zero mean gradient for some label column")
    return cosine_distance(own, mean).detach()


def gsf_loss(masked_logits: torch.Tensor, labels: torch.Tensor, scores: torch.Tensor, gamma: float) -> torch.Tensor:
    ce = F.cross_entropy(masked_logits, labels, reduction="none")
    # torch.pow gives 0 ** 0 == 1, so gamma = 0 is plain mean CE
    weight = torch.pow(scores.detach().to(ce.dtype), gamma)
    return (weight * ce).mean()


def marginal_benefit_scores(h: torch.Tensor, labels: torch.Tensor, W: torch.Tensor, margin: float) -> torch.Tensor:
    """``cos_dist(h_i, W[:, y_i]) + margin``, in [margin, 2 + margin]; detached."""
    if margin <= 0:
        raise ValueError("margin must be > 0")
    with torch.no_grad():
        return cosine_distance(h, W.T[labels]) + margin


def afs_scale(h: torch.Tensor, scores: torch.Tensor) -> torch.Tensor:
    return h / scores.detach()[:, None]


@dataclass
class LossBreakdown:
    ce: torch.Tensor
    gsf: torch.Tensor
    cvpt: torch.Tensor
    total: torch.Tensor
    per_sample_ignore_scores: torch.Tensor = field(default_factory=lambda: torch.empty(0))
    per_sample_mb_scores: torch.Tensor = field(default_factory=lambda: torch.empty(0))

    def as_dict(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("ce", "gsf", "cvpt", "total")}


def combine_terms(ce, gsf, cvpt, alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * ce + alpha * gsf + cvpt


def total_loss(
    masked_logits: torch.Tensor,
    labels: torch.Tensor,
    ignore: torch.Tensor,
    cvpt: torch.Tensor,
    alpha: float = 0.5,
    gamma: float = 2.0,
    mb_scores: torch.Tensor | None = None,
) -> LossBreakdown:
    """``(1 - alpha) * CE + alpha * GSF + CVPT`` on the same masked logits."""
    ce = F.cross_entropy(masked_logits, labels)
    gsf = gsf_loss(masked_logits, labels, ignore, gamma)
    total = combine_terms(ce, gsf, cvpt, alpha)
    return LossBreakdown(
        ce=ce, gsf=gsf, cvpt=cvpt, total=total,
        per_sample_ignore_scores=ignore.detach(),
        per_sample_mb_scores=mb_scores.detach() if mb_scores is not None else torch.empty(0),
    )

