"""Text-embedding classification of mask embeddings and caption grounding."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .masks import Assignment


class Temperature(nn.Module):
    """Positive learnable scalar stored as its logarithm."""

    def __init__(self, init: float = 0.07):
        super().__init__()
        if init <= 0:
            raise ValueError("temperature must be positive")
        self.log_value = nn.Parameter(torch.tensor(math.log(init)))

    @property
    def value(self) -> Tensor:
        return self.log_value.exp()

    def forward(self) -> Tensor:
        return self.value


def _tau(tau: Tensor | Temperature | float) -> Tensor | float:
    return tau.value if isinstance(tau, Temperature) else tau


def class_logits(z: Tensor, vocab_embedding: Tensor, tau: Tensor | Temperature | float) -> Tensor:
    return z @ vocab_embedding.T / _tau(tau)


def class_probs(z: Tensor, vocab_embedding: Tensor, tau: Tensor | Temperature | float) -> Tensor:
    """Softmax over categories of scaled inner products; rows of ``z`` are independent."""
    return class_logits(z, vocab_embedding, tau).softmax(dim=-1)


def category_loss(z: Tensor, labels: Tensor, a: Assignment, vocab_embedding: Tensor,
                  tau: Tensor | Temperature | float, null_embedding: Tensor | None = None,
                  null_weight: float = 1.0) -> Tensor:
    """Cross-entropy over all N queries of one image.

    Matched queries target their ground-truth label; unmatched queries target
    the null row appended as the last category (weighted by ``null_weight``).
    Without a null embedding only matched queries contribute.
    """
    k = vocab_embedding.shape[0]
    if len(labels) and int(labels.max()) >= k:
        raise ValueError(f"label index {int(labels.max())} outside vocabulary of size {k}")
    n = z.shape[0]
    if null_embedding is not None:
        rows = torch.cat([vocab_embedding, F.normalize(null_embedding, dim=-1)[None]], dim=0)
        targets = torch.full((n,), k, dtype=torch.long, device=z.device)
        weights = torch.full((n,), float(null_weight), dtype=z.dtype, device=z.device)
    else:
        rows = vocab_embedding
        targets = torch.zeros(n, dtype=torch.long, device=z.device)
        weights = torch.zeros(n, dtype=z.dtype, device=z.device)
    if a.pairs:
        q = torch.tensor(a.queries, dtype=torch.long, device=z.device)
        targets[q] = labels[torch.tensor(a.targets, dtype=torch.long, device=labels.device)].to(z.device)
        weights[q] = 1.0
    if float(weights.sum()) == 0.0:
        return z.sum() * 0.0
    ce = F.cross_entropy(class_logits(z, rows, tau), targets, reduction="none")
    return (weights * ce).sum() / weights.sum()


def objectness_loss(z: Tensor, a: Assignment, word_embedding: Tensor, tau: Tensor | Temperature | float,
                    null_embedding: Tensor, null_weight: float = 1.0) -> Tensor:
    """Null-row supervision without category labels.

    The softmax runs over the image's caption words plus the null row.
    Unmatched queries are pushed toward null; matched ones away from it.
    """
    n = z.shape[0]
    rows = torch.cat([word_embedding, F.normalize(null_embedding, dim=-1)[None]], dim=0)
    log_p = class_logits(z, rows, tau).log_softmax(-1)
    log_null = log_p[:, -1]
    log_not_null = torch.logsumexp(log_p[:, :-1], dim=-1) if word_embedding.shape[0] else torch.full_like(log_null, -1e4)
    matched = torch.zeros(n, dtype=torch.bool, device=z.device)
    if a.pairs:
        matched[torch.tensor(a.queries, dtype=torch.long, device=z.device)] = True
    weights = torch.where(matched, torch.ones_like(log_null), torch.full_like(log_null, null_weight))
    loss = torch.where(matched, -log_not_null, -log_null)
    return (weights * loss).sum() / weights.sum()


@dataclass
class GroundingItem:
    embeddings: Tensor       # (N, d) mask embeddings of one image
    word_embeddings: Tensor  # (K, d) embeddings of its caption nouns, K >= 1


def grounding_similarity(z: Tensor, words: Tensor, tau: Tensor | Temperature | float) -> Tensor:
    """``(1/K) sum_k sum_i p(z_i, words)_k <z_i, w_k>`` for one image-caption pair."""
    if words.shape[0] == 0:
        raise ValueError("grounding needs at least one word")
    sims = z @ words.T                      # (N, K)
    p = (sims / _tau(tau)).softmax(dim=-1)  # softmax over words, per region
    return (p * sims).sum() / words.shape[0]


def grounding_matrix(batch: Sequence[GroundingItem], tau: Tensor | Temperature | float) -> Tensor:
    """B x B matrix with entry (m, n) = similarity of image m and caption n."""
    if not batch:
        raise ValueError("empty grounding batch")
    z = torch.stack([item.embeddings for item in batch])  # (B, N, d)
    kmax = max(item.word_embeddings.shape[0] for item in batch)
    if min(item.word_embeddings.shape[0] for item in batch) == 0:
        raise ValueError("every grounding item needs at least one word")
    d = z.shape[-1]
    words = z.new_zeros(len(batch), kmax, d)
    valid = torch.zeros(len(batch), kmax, dtype=torch.bool, device=z.device)
    for n, item in enumerate(batch):
        k = item.word_embeddings.shape[0]
        words[n, :k] = item.word_embeddings
        valid[n, :k] = True
    sims = torch.einsum("mid,nkd->mnik", z, words)  # (B_img, B_cap, N, K)
    logits = (sims / _tau(tau)).masked_fill(~valid[None, :, None, :], float("-inf"))
    p = logits.softmax(dim=-1)
    counts = valid.sum(-1).to(z.dtype)              # words per caption
    return (p * sims.masked_fill(~valid[None, :, None, :], 0.0)).sum(dim=(2, 3)) / counts[None, :]


def grounding_loss(batch: Sequence[GroundingItem], tau: Tensor | Temperature | float,
                   tau_contrast: Tensor | Temperature | float) -> Tensor:
    """Symmetric contrastive loss over the image-caption similarity matrix.

    ``tau`` scales the per-region word softmax inside the similarity;
    ``tau_contrast`` scales the batch softmax. The two directions are summed.
    """
    return contrastive_loss(grounding_matrix(batch, tau), tau_contrast)


def contrastive_loss(g: Tensor, tau: Tensor | Temperature | float) -> Tensor:
    """Image->caption plus caption->image cross-entropy on a B x B similarity matrix."""
    g = g / _tau(tau)
    target = torch.arange(g.shape[0], device=g.device)
    image_to_caption = F.cross_entropy(g, target)
    caption_to_image = F.cross_entropy(g.T, target)
    return image_to_caption + caption_to_image
