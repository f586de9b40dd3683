"""Contrastive, weighted-contrastive and downstream losses.

All functions accept numpy arrays or torch tensors.  Given tensors they return
a differentiable scalar tensor; given arrays they return a Python float.
Losses are sums over the batch, not means.
"""

from __future__ import annotations

import numpy as np
import torch

from .exceptions import InvalidInputError
from .model import ReferenceParams, DownstreamSet, as_tensor, tower_forward

DOWNSTREAM_LOSSES = ("ce", "ce_temperature", "clip")


def _any_tensor(*xs) -> bool:
    return any(isinstance(x, torch.Tensor) for x in xs)


def _out(value: torch.Tensor, as_tensor_out: bool):
    return value if as_tensor_out else float(value.detach())


def similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # broadcast-and-sum keeps each entry's reduction order independent of batch size
    return (a[:, None, :] * b[None, :, :]).sum(-1)


def softmax_weights(scores):
    """Softmax over a score vector, computed with max subtraction."""
    tensor_in = _any_tensor(scores)
    s = as_tensor(scores)
    if s.ndim != 1 or s.shape[0] < 1:
        raise InvalidInputError("scores must be a nonempty vector")
    if not torch.isfinite(s.detach()).all():
        raise InvalidInputError("scores must be finite")
    z = s - s.detach().max()
    e = torch.exp(z)
    w = e / e.sum()
    return w if tensor_in else w.numpy()


def _check_pair(u, v):
    if u.ndim != 2 or u.shape != v.shape or u.shape[0] < 1:
        raise InvalidInputError(f"embeddings must be two equal (B, d) matrices, got {tuple(u.shape)}, {tuple(v.shape)}")


def _contrast(logits: torch.Tensor) -> torch.Tensor:
    return -(logits.diagonal() - torch.logsumexp(logits, dim=1)).sum()


def clip_loss(image_emb, text_emb, temperature):
    """Symmetric CLIP loss ``(l_image + l_text) / 2`` with summed contrast terms."""
    tensor_in = _any_tensor(image_emb, text_emb, temperature)
    u, v, tau = as_tensor(image_emb), as_tensor(text_emb), as_tensor(temperature)
    _check_pair(u, v)
    if not tau.detach() > 0:
        raise InvalidInputError("temperature must be positive")
    logits = tau * similarity(u, v)
    return _out((_contrast(logits) + _contrast(logits.T)) / 2, tensor_in)


def weighted_clip_loss(image_emb, text_emb, weights, temperature):
    """Weighted CLIP loss.

    Each example's weight scales its term as an anchor and its contribution to
    every denominator.  Zero-weight examples are removed from the batch, which
    makes a zero weight exactly equivalent to excluding the example.
    """
    tensor_in = _any_tensor(image_emb, text_emb, weights, temperature)
    u, v, w, tau = as_tensor(image_emb), as_tensor(text_emb), as_tensor(weights), as_tensor(temperature)
    _check_pair(u, v)
    if w.shape != (u.shape[0],):
        raise InvalidInputError(f"need one weight per example, got shape {tuple(w.shape)}")
    wd = w.detach()
    if not torch.isfinite(wd).all() or (wd < 0).any():
        raise InvalidInputError("weights must be finite and nonnegative")
    keep = torch.nonzero(wd > 0).squeeze(1)
    if keep.numel() == 0:
        raise InvalidInputError("at least one weight must be positive")
    if not tau.detach() > 0:
        raise InvalidInputError("temperature must be positive")
    u, v, w = u[keep], v[keep], w[keep]
    log_w = torch.log(w)
    sim = tau * similarity(u, v)

    def contrast(logits):
        logits = logits + log_w[None, :]
        return -(w * (logits.diagonal() - torch.logsumexp(logits, dim=1))).sum()

    return _out((contrast(sim) + contrast(sim.T)) / 2, tensor_in)


# ---------------------------------------------------------------------------
# downstream losses on embeddings


def ce_from_embeddings(image_emb: torch.Tensor, template_emb: torch.Tensor, labels, temperature) -> torch.Tensor:
    """Sum of K-way cross-entropies of image embeddings against class templates."""
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    logits = temperature * similarity(image_emb, template_emb)
    picked = logits.gather(1, labels[:, None]).squeeze(1)
    return -(picked - torch.logsumexp(logits, dim=1)).sum()


def downstream_clip_from_embeddings(image_emb: torch.Tensor, template_emb: torch.Tensor, labels, temperature) -> torch.Tensor:
    """Two-directional contrastive loss between images and their own class templates."""
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    paired = template_emb[labels]
    logits = temperature * similarity(image_emb, paired)
    return _contrast(logits) + _contrast(logits.T)


def downstream_from_embeddings(kind: str, image_emb, template_emb, labels, temperature) -> torch.Tensor:
    if kind == "ce":
        return ce_from_embeddings(image_emb, template_emb, labels, 1.0)
    if kind == "ce_temperature":
        return ce_from_embeddings(image_emb, template_emb, labels, temperature)
    if kind == "clip":
        return downstream_clip_from_embeddings(image_emb, template_emb, labels, temperature)
    raise InvalidInputError(f"unknown downstream loss {kind!r}; choose from {DOWNSTREAM_LOSSES}")


def check_downstream(batch: DownstreamSet, sampled_templates, d_in: int) -> np.ndarray:
    templates = np.asarray(sampled_templates, dtype=np.float64)
    if len(batch) < 1:
        raise InvalidInputError("downstream batch must be nonempty")
    if templates.shape != (batch.n_classes, d_in):
        raise InvalidInputError(
            f"need exactly one template per class: expected shape {(batch.n_classes, d_in)}, got {templates.shape}"
        )
    if batch.image.shape[1] != d_in:
        raise InvalidInputError(f"downstream feature width {batch.image.shape[1]} does not match model width {d_in}")
    return templates


def _downstream(kind, params: ReferenceParams, batch: DownstreamSet, sampled_templates, temperature):
    templates = check_downstream(batch, sampled_templates, params.d_in)
    tensor_in = _any_tensor(temperature)
    tau = as_tensor(temperature)
    if not tau.detach() > 0:
        raise InvalidInputError("downstream temperature must be positive")
    img_layers, txt_layers, _ = params.split(params.tensor())
    x = tower_forward(img_layers, as_tensor(batch.image))
    t = tower_forward(txt_layers, as_tensor(templates))
    return _out(downstream_from_embeddings(kind, x, t, batch.labels, tau), tensor_in)


def downstream_ce_loss(params: ReferenceParams, batch: DownstreamSet, sampled_templates, temperature=1.0):
    """Cross-entropy over template logits scaled by ``temperature``.

    ``temperature=1`` is the plain cross-entropy variant.
    """
    return _downstream("ce_temperature", params, batch, sampled_templates, temperature)


def downstream_clip_loss(params: ReferenceParams, batch: DownstreamSet, sampled_templates, temperature):
    return _downstream("clip", params, batch, sampled_templates, temperature)
