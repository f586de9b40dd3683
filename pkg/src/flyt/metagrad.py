"""Gradients of the downstream loss through one reference-model update.

Two routes compute the same quantity, the gradient with respect to the scoring
parameters of the downstream loss evaluated at the updated reference model:

* :func:`meta_gradient_direct` builds the whole chain
  scores -> weights -> weighted loss -> reference gradient -> update ->
  downstream loss in one autograd graph and differentiates it.
* :func:`meta_gradient_accumulated` never holds the graph from the scoring
  parameters to the reference parameters.  It accumulates the reference
  gradient chunk by chunk with the per-embedding loss gradients held fixed,
  back-propagates the downstream loss to the gradient vector itself, pushes
  that vector through the encoder in forward mode, and differentiates the
  resulting inner products with respect to the weights.

The temperature is a reference parameter that acts on the loss directly rather
than through the embeddings, so the accumulated route carries its term
separately.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .dual import embedding_directional_derivatives, embedding_directional_derivatives_fd
from .exceptions import InvalidInputError, NumericalError
from .losses import DOWNSTREAM_LOSSES, check_downstream, downstream_from_embeddings, softmax_weights, weighted_clip_loss
from .model import DownstreamSet, Pool, ReferenceParams, ScoringParams, as_tensor, scores_from_vector, tower_forward
from .optim import OptimizerSpec, apply_update


@dataclass(frozen=True)
class MetaBatch:
    """One step's worth of data.

    ``features`` are the raw scorer inputs for ``upstream`` (one row per
    example); ``templates`` holds one sampled template per downstream class.
    """

    upstream: Pool
    features: np.ndarray
    downstream: DownstreamSet
    templates: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != len(self.upstream):
            raise InvalidInputError("need one feature row per upstream example")
        if len(self.upstream) < 1:
            raise InvalidInputError("upstream batch must be nonempty")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "templates", np.asarray(self.templates, dtype=np.float64))


@dataclass
class MetaGradient:
    grad_phi: np.ndarray
    downstream_loss: float
    upstream_loss: float
    grad_weights: np.ndarray
    reference_grad: np.ndarray
    theta_next: np.ndarray
    optimizer_next: OptimizerSpec


def _finite(x: torch.Tensor, stage: str):
    if not torch.isfinite(x.detach()).all():
        raise NumericalError(stage)


def _check(phi: ScoringParams, theta: ReferenceParams, batch: MetaBatch, loss_choice: str):
    if loss_choice not in DOWNSTREAM_LOSSES:
        raise InvalidInputError(f"unknown downstream loss {loss_choice!r}; choose from {DOWNSTREAM_LOSSES}")
    if batch.features.shape[1] != phi.k:
        raise InvalidInputError(f"scorer expects {phi.k} features, batch has {batch.features.shape[1]}")
    if batch.upstream.d_in != theta.d_in:
        raise InvalidInputError("upstream feature width does not match the reference model")
    check_downstream(batch.downstream, batch.templates, theta.d_in)


def _weights(phi: ScoringParams, phi_vec: torch.Tensor, features: np.ndarray) -> torch.Tensor:
    scores = scores_from_vector(phi, phi_vec, as_tensor(phi.standardize(features)))
    _finite(scores, "score")
    return softmax_weights(scores)


def _upstream_loss(theta: ReferenceParams, theta_vec, pool: Pool, weights):
    img, txt, log_tau = theta.split(theta_vec)
    u = tower_forward(img, as_tensor(pool.image))
    v = tower_forward(txt, as_tensor(pool.text))
    return weighted_clip_loss(u, v, weights, torch.exp(log_tau))


def _downstream_loss(theta: ReferenceParams, theta_vec, batch: MetaBatch, loss_choice, ds_log_temperature):
    img, txt, _ = theta.split(theta_vec)
    x = tower_forward(img, as_tensor(batch.downstream.image))
    t = tower_forward(txt, as_tensor(batch.templates))
    return downstream_from_embeddings(loss_choice, x, t, batch.downstream.labels, torch.exp(ds_log_temperature))


def upstream_grad(theta: ReferenceParams, batch, weights, return_loss=False):
    """Gradient of the weighted CLIP loss with respect to every reference parameter."""
    pool = batch if isinstance(batch, Pool) else Pool.from_records(batch)
    if pool.d_in != theta.d_in:
        raise InvalidInputError("batch feature width does not match the reference model")
    theta_vec = theta.tensor().requires_grad_()
    loss = _upstream_loss(theta, theta_vec, pool, as_tensor(weights))
    (g,) = torch.autograd.grad(loss, theta_vec)
    if return_loss:
        return g.numpy(), float(loss.detach())
    return g.numpy()


def meta_gradient_direct(phi: ScoringParams, theta: ReferenceParams, opt: OptimizerSpec, batch: MetaBatch,
                         loss_choice: str = "ce_temperature", learning_rate: Optional[float] = None) -> MetaGradient:
    """Meta-gradient by differentiating the full chain in one graph."""
    _check(phi, theta, batch, loss_choice)
    phi_vec = phi.tensor().requires_grad_()
    weights = _weights(phi, phi_vec, batch.features)

    theta_vec = theta.tensor().requires_grad_()
    up_loss = _upstream_loss(theta, theta_vec, batch.upstream, weights)
    _finite(up_loss, "upstream loss")
    (g,) = torch.autograd.grad(up_loss, theta_vec, create_graph=True)
    _finite(g, "upstream gradient")

    theta_next, opt_next = apply_update(theta_vec.detach(), g, opt, learning_rate)
    _finite(theta_next, "reference update")
    down_loss = _downstream_loss(theta, theta_next, batch, loss_choice, phi.split(phi_vec)[2])
    _finite(down_loss, "downstream loss")

    grad_phi, grad_w = torch.autograd.grad(down_loss, [phi_vec, weights])
    _finite(grad_phi, "meta-gradient")
    return MetaGradient(
        grad_phi=grad_phi.numpy(),
        downstream_loss=float(down_loss.detach()),
        upstream_loss=float(up_loss.detach()),
        grad_weights=grad_w.numpy(),
        reference_grad=g.detach().numpy(),
        theta_next=theta_next.detach().numpy(),
        optimizer_next=opt_next,
    )


def _chunks(n: int, chunk_size: int):
    return [slice(i, min(i + chunk_size, n)) for i in range(0, n, chunk_size)]


def meta_gradient_accumulated(phi: ScoringParams, theta: ReferenceParams, opt: OptimizerSpec, batch: MetaBatch,
                              loss_choice: str = "ce_temperature", chunk_size: int = 1,
                              learning_rate: Optional[float] = None, tangents: str = "dual") -> MetaGradient:
    """Meta-gradient via chunked accumulation.

    ``tangents`` selects how embedding directional derivatives are obtained:
    ``"dual"`` (forward-mode, exact) or ``"fd"`` (central differences).
    """
    _check(phi, theta, batch, loss_choice)
    n = len(batch.upstream)
    if not 1 <= chunk_size <= n:
        raise InvalidInputError(f"chunk_size must lie in [1, {n}]")
    if tangents not in ("dual", "fd"):
        raise InvalidInputError("tangents must be 'dual' or 'fd'")
    chunks = _chunks(n, chunk_size)
    pool = batch.upstream
    lt_index = theta.block_slices()["log_temperature"].start

    phi_vec = phi.tensor().requires_grad_()
    weights = _weights(phi, phi_vec, batch.features)
    w_val = weights.detach()

    theta_vec = theta.tensor()
    img_layers, txt_layers, _ = theta.split(theta_vec)
    with torch.no_grad():
        u_all = tower_forward(img_layers, as_tensor(pool.image))
        v_all = tower_forward(txt_layers, as_tensor(pool.text))
    log_tau = torch.tensor(theta.log_temperature, dtype=u_all.dtype)

    # (i) reference gradient with the per-embedding loss gradients held fixed
    u_leaf, v_leaf, lt_leaf = u_all.clone().requires_grad_(), v_all.clone().requires_grad_(), log_tau.clone().requires_grad_()
    up_loss = weighted_clip_loss(u_leaf, v_leaf, w_val, torch.exp(lt_leaf))
    _finite(up_loss, "upstream loss")
    grad_u, grad_v, grad_lt = torch.autograd.grad(up_loss, [u_leaf, v_leaf, lt_leaf])
    g = torch.zeros_like(theta_vec)
    for c in chunks:
        theta_leaf = theta_vec.clone().requires_grad_()
        img_c, txt_c, _ = theta.split(theta_leaf)
        u_c = tower_forward(img_c, as_tensor(pool.image[c]))
        v_c = tower_forward(txt_c, as_tensor(pool.text[c]))
        (g_c,) = torch.autograd.grad([u_c, v_c], theta_leaf, grad_outputs=[grad_u[c], grad_v[c]])
        g = g + g_c
    g[lt_index] += grad_lt
    _finite(g, "upstream gradient")

    # (ii) sensitivity of the downstream loss to the gradient vector
    g_leaf = g.clone().requires_grad_()
    theta_next, opt_next = apply_update(theta_vec, g_leaf, opt, learning_rate)
    _finite(theta_next, "reference update")
    phi_leaf = phi.tensor().requires_grad_()
    down_loss = _downstream_loss(theta, theta_next, batch, loss_choice, phi.split(phi_leaf)[2])
    _finite(down_loss, "downstream loss")
    direction, grad_phi_temperature = torch.autograd.grad(
        down_loss, [g_leaf, phi_leaf], allow_unused=True, materialize_grads=True
    )
    _finite(direction, "downstream sensitivity")

    # (iii) differentiate <dl/df_i (w), D_i> with respect to the weights, chunk by chunk
    u_leaf, v_leaf, lt_leaf = u_all.clone().requires_grad_(), v_all.clone().requires_grad_(), log_tau.clone().requires_grad_()
    loss_w = weighted_clip_loss(u_leaf, v_leaf, weights, torch.exp(lt_leaf))
    gu_w, gv_w, glt_w = torch.autograd.grad(loss_w, [u_leaf, v_leaf, lt_leaf], create_graph=True)
    direction_np = direction.numpy()
    grad_w = torch.zeros_like(w_val)
    for c in chunks:
        if tangents == "dual":
            du, dv = embedding_directional_derivatives(theta, direction_np, pool.image[c], pool.text[c])
        else:
            du, dv = embedding_directional_derivatives_fd(theta, direction_np, pool.image[c], pool.text[c])
        s_c = (gu_w[c] * as_tensor(du)).sum() + (gv_w[c] * as_tensor(dv)).sum()
        (gw_c,) = torch.autograd.grad(s_c, weights, retain_graph=True)
        grad_w = grad_w + gw_c
    (gw_t,) = torch.autograd.grad(glt_w * direction[lt_index], weights, retain_graph=True)
    grad_w = grad_w + gw_t

    # (iv) chain through the scorer and softmax
    (grad_phi,) = torch.autograd.grad(weights, phi_vec, grad_outputs=grad_w)
    grad_phi = grad_phi + grad_phi_temperature
    _finite(grad_phi, "meta-gradient")
    return MetaGradient(
        grad_phi=grad_phi.numpy(),
        downstream_loss=float(down_loss.detach()),
        upstream_loss=float(up_loss.detach()),
        grad_weights=grad_w.numpy(),
        reference_grad=g.numpy(),
        theta_next=theta_next.detach().numpy(),
        optimizer_next=opt_next,
    )


def downstream_objective(phi: ScoringParams, theta: ReferenceParams, opt: OptimizerSpec, batch: MetaBatch,
                         loss_choice: str = "ce_temperature", learning_rate: Optional[float] = None,
                         weights=None) -> float:
    """Downstream loss after one reference update, as a plain number.

    With ``weights`` given the scorer is bypassed (its downstream temperature
    is still used).  This is the function the finite-difference oracle probes.
    """
    _check(phi, theta, batch, loss_choice)
    phi_vec = phi.tensor()
    if weights is None:
        w = _weights(phi, phi_vec, batch.features)
    else:
        w = as_tensor(weights)
    theta_vec = theta.tensor().requires_grad_()
    up_loss = _upstream_loss(theta, theta_vec, batch.upstream, w)
    (g,) = torch.autograd.grad(up_loss, theta_vec)
    theta_next, _ = apply_update(theta_vec.detach(), g, opt, learning_rate)
    with torch.no_grad():
        return float(_downstream_loss(theta, theta_next, batch, loss_choice, phi.split(phi_vec)[2]))
