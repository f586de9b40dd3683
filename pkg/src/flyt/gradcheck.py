"""Finite-difference checks of the meta-gradient and the JSON report they produce."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .losses import DOWNSTREAM_LOSSES
from .metagrad import MetaBatch, downstream_objective, meta_gradient_accumulated, meta_gradient_direct
from .model import DownstreamSet, Pool, ReferenceParams, ScoringParams
from .optim import OptimizerSpec


def central_difference(f, x, step=1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        up, down = x.copy(), x.copy()
        up[i] += step
        down[i] -= step
        grad[i] = (f(up) - f(down)) / (2 * step)
    return grad


def relative_errors(analytic, numeric, floor=1e-5) -> np.ndarray:
    """Coordinate-wise ``|a - n| / max(|a|, |n|, floor * max-magnitude)``.

    The floor keeps coordinates whose true value is (near) zero, such as the
    scorer's output bias, from producing meaningless ratios.
    """
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), max(floor * scale, 1e-300))
    return np.abs(a - n) / denom


def norm_relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


@dataclass
class ToyProblem:
    scoring: ScoringParams
    reference: ReferenceParams
    optimizer: OptimizerSpec
    batch: MetaBatch


def toy_problem(seed=0, optimizer="sgd", batch_size=8, downstream_batch_size=8, d_in=4, d_emb=3,
                n_features=4, n_classes=3, scorer="linear") -> ToyProblem:
    """Small random problem for gradient checks.

    The AdamW variant starts from a mid-training state (nonzero moments,
    step 5) so the update depends smoothly and non-trivially on the gradient.
    """
    rng = np.random.default_rng([seed, 7])
    reference = ReferenceParams.init(d_in, d_emb, seed=int(rng.integers(2**31)))
    pool = Pool(tuple(f"t{i}" for i in range(batch_size)),
                rng.standard_normal((batch_size, d_in)), rng.standard_normal((batch_size, d_in)))
    downstream = DownstreamSet(
        rng.standard_normal((downstream_batch_size, d_in)),
        rng.integers(0, n_classes, downstream_batch_size),
        tuple(rng.standard_normal((2, d_in)) for _ in range(n_classes)),
    )
    names = [f"f{i}" for i in range(n_features)]
    features = rng.standard_normal((batch_size, n_features))
    if scorer == "linear":
        scoring = ScoringParams.linear(names, means=rng.standard_normal(n_features) * 0.1,
                                       stds=rng.uniform(0.5, 2.0, n_features),
                                       weights=rng.standard_normal(n_features), bias=rng.standard_normal(),
                                       downstream_temperature=rng.uniform(2.0, 10.0))
    else:
        scoring = ScoringParams.gated_mlp(names, hidden=2 * n_features, seed=int(rng.integers(2**31)),
                                          downstream_temperature=rng.uniform(2.0, 10.0))
    if optimizer == "sgd":
        opt = OptimizerSpec("sgd", learning_rate=0.5)
    else:
        p = reference.size
        opt = OptimizerSpec("adamw", learning_rate=0.05, weight_decay=0.2,
                            exp_avg=0.1 * rng.standard_normal(p), exp_avg_sq=rng.uniform(0.01, 0.1, p), step=5)
    batch = MetaBatch(pool, features, downstream, downstream.sample_templates(rng))
    return ToyProblem(scoring, reference, opt, batch)


def check_problem(problem: ToyProblem, loss_choice: str, step=1e-5, tolerance=1e-4,
                  chunk_sizes=(1, 2, 3, 8), chunk_tolerance=1e-9) -> dict:
    """Compare the direct meta-gradient with finite differences and the accumulated route."""
    phi, theta, opt, batch = problem.scoring, problem.reference, problem.optimizer, problem.batch
    direct = meta_gradient_direct(phi, theta, opt, batch, loss_choice)

    def objective(vec):
        return downstream_objective(phi.with_vector(vec), theta, opt, batch, loss_choice)

    numeric = central_difference(objective, phi.to_vector(), step)
    errors = relative_errors(direct.grad_phi, numeric)
    blocks = {}
    for name, sl in phi.block_slices().items():
        e = errors[sl]
        blocks[name] = {
            "max_relative_error": float(e.max()),
            "mean_relative_error": float(e.mean()),
            "passed": bool(e.max() < tolerance),
        }
    accumulated = {}
    n = len(batch.upstream)
    for c in chunk_sizes:
        if 1 <= c <= n:
            acc = meta_gradient_accumulated(phi, theta, opt, batch, loss_choice, c)
            err = norm_relative_error(acc.grad_phi, direct.grad_phi)
            accumulated[str(c)] = {"relative_error": err, "passed": bool(err < chunk_tolerance)}
    shift = phi.block_slices()["bias"]
    shift_component = float(abs(direct.grad_phi[shift][0]))
    return {
        "max_relative_error": float(errors.max()),
        "passed": bool(errors.max() < tolerance) and all(v["passed"] for v in accumulated.values()),
        "blocks": blocks,
        "accumulated": accumulated,
        "shift_component": shift_component,
    }


def gradcheck_report(seeds=range(10), optimizers=("sgd", "adamw"), losses=DOWNSTREAM_LOSSES, scorer="linear",
                     step=1e-5, tolerance=1e-4, chunk_sizes=(1, 2, 3, 8), **toy_kwargs) -> dict:
    cases = []
    for seed, opt, loss in itertools.product(seeds, optimizers, losses):
        problem = toy_problem(seed, opt, scorer=scorer, **toy_kwargs)
        result = check_problem(problem, loss, step, tolerance, chunk_sizes)
        cases.append({"seed": seed, "optimizer": opt, "loss": loss, **result})
    return {
        "oracle": f"central finite differences over scoring parameters, step {step:g}, float64",
        "second_oracle": "direct full-chain meta-gradient vs chunked accumulation",
        "tolerance": tolerance,
        "max_relative_error": max(c["max_relative_error"] for c in cases),
        "passed": all(c["passed"] for c in cases),
        "cases": cases,
    }
