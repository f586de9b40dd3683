"""The scoring-model training loop.

Each step scores an upstream batch, turns the scores into softmax weights,
updates the reference model on the weighted CLIP loss, evaluates the
downstream loss at the updated reference model and moves the scoring model
along the resulting meta-gradient.  The two models keep separate optimizer
states and learning-rate schedules.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .exceptions import InvalidInputError, NumericalError
from .losses import DOWNSTREAM_LOSSES
from .metagrad import MetaBatch, meta_gradient_accumulated, meta_gradient_direct
from .model import DownstreamSet, Pool, ReferenceParams, ScoringParams, SCORER_KINDS, score_batch
from .optim import OPTIMIZERS, OptimizerSpec, apply_update

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 64
    downstream_batch_size: int = 64
    scoring_lr: float = 1e-2
    reference_lr: float = 5e-2
    warmup_steps: int = 50
    schedule: str = "cosine"
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.2
    downstream_loss: str = "ce"
    scorer: str = "gated_mlp"
    scorer_hidden: Optional[int] = None
    scorer_init_scale: float = 3.0
    d_emb: int = 8
    reference_hidden: Optional[int] = None
    reference_layers: int = 2
    chunk_size: Optional[int] = None
    data_seed: int = 0
    template_seed: int = 1
    init_seed: int = 2

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.downstream_batch_size < 1:
            raise InvalidInputError("need steps >= 0 and batch sizes >= 1")
        if not 0 <= self.warmup_steps <= self.steps:
            raise InvalidInputError("warmup_steps must lie in [0, steps]")
        if self.schedule not in ("cosine", "constant"):
            raise InvalidInputError(f"unknown schedule {self.schedule!r}")
        if self.optimizer not in OPTIMIZERS:
            raise InvalidInputError(f"unknown optimizer {self.optimizer!r}")
        if self.downstream_loss not in DOWNSTREAM_LOSSES:
            raise InvalidInputError(f"unknown downstream loss {self.downstream_loss!r}")
        if self.scorer not in SCORER_KINDS:
            raise InvalidInputError(f"unknown scorer {self.scorer!r}")
        if self.chunk_size is not None and not 1 <= self.chunk_size <= self.batch_size:
            raise InvalidInputError("chunk_size must lie in [1, batch_size]")

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        """Batch sizes, step counts and learning rates of the full-scale mixing setup."""
        base = dict(steps=5000, batch_size=4096, downstream_batch_size=3072, scoring_lr=1e-3,
                    reference_lr=5e-5, warmup_steps=100, downstream_loss="ce", scorer="linear")
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidInputError(f"unknown training config field(s): {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def optimizer_spec(self, learning_rate: float) -> OptimizerSpec:
        return OptimizerSpec(self.optimizer, learning_rate, self.beta1, self.beta2, self.eps, self.weight_decay)


def lr_schedule(step: int, base_lr: float, warmup_steps: int, total_steps: int, kind: str = "cosine") -> float:
    """Linear warmup to ``base_lr`` followed by cosine decay to zero."""
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if kind == "constant":
        return base_lr
    decay_steps = total_steps - warmup_steps
    if decay_steps <= 0:
        return base_lr
    return base_lr * 0.5 * (1 + math.cos(math.pi * (step - warmup_steps) / decay_steps))


@dataclass
class FLYTState:
    scoring: ScoringParams
    reference: ReferenceParams
    scoring_opt: OptimizerSpec
    reference_opt: OptimizerSpec
    step: int = 0


@dataclass
class TrainResult:
    scoring: ScoringParams
    reference: ReferenceParams
    log: list = field(default_factory=list)


def flyt_step(state: FLYTState, batch: MetaBatch, config: TrainConfig):
    """Advance both models by one step; returns ``(new_state, log_record)``."""
    lr_s = lr_schedule(state.step, config.scoring_lr, config.warmup_steps, config.steps, config.schedule)
    lr_r = lr_schedule(state.step, config.reference_lr, config.warmup_steps, config.steps, config.schedule)
    try:
        if config.chunk_size is None:
            mg = meta_gradient_direct(state.scoring, state.reference, state.reference_opt, batch,
                                      config.downstream_loss, lr_r)
        else:
            mg = meta_gradient_accumulated(state.scoring, state.reference, state.reference_opt, batch,
                                           config.downstream_loss, config.chunk_size, lr_r)
        phi_next, scoring_opt = apply_update(state.scoring.to_vector(), mg.grad_phi, state.scoring_opt, lr_s)
        if not np.all(np.isfinite(phi_next)):
            raise NumericalError("scoring update")
    except NumericalError as err:
        raise NumericalError(err.stage, step=state.step) from err
    new_state = FLYTState(
        scoring=state.scoring.with_vector(phi_next),
        reference=state.reference.with_vector(mg.theta_next),
        scoring_opt=scoring_opt,
        reference_opt=mg.optimizer_next,
        step=state.step + 1,
    )
    record = {
        "step": state.step,
        "L_up": mg.upstream_loss,
        "L_down": mg.downstream_loss,
        "lr_scoring": lr_s,
        "lr_reference": lr_r,
    }
    return new_state, record


def feature_names(d_in: int) -> tuple:
    return tuple(f"image_{i}" for i in range(d_in)) + tuple(f"text_{i}" for i in range(d_in))


def _batches(n: int, size: int, seed: int):
    """Endless stream of index batches; reshuffled every epoch, remainder dropped."""
    epoch = 0
    while True:
        order = np.random.default_rng([seed, epoch]).permutation(n)
        for start in range(0, n - size + 1, size):
            yield order[start : start + size]
        epoch += 1


def initial_state(config: TrainConfig, d_in: int, scoring: Optional[ScoringParams] = None,
                  reference: Optional[ReferenceParams] = None, input_names=None) -> FLYTState:
    if reference is None:
        reference = ReferenceParams.init(d_in, config.d_emb, hidden=config.reference_hidden,
                                         n_layers=config.reference_layers, seed=config.init_seed)
    if scoring is None:
        names = feature_names(d_in) if input_names is None else tuple(input_names)
        if config.scorer == "linear":
            scoring = ScoringParams.linear(names)
        else:
            scoring = ScoringParams.gated_mlp(names, hidden=config.scorer_hidden, seed=config.init_seed + 1,
                                              init_scale=config.scorer_init_scale)
    return FLYTState(scoring, reference, config.optimizer_spec(config.scoring_lr),
                     config.optimizer_spec(config.reference_lr))


def train_flyt(config: TrainConfig, upstream: Pool, downstream: DownstreamSet, features=None,
               scoring: Optional[ScoringParams] = None, reference: Optional[ReferenceParams] = None,
               callback: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train a scoring model for ``config.steps`` steps.

    ``features`` are the scorer inputs, one row per upstream example; by
    default the concatenated image and text features of the pool.
    """
    if len(upstream) < config.batch_size:
        raise InvalidInputError(f"upstream pool has {len(upstream)} examples, fewer than one batch ({config.batch_size})")
    if len(downstream) < config.downstream_batch_size:
        raise InvalidInputError(
            f"downstream pool has {len(downstream)} examples, fewer than one batch ({config.downstream_batch_size})"
        )
    if features is None:
        features = upstream.features()
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != len(upstream):
        raise InvalidInputError("need one feature row per upstream example")
    state = initial_state(config, upstream.d_in, scoring, reference)
    if features.shape[1] != state.scoring.k:
        raise InvalidInputError(f"scorer expects {state.scoring.k} features, got {features.shape[1]}")
    if state.reference.d_in != upstream.d_in:
        raise InvalidInputError("reference model width does not match the pool")

    up_batches = _batches(len(upstream), config.batch_size, config.data_seed)
    down_batches = _batches(len(downstream), config.downstream_batch_size, config.data_seed + 1)
    template_rng = np.random.default_rng(config.template_seed)
    log = []
    for _ in range(config.steps):
        idx = next(up_batches)
        down = downstream.subset(next(down_batches))
        batch = MetaBatch(upstream.subset(idx), features[idx], down, down.sample_templates(template_rng))
        state, record = flyt_step(state, batch, config)
        log.append(record)
        if callback is not None:
            callback(record)
        if state.step % 100 == 0:
            logger.info("step %d  L_up %.4f  L_down %.4f", record["step"], record["L_up"], record["L_down"])
    return TrainResult(state.scoring, state.reference, log)


def score_pool(scoring: ScoringParams, pool: Pool, features=None):
    """Score every pool example, returning a one-column ``"flyt"`` table."""
    from .mixing import ScoreTable

    if len(pool) == 0:
        return ScoreTable((), {"flyt": np.zeros(0)})
    if features is None:
        if 2 * pool.d_in != scoring.k:
            raise InvalidInputError(f"scorer expects {scoring.k} features, pool provides {2 * pool.d_in}")
        features = pool.features()
    return ScoreTable(pool.uids, {"flyt": score_batch(scoring, features)})
