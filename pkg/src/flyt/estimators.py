"""scikit-learn compatible wrappers.

``FLYTScorer`` learns a scoring model from a feature matrix (one row per
upstream example) with the upstream pool and downstream task passed as fit
parameters.  ``StandardizedSum`` and ``INWeightedSum`` are the non-learned
aggregation baselines.  All three expose ``score_samples`` and act as
single-output transformers.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import InvalidInputError
from .mixing import ScoreTable, in_weighted_weights, standardize
from .model import DownstreamSet, Pool, ScoringParams, score_batch
from .training import TrainConfig, train_flyt


def _names(X, n):
    cols = getattr(X, "columns", None)
    if cols is not None:
        return [str(c) for c in cols]
    return [f"x{i}" for i in range(n)]


class _ScoreTransformer(TransformerMixin, BaseEstimator):
    def transform(self, X):
        return self.score_samples(X)[:, None]

    def _validate(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise InvalidInputError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X


class FLYTScorer(_ScoreTransformer):
    """Scoring model trained through reference-model updates.

    ``scorer="linear"`` with score columns as ``X`` gives the mixing variant;
    ``scorer="gated_mlp"`` with embedding-like features gives the embedding
    variant.  ``standardize`` freezes per-column statistics of ``X`` into the
    model.
    """

    def __init__(self, scorer="gated_mlp", steps=500, batch_size=64, downstream_batch_size=64,
                 scoring_lr=1e-2, reference_lr=5e-2, warmup_steps=50, optimizer="adamw", weight_decay=0.2,
                 downstream_loss="ce", d_emb=8, standardize=False, chunk_size=None, random_state=0):
        self.scorer = scorer
        self.steps = steps
        self.batch_size = batch_size
        self.downstream_batch_size = downstream_batch_size
        self.scoring_lr = scoring_lr
        self.reference_lr = reference_lr
        self.warmup_steps = warmup_steps
        self.optimizer = optimizer
        self.weight_decay = weight_decay
        self.downstream_loss = downstream_loss
        self.d_emb = d_emb
        self.standardize = standardize
        self.chunk_size = chunk_size
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        seed = 0 if self.random_state is None else int(self.random_state)
        return TrainConfig(
            steps=self.steps, batch_size=self.batch_size, downstream_batch_size=self.downstream_batch_size,
            scoring_lr=self.scoring_lr, reference_lr=self.reference_lr, warmup_steps=self.warmup_steps,
            optimizer=self.optimizer, weight_decay=self.weight_decay, downstream_loss=self.downstream_loss,
            scorer=self.scorer, d_emb=self.d_emb, chunk_size=self.chunk_size,
            data_seed=seed, template_seed=seed + 1, init_seed=seed + 2,
        )

    def fit(self, X, y=None, *, pool: Pool, downstream: DownstreamSet):
        names = _names(X, np.shape(X)[1] if np.ndim(X) == 2 else 0)
        X = check_array(X, dtype=np.float64)
        if X.shape[0] != len(pool):
            raise InvalidInputError("X needs one row per pool example")
        config = self._config()
        k = X.shape[1]
        if self.standardize:
            _, stats = standardize(ScoreTable(pool.uids, {n: X[:, j] for j, n in enumerate(names)}))
            means, stds = stats.means, stats.stds
        else:
            means, stds = np.zeros(k), np.ones(k)
        if config.scorer == "linear":
            scoring = ScoringParams.linear(names, means, stds)
        else:
            scoring = ScoringParams.gated_mlp(names, means, stds, hidden=config.scorer_hidden,
                                              seed=config.init_seed + 1, init_scale=config.scorer_init_scale)
        result = train_flyt(config, pool, downstream, features=X, scoring=scoring)
        self.scoring_params_ = result.scoring
        self.reference_params_ = result.reference
        self.training_log_ = result.log
        self.n_features_in_ = k
        return self

    def score_samples(self, X):
        return score_batch(self.scoring_params_, self._validate(X))


class StandardizedSum(_ScoreTransformer):
    """Row sum of columns, standardized with statistics learned in ``fit``."""

    def __init__(self, standardize=True):
        self.standardize = standardize

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if self.standardize:
            _, stats = standardize(ScoreTable(range(X.shape[0]), {f"x{j}": X[:, j] for j in range(X.shape[1])}))
            self.means_, self.stds_ = stats.means, stats.stds
        else:
            self.means_, self.stds_ = np.zeros(X.shape[1]), np.ones(X.shape[1])
        self.n_features_in_ = X.shape[1]
        return self

    def score_samples(self, X):
        X = self._validate(X)
        return ((X - self.means_) / self.stds_).sum(axis=1)


class INWeightedSum(_ScoreTransformer):
    """Accuracy-weighted sum of standardized columns with a fixed max/min weight ratio."""

    def __init__(self, accuracies=None, ratio=8.0):
        self.accuracies = accuracies
        self.ratio = ratio

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if self.accuracies is None or len(self.accuracies) != X.shape[1]:
            raise InvalidInputError("need one accuracy per column")
        self.weights_ = in_weighted_weights(self.accuracies, self.ratio)
        _, stats = standardize(ScoreTable(range(X.shape[0]), {f"x{j}": X[:, j] for j in range(X.shape[1])}))
        self.means_, self.stds_ = stats.means, stats.stds
        self.n_features_in_ = X.shape[1]
        return self

    def score_samples(self, X):
        X = self._validate(X)
        return ((X - self.means_) / self.stds_) @ self.weights_
