"""Score tables, standardization, baseline aggregators and the linear mixer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .exceptions import InvalidInputError
from .model import DownstreamSet, Pool, ReferenceParams, ScoringParams, score_batch


class ScoreTable:
    """Named score columns aligned with a list of unique uids."""

    def __init__(self, uids, columns: Mapping[str, object]):
        self.uids = tuple(str(u) for u in uids)
        if len(set(self.uids)) != len(self.uids):
            seen = set()
            dup = next(u for u in self.uids if u in seen or seen.add(u))
            raise InvalidInputError(f"duplicate uid {dup!r}")
        self.columns = {}
        for name, values in columns.items():
            arr = np.array(values, dtype=np.float64).reshape(-1)
            if arr.shape[0] != len(self.uids):
                raise InvalidInputError(f"column {name!r} has {arr.shape[0]} values for {len(self.uids)} uids")
            if str(name) == "uid":
                raise InvalidInputError("'uid' is reserved and cannot be a score column")
            self.columns[str(name)] = arr

    def __len__(self):
        return len(self.uids)

    def __repr__(self):
        return f"ScoreTable({len(self)} rows, columns={self.names})"

    def __eq__(self, other):
        if not isinstance(other, ScoreTable):
            return NotImplemented
        return (
            self.uids == other.uids
            and self.names == other.names
            and all(np.array_equal(self.columns[n], other.columns[n]) for n in self.names)
        )

    @property
    def names(self) -> list:
        return list(self.columns)

    def column(self, name: str) -> np.ndarray:
        if name not in self.columns:
            raise InvalidInputError(f"missing column {name!r}; table has {self.names}")
        return self.columns[name]

    def matrix(self, names=None) -> np.ndarray:
        names = self.names if names is None else list(names)
        if not self.uids:
            return np.zeros((0, len(names)))
        return np.stack([self.column(n) for n in names], axis=1)

    def take(self, indices) -> "ScoreTable":
        indices = np.asarray(indices, dtype=np.int64)
        return ScoreTable([self.uids[i] for i in indices], {n: c[indices] for n, c in self.columns.items()})

    def align(self, uids) -> "ScoreTable":
        """Rows reordered to follow ``uids``; every uid must be present."""
        index = {u: i for i, u in enumerate(self.uids)}
        try:
            order = [index[str(u)] for u in uids]
        except KeyError as err:
            raise InvalidInputError(f"uid {err.args[0]!r} missing from score table") from None
        return self.take(order)


def _single(table: ScoreTable, name: str, values) -> ScoreTable:
    return ScoreTable(table.uids, {name: values})


@dataclass(frozen=True)
class ColumnStats:
    names: tuple
    means: np.ndarray
    stds: np.ndarray


def standardize(table: ScoreTable):
    """Shift and scale every column to zero mean and unit population std.

    Returns ``(standardized_table, ColumnStats)``.
    """
    if not table.names:
        raise InvalidInputError("table has no score columns")
    means, stds, cols = [], [], {}
    for name in table.names:
        x = table.columns[name]
        if not np.all(np.isfinite(x)):
            raise InvalidInputError(f"column {name!r} contains non-finite values")
        mu = x.mean() if len(x) else 0.0
        sigma = x.std() if len(x) else 0.0
        if not sigma > 0:
            raise InvalidInputError(f"column {name!r} is constant and cannot be standardized")
        means.append(mu)
        stds.append(sigma)
        cols[name] = (x - mu) / sigma
    return ScoreTable(table.uids, cols), ColumnStats(tuple(table.names), np.array(means), np.array(stds))


def aggregate_sum(table: ScoreTable, standardized: bool = False) -> ScoreTable:
    """Row-wise sum of all columns, optionally after standardizing each."""
    if not table.names:
        raise InvalidInputError("table has no score columns")
    source = standardize(table)[0] if standardized else table
    total = np.zeros(len(table))
    for name in source.names:
        total = total + source.columns[name]
    return _single(table, "std_sum" if standardized else "sum", total)


def in_weighted_weights(accuracies, ratio: float) -> np.ndarray:
    """Min-max normalized accuracies plus the offset giving ``max/min == ratio``."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.ndim != 1 or acc.size < 2:
        raise InvalidInputError("need at least two accuracies")
    if not ratio > 1:
        raise InvalidInputError(f"ratio must exceed 1, got {ratio}")
    lo, hi = acc.min(), acc.max()
    if not hi > lo:
        raise InvalidInputError("all accuracies are equal; the weighting is degenerate")
    return (acc - lo) / (hi - lo) + 1.0 / (ratio - 1.0)


def in_weighted(table: ScoreTable, accuracies, ratio: float, return_weights: bool = False):
    """Accuracy-weighted sum of standardized columns."""
    if len(table.names) < 2:
        raise InvalidInputError("in_weighted needs at least two score columns")
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.shape != (len(table.names),):
        raise InvalidInputError(f"need one accuracy per column ({len(table.names)}), got {acc.shape}")
    weights = in_weighted_weights(acc, ratio)
    std_table = standardize(table)[0]
    total = np.zeros(len(table))
    for w, name in zip(weights, std_table.names):
        total = total + w * std_table.columns[name]
    out = _single(table, "in_weighted", total)
    return (out, weights) if return_weights else out


def mixer_init(table: ScoreTable, names=None, downstream_temperature=1 / 0.07) -> ScoringParams:
    """Zero-weight linear mixer carrying the table's standardization statistics."""
    names = table.names if names is None else list(names)
    _, stats = standardize(ScoreTable(table.uids, {n: table.column(n) for n in names}))
    return ScoringParams.linear(names, stats.means, stats.stds, downstream_temperature=downstream_temperature)


def train_mixer(table: ScoreTable, pool: Pool, downstream: DownstreamSet, config=None,
                scoring: Optional[ScoringParams] = None, reference: Optional[ReferenceParams] = None):
    """Train a linear mixer whose inputs are the table's score columns.

    The table is aligned to the pool by uid.  Standardization statistics are
    computed once over the whole table and frozen into the mixer.  Returns the
    :class:`~flyt.training.TrainResult`.
    """
    from .training import TrainConfig, train_flyt

    config = TrainConfig(scorer="linear") if config is None else config
    if scoring is None:
        scoring = mixer_init(table)
    if scoring.kind != "linear" and config.scorer == "linear":
        raise InvalidInputError("train_mixer expects a linear scorer")
    aligned = table.align(pool.uids)
    features = aligned.matrix(scoring.input_names)
    return train_flyt(config, pool, downstream, features=features, scoring=scoring, reference=reference)


def apply_mixer(scoring: ScoringParams, table: ScoreTable, name: str = "mixed") -> ScoreTable:
    """Score every row with the mixer's own frozen standardization."""
    missing = [n for n in scoring.input_names if n not in table.columns]
    if missing:
        raise InvalidInputError(f"score table lacks mixer input column(s) {missing}")
    if len(table) == 0:
        return _single(table, name, np.zeros(0))
    return _single(table, name, score_batch(scoring, table.matrix(scoring.input_names)))
