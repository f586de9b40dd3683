"""Reference (two-tower CLIP) model and scoring models.

Parameters live in small dataclasses holding float64 numpy arrays.  Every
parameter set can be flattened to a single vector; the differentiable code in
:mod:`flyt.metagrad` works on those flat vectors as torch tensors and uses the
``*_from_vector`` functions below to evaluate the models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .exceptions import InvalidInputError

DTYPE = torch.float64
INIT_LOG_TEMPERATURE = math.log(1 / 0.07)

SCORER_KINDS = ("linear", "gated_mlp")


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


# ---------------------------------------------------------------------------
# examples


@dataclass(frozen=True)
class ExampleRecord:
    uid: str
    image_features: np.ndarray
    text_features: np.ndarray

    def __post_init__(self):
        img = np.asarray(self.image_features, dtype=np.float64)
        txt = np.asarray(self.text_features, dtype=np.float64)
        if img.ndim != 1 or txt.ndim != 1 or img.shape != txt.shape or img.size == 0:
            raise InvalidInputError(
                f"example {self.uid!r}: image and text features must be 1-d vectors "
                f"of equal nonzero length, got {img.shape} and {txt.shape}"
            )
        object.__setattr__(self, "image_features", img)
        object.__setattr__(self, "text_features", txt)


@dataclass(frozen=True)
class Pool:
    """Columnar collection of :class:`ExampleRecord` values."""

    uids: tuple
    image: np.ndarray
    text: np.ndarray

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float64)
        text = np.asarray(self.text, dtype=np.float64)
        uids = tuple(str(u) for u in self.uids)
        if image.ndim != 2 or image.shape != text.shape:
            raise InvalidInputError(
                f"image and text feature matrices must have equal 2-d shapes, "
                f"got {image.shape} and {text.shape}"
            )
        if image.shape[0] != len(uids):
            raise InvalidInputError("number of uids does not match number of feature rows")
        if image.shape[0] and image.shape[1] < 1:
            raise InvalidInputError("feature width must be at least 1")
        if len(set(uids)) != len(uids):
            raise InvalidInputError("uids must be unique within a pool")
        object.__setattr__(self, "uids", uids)
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "text", text)

    @classmethod
    def from_records(cls, records: Sequence[ExampleRecord]) -> "Pool":
        records = list(records)
        if not records:
            return cls((), np.zeros((0, 0)), np.zeros((0, 0)))
        return cls(
            tuple(r.uid for r in records),
            np.stack([r.image_features for r in records]),
            np.stack([r.text_features for r in records]),
        )

    def __len__(self):
        return len(self.uids)

    def __getitem__(self, i) -> ExampleRecord:
        return ExampleRecord(self.uids[i], self.image[i], self.text[i])

    def records(self) -> list[ExampleRecord]:
        return [self[i] for i in range(len(self))]

    @property
    def d_in(self) -> int:
        return self.image.shape[1]

    def subset(self, indices) -> "Pool":
        indices = np.asarray(indices, dtype=np.int64)
        return Pool(tuple(self.uids[i] for i in indices), self.image[indices], self.text[indices])

    def features(self) -> np.ndarray:
        """Concatenated ``[image | text]`` feature matrix."""
        return np.concatenate([self.image, self.text], axis=1)


def as_pool(batch) -> Pool:
    if isinstance(batch, Pool):
        return batch
    return Pool.from_records(batch)


@dataclass(frozen=True)
class DownstreamExample:
    image_features: np.ndarray
    class_label: int


@dataclass(frozen=True)
class DownstreamSet:
    """Labeled downstream images plus per-class text templates.

    ``templates[c]`` is a ``(n_templates_c, d_in)`` array of template text
    features for class ``c``.
    """

    image: np.ndarray
    labels: np.ndarray
    templates: tuple

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        templates = tuple(np.atleast_2d(np.asarray(t, dtype=np.float64)) for t in self.templates)
        if image.ndim != 2 or labels.shape != (image.shape[0],):
            raise InvalidInputError("downstream images must be (n, d_in) with one label per row")
        if not templates:
            raise InvalidInputError("at least one class is required")
        for c, t in enumerate(templates):
            if t.shape[0] < 1 or t.shape[1] != image.shape[1]:
                raise InvalidInputError(f"class {c} needs >= 1 template of width {image.shape[1]}")
        if labels.size and (labels.min() < 0 or labels.max() >= len(templates)):
            raise InvalidInputError(f"class labels must lie in [0, {len(templates)})")
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "templates", templates)

    @property
    def n_classes(self) -> int:
        return len(self.templates)

    def __len__(self):
        return self.image.shape[0]

    def __getitem__(self, i) -> DownstreamExample:
        return DownstreamExample(self.image[i], int(self.labels[i]))

    def subset(self, indices) -> "DownstreamSet":
        indices = np.asarray(indices, dtype=np.int64)
        return DownstreamSet(self.image[indices], self.labels[indices], self.templates)

    def sample_templates(self, rng: np.random.Generator) -> np.ndarray:
        """Pick one template per class uniformly at random, returning ``(K, d_in)``."""
        return np.stack([t[rng.integers(t.shape[0])] for t in self.templates])


# ---------------------------------------------------------------------------
# flat parameter plumbing


def _unflatten(vec: torch.Tensor, shapes):
    out = []
    offset = 0
    for shape in shapes:
        n = int(np.prod(shape, dtype=np.int64))
        out.append(vec[offset : offset + n].reshape(shape))
        offset += n
    if offset != vec.shape[0]:
        raise InvalidInputError(f"parameter vector has length {vec.shape[0]}, expected {offset}")
    return out


class _Flat:
    """Flatten/unflatten support for parameter dataclasses."""

    def blocks(self) -> list[tuple[str, tuple]]:
        raise NotImplementedError

    def _arrays(self) -> list[np.ndarray]:
        raise NotImplementedError

    def _replace_arrays(self, arrays):
        raise NotImplementedError

    @property
    def size(self) -> int:
        return sum(int(np.prod(s, dtype=np.int64)) for _, s in self.blocks())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in self._arrays()])

    def with_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        arrays = [a.numpy().copy() for a in _unflatten(torch.from_numpy(vec), [s for _, s in self.blocks()])]
        return self._replace_arrays(arrays)

    def block_slices(self) -> dict[str, slice]:
        out = {}
        offset = 0
        for name, shape in self.blocks():
            n = int(np.prod(shape, dtype=np.int64))
            out[name] = slice(offset, offset + n)
            offset += n
        return out


# ---------------------------------------------------------------------------
# reference model


@dataclass
class ReferenceParams(_Flat):
    """Two affine towers with tanh between layers and unit-norm outputs.

    ``image_layers`` / ``text_layers`` are lists of ``(weight, bias)`` pairs
    with weight shape ``(out, in)``.  The contrastive temperature is
    ``exp(log_temperature)``.
    """

    image_layers: list
    text_layers: list
    log_temperature: float = INIT_LOG_TEMPERATURE

    def __post_init__(self):
        self.image_layers = [(np.asarray(w, float), np.asarray(b, float)) for w, b in self.image_layers]
        self.text_layers = [(np.asarray(w, float), np.asarray(b, float)) for w, b in self.text_layers]
        self.log_temperature = float(self.log_temperature)
        for name, layers in (("image", self.image_layers), ("text", self.text_layers)):
            if not layers:
                raise InvalidInputError(f"{name} tower needs at least one layer")
            for i, (w, b) in enumerate(layers):
                if w.ndim != 2 or b.shape != (w.shape[0],):
                    raise InvalidInputError(f"{name} layer {i}: bad shapes {w.shape}, {b.shape}")
                if i and w.shape[1] != layers[i - 1][0].shape[0]:
                    raise InvalidInputError(f"{name} layer {i} does not chain with layer {i - 1}")
        if self.image_layers[0][0].shape[1] != self.text_layers[0][0].shape[1]:
            raise InvalidInputError("image and text towers must share the input width")
        if self.image_layers[-1][0].shape[0] != self.text_layers[-1][0].shape[0]:
            raise InvalidInputError("image and text towers must share the embedding width")

    @classmethod
    def init(cls, d_in, d_emb, hidden=None, n_layers=2, seed=0, temperature=1 / 0.07):
        """Random Gaussian init with ``1/fan_in`` variance and zero biases."""
        if n_layers < 1:
            raise InvalidInputError("n_layers must be >= 1")
        hidden = 2 * max(d_in, d_emb) if hidden is None else hidden
        rng = np.random.default_rng(seed)
        widths = [d_in] + [hidden] * (n_layers - 1) + [d_emb]

        def tower():
            return [
                (rng.standard_normal((o, i)) / math.sqrt(i), np.zeros(o))
                for i, o in zip(widths[:-1], widths[1:])
            ]

        return cls(tower(), tower(), math.log(temperature))

    @property
    def d_in(self) -> int:
        return self.image_layers[0][0].shape[1]

    @property
    def d_emb(self) -> int:
        return self.image_layers[-1][0].shape[0]

    @property
    def temperature(self) -> float:
        return math.exp(self.log_temperature)

    def blocks(self):
        out = []
        for name, layers in (("image", self.image_layers), ("text", self.text_layers)):
            for i, (w, b) in enumerate(layers):
                out.append((f"{name}.{i}.weight", w.shape))
                out.append((f"{name}.{i}.bias", b.shape))
        out.append(("log_temperature", ()))
        return out

    def _arrays(self):
        arrays = []
        for w, b in self.image_layers + self.text_layers:
            arrays += [w, b]
        arrays.append(np.asarray(self.log_temperature))
        return arrays

    def _replace_arrays(self, arrays):
        n_img = len(self.image_layers)
        pairs = [(arrays[2 * i], arrays[2 * i + 1]) for i in range(len(arrays) // 2)]
        return ReferenceParams(pairs[:n_img], pairs[n_img:], float(arrays[-1]))

    def split(self, vec: torch.Tensor):
        """Views of a flat parameter tensor: ``(image_layers, text_layers, log_temperature)``."""
        parts = _unflatten(vec, [s for _, s in self.blocks()])
        n_img = len(self.image_layers)
        pairs = [(parts[2 * i], parts[2 * i + 1]) for i in range((len(parts) - 1) // 2)]
        return pairs[:n_img], pairs[n_img:], parts[-1]

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.to_vector())


def tower_forward(layers, x: torch.Tensor) -> torch.Tensor:
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        h = h @ w.T + b
        if i < last:
            h = torch.tanh(h)
    return h / torch.linalg.vector_norm(h, dim=-1, keepdim=True)


def _check_width(x: np.ndarray, d_in: int, what: str):
    if x.ndim != 2 or x.shape[1] != d_in:
        raise InvalidInputError(f"{what} width {x.shape[-1] if x.ndim else '?'} does not match model input width {d_in}")


def encode_batch(params: ReferenceParams, batch):
    """Embed a batch of examples, returning unit-norm ``(image, text)`` arrays."""
    pool = as_pool(batch)
    if len(pool) == 0:
        raise InvalidInputError("batch must be nonempty")
    _check_width(pool.image, params.d_in, "feature")
    img_layers, txt_layers, _ = params.split(params.tensor())
    with torch.no_grad():
        u = tower_forward(img_layers, as_tensor(pool.image))
        v = tower_forward(txt_layers, as_tensor(pool.text))
    return u.numpy(), v.numpy()


# ---------------------------------------------------------------------------
# scoring models


def default_hidden(k: int) -> int:
    return 4 * k


@dataclass
class ScoringParams(_Flat):
    """Scoring model parameters with frozen input standardization.

    ``weights`` is a length-``k`` vector for the linear kind and a dict with
    ``gate_weight``, ``gate_bias``, ``up_weight``, ``up_bias`` and
    ``out_weight`` for the gated kind.  ``bias`` is the scalar output bias.
    """

    kind: str
    input_names: tuple
    input_means: np.ndarray
    input_stds: np.ndarray
    weights: object
    bias: float = 0.0
    downstream_log_temperature: float = INIT_LOG_TEMPERATURE

    def __post_init__(self):
        if self.kind not in SCORER_KINDS:
            raise InvalidInputError(f"unknown scorer kind {self.kind!r}")
        self.input_names = tuple(str(n) for n in self.input_names)
        k = len(self.input_names)
        if k < 1 or len(set(self.input_names)) != k:
            raise InvalidInputError("input_names must be a nonempty list of distinct names")
        self.input_means = np.asarray(self.input_means, dtype=np.float64)
        self.input_stds = np.asarray(self.input_stds, dtype=np.float64)
        if self.input_means.shape != (k,) or self.input_stds.shape != (k,):
            raise InvalidInputError("standardization statistics must have one entry per input")
        if not np.all(self.input_stds > 0):
            raise InvalidInputError("input_stds must be strictly positive")
        if self.kind == "linear":
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != (k,):
                raise InvalidInputError(f"linear scorer needs exactly {k} weights")
        else:
            w = {name: np.asarray(self.weights[name], dtype=np.float64) for name in _GATED_NAMES}
            h = w["out_weight"].shape[0]
            expected = {"gate_weight": (h, k), "gate_bias": (h,), "up_weight": (h, k), "up_bias": (h,), "out_weight": (h,)}
            for name, shape in expected.items():
                if w[name].shape != shape:
                    raise InvalidInputError(f"gated_mlp {name} has shape {w[name].shape}, expected {shape}")
            self.weights = w
        self.bias = float(self.bias)
        self.downstream_log_temperature = float(self.downstream_log_temperature)

    @classmethod
    def linear(cls, input_names, means=None, stds=None, weights=None, bias=0.0,
               downstream_temperature=1 / 0.07):
        k = len(input_names)
        return cls(
            "linear",
            tuple(input_names),
            np.zeros(k) if means is None else means,
            np.ones(k) if stds is None else stds,
            np.zeros(k) if weights is None else weights,
            bias,
            math.log(downstream_temperature),
        )

    @classmethod
    def gated_mlp(cls, input_names, means=None, stds=None, hidden=None, seed=0, init_scale=1.0,
                  downstream_temperature=1 / 0.07):
        k = len(input_names)
        h = default_hidden(k) if hidden is None else hidden
        rng = np.random.default_rng(seed)
        scale = init_scale / math.sqrt(k)
        weights = {
            "gate_weight": rng.standard_normal((h, k)) * scale,
            "gate_bias": np.zeros(h),
            "up_weight": rng.standard_normal((h, k)) * scale,
            "up_bias": np.zeros(h),
            "out_weight": rng.standard_normal(h) * (init_scale / math.sqrt(h)),
        }
        return cls(
            "gated_mlp",
            tuple(input_names),
            np.zeros(k) if means is None else means,
            np.ones(k) if stds is None else stds,
            weights,
            0.0,
            math.log(downstream_temperature),
        )

    @property
    def k(self) -> int:
        return len(self.input_names)

    @property
    def downstream_temperature(self) -> float:
        return math.exp(self.downstream_log_temperature)

    def blocks(self):
        if self.kind == "linear":
            out = [("weights", (self.k,))]
        else:
            out = [(name, self.weights[name].shape) for name in _GATED_NAMES]
        return out + [("bias", ()), ("downstream_log_temperature", ())]

    def _arrays(self):
        if self.kind == "linear":
            head = [self.weights]
        else:
            head = [self.weights[name] for name in _GATED_NAMES]
        return head + [np.asarray(self.bias), np.asarray(self.downstream_log_temperature)]

    def _replace_arrays(self, arrays):
        if self.kind == "linear":
            weights = arrays[0]
        else:
            weights = dict(zip(_GATED_NAMES, arrays[: len(_GATED_NAMES)]))
        return ScoringParams(self.kind, self.input_names, self.input_means.copy(), self.input_stds.copy(),
                             weights, float(arrays[-2]), float(arrays[-1]))

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.to_vector())

    def standardize(self, features: np.ndarray) -> np.ndarray:
        return (features - self.input_means) / self.input_stds

    def split(self, vec: torch.Tensor):
        """Views of a flat vector as ``(head_params, bias, downstream_log_temperature)``."""
        parts = _unflatten(vec, [s for _, s in self.blocks()])
        return parts[:-2], parts[-2], parts[-1]


_GATED_NAMES = ("gate_weight", "gate_bias", "up_weight", "up_bias", "out_weight")


def _rowwise(x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    # explicit broadcast-sum instead of a matmul so a row's result never depends on the batch it sits in
    if w.ndim == 1:
        return (x * w).sum(-1)
    return (x[:, None, :] * w[None, :, :]).sum(-1)


def scores_from_vector(params: ScoringParams, vec: torch.Tensor, standardized: torch.Tensor) -> torch.Tensor:
    """Differentiable scores for already-standardized features."""
    head, bias, _ = params.split(vec)
    if params.kind == "linear":
        return _rowwise(standardized, head[0]) + bias
    gate_w, gate_b, up_w, up_b, out_w = head
    hidden = torch.sigmoid(_rowwise(standardized, gate_w) + gate_b) * (_rowwise(standardized, up_w) + up_b)
    return _rowwise(hidden, out_w) + bias


def check_feature_matrix(params: ScoringParams, features, columns=None) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[None, :]
    if features.ndim != 2 or features.shape[1] != params.k:
        raise InvalidInputError(
            f"expected {params.k} feature columns {list(params.input_names)}, got shape {features.shape}"
        )
    if columns is not None:
        columns = [str(c) for c in columns]
        unknown = [c for c in columns if c not in params.input_names]
        if unknown:
            raise InvalidInputError(f"unknown feature column(s) {unknown}")
        if tuple(columns) != params.input_names:
            raise InvalidInputError(f"feature columns {columns} do not match order {list(params.input_names)}")
    return features


_SCORE_CHUNK = 1024


def score_batch(params: ScoringParams, features, columns=None) -> np.ndarray:
    """Score rows of a ``(B, k)`` feature matrix.

    Features are standardized with the statistics stored in ``params``.  If
    ``columns`` is given it must list the feature names in model order.
    """
    features = check_feature_matrix(params, features, columns)
    z = as_tensor(params.standardize(features))
    vec = params.tensor()
    with torch.no_grad():
        parts = [scores_from_vector(params, vec, z[i : i + _SCORE_CHUNK]) for i in range(0, len(z), _SCORE_CHUNK)]
    return torch.cat(parts).numpy() if parts else np.zeros(0)
