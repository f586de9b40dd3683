"""Forward-mode differentiation of the encoder with dual numbers.

A :class:`Dual` carries a primal array and a tangent array of the same shape.
Only the operations the encoder needs are implemented.
"""

from __future__ import annotations

import numpy as np

from .model import ReferenceParams


class Dual:
    __slots__ = ("primal", "tangent")

    def __init__(self, primal, tangent=None):
        self.primal = np.asarray(primal, dtype=np.float64)
        self.tangent = np.zeros_like(self.primal) if tangent is None else np.asarray(tangent, dtype=np.float64)

    @staticmethod
    def lift(x) -> "Dual":
        return x if isinstance(x, Dual) else Dual(x)

    def __add__(self, other):
        o = Dual.lift(other)
        return Dual(self.primal + o.primal, self.tangent + o.tangent)

    __radd__ = __add__

    def __mul__(self, other):
        o = Dual.lift(other)
        return Dual(self.primal * o.primal, self.tangent * o.primal + self.primal * o.tangent)

    __rmul__ = __mul__

    def __matmul__(self, other):
        o = Dual.lift(other)
        return Dual(self.primal @ o.primal, self.tangent @ o.primal + self.primal @ o.tangent)

    def __rmatmul__(self, other):
        return Dual.lift(other) @ self

    @property
    def T(self):
        return Dual(self.primal.T, self.tangent.T)

    def tanh(self):
        p = np.tanh(self.primal)
        return Dual(p, (1 - p * p) * self.tangent)

    def normalize_rows(self):
        """Each row divided by its Euclidean norm."""
        norm = np.linalg.norm(self.primal, axis=-1, keepdims=True)
        unit = self.primal / norm
        radial = (unit * self.tangent).sum(-1, keepdims=True)
        return Dual(unit, (self.tangent - unit * radial) / norm)


def tower_jvp(layers, tangent_layers, x) -> Dual:
    """Embed ``x`` with one tower while pushing a parameter tangent through it."""
    h = Dual(x)
    last = len(layers) - 1
    for i, ((w, b), (dw, db)) in enumerate(zip(layers, tangent_layers)):
        h = h @ Dual(w, dw).T + Dual(b, db)
        if i < last:
            h = h.tanh()
    return h.normalize_rows()


def embedding_directional_derivatives(params: ReferenceParams, direction, image, text):
    """Derivative of every embedding along ``direction`` in parameter space.

    Returns ``(d_image, d_text)``, the values ``d/dh f_{theta + h * direction}(z)``
    at ``h = 0`` for each row of ``image`` / ``text``.
    """
    tangent = params.with_vector(direction)
    u = tower_jvp(params.image_layers, tangent.image_layers, image)
    v = tower_jvp(params.text_layers, tangent.text_layers, text)
    return u.tangent, v.tangent


def embedding_directional_derivatives_fd(params: ReferenceParams, direction, image, text, step=1e-6):
    """Central-difference counterpart of :func:`embedding_directional_derivatives`."""
    from .model import encode_batch, Pool

    theta = params.to_vector()
    direction = np.asarray(direction, dtype=np.float64)
    pool = Pool(tuple(str(i) for i in range(len(image))), image, text)
    up = encode_batch(params.with_vector(theta + step * direction), pool)
    down = encode_batch(params.with_vector(theta - step * direction), pool)
    return (up[0] - down[0]) / (2 * step), (up[1] - down[1]) / (2 * step)
