"""Dense MLP with a hand-written reverse pass.

Parameters live in a flat ``{name: array}`` dict so optimizers and
serializers can treat every network the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgument

_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu_tanh(x):
    u = x * x
    u *= 0.044715
    u += 1.0
    u *= x
    u *= _GELU_C
    return np.tanh(u, out=u)


def gelu(x):
    """GELU, tanh approximation."""
    th = _gelu_tanh(x)
    th += 1.0
    th *= x
    th *= 0.5
    return th


def gelu_grad(x):
    th = _gelu_tanh(x)
    x2 = x * x
    x2 *= 3 * 0.044715
    x2 += 1.0
    x2 *= _GELU_C
    x2 *= x
    sech2 = 1.0 - th * th
    sech2 *= x2
    th += 1.0
    th += sech2
    th *= 0.5
    return th


def gelu_and_grad(x):
    th = _gelu_tanh(x)
    x2 = x * x
    x2 *= 3 * 0.044715
    x2 += 1.0
    x2 *= _GELU_C
    x2 *= x
    out = (th + 1.0) * x * 0.5
    sech2 = 1.0 - th * th
    sech2 *= x2
    th += 1.0
    th += sech2
    th *= 0.5
    return out, th


def _pair(f, g):
    return lambda x: (f(x), g(x))


ACTIVATIONS = {
    "gelu": (gelu, gelu_and_grad),
    "tanh": (np.tanh, _pair(np.tanh, lambda x: 1.0 - np.tanh(x) ** 2)),
    "relu": (lambda x: np.maximum(x, 0.0),
             _pair(lambda x: np.maximum(x, 0.0), lambda x: (x > 0).astype(x.dtype))),
    "identity": (lambda x: x, lambda x: (x, None)),
}


@dataclass
class MlpNet:
    """Stack of affine layers; layer ``i`` maps ``widths[i] -> widths[i+1]``.

    ``forward`` optionally takes one additive term per layer which is summed
    into that layer's pre-activation (used for time conditioning).
    """

    widths: list
    activations: list
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        if len(self.widths) < 2:
            raise InvalidArgument("need at least an input and an output width")
        if len(self.activations) != self.n_layers:
            raise InvalidArgument(
                f"{self.n_layers} layers but {len(self.activations)} activation tags"
            )
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise InvalidArgument(f"unknown activation {act!r}")
        for i in range(self.n_layers):
            w = self.params.get(f"w{i}")
            if w is not None and w.shape != (self.widths[i], self.widths[i + 1]):
                raise InvalidArgument(f"w{i} has shape {w.shape}, expected "
                                      f"{(self.widths[i], self.widths[i + 1])}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @classmethod
    def init(cls, widths, activations, rng: np.random.Generator, out_scale: float = 1.0):
        params = {}
        n = len(widths) - 1
        for i in range(n):
            scale = 1.0 / np.sqrt(widths[i])
            if i == n - 1:
                scale *= out_scale
            params[f"w{i}"] = rng.standard_normal((widths[i], widths[i + 1])) * scale
            params[f"b{i}"] = np.zeros(widths[i + 1])
        return cls(list(widths), list(activations), params)

    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def __call__(self, x, inject=None):
        """Forward pass without keeping a cache for ``backward``."""
        h = np.asarray(x, dtype=np.float64)
        for i in range(self.n_layers):
            z = h @ self.params[f"w{i}"] + self.params[f"b{i}"]
            if inject is not None and inject[i] is not None:
                z += inject[i]
            h = ACTIVATIONS[self.activations[i]][0](z)
        return h

    def forward(self, x, inject=None):
        """Return ``(output, cache)``; ``cache`` feeds ``backward``."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.widths[0]:
            raise InvalidArgument(f"input width {x.shape[-1]} != {self.widths[0]}")
        inputs, slopes = [], []
        h = x
        for i in range(self.n_layers):
            inputs.append(h)
            z = h @ self.params[f"w{i}"] + self.params[f"b{i}"]
            if inject is not None and inject[i] is not None:
                z += inject[i]
            h, slope = ACTIVATIONS[self.activations[i]][1](z)
            slopes.append(slope)
        return h, (inputs, slopes)

    def backward(self, cache, dout):
        """Return ``(grads, dx, dinject)`` for upstream gradient ``dout``.

        ``dinject[i]`` is the gradient w.r.t. the injected term of layer ``i``,
        i.e. the gradient of that layer's pre-activation.
        """
        inputs, slopes = cache
        grads = {}
        dinject = [None] * self.n_layers
        g = dout
        for i in reversed(range(self.n_layers)):
            dz = g if slopes[i] is None else g * slopes[i]
            dinject[i] = dz
            h = inputs[i]
            grads[f"w{i}"] = h.reshape(-1, h.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])
            grads[f"b{i}"] = dz.reshape(-1, dz.shape[-1]).sum(axis=0)
            g = dz @ self.params[f"w{i}"].T
        return grads, g, dinject
