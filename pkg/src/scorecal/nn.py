"""A small feed-forward network with hand-written reverse-mode gradients.

The layer vocabulary is fixed: affine layers and PReLU activations, followed by
a scalar head that is either linear or softplus (for strictly positive
outputs).  Inputs pass through a per-dimension standardizer fitted on the
training data.  Everything is float64.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import FormatError, ValidationError
from .linear import sigmoid, softplus

STD_FLOOR = 1e-8
PRELU_INIT = 0.25


def hex_array(a: np.ndarray) -> str:
    return ",".join(float(x).hex() for x in np.asarray(a, dtype=np.float64).ravel())


def parse_hex_array(text: str, shape) -> np.ndarray:
    try:
        vals = [float.fromhex(t) for t in text.split(",")] if text else []
    except ValueError as exc:
        raise FormatError(f"bad hex float: {exc}") from None
    if len(vals) != int(np.prod(shape)):
        raise FormatError(f"expected {int(np.prod(shape))} values for shape {tuple(shape)}, got {len(vals)}")
    return np.array(vals, dtype=np.float64).reshape(shape)


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR))

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


@dataclass
class AffineLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    kind = "affine"

    def params(self):
        return [self.weight, self.bias]


@dataclass
class PReLU:
    slope: np.ndarray  # (channels,)

    kind = "prelu"

    def params(self):
        return [self.slope]


@dataclass
class ForwardCache:
    inputs: list = field(default_factory=list)
    head_input: np.ndarray | None = None
    squeeze: bool = False


class Network:
    """Standardizer -> [affine, PReLU]* -> affine -> scalar head."""

    def __init__(self, layers: Sequence[AffineLayer | PReLU], head: str = "linear",
                 standardizer: Standardizer | None = None):
        if head not in ("linear", "softplus"):
            raise ValidationError(f"unknown head {head!r}")
        self.layers = list(layers)
        self.head = head
        if not self.layers or not isinstance(self.layers[0], AffineLayer):
            raise ValidationError("network must start with an affine layer")
        if self.layers[-1].kind != "affine" or self.layers[-1].weight.shape[0] != 1:
            raise ValidationError("network must end with an affine layer producing one output")
        width = self.layers[0].weight.shape[1]
        for k, layer in enumerate(self.layers):
            if isinstance(layer, AffineLayer):
                if layer.weight.shape[1] != width or layer.bias.shape != (layer.weight.shape[0],):
                    raise ValidationError(f"layer {k}: shape mismatch")
                width = layer.weight.shape[0]
            elif layer.slope.shape != (width,):
                raise ValidationError(f"layer {k}: PReLU has {layer.slope.shape} slopes for width {width}")
        self.standardizer = standardizer or Standardizer.identity(self.input_dim)

    @classmethod
    def init(cls, input_dim: int, hidden: Sequence[int], head: str, rng: np.random.Generator,
             standardizer: Standardizer | None = None) -> "Network":
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases, PReLU slopes 0.25."""
        def affine(out_dim, in_dim):
            bound = 1.0 / np.sqrt(in_dim)
            return AffineLayer(rng.uniform(-bound, bound, (out_dim, in_dim)), np.zeros(out_dim))

        layers: list = []
        fan_in = input_dim
        for width in hidden:
            layers += [affine(width, fan_in), PReLU(np.full(width, PRELU_INIT))]
            fan_in = width
        layers.append(affine(1, fan_in))
        return cls(layers, head, standardizer)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def param_names(self) -> list[str]:
        names = []
        for k, layer in enumerate(self.layers):
            names += [f"layer{k}.weight", f"layer{k}.bias"] if layer.kind == "affine" else [f"layer{k}.slope"]
        return names

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def forward(self, x):
        """Evaluate the network.

        A 1-D input yields a float; a 2-D (batch, dim) input yields a vector.
        Returns ``(output, cache)``; the cache feeds :meth:`backward`.
        """
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValidationError(f"dimension mismatch: network expects {self.input_dim} inputs, got {x.shape[-1]}")
        cache = ForwardCache(squeeze=squeeze)
        h = self.standardizer(x)
        for layer in self.layers:
            cache.inputs.append(h)
            if layer.kind == "affine":
                h = h @ layer.weight.T + layer.bias
            else:
                h = np.where(h > 0, h, layer.slope * h)
        u = h[:, 0]
        cache.head_input = u
        out = softplus(u) if self.head == "softplus" else u.copy()
        return (float(out[0]) if squeeze else out), cache

    def predict(self, x):
        return self.forward(x)[0]

    def backward(self, cache: ForwardCache | None, upstream) -> list[np.ndarray]:
        """Gradients of ``sum(upstream * output)`` for every parameter, aligned with :meth:`params`."""
        if cache is None or cache.head_input is None:
            raise ValidationError("backward called without a forward cache")
        g = np.asarray(upstream, dtype=np.float64).reshape(-1)
        u = cache.head_input
        if g.shape != u.shape:
            raise ValidationError(f"upstream gradient has {g.size} entries for a batch of {u.size}")
        if self.head == "softplus":
            g = g * sigmoid(u)
        g = g[:, None]
        grads: list[list[np.ndarray]] = []
        for layer, h in zip(reversed(self.layers), reversed(cache.inputs)):
            if layer.kind == "affine":
                grads.append([g.T @ h, g.sum(axis=0)])
                g = g @ layer.weight
            else:
                neg = h <= 0
                grads.append([np.where(neg, h * g, 0.0).sum(axis=0)])
                g = np.where(neg, layer.slope * g, g)
        return [p for pair in reversed(grads) for p in pair]

    # -- serialization --------------------------------------------------

    def to_lines(self, prefix: str) -> list[str]:
        lines = [
            f"{prefix}.head={self.head}",
            f"{prefix}.input_dim={self.input_dim}",
            f"{prefix}.layers={len(self.layers)}",
            f"{prefix}.std.mean={hex_array(self.standardizer.mean)}",
            f"{prefix}.std.scale={hex_array(self.standardizer.std)}",
        ]
        for k, layer in enumerate(self.layers):
            key = f"{prefix}.layer{k}"
            if layer.kind == "affine":
                out_dim, in_dim = layer.weight.shape
                lines += [f"{key}.kind=affine", f"{key}.shape={out_dim},{in_dim}",
                          f"{key}.weight={hex_array(layer.weight)}", f"{key}.bias={hex_array(layer.bias)}"]
            else:
                lines += [f"{key}.kind=prelu", f"{key}.shape={layer.slope.size}",
                          f"{key}.slope={hex_array(layer.slope)}"]
        return lines

    @classmethod
    def from_fields(cls, fields: dict[str, str], prefix: str) -> "Network":
        try:
            dim = int(fields[f"{prefix}.input_dim"])
            layers = []
            for k in range(int(fields[f"{prefix}.layers"])):
                key = f"{prefix}.layer{k}"
                shape = tuple(int(v) for v in fields[f"{key}.shape"].split(","))
                if fields[f"{key}.kind"] == "affine":
                    layers.append(AffineLayer(parse_hex_array(fields[f"{key}.weight"], shape),
                                              parse_hex_array(fields[f"{key}.bias"], shape[:1])))
                elif fields[f"{key}.kind"] == "prelu":
                    layers.append(PReLU(parse_hex_array(fields[f"{key}.slope"], shape)))
                else:
                    raise FormatError(f"{key}: unknown layer kind {fields[f'{key}.kind']!r}")
            std = Standardizer(parse_hex_array(fields[f"{prefix}.std.mean"], (dim,)),
                               parse_hex_array(fields[f"{prefix}.std.scale"], (dim,)))
            return cls(layers, fields[f"{prefix}.head"], std)
        except KeyError as exc:
            raise FormatError(f"model file missing key {exc.args[0]}") from None
        except ValidationError as exc:
            raise FormatError(f"{prefix}: {exc}") from None


class Adam:
    """Adaptive-moment optimizer with bias correction; updates parameters in place."""

    def __init__(self, params: Sequence[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        if len(params) != len(self.m):
            raise ValidationError("parameter list does not match optimizer state")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ValidationError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
