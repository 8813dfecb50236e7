"""Layer kinds used by the training engine.

Each layer owns a dict of named :class:`Param` objects, runs ``forward`` on a
batch (first axis = samples), caches what it needs, and ``backward`` returns
the input gradient while accumulating parameter gradients into ``Param.grad``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numeric as nx
from .errors import ShapeError, StructureError

ROLES = ("dense", "dictionary", "coefficient", "bias")


@dataclass(eq=False)
class Param:
    value: np.ndarray
    role: str
    trainable: bool = True
    # per-row trainable flags; only meaningful when ``trainable`` is True
    rows: np.ndarray | None = None
    grad: np.ndarray | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown parameter role {self.role!r}")
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)

    def update_mask(self) -> np.ndarray | None:
        """Boolean array (broadcastable to ``value``) of entries allowed to move.

        None means every entry may move.
        """
        if self.rows is None:
            return None
        return self.rows.reshape((-1,) + (1,) * (self.value.ndim - 1))

    def trainable_count(self) -> int:
        if not self.trainable:
            return 0
        if self.rows is None:
            return self.value.size
        return int(self.rows.sum()) * (self.value.size // self.value.shape[0])


@dataclass(frozen=True)
class Provenance:
    """Where a decomposed layer's factors came from."""

    beta: float
    selected: tuple[int, ...]
    achieved_rel_error: float
    rank_exhausted: bool = False
    policy: str = "exact_greedy"

    def to_dict(self):
        return {
            "beta": self.beta,
            "selected": list(self.selected),
            "achieved_rel_error": self.achieved_rel_error,
            "rank_exhausted": self.rank_exhausted,
            "policy": self.policy,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            beta=float(d["beta"]),
            selected=tuple(int(i) for i in d["selected"]),
            achieved_rel_error=float(d["achieved_rel_error"]),
            rank_exhausted=bool(d["rank_exhausted"]),
            policy=d.get("policy", "exact_greedy"),
        )


class Layer:
    kind = "layer"

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, Param] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def output_shape(self, in_shape):
        return in_shape

    def config(self) -> dict:
        return {"kind": self.kind, "name": self.name}

    def _accumulate(self, pname, g):
        p = self.params[pname]
        p.grad = g if p.grad is None else p.grad + g

    def __repr__(self):
        shapes = ", ".join(f"{k}={v.value.shape}" for k, v in self.params.items())
        return f"{type(self).__name__}({self.name!r}{', ' if shapes else ''}{shapes})"


def _bias_param(bias, size):
    if bias is None:
        return None
    bias = np.asarray(bias, dtype=np.float64).ravel()
    if bias.shape != (size,):
        raise ShapeError(f"bias has shape {bias.shape}, expected ({size},)")
    return Param(bias, "bias")


# ---------------------------------------------------------------------------
# fully connected
# ---------------------------------------------------------------------------


class Dense(Layer):
    kind = "fc"

    def __init__(self, name, weight, bias=None):
        super().__init__(name)
        self.params["weight"] = Param(weight, "dense")
        b = _bias_param(bias, self.params["weight"].value.shape[0])
        if b is not None:
            self.params["bias"] = b

    @property
    def out_features(self):
        return self.params["weight"].value.shape[0]

    @property
    def in_features(self):
        return self.params["weight"].value.shape[1]

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"{self.name}: expects ({self.in_features},), got {tuple(in_shape)}")
        return (self.out_features,)

    def forward(self, x, train=False, rng=None):
        self._x = x
        y = x @ self.params["weight"].value.T
        if "bias" in self.params:
            y += self.params["bias"].value
        return y

    def backward(self, grad):
        self._accumulate("weight", grad.T @ self._x)
        if "bias" in self.params:
            self._accumulate("bias", grad.sum(axis=0))
        return grad @ self.params["weight"].value


class DecomposedDense(Layer):
    """Tiny fc layer (coefficients) followed by a transformation layer (dictionary).

    ``y = D @ (C @ x) + bias`` with D (m x l) and C (l x n).
    """

    kind = "decomposed_fc"

    def __init__(self, name, dictionary, coefficients, bias=None, provenance=None):
        super().__init__(name)
        self.params["dictionary"] = Param(dictionary, "dictionary")
        self.params["coefficients"] = Param(coefficients, "coefficient")
        d, c = self.dictionary, self.coefficients
        if d.ndim != 2 or c.ndim != 2 or d.shape[1] != c.shape[0]:
            raise ShapeError(f"dictionary {d.shape} and coefficients {c.shape} do not chain")
        b = _bias_param(bias, d.shape[0])
        if b is not None:
            self.params["bias"] = b
        self.provenance = provenance

    dictionary = property(lambda self: self.params["dictionary"].value)
    coefficients = property(lambda self: self.params["coefficients"].value)

    @property
    def rank(self):
        return self.coefficients.shape[0]

    @property
    def out_features(self):
        return self.dictionary.shape[0]

    @property
    def in_features(self):
        return self.coefficients.shape[1]

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"{self.name}: expects ({self.in_features},), got {tuple(in_shape)}")
        return (self.out_features,)

    def forward(self, x, train=False, rng=None):
        self._x = x
        self._z = x @ self.coefficients.T
        y = self._z @ self.dictionary.T
        if "bias" in self.params:
            y += self.params["bias"].value
        return y

    def backward(self, grad):
        self._accumulate("dictionary", grad.T @ self._z)
        if "bias" in self.params:
            self._accumulate("bias", grad.sum(axis=0))
        gz = grad @ self.dictionary
        self._accumulate("coefficients", gz.T @ self._x)
        return gz @ self.coefficients

    def config(self):
        cfg = super().config()
        if self.provenance is not None:
            cfg["provenance"] = self.provenance.to_dict()
        return cfg


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, name, weight, bias=None, stride=1, padding=0):
        super().__init__(name)
        self.params["weight"] = Param(weight, "dense")
        if self.params["weight"].value.ndim != 4:
            raise ShapeError("conv weight must be 4-d (out, in, kh, kw)")
        b = _bias_param(bias, self.params["weight"].value.shape[0])
        if b is not None:
            self.params["bias"] = b
        self.stride = int(stride)
        self.padding = int(padding)

    @property
    def filter_shape(self):
        return self.params["weight"].value.shape

    def output_shape(self, in_shape):
        m, k, kh, kw = self.filter_shape
        if len(in_shape) != 3 or in_shape[0] != k:
            raise ShapeError(f"{self.name}: expects {k} input channels, got shape {tuple(in_shape)}")
        ho = nx.conv_output_size(in_shape[1], kh, self.stride, self.padding)
        wo = nx.conv_output_size(in_shape[2], kw, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.name}: input {tuple(in_shape)} too small for {kh}x{kw} kernel")
        return (m, ho, wo)

    def forward(self, x, train=False, rng=None):
        b = self.params["bias"].value if "bias" in self.params else None
        y, self._cache = nx.conv2d_forward(x, self.params["weight"].value, b, self.stride, self.padding)
        return y

    def backward(self, grad):
        gx, gw, gb = nx.conv2d_backward(grad, self._cache)
        self._accumulate("weight", gw)
        if "bias" in self.params:
            self._accumulate("bias", gb)
        return gx

    def config(self):
        return {**super().config(), "stride": self.stride, "padding": self.padding}


class DecomposedConv2d(Layer):
    """Tiny convolution with ``l`` filters followed by channel mixing through D.

    Output channel ``i`` is ``sum_j D[i, j] * tiny_channel_j`` plus bias ``i``.
    """

    kind = "decomposed_conv"

    def __init__(self, name, dictionary, coefficients, bias=None, stride=1, padding=0, provenance=None):
        super().__init__(name)
        self.params["dictionary"] = Param(dictionary, "dictionary")
        self.params["coefficients"] = Param(coefficients, "coefficient")
        d, c = self.dictionary, self.coefficients
        if d.ndim != 2 or c.ndim != 4 or d.shape[1] != c.shape[0]:
            raise ShapeError(f"dictionary {d.shape} and coefficient filters {c.shape} do not chain")
        b = _bias_param(bias, d.shape[0])
        if b is not None:
            self.params["bias"] = b
        self.stride = int(stride)
        self.padding = int(padding)
        self.provenance = provenance

    dictionary = property(lambda self: self.params["dictionary"].value)
    coefficients = property(lambda self: self.params["coefficients"].value)

    @property
    def rank(self):
        return self.coefficients.shape[0]

    @property
    def filter_shape(self):
        return (self.dictionary.shape[0],) + self.coefficients.shape[1:]

    output_shape = Conv2d.output_shape

    def forward(self, x, train=False, rng=None):
        z, self._cache = nx.conv2d_forward(x, self.coefficients, None, self.stride, self.padding)
        n, l, h, w = z.shape
        self._z = z.transpose(0, 2, 3, 1).reshape(-1, l)
        y = self._z @ self.dictionary.T
        if "bias" in self.params:
            y += self.params["bias"].value
        return np.ascontiguousarray(y.reshape(n, h, w, -1).transpose(0, 3, 1, 2))

    def backward(self, grad):
        n, m, h, w = grad.shape
        g = grad.transpose(0, 2, 3, 1).reshape(-1, m)
        self._accumulate("dictionary", g.T @ self._z)
        if "bias" in self.params:
            self._accumulate("bias", g.sum(axis=0))
        gz = (g @ self.dictionary).reshape(n, h, w, -1).transpose(0, 3, 1, 2)
        gx, gc, _ = nx.conv2d_backward(np.ascontiguousarray(gz), self._cache)
        self._accumulate("coefficients", gc)
        return gx

    def config(self):
        cfg = {**super().config(), "stride": self.stride, "padding": self.padding}
        if self.provenance is not None:
            cfg["provenance"] = self.provenance.to_dict()
        return cfg


# ---------------------------------------------------------------------------
# parameter-free and normalization layers
# ---------------------------------------------------------------------------


class MaxPool2d(Layer):
    kind = "maxpool"

    def __init__(self, name, size=2, stride=None):
        super().__init__(name)
        self.size = int(size)
        self.stride = int(stride or size)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        ho = (h - self.size) // self.stride + 1
        wo = (w - self.size) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.name}: input {tuple(in_shape)} too small to pool")
        return (c, ho, wo)

    def forward(self, x, train=False, rng=None):
        y, self._cache = nx.maxpool2d_forward(x, self.size, self.stride)
        return y

    def backward(self, grad):
        return nx.maxpool2d_backward(grad, self._cache)

    def config(self):
        return {**super().config(), "size": self.size, "stride": self.stride}


class BatchNorm(Layer):
    """Per-channel batch normalization for (N,C,H,W) or (N,C) inputs.

    Running statistics move with ``momentum`` during training unless
    ``track_stats`` is False.
    """

    kind = "batchnorm"

    def __init__(self, name, channels, gamma=None, beta=None, momentum=0.1, eps=1e-5):
        super().__init__(name)
        self.params["gamma"] = Param(np.ones(channels) if gamma is None else gamma, "dense")
        self.params["beta"] = Param(np.zeros(channels) if beta is None else beta, "bias")
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.track_stats = True

    @property
    def channels(self):
        return self.params["gamma"].value.shape[0]

    def output_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise ShapeError(f"{self.name}: expects {self.channels} channels, got {tuple(in_shape)}")
        return in_shape

    def forward(self, x, train=False, rng=None):
        gamma, beta = self.params["gamma"].value, self.params["beta"].value
        self._batch_stats = train
        if train:
            y, self._cache = nx.batchnorm_forward(x, gamma, beta, self.eps)
            if self.track_stats:
                mean, var = self._cache[5], self._cache[6]
                mom = self.momentum
                self.buffers["running_mean"] = (1 - mom) * self.buffers["running_mean"] + mom * mean
                self.buffers["running_var"] = (1 - mom) * self.buffers["running_var"] + mom * var
        else:
            y, self._cache = nx.batchnorm_forward(
                x, gamma, beta, self.eps, self.buffers["running_mean"], self.buffers["running_var"]
            )
        return y

    def backward(self, grad):
        gx, gg, gb = nx.batchnorm_backward(grad, self._cache, self._batch_stats)
        self._accumulate("gamma", gg)
        self._accumulate("beta", gb)
        return gx

    def config(self):
        return {**super().config(), "channels": self.channels, "momentum": self.momentum, "eps": self.eps}


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, name, rate=0.5):
        super().__init__(name)
        self.rate = float(rate)

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("dropout in training mode needs an rng")
        self._mask = nx.dropout_mask(x.shape, self.rate, rng)
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask

    def config(self):
        return {**super().config(), "rate": self.rate}


class Activation(Layer):
    kind = "activation"

    def __init__(self, name, fn="relu", slope=0.01):
        super().__init__(name)
        if fn not in ("relu", "leaky_relu"):
            raise ValueError(f"unknown activation {fn!r}")
        self.fn = fn
        self.slope = float(slope)

    def forward(self, x, train=False, rng=None):
        self._x = x
        return nx.relu(x) if self.fn == "relu" else nx.leaky_relu(x, self.slope)

    def backward(self, grad):
        if self.fn == "relu":
            return nx.relu_grad(self._x, grad)
        return nx.leaky_relu_grad(self._x, grad, self.slope)

    def config(self):
        cfg = {**super().config(), "fn": self.fn}
        if self.fn == "leaky_relu":
            cfg["slope"] = self.slope
        return cfg


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


PARAMETRIC_DENSE = (Dense, Conv2d)
DECOMPOSED = (DecomposedDense, DecomposedConv2d)


def build_layer(cfg: dict, arrays: dict[str, np.ndarray]) -> Layer:
    """Rebuild a layer from its ``config()`` dict and named parameter arrays."""
    kind, name = cfg["kind"], cfg["name"]
    prov = Provenance.from_dict(cfg["provenance"]) if "provenance" in cfg else None
    if kind == "fc":
        return Dense(name, arrays["weight"], arrays.get("bias"))
    if kind == "conv":
        return Conv2d(name, arrays["weight"], arrays.get("bias"), cfg["stride"], cfg["padding"])
    if kind == "decomposed_fc":
        return DecomposedDense(name, arrays["dictionary"], arrays["coefficients"], arrays.get("bias"), prov)
    if kind == "decomposed_conv":
        return DecomposedConv2d(
            name, arrays["dictionary"], arrays["coefficients"], arrays.get("bias"),
            cfg["stride"], cfg["padding"], prov,
        )
    if kind == "maxpool":
        return MaxPool2d(name, cfg["size"], cfg["stride"])
    if kind == "batchnorm":
        layer = BatchNorm(name, cfg["channels"], arrays.get("gamma"), arrays.get("beta"), cfg["momentum"], cfg["eps"])
        for key in ("running_mean", "running_var"):
            if key in arrays:
                layer.buffers[key] = np.ascontiguousarray(arrays[key], dtype=np.float64)
        return layer
    if kind == "dropout":
        return Dropout(name, cfg["rate"])
    if kind == "activation":
        return Activation(name, cfg["fn"], cfg.get("slope", 0.01))
    if kind == "flatten":
        return Flatten(name)
    raise StructureError(f"unknown layer kind {kind!r}")
