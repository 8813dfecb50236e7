"""Built-in architectures and the JSON architecture descriptor.

A descriptor is a dict (or JSON file) of the form::

    {"input_shape": [1, 28, 28],
     "layers": [{"kind": "conv", "out_channels": 16, "kernel": 5},
                {"kind": "activation", "fn": "relu"},
                {"kind": "maxpool", "size": 2},
                {"kind": "flatten"},
                {"kind": "fc", "out_features": "classes"}]}

``"classes"`` stands for the number of output classes. Layer names default
to ``<kind><index>``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .engine import Model
from .errors import ArgumentError
from .layers import Activation, BatchNorm, Conv2d, Dense, Dropout, Flatten, MaxPool2d
from .numeric import make_rng

LENET = {
    "input_shape": [1, 28, 28],
    "layers": [
        {"kind": "conv", "name": "conv1", "out_channels": 20, "kernel": 5},
        {"kind": "activation", "name": "relu1", "fn": "relu"},
        {"kind": "maxpool", "name": "pool1", "size": 2},
        {"kind": "conv", "name": "conv2", "out_channels": 50, "kernel": 5},
        {"kind": "activation", "name": "relu2", "fn": "relu"},
        {"kind": "maxpool", "name": "pool2", "size": 2},
        {"kind": "dropout", "name": "drop", "rate": 0.25},
        {"kind": "flatten", "name": "flat"},
        {"kind": "fc", "name": "fc1", "out_features": 256},
        {"kind": "activation", "name": "relu3", "fn": "relu"},
        {"kind": "fc", "name": "fc2", "out_features": "classes"},
    ],
}


def _omniglot4():
    layers = []
    for b in range(1, 5):
        layers += [
            {"kind": "conv", "name": f"conv{b}", "out_channels": 64, "kernel": 3, "padding": 1},
            {"kind": "batchnorm", "name": f"bn{b}"},
            {"kind": "maxpool", "name": f"pool{b}", "size": 2},
            {"kind": "activation", "name": f"lrelu{b}", "fn": "leaky_relu"},
        ]
    layers += [{"kind": "flatten", "name": "flat"}, {"kind": "fc", "name": "fc", "out_features": "classes"}]
    return {"input_shape": [1, 28, 28], "layers": layers}


BUILTIN = {"lenet": LENET, "omniglot4": _omniglot4()}


def load_descriptor(arch) -> dict:
    """Resolve a built-in name, a JSON file path, or an already-parsed dict."""
    if isinstance(arch, dict):
        return arch
    if arch in BUILTIN:
        return BUILTIN[arch]
    path = Path(arch)
    if not path.is_file():
        raise ArgumentError(f"unknown architecture {arch!r} (not a built-in name or a file)")
    return json.loads(path.read_text())


def build(arch, num_classes: int, seed: int = 0, class_labels=None, input_shape=None) -> Model:
    """Instantiate a freshly initialized model (He-normal weights, zero biases)."""
    desc = load_descriptor(arch)
    rng = make_rng(seed)
    shape = tuple(input_shape or desc["input_shape"])
    layers = []
    for i, spec in enumerate(desc["layers"]):
        kind = spec["kind"]
        name = spec.get("name", f"{kind}{i}")
        if kind == "conv":
            k = spec["kernel"]
            kh, kw = (k, k) if isinstance(k, int) else k
            out = spec["out_channels"]
            fan_in = shape[0] * kh * kw
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (out, shape[0], kh, kw))
            layer = Conv2d(name, w, np.zeros(out), spec.get("stride", 1), spec.get("padding", 0))
        elif kind == "fc":
            out = spec["out_features"]
            out = num_classes if out == "classes" else int(out)
            w = rng.normal(0.0, np.sqrt(2.0 / shape[0]), (out, shape[0]))
            layer = Dense(name, w, np.zeros(out))
        elif kind == "batchnorm":
            layer = BatchNorm(name, shape[0], momentum=spec.get("momentum", 0.1), eps=spec.get("eps", 1e-5))
        elif kind == "maxpool":
            layer = MaxPool2d(name, spec.get("size", 2), spec.get("stride"))
        elif kind == "dropout":
            layer = Dropout(name, spec.get("rate", 0.5))
        elif kind == "activation":
            layer = Activation(name, spec.get("fn", "relu"), spec.get("slope", 0.01))
        elif kind == "flatten":
            layer = Flatten(name)
        else:
            raise ArgumentError(f"unknown layer kind {kind!r} in descriptor")
        shape = tuple(layer.output_shape(shape))
        layers.append(layer)
    return Model(layers, desc["input_shape"] if input_shape is None else input_shape, class_labels)
