"""Rewrite trained fc/conv layers as dictionary/coefficient pairs."""

from __future__ import annotations

import numpy as np

from .layers import Conv2d, DecomposedConv2d, DecomposedDense, Dense, Provenance
from .numeric import matricize, tensorize
from .subspace import Decomposition, SelectionPolicy, decompose


def matricize_conv(weight) -> np.ndarray:
    """(m, k, kh, kw) filters -> m x (k*kh*kw); row i is filter i flattened."""
    weight = np.asarray(weight, dtype=np.float64)
    if weight.ndim != 4:
        raise ValueError(f"expected a 4-d conv weight, got shape {weight.shape}")
    return matricize(weight)


def provenance_of(dec: Decomposition) -> Provenance:
    return Provenance(
        beta=dec.beta,
        selected=dec.selected,
        achieved_rel_error=dec.achieved_rel_error,
        rank_exhausted=dec.rank_exhausted,
        policy=dec.policy.kind,
    )


def transform_fc(weight, bias=None, beta=0.0, policy=None, name="fc") -> DecomposedDense:
    dec = decompose(weight, beta, policy)
    return DecomposedDense(name, dec.dictionary, dec.coefficients, bias, provenance_of(dec))


def transform_conv(weight, bias=None, beta=0.0, policy=None, stride=1, padding=0, name="conv") -> DecomposedConv2d:
    weight = np.asarray(weight, dtype=np.float64)
    dec = decompose(matricize_conv(weight), beta, policy)
    filters = tensorize(dec.coefficients, (dec.rank,) + weight.shape[1:])
    return DecomposedConv2d(name, dec.dictionary, filters, bias, stride, padding, provenance_of(dec))


def transform_layer(layer, beta: float, policy: SelectionPolicy | None = None):
    """Decompose a dense ``Dense`` or ``Conv2d`` layer, keeping its name and bias."""
    if not isinstance(layer, (Dense, Conv2d)):
        raise TypeError(f"cannot decompose layer of kind {layer.kind!r}")
    bias = layer.params["bias"].value.copy() if "bias" in layer.params else None
    weight = layer.params["weight"].value
    if isinstance(layer, Dense):
        return transform_fc(weight, bias, beta, policy, name=layer.name)
    return transform_conv(weight, bias, beta, policy, layer.stride, layer.padding, name=layer.name)


def weight_matrix(layer) -> np.ndarray:
    """The (possibly reconstructed) 2-d weight matrix of an fc or conv layer."""
    if isinstance(layer, Dense):
        return layer.params["weight"].value
    if isinstance(layer, Conv2d):
        return matricize_conv(layer.params["weight"].value)
    if isinstance(layer, (DecomposedDense, DecomposedConv2d)):
        return layer.dictionary @ matricize(layer.coefficients)
    raise TypeError(f"layer kind {layer.kind!r} has no weight matrix")
