"""Parameter and multiply-accumulate accounting for dense vs decomposed models."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .layers import Conv2d, DecomposedConv2d, DecomposedDense, Dense

BYTES_PER_PARAM = 8


@dataclass
class LayerCost:
    name: str
    kind: str
    rank: int | None
    params_dense: int
    params_decomposed: int
    macs_dense: int
    macs_decomposed: int
    # decomposed MACs without the transformation (dictionary) stage
    macs_tiny_only: int

    @property
    def negative_savings(self) -> bool:
        return self.params_decomposed > self.params_dense or self.macs_decomposed > self.macs_dense


def _ratio(a, b):
    return a / b if b else float("inf")


@dataclass
class CostReport:
    layers: list[LayerCost]
    input_shape: tuple[int, ...]
    totals: dict[str, int] = field(init=False)

    def __post_init__(self):
        keys = ("params_dense", "params_decomposed", "macs_dense", "macs_decomposed", "macs_tiny_only")
        self.totals = {k: sum(getattr(c, k) for c in self.layers) for k in keys}

    @property
    def params_ratio(self) -> float:
        return _ratio(self.totals["params_dense"], self.totals["params_decomposed"])

    @property
    def macs_ratio(self) -> float:
        return _ratio(self.totals["macs_dense"], self.totals["macs_decomposed"])

    @property
    def macs_ratio_tiny_only(self) -> float:
        return _ratio(self.totals["macs_dense"], self.totals["macs_tiny_only"])

    @property
    def memory_bytes_dense(self) -> int:
        return BYTES_PER_PARAM * self.totals["params_dense"]

    @property
    def memory_bytes_decomposed(self) -> int:
        return BYTES_PER_PARAM * self.totals["params_decomposed"]

    @property
    def negative_savings(self) -> list[str]:
        return [c.name for c in self.layers if c.negative_savings]

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [{**asdict(c), "negative_savings": c.negative_savings} for c in self.layers],
            "totals": dict(self.totals),
            "params_ratio": self.params_ratio,
            "macs_ratio": self.macs_ratio,
            "macs_ratio_tiny_only": self.macs_ratio_tiny_only,
            "negative_savings": self.negative_savings,
        }

    def table(self) -> str:
        lines = [f"{'layer':<10}{'l':>5}{'params':>12}{'decomp':>12}{'macs':>14}{'decomp':>14}"]
        for c in self.layers:
            flag = "  (no savings)" if c.negative_savings else ""
            lines.append(
                f"{c.name:<10}{'-' if c.rank is None else c.rank:>5}{c.params_dense:>12}{c.params_decomposed:>12}"
                f"{c.macs_dense:>14}{c.macs_decomposed:>14}{flag}"
            )
        t = self.totals
        lines.append(
            f"{'total':<10}{'':>5}{t['params_dense']:>12}{t['params_decomposed']:>12}"
            f"{t['macs_dense']:>14}{t['macs_decomposed']:>14}"
        )
        lines.append(f"params ratio {self.params_ratio:.2f}x, MAC ratio {self.macs_ratio:.2f}x "
                     f"({self.macs_ratio_tiny_only:.2f}x without transformation layers)")
        return "\n".join(lines)


def _bias(layer) -> int:
    return layer.params["bias"].value.size if "bias" in layer.params else 0


def cost(model, input_shape=None) -> CostReport:
    """Exact parameter and MAC counts, per layer and in total.

    ``input_shape`` defaults to the model's own; shapes must chain from it.
    Conv MACs are per image: filter MACs times output positions. The
    transformation stage of a decomposed conv costs ``m*l`` per position.
    """
    shape = tuple(input_shape or model.input_shape)
    rows = []
    for layer in model.layers:
        out = tuple(layer.output_shape(shape))
        b = _bias(layer)
        if isinstance(layer, Dense):
            m, n = layer.params["weight"].value.shape
            rows.append(LayerCost(layer.name, "fc", None, m * n + b, m * n + b, m * n, m * n, m * n))
        elif isinstance(layer, DecomposedDense):
            m, l = layer.dictionary.shape
            n = layer.coefficients.shape[1]
            rows.append(
                LayerCost(layer.name, "fc", l, m * n + b, l * (m + n) + b, m * n, l * (m + n), l * n)
            )
        elif isinstance(layer, Conv2d):
            m, k, kh, kw = layer.filter_shape
            pos = out[1] * out[2]
            p = m * k * kh * kw
            rows.append(LayerCost(layer.name, "conv", None, p + b, p + b, p * pos, p * pos, p * pos))
        elif isinstance(layer, DecomposedConv2d):
            m, l = layer.dictionary.shape
            _, k, kh, kw = layer.coefficients.shape
            pos = out[1] * out[2]
            tiny = l * k * kh * kw
            rows.append(
                LayerCost(
                    layer.name, "conv", l,
                    m * k * kh * kw + b, tiny + m * l + b,
                    m * k * kh * kw * pos, (tiny + m * l) * pos, tiny * pos,
                )
            )
        elif layer.params:
            p = sum(v.value.size for v in layer.params.values())
            rows.append(LayerCost(layer.name, layer.kind, None, p, p, 0, 0, 0))
        shape = out
    return CostReport(rows, tuple(int(d) for d in (input_shape or model.input_shape)))
