"""Model graph, optimizers and the deterministic train / evaluate loops."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import numeric as nx
from .errors import ArgumentError, DivergenceError, ShapeError, StructureError
from .layers import DECOMPOSED, PARAMETRIC_DENSE, BatchNorm, Conv2d, Dense, Layer, Param, build_layer
from .subspace import SelectionPolicy
from .transform import transform_layer

log = logging.getLogger(__name__)


class Model:
    """Ordered list of layers; the last layer emits class logits.

    ``class_labels[i]`` is the original dataset label of output row ``i``.
    """

    def __init__(self, layers: list[Layer], input_shape, class_labels=None, metadata=None):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise StructureError(f"duplicate layer names in {names}")
        self.shapes = self._chain_shapes()
        if len(self.shapes[-1]) != 1:
            raise StructureError(f"final layer must emit a vector of logits, got shape {self.shapes[-1]}")
        n_out = self.shapes[-1][0]
        self.class_labels = list(range(n_out)) if class_labels is None else [int(c) for c in class_labels]
        if len(self.class_labels) != n_out:
            raise StructureError(f"{len(self.class_labels)} class labels for {n_out} outputs")
        self.metadata = dict(metadata or {})

    def _chain_shapes(self):
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(tuple(layer.output_shape(shapes[-1])))
        return shapes

    def revalidate(self):
        self.shapes = self._chain_shapes()

    @property
    def num_outputs(self) -> int:
        return self.shapes[-1][0]

    @property
    def output_layer(self) -> Layer:
        return self.layers[-1]

    def is_decomposed(self) -> bool:
        return any(isinstance(layer, DECOMPOSED) for layer in self.layers)

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def named_params(self) -> list[tuple[str, Param]]:
        return [(f"{layer.name}.{k}", p) for layer in self.layers for k, p in layer.params.items()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{layer.name}.{k}", b) for layer in self.layers for k, b in layer.buffers.items()]

    def param_count(self) -> int:
        return sum(p.value.size for _, p in self.named_params())

    def forward(self, x, train=False, rng=None):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"batch shape {x.shape[1:]} does not match model input {self.input_shape}")
        for layer in self.layers:
            x = layer.forward(x, train, rng)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def zero_grad(self):
        for _, p in self.named_params():
            p.grad = None

    def predict(self, x, batch_size=500) -> np.ndarray:
        """Eval-mode logits, computed in chunks."""
        out = [self.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.num_outputs))

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def architecture(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [layer.config() for layer in self.layers],
            "class_labels": list(self.class_labels),
        }

    @classmethod
    def from_architecture(cls, arch: dict, arrays: Mapping[str, np.ndarray], metadata=None) -> "Model":
        layers = []
        for cfg in arch["layers"]:
            prefix = cfg["name"] + "."
            own = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
            layers.append(build_layer(cfg, own))
        return cls(layers, arch["input_shape"], arch.get("class_labels"), metadata)


# ---------------------------------------------------------------------------
# freeze masks
# ---------------------------------------------------------------------------


@dataclass
class FreezeMask:
    """Which parameters (and which dictionary/bias rows) may change.

    ``trainable`` maps parameter names to flags; names not listed are frozen.
    ``rows`` optionally restricts a listed parameter to some of its rows.
    ``freeze_stats`` pins batchnorm running statistics.
    """

    trainable: dict[str, bool] = field(default_factory=dict)
    rows: dict[str, np.ndarray] = field(default_factory=dict)
    freeze_stats: bool = False

    @classmethod
    def all_trainable(cls, model: Model) -> "FreezeMask":
        return cls({name: True for name, _ in model.named_params()})

    @classmethod
    def frozen(cls, model: Model) -> "FreezeMask":
        return cls({name: False for name, _ in model.named_params()}, freeze_stats=True)

    @classmethod
    def capture(cls, model: Model) -> "FreezeMask":
        mask = cls({name: p.trainable for name, p in model.named_params()})
        mask.rows = {name: p.rows.copy() for name, p in model.named_params() if p.rows is not None}
        mask.freeze_stats = any(
            not layer.track_stats for layer in model.layers if isinstance(layer, BatchNorm)
        )
        return mask

    def apply(self, model: Model) -> None:
        params = dict(model.named_params())
        for name in list(self.trainable) + list(self.rows):
            if name not in params:
                raise KeyError(f"mask names unknown parameter {name!r}")
        for name, p in params.items():
            p.trainable = bool(self.trainable.get(name, False))
            rows = self.rows.get(name)
            if rows is not None:
                if p.role not in ("dictionary", "bias"):
                    raise ArgumentError(f"row masks are only allowed on dictionary or bias rows, not {name!r}")
                rows = np.asarray(rows, dtype=bool)
                if rows.shape != (p.value.shape[0],):
                    raise ShapeError(f"row mask for {name!r} has shape {rows.shape}")
            p.rows = rows
        for layer in model.layers:
            if isinstance(layer, BatchNorm):
                layer.track_stats = not self.freeze_stats

    def count(self, model: Model) -> int:
        self_model = model.copy()
        self.apply(self_model)
        return sum(p.trainable_count() for _, p in self_model.named_params())


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 1
    max_iterations: int | None = None
    seed: int = 0
    momentum: float = 0.9
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    loss: str = "cross_entropy"

    def __post_init__(self):
        if self.optimizer not in ("sgd", "sgd-momentum", "adam"):
            raise ArgumentError(f"unknown optimizer {self.optimizer!r}")
        # zero is accepted so a run can be replayed without moving any weight
        if not self.learning_rate >= 0:
            raise ArgumentError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ArgumentError("batch_size must be >= 1")
        if self.loss != "cross_entropy":
            raise ArgumentError("only the cross_entropy loss is supported")
        self.adam_betas = tuple(self.adam_betas)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ArgumentError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


class Optimizer:
    def __init__(self, config: TrainConfig):
        self.config = config
        self.state: dict[int, dict] = {}
        self.t = 0

    def step(self, params: list[Param]) -> None:
        self.t += 1
        cfg = self.config
        for p in params:
            if not p.trainable or p.grad is None:
                continue
            mask = p.update_mask()
            g = p.grad if mask is None else p.grad * mask
            st = self.state.setdefault(id(p), {})
            if cfg.optimizer == "sgd":
                delta = cfg.learning_rate * g
            elif cfg.optimizer == "sgd-momentum":
                v = st["v"] = cfg.momentum * st.get("v", 0.0) + g
                delta = cfg.learning_rate * v
            else:
                b1, b2 = cfg.adam_betas
                m = st["m"] = b1 * st.get("m", 0.0) + (1 - b1) * g
                v = st["v"] = b2 * st.get("v", 0.0) + (1 - b2) * g * g
                mhat = m / (1 - b1**self.t)
                vhat = v / (1 - b2**self.t)
                delta = cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)
            if mask is None:
                p.value = p.value - delta
            else:
                p.value = np.where(mask, p.value - delta, p.value)


# ---------------------------------------------------------------------------
# train / evaluate
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    iterations: int = 0
    epochs: int = 0


@dataclass
class EvalReport:
    top1: float
    per_class: dict[int, float]
    count: int


def _as_arrays(dataset):
    if isinstance(dataset, tuple):
        return dataset
    return dataset.images, dataset.labels


def train(
    model: Model,
    dataset,
    config: TrainConfig,
    mask: FreezeMask | None = None,
    on_epoch: Callable[[int, TrainReport], None] | None = None,
    on_iteration: Callable[[int, TrainReport], None] | None = None,
) -> TrainReport:
    """Minibatch training with cross-entropy loss.

    ``dataset`` is anything with ``images``/``labels`` or an ``(x, y)``
    tuple; labels must already be output indices. The sample order is
    reshuffled every epoch from ``config.seed``, so a given seed fixes the
    whole trajectory. Parameters frozen by ``mask`` are never written.
    """
    x, y = _as_arrays(dataset)
    if len(x) == 0:
        raise ArgumentError("cannot train on an empty dataset")
    if mask is not None:
        mask.apply(model)
    rng = nx.make_rng(config.seed)
    opt = Optimizer(config)
    params = [p for _, p in model.named_params()]
    report = TrainReport()
    limit = config.max_iterations
    correct = seen = 0
    epoch = 0
    while epoch < config.epochs and (limit is None or report.iterations < limit):
        order = rng.permutation(len(x))
        correct = seen = 0
        for start in range(0, len(x), config.batch_size):
            if limit is not None and report.iterations >= limit:
                break
            idx = order[start : start + config.batch_size]
            xb, yb = x[idx], y[idx]
            model.zero_grad()
            # overflow shows up as a non-finite loss, reported below
            with np.errstate(over="ignore", invalid="ignore"):
                logits = model.forward(xb, train=True, rng=rng)
                loss = nx.cross_entropy(logits, yb)
                if not np.isfinite(loss):
                    raise DivergenceError(report.iterations + 1, report)
                model.backward(nx.cross_entropy_grad(logits, yb))
                opt.step(params)
            report.iterations += 1
            report.losses.append(loss)
            correct += int((logits.argmax(axis=1) == yb).sum())
            seen += len(idx)
            if on_iteration is not None:
                on_iteration(report.iterations, report)
        epoch += 1
        report.epochs = epoch
        report.accuracies.append(correct / max(seen, 1))
        if on_epoch is not None:
            on_epoch(epoch, report)
    model.zero_grad()
    return report


def evaluate(model: Model, dataset, batch_size: int = 500) -> EvalReport:
    """Top-1 and per-class accuracy in eval mode (no dropout, running BN stats)."""
    x, y = _as_arrays(dataset)
    if len(x) == 0:
        return EvalReport(float("nan"), {}, 0)
    pred = model.predict(x, batch_size).argmax(axis=1)
    hit = pred == y
    per_class = {int(c): float(hit[y == c].mean()) for c in np.unique(y)}
    return EvalReport(float(hit.mean()), per_class, len(y))


# ---------------------------------------------------------------------------
# whole-model decomposition
# ---------------------------------------------------------------------------


def resolve_betas(model: Model, betas: Mapping[str, float]) -> dict[str, float]:
    """Per-layer thresholds: a layer's own name wins over its kind ("fc"/"conv")."""
    out = {}
    for layer in model.layers:
        if not isinstance(layer, PARAMETRIC_DENSE):
            continue
        kind = "conv" if isinstance(layer, Conv2d) else "fc"
        if layer.name in betas:
            out[layer.name] = float(betas[layer.name])
        elif kind in betas:
            out[layer.name] = float(betas[kind])
        else:
            raise ArgumentError(f"no beta given for layer {layer.name!r}")
    unknown = set(betas) - set(out) - {"conv", "fc"}
    if unknown:
        raise ArgumentError(f"betas name unknown layers: {sorted(unknown)}")
    return out


def transform_model(model: Model, betas: Mapping[str, float], policy: SelectionPolicy | None = None) -> Model:
    """Replace every dense fc/conv layer by its dictionary/coefficient pair.

    Returns a new model; the input model is not modified.
    """
    if model.is_decomposed():
        raise StructureError("model is already decomposed")
    per_layer = resolve_betas(model, betas)
    layers = []
    for layer in model.layers:
        if isinstance(layer, (Dense, Conv2d)):
            new = transform_layer(layer, per_layer[layer.name], policy)
            log.info(
                "%s: l=%d of %d, error %.4f (beta %.3f)",
                layer.name, new.rank, new.dictionary.shape[0],
                new.provenance.achieved_rel_error, per_layer[layer.name],
            )
            layers.append(new)
        else:
            layers.append(copy.deepcopy(layer))
    return Model(layers, model.input_shape, model.class_labels, model.metadata)
