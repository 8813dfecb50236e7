"""Few-shot class-incremental adaptation of a decomposed model.

Two update modes:

``standard``
    Every coefficient matrix/tensor is trainable, plus the appended rows of the
    last layer's dictionary and bias. All other dictionary entries stay frozen.
``ultra_light``
    Only the appended dictionary rows of the last layer move; batchnorm
    statistics are pinned as well.

A third mode, ``conventional``, fine-tunes every parameter of an
undecomposed model. It is the comparison arm for the two modes above.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .data import Dataset
from .engine import FreezeMask, Model, TrainConfig, evaluate, train
from .errors import ArgumentError, DataError, StructureError
from .layers import DECOMPOSED, Dense, DecomposedDense
from .numeric import make_rng

STANDARD = "standard"
ULTRA_LIGHT = "ultra_light"
CONVENTIONAL = "conventional"
MODES = (STANDARD, ULTRA_LIGHT, CONVENTIONAL)


def parse_mode(name: str) -> str:
    mode = {"ultralight": ULTRA_LIGHT, "ultra-light": ULTRA_LIGHT}.get(name, name)
    if mode not in MODES:
        raise ArgumentError(f"unknown few-shot mode {name!r}")
    return mode


@dataclass(frozen=True)
class EpisodeSpec:
    ways: int
    shots: int
    new_class_ids: tuple[int, ...] | None = None
    old_exemplars_per_class: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.ways < 1 or self.shots < 1:
            raise ArgumentError("an episode needs at least one way and one shot")
        if self.old_exemplars_per_class < 0:
            raise ArgumentError("old_exemplars_per_class must be >= 0")


@dataclass
class Episode:
    classes: list[int]
    support: Dataset
    query: Dataset
    exemplars: Dataset | None = None
    support_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    query_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def sample_episode(pool: Dataset, spec: EpisodeSpec, old_train: Dataset | None = None) -> Episode:
    """Draw an X-way Y-shot episode from the new-class pool.

    For each of ``spec.ways`` randomly chosen classes, ``spec.shots`` samples
    form the support set and every remaining sample of that class forms the
    query set. With ``old_exemplars_per_class > 0``, that many samples per old
    class are drawn from ``old_train`` for replay.
    """
    rng = make_rng(spec.seed)
    available = pool.class_ids if spec.new_class_ids is None else sorted(spec.new_class_ids)
    missing = [c for c in available if c not in pool.class_ids]
    if missing:
        raise DataError(f"classes {missing} are not in the new-class pool")
    if spec.ways > len(available):
        raise DataError(f"{spec.ways}-way episode needs {spec.ways} classes, pool has {len(available)}")
    classes = sorted(int(c) for c in rng.choice(available, spec.ways, replace=False))
    support, query = [], []
    for c in classes:
        idx = np.flatnonzero(pool.labels == c)
        if len(idx) <= spec.shots:
            raise DataError(f"class {c} has {len(idx)} samples, need more than {spec.shots}")
        idx = rng.permutation(idx)
        support.extend(idx[: spec.shots])
        query.extend(idx[spec.shots :])
    support_index = np.sort(np.array(support, dtype=np.int64))
    query_index = np.sort(np.array(query, dtype=np.int64))

    exemplars = None
    if spec.old_exemplars_per_class and old_train is not None:
        keep = []
        for c in old_train.class_ids:
            idx = np.flatnonzero(old_train.labels == c)
            keep.extend(rng.choice(idx, min(spec.old_exemplars_per_class, len(idx)), replace=False))
        exemplars = old_train.subset(np.sort(np.array(keep, dtype=np.int64)))
    return Episode(
        classes, pool.subset(support_index), pool.subset(query_index), exemplars, support_index, query_index
    )


def extend_output_layer(model: Model, new_class_count: int, new_labels=None, seed: int = 0) -> Model:
    """Append output rows for new classes; returns a new model.

    New dictionary rows start at the mean of the existing rows plus Gaussian
    noise with standard deviation 0.01 x the mean row norm. The new bias
    entries are zero, and old rows and coefficients are copied unchanged.
    A dense output layer is extended the same way (its weight rows play the
    dictionary's part), which the conventional baseline needs.
    """
    last = model.output_layer
    if not isinstance(last, (DecomposedDense, Dense)):
        raise StructureError(f"output layer {last.name!r} is {last.kind}, not a decomposed fc layer")
    new = model.copy()
    if new_class_count == 0:
        return new
    if new_class_count < 0:
        raise ArgumentError("new_class_count must be >= 0")
    if new_labels is None:
        start = max(model.class_labels) + 1
        new_labels = list(range(start, start + new_class_count))
    if len(new_labels) != new_class_count or set(new_labels) & set(model.class_labels):
        raise ArgumentError("new labels must be distinct from the model's classes")

    layer = new.output_layer
    key = "dictionary" if isinstance(layer, DecomposedDense) else "weight"
    rows = layer.params[key].value
    rng = make_rng(seed)
    sigma = 0.01 * np.linalg.norm(rows, axis=1).mean()
    fresh = rows.mean(axis=0) + rng.normal(0.0, sigma, (new_class_count, rows.shape[1]))
    layer.params[key].value = np.vstack([rows, fresh])
    if "bias" in layer.params:
        layer.params["bias"].value = np.concatenate([layer.params["bias"].value, np.zeros(new_class_count)])
    for p in layer.params.values():
        p.rows = None
        p.grad = None
    new.class_labels = list(model.class_labels) + [int(c) for c in new_labels]
    new.revalidate()
    return new


def mode_mask(model: Model, mode: str, new_class_count: int) -> FreezeMask:
    """FreezeMask implementing a few-shot mode on an already-extended model."""
    mode = parse_mode(mode)
    names = dict(model.named_params())
    last = model.output_layer
    n_out = model.num_outputs
    new_rows = np.zeros(n_out, dtype=bool)
    new_rows[n_out - new_class_count :] = True

    if mode == CONVENTIONAL:
        return FreezeMask.all_trainable(model)
    if not isinstance(last, DecomposedDense):
        raise StructureError(f"{mode} mode needs a decomposed output layer")
    mask = FreezeMask({n: False for n in names})
    dict_name = f"{last.name}.dictionary"
    if new_class_count:
        mask.trainable[dict_name] = True
        mask.rows[dict_name] = new_rows
    if mode == STANDARD:
        for n, p in names.items():
            if p.role == "coefficient":
                mask.trainable[n] = True
        bias_name = f"{last.name}.bias"
        if new_class_count and bias_name in names:
            mask.trainable[bias_name] = True
            mask.rows[bias_name] = new_rows
    else:
        mask.freeze_stats = True
    return mask


def trainable_count(model: Model, mode: str, new_class_count: int = 0) -> dict[str, int]:
    """Trainable scalar count per layer under a few-shot mode, plus ``"total"``."""
    probe = model.copy()
    mode_mask(probe, mode, new_class_count).apply(probe)
    out = {layer.name: sum(p.trainable_count() for p in layer.params.values()) for layer in probe.layers}
    out = {k: v for k, v in out.items() if v}
    out["total"] = sum(out.values())
    return out


@dataclass
class AdaptReport:
    mode: str
    classes: list[int]
    new_acc: float
    old_acc: float
    iterations: int
    trainable: int
    trainable_per_layer: dict[str, int]
    curve: list[dict] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def to_dict(self):
        return {
            "mode": self.mode,
            "classes": self.classes,
            "new_acc": self.new_acc,
            "old_acc": self.old_acc,
            "iterations": self.iterations,
            "trainable": self.trainable,
            "trainable_per_layer": self.trainable_per_layer,
            "curve": self.curve,
        }


def _output_index(model: Model, labels) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(model.class_labels)}
    try:
        return np.array([lookup[int(c)] for c in labels], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"label {exc.args[0]} has no output row in the model") from None


def fewshot_update(
    model: Model,
    episode: Episode,
    mode: str,
    config: TrainConfig,
    old_test: Dataset | None = None,
    eval_every: int = 1,
) -> AdaptReport:
    """Adapt ``model`` in place on the episode's support set (+ replay exemplars).

    ``model`` must already carry output rows for ``episode.classes`` (see
    :func:`extend_output_layer`). ``config.max_iterations`` full passes are
    made (one optimizer step each when the batch covers the set). New-class
    accuracy is measured on the query set over all outputs. Old-class
    accuracy uses ``old_test``, whose labels are old output indices.
    """
    mode = parse_mode(mode)
    if mode != CONVENTIONAL and not any(isinstance(l, DECOMPOSED) for l in model.layers):
        raise StructureError("few-shot modes need a decomposed model")
    if len(episode.support) == 0:
        raise DataError("empty support set")
    n_new = len(episode.classes)
    trained = set(model.class_labels[: model.num_outputs - n_new])
    if trained & set(episode.classes):
        raise DataError(f"episode classes {sorted(trained & set(episode.classes))} are already trained classes")

    x = episode.support.images
    y = _output_index(model, episode.support.labels)
    if episode.exemplars is not None and len(episode.exemplars):
        x = np.concatenate([x, episode.exemplars.images])
        y = np.concatenate([y, episode.exemplars.labels])
    query = (episode.query.images, _output_index(model, episode.query.labels))

    mask = mode_mask(model, mode, n_new)
    counts = trainable_count(model, mode, n_new)
    iterations = config.max_iterations
    if iterations is None:
        iterations = config.epochs * math.ceil(len(x) / config.batch_size)
    cfg = replace(config, epochs=max(iterations, 1), max_iterations=iterations)

    curve = []

    def snapshot(it):
        point = {"iteration": it, "new_acc": evaluate(model, query).top1}
        if old_test is not None:
            point["old_acc"] = evaluate(model, old_test).top1
        curve.append(point)

    snapshot(0)

    def on_iteration(it, _report):
        if it % eval_every == 0 or it == iterations:
            snapshot(it)

    if iterations > 0:
        report = train(model, (x, y), cfg, mask, on_iteration=on_iteration)
        losses = report.losses
    else:
        mask.apply(model)
        losses = []
    final = curve[-1]
    return AdaptReport(
        mode=mode,
        classes=list(episode.classes),
        new_acc=final["new_acc"],
        old_acc=final.get("old_acc", float("nan")),
        iterations=iterations,
        trainable=counts["total"],
        trainable_per_layer={k: v for k, v in counts.items() if k != "total"},
        curve=curve,
        losses=losses,
    )


@dataclass
class Aggregate:
    episodes: int
    new_mean: float
    new_ci95: float
    old_mean: float
    old_ci95: float


def mean_ci95(values) -> tuple[float, float]:
    """Mean and Student-t 95% half-width."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return float(v.mean()), 0.0
    half = stats.t.ppf(0.975, len(v) - 1) * v.std(ddof=1) / math.sqrt(len(v))
    return float(v.mean()), float(half)


def aggregate(reports: list[AdaptReport]) -> Aggregate:
    nm, nc = mean_ci95([r.new_acc for r in reports])
    om, oc = mean_ci95([r.old_acc for r in reports])
    return Aggregate(len(reports), nm, nc, om, oc)


def run_episodes(
    model: Model,
    pool: Dataset,
    spec: EpisodeSpec,
    mode: str,
    config: TrainConfig,
    episodes: int,
    old_train: Dataset | None = None,
    old_test: Dataset | None = None,
    eval_every: int = 10,
    on_episode=None,
) -> list[AdaptReport]:
    """Repeat sample -> extend -> adapt ``episodes`` times from the same start model.

    Episode ``e`` uses seed ``spec.seed + e`` for sampling, new-row noise
    and the training order.
    """
    reports = []
    for e in range(episodes):
        ep_spec = replace(spec, seed=spec.seed + e)
        episode = sample_episode(pool, ep_spec, old_train)
        adapted = extend_output_layer(model, len(episode.classes), episode.classes, seed=ep_spec.seed)
        rep = fewshot_update(adapted, episode, mode, replace(config, seed=config.seed + e), old_test, eval_every)
        reports.append(rep)
        if on_episode is not None:
            on_episode(e, rep)
    return reports
