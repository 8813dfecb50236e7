"""Command-line entry point: train -> decompose -> fewshot, plus a beta sweep report.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric divergence.
"""

from __future__ import annotations

import csv
import json
import logging
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import click

from . import architectures, checkpoint, fewshot
from .cost import cost
from .data import load_source, split_old_new, stratified_subset
from .engine import TrainConfig, evaluate, train, transform_model
from .errors import (
    ArgumentError,
    CheckpointError,
    DataError,
    NumericError,
    ShapeError,
    StructureError,
)
from .subspace import SelectionPolicy

log = logging.getLogger("dictshot")

SCHEMA_VERSION = 1
EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 2, 3, 4

METRICS_COLUMNS = ["schema_version", "epoch", "iterations", "loss", "train_acc", "test_acc"]
FEWSHOT_COLUMNS = [
    "schema_version", "row", "mode", "ways", "shots", "classes", "iterations",
    "trainable", "new_acc", "new_ci95", "old_acc", "old_ci95",
]
CURVE_COLUMNS = ["schema_version", "episode", "iteration", "new_acc", "old_acc"]
SWEEP_COLUMNS = [
    "schema_version", "beta", "params_ratio", "macs_ratio", "new_acc", "old_acc",
    "params_dense", "params_decomposed", "macs_dense", "macs_decomposed", "macs_ratio_tiny_only",
    "ranks", "old_acc_dense", "old_acc_before_finetune", "fewshot_old_acc", "status",
]


class Failure(click.ClickException):
    def __init__(self, message, exit_code):
        super().__init__(message)
        self.exit_code = exit_code


class _Group(click.Group):
    """Maps package errors onto the documented exit codes."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (DataError, CheckpointError) as exc:
            raise Failure(str(exc), EXIT_DATA) from exc
        except NumericError as exc:
            raise Failure(str(exc), EXIT_DIVERGENCE) from exc
        except (ArgumentError, ShapeError, StructureError) as exc:
            raise Failure(str(exc), EXIT_USAGE) from exc


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def load_config(ref: str | None, default: str) -> TrainConfig:
    """A JSON config file, or the name of a bundled one ("train", "finetune", "fewshot")."""
    ref = ref or default
    path = Path(ref)
    if path.is_file():
        text = path.read_text()
    else:
        bundled = resources.files("dictshot") / "configs" / f"{ref}.json"
        if not bundled.is_file():
            raise click.UsageError(f"config {ref!r} is neither a file nor a bundled config")
        text = bundled.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise click.UsageError(f"config {ref!r} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise click.UsageError(f"config {ref!r} must be a JSON object")
    return TrainConfig.from_dict(doc)


def check_data_path(spec: str) -> str:
    if spec.startswith("synthetic"):
        return spec
    path = Path(spec)
    if not path.exists():
        raise click.UsageError(f"data path {spec!r} does not exist")
    return str(path.resolve())


def parse_ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}") from None


def load_splits(meta: dict, data_override: str | None = None):
    """(old_train, old_test, new_pool) for a checkpoint, from its recorded data source."""
    spec = data_override or meta.get("data")
    if spec is None:
        raise click.UsageError("checkpoint records no data source; pass --data")
    train_ds, test_ds = load_source(check_data_path(spec))
    old_train, old_test, pool = split_old_new(train_ds, test_ds, meta.get("held_out", []))
    if meta.get("max_train"):
        old_train = stratified_subset(old_train, total=meta["max_train"], seed=meta.get("seed", 0))
    return old_train, old_test, pool


def write_rows(path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({"schema_version": SCHEMA_VERSION, **row})


def fmt(x):
    return "" if x is None else f"{x:.6f}"


def parse_betas(beta_conv, beta_fc, overrides) -> dict[str, float]:
    betas = {}
    if beta_conv is not None:
        betas["conv"] = beta_conv
    if beta_fc is not None:
        betas["fc"] = beta_fc
    for item in overrides:
        name, sep, value = item.partition("=")
        if not sep:
            raise click.BadParameter(f"--beta expects layer=value, got {item!r}")
        try:
            betas[name.strip()] = float(value)
        except ValueError:
            raise click.BadParameter(f"--beta value {value!r} is not a number") from None
    return betas


def finetune(model, old_train, config: TrainConfig, epochs: int):
    if epochs <= 0:
        return
    cfg = replace(config, epochs=epochs)
    train(model, old_train, cfg, on_epoch=lambda e, r: log.info("finetune epoch %d loss %.4f", e, r.losses[-1]))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


@click.group(cls=_Group)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
@click.version_option(package_name="artifact")
def cli(verbose):
    """Dictionary/coefficient decomposition of trained networks and few-shot adaptation."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


@cli.command("train")
@click.option("--arch", default="lenet", show_default=True, help="Built-in name or JSON descriptor file.")
@click.option("--data", "data_spec", required=True, help="MNIST dir, image-folder dir or synthetic:<seed>:<classes>:<n>.")
@click.option("--hold-out", "hold_out", default="", help="Comma-separated class ids left out for few-shot.")
@click.option("--config", "config_ref", default=None, help="Training config JSON (default: bundled 'train').")
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--max-train", type=int, default=None, help="Class-balanced cap on training images.")
@click.option("--metrics", type=click.Path(dir_okay=False), default=None, help="Per-epoch CSV (default: <out>.metrics.csv).")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def train_cmd(arch, data_spec, hold_out, config_ref, seed, max_train, metrics, out):
    """Primary training on the old classes."""
    config = load_config(config_ref, "train")
    if seed is not None:
        config = replace(config, seed=seed)
    meta = {
        "data": check_data_path(data_spec),
        "held_out": parse_ints(hold_out),
        "max_train": max_train,
        "seed": config.seed,
        "arch": arch,
        "train_config": config.to_dict(),
    }
    old_train, old_test, _ = load_splits(meta)
    model = architectures.build(arch, len(old_train.class_ids), seed=config.seed, class_labels=old_train.label_names)
    model.metadata = meta
    metrics = metrics or str(out) + ".metrics.csv"
    rows = []
    done = 0

    def on_epoch(epoch, report):
        nonlocal done
        losses = report.losses[done:]
        done = len(report.losses)
        row = {
            "epoch": epoch,
            "iterations": report.iterations,
            "loss": fmt(sum(losses) / len(losses)),
            "train_acc": fmt(report.accuracies[-1]),
            "test_acc": fmt(evaluate(model, old_test).top1),
        }
        rows.append(row)
        click.echo(f"epoch {epoch}: loss {row['loss']} train_acc {row['train_acc']} test_acc {row['test_acc']}")

    train(model, old_train, config, on_epoch=on_epoch)
    write_rows(metrics, METRICS_COLUMNS, rows)
    checkpoint.save_checkpoint(model, out)
    click.echo(f"wrote {out} ({model.param_count()} parameters, classes {model.class_labels})")


@cli.command("decompose")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--beta-conv", type=float, default=None, help="Threshold for every conv layer.")
@click.option("--beta-fc", type=float, default=None, help="Threshold for every fc layer.")
@click.option("--beta", "overrides", multiple=True, help="Per-layer override, e.g. --beta fc2=0.2.")
@click.option("--policy", type=click.Choice(["exact", "cheap"]), default="exact", show_default=True)
@click.option("--finetune-epochs", type=int, default=0, show_default=True)
@click.option("--config", "config_ref", default=None, help="Fine-tuning config JSON (default: bundled 'finetune').")
@click.option("--data", "data_spec", default=None, help="Overrides the data source stored in the checkpoint.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def decompose_cmd(in_path, beta_conv, beta_fc, overrides, policy, finetune_epochs, config_ref, data_spec, out):
    """Replace every fc/conv layer by a dictionary and coefficient pair."""
    model = checkpoint.load_checkpoint(in_path)
    if model.is_decomposed():
        raise StructureError(f"{in_path} is already decomposed")
    betas = parse_betas(beta_conv, beta_fc, overrides)
    dec = transform_model(model, betas, SelectionPolicy.parse(policy))
    for layer in dec.layers:
        if hasattr(layer, "provenance"):
            pv = layer.provenance
            flag = " (rank exhausted)" if pv.rank_exhausted else ""
            click.echo(
                f"{layer.name}: l={layer.rank} of {layer.dictionary.shape[0]}, "
                f"error {pv.achieved_rel_error:.4f} <= beta {pv.beta}{flag}"
            )
    click.echo(cost(dec).table())
    meta = dict(model.metadata)
    meta["decomposition"] = {"betas": betas, "policy": policy, "finetune_epochs": finetune_epochs}
    dec.metadata = meta
    if finetune_epochs > 0 or data_spec:
        old_train, old_test, _ = load_splits(meta, data_spec)
        before = evaluate(model, old_test).top1
        after_dec = evaluate(dec, old_test).top1
        config = load_config(config_ref, "finetune")
        finetune(dec, old_train, config, finetune_epochs)
        after = evaluate(dec, old_test).top1
        meta["decomposition"]["finetune_config"] = config.to_dict()
        click.echo(f"old-class test accuracy: dense {before:.4f}, decomposed {after_dec:.4f}, fine-tuned {after:.4f}")
    checkpoint.save_checkpoint(dec, out)
    click.echo(f"wrote {out}")


def _episode_rows(reports, mode, ways, shots):
    for e, r in enumerate(reports):
        yield {
            "row": e, "mode": mode, "ways": ways, "shots": shots,
            "classes": " ".join(str(c) for c in r.classes), "iterations": r.iterations,
            "trainable": r.trainable, "new_acc": fmt(r.new_acc), "old_acc": fmt(r.old_acc),
        }
    agg = fewshot.aggregate(reports)
    yield {
        "row": "mean", "mode": mode, "ways": ways, "shots": shots, "classes": "",
        "iterations": reports[0].iterations, "trainable": reports[0].trainable,
        "new_acc": fmt(agg.new_mean), "new_ci95": fmt(agg.new_ci95),
        "old_acc": fmt(agg.old_mean), "old_ci95": fmt(agg.old_ci95),
    }


@cli.command("fewshot")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--ways", type=int, default=1, show_default=True)
@click.option("--shots", type=int, default=5, show_default=True)
@click.option("--mode", type=click.Choice(["standard", "ultralight", "conventional"]), default="standard", show_default=True)
@click.option("--old-exemplars", type=int, default=5, show_default=True, help="Replay samples per old class.")
@click.option("--episodes", type=int, default=20, show_default=True)
@click.option("--iterations", type=int, default=None, help="Overrides the config's max_iterations.")
@click.option("--eval-every", type=int, default=10, show_default=True)
@click.option("--config", "config_ref", default=None, help="Few-shot config JSON (default: bundled 'fewshot').")
@click.option("--seed", type=int, default=0, show_default=True, help="Episode e samples with seed+e.")
@click.option("--data", "data_spec", default=None, help="Overrides the data source stored in the checkpoint.")
@click.option("--curves", type=click.Path(dir_okay=False), default=None, help="Per-episode curves CSV (default: <out>.curves.csv).")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def fewshot_cmd(in_path, ways, shots, mode, old_exemplars, episodes, iterations, eval_every, config_ref, seed, data_spec, curves, out):
    """X-way Y-shot class-incremental episodes on the held-out classes."""
    model = checkpoint.load_checkpoint(in_path)
    mode = fewshot.parse_mode(mode)
    if mode != fewshot.CONVENTIONAL and not model.is_decomposed():
        raise StructureError(f"{in_path} has no dictionaries; run decompose first")
    if episodes < 1:
        raise click.BadParameter("--episodes must be >= 1")
    config = load_config(config_ref, "fewshot")
    if iterations is not None:
        config = replace(config, max_iterations=iterations)
    old_train, old_test, pool = load_splits(model.metadata, data_spec)
    if len(pool) == 0:
        raise DataError("the checkpoint's data split has no held-out classes")
    spec = fewshot.EpisodeSpec(ways, shots, old_exemplars_per_class=old_exemplars, seed=seed)

    def on_episode(e, rep):
        click.echo(f"episode {e}: classes {rep.classes} new {rep.new_acc:.4f} old {rep.old_acc:.4f}")

    probe = fewshot.extend_output_layer(model, ways, seed=seed)
    counts = fewshot.trainable_count(probe, mode, ways)
    per_layer = ", ".join(f"{k}={v}" for k, v in counts.items() if k != "total")
    click.echo(f"trainable parameters ({mode}): {counts['total']} [{per_layer}]")
    reports = fewshot.run_episodes(model, pool, spec, mode, config, episodes, old_train, old_test, eval_every, on_episode)
    rows = list(_episode_rows(reports, mode, ways, shots))
    write_rows(out, FEWSHOT_COLUMNS, rows)
    curve_rows = [
        {"episode": e, "iteration": p["iteration"], "new_acc": fmt(p["new_acc"]), "old_acc": fmt(p.get("old_acc"))}
        for e, r in enumerate(reports)
        for p in r.curve
    ]
    write_rows(curves or str(out) + ".curves.csv", CURVE_COLUMNS, curve_rows)
    last = rows[-1]
    click.echo(f"mean over {episodes} episodes: new {last['new_acc']} +/- {last['new_ci95']}, old {last['old_acc']} +/- {last['old_ci95']}")


def parse_sweep(text: str) -> list[float]:
    name, sep, values = text.partition("=")
    if not sep or name.strip() != "beta":
        raise click.BadParameter(f"--sweep expects beta=v1,v2,..., got {text!r}")
    try:
        return [float(v) for v in values.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"bad beta list {values!r}") from None


@cli.command("report")
@click.option("--sweep", "sweep", required=True, help="beta=0.1,0.3,...")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--policy", type=click.Choice(["exact", "cheap"]), default="exact", show_default=True)
@click.option("--finetune-epochs", type=int, default=0, show_default=True)
@click.option("--finetune-config", default=None, help="Default: bundled 'finetune'.")
@click.option("--episodes", type=int, default=0, show_default=True, help="Few-shot episodes per point (0 skips).")
@click.option("--ways", type=int, default=1, show_default=True)
@click.option("--shots", type=int, default=5, show_default=True)
@click.option("--mode", type=click.Choice(["standard", "ultralight"]), default="standard", show_default=True)
@click.option("--old-exemplars", type=int, default=5, show_default=True)
@click.option("--fewshot-config", default=None, help="Default: bundled 'fewshot'.")
@click.option("--data", "data_spec", default=None)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def report_cmd(sweep, in_path, policy, finetune_epochs, finetune_config, episodes, ways, shots, mode, old_exemplars, fewshot_config, data_spec, out):
    """Cost and accuracy across a sweep of uniform thresholds."""
    betas = parse_sweep(sweep)
    model = checkpoint.load_checkpoint(in_path)
    if model.is_decomposed():
        raise StructureError(f"{in_path} is already decomposed; the sweep needs the dense model")
    need_data = finetune_epochs > 0 or episodes > 0 or data_spec is not None or model.metadata.get("data")
    splits = load_splits(model.metadata, data_spec) if need_data else None
    ft_cfg = load_config(finetune_config, "finetune")
    fs_cfg = load_config(fewshot_config, "fewshot")
    dense_acc = evaluate(model, splits[1]).top1 if splits else None
    failures = []
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, SWEEP_COLUMNS)
        writer.writeheader()
        fh.flush()
        for beta in betas:
            row = {"schema_version": SCHEMA_VERSION, "beta": beta, "old_acc_dense": fmt(dense_acc)}
            try:
                row.update(_sweep_point(model, beta, policy, splits, finetune_epochs, ft_cfg, episodes, ways, shots, mode, old_exemplars, fs_cfg))
                row["status"] = "ok"
            except Exception as exc:  # keep the rest of the sweep
                failures.append(exc)
                row["status"] = f"error: {type(exc).__name__}: {exc}"
            writer.writerow(row)
            fh.flush()
            click.echo(
                f"beta {beta}: params x{row.get('params_ratio', '?')} macs x{row.get('macs_ratio', '?')} "
                f"old {row.get('old_acc', '')} new {row.get('new_acc', '')} [{row['status']}]"
            )
    if failures:
        raise failures[0]


def _sweep_point(model, beta, policy, splits, ft_epochs, ft_cfg, episodes, ways, shots, mode, old_exemplars, fs_cfg):
    dec = transform_model(model, {"conv": beta, "fc": beta}, SelectionPolicy.parse(policy))
    rep = cost(dec)
    row = {
        "params_ratio": f"{rep.params_ratio:.6f}",
        "macs_ratio": f"{rep.macs_ratio:.6f}",
        "macs_ratio_tiny_only": f"{rep.macs_ratio_tiny_only:.6f}",
        "params_dense": rep.totals["params_dense"],
        "params_decomposed": rep.totals["params_decomposed"],
        "macs_dense": rep.totals["macs_dense"],
        "macs_decomposed": rep.totals["macs_decomposed"],
        "ranks": " ".join(f"{c.name}:{c.rank}" for c in rep.layers if c.rank is not None),
    }
    if splits is None:
        return row
    old_train, old_test, pool = splits
    row["old_acc_before_finetune"] = fmt(evaluate(dec, old_test).top1)
    finetune(dec, old_train, ft_cfg, ft_epochs)
    row["old_acc"] = fmt(evaluate(dec, old_test).top1)
    if episodes > 0:
        spec = fewshot.EpisodeSpec(ways, shots, old_exemplars_per_class=old_exemplars)
        reports = fewshot.run_episodes(dec, pool, spec, mode, fs_cfg, episodes, old_train, old_test, eval_every=10**9)
        agg = fewshot.aggregate(reports)
        row["new_acc"] = fmt(agg.new_mean)
        row["fewshot_old_acc"] = fmt(agg.old_mean)
    return row


def main(argv=None):
    return cli.main(args=argv, prog_name="dictshot")


if __name__ == "__main__":
    sys.exit(main())
