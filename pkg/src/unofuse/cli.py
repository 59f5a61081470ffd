"""The `uno` command line: gen-data, train, train-temp, calibrate, fuse, evaluate, report.

Every verb accepts --seed, --config FILE (a JSON object whose keys fill in
any flag not given on the command line), and --out DIR. Exit codes: 0 on
success, 2 on validation/usage errors, 3 on numerical failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .bench import (
    DEFAULT_METHODS,
    DEFAULT_METRICS,
    ExperimentConfig,
    TrainedPipeline,
    emit_report,
    evaluate,
    fit_deviation_stats,
    fit_scalar_temperatures,
    load_report,
    run_experiment,
)
from .calibration import deviation_ratio, load_stats, multimodal_min, save_stats
from .exceptions import NumericalError, ValidationError
from .experts import SegmentationExpert
from .fields import argmax_labels
from .fusion import BASELINE_METHODS, FusionMethod, fuse_baseline, fuse_uno
from .io import write_field, write_label_ppm, write_pgm
from .scenegen import build_dataset, load_dataset, load_scene, modality_view, save_dataset
from .tempnet import SpatialTemperature
from .uncertainty import Metric


def _common(f):
    f = click.option("--seed", type=int, default=None, help="Master seed.")(f)
    f = click.option(
        "--config", "config_path", type=click.Path(exists=True, dir_okay=False),
        default=None, help="JSON file supplying defaults for any flag.",
    )(f)
    f = click.option(
        "--out", "out_dir", type=click.Path(file_okay=False), default=None,
        help="Output directory.",
    )(f)
    return f


def _load_config(path) -> dict:
    if path is None:
        return {}
    obj = json.loads(Path(path).read_text())
    if not isinstance(obj, dict):
        raise ValidationError("--config must contain a JSON object")
    return obj


def _pick(explicit, config: dict, key: str, default):
    if explicit is not None:
        return explicit
    return config.get(key, default)


def _require_out(out_dir, config: dict) -> Path:
    out = _pick(out_dir, config, "out", None)
    if out is None:
        raise ValidationError("--out DIR is required for this command")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _parse_mapping(pairs, what: str) -> dict[str, str]:
    mapping = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValidationError(f"{what} must look like name=path, got {pair!r}")
        key, value = pair.split("=", 1)
        mapping[key] = value
    return mapping


def _split_list(value, config: dict, key: str, default):
    raw = _pick(value, config, key, None)
    if raw is None:
        return list(default)
    if isinstance(raw, str):
        return [part.strip() for part in raw.split(",") if part.strip()]
    return list(raw)


@click.group()
@click.version_option()
def cli():
    """Uncertainty-aware noisy-or fusion benchmark."""


@cli.command("gen-data")
@click.option("--train", "train_size", type=int, default=None, help="Training scenes.")
@click.option("--val", "val_size", type=int, default=None, help="Validation scenes.")
@click.option("--test", "test_size", type=int, default=None, help="Test scenes.")
@_common
def gen_data(train_size, val_size, test_size, seed, config_path, out_dir):
    """Generate the synthetic two-modality dataset into --out."""
    config = _load_config(config_path)
    out = _require_out(out_dir, config)
    splits = build_dataset(
        train_size=_pick(train_size, config, "train", 600),
        val_size=_pick(val_size, config, "val", 60),
        test_size=_pick(test_size, config, "test", 60),
        seed=_pick(seed, config, "seed", 0),
    )
    save_dataset(splits, out)
    click.echo(
        f"wrote dataset to {out} "
        f"(train={len(splits.train)}, val={len(splits.val)}, test={len(splits.test)})"
    )


@cli.command("train")
@click.option("--modality", type=click.Choice(["a", "b", "ab"]), required=True)
@click.option("--steps", type=int, default=None, help="Optimizer steps.")
@click.option("--lr", "learning_rate", type=float, default=None)
@click.option("--dropout", "dropout_rate", type=float, default=None)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False),
              default=None, help="Dataset directory from gen-data.")
@_common
def train(modality, steps, learning_rate, dropout_rate, data_dir, seed, config_path, out_dir):
    """Train one segmentation expert; writes <out>/expert_<modality>.ckpt."""
    config = _load_config(config_path)
    out = _require_out(out_dir, config)
    data = _pick(data_dir, config, "data", None)
    if data is None:
        raise ValidationError("--data DIR is required")
    splits = load_dataset(data)
    expert = SegmentationExpert(
        modality=modality,
        num_classes=splits.train[0].labels.num_classes,
        dropout_rate=_pick(dropout_rate, config, "dropout", 0.25),
        steps=_pick(steps, config, "steps", 1500),
        learning_rate=_pick(learning_rate, config, "lr", 1e-3),
        seed=_pick(seed, config, "seed", 0),
    )
    expert.fit(
        [modality_view(s, modality) for s in splits.train],
        [s.labels for s in splits.train],
        [modality_view(s, modality) for s in splits.val],
        [s.labels for s in splits.val],
    )
    path = out / f"expert_{modality}.ckpt"
    expert.save(path)
    click.echo(f"wrote {path} (best val loss {expert.best_val_loss_:.4f})")


@cli.command("train-temp")
@click.option("--modality", type=click.Choice(["a", "b"]), required=True)
@click.option("--steps", type=int, default=None)
@click.option("--lr", "learning_rate", type=float, default=None)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--expert", "expert_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Frozen expert checkpoint (default <out>/expert_<m>.ckpt).")
@_common
def train_temp(modality, steps, learning_rate, data_dir, expert_path, seed, config_path,
               out_dir):
    """Train the spatial temperature network against a frozen expert."""
    config = _load_config(config_path)
    out = _require_out(out_dir, config)
    data = _pick(data_dir, config, "data", None)
    if data is None:
        raise ValidationError("--data DIR is required")
    expert_file = _pick(expert_path, config, "expert", out / f"expert_{modality}.ckpt")
    if not Path(expert_file).exists():
        raise ValidationError(f"expert checkpoint not found: {expert_file}")
    splits = load_dataset(data)
    expert = SegmentationExpert.load(expert_file)
    tn = SpatialTemperature(
        modality=modality,
        steps=_pick(steps, config, "steps", 4000),
        learning_rate=_pick(learning_rate, config, "lr", 1e-3),
        seed=_pick(seed, config, "seed", 0),
    )
    tn.fit(
        [modality_view(s, modality) for s in splits.train],
        [s.labels for s in splits.train],
        expert=expert,
        X_val=[modality_view(s, modality) for s in splits.val],
        y_val=[s.labels for s in splits.val],
    )
    path = out / f"tempnet_{modality}.ckpt"
    tn.save(path)
    click.echo(
        f"wrote {path} (val NLL {tn.best_val_nll_:.4f}, identity {tn.identity_val_nll_:.4f})"
    )


def _load_experts(pairs, config: dict) -> dict[str, SegmentationExpert]:
    mapping = pairs or config.get("experts", {})
    if isinstance(mapping, (list, tuple)):
        mapping = _parse_mapping(mapping, "--expert")
    if not mapping:
        raise ValidationError("at least one --expert m=path is required")
    return {m: SegmentationExpert.load(p) for m, p in mapping.items()}


def _load_tempnets(pairs, config: dict) -> dict[str, SpatialTemperature]:
    mapping = pairs or config.get("tempnets", {})
    if isinstance(mapping, (list, tuple)):
        mapping = _parse_mapping(mapping, "--tempnet")
    return {m: SpatialTemperature.load(p) for m, p in mapping.items()}


@cli.command("calibrate")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--expert", "expert_pairs", multiple=True,
              help="Expert checkpoint as modality=path (repeatable).")
@click.option("--tempnet", "tempnet_pairs", multiple=True,
              help="Temperature-network checkpoint as modality=path (repeatable).")
@click.option("--metrics", default=None,
              help="Comma list: temperature,entropy,predictive_entropy,mutual_information.")
@click.option("--mcdo-passes", type=int, default=None)
@_common
def calibrate(data_dir, expert_pairs, tempnet_pairs, metrics, mcdo_passes, seed,
              config_path, out_dir):
    """Fit deviation statistics and scalar temperatures; writes stats.json + temperatures.json."""
    config = _load_config(config_path)
    out = _require_out(out_dir, config)
    data = _pick(data_dir, config, "data", None)
    if data is None:
        raise ValidationError("--data DIR is required")
    splits = load_dataset(data)
    experts = _load_experts(expert_pairs, config)
    tempnets = _load_tempnets(tempnet_pairs, config)
    metric_names = _split_list(metrics, config, "metrics", DEFAULT_METRICS)
    stats = fit_deviation_stats(
        splits, experts, tempnets,
        metrics=metric_names,
        mcdo_passes=_pick(mcdo_passes, config, "mcdo_passes", 10),
        seed=_pick(seed, config, "seed", 0),
    )
    save_stats(out / "stats.json", list(stats.values()))
    temps = fit_scalar_temperatures(splits, experts)
    (out / "temperatures.json").write_text(json.dumps(temps, indent=2, sort_keys=True) + "\n")
    click.echo(f"wrote {out / 'stats.json'} ({len(stats)} records) and temperatures.json")


@cli.command("fuse")
@click.option("--method", type=click.Choice([m.value for m in FusionMethod]), required=True)
@click.option("--scene", "scene_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="A stored scene directory.")
@click.option("--expert", "expert_pairs", multiple=True)
@click.option("--tempnet", "tempnet_pairs", multiple=True)
@click.option("--stats", "stats_path", type=click.Path(exists=True, dir_okay=False),
              default=None)
@click.option("--temperatures", "temps_path", type=click.Path(exists=True, dir_okay=False),
              default=None)
@click.option("--metrics", default=None)
@click.option("--mcdo-passes", type=int, default=None)
@_common
def fuse(method, scene_dir, expert_pairs, tempnet_pairs, stats_path, temps_path,
         metrics, mcdo_passes, seed, config_path, out_dir):
    """Fuse one stored scene; writes the fused map and a color label image."""
    from .bench import _expert_scores  # shared score computation

    config = _load_config(config_path)
    out = _require_out(out_dir, config)
    method = FusionMethod(method)
    scene = load_scene(scene_dir)
    experts = _load_experts(expert_pairs, config)
    tempnets = _load_tempnets(tempnet_pairs, config)
    modalities = [m for m in ("a", "b") if m in experts]
    if not modalities:
        raise ValidationError("fusion needs the modality experts a and/or b")
    logits = {
        m: experts[m].predict_logits(modality_view(scene, m)) for m in modalities
    }

    if method in BASELINE_METHODS:
        temps = None
        if method in (FusionMethod.SOFT_MULT_T, FusionMethod.NOISY_OR_T):
            temps_file = _pick(temps_path, config, "temperatures", None)
            if temps_file is None:
                raise ValidationError(f"{method} requires --temperatures")
            scalar = json.loads(Path(temps_file).read_text())
            temps = [float(scalar[m]) for m in modalities]
        fused = fuse_baseline([logits[m] for m in modalities], method, temperatures=temps)
    else:
        stats_file = _pick(stats_path, config, "stats", None)
        if stats_file is None:
            raise ValidationError(f"{method} requires --stats from `uno calibrate`")
        stats = {(s.expert_id, s.metric): s for s in load_stats(stats_file)}
        metric_names = [Metric(m) for m in _split_list(metrics, config, "metrics",
                                                       DEFAULT_METRICS)]
        passes = _pick(mcdo_passes, config, "mcdo_passes", 10)
        ratios = []
        for i, m in enumerate(modalities):
            scores, _ = _expert_scores(
                experts[m], tempnets.get(m), modality_view(scene, m),
                metric_names, passes, mcdo_seed=_pick(seed, config, "seed", 0) + i,
            )
            per_metric = []
            for name, value in scores.items():
                if (m, name) not in stats:
                    raise ValidationError(f"no fitted stats for expert {m!r} metric {name!r}")
                per_metric.append(deviation_ratio(value, stats[(m, name)]))
            ratios.append(min(per_metric))
        leak_logits = None
        leak_ratio = None
        if method is FusionMethod.UNO_PP:
            if "ab" not in experts:
                raise ValidationError("unopp requires --expert ab=<checkpoint>")
            leak_logits = experts["ab"].predict_logits(modality_view(scene, "ab"))
            leak_ratio = multimodal_min(ratios)
        fused = fuse_uno([logits[m] for m in modalities], ratios, method,
                         leak_logits=leak_logits, leak_ratio=leak_ratio)

    write_field(out / f"fused_{method.value}.unof", fused.data)
    write_label_ppm(out / f"fused_{method.value}.ppm", argmax_labels(fused))
    for m in modalities:
        if m in tempnets:
            write_pgm(
                out / f"temperature_{m}.pgm",
                tempnets[m].transform(modality_view(scene, m)).data,
                max_value=2.0,
            )
    click.echo(f"wrote fused_{method.value}.unof and fused_{method.value}.ppm to {out}")


@cli.command("evaluate")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--expert", "expert_pairs", multiple=True)
@click.option("--tempnet", "tempnet_pairs", multiple=True)
@click.option("--stats", "stats_path", type=click.Path(exists=True, dir_okay=False),
              default=None)
@click.option("--temperatures", "temps_path", type=click.Path(exists=True, dir_okay=False),
              default=None)
@click.option("--methods", default=None, help="Comma list of fusion methods.")
@click.option("--metrics", default=None, help="Comma list backing the uncertainty scaling.")
@click.option("--report-metrics", default=None, help="Comma list for the deviation table.")
@click.option("--conditions", default=None, help="Comma list of condition names.")
@click.option("--mcdo-passes", type=int, default=None)
@_common
def evaluate_cmd(data_dir, expert_pairs, tempnet_pairs, stats_path, temps_path, methods,
                 metrics, report_metrics, conditions, mcdo_passes, seed, config_path,
                 out_dir):
    """Run the full benchmark grid; writes results.json, results.csv, deviation.csv."""
    config = _load_config(config_path)
    out = _require_out(out_dir, config)
    data = _pick(data_dir, config, "data", None)
    stats_file = _pick(stats_path, config, "stats", None)
    if data is None or stats_file is None:
        raise ValidationError("--data and --stats are required")
    experts = config.get("experts", {}) if not expert_pairs else _parse_mapping(
        expert_pairs, "--expert")
    tempnets = config.get("tempnets", {}) if not tempnet_pairs else _parse_mapping(
        tempnet_pairs, "--tempnet")
    report_list = _split_list(report_metrics, config, "report_metrics", [])
    cond_list = _split_list(conditions, config, "conditions", [])
    cfg = ExperimentConfig(
        dataset=str(data),
        experts=experts,
        tempnets=tempnets,
        stats=str(stats_file),
        temperatures=_pick(temps_path, config, "temperatures", None),
        methods=_split_list(methods, config, "methods", DEFAULT_METHODS),
        metrics=_split_list(metrics, config, "metrics", DEFAULT_METRICS),
        report_metrics=report_list or None,
        conditions=cond_list or None,
        mcdo_passes=_pick(mcdo_passes, config, "mcdo_passes", 10),
        seed=_pick(seed, config, "seed", 0),
        out=str(out),
    )
    table = run_experiment(cfg)
    click.echo(_format_table(table))
    click.echo(f"wrote results to {out}")


@cli.command("report")
@click.option("--results", "results_path", type=click.Path(exists=True, dir_okay=False),
              required=True, help="results.json from evaluate.")
@_common
def report(results_path, seed, config_path, out_dir):
    """Re-emit CSV tables (and a text summary) from a stored results.json."""
    config = _load_config(config_path)
    out = _require_out(out_dir, config)
    table = load_report(results_path)
    emit_report(table, out)
    click.echo(_format_table(table))
    click.echo(f"wrote CSV tables to {out}")


def _format_table(table) -> str:
    width = max(len(m) for m in table.methods) + 2
    header = "method".ljust(width) + "  ".join(c.rjust(14) for c in table.conditions)
    lines = [header]
    for method in table.methods:
        cells = "  ".join(f"{table.miou[method][c]:14.4f}" for c in table.conditions)
        lines.append(method.ljust(width) + cells)
    return "\n".join(lines)


def main():
    try:
        cli.main(standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except click.Abort:
        sys.exit(1)
    except ValidationError as exc:
        click.echo(f"validation error: {exc}", err=True)
        sys.exit(2)
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(3)


if __name__ == "__main__":
    main()
