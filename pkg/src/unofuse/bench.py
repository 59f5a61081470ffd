"""Benchmark harness: mIoU scoring, pipeline training, and result tables.

The experiment grid mirrors a robustness study: rows are fusion methods,
columns are test conditions (two seen during training, ten not). For every
condition the harness corrupts the test scenes, scores each expert's
uncertainty against its training statistics, fuses the (possibly softened)
predictions, and accumulates a per-method confusion matrix. A second table
records the mean deviation ratio per (expert, metric, condition).

Everything is deterministic given the config seed: scenes, corruption
draws, and stochastic-pass seeds all derive from it, and results reduce in
a fixed order, so repeated runs emit byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import (
    DeviationStats,
    combine_min,
    deviation_ratio,
    fit_scalar_temperature,
    fit_stats,
    load_stats,
    multimodal_min,
    save_stats,
)
from .exceptions import ValidationError
from .experts import SegmentationExpert
from .fields import LabelMap, ProbMap, argmax_labels
from .fusion import BASELINE_METHODS, FusionMethod, fuse_baseline, fuse_uno
from .io import write_label_ppm, write_pgm
from .scenegen import (
    Condition,
    Corruption,
    DatasetSplits,
    Scene,
    corrupt_scene,
    modality_view,
)
from .seeding import derive_seed
from .tempnet import SpatialTemperature, temperature_score
from .uncertainty import (
    Metric,
    SAMPLED_METRICS,
    entropy,
    image_score,
    mutual_information,
    predictive_entropy,
)

FUSION_EXPERTS = ("a", "b")
LEAK_EXPERT = "ab"

DEFAULT_METHODS = [m.value for m in FusionMethod]
DEFAULT_METRICS = [Metric.TEMPERATURE.value, Metric.ENTROPY.value]
ALL_METRICS = [m.value for m in Metric]


@dataclass
class ConfusionMatrix:
    """Class-by-class pixel counts; rows are ground truth, columns predictions."""

    num_classes: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.num_classes, self.num_classes):
                raise ValidationError("confusion matrix shape mismatch")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate_confusion(pred: LabelMap, gt: LabelMap, cm: ConfusionMatrix) -> ConfusionMatrix:
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ValidationError("prediction and ground truth shapes differ")
    idx = gt.labels.reshape(-1).astype(np.int64) * cm.num_classes + pred.labels.reshape(-1)
    cm.counts += np.bincount(idx, minlength=cm.num_classes ** 2).reshape(
        cm.num_classes, cm.num_classes
    )
    return cm


def mean_iou(cm: ConfusionMatrix) -> float:
    """Mean over classes of TP / (TP + FP + FN).

    Classes absent from both ground truth and prediction are left out of the
    mean rather than scored as 0 or 1.
    """
    if cm.total == 0:
        raise ValidationError("empty confusion matrix")
    tp = np.diag(cm.counts).astype(np.float64)
    gt_total = cm.counts.sum(axis=1).astype(np.float64)
    pred_total = cm.counts.sum(axis=0).astype(np.float64)
    present = (gt_total + pred_total) > 0
    if not present.any():
        raise ValidationError("no classes present")
    denom = gt_total + pred_total - tp
    return float((tp[present] / denom[present]).mean())


@dataclass
class TrainedPipeline:
    """Everything the evaluation stage needs, fitted on one dataset."""

    experts: dict[str, SegmentationExpert]
    tempnets: dict[str, SpatialTemperature]
    stats: dict[tuple[str, str], DeviationStats]
    scalar_temps: dict[str, float]
    num_classes: int


def _metric_list(metrics) -> list[Metric]:
    return [Metric(m) for m in metrics]


def _expert_scores(expert: SegmentationExpert, tempnet: SpatialTemperature | None,
                   x: np.ndarray, metrics: list[Metric], mcdo_passes: int,
                   mcdo_seed: int):
    """Per-image uncertainty scores for one expert; also returns its logits."""
    logits = expert.predict_logits(x)
    scores: dict[str, float] = {}
    deterministic = ProbMap.from_logits(logits)
    for metric in metrics:
        if metric is Metric.ENTROPY:
            scores[metric.value] = image_score(entropy(deterministic))
        elif metric is Metric.TEMPERATURE:
            if tempnet is None:
                raise ValidationError("temperature metric needs a fitted temperature network")
            scores[metric.value] = temperature_score(tempnet.transform(x))
    sampled = [m for m in metrics if m in SAMPLED_METRICS]
    if sampled:
        samples = expert.mcdo_samples(x, passes=mcdo_passes, seed=mcdo_seed)
        if Metric.PREDICTIVE_ENTROPY in sampled:
            scores[Metric.PREDICTIVE_ENTROPY.value] = image_score(predictive_entropy(samples))
        if Metric.MUTUAL_INFORMATION in sampled:
            scores[Metric.MUTUAL_INFORMATION.value] = image_score(mutual_information(samples))
    return scores, logits


def train_pipeline(splits: DatasetSplits, *, steps: int = 1500, temp_steps: int = 4000,
                   learning_rate: float = 1e-3, dropout_rate: float = 0.25,
                   seed: int = 0, stat_metrics=None, mcdo_passes: int = 10,
                   eval_every: int = 100) -> TrainedPipeline:
    """Two-step fit: experts first, then temperature networks against frozen experts.

    Finishes by summarizing the training-set uncertainty scores per
    (expert, metric) and fitting the scalar temperature baselines on the
    validation split.
    """
    stat_metrics = _metric_list(stat_metrics or DEFAULT_METRICS)
    num_classes = splits.train[0].labels.num_classes
    train_labels = [s.labels for s in splits.train]
    val_labels = [s.labels for s in splits.val]

    experts: dict[str, SegmentationExpert] = {}
    for i, modality in enumerate(("a", "b", "ab")):
        expert = SegmentationExpert(
            modality=modality,
            num_classes=num_classes,
            dropout_rate=dropout_rate,
            steps=steps,
            learning_rate=learning_rate,
            eval_every=eval_every,
            seed=derive_seed(seed, 11, i),
        )
        expert.fit(
            [modality_view(s, modality) for s in splits.train], train_labels,
            [modality_view(s, modality) for s in splits.val], val_labels,
        )
        experts[modality] = expert

    tempnets: dict[str, SpatialTemperature] = {}
    for i, modality in enumerate(FUSION_EXPERTS):
        tn = SpatialTemperature(
            modality=modality,
            steps=temp_steps,
            learning_rate=learning_rate,
            seed=derive_seed(seed, 12, i),
        )
        tn.fit(
            [modality_view(s, modality) for s in splits.train], train_labels,
            expert=experts[modality],
            X_val=[modality_view(s, modality) for s in splits.val], y_val=val_labels,
        )
        tempnets[modality] = tn

    stats = fit_deviation_stats(
        splits, experts, tempnets, metrics=stat_metrics,
        mcdo_passes=mcdo_passes, seed=seed,
    )
    scalar_temps = fit_scalar_temperatures(splits, experts)

    return TrainedPipeline(
        experts=experts,
        tempnets=tempnets,
        stats=stats,
        scalar_temps=scalar_temps,
        num_classes=num_classes,
    )


def fit_deviation_stats(splits: DatasetSplits, experts, tempnets, *,
                        metrics=None, mcdo_passes: int = 10,
                        seed: int = 0) -> dict[tuple[str, str], DeviationStats]:
    """Summarize per-image training scores for each (modality expert, metric)."""
    stat_metrics = _metric_list(metrics or DEFAULT_METRICS)
    stats: dict[tuple[str, str], DeviationStats] = {}
    for i, modality in enumerate(FUSION_EXPERTS):
        per_metric: dict[str, list[float]] = {m.value: [] for m in stat_metrics}
        for j, scene in enumerate(splits.train):
            scores, _ = _expert_scores(
                experts[modality], tempnets.get(modality), modality_view(scene, modality),
                stat_metrics, mcdo_passes, mcdo_seed=derive_seed(seed, 21, i, j),
            )
            for name, value in scores.items():
                per_metric[name].append(value)
        for name, values in per_metric.items():
            stats[(modality, name)] = fit_stats(values, expert_id=modality, metric=name)
    return stats


def fit_scalar_temperatures(splits: DatasetSplits, experts) -> dict[str, float]:
    """Fit one scalar temperature per modality expert on the validation split."""
    val_labels = [s.labels for s in splits.val]
    scalar_temps: dict[str, float] = {}
    for modality in FUSION_EXPERTS:
        logits = [
            experts[modality].predict_logits(modality_view(s, modality))
            for s in splits.val
        ]
        scalar_temps[modality] = fit_scalar_temperature(logits, val_labels)
    return scalar_temps


@dataclass
class ResultTable:
    """mIoU per (method, condition) plus mean deviation ratios per (expert, metric)."""

    methods: list[str]
    conditions: list[str]
    miou: dict[str, dict[str, float]]
    deviation: dict[str, dict[str, dict[str, float]]]
    num_scenes: int
    seed: int

    def to_json_dict(self) -> dict:
        return {
            "methods": self.methods,
            "conditions": self.conditions,
            "miou": self.miou,
            "deviation": self.deviation,
            "num_scenes": self.num_scenes,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ResultTable":
        return cls(
            methods=list(obj["methods"]),
            conditions=list(obj["conditions"]),
            miou=obj["miou"],
            deviation=obj["deviation"],
            num_scenes=obj["num_scenes"],
            seed=obj["seed"],
        )

    def miou_csv(self) -> str:
        lines = ["method," + ",".join(self.conditions)]
        for method in self.methods:
            row = [f"{self.miou[method][c]:.6f}" for c in self.conditions]
            lines.append(method + "," + ",".join(row))
        return "\n".join(lines) + "\n"

    def deviation_csv(self) -> str:
        lines = ["expert,metric," + ",".join(self.conditions)]
        for expert_id in sorted(self.deviation):
            for metric in sorted(self.deviation[expert_id]):
                row = [
                    f"{self.deviation[expert_id][metric][c]:.6f}" for c in self.conditions
                ]
                lines.append(f"{expert_id},{metric}," + ",".join(row))
        return "\n".join(lines) + "\n"

    def unseen_average(self, method: str) -> float:
        unseen = [c for c in self.conditions if not c.startswith("in_")]
        return float(np.mean([self.miou[method][c] for c in unseen]))


def evaluate(splits: DatasetSplits, pipeline: TrainedPipeline, *,
             methods=None, metrics=None, report_metrics=None,
             conditions=None, seed: int = 0, mcdo_passes: int = 10) -> ResultTable:
    """Score every (method, condition) cell on the corrupted test split.

    `metrics` is the set whose min drives the uncertainty scaling;
    `report_metrics` (defaults to the same) is what lands in the deviation
    table. Each expert's ratio is the min over metrics, and the leak expert
    is scaled by the min across experts.
    """
    methods = [FusionMethod(m) for m in (methods or DEFAULT_METHODS)]
    fusion_metrics = _metric_list(metrics or DEFAULT_METRICS)
    report = _metric_list(report_metrics) if report_metrics else list(fusion_metrics)
    score_metrics = list(dict.fromkeys(fusion_metrics + report))
    for metric in score_metrics:
        for modality in FUSION_EXPERTS:
            if (modality, metric.value) not in pipeline.stats:
                raise ValidationError(
                    f"missing fitted stats for expert {modality!r}, metric {metric.value!r}"
                )
    wanted = {c.name: c for c in splits.conditions}
    if conditions is None:
        selected = list(splits.conditions)
    else:
        missing = [c for c in conditions if c not in wanted]
        if missing:
            raise ValidationError(f"unknown conditions: {missing}")
        selected = [wanted[c] for c in conditions]
    needs_leak = FusionMethod.UNO_PP in methods
    if needs_leak and LEAK_EXPERT not in pipeline.experts:
        raise ValidationError("unopp requires a trained multimodal leak expert")

    confusion = {
        m.value: {c.name: ConfusionMatrix(pipeline.num_classes) for c in selected}
        for m in methods
    }
    ratio_sums = {
        e: {m.value: {c.name: 0.0 for c in selected} for m in report}
        for e in FUSION_EXPERTS
    }

    for ci, condition in enumerate(selected):
        for si, scene in enumerate(splits.test):
            observed = _apply_condition(scene, condition, seed, ci, si)
            per_expert_logits = {}
            per_expert_ratio = {}
            for ei, modality in enumerate(FUSION_EXPERTS):
                x = modality_view(observed, modality)
                scores, logits = _expert_scores(
                    pipeline.experts[modality], pipeline.tempnets.get(modality), x,
                    score_metrics, mcdo_passes,
                    mcdo_seed=derive_seed(seed, 31, ci, si, ei),
                )
                per_expert_logits[modality] = logits
                ratios = {
                    name: deviation_ratio(value, pipeline.stats[(modality, name)])
                    for name, value in scores.items()
                }
                for metric in report:
                    ratio_sums[modality][metric.value][condition.name] += ratios[metric.value]
                per_expert_ratio[modality] = combine_min(
                    [ratios[m.value] for m in fusion_metrics]
                )

            expert_order = list(FUSION_EXPERTS)
            logit_list = [per_expert_logits[e] for e in expert_order]
            ratio_list = [per_expert_ratio[e] for e in expert_order]
            leak_logits = None
            if needs_leak:
                leak_logits = pipeline.experts[LEAK_EXPERT].predict_logits(
                    modality_view(observed, LEAK_EXPERT)
                )

            for method in methods:
                if method in BASELINE_METHODS:
                    temps = [pipeline.scalar_temps[e] for e in expert_order]
                    fused = fuse_baseline(logit_list, method, temperatures=temps)
                elif method is FusionMethod.UNO:
                    fused = fuse_uno(logit_list, ratio_list, FusionMethod.UNO)
                else:
                    fused = fuse_uno(
                        logit_list, ratio_list, FusionMethod.UNO_PP,
                        leak_logits=leak_logits,
                        leak_ratio=multimodal_min(ratio_list),
                    )
                accumulate_confusion(
                    argmax_labels(fused), observed.labels,
                    confusion[method.value][condition.name],
                )

    n = len(splits.test)
    miou = {
        m.value: {c.name: mean_iou(confusion[m.value][c.name]) for c in selected}
        for m in methods
    }
    deviation = {
        e: {
            metric.value: {
                c.name: ratio_sums[e][metric.value][c.name] / n for c in selected
            }
            for metric in report
        }
        for e in FUSION_EXPERTS
    }
    return ResultTable(
        methods=[m.value for m in methods],
        conditions=[c.name for c in selected],
        miou=miou,
        deviation=deviation,
        num_scenes=n,
        seed=seed,
    )


def _apply_condition(scene: Scene, condition: Condition, seed: int,
                     cond_idx: int, scene_idx: int) -> Scene:
    if condition.kind is None:
        return scene
    corruption = Corruption(
        condition.kind, condition.severity, condition.target,
        seed=derive_seed(seed, 41, cond_idx, scene_idx),
    )
    return corrupt_scene(scene, corruption)


def emit_report(table: ResultTable, out_dir) -> dict[str, Path]:
    """Write results.json plus the two CSV tables; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out / "results.json",
        "miou_csv": out / "results.csv",
        "deviation_csv": out / "deviation.csv",
    }
    paths["json"].write_text(
        json.dumps(table.to_json_dict(), indent=2, sort_keys=True) + "\n"
    )
    paths["miou_csv"].write_text(table.miou_csv())
    paths["deviation_csv"].write_text(table.deviation_csv())
    return paths


def load_report(path) -> ResultTable:
    return ResultTable.from_json_dict(json.loads(Path(path).read_text()))


def dump_example_maps(out_dir, splits: DatasetSplits, pipeline: TrainedPipeline,
                      *, methods=None, seed: int = 0) -> None:
    """Render the first test scene of each condition for visual inspection."""
    methods = [FusionMethod(m) for m in (methods or DEFAULT_METHODS)]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table_conditions = splits.conditions
    for ci, condition in enumerate(table_conditions):
        observed = _apply_condition(splits.test[0], condition, seed, ci, 0)
        write_label_ppm(out / f"{condition.name}_truth.ppm", observed.labels)
        for modality in FUSION_EXPERTS:
            x = modality_view(observed, modality)
            probs = pipeline.experts[modality].predict_proba(x)
            write_pgm(
                out / f"{condition.name}_{modality}_entropy.pgm",
                entropy(probs).data,
                max_value=float(np.log(pipeline.num_classes)),
            )
            tn = pipeline.tempnets.get(modality)
            if tn is not None:
                write_pgm(
                    out / f"{condition.name}_{modality}_temperature.pgm",
                    tn.transform(x).data,
                    max_value=2.0,
                )


@dataclass
class ExperimentConfig:
    """File-based experiment description consumed by `run_experiment`."""

    dataset: str
    experts: dict[str, str]
    tempnets: dict[str, str]
    stats: str
    temperatures: str | None = None
    methods: list[str] = field(default_factory=lambda: list(DEFAULT_METHODS))
    metrics: list[str] = field(default_factory=lambda: list(DEFAULT_METRICS))
    report_metrics: list[str] | None = None
    conditions: list[str] | None = None
    mcdo_passes: int = 10
    seed: int = 0
    out: str | None = None

    def __post_init__(self):
        paths = [self.dataset, self.stats, *self.experts.values(), *self.tempnets.values()]
        if self.temperatures:
            paths.append(self.temperatures)
        missing = [str(p) for p in paths if not Path(p).exists()]
        if missing:
            raise ValidationError(f"missing experiment inputs: {missing}")


def load_pipeline_artifacts(cfg: ExperimentConfig) -> TrainedPipeline:
    experts = {m: SegmentationExpert.load(p) for m, p in cfg.experts.items()}
    tempnets = {m: SpatialTemperature.load(p) for m, p in cfg.tempnets.items()}
    stats = {(s.expert_id, s.metric): s for s in load_stats(cfg.stats)}
    scalar_temps = {}
    if cfg.temperatures:
        scalar_temps = {
            k: float(v) for k, v in json.loads(Path(cfg.temperatures).read_text()).items()
        }
    num_classes = next(iter(experts.values())).num_classes
    return TrainedPipeline(
        experts=experts,
        tempnets=tempnets,
        stats=stats,
        scalar_temps=scalar_temps,
        num_classes=num_classes,
    )


def run_experiment(cfg: ExperimentConfig) -> ResultTable:
    """Load artifacts per the config, evaluate, and optionally emit the report."""
    from .scenegen import load_dataset

    splits = load_dataset(cfg.dataset)
    pipeline = load_pipeline_artifacts(cfg)
    table = evaluate(
        splits, pipeline,
        methods=cfg.methods, metrics=cfg.metrics, report_metrics=cfg.report_metrics,
        conditions=cfg.conditions, seed=cfg.seed, mcdo_passes=cfg.mcdo_passes,
    )
    if cfg.out:
        emit_report(table, cfg.out)
    return table


@dataclass
class PipelineConfig:
    """End-to-end run: generate data, train, calibrate, evaluate, report."""

    out_dir: str
    seed: int = 0
    train_size: int = 600
    val_size: int = 60
    test_size: int = 60
    steps: int = 1500
    temp_steps: int = 4000
    learning_rate: float = 1e-3
    metrics: list[str] = field(default_factory=lambda: list(DEFAULT_METRICS))
    report_metrics: list[str] | None = None
    methods: list[str] = field(default_factory=lambda: list(DEFAULT_METHODS))
    mcdo_passes: int = 10
    dump_maps: bool = False


def run_full_pipeline(cfg: PipelineConfig) -> ResultTable:
    from .scenegen import build_dataset, save_dataset

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = build_dataset(cfg.train_size, cfg.val_size, cfg.test_size, seed=cfg.seed)
    save_dataset(splits, out / "dataset")

    stat_metrics = list(dict.fromkeys(cfg.metrics + (cfg.report_metrics or [])))
    pipeline = train_pipeline(
        splits,
        steps=cfg.steps,
        temp_steps=cfg.temp_steps,
        learning_rate=cfg.learning_rate,
        seed=cfg.seed,
        stat_metrics=stat_metrics,
        mcdo_passes=cfg.mcdo_passes,
    )
    for modality, expert in pipeline.experts.items():
        expert.save(out / f"expert_{modality}.ckpt")
    for modality, tn in pipeline.tempnets.items():
        tn.save(out / f"tempnet_{modality}.ckpt")
    save_stats(out / "stats.json", list(pipeline.stats.values()))
    (out / "temperatures.json").write_text(
        json.dumps(pipeline.scalar_temps, indent=2, sort_keys=True) + "\n"
    )

    table = evaluate(
        splits, pipeline,
        methods=cfg.methods, metrics=cfg.metrics, report_metrics=cfg.report_metrics,
        seed=cfg.seed, mcdo_passes=cfg.mcdo_passes,
    )
    emit_report(table, out)
    if cfg.dump_maps:
        dump_example_maps(out / "maps", splits, pipeline, methods=cfg.methods, seed=cfg.seed)
    return table
