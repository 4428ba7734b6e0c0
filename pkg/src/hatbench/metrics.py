"""TP/FP matching, precision/recall sweeps, and average precision.

Matching follows the standard detection-benchmark protocol: predictions are
visited in descending score order (ties broken by box coordinates), each may
claim the unmatched same-class ground-truth box of highest IoU when that IoU
is >= the cut (0.5 by default, >= counts as hit). Extra predictions on an
already-claimed box are false positives; unclaimed ground truth are false
negatives.

A sweep re-runs the strategy at every grid threshold, micro-aggregates
TP/FP/FN over all images, and emits one precision/recall point per threshold
and class. Average precision is the area under the recall-sorted polyline:
trapezoids between observed points plus a leading rectangle from recall 0 to
the lowest observed recall at that point's precision. The convention is
recorded in every report so numbers stay comparable across runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .backends import BackendError, DetectorBackend
from .dataset import AnnotatedImage, ClassLabel, DatasetManifest, ObjectInstance
from .geometry import iou
from .pipelines import (
    MANIFEST_MODE_FOR_STRATEGY,
    PipelineConfig,
    Prediction,
    Strategy,
    run_over_images,
)

AP_CONVENTION = "trapezoid over observed points, leading rectangle to recall 0, no interpolation"

DEFAULT_GRID = tuple(round(0.05 * i, 2) for i in range(1, 11))  # 0.05 .. 0.50

# Classes each strategy is scored on. Direct and nested score helmet boxes
# (including ground helmets); the cascade scores worn helmets via the
# head-with-helmet class and bare heads via head.
EVALUATED_CLASSES: dict[Strategy, tuple[ClassLabel, ...]] = {
    Strategy.DIRECT: (ClassLabel.HELMET,),
    Strategy.NESTED: (ClassLabel.PERSON, ClassLabel.HELMET),
    Strategy.CASCADED: (ClassLabel.PERSON, ClassLabel.HEAD, ClassLabel.HEAD_WITH_HELMET),
}

# Published reference AP values for the full 5,210-image benchmark (OWLv2).
# The integration convention behind them is unstated, so they are reference
# targets, not tolerances.
REFERENCE_AP: dict[str, float] = {
    "direct/helmet": 0.6493,
    "nested/helmet": 0.4672,
    "cascaded/head_with_helmet": 0.2699,
    "person": 0.6767,
    "head": 0.1024,
}


@dataclass(frozen=True)
class MatchedPrediction:
    prediction: Prediction
    gt_index: int | None  # index into the class's GT list, None for FP
    iou: float


@dataclass
class ClassMatch:
    matches: list[MatchedPrediction]
    tp: int
    fp: int
    fn: int


@dataclass
class MatchResult:
    """Per-class matching outcome for one image."""

    per_class: dict[ClassLabel, ClassMatch]

    def counts(self, label: ClassLabel) -> tuple[int, int, int]:
        cm = self.per_class.get(label)
        return (cm.tp, cm.fp, cm.fn) if cm else (0, 0, 0)


def _prediction_order(p: Prediction) -> tuple:
    return (-p.score, p.box.as_tuple())


def match_class(
    predictions: Sequence[Prediction],
    gt_boxes: Sequence[ObjectInstance],
    iou_cut: float = 0.5,
) -> ClassMatch:
    """Greedy score-ordered matching of one class's predictions to its GT."""
    gts = sorted(gt_boxes, key=lambda g: g.box.as_tuple())
    taken = [False] * len(gts)
    matches: list[MatchedPrediction] = []
    tp = 0
    for pred in sorted(predictions, key=_prediction_order):
        best_iou = 0.0
        best_idx: int | None = None
        for idx, gt in enumerate(gts):
            if taken[idx]:
                continue
            overlap = iou(pred.box, gt.box)
            if overlap > best_iou:
                best_iou = overlap
                best_idx = idx
        if best_idx is not None and best_iou >= iou_cut:
            taken[best_idx] = True
            tp += 1
            matches.append(MatchedPrediction(pred, best_idx, best_iou))
        else:
            matches.append(MatchedPrediction(pred, None, best_iou))
    fp = len(matches) - tp
    fn = len(gts) - tp
    return ClassMatch(matches=matches, tp=tp, fp=fp, fn=fn)


def match(
    predictions: Sequence[Prediction],
    gt: Sequence[ObjectInstance],
    iou_cut: float = 0.5,
) -> MatchResult:
    """Class-partitioned greedy matching for one image."""
    labels = {p.label for p in predictions} | {g.label for g in gt}
    per_class = {}
    for label in labels:
        per_class[label] = match_class(
            [p for p in predictions if p.label is label],
            [g for g in gt if g.label is label],
            iou_cut,
        )
    return MatchResult(per_class=per_class)


def ground_truth_view(
    images: AnnotatedImage | Iterable[AnnotatedImage],
    strategy: Strategy,
    label: ClassLabel,
) -> list[ObjectInstance]:
    """Ground truth a strategy is scored against for one class.

    person: every person. head: bare heads only. helmet (direct/nested): all
    helmet boxes, ground helmets included. head_with_helmet (cascaded): worn
    helmets. On mode-correct manifests these are plain label filters; the
    strategy argument guards against scoring a class the strategy never emits.
    """
    if label not in EVALUATED_CLASSES[strategy]:
        raise ValueError(f"{strategy.value} is not evaluated on class {label.value}")
    if isinstance(images, AnnotatedImage):
        images = [images]
    return [inst for img in images for inst in img.instances if inst.label is label]


# ---------------------------------------------------------------------------
# Threshold sweep


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float
    tp: int = 0
    fp: int = 0
    fn: int = 0


@dataclass
class EvalReport:
    strategy: Strategy
    manifest_mode: str
    backend: dict
    grid: tuple[float, ...]
    iou_cut: float
    curves: dict[ClassLabel, list[PRPoint]]
    ap: dict[ClassLabel, float]
    ap_convention: str = AP_CONVENTION
    incomplete: bool = False
    error: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "manifest_mode": self.manifest_mode,
            "backend": self.backend,
            "grid": list(self.grid),
            "iou_cut": self.iou_cut,
            "ap_convention": self.ap_convention,
            "incomplete": self.incomplete,
            "error": self.error,
            "classes": {
                label.value: {
                    "ap": self.ap.get(label),
                    "points": [
                        {
                            "threshold": pt.threshold,
                            "precision": pt.precision,
                            "recall": pt.recall,
                            "tp": pt.tp,
                            "fp": pt.fp,
                            "fn": pt.fn,
                        }
                        for pt in points
                    ],
                }
                for label, points in self.curves.items()
            },
            **({"extra": self.extra} if self.extra else {}),
        }


def precision_recall(tp: int, fp: int, fn: int) -> tuple[float, float]:
    """Precision is 1 when nothing was predicted; recall is 1 when there is no GT."""
    precision = tp / (tp + fp) if (tp + fp) else 1.0
    recall = tp / (tp + fn) if (tp + fn) else 1.0
    return precision, recall


def sweep(
    manifest: DatasetManifest,
    backend: DetectorBackend,
    config: PipelineConfig,
    grid: Sequence[float] = DEFAULT_GRID,
    iou_cut: float = 0.5,
    workers: int = 1,
) -> EvalReport:
    """Run the strategy at every grid threshold and build the PR curves.

    The grid must be strictly increasing within [0,1]. On a backend failure
    the sweep stops, keeps the completed points, and marks the report
    incomplete (the error text is preserved).
    """
    grid = tuple(grid)
    if not grid:
        raise ValueError("empty threshold grid")
    if any(not 0.0 <= t <= 1.0 for t in grid) or any(
        b <= a for a, b in zip(grid, grid[1:])
    ):
        raise ValueError(f"grid must be strictly increasing within [0,1]: {grid}")
    expected_mode = MANIFEST_MODE_FOR_STRATEGY[config.strategy]
    if manifest.mode is not expected_mode:
        raise ValueError(
            f"strategy {config.strategy.value} is defined over {expected_mode.value} "
            f"manifests, got {manifest.mode.value}"
        )
    if not manifest.images:
        raise ValueError("no images in manifest")

    labels = EVALUATED_CLASSES[config.strategy]
    gt_per_image = {
        img.image_id: {label: ground_truth_view(img, config.strategy, label) for label in labels}
        for img in manifest.images
    }

    curves: dict[ClassLabel, list[PRPoint]] = {label: [] for label in labels}
    incomplete = False
    error: str | None = None
    for threshold in grid:
        stage_config = config.with_threshold(threshold)
        try:
            results = run_over_images(manifest.images, backend, stage_config, workers=workers)
        except BackendError as exc:
            incomplete = True
            error = f"backend failed at threshold {threshold}: {exc}"
            break
        totals = {label: [0, 0, 0] for label in labels}
        for result in results:
            gt_views = gt_per_image[result.image_id]
            for label in labels:
                cm = match_class(
                    [p for p in result.predictions if p.label is label],
                    gt_views[label],
                    iou_cut,
                )
                totals[label][0] += cm.tp
                totals[label][1] += cm.fp
                totals[label][2] += cm.fn
        for label in labels:
            tp, fp, fn = totals[label]
            precision, recall = precision_recall(tp, fp, fn)
            curves[label].append(
                PRPoint(threshold=threshold, precision=precision, recall=recall, tp=tp, fp=fp, fn=fn)
            )

    ap = {
        label: average_precision(points) if points else 0.0
        for label, points in curves.items()
    }
    return EvalReport(
        strategy=config.strategy,
        manifest_mode=manifest.mode.value,
        backend=backend.describe(),
        grid=grid,
        iou_cut=iou_cut,
        curves=curves,
        ap=ap,
        incomplete=incomplete,
        error=error,
    )


def average_precision(points: Sequence[PRPoint]) -> float:
    """Area under the recall-sorted precision/recall polyline.

    Trapezoids between observed points plus the rectangle from recall 0 to the
    lowest observed recall at that point's precision. An empty prediction set
    at every threshold therefore scores 0 (single point at recall 0).
    """
    if not points:
        raise ValueError("average_precision needs at least one PR point")
    ordered = sorted(points, key=lambda p: (p.recall, p.precision))
    area = ordered[0].recall * ordered[0].precision
    for a, b in zip(ordered, ordered[1:]):
        area += (b.recall - a.recall) * (a.precision + b.precision) / 2.0
    return area


# ---------------------------------------------------------------------------
# Report serialization


def reports_to_json(reports: Sequence[EvalReport], run_config: dict | None = None) -> str:
    """Canonical (byte-stable) JSON for a set of strategy reports."""
    payload = {
        "schema_version": 1,
        "kind": "eval_report",
        "reports": [r.to_dict() for r in reports],
        "reference_ap": REFERENCE_AP,
    }
    if run_config is not None:
        payload["run_config"] = run_config
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def pr_curves_csv(reports: Sequence[EvalReport]) -> str:
    """PR points as CSV for external plotting."""
    lines = ["class,strategy,threshold,precision,recall"]
    for report in reports:
        for label, points in report.curves.items():
            for pt in points:
                lines.append(
                    f"{label.value},{report.strategy.value},{pt.threshold:g},"
                    f"{pt.precision:.6f},{pt.recall:.6f}"
                )
    return "\n".join(lines) + "\n"


def ap_table_markdown(reports: Sequence[EvalReport]) -> str:
    """Markdown AP comparison shaped like the published hardhat-AP table."""
    hardhat_class = {
        Strategy.DIRECT: ClassLabel.HELMET,
        Strategy.NESTED: ClassLabel.HELMET,
        Strategy.CASCADED: ClassLabel.HEAD_WITH_HELMET,
    }
    lines = [
        "| Detection method | Hardhat AP (area under curve) | Reference AP |",
        "| --- | --- | --- |",
    ]
    for report in reports:
        label = hardhat_class[report.strategy]
        observed = report.ap.get(label)
        ref = REFERENCE_AP.get(f"{report.strategy.value}/{label.value}")
        observed_txt = f"{observed:.4f}" if observed is not None else "n/a"
        flag = " (incomplete)" if report.incomplete else ""
        lines.append(
            f"| {report.strategy.value} | {observed_txt}{flag} | {ref if ref is not None else 'n/a'} |"
        )
    lines.append("")
    lines.append(f"AP convention: {AP_CONVENTION}.")
    lines.append(
        "Reference values come from the published 5,210-image OWLv2 benchmark; its "
        "integration convention and checkpoint are unstated, so treat them as targets, "
        "not tolerances."
    )
    extra_refs = []
    for report in reports:
        for label in (ClassLabel.PERSON, ClassLabel.HEAD):
            if label in report.ap and label.value in REFERENCE_AP:
                extra_refs.append(
                    f"{report.strategy.value}/{label.value}: observed {report.ap[label]:.4f}, "
                    f"reference {REFERENCE_AP[label.value]}"
                )
    if extra_refs:
        lines.append("")
        lines.append("Auxiliary classes: " + "; ".join(extra_refs))
    return "\n".join(lines) + "\n"
