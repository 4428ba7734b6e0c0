"""Detection strategies: direct, nested (person->helmet), cascaded (person->head->helmet).

- direct: one whole-image query for the helmet prompt; no association is made.
- nested: whole-image person query, then a helmet query inside each person
  box; helmets are associated to their parent person.
- cascaded: person query, head query inside each person crop, then a helmet
  query inside each head crop taken from the original image. The helmet stage
  is a yes/no attribute of the head (no helmet box is emitted): a head with
  helmet evidence at or above the stage threshold becomes head_with_helmet,
  otherwise head.

All output boxes are mapped back to (and clamped inside) the original image
frame. Predictions carry a provenance trace of the stage boxes that produced
them.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable

from .backends import Detection, DetectionQuery, DetectorBackend
from .dataset import AnnotatedImage, ClassLabel, DatasetManifest, RemapMode
from .geometry import BBox, ZeroAreaAfterClamp, clamp, crop_to_original

log = logging.getLogger(__name__)


class Strategy(Enum):
    DIRECT = "direct"
    NESTED = "nested"
    CASCADED = "cascaded"


# Which manifest flavor a strategy is defined over.
MANIFEST_MODE_FOR_STRATEGY: dict[Strategy, RemapMode] = {
    Strategy.DIRECT: RemapMode.DIRECT_NESTED,
    Strategy.NESTED: RemapMode.DIRECT_NESTED,
    Strategy.CASCADED: RemapMode.CASCADED,
}


@dataclass(frozen=True)
class StageThresholds:
    """Per-stage confidence cutoffs; by default one global value for all stages."""

    person: float = 0.1
    head: float = 0.1
    helmet: float = 0.1

    @classmethod
    def uniform(cls, value: float) -> StageThresholds:
        return cls(person=value, head=value, helmet=value)


@dataclass(frozen=True)
class StagePrompts:
    person: str = "person"
    head: str = "head"
    helmet: str = "helmet"


@dataclass(frozen=True)
class PipelineConfig:
    strategy: Strategy
    stage_thresholds: StageThresholds = field(default_factory=StageThresholds)
    prompts: StagePrompts = field(default_factory=StagePrompts)
    crop_padding: float = 0.0  # fractional margin added around each crop

    def __post_init__(self):
        if not 0.0 <= self.crop_padding <= 0.5:
            raise ValueError(f"crop_padding must be in [0,0.5], got {self.crop_padding}")

    def with_threshold(self, value: float) -> PipelineConfig:
        """Same config with one global threshold at every stage (sweep semantics)."""
        return replace(self, stage_thresholds=StageThresholds.uniform(value))


@dataclass(frozen=True)
class StageTrace:
    """One provenance entry: the stage that produced a box and its score."""

    stage: str
    box: BBox
    score: float


@dataclass(frozen=True)
class Prediction:
    label: ClassLabel
    box: BBox  # original-image frame
    score: float
    provenance: tuple[StageTrace, ...]


@dataclass(frozen=True)
class AssociationRecord:
    """A person with its detected head (if any) and helmet-wearing attribute."""

    person_box: BBox
    head_box: BBox | None
    helmet_worn: bool
    helmet_evidence_score: float


@dataclass
class PipelineResult:
    image_id: str
    strategy: Strategy
    predictions: list[Prediction]
    associations: list[AssociationRecord]


def _crop_region(box: BBox, image: AnnotatedImage, padding: float) -> BBox | None:
    """Padded, image-clamped crop window for a detected box."""
    padded = box.expand(padding) if padding > 0 else box
    try:
        return clamp(padded, image.dims)
    except ZeroAreaAfterClamp:
        log.warning("skipping zero-area crop %s on %s", box.as_tuple(), image.image_id)
        return None


def _to_original(local: Detection, region: BBox, image: AnnotatedImage) -> BBox | None:
    try:
        return crop_to_original(region, local.box, image.dims)
    except ZeroAreaAfterClamp:
        log.warning(
            "dropping detection with no in-image area %s on %s",
            local.box.as_tuple(),
            image.image_id,
        )
        return None


def _clamped(detection: Detection, image: AnnotatedImage) -> BBox | None:
    try:
        return clamp(detection.box, image.dims)
    except ZeroAreaAfterClamp:
        log.warning("dropping out-of-image detection on %s", image.image_id)
        return None


def run_direct(
    image: AnnotatedImage, backend: DetectorBackend, config: PipelineConfig
) -> list[Prediction]:
    """Single whole-image helmet query; every hit is labeled helmet."""
    detections = backend.detect(
        DetectionQuery(
            image_id=image.image_id,
            prompt=config.prompts.helmet,
            threshold=config.stage_thresholds.helmet,
        )
    )
    predictions = []
    for det in detections:
        box = _clamped(det, image)
        if box is None:
            continue
        predictions.append(
            Prediction(
                label=ClassLabel.HELMET,
                box=box,
                score=det.score,
                provenance=(StageTrace("helmet", box, det.score),),
            )
        )
    return predictions


def _detect_persons(
    image: AnnotatedImage, backend: DetectorBackend, config: PipelineConfig
) -> list[Prediction]:
    detections = backend.detect(
        DetectionQuery(
            image_id=image.image_id,
            prompt=config.prompts.person,
            threshold=config.stage_thresholds.person,
        )
    )
    persons = []
    for det in detections:
        box = _clamped(det, image)
        if box is None:
            continue
        persons.append(
            Prediction(
                label=ClassLabel.PERSON,
                box=box,
                score=det.score,
                provenance=(StageTrace("person", box, det.score),),
            )
        )
    return persons


def run_nested(
    image: AnnotatedImage, backend: DetectorBackend, config: PipelineConfig
) -> tuple[list[Prediction], list[AssociationRecord]]:
    """Person query, then a helmet query inside each person box."""
    persons = _detect_persons(image, backend, config)
    predictions: list[Prediction] = list(persons)
    associations: list[AssociationRecord] = []

    for person in persons:
        region = _crop_region(person.box, image, config.crop_padding)
        if region is None:
            continue
        helmet_dets = backend.detect(
            DetectionQuery(
                image_id=image.image_id,
                prompt=config.prompts.helmet,
                threshold=config.stage_thresholds.helmet,
                region=region,
            )
        )
        best_score = 0.0
        found = False
        for det in helmet_dets:
            box = _to_original(det, region, image)
            if box is None:
                continue
            found = True
            best_score = max(best_score, det.score)
            predictions.append(
                Prediction(
                    label=ClassLabel.HELMET,
                    box=box,
                    score=det.score,
                    provenance=person.provenance + (StageTrace("helmet", box, det.score),),
                )
            )
        associations.append(
            AssociationRecord(
                person_box=person.box,
                head_box=None,
                helmet_worn=found,
                helmet_evidence_score=best_score,
            )
        )
    return predictions, associations


def run_cascaded(
    image: AnnotatedImage, backend: DetectorBackend, config: PipelineConfig
) -> tuple[list[Prediction], list[AssociationRecord]]:
    """Person -> head -> helmet-as-attribute.

    Head boxes are found inside person crops; each head's helmet query runs on
    a crop of the original image. Heads are labeled head_with_helmet when the
    helmet stage fires, else head. Every head found in a person's crop spawns
    its own association (a crop may contain more than one head).
    """
    persons = _detect_persons(image, backend, config)
    predictions: list[Prediction] = list(persons)
    associations: list[AssociationRecord] = []

    for person in persons:
        person_region = _crop_region(person.box, image, config.crop_padding)
        if person_region is None:
            continue
        head_dets = backend.detect(
            DetectionQuery(
                image_id=image.image_id,
                prompt=config.prompts.head,
                threshold=config.stage_thresholds.head,
                region=person_region,
            )
        )
        if not head_dets:
            associations.append(
                AssociationRecord(
                    person_box=person.box,
                    head_box=None,
                    helmet_worn=False,
                    helmet_evidence_score=0.0,
                )
            )
            continue

        for head_det in head_dets:
            head_box = _to_original(head_det, person_region, image)
            if head_box is None:
                continue
            head_region = _crop_region(head_box, image, config.crop_padding)
            if head_region is None:
                continue
            helmet_dets = backend.detect(
                DetectionQuery(
                    image_id=image.image_id,
                    prompt=config.prompts.helmet,
                    threshold=config.stage_thresholds.helmet,
                    region=head_region,
                )
            )
            evidence = max((d.score for d in helmet_dets), default=0.0)
            worn = bool(helmet_dets)
            head_trace = StageTrace("head", head_box, head_det.score)
            provenance = person.provenance + (head_trace,)
            if worn:
                provenance = provenance + (StageTrace("helmet", head_box, evidence),)
            predictions.append(
                Prediction(
                    label=ClassLabel.HEAD_WITH_HELMET if worn else ClassLabel.HEAD,
                    box=head_box,
                    score=head_det.score,
                    provenance=provenance,
                )
            )
            associations.append(
                AssociationRecord(
                    person_box=person.box,
                    head_box=head_box,
                    helmet_worn=worn,
                    helmet_evidence_score=evidence,
                )
            )
    return predictions, associations


def run_strategy(
    image: AnnotatedImage, backend: DetectorBackend, config: PipelineConfig
) -> PipelineResult:
    if config.strategy is Strategy.DIRECT:
        predictions, associations = run_direct(image, backend, config), []
    elif config.strategy is Strategy.NESTED:
        predictions, associations = run_nested(image, backend, config)
    else:
        predictions, associations = run_cascaded(image, backend, config)
    return PipelineResult(
        image_id=image.image_id,
        strategy=config.strategy,
        predictions=predictions,
        associations=associations,
    )


def run_over_images(
    images: Iterable[AnnotatedImage],
    backend: DetectorBackend,
    config: PipelineConfig,
    workers: int = 1,
) -> list[PipelineResult]:
    """Run a strategy over many images; results merged in image_id order.

    Stages within one image are sequential; images are independent, so the
    worker pool parallelizes across them.
    """
    images = list(images)
    if workers <= 1:
        results = [run_strategy(img, backend, config) for img in images]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda img: run_strategy(img, backend, config), images))
    return sorted(results, key=lambda r: r.image_id)


# ---------------------------------------------------------------------------
# Run serialization (line-delimited JSON, one record per image)


def result_to_record(result: PipelineResult) -> dict:
    return {
        "image_id": result.image_id,
        "strategy": result.strategy.value,
        "predictions": [
            {
                "label": p.label.value,
                "box": list(p.box.as_tuple()),
                "score": p.score,
                "provenance": [
                    {"stage": t.stage, "box": list(t.box.as_tuple()), "score": t.score}
                    for t in p.provenance
                ],
            }
            for p in result.predictions
        ],
        "associations": [
            {
                "person_box": list(a.person_box.as_tuple()),
                "head_box": list(a.head_box.as_tuple()) if a.head_box else None,
                "helmet_worn": a.helmet_worn,
                "helmet_evidence_score": a.helmet_evidence_score,
            }
            for a in result.associations
        ],
    }


def result_from_record(rec: dict) -> PipelineResult:
    predictions = [
        Prediction(
            label=ClassLabel(p["label"]),
            box=BBox(*p["box"]),
            score=float(p["score"]),
            provenance=tuple(
                StageTrace(t["stage"], BBox(*t["box"]), float(t["score"]))
                for t in p.get("provenance", [])
            ),
        )
        for p in rec["predictions"]
    ]
    associations = [
        AssociationRecord(
            person_box=BBox(*a["person_box"]),
            head_box=BBox(*a["head_box"]) if a.get("head_box") else None,
            helmet_worn=bool(a["helmet_worn"]),
            helmet_evidence_score=float(a["helmet_evidence_score"]),
        )
        for a in rec["associations"]
    ]
    return PipelineResult(
        image_id=rec["image_id"],
        strategy=Strategy(rec["strategy"]),
        predictions=predictions,
        associations=associations,
    )
