"""Benchmark dataset construction from PASCAL-VOC annotations.

Two source datasets feed the benchmark:

- Hard Hat Workers: classes helmet / head / person. Most of its images carry
  no person annotation at all, so only images with at least one person
  instance are kept.
- SHEL5k: classes helmet / head with helmet / person with helmet / head /
  person without helmet / face.

Source classes are remapped onto one canonical label set per evaluation mode:

- cascaded: all person variants -> person; head with helmet -> head_with_helmet;
  head -> head; helmet and face dropped (the cascade scores worn helmets via
  the head-with-helmet class, not isolated helmet boxes).
- direct_nested: helmet -> helmet (including helmets lying on the ground);
  person variants -> person; everything else dropped.

VOC XML corners are 1-based inclusive; on parse they are normalized to this
package's 0-based half-open convention (xmin-1, ymin-1, xmax, ymax).
"""

from __future__ import annotations

import json
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

from .geometry import BBox, ImageDims

SCHEMA_VERSION = 1


class DatasetError(Exception):
    """Base class for dataset construction failures."""


class MalformedXml(DatasetError):
    """The annotation document is not parseable VOC XML."""


class UnknownClass(DatasetError):
    """An object carries a class string outside the source's class set."""


class DegenerateBox(DatasetError):
    """An object's box has no positive area after normalization."""


class ManifestIntegrityError(DatasetError):
    """A stored manifest's stats disagree with its images."""


class Source(Enum):
    HARD_HAT_WORKERS = "hard_hat_workers"
    SHEL5K = "shel5k"


class SourceClass(Enum):
    """Raw class strings as they appear in the source annotations."""

    HELMET = "helmet"
    HEAD = "head"
    PERSON = "person"
    HEAD_WITH_HELMET = "head with helmet"
    PERSON_WITH_HELMET = "person with helmet"
    PERSON_WITHOUT_HELMET = "person without helmet"
    FACE = "face"


class ClassLabel(Enum):
    """Canonical benchmark classes."""

    PERSON = "person"
    HEAD = "head"
    HEAD_WITH_HELMET = "head_with_helmet"
    HELMET = "helmet"


class RemapMode(Enum):
    CASCADED = "cascaded"
    DIRECT_NESTED = "direct_nested"


SOURCE_CLASSES: dict[Source, frozenset[SourceClass]] = {
    Source.HARD_HAT_WORKERS: frozenset(
        {SourceClass.HELMET, SourceClass.HEAD, SourceClass.PERSON}
    ),
    Source.SHEL5K: frozenset(
        {
            SourceClass.HELMET,
            SourceClass.HEAD_WITH_HELMET,
            SourceClass.PERSON_WITH_HELMET,
            SourceClass.HEAD,
            SourceClass.PERSON_WITHOUT_HELMET,
            SourceClass.FACE,
        }
    ),
}

_PERSON_SOURCE_CLASSES = {
    SourceClass.PERSON,
    SourceClass.PERSON_WITH_HELMET,
    SourceClass.PERSON_WITHOUT_HELMET,
}

_REMAP: dict[RemapMode, dict[SourceClass, ClassLabel | None]] = {
    RemapMode.CASCADED: {
        SourceClass.PERSON: ClassLabel.PERSON,
        SourceClass.PERSON_WITH_HELMET: ClassLabel.PERSON,
        SourceClass.PERSON_WITHOUT_HELMET: ClassLabel.PERSON,
        SourceClass.HEAD_WITH_HELMET: ClassLabel.HEAD_WITH_HELMET,
        SourceClass.HEAD: ClassLabel.HEAD,
        SourceClass.HELMET: None,
        SourceClass.FACE: None,
    },
    RemapMode.DIRECT_NESTED: {
        SourceClass.HELMET: ClassLabel.HELMET,
        SourceClass.PERSON: ClassLabel.PERSON,
        SourceClass.PERSON_WITH_HELMET: ClassLabel.PERSON,
        SourceClass.PERSON_WITHOUT_HELMET: ClassLabel.PERSON,
        SourceClass.HEAD: None,
        SourceClass.HEAD_WITH_HELMET: None,
        SourceClass.FACE: None,
    },
}


@dataclass(frozen=True)
class ObjectInstance:
    """One annotated object: a label and its box."""

    label: ClassLabel | SourceClass
    box: BBox


@dataclass
class AnnotatedImage:
    """One image's annotations (labels are SourceClass before remap, ClassLabel after)."""

    image_id: str
    source: Source
    dims: ImageDims
    instances: list[ObjectInstance] = field(default_factory=list)


@dataclass
class DatasetManifest:
    """Canonical benchmark: remapped images plus verifiable statistics."""

    mode: RemapMode
    images: list[AnnotatedImage]
    stats: dict

    def image_map(self) -> dict[str, AnnotatedImage]:
        return {img.image_id: img for img in self.images}


def _normalize_class_name(raw: str) -> str:
    return re.sub(r"[\s_-]+", " ", raw.strip().lower())


def parse_voc_xml(xml_document: str, source: Source, image_id: str | None = None) -> AnnotatedImage:
    """Parse one VOC annotation document into an AnnotatedImage.

    Class strings are validated against the source's class set, corner
    coordinates are normalized to 0-based half-open pixels and clamped to the
    image dims. `image_id` defaults to the document's <filename> stem.
    """
    try:
        root = ET.fromstring(xml_document)
    except ET.ParseError as exc:
        raise MalformedXml(f"unparseable annotation XML: {exc}") from exc

    size = root.find("size")
    if size is None:
        raise MalformedXml("missing <size> element")
    try:
        dims = ImageDims(int(size.findtext("width")), int(size.findtext("height")))
    except (TypeError, ValueError) as exc:
        raise MalformedXml(f"bad <size> element: {exc}") from exc

    if image_id is None:
        filename = root.findtext("filename")
        if not filename:
            raise MalformedXml("missing <filename> and no explicit image_id")
        image_id = Path(filename).stem

    allowed = SOURCE_CLASSES[source]
    instances: list[ObjectInstance] = []
    for index, obj in enumerate(root.iter("object")):
        name = obj.findtext("name")
        if name is None:
            raise MalformedXml(f"object {index} has no <name>")
        try:
            cls = SourceClass(_normalize_class_name(name))
        except ValueError:
            raise UnknownClass(f"object {index}: unknown class {name!r}") from None
        if cls not in allowed:
            raise UnknownClass(f"object {index}: class {name!r} not valid for source {source.value}")

        bndbox = obj.find("bndbox")
        if bndbox is None:
            raise MalformedXml(f"object {index} has no <bndbox>")
        try:
            xmin = float(bndbox.findtext("xmin"))
            ymin = float(bndbox.findtext("ymin"))
            xmax = float(bndbox.findtext("xmax"))
            ymax = float(bndbox.findtext("ymax"))
        except (TypeError, ValueError) as exc:
            raise MalformedXml(f"object {index}: bad <bndbox>: {exc}") from exc
        if xmax <= xmin or ymax <= ymin:
            raise DegenerateBox(
                f"object {index} ({cls.value}): corners ({xmin},{ymin},{xmax},{ymax}) inverted or empty"
            )

        # 1-based inclusive -> 0-based half-open, then limit to the image.
        x0 = max(xmin - 1.0, 0.0)
        y0 = max(ymin - 1.0, 0.0)
        x1 = min(xmax, float(dims.width))
        y1 = min(ymax, float(dims.height))
        if x1 <= x0 or y1 <= y0:
            raise DegenerateBox(
                f"object {index} ({cls.value}): box ({xmin},{ymin},{xmax},{ymax}) has no area inside the image"
            )
        instances.append(ObjectInstance(cls, BBox(x0, y0, x1, y1)))

    return AnnotatedImage(image_id=image_id, source=source, dims=dims, instances=instances)


def filter_person_annotated(images: Iterable[AnnotatedImage]) -> list[AnnotatedImage]:
    """Keep only images that carry at least one `person` source-class instance."""
    return [
        img
        for img in images
        if any(inst.label is SourceClass.PERSON for inst in img.instances)
    ]


def remap_classes(image: AnnotatedImage, mode: RemapMode) -> AnnotatedImage:
    """Map SourceClass labels to canonical ClassLabels, dropping out-of-mode classes.

    Boxes are never altered, only labels and membership.
    """
    table = _REMAP[mode]
    remapped = []
    for inst in image.instances:
        if not isinstance(inst.label, SourceClass):
            raise DatasetError(f"instance already remapped: {inst.label!r}")
        target = table[inst.label]
        if target is not None:
            remapped.append(ObjectInstance(target, inst.box))
    return replace(image, instances=remapped)


def compute_stats(images: list[AnnotatedImage], dropped_empty: int = 0) -> dict:
    """Per-class instance counts, overall and per source."""
    per_class = {label.value: 0 for label in ClassLabel}
    by_source: dict[str, dict] = {}
    for img in images:
        src = by_source.setdefault(
            img.source.value, {"images": 0, "instances": {label.value: 0 for label in ClassLabel}}
        )
        src["images"] += 1
        for inst in img.instances:
            key = inst.label.value
            per_class[key] += 1
            src["instances"][key] += 1
    return {
        "images": len(images),
        "instances": per_class,
        "total_instances": sum(per_class.values()),
        "by_source": by_source,
        "images_dropped_empty": dropped_empty,
    }


def build_manifest(
    sources: Mapping[Source, str | Path] | Iterable[tuple[Source, str | Path]],
    mode: RemapMode,
) -> DatasetManifest:
    """Parse -> filter -> remap -> deduplicate ids -> stats, deterministically.

    `sources` maps each Source to a directory of VOC XML files. The person
    filter is applied to Hard Hat Workers images only (the SHEL5k protocol
    selects classes, not images). Images left empty by the remap are dropped.
    Output ordering is lexicographic by image_id.
    """
    pairs = list(sources.items()) if isinstance(sources, Mapping) else list(sources)

    parsed: list[AnnotatedImage] = []
    for source, directory in pairs:
        directory = Path(directory)
        if not directory.is_dir():
            raise DatasetError(f"source directory not found: {directory}")
        per_source: list[AnnotatedImage] = []
        for xml_path in sorted(directory.rglob("*.xml")):
            try:
                per_source.append(
                    parse_voc_xml(xml_path.read_text(), source, image_id=xml_path.stem)
                )
            except DatasetError as exc:
                raise type(exc)(f"{xml_path}: {exc}") from exc
        if source is Source.HARD_HAT_WORKERS:
            per_source = filter_person_annotated(per_source)
        parsed.extend(per_source)

    # Ids colliding across sources get a source prefix (applied to every collider).
    seen: dict[str, list[AnnotatedImage]] = {}
    for img in parsed:
        seen.setdefault(img.image_id, []).append(img)
    deduped: list[AnnotatedImage] = []
    for image_id, group in seen.items():
        if len(group) == 1:
            deduped.append(group[0])
            continue
        if len({img.source for img in group}) != len(group):
            raise DatasetError(f"duplicate image_id {image_id!r} within one source")
        for img in group:
            deduped.append(replace(img, image_id=f"{img.source.value}:{image_id}"))

    remapped = [remap_classes(img, mode) for img in deduped]
    kept = [img for img in remapped if img.instances]
    kept.sort(key=lambda img: img.image_id)

    stats = compute_stats(kept, dropped_empty=len(remapped) - len(kept))
    return DatasetManifest(mode=mode, images=kept, stats=stats)


# ---------------------------------------------------------------------------
# Stats verification


@dataclass(frozen=True)
class StatCheck:
    name: str
    expected: int
    observed: int

    @property
    def ok(self) -> bool:
        return self.expected == self.observed


@dataclass
class VerifyReport:
    checks: list[StatCheck]

    @property
    def passed(self) -> bool:
        return all(c.ok for c in self.checks)

    def lines(self) -> list[str]:
        out = []
        for c in self.checks:
            mark = "ok" if c.ok else "MISMATCH"
            out.append(f"{c.name:>18}: expected {c.expected:>7,} observed {c.observed:>7,}  [{mark}]")
        return out


# Published ground-truth frequencies for the combined 5,210-image benchmark.
TABLE1_EXPECTED: dict[str, int] = {
    "head_with_helmet": 16_652,
    "helmet": 19_856,
    "head": 6_158,
    "person": 20_631,
    "total": 63_297,
}


def verify_stats(
    observed: DatasetManifest | Mapping[str, int], expected: Mapping[str, int]
) -> VerifyReport:
    """Compare observed counts (or a manifest's counts) against expectations.

    Missing observed keys count as 0. An empty expectation set passes vacuously.
    """
    if isinstance(observed, DatasetManifest):
        observed = manifest_class_counts(observed)
    checks = [
        StatCheck(name=key, expected=int(val), observed=int(observed.get(key, 0)))
        for key, val in expected.items()
    ]
    return VerifyReport(checks=checks)


def manifest_class_counts(manifest: DatasetManifest) -> dict[str, int]:
    """Flat class->count mapping (plus images/total) used by verify_stats."""
    counts = dict(manifest.stats["instances"])
    counts["images"] = manifest.stats["images"]
    counts["total"] = manifest.stats["total_instances"]
    return counts


def combined_class_counts(
    cascaded: DatasetManifest, direct_nested: DatasetManifest
) -> dict[str, int]:
    """Counts across the manifest pair, shaped like the published frequency table.

    head_with_helmet / head / person come from the cascaded manifest, helmet
    from the direct_nested one; total sums those four.
    """
    c = cascaded.stats["instances"]
    d = direct_nested.stats["instances"]
    counts = {
        "head_with_helmet": c["head_with_helmet"],
        "helmet": d["helmet"],
        "head": c["head"],
        "person": c["person"],
    }
    counts["total"] = sum(counts.values())
    return counts


# ---------------------------------------------------------------------------
# Manifest persistence: line-delimited JSON with a leading header record.


def _image_to_record(img: AnnotatedImage) -> dict:
    return {
        "image_id": img.image_id,
        "source": img.source.value,
        "width": img.dims.width,
        "height": img.dims.height,
        "instances": [
            {"label": inst.label.value, "box": list(inst.box.as_tuple())}
            for inst in img.instances
        ],
    }


def _image_from_record(rec: dict) -> AnnotatedImage:
    dims = ImageDims(int(rec["width"]), int(rec["height"]))
    instances = [
        ObjectInstance(ClassLabel(inst["label"]), BBox(*inst["box"]))
        for inst in rec["instances"]
    ]
    return AnnotatedImage(
        image_id=rec["image_id"], source=Source(rec["source"]), dims=dims, instances=instances
    )


def dumps_manifest(manifest: DatasetManifest) -> str:
    header = {
        "schema_version": SCHEMA_VERSION,
        "kind": "manifest",
        "mode": manifest.mode.value,
        "stats": manifest.stats,
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines.extend(json.dumps(_image_to_record(img), sort_keys=True) for img in manifest.images)
    return "\n".join(lines) + "\n"


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(dumps_manifest(manifest))


def read_manifest(path: str | Path) -> DatasetManifest:
    """Load a manifest, re-deriving stats and refusing one whose header lies."""
    text = Path(path).read_text()
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise MalformedXml(f"{path}: empty manifest")
    header = json.loads(lines[0])
    if header.get("kind") != "manifest":
        raise ManifestIntegrityError(f"{path}: missing manifest header record")
    mode = RemapMode(header["mode"])
    images = [_image_from_record(json.loads(line)) for line in lines[1:]]
    recomputed = compute_stats(images, dropped_empty=header["stats"].get("images_dropped_empty", 0))
    if recomputed != header["stats"]:
        raise ManifestIntegrityError(f"{path}: stored stats do not match image records")
    return DatasetManifest(mode=mode, images=images, stats=recomputed)
