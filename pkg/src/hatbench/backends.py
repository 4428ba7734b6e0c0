"""Text-conditioned detection backends behind one interface.

Three implementations:

- OracleBackend: synthesizes detections from ground truth with configurable
  misses, false positives and box jitter. Fully deterministic: randomness is
  keyed by (seed, image_id, region, prompt) and never by threshold, so raising
  the threshold always yields a subset of the lower-threshold result.
- FixtureBackend: replays recorded detections from a line-delimited JSON file.
- RemoteBackend: HTTP client for the inference service wire protocol; crops
  are taken client-side and submitted as standalone images.

All backends return boxes in the pixel frame of the queried region and only
scores >= the query threshold.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset import AnnotatedImage, ClassLabel, DatasetManifest
from .geometry import BBox, intersect, original_to_crop

log = logging.getLogger(__name__)

FIXTURE_SCHEMA_VERSION = 1

# Which canonical classes answer a given text prompt. A physical head answers
# "head" whether or not it wears a helmet; a worn helmet occupies its
# head-with-helmet box in cascaded-mode manifests (which carry no helmet boxes).
DEFAULT_PROMPT_CLASSES: dict[str, tuple[ClassLabel, ...]] = {
    "person": (ClassLabel.PERSON,),
    "head": (ClassLabel.HEAD, ClassLabel.HEAD_WITH_HELMET),
    "helmet": (ClassLabel.HELMET, ClassLabel.HEAD_WITH_HELMET),
    "hard hat": (ClassLabel.HELMET, ClassLabel.HEAD_WITH_HELMET),
}


class BackendError(Exception):
    """Base class for detection backend failures."""


class UnknownImage(BackendError):
    """The backend has no data for the queried image/region/prompt."""


class BackendUnavailable(BackendError):
    """The remote service could not be reached after the configured retries."""


class ProtocolError(BackendError):
    """The remote service answered outside the wire protocol."""


@dataclass(frozen=True)
class DetectionQuery:
    """One detection request: an image (or sub-region of it), a prompt, a threshold."""

    image_id: str
    prompt: str
    threshold: float
    region: BBox | None = None  # None = whole image

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be in [0,1], got {self.threshold}")


@dataclass(frozen=True)
class Detection:
    """One backend response item, box in the queried region's pixel frame."""

    box: BBox
    score: float
    prompt: str


def canonical_region(region: BBox | None) -> str:
    """Stable fixture/rng key for a region: coordinates rounded to 1e-3."""
    if region is None:
        return "full"
    return ",".join(f"{v:.3f}" for v in region.as_tuple())


class DetectorBackend:
    """Interface: concurrent-safe text-conditioned detection over known images."""

    def detect(self, query: DetectionQuery) -> list[Detection]:
        raise NotImplementedError

    def describe(self) -> dict:
        """Provenance descriptor embedded in reports."""
        raise NotImplementedError


@dataclass(frozen=True)
class ScoreModel:
    """Uniform score ranges for true and false detections."""

    tp: tuple[float, float] = (1.0, 1.0)
    fp: tuple[float, float] = (0.1, 0.9)

    def __post_init__(self):
        for lo, hi in (self.tp, self.fp):
            if not (0.0 <= lo <= hi <= 1.0):
                raise ValueError(f"score range must satisfy 0 <= lo <= hi <= 1, got ({lo},{hi})")


@dataclass(frozen=True)
class OracleConfig:
    """Corruption knobs for the ground-truth-derived oracle."""

    miss_rate: float = 0.0  # per-GT-instance drop probability
    fp_rate: float = 0.0  # expected false positives per query (Poisson mean)
    jitter: float = 0.0  # max per-edge displacement as a fraction of box size
    score_model: ScoreModel = field(default_factory=ScoreModel)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.miss_rate <= 1.0:
            raise ValueError(f"miss_rate must be in [0,1], got {self.miss_rate}")
        if self.fp_rate < 0.0:
            raise ValueError(f"fp_rate must be >= 0, got {self.fp_rate}")
        if not 0.0 <= self.jitter < 0.5:
            raise ValueError(f"jitter must be in [0,0.5), got {self.jitter}")


class OracleBackend(DetectorBackend):
    """Synthesizes detections from ground truth annotations.

    A GT instance answers a prompt when its class is in the prompt's class set
    and it intersects the queried region with positive area; the detection is
    the clipped box in region frame. Misses, jitter and false positives are
    drawn from a stream derived from (seed, image_id, region, prompt), making
    results reproducible and independent of query order and threshold.
    """

    FP_AREA_RANGE = (0.01, 0.25)  # FP box area as a fraction of region area

    def __init__(
        self,
        images: DatasetManifest | Mapping[str, AnnotatedImage] | Iterable[AnnotatedImage],
        config: OracleConfig | None = None,
        prompt_classes: Mapping[str, tuple[ClassLabel, ...]] | None = None,
    ):
        if isinstance(images, DatasetManifest):
            self._images = images.image_map()
        elif isinstance(images, Mapping):
            self._images = dict(images)
        else:
            self._images = {img.image_id: img for img in images}
        self.config = config or OracleConfig()
        self.prompt_classes = dict(prompt_classes or DEFAULT_PROMPT_CLASSES)

    def _rng(self, query: DetectionQuery) -> np.random.Generator:
        key = f"{self.config.seed}|{query.image_id}|{canonical_region(query.region)}|{query.prompt}"
        digest = hashlib.sha256(key.encode()).digest()
        return np.random.default_rng(int.from_bytes(digest[:8], "big"))

    def _jittered(self, local: BBox, frame: BBox, rng: np.random.Generator) -> BBox:
        j = self.config.jitter
        if j == 0.0:
            return local
        w, h = local.width, local.height
        dx0, dx1 = rng.uniform(-j * w, j * w, size=2)
        dy0, dy1 = rng.uniform(-j * h, j * h, size=2)
        x0 = min(max(local.xmin + dx0, frame.xmin), frame.xmax)
        x1 = min(max(local.xmax + dx1, frame.xmin), frame.xmax)
        y0 = min(max(local.ymin + dy0, frame.ymin), frame.ymax)
        y1 = min(max(local.ymax + dy1, frame.ymin), frame.ymax)
        if x1 <= x0 or y1 <= y0:  # clamping collapsed the box; keep the original
            return local
        return BBox(x0, y0, x1, y1)

    def detect(self, query: DetectionQuery) -> list[Detection]:
        image = self._images.get(query.image_id)
        if image is None:
            raise UnknownImage(f"oracle has no image {query.image_id!r}")
        region = query.region or image.dims.as_box()
        frame = BBox(0.0, 0.0, region.width, region.height)
        classes = self.prompt_classes.get(query.prompt.strip().lower(), ())
        rng = self._rng(query)
        cfg = self.config

        detections: list[Detection] = []
        for inst in image.instances:
            if inst.label not in classes:
                continue
            if intersect(inst.box, region) is None:
                continue
            missed = rng.random() < cfg.miss_rate
            local = original_to_crop(region, inst.box)
            local = self._jittered(local, frame, rng)
            score = float(rng.uniform(*cfg.score_model.tp))
            if missed:
                continue
            detections.append(Detection(box=local, score=score, prompt=query.prompt))

        if cfg.fp_rate > 0.0:
            for _ in range(int(rng.poisson(cfg.fp_rate))):
                area = rng.uniform(*self.FP_AREA_RANGE) * region.area
                aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
                w = min(math.sqrt(area * aspect), region.width)
                h = min(area / w, region.height)
                x0 = rng.uniform(0.0, region.width - w)
                y0 = rng.uniform(0.0, region.height - h)
                score = float(rng.uniform(*cfg.score_model.fp))
                detections.append(
                    Detection(box=BBox(x0, y0, x0 + w, y0 + h), score=score, prompt=query.prompt)
                )

        return [d for d in detections if d.score >= query.threshold]

    def describe(self) -> dict:
        return {
            "kind": "oracle",
            "miss_rate": self.config.miss_rate,
            "fp_rate": self.config.fp_rate,
            "jitter": self.config.jitter,
            "score_model": {"tp": list(self.config.score_model.tp), "fp": list(self.config.score_model.fp)},
            "seed": self.config.seed,
            "images": len(self._images),
        }


# ---------------------------------------------------------------------------
# Fixture recording and replay


def _fixture_key(image_id: str, region: BBox | None, prompt: str) -> tuple[str, str, str]:
    return (image_id, canonical_region(region), prompt)


class FixtureBackend(DetectorBackend):
    """Replays recorded detections, byte-stable across runs.

    Lookup is by (image_id, canonical region, prompt). An exact threshold match
    replays as recorded; otherwise the entry with the largest recorded
    threshold <= the queried one is replayed filtered to the query threshold,
    which preserves exact threshold monotonicity from a single low-threshold
    recording. Keys never recorded raise UnknownImage.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._entries: dict[tuple[str, str, str], list[tuple[float, list[Detection]]]] = {}
        text = self.path.read_text()
        for line_no, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise BackendError(f"{self.path}:{line_no}: bad fixture line: {exc}") from exc
            region = BBox(*rec["region"]) if rec.get("region") else None
            detections = [
                Detection(box=BBox(*d["box"]), score=float(d["score"]), prompt=rec["prompt"])
                for d in rec["detections"]
            ]
            key = _fixture_key(rec["image_id"], region, rec["prompt"])
            self._entries.setdefault(key, []).append((float(rec["threshold"]), detections))
        for recorded in self._entries.values():
            recorded.sort(key=lambda item: item[0])
        self._digest = hashlib.sha256(text.encode()).hexdigest()

    def detect(self, query: DetectionQuery) -> list[Detection]:
        recorded = self._entries.get(_fixture_key(query.image_id, query.region, query.prompt))
        if not recorded:
            raise UnknownImage(
                f"fixture has no entry for image={query.image_id!r} "
                f"region={canonical_region(query.region)} prompt={query.prompt!r}"
            )
        eligible = [(t, dets) for t, dets in recorded if t <= query.threshold + 1e-9]
        if not eligible:
            raise UnknownImage(
                f"fixture for image={query.image_id!r} prompt={query.prompt!r} was recorded "
                f"only above threshold {query.threshold}"
            )
        _, detections = eligible[-1]
        return [d for d in detections if d.score >= query.threshold]

    def describe(self) -> dict:
        return {"kind": "fixture", "path": str(self.path), "sha256": self._digest}


class RecordingBackend(DetectorBackend):
    """Proxy that captures every (query, result) pair passing through it."""

    def __init__(self, inner: DetectorBackend):
        self.inner = inner
        self.records: list[tuple[DetectionQuery, list[Detection]]] = []
        self._lock = threading.Lock()

    def detect(self, query: DetectionQuery) -> list[Detection]:
        result = self.inner.detect(query)
        with self._lock:
            self.records.append((query, result))
        return result

    def describe(self) -> dict:
        return {"kind": "recording", "inner": self.inner.describe()}


def write_fixture(records: Sequence[tuple[DetectionQuery, list[Detection]]], path: str | Path) -> None:
    """Persist recorded (query, detections) pairs as a replayable fixture.

    Written to a temp file and renamed, so an interrupted recording leaves no
    partial fixture behind. Duplicate keys keep their first recording.
    """
    path = Path(path)
    seen: set[tuple[str, str, str, float]] = set()
    lines = []
    for query, detections in records:
        key = _fixture_key(query.image_id, query.region, query.prompt) + (round(query.threshold, 6),)
        if key in seen:
            continue
        seen.add(key)
        lines.append(
            json.dumps(
                {
                    "image_id": query.image_id,
                    "region": list(query.region.as_tuple()) if query.region else None,
                    "prompt": query.prompt,
                    "threshold": query.threshold,
                    "detections": [
                        {"box": list(d.box.as_tuple()), "score": d.score} for d in detections
                    ],
                },
                sort_keys=True,
            )
        )
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + ("\n" if lines else ""))
    os.replace(tmp, path)


def record_fixture(
    queries: Iterable[DetectionQuery], backend: DetectorBackend, path: str | Path
) -> int:
    """Run queries against a backend and persist the results as a fixture.

    Backend errors propagate and no fixture file is written in that case.
    Returns the number of recorded entries.
    """
    recorder = RecordingBackend(backend)
    for query in queries:
        recorder.detect(query)
    write_fixture(recorder.records, path)
    return len(recorder.records)


# ---------------------------------------------------------------------------
# Remote HTTP client


class RemoteBackend(DetectorBackend):
    """Client for the inference service: POST /detect with a base64 image.

    Region queries are cropped client-side (integer-aligned, superset of the
    requested region) and submitted as standalone images; returned boxes are
    shifted into the exact region frame. Responses are post-filtered so the
    threshold-monotonicity contract holds regardless of service behavior.
    """

    def __init__(
        self,
        endpoint: str,
        image_root: str | Path | None = None,
        image_loader=None,
        timeout: float = 30.0,
        retries: int = 3,
        backoff: float = 0.25,
        max_in_flight: int = 4,
    ):
        if image_loader is None and image_root is None:
            raise ValueError("RemoteBackend needs an image_root or an image_loader")
        self.endpoint = endpoint.rstrip("/")
        self.image_root = Path(image_root) if image_root else None
        self._image_loader = image_loader
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._gate = threading.Semaphore(max_in_flight)
        import requests  # deferred so oracle/fixture use has no hard dependency

        self._session = requests.Session()
        self._requests = requests

    def _load_image(self, image_id: str):
        from PIL import Image

        if self._image_loader is not None:
            return self._image_loader(image_id)
        for ext in (".jpg", ".jpeg", ".png"):
            candidate = self.image_root / f"{image_id}{ext}"
            if candidate.exists():
                return Image.open(candidate).convert("RGB")
        raise UnknownImage(f"no image file for {image_id!r} under {self.image_root}")

    def _post(self, payload: dict) -> dict:
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                response = self._session.post(
                    f"{self.endpoint}/detect", json=payload, timeout=self.timeout
                )
            except self._requests.RequestException as exc:
                last_error = exc
                continue
            if response.status_code >= 500:
                last_error = BackendError(f"HTTP {response.status_code}")
                continue
            if response.status_code != 200:
                raise ProtocolError(f"/detect returned HTTP {response.status_code}: {response.text[:200]}")
            try:
                return response.json()
            except ValueError as exc:
                raise ProtocolError(f"/detect returned non-JSON body: {exc}") from exc
        raise BackendUnavailable(
            f"{self.endpoint}/detect unreachable after {self.retries + 1} attempts: {last_error}"
        )

    def detect(self, query: DetectionQuery) -> list[Detection]:
        image = self._load_image(query.image_id)
        offset_x = offset_y = 0.0
        if query.region is not None:
            r = query.region
            left = max(int(math.floor(r.xmin)), 0)
            top = max(int(math.floor(r.ymin)), 0)
            right = min(int(math.ceil(r.xmax)), image.width)
            bottom = min(int(math.ceil(r.ymax)), image.height)
            if right <= left or bottom <= top:
                return []
            image = image.crop((left, top, right, bottom))
            offset_x = left - r.xmin
            offset_y = top - r.ymin

        buf = io.BytesIO()
        image.save(buf, format="PNG")
        payload = {
            "image": base64.b64encode(buf.getvalue()).decode("ascii"),
            "prompts": [query.prompt],
            "threshold": query.threshold,
        }
        with self._gate:
            body = self._post(payload)

        try:
            raw = body["detections"]
        except (TypeError, KeyError) as exc:
            raise ProtocolError(f"/detect response missing 'detections': {body!r}") from exc

        frame_w = query.region.width if query.region else float(image.width)
        frame_h = query.region.height if query.region else float(image.height)
        detections = []
        for item in raw:
            try:
                x0, y0, x1, y1 = (float(v) for v in item["box"])
                score = float(item["score"])
                prompt = item.get("prompt", query.prompt)
            except (TypeError, KeyError, ValueError) as exc:
                raise ProtocolError(f"malformed detection item: {item!r}") from exc
            if score < query.threshold or prompt != query.prompt:
                continue
            x0 = min(max(x0 + offset_x, 0.0), frame_w)
            x1 = min(max(x1 + offset_x, 0.0), frame_w)
            y0 = min(max(y0 + offset_y, 0.0), frame_h)
            y1 = min(max(y1 + offset_y, 0.0), frame_h)
            if x1 <= x0 or y1 <= y0:
                log.warning("dropping zero-area remote detection for %s", query.image_id)
                continue
            detections.append(Detection(box=BBox(x0, y0, x1, y1), score=score, prompt=query.prompt))
        return detections

    def describe(self) -> dict:
        return {"kind": "remote", "endpoint": self.endpoint}
