"""Model adapters behind the /detect endpoint.

An adapter takes a PIL image, a list of text prompts and a threshold, and
returns (box, score, prompt) triples with boxes in submitted-image pixels and
scores in [0, 1]. Two adapters exist:

- Owlv2Adapter: a pretrained open-vocabulary detector from the transformers
  hub (MODEL_ID names the checkpoint). Confidence is sigmoid over the model's
  logits; boxes are rescaled back to the submitted image's pixel frame.
- StubAdapter (MODEL_ID=stub): a deterministic color-template detector used in
  tests and offline development. Prompts map to reference colors; connected
  same-color regions become detections. No weights, no network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image


@dataclass(frozen=True)
class RawDetection:
    box: tuple[float, float, float, float]  # x0, y0, x1, y1 in image pixels
    score: float
    prompt: str


def clamp_box(box, width: int, height: int):
    x0 = min(max(box[0], 0.0), float(width))
    y0 = min(max(box[1], 0.0), float(height))
    x1 = min(max(box[2], 0.0), float(width))
    y1 = min(max(box[3], 0.0), float(height))
    if x1 <= x0 or y1 <= y0:
        return None
    return (x0, y0, x1, y1)


class StubAdapter:
    """Deterministic toy detector: finds connected regions of a prompt's color."""

    model_name = "stub"

    PROMPT_COLORS: dict[str, tuple[int, int, int]] = {
        "person": (40, 70, 160),
        "helmet": (230, 200, 40),
        "hard hat": (230, 200, 40),
        "head": (190, 140, 110),
    }
    COLOR_TOLERANCE = 40
    MIN_REGION_PIXELS = 64

    def detect(self, image: Image.Image, prompts: list[str], threshold: float) -> list[RawDetection]:
        pixels = np.asarray(image.convert("RGB"), dtype=np.int16)
        detections: list[RawDetection] = []
        for prompt in prompts:
            color = self.PROMPT_COLORS.get(prompt.strip().lower())
            if color is None:
                continue
            mask = (np.abs(pixels - np.array(color, dtype=np.int16)).max(axis=2)
                    <= self.COLOR_TOLERANCE)
            for y0, x0, y1, x1, filled in _connected_regions(mask, self.MIN_REGION_PIXELS):
                coverage = filled / ((y1 - y0) * (x1 - x0))
                score = min(0.5 + 0.45 * coverage, 0.99)  # never reaches 1.0
                if score >= threshold:
                    detections.append(
                        RawDetection(
                            box=(float(x0), float(y0), float(x1), float(y1)),
                            score=float(score),
                            prompt=prompt,
                        )
                    )
        return detections


def _connected_regions(mask: np.ndarray, min_pixels: int):
    """4-connected components of a boolean mask as (y0, x0, y1, x1, count)."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or seen[sy, sx]:
                continue
            stack = [(sy, sx)]
            seen[sy, sx] = True
            y_lo = y_hi = sy
            x_lo = x_hi = sx
            count = 0
            while stack:
                y, x = stack.pop()
                count += 1
                y_lo, y_hi = min(y_lo, y), max(y_hi, y)
                x_lo, x_hi = min(x_lo, x), max(x_hi, x)
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        stack.append((ny, nx))
            if count >= min_pixels:
                yield (y_lo, x_lo, y_hi + 1, x_hi + 1, count)


class Owlv2Adapter:
    """Pretrained open-vocabulary detector from the transformers hub."""

    def __init__(self, model_id: str):
        import torch
        from transformers import Owlv2ForObjectDetection, Owlv2Processor

        self.model_name = model_id
        self._torch = torch
        self.processor = Owlv2Processor.from_pretrained(model_id)
        self.model = Owlv2ForObjectDetection.from_pretrained(model_id).eval()
        torch.set_grad_enabled(False)

    def detect(self, image: Image.Image, prompts: list[str], threshold: float) -> list[RawDetection]:
        torch = self._torch
        inputs = self.processor(text=[prompts], images=image, return_tensors="pt")
        with torch.no_grad():
            outputs = self.model(**inputs)
        target_sizes = torch.tensor([[image.height, image.width]])
        # confidence = sigmoid(logits); boxes rescaled to the submitted image
        results = self.processor.post_process_object_detection(
            outputs, threshold=threshold, target_sizes=target_sizes
        )[0]
        detections = []
        for box, score, label in zip(results["boxes"], results["scores"], results["labels"]):
            detections.append(
                RawDetection(
                    box=tuple(float(v) for v in box.tolist()),
                    score=float(score),
                    prompt=prompts[int(label)],
                )
            )
        return detections


def load_adapter(model_id: str):
    if model_id.strip().lower() == "stub":
        return StubAdapter()
    return Owlv2Adapter(model_id)
