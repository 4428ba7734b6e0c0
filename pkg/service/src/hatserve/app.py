"""FastAPI service: text-conditioned zero-shot detection over HTTP.

Endpoints:

- POST /detect  {image: base64 PNG/JPEG, prompts: [text, ...], threshold: [0,1]}
                -> {detections: [{box: [x0,y0,x1,y1], score, prompt}, ...]}
                Boxes are in submitted-image pixels (0 <= x0 < x1 <= width,
                0 <= y0 < y1 <= height); no returned score is below the
                threshold. 400 on malformed requests, 503 before the model is
                ready.
- GET /health   {status: "ok", model: <identifier>} once weights are loaded,
                503 while warming up.

The service is stateless per request: callers crop regions themselves and
submit crops as whole images. Identical request bytes produce identical
responses.

Environment: MODEL_ID (default google/owlv2-base-patch16-ensemble, or `stub`
for the deterministic test detector), PORT, MAX_IMAGE_BYTES (default 8 MiB).
"""

from __future__ import annotations

import base64
import binascii
import io
import os
import threading
from contextlib import asynccontextmanager

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, Field

from .models import clamp_box, load_adapter

DEFAULT_MODEL_ID = "google/owlv2-base-patch16-ensemble"
DEFAULT_MAX_IMAGE_BYTES = 8 * 1024 * 1024


class DetectRequest(BaseModel):
    image: str = Field(description="base64-encoded PNG or JPEG bytes")
    prompts: list[str] = Field(min_length=1)
    threshold: float = Field(ge=0.0, le=1.0)


def create_app(
    model_id: str | None = None,
    max_image_bytes: int | None = None,
    preloaded_adapter=None,
) -> FastAPI:
    model_id = model_id or os.environ.get("MODEL_ID", DEFAULT_MODEL_ID)
    max_image_bytes = max_image_bytes or int(
        os.environ.get("MAX_IMAGE_BYTES", DEFAULT_MAX_IMAGE_BYTES)
    )

    state = {"adapter": preloaded_adapter, "error": None}
    lock = threading.Lock()

    def load_model():
        try:
            adapter = load_adapter(model_id)
        except Exception as exc:  # surface load failures via /health
            with lock:
                state["error"] = f"{type(exc).__name__}: {exc}"
            return
        with lock:
            state["adapter"] = adapter

    @asynccontextmanager
    async def lifespan(_: FastAPI):
        if state["adapter"] is None:
            threading.Thread(target=load_model, daemon=True).start()
        yield

    app = FastAPI(title="hatserve", version="0.1.0", lifespan=lifespan)

    @app.exception_handler(RequestValidationError)
    async def malformed_request(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"error": str(exc.errors()[:3])})

    @app.get("/health")
    def health():
        with lock:
            adapter = state["adapter"]
            error = state["error"]
        if adapter is None:
            detail = {"status": "loading", "model": model_id}
            if error:
                detail = {"status": "error", "model": model_id, "error": error}
            return JSONResponse(status_code=503, content=detail)
        return {"status": "ok", "model": adapter.model_name}

    @app.post("/detect")
    def detect(request: DetectRequest):
        with lock:
            adapter = state["adapter"]
        if adapter is None:
            return JSONResponse(status_code=503, content={"error": "model not ready"})

        try:
            raw = base64.b64decode(request.image, validate=True)
        except (binascii.Error, ValueError):
            return JSONResponse(status_code=400, content={"error": "image is not valid base64"})
        if len(raw) > max_image_bytes:
            return JSONResponse(
                status_code=400,
                content={"error": f"image exceeds MAX_IMAGE_BYTES={max_image_bytes}"},
            )
        try:
            image = Image.open(io.BytesIO(raw)).convert("RGB")
        except (UnidentifiedImageError, OSError):
            return JSONResponse(status_code=400, content={"error": "payload is not a decodable image"})

        detections = []
        for det in adapter.detect(image, request.prompts, request.threshold):
            if det.score < request.threshold:
                continue
            box = clamp_box(det.box, image.width, image.height)
            if box is None:
                continue
            detections.append({"box": list(box), "score": det.score, "prompt": det.prompt})
        return {"detections": detections}

    return app


app = create_app()
