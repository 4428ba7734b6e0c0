"""Run the detection service: python -m hatserve [--port N] [--model-id ID]."""

from __future__ import annotations

import argparse
import os

import uvicorn

from .app import DEFAULT_MODEL_ID, create_app


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="hatserve", description=__doc__)
    parser.add_argument("--host", default="0.0.0.0")
    parser.add_argument("--port", type=int, default=int(os.environ.get("PORT", 8000)))
    parser.add_argument(
        "--model-id", default=os.environ.get("MODEL_ID", DEFAULT_MODEL_ID),
        help="hub checkpoint id, or `stub` for the deterministic test detector",
    )
    args = parser.parse_args(argv)
    uvicorn.run(create_app(model_id=args.model_id), host=args.host, port=args.port)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
