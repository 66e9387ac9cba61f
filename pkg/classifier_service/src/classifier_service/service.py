"""HTTP serving of the trained classifiers.

POST /score takes {"image_b64": ...} or {"image_path": ...} and answers
{"clarity", "complexity", "clarity_prob", "complexity_probs"}; any
malformed request gets HTTP 400 with {"error": ...}. GET /healthz answers
200 once the models are loaded. Model state is read-only after load, and
a request runs exactly the same inference code as offline scoring, so the
two produce identical labels on the same bytes (and identical floats for
the same batch shape).
"""

from __future__ import annotations

import base64
import binascii
import json
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .errors import UnreadableImage
from .training import Classifiers


def _bad_request(message: str) -> JSONResponse:
    return JSONResponse(status_code=400, content={"error": message})


def create_app(classifiers: Classifiers) -> FastAPI:
    app = FastAPI(title="classifier-service")
    app.state.classifiers = classifiers

    @app.get("/healthz")
    async def healthz() -> dict:
        return {
            "status": "ok",
            "version": classifiers.metadata.get("version", "unversioned"),
            "backbone": classifiers.metadata.get("backbone"),
        }

    @app.post("/score")
    async def score(request: Request):
        try:
            body = await request.json()
        except json.JSONDecodeError:
            return _bad_request("request body must be a JSON object")
        if not isinstance(body, dict):
            return _bad_request("request body must be a JSON object")

        has_b64 = "image_b64" in body
        has_path = "image_path" in body
        if has_b64 == has_path:
            return _bad_request("provide exactly one of image_b64 or image_path")

        if has_b64:
            if not isinstance(body["image_b64"], str):
                return _bad_request("image_b64 must be a base64 string")
            try:
                payload = base64.b64decode(body["image_b64"], validate=True)
            except (binascii.Error, ValueError):
                return _bad_request("image_b64 is not valid base64")
        else:
            if not isinstance(body["image_path"], str):
                return _bad_request("image_path must be a string")
            path = Path(body["image_path"])
            try:
                payload = path.read_bytes()
            except OSError as exc:
                return _bad_request(f"cannot read image_path: {exc}")

        try:
            result = classifiers.score_bytes(payload)
        except UnreadableImage as exc:
            return _bad_request(str(exc))
        return result.to_dict()

    return app
