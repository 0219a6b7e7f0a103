"""HTTP verifier/oracle service.

Exposes a local verifier (teacher cosine + calibrated thresholds) and the
reference protectors behind a small FastAPI app, so remote-verifier code paths
can be exercised end to end without a commercial API.
"""
from __future__ import annotations

import hmac
import os
from pathlib import Path

import numpy as np
from fastapi import Depends, FastAPI, Header, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .embedder import EmbedderModel, embed_images
from .protectors import ProtectorConfig, protect_batch
from .regenerator import CalibratedThresholds, pass_level
from .verifier import decode_image, encode_image


class VerifyRequest(BaseModel):
    image_a: str = Field(description="base64 FLGT float32 tensor, 64x64x3 in [0, 1]")
    image_b: str


class VerifyResponse(BaseModel):
    score: float | None
    face_detected: bool
    level: float | None
    thresholds: dict[str, float]


class ProtectRequest(BaseModel):
    image: str
    config: dict


class ProtectResponse(BaseModel):
    template: str
    method: str
    config_hash: str


class Health(BaseModel):
    status: str
    version: str
    teacher_param_hash: str


def _decode(data: str) -> np.ndarray:
    try:
        img = decode_image(data)
    except Exception as e:  # noqa: BLE001 - any decoding failure is a client error
        raise HTTPException(status_code=422, detail=f"bad image payload: {e}") from e
    if img.shape != (64, 64, 3):
        raise HTTPException(status_code=422, detail=f"expected 64x64x3 image, got {img.shape}")
    return img


def face_present(image: np.ndarray) -> bool:
    """Crude detector stand-in: a blank or saturated frame has no face."""
    return float(np.std(image)) > 1e-3


def create_app(teacher: EmbedderModel, thresholds: CalibratedThresholds, token_env: str | None = None) -> FastAPI:
    app = FastAPI(title="idleak verifier", version=__version__)

    def auth(authorization: str | None = Header(default=None)) -> None:
        if not token_env:
            return
        expected = os.environ.get(token_env, "")
        given = (authorization or "").removeprefix("Bearer ").strip()
        if not expected or not hmac.compare_digest(given, expected):
            raise HTTPException(status_code=401, detail="unauthorized")

    @app.get("/health", response_model=Health)
    def health() -> Health:
        return Health(status="ok", version=__version__, teacher_param_hash=teacher.param_hash)

    @app.post("/verify", response_model=VerifyResponse, dependencies=[Depends(auth)])
    def verify(req: VerifyRequest) -> VerifyResponse:
        a, b = _decode(req.image_a), _decode(req.image_b)
        th = {str(k): v for k, v in thresholds.thresholds.items()}
        if not (face_present(a) and face_present(b)):
            return VerifyResponse(score=None, face_detected=False, level=None, thresholds=th)
        e = embed_images(teacher, np.stack([a, b]))
        score = float(np.clip(e[0] @ e[1], -1.0, 1.0))
        return VerifyResponse(score=score, face_detected=True, level=pass_level(score, thresholds), thresholds=th)

    @app.post("/protect", response_model=ProtectResponse, dependencies=[Depends(auth)])
    def protect(req: ProtectRequest) -> ProtectResponse:
        try:
            config = ProtectorConfig.from_dict(req.config)
        except (ValueError, KeyError, TypeError) as e:
            raise HTTPException(status_code=422, detail=str(e)) from e
        t = protect_batch(_decode(req.image)[None], config)[0]
        return ProtectResponse(template=encode_image(t), method=config.method.value, config_hash=config.config_hash)

    return app


def app_from_dirs(teacher_dir: str | Path, thresholds_file: str | Path, token_env: str | None = None) -> FastAPI:
    return create_app(EmbedderModel.load(teacher_dir), CalibratedThresholds.load(thresholds_file), token_env)
