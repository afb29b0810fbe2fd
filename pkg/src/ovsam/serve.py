"""HTTP inference service: segment-and-recognize for the demo UI and
scripted clients.

All responses are pure functions of (checkpoint, request); the model is
loaded once and never mutated. The teacher encoder is never loaded here.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import threading
import time
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse, Response
from pydantic import BaseModel, Field
from PIL import Image

from .decoder import Prompt
from .model import OpenVocabSam
from .synthdata import load_manifest, rle_encode


class PointPromptModel(BaseModel):
    type: Literal["point"]
    x: float
    y: float
    is_fg: bool = True


class BoxPromptModel(BaseModel):
    type: Literal["box"]
    x1: float
    y1: float
    x2: float
    y2: float


class SegmentRequest(BaseModel):
    image: Optional[str] = None  # base64 PNG
    sample_id: Optional[int] = None  # index into the eval split
    prompts: list[Union[PointPromptModel, BoxPromptModel]] = Field(min_length=1)
    topk: int = 5
    fusion: bool = True


class PromptResponse(BaseModel):
    mask_rle: dict
    box: list[float]
    label: str
    score: float
    iou_pred: float
    topk: list[dict]
    flags: dict


class SegmentResponse(BaseModel):
    width: int
    height: int
    results: list[PromptResponse]


class ServiceState:
    def __init__(self, checkpoint: Path, data_root: Path | None, log_path: Path | None):
        self.model: OpenVocabSam = OpenVocabSam.load(checkpoint)
        self.checkpoint_hash = hashlib.sha256(Path(checkpoint).read_bytes()).hexdigest()
        self.data_root = Path(data_root) if data_root else None
        self.eval_manifest = None
        if self.data_root is not None:
            try:
                self.eval_manifest = load_manifest(self.data_root, "eval")
            except FileNotFoundError:
                self.eval_manifest = None
        self.log_path = Path(log_path) if log_path else None
        self._log_lock = threading.Lock()

    def log_request(self, record: dict) -> None:
        if self.log_path is None:
            return
        with self._log_lock:
            with open(self.log_path, "a") as f:
                f.write(json.dumps(record) + "\n")


def _decode_image(b64: str) -> np.ndarray:
    try:
        raw = base64.b64decode(b64, validate=True)
        img = Image.open(io.BytesIO(raw)).convert("RGB")
    except Exception as e:
        raise HTTPException(status_code=400, detail=f"undecodable image: {e}") from e
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.shape[0] % 32 or arr.shape[1] % 32:
        raise HTTPException(status_code=400, detail="image dims must be divisible by 32")
    return arr


def _to_prompt(p, w: int, h: int) -> Prompt:
    if p.type == "point":
        if not (0 <= p.x <= w and 0 <= p.y <= h):
            raise HTTPException(status_code=400, detail=f"point ({p.x},{p.y}) outside image")
        return Prompt.point(p.x, p.y, p.is_fg)
    if not (0 <= p.x1 < p.x2 <= w and 0 <= p.y1 < p.y2 <= h):
        raise HTTPException(status_code=400, detail="box coords invalid or outside image")
    return Prompt.box(p.x1, p.y1, p.x2, p.y2)


def create_app(
    checkpoint: Path | str,
    data_root: Path | str | None = None,
    log_path: Path | str | None = None,
    static_dir: Path | str | None = None,
) -> FastAPI:
    state = ServiceState(Path(checkpoint), data_root, log_path)
    app = FastAPI(title="ovsam")
    app.state.service = state

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "checkpoint": state.checkpoint_hash}

    @app.get("/v1/classes")
    def classes():
        vocab = state.model.vocab
        return [
            {"id": i, "name": vocab.names[i], "is_base": bool(vocab.is_base[i])}
            for i in range(len(vocab))
        ]

    @app.get("/v1/samples/{n}")
    def sample(n: int):
        if state.eval_manifest is None:
            raise HTTPException(status_code=503, detail="no eval data root configured")
        if not (0 <= n < len(state.eval_manifest)):
            raise HTTPException(status_code=404, detail=f"sample {n} out of range")
        return FileResponse(state.eval_manifest.scene_path(n), media_type="image/png")

    @app.post("/v1/segment", response_model=SegmentResponse)
    def segment(req: SegmentRequest):
        t0 = time.monotonic()
        if req.image is not None:
            image = _decode_image(req.image)
        elif req.sample_id is not None:
            if state.eval_manifest is None:
                raise HTTPException(status_code=503, detail="no eval data root configured")
            if not (0 <= req.sample_id < len(state.eval_manifest)):
                raise HTTPException(status_code=404, detail="sample_id out of range")
            from .synthdata import load_scene_image

            image = load_scene_image(state.eval_manifest.scene_path(req.sample_id))
        else:
            raise HTTPException(status_code=400, detail="need image or sample_id")
        h, w = image.shape[:2]
        prompts = [_to_prompt(p, w, h) for p in req.prompts]
        results = state.model.segment(image, prompts)
        out = []
        vocab = state.model.vocab
        for r in results:
            dist = r.fused if req.fusion else r.learned
            order = np.argsort(-dist.probs)[: max(1, req.topk)]
            out.append(
                PromptResponse(
                    mask_rle=rle_encode(r.mask),
                    box=[float(v) for v in r.region_box],
                    label=vocab.names[int(order[0])],
                    score=float(dist.probs[int(order[0])]),
                    iou_pred=r.iou_pred,
                    topk=[
                        {"label": vocab.names[int(i)], "score": float(dist.probs[int(i)])}
                        for i in order
                    ],
                    flags={
                        "fallback_box": r.fallback_box,
                        "degenerate_mask": r.degenerate_mask,
                    },
                )
            )
        state.log_request(
            {
                "ts": time.time(),
                "n_prompts": len(prompts),
                "fusion": req.fusion,
                "duration_s": round(time.monotonic() - t0, 4),
            }
        )
        return SegmentResponse(width=w, height=h, results=out)

    static = Path(static_dir) if static_dir else None
    if static and static.is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=static, html=True), name="demo")
    return app


def run_server(
    host: str = "127.0.0.1",
    port: int = 8000,
    checkpoint: Path | str | None = None,
    data_root: Path | str | None = None,
    static_dir: Path | str | None = None,
) -> None:
    import uvicorn

    checkpoint = checkpoint or os.environ.get("OVSAM_CHECKPOINT")
    if not checkpoint:
        raise ValueError("no checkpoint given (flag or OVSAM_CHECKPOINT)")
    port = int(os.environ.get("OVSAM_PORT", port))
    log_path = Path(checkpoint).with_name("requests.jsonl")
    app = create_app(checkpoint, data_root, log_path, static_dir)
    uvicorn.run(app, host=host, port=port)
