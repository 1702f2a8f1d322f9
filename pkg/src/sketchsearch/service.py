"""HTTP query service over one weights + index snapshot.

Endpoints:
  POST /query               full / segments / flow retrieval
  GET  /item/{id}/screenshot  PNG thumbnail source
  GET  /healthz             liveness + snapshot fingerprint
  GET  /index/info          corpus size, grid, trace count
  POST /index/reload        admin-token-gated snapshot reload

Queries accept JSON with base64 PNG images (the default) or multipart
form uploads for large flows. Request handling never mutates state: the
encoder weights and index live in an immutable snapshot object that a
reload swaps wholesale, so in-flight queries finish on the snapshot they
started with. The admin token comes from the SWIRE_ADMIN_TOKEN
environment variable; the reload endpoint is disabled when it is unset.
"""

from __future__ import annotations

import base64
import binascii
import io
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel, Field

from . import dataset, encoder, imaging
from . import index as idx
from . import __version__

ADMIN_TOKEN_ENV = "SWIRE_ADMIN_TOKEN"
MAX_K = 100


@dataclass(frozen=True)
class Snapshot:
    pair: encoder.EncoderPair
    store: idx.Index
    screenshots: dict  # item id -> Path
    fingerprint: str


class ServiceState:
    """Reloadable service state; ``snapshot`` rebinding is atomic."""

    def __init__(self, weights_path, index_path, data_dir=None):
        self.weights_path = Path(weights_path)
        self.index_path = Path(index_path)
        self.data_dir = Path(data_dir) if data_dir else None
        self.snapshot = self._load()

    def _load(self) -> Snapshot:
        pair = encoder.load(self.weights_path)
        store = idx.load(self.index_path)
        screenshots = {}
        if self.data_dir is not None:
            manifest = dataset.load_manifest(self.data_dir / "manifest.json", check_files=False)
            for rec in manifest.records:
                screenshots.setdefault(rec.example_id, manifest.resolve(rec.screenshot))
        return Snapshot(pair=pair, store=store, screenshots=screenshots, fingerprint=store.fingerprint())

    def reload(self):
        self.snapshot = self._load()


class QueryBody(BaseModel):
    mode: str = Field(pattern="^(full|segments|flow)$")
    k: int = 10
    image: str | None = None  # base64 PNG
    segments_mask: list[list[bool]] | None = None
    flow: list[str] | None = None  # base64 PNGs, in order


class _BadRequest(Exception):
    def __init__(self, status: int, detail: str):
        self.status = status
        self.detail = detail


def _decode_image(b64: str, field: str) -> np.ndarray:
    try:
        raw = base64.b64decode(b64, validate=True)
    except (binascii.Error, ValueError):
        raise _BadRequest(400, f"{field}: invalid base64")
    try:
        img = imaging.read_image(io.BytesIO(raw))
    except Exception:
        raise _BadRequest(400, f"{field}: not a decodable image")
    if img.ndim == 3:
        img = imaging.to_gray(img)
    return img


def _run_query(snap: Snapshot, mode: str, k: int, image, mask, flow_images) -> dict:
    if not 1 <= k <= MAX_K:
        raise _BadRequest(422, f"k must lie in [1, {MAX_K}]")
    store = snap.store
    t0 = time.perf_counter()

    if mode == "full":
        if image is None:
            raise _BadRequest(422, "full mode requires the image field")
        q = encoder.embed_image(snap.pair.sketch, image)
        hits = store.query_full(q, k=k)
        extras = {h.item_id: {} for h in hits}
    elif mode == "segments":
        if image is None or mask is None:
            raise _BadRequest(422, "segments mode requires image and segments_mask")
        if store.grid is None:
            raise _BadRequest(422, "index was built without part embeddings")
        rows, cols = store.grid
        arr = np.asarray(mask, dtype=object)
        if arr.shape != (rows, cols):
            raise _BadRequest(422, f"segments_mask must be {rows}x{cols} for this index")
        active = [(r, c) for r in range(rows) for c in range(cols) if mask[r][c]]
        if not active:
            raise _BadRequest(422, "segments_mask selects no cells")
        cell_embs = encoder.embed_cells(snap.pair.sketch, image, rows, cols)
        cells = [(r, c, cell_embs[r, c]) for r, c in active]
        hits = store.query_segments(cells, k=k)
        extras = {h.item_id: {} for h in hits}
    else:  # flow
        if not flow_images or len(flow_images) < 2:
            raise _BadRequest(422, "flow mode requires at least 2 images in the flow field")
        seq = [encoder.embed_image(snap.pair.sketch, img) for img in flow_images]
        try:
            hits = store.query_flow(seq, k=k)
        except ValueError as err:
            raise _BadRequest(422, str(err))
        extras = {
            h.item_id: {"items": store.trace_window_items(h.item_id, len(seq))} for h in hits
        }

    latency_ms = (time.perf_counter() - t0) * 1000.0
    results = []
    for h in hits:
        entry = {"id": h.item_id, "distance": h.distance}
        members = extras.get(h.item_id, {}).get("items")
        if members:
            entry["items"] = members
            thumb_id = members[0]
        else:
            thumb_id = h.item_id
        entry["thumbnail"] = (
            f"/item/{thumb_id}/screenshot" if thumb_id in snap.screenshots else None
        )
        results.append(entry)
    return {
        "results": results,
        "latency_ms": latency_ms,
        "index_fingerprint": snap.fingerprint,
    }


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="sketchsearch", version=__version__)

    @app.exception_handler(_BadRequest)
    async def _bad_request_handler(_req, exc: _BadRequest):
        return JSONResponse(status_code=exc.status, content={"detail": exc.detail})

    def _snap() -> Snapshot:
        snap = state.snapshot
        if snap is None:
            raise _BadRequest(503, "index is reloading")
        return snap

    @app.post("/query")
    async def query(request: Request):
        snap = _snap()
        content_type = request.headers.get("content-type", "")
        if content_type.startswith("multipart/form-data"):
            form = await request.form()
            mode = form.get("mode", "full")
            if mode not in ("full", "segments", "flow"):
                raise _BadRequest(422, f"unknown mode {mode!r}")
            try:
                k = int(form.get("k", "10"))
            except ValueError:
                raise _BadRequest(422, "k must be an integer")
            image = mask = None
            flow_images = []
            upload = form.get("image")
            if upload is not None:
                img = imaging.read_image(io.BytesIO(await upload.read()))
                image = imaging.to_gray(img) if img.ndim == 3 else img
            if form.get("segments_mask"):
                import json as _json

                mask = _json.loads(form["segments_mask"])
            for upload in form.getlist("flow"):
                img = imaging.read_image(io.BytesIO(await upload.read()))
                flow_images.append(imaging.to_gray(img) if img.ndim == 3 else img)
            return _run_query(snap, mode, k, image, mask, flow_images or None)

        body = QueryBody.model_validate(await request.json())
        image = _decode_image(body.image, "image") if body.image is not None else None
        flow_images = (
            [_decode_image(b, f"flow[{i}]") for i, b in enumerate(body.flow)] if body.flow else None
        )
        return _run_query(snap, body.mode, body.k, image, body.segments_mask, flow_images)

    @app.get("/item/{item_id}/screenshot")
    def item_screenshot(item_id: str):
        snap = _snap()
        path = snap.screenshots.get(item_id)
        if path is None or not Path(path).exists():
            raise _BadRequest(404, f"unknown item {item_id!r}")
        return Response(content=Path(path).read_bytes(), media_type="image/png")

    @app.get("/healthz")
    def healthz():
        snap = _snap()
        return {"status": "ok", "version": __version__, "index_fingerprint": snap.fingerprint}

    @app.get("/index/info")
    def index_info():
        snap = _snap()
        grid = snap.store.grid
        return {
            "items": len(snap.store),
            "grid": list(grid) if grid is not None else None,
            "traces": len(snap.store.trace_ids),
            "fingerprint": snap.fingerprint,
        }

    @app.post("/index/reload")
    def index_reload(request: Request):
        expected = os.environ.get(ADMIN_TOKEN_ENV)
        if not expected:
            raise _BadRequest(403, f"reload disabled: {ADMIN_TOKEN_ENV} is not set")
        supplied = request.headers.get("x-admin-token")
        if supplied != expected:
            raise _BadRequest(403, "invalid admin token")
        state.reload()
        return {"status": "reloaded", "index_fingerprint": state.snapshot.fingerprint}

    return app


def serve(state: ServiceState, host: str = "127.0.0.1", port: int = 8080):
    """Run the service; SIGHUP triggers a snapshot reload."""
    import signal

    import uvicorn

    def _on_hup(_signum, _frame):
        state.reload()

    try:
        signal.signal(signal.SIGHUP, _on_hup)
    except ValueError:
        pass  # not the main thread
    uvicorn.run(create_app(state), host=host, port=port, log_level="warning")
