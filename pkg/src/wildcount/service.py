"""HTTP review service: the flagged-patch work queue, patch pixels and
detection overlays, decision recording with full audit history, live survey
summaries, and exports feeding retraining and hard-negative mining."""

from __future__ import annotations

import io
import os
from pathlib import Path
from typing import Literal

import numpy as np
from fastapi import Depends, FastAPI, Header, HTTPException, Query, Response
from PIL import Image
from pydantic import BaseModel, Field, model_validator

from .geo import crop_patch, parse_patch_id
from .store import ReviewStore, load_run_directory

DEFAULT_PORT = 8787


class ReviewDecisionBody(BaseModel):
    reviewer: str = Field(min_length=1)
    verdict: Literal["accept", "reject", "corrected"]
    corrected_points: list[tuple[float, float]] | None = None

    @model_validator(mode="after")
    def _points_iff_corrected(self):
        if (self.verdict == "corrected") != (self.corrected_points is not None):
            raise ValueError("corrected_points must be present exactly when "
                             "verdict is 'corrected'")
        return self


def create_app(store: ReviewStore, token: str | None = None) -> FastAPI:
    app = FastAPI(title="wildcount review service")

    def require_token(authorization: str | None = Header(default=None)):
        if token is None:
            return
        if authorization != f"Bearer {token}":
            raise HTTPException(status_code=401, detail="bad or missing token")

    auth = Depends(require_token)

    def _get_patch_or_404(patch_id: str):
        row = store.get_patch(patch_id)
        if row is None:
            raise HTTPException(status_code=404, detail=f"unknown patch {patch_id}")
        return row

    @app.get("/api/patches", dependencies=[auth])
    def list_patches(status: str = Query("pending"),
                     sort: str = Query("probability"),
                     page: int = Query(1, ge=1),
                     page_size: int = Query(50, ge=1, le=500)):
        if status not in ("pending", "decided", "all"):
            raise HTTPException(status_code=422, detail="bad status filter")
        items, total = store.list_patches(status=status, sort=sort, page=page,
                                          page_size=page_size)
        return {"items": items, "total": total, "page": page, "page_size": page_size}

    @app.get("/api/patches/{patch_id:path}/image", dependencies=[auth])
    def patch_image(patch_id: str):
        row = _get_patch_or_404(patch_id)
        image_row = store.get_image(row["image_id"])
        if image_row is None:
            raise HTTPException(status_code=404, detail="parent image unknown")
        image = np.asarray(Image.open(image_row["path"]))
        crop = crop_patch(image, (row["x0"], row["y0"]), row["size"])
        buf = io.BytesIO()
        Image.fromarray(crop).save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.get("/api/patches/{patch_id:path}/detections", dependencies=[auth])
    def patch_detections(patch_id: str):
        _get_patch_or_404(patch_id)
        return {"patch_id": patch_id, "points": store.patch_detections(patch_id)}

    @app.get("/api/patches/{patch_id:path}/decisions", dependencies=[auth])
    def patch_decisions(patch_id: str):
        _get_patch_or_404(patch_id)
        history = [
            {"id": row["id"], "reviewer": row["reviewer"], "verdict": row["verdict"],
             "corrected_points": row["corrected_points"],
             "created_at": row["created_at"], "revoked": bool(row["revoked"]),
             "on_unflagged": bool(row["on_unflagged"])}
            for row in store.decision_history(patch_id)]
        return {"patch_id": patch_id, "history": history}

    @app.post("/api/patches/{patch_id:path}/review", status_code=201,
              dependencies=[auth])
    def post_review(patch_id: str, body: ReviewDecisionBody):
        if store.get_patch(patch_id) is None:
            _create_override_row(store, patch_id)
        try:
            decision_id = store.record_decision(patch_id, body.reviewer, body.verdict,
                                                body.corrected_points)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown patch {patch_id}")
        return {"decision_id": decision_id, "patch_id": patch_id,
                "verdict": body.verdict}

    @app.delete("/api/patches/{patch_id:path}/review", dependencies=[auth])
    def undo_review(patch_id: str):
        _get_patch_or_404(patch_id)
        undone = store.revoke_latest_decision(patch_id)
        if not undone:
            raise HTTPException(status_code=404, detail="no active decision to undo")
        active = store.active_decision(patch_id)
        return {"patch_id": patch_id,
                "active_verdict": active["verdict"] if active else None}

    @app.get("/api/summary", dependencies=[auth])
    def summary():
        return store.summary().to_json()

    @app.get("/api/export/annotations", dependencies=[auth])
    def export_annotations():
        points = store.export_annotations()
        lines = ["image_id,x,y,lon,lat"]
        lines += [f"{p.image_id},{p.x},{p.y},," for p in points]
        return Response(content="\n".join(lines) + "\n", media_type="text/csv")

    @app.get("/api/export/hnp-candidates", dependencies=[auth])
    def export_hnp_candidates():
        return {"patches": store.hnp_candidates()}

    # static frontend, when built
    dist = Path(os.environ.get("REVIEW_UI_DIST", "frontend/dist"))
    if dist.is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=str(dist), html=True), name="ui")

    return app


def _create_override_row(store: ReviewStore, patch_id: str) -> None:
    """Manual-override path: a decision on a patch outside the flagged queue
    is allowed when the id parses against a known parent image; the row is
    created unflagged so the decision lands in the audit log marked as an
    override."""
    try:
        image_id, origin = parse_patch_id(patch_id)
    except ValueError:
        raise HTTPException(status_code=404, detail=f"unknown patch {patch_id}")
    image_row = store.get_image(image_id)
    if image_row is None:
        raise HTTPException(status_code=404, detail=f"unknown patch {patch_id}")
    run = store.get_meta("run", {})
    size = int(run.get("patch_size", 512))
    width, height = image_row["width"], image_row["height"]
    if width is not None and (origin[0] < 0 or origin[0] + size > max(width, size)
                              or origin[1] < 0 or origin[1] + size > max(height, size)):
        raise HTTPException(status_code=404, detail=f"patch outside image extent")
    store.add_patch(patch_id, image_id, origin, size, probability=None, flagged=False)


def serve(run_dir: str | Path, db_path: str | Path | None = None,
          host: str = "127.0.0.1", port: int | None = None,
          token: str | None = None) -> None:
    """Load a run directory and serve the review API (blocking)."""
    import uvicorn

    run_dir = Path(run_dir)
    db = Path(db_path) if db_path else run_dir / "review.sqlite"
    fresh = not Path(db).exists()
    store = ReviewStore(db)
    if fresh:
        load_run_directory(store, run_dir)
    token = token if token is not None else os.environ.get("REVIEW_TOKEN")
    port = port or int(os.environ.get("PORT", DEFAULT_PORT))
    uvicorn.run(create_app(store, token=token), host=host, port=port)
