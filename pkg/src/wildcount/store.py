"""Embedded transactional store for the review workflow.

A single sqlite file holds the flagged-patch queue, per-patch model
detections, and the full decision history. The active decision for a patch
is the latest non-revoked one: posting supersedes, undo revokes back to the
prior state, and every row stays in the audit trail.
"""

from __future__ import annotations

import json
import sqlite3
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .geo import PointAnnotation

VERDICTS = ("accept", "reject", "corrected")


@dataclass
class SurveySummary:
    images: dict[str, dict]
    total_raw: int
    total_reviewed: int
    flagged: int
    decided: int

    @property
    def progress(self) -> float:
        return self.decided / self.flagged if self.flagged else 0.0

    def to_json(self) -> dict:
        return {"images": self.images, "total_raw": self.total_raw,
                "total_reviewed": self.total_reviewed, "flagged": self.flagged,
                "decided": self.decided, "progress": self.progress}


_SCHEMA = """
CREATE TABLE IF NOT EXISTS patches (
    patch_id TEXT PRIMARY KEY,
    image_id TEXT NOT NULL,
    x0 INTEGER NOT NULL,
    y0 INTEGER NOT NULL,
    size INTEGER NOT NULL,
    probability REAL,
    flagged INTEGER NOT NULL DEFAULT 1
);
CREATE TABLE IF NOT EXISTS detections (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    patch_id TEXT NOT NULL REFERENCES patches(patch_id),
    x REAL NOT NULL,
    y REAL NOT NULL,
    confidence REAL NOT NULL
);
CREATE TABLE IF NOT EXISTS decisions (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    patch_id TEXT NOT NULL REFERENCES patches(patch_id),
    reviewer TEXT NOT NULL,
    verdict TEXT NOT NULL,
    corrected_points TEXT,
    created_at TEXT NOT NULL,
    revoked INTEGER NOT NULL DEFAULT 0,
    on_unflagged INTEGER NOT NULL DEFAULT 0
);
CREATE TABLE IF NOT EXISTS images (
    image_id TEXT PRIMARY KEY,
    path TEXT NOT NULL,
    width INTEGER,
    height INTEGER
);
CREATE TABLE IF NOT EXISTS meta (
    key TEXT PRIMARY KEY,
    value TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS idx_det_patch ON detections(patch_id);
CREATE INDEX IF NOT EXISTS idx_dec_patch ON decisions(patch_id, revoked, id);
"""


class ReviewStore:
    def __init__(self, path: str | Path = ":memory:"):
        self.path = str(path)
        self.conn = sqlite3.connect(self.path, check_same_thread=False)
        self.conn.row_factory = sqlite3.Row
        self._lock = threading.Lock()
        with self.conn:
            self.conn.executescript(_SCHEMA)

    def close(self) -> None:
        self.conn.close()

    # -- ingest ------------------------------------------------------------

    def set_meta(self, key: str, value) -> None:
        with self._lock, self.conn:
            self.conn.execute("INSERT OR REPLACE INTO meta VALUES (?, ?)",
                              (key, json.dumps(value)))

    def get_meta(self, key: str, default=None):
        row = self.conn.execute("SELECT value FROM meta WHERE key=?", (key,)).fetchone()
        return json.loads(row["value"]) if row else default

    def add_image(self, image_id: str, path: str, width: int | None = None,
                  height: int | None = None) -> None:
        with self._lock, self.conn:
            self.conn.execute("INSERT OR REPLACE INTO images VALUES (?,?,?,?)",
                              (image_id, path, width, height))

    def get_image(self, image_id: str):
        return self.conn.execute("SELECT * FROM images WHERE image_id=?",
                                 (image_id,)).fetchone()

    def add_patch(self, patch_id: str, image_id: str, origin: tuple[int, int],
                  size: int, probability: float | None, flagged: bool = True) -> None:
        with self._lock, self.conn:
            self.conn.execute(
                "INSERT OR IGNORE INTO patches VALUES (?,?,?,?,?,?,?)",
                (patch_id, image_id, origin[0], origin[1], size, probability,
                 int(flagged)))

    def add_detection(self, patch_id: str, x: float, y: float, confidence: float) -> None:
        with self._lock, self.conn:
            self.conn.execute(
                "INSERT INTO detections (patch_id, x, y, confidence) VALUES (?,?,?,?)",
                (patch_id, x, y, confidence))

    # -- queue -------------------------------------------------------------

    def get_patch(self, patch_id: str):
        return self.conn.execute("SELECT * FROM patches WHERE patch_id=?",
                                 (patch_id,)).fetchone()

    def active_decision(self, patch_id: str):
        return self.conn.execute(
            "SELECT * FROM decisions WHERE patch_id=? AND revoked=0 "
            "ORDER BY id DESC LIMIT 1", (patch_id,)).fetchone()

    def decision_history(self, patch_id: str) -> list[sqlite3.Row]:
        return self.conn.execute(
            "SELECT * FROM decisions WHERE patch_id=? ORDER BY id",
            (patch_id,)).fetchall()

    def list_patches(self, status: str = "pending", sort: str = "probability",
                     page: int = 1, page_size: int = 50) -> tuple[list[dict], int]:
        """Queue of flagged patches. status: pending (no active decision),
        decided, or all. Sorted by descending probability by default."""
        rows = self.conn.execute(
            "SELECT * FROM patches WHERE flagged=1").fetchall()
        items = []
        for row in rows:
            decision = self.active_decision(row["patch_id"])
            if status == "pending" and decision is not None:
                continue
            if status == "decided" and decision is None:
                continue
            items.append(self._patch_view(row, decision))
        if sort == "probability":
            items.sort(key=lambda r: (-(r["probability"] if r["probability"] is not None
                                        else -1.0), r["patch_id"]))
        elif sort == "patch_id":
            items.sort(key=lambda r: r["patch_id"])
        total = len(items)
        start = (page - 1) * page_size
        return items[start:start + page_size], total

    def _patch_view(self, row: sqlite3.Row, decision=None) -> dict:
        n_det = self.conn.execute(
            "SELECT COUNT(*) AS n FROM detections WHERE patch_id=?",
            (row["patch_id"],)).fetchone()["n"]
        decision = decision or self.active_decision(row["patch_id"])
        return {
            "patch_id": row["patch_id"], "image_id": row["image_id"],
            "origin": [row["x0"], row["y0"]], "size": row["size"],
            "probability": row["probability"], "flagged": bool(row["flagged"]),
            "n_detections": n_det,
            "verdict": decision["verdict"] if decision else None,
        }

    def patch_detections(self, patch_id: str) -> list[dict]:
        rows = self.conn.execute(
            "SELECT x, y, confidence FROM detections WHERE patch_id=? ORDER BY id",
            (patch_id,)).fetchall()
        return [{"x": r["x"], "y": r["y"], "confidence": r["confidence"]} for r in rows]

    # -- decisions ----------------------------------------------------------

    def record_decision(self, patch_id: str, reviewer: str, verdict: str,
                        corrected_points: Sequence[tuple[float, float]] | None,
                        ) -> int:
        if verdict not in VERDICTS:
            raise ValueError(f"verdict must be one of {VERDICTS}")
        if (verdict == "corrected") != (corrected_points is not None):
            raise ValueError("corrected_points present iff verdict is corrected")
        patch = self.get_patch(patch_id)
        if patch is None:
            raise KeyError(patch_id)
        payload = json.dumps([[float(x), float(y)] for x, y in corrected_points]) \
            if corrected_points is not None else None
        stamp = datetime.now(timezone.utc).isoformat()
        with self._lock, self.conn:
            cur = self.conn.execute(
                "INSERT INTO decisions (patch_id, reviewer, verdict, corrected_points,"
                " created_at, on_unflagged) VALUES (?,?,?,?,?,?)",
                (patch_id, reviewer, verdict, payload, stamp,
                 0 if patch["flagged"] else 1))
            return int(cur.lastrowid)

    def revoke_latest_decision(self, patch_id: str) -> bool:
        """Undo: revoke the active decision so the prior one (or pending
        state) becomes active again. History is retained."""
        active = self.active_decision(patch_id)
        if active is None:
            return False
        with self._lock, self.conn:
            self.conn.execute("UPDATE decisions SET revoked=1 WHERE id=?",
                              (active["id"],))
        return True

    # -- aggregation ---------------------------------------------------------

    def _patch_reviewed_count(self, patch_id: str, raw: int) -> int:
        decision = self.active_decision(patch_id)
        if decision is None or decision["verdict"] == "accept":
            return raw
        if decision["verdict"] == "reject":
            return 0
        return len(json.loads(decision["corrected_points"]))

    def summary(self) -> SurveySummary:
        images: dict[str, dict] = {}
        total_raw = total_reviewed = 0
        for row in self.conn.execute("SELECT * FROM patches").fetchall():
            raw = self.conn.execute(
                "SELECT COUNT(*) AS n FROM detections WHERE patch_id=?",
                (row["patch_id"],)).fetchone()["n"]
            reviewed = self._patch_reviewed_count(row["patch_id"], raw)
            entry = images.setdefault(row["image_id"], {"raw": 0, "reviewed": 0})
            entry["raw"] += raw
            entry["reviewed"] += reviewed
            total_raw += raw
            total_reviewed += reviewed
        flagged = self.conn.execute(
            "SELECT COUNT(*) AS n FROM patches WHERE flagged=1").fetchone()["n"]
        decided = sum(
            1 for row in self.conn.execute(
                "SELECT patch_id FROM patches WHERE flagged=1").fetchall()
            if self.active_decision(row["patch_id"]) is not None)
        return SurveySummary(images=images, total_raw=total_raw,
                             total_reviewed=total_reviewed, flagged=flagged,
                             decided=decided)

    def export_annotations(self) -> list[PointAnnotation]:
        """Reviewed state as global-frame annotations in the standard CSV
        vocabulary: accepted and pending patches keep their model detections,
        rejected patches export nothing, corrected patches export the
        corrected points."""
        out: list[PointAnnotation] = []
        for row in self.conn.execute("SELECT * FROM patches ORDER BY patch_id"):
            decision = self.active_decision(row["patch_id"])
            x0, y0 = row["x0"], row["y0"]
            if decision is not None and decision["verdict"] == "reject":
                continue
            if decision is not None and decision["verdict"] == "corrected":
                pts = json.loads(decision["corrected_points"])
                out.extend(PointAnnotation(row["image_id"], x0 + x, y0 + y)
                           for x, y in pts)
            else:
                out.extend(PointAnnotation(row["image_id"], x0 + d["x"], y0 + d["y"])
                           for d in self.patch_detections(row["patch_id"]))
        return out

    def hnp_candidates(self) -> list[dict]:
        """Rejected patches: animal-free tiles on which the model fired,
        ready to join the hard-negative mining pool."""
        out = []
        for row in self.conn.execute("SELECT * FROM patches ORDER BY patch_id"):
            decision = self.active_decision(row["patch_id"])
            if decision is not None and decision["verdict"] == "reject":
                out.append({"patch_id": row["patch_id"], "image_id": row["image_id"],
                            "origin": [row["x0"], row["y0"]], "size": row["size"]})
        return out


def assign_detections_to_patches(detections: Sequence[tuple[float, float, float]],
                                 origins: Sequence[tuple[int, int]],
                                 patch_size: int) -> dict[tuple[int, int], list]:
    """Give each global detection exactly one owning patch: among the tiling
    patches containing it, the one whose center is nearest (ties resolved by
    origin order). Keeps per-patch counts summing exactly to the global
    count."""
    owners: dict[tuple[int, int], list] = {}
    centers = [(x0 + patch_size / 2.0, y0 + patch_size / 2.0) for x0, y0 in origins]
    for x, y, conf in detections:
        best, best_d = None, np.inf
        for (x0, y0), (cx, cy) in zip(origins, centers):
            if x0 <= x < x0 + patch_size and y0 <= y < y0 + patch_size:
                d = (x - cx) ** 2 + (y - cy) ** 2
                if d < best_d:
                    best, best_d = (x0, y0), d
        if best is not None:
            owners.setdefault(best, []).append((x - best[0], y - best[1], conf))
    return owners


def load_run_directory(store: ReviewStore, run_dir: str | Path) -> None:
    """Populate the store from a prescreen/infer run directory containing
    run_meta.json plus flags.jsonl and/or detections.csv."""
    from .geo import tile_image
    from .infer import read_detections_csv, read_flagged_jsonl

    run = Path(run_dir)
    with open(run / "run_meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    patch_size = int(meta["patch_size"])
    overlap_px = int(meta["overlap_px"])
    store.set_meta("run", {"patch_size": patch_size, "overlap_px": overlap_px,
                           "tau": meta.get("tau"), "source": str(run)})
    for image_id, entry in meta["images"].items():
        path = entry["path"] if isinstance(entry, dict) else entry
        width = entry.get("width") if isinstance(entry, dict) else None
        height = entry.get("height") if isinstance(entry, dict) else None
        img_path = str((run / path) if not Path(path).is_absolute() else Path(path))
        store.add_image(image_id, img_path, width, height)

    flags_path = run / "flags.jsonl"
    if flags_path.exists():
        for flag in read_flagged_jsonl(flags_path):
            store.add_patch(flag.patch_id, flag.image_id, flag.origin, patch_size,
                            flag.probability, flagged=True)

    det_path = run / "detections.csv"
    if det_path.exists():
        by_image = read_detections_csv(det_path)
        for image_id, dets in by_image.items():
            image = store.get_image(image_id)
            if image is None or image["width"] is None:
                continue
            origins = tile_image(image["width"], image["height"], patch_size,
                                 overlap_px)
            owners = assign_detections_to_patches(
                [(d.x, d.y, d.confidence) for d in dets], origins, patch_size)
            for origin, local in owners.items():
                from .geo import make_patch_id
                pid = make_patch_id(image_id, origin)
                if store.get_patch(pid) is None:
                    store.add_patch(pid, image_id, origin, patch_size,
                                    probability=None, flagged=False)
                for x, y, conf in local:
                    store.add_detection(pid, x, y, conf)
