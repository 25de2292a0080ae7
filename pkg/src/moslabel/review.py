"""HTTP review service for human label refinement.

Serves the synchronized frames and their current annotations to a browser
client, accepts per-instance or per-point relabel edits, and persists every
accepted edit to an append-only log that the export stage folds in. State
after a POST is immediately visible to subsequent GETs.
"""

from __future__ import annotations

import json
import logging
import mimetypes
import re
import struct
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from . import dataset
from .dataset import CLASS_DYNAMIC
from .pipeline import EDITS_FILE, EditRecord, append_edit, apply_edits, read_edits

log = logging.getLogger(__name__)


class ReviewState:
    """Annotations, clouds, and tracks behind the endpoints."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        run_record = json.loads((self.out_dir / "run.json").read_text())
        stages = run_record["stages"]
        if "track" not in stages or "sync" not in stages:
            raise FileNotFoundError(
                "run.json lacks sync/track stages; run the pipeline through 'track' first"
            )
        self.sync_dir = Path(stages["sync"]["dir"])
        self.track_dir = Path(stages["track"]["dir"])
        self.tracks = json.loads((self.track_dir / "tracks.json").read_text())
        self.augmented = json.loads((self.track_dir / "augmented.json").read_text())

        self.annotations = {}
        for f in sorted((self.track_dir / "frames").glob("*.classes.npy")):
            t = int(f.name.split(".")[0])
            classes = np.load(f)
            inst = np.load(self.track_dir / "frames" / f"{t:06d}.inst.npy")
            from .detection import ScanAnnotation

            self.annotations[t] = ScanAnnotation(t, classes, inst)
        self.edits = read_edits(self.out_dir / EDITS_FILE)
        if self.edits:
            self.annotations = apply_edits(self.annotations, self.edits)
        self._points_cache: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()

    def frames(self) -> list[dict]:
        out = []
        for t, ann in sorted(self.annotations.items()):
            out.append(
                {
                    "frame": t,
                    "points": int(len(ann)),
                    "dynamic": int((ann.classes == CLASS_DYNAMIC).sum()),
                }
            )
        return out

    def points_payload(self, frame: int) -> bytes:
        """uint32 count, then per point x,y,z float32 LE + uint32 label."""
        ann = self.annotations[frame]
        with self._lock:
            pts = self._points_cache.get(frame)
            if pts is None:
                pts = np.load(self.sync_dir / "frames" / f"{frame:06d}.points.npy")
                self._points_cache[frame] = pts
        labels = dataset.pack_labels(ann.classes, ann.instance_ids)
        record = np.zeros((len(ann), 4), dtype="<u4")
        record[:, :3] = pts.astype("<f4").view("<u4")
        record[:, 3] = labels
        return struct.pack("<I", len(ann)) + record.tobytes()

    def frame_tracks(self, frame: int) -> dict:
        tracks = [
            tr
            for tr in self.tracks
            if any(o["frame"] == frame for o in tr["observations"])
        ]
        boxes = [b for b in self.augmented if b["frame"] == frame]
        return {"tracks": tracks, "augmented": boxes}

    def submit_edit(self, frame: int, body: dict) -> dict:
        with self._lock:
            edit = EditRecord(
                frame=frame,
                new_class=body.get("new_class", ""),
                instance_id=body.get("instance_id"),
                point_indices=tuple(body["point_indices"]) if "point_indices" in body else None,
                note=body.get("note", ""),
                timestamp=time.time(),
            )
            # Validates scope; raises on unknown instance or bad indices.
            self.annotations = apply_edits(self.annotations, [edit])
            append_edit(self.out_dir / EDITS_FILE, edit)
            self.edits.append(edit)
            return {"ok": True, "edit_index": len(self.edits) - 1}

    def summary(self) -> dict:
        total = sum(len(a) for a in self.annotations.values())
        dynamic = sum(int((a.classes == CLASS_DYNAMIC).sum()) for a in self.annotations.values())
        return {
            "frames": len(self.annotations),
            "total_points": total,
            "dynamic_points": dynamic,
            "edits": len(self.edits),
        }


_FRAME_ROUTE = re.compile(r"^/api/frames/(\d+)/(points|tracks|edits)$")


class _Handler(BaseHTTPRequestHandler):
    state: ReviewState = None
    static_dir: Path | None = None

    def log_message(self, fmt, *args):
        log.debug("review: " + fmt, *args)

    def _send(self, code: int, payload: bytes, content_type: str):
        self.send_response(code)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(payload)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(payload)

    def _json(self, code: int, obj) -> None:
        self._send(code, json.dumps(obj).encode(), "application/json")

    def do_GET(self):
        try:
            if self.path == "/api/frames":
                return self._json(200, self.state.frames())
            if self.path == "/api/summary":
                return self._json(200, self.state.summary())
            m = _FRAME_ROUTE.match(self.path)
            if m:
                frame, what = int(m.group(1)), m.group(2)
                if frame not in self.state.annotations:
                    return self._json(404, {"error": f"unknown frame {frame}"})
                if what == "points":
                    return self._send(200, self.state.points_payload(frame), "application/octet-stream")
                if what == "tracks":
                    return self._json(200, self.state.frame_tracks(frame))
            return self._serve_static()
        except Exception as exc:  # surface the reason, never a stack-only 500
            log.exception("review GET failed")
            self._json(500, {"error": str(exc)})

    def do_POST(self):
        try:
            m = _FRAME_ROUTE.match(self.path)
            if not (m and m.group(2) == "edits"):
                return self._json(404, {"error": "unknown endpoint"})
            frame = int(m.group(1))
            if frame not in self.state.annotations:
                return self._json(404, {"error": f"unknown frame {frame}"})
            length = int(self.headers.get("Content-Length", 0))
            try:
                body = json.loads(self.rfile.read(length) or b"{}")
                result = self.state.submit_edit(frame, body)
            except (ValueError, KeyError) as exc:
                return self._json(400, {"error": str(exc)})
            return self._json(200, result)
        except Exception as exc:
            log.exception("review POST failed")
            self._json(500, {"error": str(exc)})

    def _serve_static(self):
        root = self.static_dir
        if root is None:
            return self._json(404, {"error": "no static files configured"})
        rel = self.path.lstrip("/") or "index.html"
        target = (root / rel).resolve()
        if not str(target).startswith(str(root.resolve())) or not target.is_file():
            return self._json(404, {"error": f"not found: {self.path}"})
        ctype = mimetypes.guess_type(target.name)[0] or "application/octet-stream"
        self._send(200, target.read_bytes(), ctype)


def serve_review(out_dir, address: str = "127.0.0.1:8871", static_dir=None) -> ThreadingHTTPServer:
    """Start the review server (non-blocking); caller owns shutdown."""
    host, _, port = address.partition(":")
    state = ReviewState(out_dir)
    handler = type("BoundHandler", (_Handler,), {
        "state": state,
        "static_dir": Path(static_dir) if static_dir else None,
    })
    server = ThreadingHTTPServer((host, int(port or 0)), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    log.info("review service on http://%s:%d", *server.server_address)
    return server
