"""Interactive retrieval service: per-stroke sessions over HTTP.

The service is a thin adapter: a `SessionEngine` (plain Python, usable
offline) owns every numeric decision, and the HTTP layer only parses JSON,
routes, and serialises the engine's answers.  Replaying a recorded stroke
sequence through HTTP therefore reproduces the offline trace exactly.
"""

from __future__ import annotations

import json
import re
import threading
import uuid
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .models import RasterEncoder, StrokeHierEncoder, canvas_batch
from .ranking import Gallery, build_gallery, rank_of, ranking_percentile
from .sketch import Stroke, rasterize, rdp_simplify, sketch_from_arrays
from .subset import retrievability_score


class SessionEngine:
    """Accumulates strokes and re-ranks the gallery after each one.

    Every response field comes from the primary modules: ranks from the
    frozen encoder + gallery, retrievability from the selector's value head,
    per-stroke select probabilities from its policy head.
    """

    def __init__(self, encoder: RasterEncoder, gallery: Gallery,
                 instances=None, selector: StrokeHierEncoder | None = None,
                 topk: int = 5, rdp_epsilon: float = 0.01, target_id=None):
        self.encoder = encoder
        self.gallery = gallery
        self.selector = selector
        self.topk = topk
        self.rdp_epsilon = rdp_epsilon
        self.target_id = int(target_id) if target_id is not None else None
        if self.target_id is not None:
            gallery.row_of(self.target_id)  # validate early
        self.photos = {}
        if instances:
            self.photos = {int(i.instance_id): i.photo for i in instances}
        self.strokes: list[np.ndarray] = []
        self.history: list[dict] = []
        self.lock = threading.Lock()

    def _preprocess(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 1:
            raise ValueError("a stroke needs at least one point")
        pts = np.clip(pts, 0.0, 1.0)
        if len(pts) >= 2 and self.rdp_epsilon > 0:
            stroke = rdp_simplify(
                sketch_from_arrays([pts]).strokes[0], self.rdp_epsilon)
            pts = stroke.coords()
        return pts

    def add_stroke(self, points) -> dict:
        with self.lock:
            self.strokes.append(self._preprocess(points))
            entry = self._evaluate()
            self.history.append(entry)
            return entry

    def undo(self) -> dict:
        with self.lock:
            if not self.strokes:
                raise IndexError("no stroke to undo")
            self.strokes.pop()
            self.history.pop()
            return {"strokes": len(self.strokes)}

    def _evaluate(self) -> dict:
        sketch = sketch_from_arrays(self.strokes)
        canvas = rasterize(sketch, self.encoder.height, self.encoder.width)
        with ad.no_grad():
            emb = self.encoder.embed(canvas_batch([canvas])).data[0]
        d = np.linalg.norm(self.gallery.embeddings - emb[None, :], axis=1)
        order = np.lexsort((np.arange(len(d)), d))
        top_ids = [int(self.gallery.instance_ids[i])
                   for i in order[:min(self.topk, len(order))]]
        rank = None
        percentile = None
        if self.target_id is not None:
            rank = int(np.flatnonzero(
                order == self.gallery.row_of(self.target_id))[0]) + 1
            percentile = 100.0 * ranking_percentile(rank, len(self.gallery))
        retrievability = None
        select_probs = []
        if self.selector is not None:
            retrievability = retrievability_score(sketch, self.selector)
            with ad.no_grad():
                _, probs = self.selector.forward(sketch)
            select_probs = [float(p) for p in probs.data[:, 0]]
        return {
            "topk": top_ids,
            "rank": rank,
            "rank_percentile": percentile,
            "rank_list": [int(i) for i in order],
            "retrievability": retrievability,
            "stroke_select_prob": select_probs,
        }


def replay_strokes(engine_factory, stroke_sequences, target_id=None) -> list[dict]:
    """Offline replay of recorded strokes through a fresh engine."""
    engine = engine_factory(target_id=target_id) if target_id is not None \
        else engine_factory()
    return [engine.add_stroke(points) for points in stroke_sequences]


class ServiceState:
    def __init__(self, engine_factory, photos: dict, ui_dir=None):
        self.engine_factory = engine_factory
        self.photos = photos
        self.sessions: dict[str, SessionEngine] = {}
        self.ui_dir = Path(ui_dir) if ui_dir else None
        self.lock = threading.Lock()

    def create_session(self, target_id=None) -> str:
        sid = uuid.uuid4().hex[:12]
        with self.lock:
            self.sessions[sid] = self.engine_factory(target_id=target_id)
        return sid


def make_handler(state: ServiceState):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def _send(self, code, payload: bytes, ctype="application/json"):
            self.send_response(code)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def _json(self, code, obj):
            self._send(code, json.dumps(obj).encode("utf-8"))

        def _body(self):
            length = int(self.headers.get("Content-Length", 0))
            return json.loads(self.rfile.read(length) or b"{}")

        def do_GET(self):
            if self.path == "/healthz":
                self._send(200, b"ok", "text/plain")
                return
            if self.path == "/gallery":
                self._json(200, {"instance_ids": sorted(state.photos)})
                return
            m = re.fullmatch(r"/gallery/(\d+)\.pgm", self.path)
            if m:
                iid = int(m.group(1))
                photo = state.photos.get(iid)
                if photo is None:
                    self._json(404, {"error": f"unknown instance {iid}"})
                    return
                self._send(200, photo.to_pgm_bytes(), "image/x-portable-graymap")
                return
            if self.path == "/ui" or self.path.startswith("/ui/"):
                self._serve_ui()
                return
            self._json(404, {"error": "not found"})

        def _serve_ui(self):
            if state.ui_dir is None or not state.ui_dir.is_dir():
                self._json(404, {"error": "ui bundle not built"})
                return
            rel = self.path[len("/ui"):].lstrip("/") or "index.html"
            target = (state.ui_dir / rel).resolve()
            if not str(target).startswith(str(state.ui_dir.resolve())) \
                    or not target.is_file():
                self._json(404, {"error": "not found"})
                return
            ctype = {"html": "text/html", "js": "text/javascript",
                     "css": "text/css"}.get(target.suffix.lstrip("."),
                                            "application/octet-stream")
            self._send(200, target.read_bytes(), ctype)

        def do_POST(self):
            if self.path == "/session":
                try:
                    body = self._body()
                    target = body.get("target_id")
                    sid = state.create_session(target_id=target)
                except (KeyError, ValueError, json.JSONDecodeError) as e:
                    self._json(400, {"error": f"bad session request: {e}"})
                    return
                self._json(200, {"session_id": sid})
                return
            m = re.fullmatch(r"/session/([0-9a-f]+)/stroke", self.path)
            if m:
                engine = state.sessions.get(m.group(1))
                if engine is None:
                    self._json(404, {"error": "unknown session"})
                    return
                try:
                    body = self._body()
                    points = body["points"]
                    entry = engine.add_stroke(points)
                except (KeyError, ValueError, json.JSONDecodeError) as e:
                    self._json(400, {"error": f"malformed stroke: {e}"})
                    return
                self._json(200, entry)
                return
            self._json(404, {"error": "not found"})

        def do_DELETE(self):
            m = re.fullmatch(r"/session/([0-9a-f]+)/stroke", self.path)
            if m:
                engine = state.sessions.get(m.group(1))
                if engine is None:
                    self._json(404, {"error": "unknown session"})
                    return
                try:
                    self._json(200, engine.undo())
                except IndexError as e:
                    self._json(400, {"error": str(e)})
                return
            self._json(404, {"error": "not found"})

    return Handler


def build_service(model_dir, dataset=None, port: int = 8008, topk: int = 5,
                  rdp_epsilon: float = 0.01, ui_dir=None):
    """Assemble server state from a run directory's checkpoints.

    `model_dir` must hold encoder.ckpt (and optionally selector.ckpt); the
    gallery comes from `dataset` (instances) or the directory's dataset dump.
    """
    from .runner import load_model
    from .synthetic import load_dataset

    model_dir = Path(model_dir)
    encoder = load_model(model_dir / "encoder.ckpt")
    selector = None
    if (model_dir / "selector.ckpt").exists():
        selector = load_model(model_dir / "selector.ckpt")
    if dataset is None:
        dataset = load_dataset(model_dir / "dataset")
    gallery = build_gallery(encoder, dataset)
    photos = {int(i.instance_id): i.photo for i in dataset}
    if ui_dir is None:
        candidate = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        ui_dir = candidate if candidate.is_dir() else None

    def factory(target_id=None):
        return SessionEngine(encoder, gallery, dataset, selector=selector,
                             topk=topk, rdp_epsilon=rdp_epsilon,
                             target_id=target_id)

    state = ServiceState(factory, photos, ui_dir=ui_dir)
    server = ThreadingHTTPServer(("127.0.0.1", port), make_handler(state))
    return server, state


def serve_forever(model_dir, dataset=None, port: int = 8008, **kw):
    server, _ = build_service(model_dir, dataset=dataset, port=port, **kw)
    print(f"serving on http://127.0.0.1:{server.server_address[1]}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
