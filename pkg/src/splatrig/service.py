"""Local editing service: HTTP/JSON over TCP plus an SSE invalidation feed.

The service owns one :class:`~splatrig.editing.EditSession`. State-mutating
requests (edit, undo, save, export) are serialized through a single lock;
renders snapshot the working poses under the lock and rasterize outside it,
so the service adds no math of its own and its outputs are byte-identical
to direct library calls. The wire schema is versioned (all routes under
``/v1``, negotiated via ``POST /v1/handshake``) and documented in
docs/PROTOCOL.md.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Dict, List, Optional
from urllib.parse import parse_qs, urlparse

import numpy as np

from .editing import EditCommand, EditSession
from .io_formats import SceneDocument, export_bvh, save_scene
from .kinematics import forward_kinematics, smooth_poses
from .render import CameraSpec, camera_from_orbit, frame_to_png_bytes, render_sequence
from .scene_core import GaussianCloud

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
SERVER_NAME = "splatrig/0.1.0"
DEFAULT_FOV_DEG = 50.0
DEFAULT_DISTANCE_FACTOR = 3.5


class ServiceError(Exception):
    def __init__(self, status: int, code: str, message: str):
        self.status = status
        self.code = code
        self.message = message
        super().__init__(message)


def scene_target_and_radius(cloud: GaussianCloud):
    """Deterministic orbit target (centroid) and bounding radius."""
    target = cloud.positions.mean(axis=0)
    radius = float(np.linalg.norm(cloud.positions - target, axis=1).max())
    return target, max(radius, 1e-6)


def default_camera(cloud: GaussianCloud, azimuth_deg: float = 0.0, elevation_deg: float = 0.0,
                   width: int = 256, height: int = 256, distance: Optional[float] = None,
                   fov_y_deg: float = DEFAULT_FOV_DEG) -> CameraSpec:
    """The camera the service renders with; clients reproduce it exactly."""
    target, radius = scene_target_and_radius(cloud)
    if distance is None:
        distance = DEFAULT_DISTANCE_FACTOR * radius
    return camera_from_orbit(target, distance, azimuth_deg, elevation_deg,
                             fov_y=np.deg2rad(fov_y_deg), width=width, height=height)


def project_points(camera: CameraSpec, points: np.ndarray) -> np.ndarray:
    """Pixel coordinates (u, v) of world points under the pinhole model."""
    rot, fx, fy, cx, cy = camera.basis()
    p_cam = (np.asarray(points, dtype=np.float64) - camera.position) @ rot.T
    z = p_cam[:, 2]
    u = fx * p_cam[:, 0] / z + cx
    v = fy * p_cam[:, 1] / z + cy
    return np.stack([u, v], axis=-1)


class ServiceState:
    """Session plus the locks and subscriber registry behind the endpoints."""

    def __init__(self, document: SceneDocument, path: Optional[str] = None,
                 render_smoothing_w: int = 0):
        if document.cloud is None or document.skeleton is None:
            raise ValueError("service needs a document with cloud and skeleton sections")
        if document.poses is None:
            raise ValueError("service needs a document with a pose sequence "
                             "(run 'fit' or 'synth' first)")
        self.session = EditSession(document, render_smoothing_w=render_smoothing_w)
        self.path = path
        self.lock = threading.Lock()
        self.busy_reason: Optional[str] = None
        self._subscribers: List[queue.Queue] = []
        from .skinning import bind
        self.binding = bind(document.cloud, document.skeleton)

    def check_not_busy(self):
        if self.busy_reason:
            raise ServiceError(409, "busy", f"session is busy: {self.busy_reason}")

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue()
        with self.lock:
            self._subscribers.append(q)
        return q

    def unsubscribe(self, q: queue.Queue):
        with self.lock:
            if q in self._subscribers:
                self._subscribers.remove(q)

    def publish(self, event: str, payload: dict):
        with self.lock:
            subscribers = list(self._subscribers)
        for q in subscribers:
            q.put((event, payload))

    # -- endpoint bodies (JSON-serializable returns) --

    def handshake(self, body: dict) -> dict:
        requested = body.get("protocol")
        if requested != PROTOCOL_VERSION:
            raise ServiceError(409, "protocol-mismatch",
                               f"server speaks protocol {PROTOCOL_VERSION}, client asked for {requested}")
        return {"protocol": PROTOCOL_VERSION, "server": SERVER_NAME}

    def scene_summary(self) -> dict:
        doc = self.session.document
        cloud, skeleton = doc.cloud, doc.skeleton
        with self.lock:
            poses = self.session.working_poses
            undo_depth = len(self.session.undo_stack)
            dirty = self.session.dirty
        target, radius = scene_target_and_radius(cloud)
        return {
            "splat_count": cloud.count,
            "joint_count": skeleton.joint_count,
            "frame_count": poses.frame_count,
            "bounds": {
                "lo": cloud.positions.min(axis=0).tolist(),
                "hi": cloud.positions.max(axis=0).tolist(),
                "center": target.tolist(),
                "radius": radius,
            },
            "skeleton": {
                "joints": skeleton.joints.tolist(),
                "parents": skeleton.parents.tolist(),
                "names": list(skeleton.names) if skeleton.names else None,
                "root": skeleton.root,
            },
            "has_field": doc.field is not None,
            "render_smoothing_w": self.session.render_smoothing_w,
            "undo_depth": undo_depth,
            "dirty": dirty,
            "camera_defaults": {
                "distance": DEFAULT_DISTANCE_FACTOR * radius,
                "fov_y_deg": DEFAULT_FOV_DEG,
            },
        }

    def _camera_from_query(self, q: Dict[str, str]) -> CameraSpec:
        return default_camera(
            self.session.document.cloud,
            azimuth_deg=float(q.get("azimuth", 0.0)),
            elevation_deg=float(q.get("elevation", 0.0)),
            width=int(q.get("width", 256)),
            height=int(q.get("height", 256)),
            distance=float(q["distance"]) if "distance" in q else None,
            fov_y_deg=float(q.get("fov_y_deg", DEFAULT_FOV_DEG)),
        )

    def frame_render(self, q: Dict[str, str]) -> bytes:
        doc = self.session.document
        with self.lock:
            poses = self.session.working_poses  # immutable snapshot
        t = int(q.get("t", 0))
        if not (0 <= t < poses.frame_count):
            raise ServiceError(400, "bad-frame", f"frame {t} outside [0, {poses.frame_count})")
        camera = self._camera_from_query(q)
        frame = render_sequence(doc.cloud, doc.skeleton, self.binding, poses, camera,
                                frames=[t], field=doc.field,
                                smoothing_w=self.session.render_smoothing_w)[0]
        return frame_to_png_bytes(frame)

    def frame_joints(self, q: Dict[str, str]) -> dict:
        doc = self.session.document
        with self.lock:
            poses = self.session.working_poses
        t = int(q.get("t", 0))
        if not (0 <= t < poses.frame_count):
            raise ServiceError(400, "bad-frame", f"frame {t} outside [0, {poses.frame_count})")
        smoothed = smooth_poses(poses, self.session.render_smoothing_w)
        fk = forward_kinematics(doc.skeleton, smoothed.theta[t], smoothed.root_translation[t])
        return {"t": t, "joints": fk.posed_joints.tolist()}

    def project(self, body: dict) -> dict:
        camera = self._camera_from_query({k: str(v) for k, v in body.get("camera", {}).items()})
        points = np.asarray(body["points"], dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ServiceError(400, "bad-points", "points must be a list of [x, y, z]")
        return {"pixels": project_points(camera, points).tolist()}

    def apply_edit(self, body: dict) -> dict:
        self.check_not_busy()
        try:
            command = EditCommand(
                frame=int(body["frame"]),
                joint=int(body["joint"]),
                quaternion=np.asarray(body["quaternion"], dtype=np.float64),
                frame_range=tuple(body["range"]) if body.get("range") else None,
                mode=body.get("mode", "replace"),
            )
        except (KeyError, TypeError) as exc:
            raise ServiceError(400, "bad-edit", f"malformed edit command: {exc}")
        except (ValueError, IndexError) as exc:
            raise ServiceError(400, "bad-edit", str(exc))
        with self.lock:
            try:
                affected = self.session.apply_edit(command)
            except (ValueError, IndexError) as exc:
                raise ServiceError(400, "bad-edit", str(exc))
            undo_depth = len(self.session.undo_stack)
        self.publish("invalidated", {"frames": affected, "cause": "edit"})
        return {"affected_frames": affected, "undo_depth": undo_depth}

    def undo(self) -> dict:
        self.check_not_busy()
        with self.lock:
            affected = self.session.undo()
            undo_depth = len(self.session.undo_stack)
        if affected:
            self.publish("invalidated", {"frames": affected, "cause": "undo"})
        return {"affected_frames": affected, "undo_depth": undo_depth}

    def save(self, body: dict) -> dict:
        self.check_not_busy()
        path = body.get("path") or self.path
        if not path:
            raise ServiceError(400, "no-path", "no save path: document was not loaded from a file")
        with self.lock:
            doc = self.session.commit()
            save_scene(path, doc)
            self.session.document = doc
            self.session.undo_stack.clear()
            self.session.dirty = False
        return {"path": str(path)}

    def export(self, body: dict) -> dict:
        self.check_not_busy()
        path = body.get("path")
        if not path:
            raise ServiceError(400, "no-path", "export needs a 'path'")
        fps = float(body.get("fps", 16.0))
        if fps <= 0:
            raise ServiceError(400, "bad-fps", "fps must be positive")
        with self.lock:
            doc = self.session.document
            text = export_bvh(doc.skeleton, self.session.working_poses, 1.0 / fps)
        with open(path, "w", newline="\n") as f:
            f.write(text)
        return {"path": str(path), "frame_time": 1.0 / fps}


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    state: ServiceState = None  # type: ignore[assignment]

    def log_message(self, fmt, *args):
        log.debug("service: " + fmt, *args)

    def _send_json(self, status: int, payload: dict):
        raw = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(raw)

    def _send_png(self, raw: bytes):
        self.send_response(200)
        self.send_header("Content-Type", "image/png")
        self.send_header("Content-Length", str(len(raw)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(raw)

    def _send_error(self, err: ServiceError):
        self._send_json(err.status, {"error": {"code": err.code, "message": err.message}})

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length", 0))
        if length == 0:
            return {}
        try:
            return json.loads(self.rfile.read(length).decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise ServiceError(400, "bad-json", f"request body is not valid JSON: {exc}")

    def do_OPTIONS(self):  # CORS preflight for browser clients
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_GET(self):
        url = urlparse(self.path)
        q = {k: v[0] for k, v in parse_qs(url.query).items()}
        try:
            if url.path == "/v1/scene-summary":
                self._send_json(200, self.state.scene_summary())
            elif url.path == "/v1/frame-render":
                self._send_png(self.state.frame_render(q))
            elif url.path == "/v1/frame-joints":
                self._send_json(200, self.state.frame_joints(q))
            elif url.path == "/v1/events":
                self._serve_events()
            else:
                self._send_json(404, {"error": {"code": "not-found", "message": f"no route {url.path}"}})
        except ServiceError as err:
            self._send_error(err)
        except (ValueError, KeyError) as exc:
            self._send_error(ServiceError(400, "bad-request", str(exc)))

    def do_POST(self):
        url = urlparse(self.path)
        try:
            body = self._read_body()
            if url.path == "/v1/handshake":
                self._send_json(200, self.state.handshake(body))
            elif url.path == "/v1/edit":
                self._send_json(200, self.state.apply_edit(body))
            elif url.path == "/v1/undo":
                self._send_json(200, self.state.undo())
            elif url.path == "/v1/save":
                self._send_json(200, self.state.save(body))
            elif url.path == "/v1/export-bvh":
                self._send_json(200, self.state.export(body))
            elif url.path == "/v1/project-points":
                self._send_json(200, self.state.project(body))
            else:
                self._send_json(404, {"error": {"code": "not-found", "message": f"no route {url.path}"}})
        except ServiceError as err:
            self._send_error(err)
        except (ValueError, KeyError) as exc:
            self._send_error(ServiceError(400, "bad-request", str(exc)))

    def _serve_events(self):
        """Server-sent events: pushes {"frames": [...]} on every invalidation."""
        q = self.state.subscribe()
        try:
            self.send_response(200)
            self.send_header("Content-Type", "text/event-stream")
            self.send_header("Cache-Control", "no-cache")
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(b"event: hello\ndata: {}\n\n")
            self.wfile.flush()
            while True:
                try:
                    event, payload = q.get(timeout=15.0)
                except queue.Empty:
                    self.wfile.write(b": keepalive\n\n")
                    self.wfile.flush()
                    continue
                raw = json.dumps(payload).encode("utf-8")
                self.wfile.write(b"event: " + event.encode() + b"\ndata: " + raw + b"\n\n")
                self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError):
            pass
        finally:
            self.state.unsubscribe(q)


def make_server(document: SceneDocument, host: str = "127.0.0.1", port: int = 0,
                path: Optional[str] = None, render_smoothing_w: int = 0) -> ThreadingHTTPServer:
    """Build (but do not start) the HTTP server; port 0 picks a free port."""
    state = ServiceState(document, path=path, render_smoothing_w=render_smoothing_w)
    handler = type("BoundHandler", (_Handler,), {"state": state})
    server = ThreadingHTTPServer((host, port), handler)
    server.state = state  # type: ignore[attr-defined]
    return server


def serve(document: SceneDocument, host: str = "127.0.0.1", port: int = 8765,
          path: Optional[str] = None, render_smoothing_w: int = 0):
    """Run the service until interrupted."""
    server = make_server(document, host, port, path, render_smoothing_w)
    log.info("serving scene on http://%s:%d (protocol v%d)", host, server.server_address[1],
             PROTOCOL_VERSION)
    try:
        server.serve_forever()
    finally:
        server.server_close()
