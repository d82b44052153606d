"""Interactive annotation service: upload once, slide K freely.

The merge hierarchy is computed a single time per (image, edge flag) and
cached; every K change is then a cheap prefix replay. Point edits never
invalidate superpixel caches. All binary payloads are base64 PNG inside
JSON, produced by the same encoders the CLI uses, so service output and
batch output are byte-identical.
"""

import base64
import hashlib
import io
import threading
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from PIL import Image, UnidentifiedImageError

from .raster import RasterImage, sobel_edges
from .superpixels import (
    MAX_PNG_REGIONS,
    SuperpixelConfig,
    boundary_runs,
    compute_hierarchy,
    encode_superpixel_png,
    extract_k,
)
from .synthetic import CLASS_NAMES, NUM_CLASSES, PALETTE
from .weaklabel import (
    PointAnnotation,
    PointSet,
    PropagationConfig,
    coverage,
    per_class_point_counts,
    points_csv_bytes,
    propagate,
    pseudo_mask_png_bytes,
)

DEFAULT_SIZE_LIMIT = 2048


class ImageSession:
    """Mutable per-image state; hierarchy computation is single-flight."""

    def __init__(self, image: RasterImage):
        self.image = image
        self.points: list = []
        self.points_lock = threading.Lock()
        self._hier: dict = {}
        self._hier_locks = {False: threading.Lock(), True: threading.Lock()}
        self._maps: dict = {}
        self._maps_lock = threading.Lock()

    def hierarchy(self, edge: bool):
        edge = bool(edge)
        with self._hier_locks[edge]:
            if edge not in self._hier:
                edges = sobel_edges(self.image) if edge else None
                self._hier[edge] = compute_hierarchy(
                    self.image, SuperpixelConfig(edge=edge), edges
                )
        return self._hier[edge]

    def superpixel_map(self, k: int, edge: bool):
        key = (int(k), bool(edge))
        with self._maps_lock:
            cached = self._maps.get(key)
        if cached is not None:
            return cached
        hierarchy = self.hierarchy(edge)
        spmap = extract_k(hierarchy, k, self.image.width, self.image.height)
        with self._maps_lock:
            self._maps[key] = spmap
        return spmap

    def point_set(self) -> PointSet:
        with self.points_lock:
            pts = list(self.points)
        return PointSet(pts, source="manual", seed=0)


def _decode_upload(body: bytes, size_limit: int) -> RasterImage:
    try:
        img = Image.open(io.BytesIO(body))
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError):
        raise HTTPException(400, "not a decodable PNG image")
    if img.mode == "L":
        img = img.convert("RGB")
    if img.mode != "RGB":
        raise HTTPException(400, f"unsupported image mode {img.mode!r}")
    if img.width > size_limit or img.height > size_limit:
        raise HTTPException(413, f"image exceeds {size_limit}x{size_limit} limit")
    return RasterImage(np.asarray(img, dtype=np.uint8))


def create_app(size_limit: int = DEFAULT_SIZE_LIMIT, state_dir=None, ui_dir=None,
               warm_hierarchy: bool = True) -> FastAPI:
    app = FastAPI(title="pointgrow annotation service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    sessions: dict = {}
    sessions_lock = threading.Lock()
    state_path = Path(state_dir) if state_dir else None
    if state_path:
        state_path.mkdir(parents=True, exist_ok=True)

    def get_session(image_id: str) -> ImageSession:
        with sessions_lock:
            session = sessions.get(image_id)
        if session is None:
            raise HTTPException(404, f"unknown image id {image_id!r}")
        return session

    def persist_points(image_id: str, session: ImageSession) -> None:
        if state_path:
            (state_path / f"{image_id}.points.csv").write_bytes(
                points_csv_bytes(session.point_set())
            )

    @app.get("/api/classes")
    def classes():
        return {
            "num_classes": NUM_CLASSES,
            "classes": [
                {"id": i, "name": name, "color": list(color)}
                for i, (name, color) in enumerate(zip(CLASS_NAMES, PALETTE))
            ],
        }

    @app.post("/api/images", status_code=201)
    async def upload_image(request: Request):
        body = await request.body()
        image = _decode_upload(body, size_limit)
        image_id = hashlib.sha256(body).hexdigest()[:16]
        with sessions_lock:
            fresh = image_id not in sessions
            if fresh:
                sessions[image_id] = ImageSession(image)
            session = sessions[image_id]
        if fresh:
            if state_path:
                (state_path / f"{image_id}.png").write_bytes(body)
            if warm_hierarchy:
                threading.Thread(
                    target=session.hierarchy, args=(False,), daemon=True
                ).start()
        return {"image_id": image_id, "width": image.width, "height": image.height}

    @app.get("/api/images/{image_id}")
    def image_meta(image_id: str):
        session = get_session(image_id)
        return {
            "image_id": image_id,
            "width": session.image.width,
            "height": session.image.height,
            "num_points": len(session.points),
        }

    @app.get("/api/images/{image_id}/superpixels")
    def superpixels(image_id: str, k: int = 100, edge: bool = False):
        session = get_session(image_id)
        pixels = session.image.width * session.image.height
        if not 1 <= k <= pixels:
            raise HTTPException(422, f"k must lie in [1, {pixels}]")
        if k > MAX_PNG_REGIONS:
            raise HTTPException(422, f"k must be <= {MAX_PNG_REGIONS} for 16-bit id maps")
        spmap = session.superpixel_map(k, edge)
        return {
            "k": spmap.k,
            "map": base64.b64encode(encode_superpixel_png(spmap)).decode(),
            "boundaries": boundary_runs(spmap),
        }

    def point_list(session: ImageSession):
        with session.points_lock:
            return [
                {"index": i, "x": p.x, "y": p.y, "class_id": p.class_id}
                for i, p in enumerate(session.points)
            ]

    @app.post("/api/images/{image_id}/points")
    def add_point(image_id: str, point: dict):
        session = get_session(image_id)
        try:
            x, y, class_id = int(point["x"]), int(point["y"]), int(point["class_id"])
        except (KeyError, TypeError, ValueError):
            raise HTTPException(422, "point must carry integer x, y, class_id")
        if not (0 <= x < session.image.width and 0 <= y < session.image.height):
            raise HTTPException(422, "point out of bounds")
        if not 0 <= class_id < NUM_CLASSES:
            raise HTTPException(422, f"class_id must lie in [0, {NUM_CLASSES})")
        with session.points_lock:
            if any(p.x == x and p.y == y for p in session.points):
                raise HTTPException(422, f"duplicate point at ({x}, {y})")
            session.points.append(PointAnnotation(x, y, class_id))
        persist_points(image_id, session)
        return {"points": point_list(session)}

    @app.delete("/api/images/{image_id}/points/{index}")
    def delete_point(image_id: str, index: int):
        session = get_session(image_id)
        with session.points_lock:
            if not 0 <= index < len(session.points):
                raise HTTPException(422, f"no point at index {index}")
            session.points.pop(index)
        persist_points(image_id, session)
        return {"points": point_list(session)}

    @app.get("/api/images/{image_id}/pseudomask")
    def pseudomask(image_id: str, k: int = 100, edge: bool = False, policy: str = "ignore"):
        session = get_session(image_id)
        pixels = session.image.width * session.image.height
        if not 1 <= k <= pixels:
            raise HTTPException(422, f"k must lie in [1, {pixels}]")
        if policy not in ("ignore", "supervise"):
            raise HTTPException(422, f"unknown policy {policy!r}")
        spmap = session.superpixel_map(k, edge)
        points = session.point_set()
        pm = propagate(points, spmap, PropagationConfig(policy), NUM_CLASSES)
        labels_png, mask_png = pseudo_mask_png_bytes(pm)
        return {
            "labels": base64.b64encode(labels_png).decode(),
            "mask": base64.b64encode(mask_png).decode(),
            "coverage": coverage(pm),
            "per_class_point_counts": per_class_point_counts(points, NUM_CLASSES),
        }

    @app.get("/api/images/{image_id}/export")
    def export_points(image_id: str):
        session = get_session(image_id)
        return Response(
            content=points_csv_bytes(session.point_set()),
            media_type="text/csv",
            headers={
                "Content-Disposition": f'attachment; filename="points-{image_id}.csv"'
            },
        )

    @app.get("/api/images/{image_id}/export/sidecar")
    def export_sidecar(image_id: str):
        get_session(image_id)
        return JSONResponse(
            {"source": "manual", "seed": 0},
            headers={
                "Content-Disposition": f'attachment; filename="points-{image_id}.json"'
            },
        )

    if ui_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app


def serve(host: str, port: int, size_limit: int = DEFAULT_SIZE_LIMIT,
          state_dir=None, ui_dir=None) -> None:
    import uvicorn

    app = create_app(size_limit=size_limit, state_dir=state_dir, ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port)
