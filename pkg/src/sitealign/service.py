"""HTTP API over a project: the surface the browser UI talks to.

Single writer: mutations serialize through one lock and are idempotent
via client-supplied request ids (a replayed id returns the stored
response without re-executing). Stale-revision mutations get 409.
"""

from __future__ import annotations

import io
import json
import threading
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Query, Request, Response
from fastapi.responses import JSONResponse

from .compositing import OverlaySpec
from .errors import (
    AssistRequired,
    SiteAlignError,
    StaleState,
    UnknownId,
    ValidationError,
)
from .geometry import Pose
from .imutil import save_image
from .project import Project, parse_correspondences, parse_date, _pose_from_dict


def _png_bytes(arr: np.ndarray) -> bytes:
    from PIL import Image

    data = np.clip(np.round(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(data).save(buf, format="PNG")
    return buf.getvalue()


def _error_response(exc: Exception) -> JSONResponse:
    if isinstance(exc, (UnknownId,)):
        status = 404
    elif isinstance(exc, StaleState):
        status = 409
    elif isinstance(exc, AssistRequired):
        return JSONResponse(
            status_code=200,
            content={"status": "assist-required", "request": exc.request.to_dict()},
        )
    elif isinstance(exc, (ValidationError, SiteAlignError)):
        status = 400
    else:
        status = 500
    return JSONResponse(
        status_code=status,
        content={"error": getattr(exc, "code", "internal"), "message": str(exc)},
    )


def create_app(project: Project, ui_dir: "Path | None" = None) -> FastAPI:
    app = FastAPI(title="sitealign workbench", version="0.1.0")
    lock = threading.Lock()
    replay_cache: dict[str, dict] = {}
    replay_path = project.root / "requests.json"
    if replay_path.exists():
        replay_cache.update(json.loads(replay_path.read_text()))

    def persist_replays():
        replay_path.write_text(json.dumps(replay_cache, indent=2, sort_keys=True))

    def idempotent(request_id: str | None, fn):
        """Run a mutation once per request id; replays return the stored
        response verbatim."""
        if request_id is None:
            raise ValidationError("mutations require a request_id")
        with lock:
            if request_id in replay_cache:
                return replay_cache[request_id]
            result = fn()
            replay_cache[request_id] = result
            persist_replays()
            return result

    @app.exception_handler(Exception)
    async def handle(request: Request, exc: Exception):  # noqa: ARG001
        return _error_response(exc)

    # --- read side -------------------------------------------------------------

    @app.get("/project")
    def get_project():
        return project.summary()

    @app.get("/images/{image_id}/bytes")
    def get_image_bytes(image_id: str):
        return Response(content=project.image_bytes(image_id), media_type="image/png")

    @app.get("/timeline")
    def get_timeline():
        return project.timeline()

    @app.get("/overlay")
    def get_overlay(
        image: str,
        date: str,
        style: str = "semi-transparent",
        alpha: float = 0.6,
        respect_occlusion: bool = True,
    ):
        spec = OverlaySpec(
            image_id=image,
            date=parse_date(date),
            style=style,
            alpha=alpha,
            respect_occlusion=respect_occlusion,
        )
        if spec.alpha == 0.0 and spec.style == "semi-transparent":
            # compositing with zero alpha is the photo itself; serve the
            # stored bytes verbatim
            project.camera_or_raise(image)
            return Response(content=project.image_bytes(image), media_type="image/png")
        return Response(content=_png_bytes(project.composite_image(spec)), media_type="image/png")

    @app.get("/reveal")
    def get_reveal(image: str, date: str, alpha: float = 1.0):
        img = project.reveal_image(image, parse_date(date), None, alpha=alpha)
        return Response(content=_png_bytes(img), media_type="image/png")

    @app.get("/model/mesh")
    def get_mesh(date: str | None = None, max_triangles: int = Query(default=5000)):
        model = project.model
        active = None
        if date is not None:
            active = model.snapshot_at(parse_date(date)).visible
        mask = model.triangle_mask(active)
        tris = model.triangles[mask]
        comps = [model.component_of_triangle(int(t)) for t in np.flatnonzero(mask)]
        stride = max(1, int(np.ceil(len(tris) / max_triangles)))
        tris = tris[::stride]
        comps = comps[::stride]
        return {
            "vertices": [[float(v) for v in row] for row in model.vertices],
            "triangles": [[int(v) for v in row] for row in tris],
            "components": comps,
            "decimated": stride > 1,
        }

    @app.get("/masks")
    def list_masks():
        return project.masks

    @app.get("/masks/{image_id}/{kind}")
    def get_mask(image_id: str, kind: str):
        path = project.root / "masks" / f"{image_id}.{kind}.png"
        if not path.exists():
            raise UnknownId(f"no {kind} mask for {image_id!r}")
        return Response(content=path.read_bytes(), media_type="image/png")

    @app.get("/correspondences")
    def get_correspondences(image: str):
        if image not in project.images:
            raise UnknownId(f"unknown image {image!r}")
        recorded = [
            r for r in project.user_inputs() if r["op"] == "anchor" and r["image"] == image
        ]
        return {"image": image, "inputs": recorded}

    @app.get("/annotations")
    def get_annotations():
        from .project import _annotation_to_dict

        return [_annotation_to_dict(project.annotations[a]) for a in sorted(project.annotations)]

    @app.get("/annotations/transfers")
    def get_transfers(image: str, date: str | None = None):
        overlays = project.transfers_for(image, parse_date(date) if date else None)
        return {
            "image": image,
            "overlays": [
                {
                    "annotation": o.annotation_id,
                    "status": o.status,
                    "note": o.note,
                    "color": list(o.color),
                    "fill_alpha": o.fill_alpha,
                    "visible_fraction": o.visible_fraction,
                    "outlines": [[[float(v) for v in pt] for pt in poly] for poly in o.outlines],
                }
                for o in overlays
            ],
        }

    @app.post("/selections/resolve")
    async def selections_resolve(request: Request):
        body = await request.json()
        image = body.get("image")
        cam = project.camera_or_raise(image)
        date = parse_date(body.get("date") or project.capture_date(image).isoformat())
        mode = body.get("mode")
        seed = body.get("seed")
        from .annotation import mask_outlines, resolve_selection

        masks = None
        if mode == "occlusion-region":
            loaded = project.load_masks(image)
            if not loaded:
                raise ValidationError(f"no occlusion masks computed for {image!r}")
            masks = {"static": loaded[0]}
        sel = resolve_selection(
            mode, seed, cam.pose, cam.intrinsics, project.model, date, masks=masks
        )
        return {
            "mode": sel.mode,
            "components": sorted(sel.component_ids),
            "pixel_count": int(sel.pixel_mask.sum()),
            "outlines": [
                [[float(v) for v in pt] for pt in poly] for poly in mask_outlines(sel.pixel_mask)
            ],
        }

    @app.post("/model/pick")
    async def model_pick(request: Request):
        body = await request.json()
        try:
            origin = np.array([float(v) for v in body["origin"]])
            direction = np.array([float(v) for v in body["direction"]])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError("pick needs origin [3] and direction [3]") from exc
        date = parse_date(body.get("date", project.model.date_span()[1].isoformat()))
        hit = project.model.raycast(
            origin, direction, active=set(project.model.snapshot_at(date).visible)
        )
        if hit is None:
            raise UnknownId("ray misses the model")
        return {
            "point": [float(v) for v in hit.point],
            "component": hit.component_id,
            "triangle": hit.triangle,
            "t": hit.t,
        }

    # --- write side --------------------------------------------------------------

    @app.post("/correspondences")
    async def post_correspondences(request: Request):
        body = await request.json()

        def run():
            image = body.get("image")
            if image not in project.images:
                raise UnknownId(f"unknown image {image!r}")
            corrs = parse_correspondences(body.get("correspondences", []))
            init = _pose_from_dict(body["init_pose"]) if "init_pose" in body else None
            project.record_anchor_input(image, corrs, init)
            return {"status": "recorded", "image": image, "count": len(corrs)}

        return idempotent(body.get("request_id"), run)

    @app.post("/register/step")
    async def register_step(request: Request):
        body = await request.json()

        def run():
            expected = body.get("expected_revision")
            if expected is not None and expected != project.revision:
                raise StaleState(
                    f"expected revision {expected}, project is at {project.revision}"
                )
            try:
                pipe = project.register()
            except AssistRequired as exc:
                return {
                    "status": "assist-required",
                    "request": exc.request.to_dict(),
                    "summary": project.summary(),
                }
            residuals = {}
            per_pick = {}
            from .geometry import project_with_jacobians

            for image_id in sorted(pipe.registered):
                cam = pipe.registered[image_id]
                corrs = pipe.correspondences.get(image_id, [])
                if not corrs:
                    continue
                pts = np.array([c.model_point for c in corrs])
                pix = np.array([c.pixel for c in corrs])
                proj, valid, _ = project_with_jacobians(
                    pts, cam.pose.rotvec, cam.pose.t, cam.intrinsics.focal,
                    0.0, 0.0, cam.intrinsics.width, cam.intrinsics.height,
                )
                errs = np.where(valid, np.linalg.norm(proj - pix, axis=1), np.inf)
                per_pick[image_id] = [float(e) for e in errs]
                residuals[image_id] = float(np.sqrt(np.mean(errs[valid] ** 2))) if valid.any() else None
            return {
                "status": "ok",
                "summary": project.summary(),
                "pick_rms": residuals,
                "pick_residuals": per_pick,
            }

        return idempotent(body.get("request_id"), run)

    @app.post("/annotations")
    async def post_annotation(request: Request):
        body = await request.json()

        def run():
            expected = body.get("expected_revision")
            if expected is not None and expected != project.revision:
                raise StaleState(
                    f"expected revision {expected}, project is at {project.revision}"
                )
            ann = project.add_annotation(
                body.get("image"),
                body.get("status"),
                body.get("note", ""),
                body.get("author", "web"),
                polygon=body.get("polygon"),
                component_ids=body.get("components"),
                date=parse_date(body["date"]) if body.get("date") else None,
            )
            return {"status": "ok", "annotation": ann.annotation_id}

        return idempotent(body.get("request_id"), run)

    @app.post("/masks/{image_id}/{kind}")
    async def post_mask(image_id: str, kind: str, request: Request):
        body = await request.json()

        def run():
            if kind == "static":
                mask = project.compute_static_mask(
                    image_id, parse_date(body["date"]) if body.get("date") else None
                )
            elif kind == "dynamic":
                mask = project.compute_dynamic_mask(image_id)
            else:
                raise ValidationError(f"unknown mask kind {kind!r}")
            return {"status": "ok", "masked_fraction": float(mask.mask.mean())}

        return idempotent(body.get("request_id"), run)

    # --- optional static UI --------------------------------------------------------

    if ui_dir is not None and Path(ui_dir).exists():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
