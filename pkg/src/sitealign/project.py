"""Project persistence and the operations shared by the CLI and service.

A project directory is self-contained and human-readable:

    project.json    - schema, config, images, cameras, annotations, state
    events.jsonl    - append-only structured event log
    inputs.jsonl    - the user-supplied registrations (anchor picks,
                      assist answers) in the order they were given
    images/         - content-addressed image store
    masks/          - persisted occlusion masks (8-bit PNG + sidecar)
    cache/stacks/   - aligned time-lapse stacks
    model.obj, manifest.json - the building model

Registration is deterministic given the inputs file and the config seed,
so resuming replays the recorded inputs instead of serializing solver
state; identical runs produce byte-identical project files.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import occlusion as occ
from . import timelapse as tl
from .annotation import (
    Annotation,
    Footprint,
    FootprintPatch,
    Overlay,
    anchor_annotation_3d,
    footprint_from_components,
    transfer_annotation,
)
from .compositing import OverlaySpec, composite, reveal_4d
from .errors import (
    AssistRequired,
    SiteAlignError,
    UnknownId,
    ValidationError,
)
from .geometry import Intrinsics, Pose, camera_errors, fit_similarity
from .imutil import load_image, save_image, save_mask
from .pipeline import ImageMeta, Pipeline, PipelineConfig
from .registration import Camera, Correspondence2D3D, triangulate
from .scene import load_model

SCHEMA_VERSION = 1


@dataclass
class ImageRecord:
    image_id: str
    file: str  # relative path inside the project
    sha256: str
    width: int
    height: int
    capture_time: str | None
    focal_px: float | None

    def meta(self) -> ImageMeta:
        return ImageMeta(
            width=self.width,
            height=self.height,
            focal_px=self.focal_px,
            capture_time=self.capture_time,
        )


def _json_dumps(data) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def _camera_to_dict(cam: Camera) -> dict:
    return {
        "image": cam.image_id,
        "rotvec": [float(v) for v in cam.pose.rotvec],
        "t": [float(v) for v in cam.pose.t],
        "focal": float(cam.intrinsics.focal),
        "k1": float(cam.intrinsics.k1),
        "k2": float(cam.intrinsics.k2),
        "width": cam.intrinsics.width,
        "height": cam.intrinsics.height,
        "is_anchor": cam.is_anchor,
    }


def _camera_from_dict(d: dict) -> Camera:
    return Camera(
        image_id=d["image"],
        intrinsics=Intrinsics(d["focal"], d["k1"], d["k2"], d["width"], d["height"]),
        pose=Pose(np.array(d["rotvec"]), np.array(d["t"])),
        is_anchor=bool(d["is_anchor"]),
    )


def parse_correspondences(records) -> list[Correspondence2D3D]:
    """The one validation path for pick lists (CLI files and API bodies)."""
    if not isinstance(records, list):
        raise ValidationError("correspondences must be a list")
    out = []
    for i, rec in enumerate(records):
        try:
            pixel = [float(v) for v in rec["pixel"]]
            point = [float(v) for v in rec["model_point"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"correspondence {i}: needs pixel [x, y] and model_point [x, y, z]") from exc
        if len(pixel) != 2 or len(point) != 3:
            raise ValidationError(f"correspondence {i}: wrong arity")
        out.append(Correspondence2D3D(pixel=np.array(pixel), model_point=np.array(point)))
    return out


def parse_date(value) -> dt.date:
    try:
        return dt.date.fromisoformat(str(value))
    except ValueError as exc:
        raise ValidationError(f"bad ISO date {value!r}") from exc


def _pose_from_dict(d: dict) -> Pose:
    try:
        return Pose(np.array([float(v) for v in d["rotvec"]]), np.array([float(v) for v in d["t"]]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError("pose needs rotvec [3] and t [3]") from exc


class Project:
    """A workbench project rooted in a directory. Single writer."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.config = PipelineConfig()
        self.images: dict[str, ImageRecord] = {}
        self.cameras: dict[str, Camera] = {}
        self.anchors: set[str] = set()
        self.correspondences: dict[str, list[Correspondence2D3D]] = {}
        self.annotations: dict[str, Annotation] = {}
        self.pending_assists: dict[str, dict] = {}
        self.masks: dict[str, dict] = {}  # "image:kind" -> metadata
        self.revision = 0
        self._model = None
        self._pipeline: Pipeline | None = None

    # --- lifecycle -----------------------------------------------------------

    @classmethod
    def init(cls, root, mesh_path, manifest_path, config: PipelineConfig | None = None) -> "Project":
        root = Path(root)
        if (root / "project.json").exists():
            raise ValidationError(f"{root} already holds a project")
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(exist_ok=True)
        (root / "cache").mkdir(exist_ok=True)
        load_model(mesh_path, manifest_path)  # validate before copying
        shutil.copyfile(mesh_path, root / "model.obj")
        shutil.copyfile(manifest_path, root / "manifest.json")
        project = cls(root)
        project.config = config or PipelineConfig()
        project.save()
        return project

    @classmethod
    def open(cls, root) -> "Project":
        root = Path(root)
        path = root / "project.json"
        if not path.exists():
            raise ValidationError(f"no project at {root}")
        data = json.loads(path.read_text())
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ValidationError(f"unsupported schema version {data.get('schema_version')}")
        project = cls(root)
        project.config = PipelineConfig.from_dict(data["config"])
        project.revision = data.get("revision", 0)
        for rec in data.get("images", []):
            project.images[rec["image_id"]] = ImageRecord(**rec)
        for rec in data.get("cameras", []):
            cam = _camera_from_dict(rec)
            project.cameras[cam.image_id] = cam
            if cam.is_anchor:
                project.anchors.add(cam.image_id)
        for image_id, recs in data.get("correspondences", {}).items():
            project.correspondences[image_id] = [
                Correspondence2D3D(
                    pixel=np.array(r["pixel"]),
                    model_point=np.array(r["model_point"]),
                    source=r.get("source", "user-picked"),
                )
                for r in recs
            ]
        for rec in data.get("annotations", []):
            project.annotations[rec["id"]] = _annotation_from_dict(rec)
        project.pending_assists = data.get("pending_assists", {})
        project.masks = data.get("masks", {})
        return project

    def save(self):
        data = {
            "schema_version": SCHEMA_VERSION,
            "revision": self.revision,
            "config": self.config.to_dict(),
            "model": {"mesh": "model.obj", "manifest": "manifest.json"},
            "images": [vars(rec) for rec in sorted(self.images.values(), key=lambda r: r.image_id)],
            "cameras": [
                _camera_to_dict(self.cameras[i]) for i in sorted(self.cameras)
            ],
            "correspondences": {
                image_id: [
                    {
                        "pixel": [float(v) for v in c.pixel],
                        "model_point": [float(v) for v in c.model_point],
                        "source": c.source,
                    }
                    for c in corrs
                ]
                for image_id, corrs in sorted(self.correspondences.items())
            },
            "annotations": [
                _annotation_to_dict(a) for _, a in sorted(self.annotations.items())
            ],
            "pending_assists": dict(sorted(self.pending_assists.items())),
            "masks": dict(sorted(self.masks.items())),
        }
        (self.root / "project.json").write_text(_json_dumps(data))

    def bump(self):
        self.revision += 1
        self.save()

    @property
    def model(self):
        if self._model is None:
            self._model = load_model(self.root / "model.obj", self.root / "manifest.json")
        return self._model

    def _log_event(self, record: dict):
        with open(self.root / "events.jsonl", "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def _log_input(self, record: dict):
        with open(self.root / "inputs.jsonl", "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def user_inputs(self) -> list[dict]:
        path = self.root / "inputs.jsonl"
        if not path.exists():
            return []
        return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]

    # --- images ---------------------------------------------------------------

    def ingest(self, paths: list) -> list[str]:
        """Add images; duplicates (by content hash) collapse to the
        existing id. Sidecar ``<name>.meta.json`` supplies capture time
        and focal; EXIF is consulted otherwise."""
        added = []
        for path in paths:
            path = Path(path)
            if not path.exists():
                raise ValidationError(f"no such image {path}")
            blob = path.read_bytes()
            digest = hashlib.sha256(blob).hexdigest()
            existing = next((r for r in self.images.values() if r.sha256 == digest), None)
            if existing is not None:
                added.append(existing.image_id)
                self._log_event({"op": "ingest_duplicate", "image": existing.image_id})
                continue
            image_id = path.stem
            if image_id in self.images:
                image_id = f"{path.stem}-{digest[:8]}"
            with Image.open(path) as img:
                width, height = img.size
                exif_time, exif_focal = _exif_metadata(img, width)
            capture_time, focal_px = exif_time, exif_focal
            sidecar = path.with_suffix(".meta.json")
            if sidecar.exists():
                meta = json.loads(sidecar.read_text())
                capture_time = meta.get("capture_time", capture_time)
                focal_px = meta.get("focal_px", focal_px)
            stored = f"images/{digest}{path.suffix.lower()}"
            shutil.copyfile(path, self.root / stored)
            self.images[image_id] = ImageRecord(
                image_id=image_id,
                file=stored,
                sha256=digest,
                width=width,
                height=height,
                capture_time=capture_time,
                focal_px=focal_px,
            )
            added.append(image_id)
            self._log_event({"op": "ingest", "image": image_id, "sha256": digest})
        self.bump()
        return added

    def image_array(self, image_id: str) -> np.ndarray:
        rec = self.images.get(image_id)
        if rec is None:
            raise UnknownId(f"unknown image {image_id!r}")
        return load_image(self.root / rec.file)

    def image_bytes(self, image_id: str) -> bytes:
        rec = self.images.get(image_id)
        if rec is None:
            raise UnknownId(f"unknown image {image_id!r}")
        return (self.root / rec.file).read_bytes()

    def capture_date(self, image_id: str) -> dt.date:
        rec = self.images.get(image_id)
        if rec is None:
            raise UnknownId(f"unknown image {image_id!r}")
        if rec.capture_time:
            return dt.datetime.fromisoformat(rec.capture_time).date()
        start, _ = self.model.date_span()
        return start

    # --- registration -----------------------------------------------------------

    def attach_match_file(self, path) -> int:
        """Copy an injected-match file into the project; registration then
        uses these matches instead of the built-in detector. Returns the
        number of image pairs covered."""
        from .matching import load_match_file

        sizes = {i: (r.width, r.height) for i, r in self.images.items()}
        pms, _ = load_match_file(path, sizes)  # validates before adopting
        shutil.copyfile(path, self.root / "matches.txt")
        self._log_event({"op": "matches_attached", "pairs": len(pms)})
        self.bump()
        return len(pms)

    def build_pipeline(self) -> Pipeline:
        images = {i: self.image_array(i) for i in sorted(self.images)}
        metas = {i: self.images[i].meta() for i in sorted(self.images)}
        injected = None
        match_file = self.root / "matches.txt"
        if match_file.exists():
            from .matching import load_match_file

            sizes = {i: (r.width, r.height) for i, r in self.images.items()}
            injected = load_match_file(match_file, sizes)
        return Pipeline(images, metas, self.model, self.config, injected=injected)

    def record_anchor_input(self, image_id: str, corrs: list[Correspondence2D3D], init_pose: Pose | None):
        if image_id not in self.images:
            raise UnknownId(f"unknown image {image_id!r}")
        if len(corrs) < 4:
            raise ValidationError(f"need >= 4 correspondences, got {len(corrs)}")
        for c in corrs:
            rec = self.images[image_id]
            if not (0 <= c.pixel[0] < rec.width and 0 <= c.pixel[1] < rec.height):
                raise ValidationError(f"pick pixel {c.pixel} outside image {image_id!r}")
        record = {
            "op": "anchor",
            "image": image_id,
            "correspondences": [
                {
                    "pixel": [float(v) for v in c.pixel],
                    "model_point": [float(v) for v in c.model_point],
                }
                for c in corrs
            ],
        }
        if init_pose is not None:
            record["init_pose"] = {
                "rotvec": [float(v) for v in init_pose.rotvec],
                "t": [float(v) for v in init_pose.t],
            }
        self._log_input(record)

    def register(self) -> Pipeline:
        """(Re)run registration deterministically from the recorded inputs.

        Raises
        ------
        AssistRequired
            The pipeline suspended on an unanswered assist; the request is
            persisted so a UI or a later `--resume` can answer it.
        """
        inputs = self.user_inputs()
        anchors = [r for r in inputs if r["op"] == "anchor"]
        if not anchors:
            raise ValidationError("no anchor correspondences recorded; register --anchor first")
        pipe = self.build_pipeline()
        first = anchors[0]
        init = _pose_from_dict(first["init_pose"]) if "init_pose" in first else None
        pipe.register_anchor(
            first["image"], parse_correspondences(first["correspondences"]), init=init
        )
        answers = {
            r["image"]: parse_correspondences(r["correspondences"]) for r in anchors[1:]
        }
        pipe.run(assist_answers=answers)
        self._store_pipeline(pipe)
        if pipe.pending_assists:
            image_id, request = sorted(pipe.pending_assists.items())[0]
            raise AssistRequired(request)
        return pipe

    def _store_pipeline(self, pipe: Pipeline):
        self.cameras = dict(pipe.registered)
        self.anchors = set(pipe.anchors)
        self.correspondences = {k: list(v) for k, v in pipe.correspondences.items()}
        self.pending_assists = {k: v.to_dict() for k, v in pipe.pending_assists.items()}
        for ev in pipe.events:
            self._log_event(ev)
        cloud = [
            {
                "track": tid,
                "position": [float(v) for v in sp.position],
                "anchor_ray": None
                if sp.anchor_ray is None
                else {
                    "origin": [float(v) for v in sp.anchor_ray.origin],
                    "direction": [float(v) for v in sp.anchor_ray.direction],
                    "depth": float(sp.anchor_ray.depth),
                },
            }
            for tid, sp in sorted(pipe.scene_points.items())
        ]
        (self.root / "cloud.json").write_text(_json_dumps({"points": cloud}))
        self._pipeline = pipe
        self.bump()

    def pipeline(self) -> Pipeline:
        """The live pipeline, rebuilt by deterministic replay if needed."""
        if self._pipeline is None:
            self._pipeline = self.register_quiet()
        return self._pipeline

    def register_quiet(self) -> Pipeline:
        try:
            return self.register()
        except AssistRequired:
            return self._pipeline

    def cloud_points(self) -> np.ndarray:
        path = self.root / "cloud.json"
        if not path.exists():
            return np.zeros((0, 3))
        data = json.loads(path.read_text())
        return np.array([p["position"] for p in data["points"]], dtype=float).reshape(-1, 3)

    def camera_or_raise(self, image_id: str) -> Camera:
        cam = self.cameras.get(image_id)
        if cam is None:
            raise UnknownId(f"image {image_id!r} is not registered")
        return cam

    # --- time lapse ---------------------------------------------------------------

    def viewpoint_groups(self) -> list[tl.ViewpointGroup]:
        pipe = self.pipeline()
        pipe.ensure_features()
        timestamps = {}
        for image_id in self.images:
            rec = self.images[image_id]
            if rec.capture_time:
                timestamps[image_id] = dt.datetime.fromisoformat(rec.capture_time)
            else:
                timestamps[image_id] = dt.datetime.min  # file order fallback
        return tl.group_viewpoints(
            sorted(self.images),
            timestamps,
            lambda ref, other: pipe._homography_between(ref, other),
            gate=self.config.homography_gate,
        )

    def build_stacks(self) -> list[str]:
        """Build and cache aligned stacks for all non-singleton groups."""
        built = []
        images = {i: self.image_array(i) for i in sorted(self.images)}
        for group in self.viewpoint_groups():
            if group.is_singleton:
                self._log_event({"op": "stack_skipped", "reference": group.reference,
                                 "reason": "no-temporal-2d"})
                continue
            stack = tl.build_stack(group, images)
            tl.save_stack(
                stack,
                self.root / "cache" / "stacks" / group.reference,
                homographies={m.image_id: m.to_reference.matrix for m in group.members},
                config=self.config.to_dict(),
            )
            built.append(group.reference)
            self._log_event({"op": "stack_built", "reference": group.reference,
                             "members": stack.image_ids})
        self.bump()
        return built

    def load_stack(self, reference: str) -> tl.AlignedStack:
        path = self.root / "cache" / "stacks" / reference
        if not (path / "stack.json").exists():
            raise UnknownId(f"no cached stack for {reference!r}; run timelapse build")
        return tl.load_stack(path)

    def stack_covering(self, image_id: str) -> tl.AlignedStack | None:
        base = self.root / "cache" / "stacks"
        if (base / image_id / "stack.json").exists():
            return tl.load_stack(base / image_id)
        if not base.exists():
            return None
        for ref in sorted(p.name for p in base.iterdir() if p.is_dir()):
            stack = tl.load_stack(base / ref)
            if image_id in stack.image_ids:
                return stack
        return None

    # --- occlusion -------------------------------------------------------------------

    def compute_static_mask(self, image_id: str, date: dt.date | None = None) -> occ.OcclusionMask:
        cam = self.camera_or_raise(image_id)
        date = date or self.capture_date(image_id)
        mask = occ.static_mask(
            self.image_array(image_id),
            cam.pose,
            cam.intrinsics,
            self.cloud_points(),
            self.model,
            date,
            image_id=image_id,
        )
        self._save_mask(mask)
        return mask

    def compute_dynamic_mask(self, image_id: str) -> occ.OcclusionMask:
        stack = self.stack_covering(image_id)
        if stack is None:
            raise UnknownId(f"no aligned stack covers {image_id!r}; run timelapse build")
        mask, background = occ.dynamic_mask(stack, image_id)
        self._save_mask(mask)
        save_image(self.root / "masks" / f"{image_id}.background.png", background)
        return mask

    def _save_mask(self, mask: occ.OcclusionMask):
        name = f"{mask.image_id}.{mask.kind}"
        save_mask(self.root / "masks" / f"{name}.png", mask.mask)
        save_image(self.root / "masks" / f"{name}.confidence.png", mask.confidence)
        meta = {"image": mask.image_id, "kind": mask.kind, "parameters": mask.parameters,
                "config": self.config.to_dict()}
        (self.root / "masks" / f"{name}.json").write_text(_json_dumps(meta))
        self.masks[name] = meta
        self._log_event({"op": "mask_saved", "image": mask.image_id, "kind": mask.kind})
        self.bump()

    def load_masks(self, image_id: str) -> list[np.ndarray]:
        out = []
        for kind in ("static", "dynamic"):
            path = self.root / "masks" / f"{image_id}.{kind}.png"
            if path.exists():
                from .imutil import load_mask

                out.append(load_mask(path))
        return out

    # --- annotations --------------------------------------------------------------------

    def add_annotation(
        self,
        image_id: str,
        status: str,
        note: str,
        author: str,
        polygon=None,
        component_ids=None,
        date: dt.date | None = None,
        created: str | None = None,
    ) -> Annotation:
        cam = self.camera_or_raise(image_id)
        date = date or self.capture_date(image_id)
        if (polygon is None) == (component_ids is None):
            raise ValidationError("provide exactly one of polygon or component_ids")
        if polygon is not None:
            footprint = anchor_annotation_3d(
                np.asarray(polygon, dtype=float), cam.pose, cam.intrinsics, self.model, date
            )
        else:
            footprint = footprint_from_components(self.model, set(component_ids))
        ann_id = f"a{len(self.annotations):04d}"
        ann = Annotation(
            annotation_id=ann_id,
            author=author,
            created=created or "",
            status=status,
            note=note,
            source_image=image_id,
            footprint=footprint,
        )
        self.annotations[ann_id] = ann
        self._log_event({"op": "annotation_added", "id": ann_id, "image": image_id,
                         "status": status})
        self.bump()
        return ann

    def transfers_for(self, image_id: str, date: dt.date | None = None) -> list[Overlay]:
        cam = self.camera_or_raise(image_id)
        date = date or self.capture_date(image_id)
        masks = self.load_masks(image_id)
        overlays = []
        from .scene import render_depth_normals

        maps = render_depth_normals(self.model, cam.pose, cam.intrinsics, date=date)
        for ann_id in sorted(self.annotations):
            try:
                overlays.append(
                    transfer_annotation(
                        self.annotations[ann_id],
                        cam.pose,
                        cam.intrinsics,
                        self.model,
                        date,
                        image_id=image_id,
                        occlusion_masks=masks,
                        maps=maps,
                    )
                )
            except SiteAlignError:
                continue
        return overlays

    # --- compositing -----------------------------------------------------------------------

    def composite_image(self, spec: OverlaySpec) -> np.ndarray:
        cam = self.camera_or_raise(spec.image_id)
        photo = self.image_array(spec.image_id)
        masks = self.load_masks(spec.image_id) if spec.respect_occlusion else []
        return composite(photo, self.model, cam.pose, cam.intrinsics, spec, masks)

    def reveal_image(
        self, image_id: str, target_date: dt.date, region: np.ndarray | None, alpha: float = 1.0
    ) -> np.ndarray:
        cam = self.camera_or_raise(image_id)
        photo = self.image_array(image_id)
        stack = self.stack_covering(image_id)
        return reveal_4d(
            photo,
            region,
            target_date,
            self.capture_date(image_id),
            self.model,
            cam.pose,
            cam.intrinsics,
            stack=stack,
            image_id=image_id,
            alpha=alpha,
        )

    # --- evaluation ------------------------------------------------------------------------

    def evaluate(self, truth: dict, align: bool = True) -> dict:
        """Error triples against ground-truth cameras, via the similarity
        alignment protocol when the frames may differ."""
        truth_cams = {
            image_id: _camera_from_dict({"image": image_id, "is_anchor": False, **rec})
            for image_id, rec in truth["cameras"].items()
        }
        probe = np.array(truth.get("probe_points", []), dtype=float).reshape(-1, 3)
        if len(probe) < 3:
            raise ValidationError("truth file needs >= 3 probe points")
        shared = sorted(set(truth_cams) & set(self.cameras))
        if not shared:
            raise ValidationError("no registered camera matches the truth file")
        estimated = {i: self.cameras[i] for i in shared}
        alignment_mse = 0.0
        sim = None
        if align:
            # triangulate the probes with the estimated cameras from their
            # truth projections, then fit the similarity onto the truth points
            est_points = []
            for p in probe:
                obs = []
                for i in shared:
                    from .geometry import project

                    try:
                        px = project(p, truth_cams[i].pose, truth_cams[i].intrinsics)
                    except SiteAlignError:
                        continue
                    obs.append((estimated[i], px))
                if len(obs) >= 2:
                    try:
                        est_points.append((p, triangulate(obs, min_angle_deg=0.5).position))
                    except SiteAlignError:
                        continue
            if len(est_points) < 3:
                raise ValidationError("too few probe points triangulated for alignment")
            src = np.array([e for _, e in est_points])
            dst = np.array([t for t, _ in est_points])
            sim = fit_similarity(src, dst)
            alignment_mse = float(np.mean(np.sum((sim.apply(src) - dst) ** 2, axis=1)))
            estimated = {i: _transform_camera(estimated[i], sim) for i in shared}
        per_camera = {}
        for i in shared:
            e = camera_errors(estimated[i], truth_cams[i], probe)
            per_camera[i] = {
                "rotation_deg": e.rotation_deg,
                "translation_m": e.translation_m,
                "reprojection_pct": e.reprojection_pct,
            }
        means = {
            key: float(np.mean([v[key] for v in per_camera.values()]))
            for key in ("rotation_deg", "translation_m", "reprojection_pct")
        }
        return {
            "cameras": per_camera,
            "mean": means,
            "alignment_mse": alignment_mse,
            "similarity": None
            if sim is None
            else {
                "scale": sim.scale,
                "rotvec": [float(v) for v in sim.rotvec],
                "t": [float(v) for v in sim.t],
            },
        }

    def summary(self) -> dict:
        start, finish = self.model.date_span()
        return {
            "revision": self.revision,
            "config": self.config.to_dict(),
            "images": {
                i: {
                    "width": r.width,
                    "height": r.height,
                    "capture_time": r.capture_time,
                    "registered": i in self.cameras,
                    "anchor": i in self.anchors,
                }
                for i, r in sorted(self.images.items())
            },
            "cameras": [_camera_to_dict(self.cameras[i]) for i in sorted(self.cameras)],
            "pending_assists": dict(sorted(self.pending_assists.items())),
            "annotations": sorted(self.annotations),
            "masks": sorted(self.masks),
            "model_dates": {"start": start.isoformat(), "finish": finish.isoformat()},
            "schedule": {
                c.component_id: {"start": c.start.isoformat(), "finish": c.finish.isoformat()}
                for c in self.model.components
            },
        }

    def timeline(self) -> dict:
        start, finish = self.model.date_span()
        photo_dates = sorted(
            {
                self.capture_date(i).isoformat()
                for i in self.images
                if self.images[i].capture_time
            }
        )
        groups = []
        base = self.root / "cache" / "stacks"
        if base.exists():
            for ref in sorted(p.name for p in base.iterdir() if p.is_dir()):
                stack = tl.load_stack(base / ref)
                groups.append({"reference": ref, "members": stack.image_ids})
        return {
            "model": {"start": start.isoformat(), "finish": finish.isoformat()},
            "photo_dates": photo_dates,
            "viewpoint_groups": groups,
        }


def _transform_camera(cam: Camera, sim) -> Camera:
    """Apply a world similarity to a world-to-camera pose (depth rescaled)."""
    R_c = cam.pose.R
    R_s = sim.R
    R_new = R_c @ R_s.T
    t_new = sim.scale * cam.pose.t - R_new @ sim.t
    return Camera(
        image_id=cam.image_id,
        intrinsics=cam.intrinsics,
        pose=Pose.from_matrix(R_new, t_new),
        is_anchor=cam.is_anchor,
    )


def _annotation_to_dict(a: Annotation) -> dict:
    return {
        "id": a.annotation_id,
        "author": a.author,
        "created": a.created,
        "status": a.status,
        "note": a.note,
        "source_image": a.source_image,
        "footprint": {
            "component_ids": sorted(a.footprint.component_ids),
            "dropped_fraction": a.footprint.dropped_fraction,
            "patches": [
                {
                    "triangle": p.triangle,
                    "barycentric": [[float(v) for v in row] for row in p.barycentric],
                }
                for p in a.footprint.patches
            ],
        },
    }


def _annotation_from_dict(d: dict) -> Annotation:
    fp = d["footprint"]
    return Annotation(
        annotation_id=d["id"],
        author=d["author"],
        created=d["created"],
        status=d["status"],
        note=d["note"],
        source_image=d["source_image"],
        footprint=Footprint(
            patches=[
                FootprintPatch(triangle=p["triangle"], barycentric=np.array(p["barycentric"]))
                for p in fp.get("patches", [])
            ],
            component_ids=set(fp.get("component_ids", [])),
            dropped_fraction=fp.get("dropped_fraction", 0.0),
        ),
    )


def _exif_metadata(img: Image.Image, width: int) -> tuple[str | None, float | None]:
    """Best-effort capture time and pixel focal from EXIF."""
    try:
        exif = img.getexif()
    except Exception:
        return None, None
    if not exif:
        return None, None
    capture = None
    focal = None
    raw = exif.get(306) or exif.get(36867)  # DateTime / DateTimeOriginal
    if raw:
        try:
            capture = dt.datetime.strptime(str(raw), "%Y:%m:%d %H:%M:%S").isoformat()
        except ValueError:
            capture = None
    f35 = exif.get(41989)  # FocalLengthIn35mmFilm
    if f35:
        focal = width * float(f35) / 36.0
    return capture, focal
