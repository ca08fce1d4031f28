"""The simplified building model: schedule-stamped, typed mesh components.

Geometry is a triangle mesh (meters) loaded from ASCII OBJ ``v``/``f``
lines. Semantics come from a JSON manifest mapping each component id to
name/type/group/material, an ISO-8601 schedule window, and a contiguous
face range. Every triangle must belong to exactly one component.

Rendering and picking share one intersection routine (Moller-Trumbore),
exposed as a brute-force vectorized pass over candidate triangles and a
BVH-accelerated single-ray query; both break ties toward the lowest
triangle index so their results are interchangeable.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MissedModel, ValidationError
from .geometry import Intrinsics, Pose, undistort

_EPS = 1e-12


def _normalized_rows(d: np.ndarray) -> np.ndarray:
    """Unit rows via the one normalization formula shared by all ray paths
    (keeps single-ray and batched raycasts bitwise consistent)."""
    n = np.sqrt(np.sum(d * d, axis=1, keepdims=True))
    if np.any(n < _EPS):
        raise ValidationError("ray direction must be non-zero")
    return d / n


@dataclass(frozen=True)
class Component:
    """A semantically meaningful chunk of the building."""

    component_id: str
    name: str
    element_type: str
    group: str
    material_name: str
    start: dt.date
    finish: dt.date
    face_start: int
    face_count: int

    def __post_init__(self):
        if self.start > self.finish:
            raise ValidationError(
                f"component {self.component_id!r}: start {self.start} after finish {self.finish}"
            )
        if self.face_count <= 0 or self.face_start < 0:
            raise ValidationError(f"component {self.component_id!r}: bad face range")

    @property
    def face_range(self) -> range:
        return range(self.face_start, self.face_start + self.face_count)


@dataclass(frozen=True)
class RayHit:
    component_id: str
    triangle: int
    t: float
    point: np.ndarray
    normal: np.ndarray


@dataclass(frozen=True)
class Snapshot:
    """Component visibility at a date: started components are visible;
    those not yet finished carry the partial flag."""

    date: dt.date
    visible: frozenset[str]
    partial: frozenset[str]


class BuildingModel:
    """Immutable triangle mesh partitioned into scheduled components."""

    def __init__(self, vertices: np.ndarray, triangles: np.ndarray, components: list[Component]):
        self.vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(triangles, dtype=int).reshape(-1, 3)
        if len(self.triangles) and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ValidationError("triangle indices out of range")
        ids = [c.component_id for c in components]
        if len(set(ids)) != len(ids):
            raise ValidationError("component ids must be unique")
        covered = np.zeros(len(self.triangles), dtype=int)
        for c in components:
            if c.face_start + c.face_count > len(self.triangles):
                raise ValidationError(f"component {c.component_id!r} face range beyond mesh")
            covered[c.face_start : c.face_start + c.face_count] += 1
        if np.any(covered > 1):
            raise ValidationError("component face ranges overlap")
        if np.any(covered == 0):
            raise ValidationError("every triangle must belong to exactly one component")
        self.components = list(components)
        self.by_id = {c.component_id: c for c in components}

        self._tri_component = np.empty(len(self.triangles), dtype=object)
        for c in components:
            self._tri_component[c.face_start : c.face_start + c.face_count] = c.component_id

        v = self.vertices
        t = self.triangles
        self._v0 = v[t[:, 0]]
        self._e1 = v[t[:, 1]] - self._v0
        self._e2 = v[t[:, 2]] - self._v0
        n = np.cross(self._e1, self._e2)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        self._normals = n / np.maximum(norm, _EPS)
        self._bvh = _Bvh(v, t) if len(t) else None

    # --- semantics ---------------------------------------------------------

    def component_of_triangle(self, tri: int) -> str:
        return self._tri_component[tri]

    def snapshot_at(self, date: dt.date) -> Snapshot:
        """Components whose schedule has started by ``date``; the ones not
        yet finished are flagged partial (under construction)."""
        visible = frozenset(c.component_id for c in self.components if c.start <= date)
        partial = frozenset(
            c.component_id for c in self.components if c.start <= date < c.finish
        )
        return Snapshot(date=date, visible=visible, partial=partial)

    def triangle_mask(self, active: "frozenset[str] | set[str] | None") -> np.ndarray:
        mask = np.zeros(len(self.triangles), dtype=bool)
        if active is None:
            mask[:] = True
            return mask
        for cid in active:
            c = self.by_id.get(cid)
            if c is None:
                raise ValidationError(f"unknown component id {cid!r}")
            mask[c.face_start : c.face_start + c.face_count] = True
        return mask

    def date_span(self) -> tuple[dt.date, dt.date]:
        return (
            min(c.start for c in self.components),
            max(c.finish for c in self.components),
        )

    def bounding_radius(self) -> tuple[np.ndarray, float]:
        center = (self.vertices.max(axis=0) + self.vertices.min(axis=0)) / 2.0
        radius = float(np.linalg.norm(self.vertices - center, axis=1).max())
        return center, radius

    # --- intersection ------------------------------------------------------

    def _mt_kernel(self, origins, dirs, tri_idx):
        """Moller-Trumbore for (r,) rays x (m,) triangle indices.

        One shared kernel so the BVH, the brute-force oracle, and the
        renderer produce bitwise-identical (t, hit) grids of shape (r, m).
        """
        v0 = self._v0[tri_idx]
        e1 = self._e1[tri_idx]
        e2 = self._e2[tri_idx]
        pvec = np.cross(dirs[:, None, :], e2[None, :, :])
        det = np.einsum("rtj,tj->rt", pvec, e1)
        ok = np.abs(det) > _EPS
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = origins[:, None, :] - v0[None, :, :]
        u = np.einsum("rtj,rtj->rt", tvec, pvec) * inv
        qvec = np.cross(tvec, e1[None, :, :])
        v = np.einsum("rtj,rj->rt", qvec, dirs) * inv
        t = np.einsum("rtj,tj->rt", qvec, e2) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1.0) & (t > _EPS)
        return t, hit

    def raycast(
        self,
        origin: np.ndarray,
        direction: np.ndarray,
        active: "frozenset[str] | set[str] | None" = None,
    ) -> RayHit | None:
        """Nearest intersection among active components, or None (miss).

        Ties on t fall to the lowest triangle index.
        """
        origin = np.asarray(origin, dtype=float).reshape(3)
        direction = _normalized_rows(np.asarray(direction, dtype=float).reshape(1, 3))[0]
        mask = self.triangle_mask(active)
        if self._bvh is None or not mask.any():
            return None
        best = self._bvh.nearest(self, origin, direction, mask)
        if best is None:
            return None
        t, tri = best
        return self._hit(origin, direction, t, tri)

    def _hit(self, origin, direction, t, tri) -> RayHit:
        return RayHit(
            component_id=self._tri_component[tri],
            triangle=int(tri),
            t=float(t),
            point=origin + t * direction,
            normal=self._normals[tri].copy(),
        )

    def raycast_brute(self, origin, direction, active=None) -> RayHit | None:
        """Reference all-triangles intersection (oracle for the BVH)."""
        origin = np.asarray(origin, dtype=float).reshape(3)
        direction = _normalized_rows(np.asarray(direction, dtype=float).reshape(1, 3))[0]
        mask = self.triangle_mask(active)
        idx = np.flatnonzero(mask)
        if len(idx) == 0:
            return None
        t, hit = self._mt_kernel(origin[None, :], direction[None, :], idx)
        t = np.where(hit, t, np.inf)[0]
        k = int(np.argmin(t))  # argmin takes the first (lowest index) on ties
        if not np.isfinite(t[k]):
            return None
        return self._hit(origin, direction, t[k], int(idx[k]))

    def raycast_batch(self, origins, directions, active=None):
        """Vectorized nearest-hit for (n, 3) ray batches.

        Returns (t, tri, hit_mask); ties on t fall to the lowest triangle
        index. Bitwise-consistent with :meth:`raycast` (shared kernel).
        """
        origins = np.atleast_2d(np.asarray(origins, dtype=float))
        directions = _normalized_rows(np.atleast_2d(np.asarray(directions, dtype=float)))
        mask = self.triangle_mask(active)
        idx = np.flatnonzero(mask)
        n = len(origins)
        best_t = np.full(n, np.inf)
        best_tri = np.full(n, -1, dtype=int)
        if len(idx) == 0:
            return best_t, best_tri, np.zeros(n, dtype=bool)
        chunk = max(1, int(4e6 / max(len(idx), 1)))
        for s in range(0, n, chunk):
            t, hit = self._mt_kernel(origins[s : s + chunk], directions[s : s + chunk], idx)
            t = np.where(hit, t, np.inf)
            k = np.argmin(t, axis=1)
            rows = np.arange(t.shape[0])
            tmin = t[rows, k]
            found = np.isfinite(tmin)
            best_t[s : s + chunk] = np.where(found, tmin, np.inf)
            best_tri[s : s + chunk] = np.where(found, idx[k], -1)
        return best_t, best_tri, best_tri >= 0


@dataclass
class _BvhNode:
    lo: np.ndarray
    hi: np.ndarray
    left: int = -1
    right: int = -1
    tris: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))


class _Bvh:
    """Median-split bounding volume hierarchy, leaf size 4."""

    def __init__(self, vertices: np.ndarray, triangles: np.ndarray):
        tri_pts = vertices[triangles]  # (m, 3, 3)
        self._lo = tri_pts.min(axis=1)
        self._hi = tri_pts.max(axis=1)
        centroids = tri_pts.mean(axis=1)
        self.nodes: list[_BvhNode] = []
        order = np.arange(len(triangles))
        self._build(order, centroids)

    def _build(self, idx: np.ndarray, centroids: np.ndarray) -> int:
        node = _BvhNode(lo=self._lo[idx].min(axis=0), hi=self._hi[idx].max(axis=0))
        self.nodes.append(node)
        me = len(self.nodes) - 1
        if len(idx) <= 4:
            node.tris = np.sort(idx)
            return me
        c = centroids[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        half = len(idx) // 2
        part = idx[np.argsort(c[:, axis], kind="stable")]
        node.left = self._build(part[:half], centroids)
        node.right = self._build(part[half:], centroids)
        return me

    def nearest(self, model: BuildingModel, origin, direction, mask) -> tuple[float, int] | None:
        with np.errstate(divide="ignore"):
            inv = np.where(np.abs(direction) > _EPS, 1.0 / direction, np.inf)
        best_t = np.inf
        best_tri = -1
        stack = [0]
        while stack:
            node = self.nodes[stack.pop()]
            with np.errstate(invalid="ignore"):
                t0 = (node.lo - origin) * inv
                t1 = (node.hi - origin) * inv
            t0, t1 = np.nan_to_num(t0, nan=-np.inf), np.nan_to_num(t1, nan=np.inf)
            tmin = np.minimum(t0, t1).max()
            tmax = np.maximum(t0, t1).min()
            if tmax < max(tmin, 0.0) or tmin > best_t:
                continue
            if node.left < 0:
                live = node.tris[mask[node.tris]]
                if len(live) == 0:
                    continue
                t, hit = model._mt_kernel(origin[None, :], direction[None, :], live)
                t = np.where(hit, t, np.inf)[0]
                k = int(np.argmin(t))
                # a tie on t goes to the lowest triangle index
                if t[k] < best_t or (t[k] == best_t and np.isfinite(t[k]) and live[k] < best_tri):
                    best_t = float(t[k])
                    best_tri = int(live[k])
            else:
                stack.append(node.right)
                stack.append(node.left)
        if best_tri < 0 or not np.isfinite(best_t):
            return None
        return best_t, best_tri


# --- rendering and picking ---------------------------------------------------


def camera_rays(camera_pose: Pose, intr: Intrinsics, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World rays through the given float pixel coordinates."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
    if intr.k1 == 0.0 and intr.k2 == 0.0:
        xy = (pixels - intr.principal_point) / intr.focal
    else:
        xy = np.array([undistort(p, intr) for p in pixels])
    d_cam = np.hstack([xy, np.ones((len(xy), 1))])
    R = camera_pose.R
    d_world = d_cam @ R  # == R.T @ d per row
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origin = camera_pose.center
    return np.broadcast_to(origin, d_world.shape).copy(), d_world


@dataclass
class RenderMaps:
    """Per-pixel raycast output. ``depth`` is camera-space z in meters
    (inf where no hit), ``component`` holds component indices into
    ``component_ids`` (-1 for background), ``triangle`` is -1 on misses."""

    depth: np.ndarray
    normal: np.ndarray
    triangle: np.ndarray
    component: np.ndarray
    component_ids: list[str]

    def component_id_at(self, row: int, col: int) -> str | None:
        k = self.component[row, col]
        return self.component_ids[k] if k >= 0 else None


def render_depth_normals(
    model: BuildingModel,
    camera_pose: Pose,
    intr: Intrinsics,
    date: dt.date | None = None,
    active: "set[str] | None" = None,
) -> RenderMaps:
    """Raycast every pixel center (col + 0.5, row + 0.5) through the model.

    ``date`` filters components by schedule snapshot; ``active`` overrides
    the filter with an explicit component set.
    """
    if active is None and date is not None:
        active = set(model.snapshot_at(date).visible)
    w, h = intr.width, intr.height
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    pixels = np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5], axis=1)
    origins, dirs = camera_rays(camera_pose, intr, pixels)
    t, tri, hit = model.raycast_batch(origins, dirs, active)
    # camera-space depth = t * (z component of the camera-frame direction)
    dz = dirs @ camera_pose.R.T[:, 2]
    depth = np.where(hit, t * dz, np.inf).reshape(h, w)
    triangle = np.where(hit, tri, -1).reshape(h, w)
    comp_ids = [c.component_id for c in model.components]
    comp_index = {cid: i for i, cid in enumerate(comp_ids)}
    tri_comp = np.array([comp_index[c] for c in model._tri_component], dtype=int)
    component = np.where(triangle >= 0, tri_comp[np.maximum(triangle, 0)], -1)
    normal = np.zeros((h, w, 3))
    m = triangle >= 0
    normal[m] = model._normals[triangle[m]]
    return RenderMaps(
        depth=depth,
        normal=normal,
        triangle=triangle,
        component=component,
        component_ids=comp_ids,
    )


def pick_model_point(
    model: BuildingModel,
    camera_pose: Pose,
    intr: Intrinsics,
    pixel: np.ndarray,
    date: dt.date,
) -> np.ndarray:
    """Model-surface point under a pixel, honoring the schedule snapshot.

    Raises
    ------
    MissedModel
        The pixel's ray hits nothing that exists at ``date``.
    ValidationError
        Pixel outside the image bounds.
    """
    pixel = np.asarray(pixel, dtype=float).reshape(2)
    if not (0 <= pixel[0] <= intr.width and 0 <= pixel[1] <= intr.height):
        raise ValidationError(f"pixel {pixel} outside image bounds")
    origins, dirs = camera_rays(camera_pose, intr, pixel[None, :])
    hit = model.raycast(origins[0], dirs[0], active=set(model.snapshot_at(date).visible))
    if hit is None:
        raise MissedModel(f"no surface under pixel {pixel} at {date}")
    return hit.point


# --- I/O ---------------------------------------------------------------------


def load_mesh(path) -> tuple[np.ndarray, np.ndarray]:
    """ASCII OBJ subset: ``v x y z`` and ``f i j k`` (1-based, triangles).

    Polygonal faces are fan-triangulated.
    """
    vertices = []
    faces = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ValidationError(f"{path}:{lineno}: vertex needs 3 coordinates")
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) - 1 for tok in parts[1:]]
                if len(idx) < 3:
                    raise ValidationError(f"{path}:{lineno}: face needs >= 3 vertices")
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    return np.asarray(vertices, dtype=float), np.asarray(faces, dtype=int)


def save_mesh(path, vertices: np.ndarray, triangles: np.ndarray) -> None:
    with open(path, "w") as fh:
        for v in np.asarray(vertices, dtype=float):
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for t in np.asarray(triangles, dtype=int):
            fh.write(f"f {int(t[0]) + 1} {int(t[1]) + 1} {int(t[2]) + 1}\n")


def load_manifest(path) -> list[Component]:
    """JSON sidecar: component id -> name/type/group/material/schedule/faces."""
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict) or "components" not in data:
        raise ValidationError(f"{path}: manifest must be an object with a 'components' map")
    out = []
    for cid, rec in data["components"].items():
        try:
            out.append(
                Component(
                    component_id=cid,
                    name=rec["name"],
                    element_type=rec["type"],
                    group=rec["group"],
                    material_name=rec["material"],
                    start=dt.date.fromisoformat(rec["start"]),
                    finish=dt.date.fromisoformat(rec["finish"]),
                    face_start=int(rec["faces"][0]),
                    face_count=int(rec["faces"][1]),
                )
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{path}: component {cid!r}: missing field {exc}") from exc
    return sorted(out, key=lambda c: c.face_start)


def save_manifest(path, components: list[Component]) -> None:
    data = {
        "components": {
            c.component_id: {
                "name": c.name,
                "type": c.element_type,
                "group": c.group,
                "material": c.material_name,
                "start": c.start.isoformat(),
                "finish": c.finish.isoformat(),
                "faces": [c.face_start, c.face_count],
            }
            for c in components
        }
    }
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(mesh_path, manifest_path) -> BuildingModel:
    vertices, triangles = load_mesh(mesh_path)
    components = load_manifest(manifest_path)
    return BuildingModel(vertices, triangles, components)
