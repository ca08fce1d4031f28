"""Region annotations with schedule-status semantics and cross-view
transfer.

An annotation is authored in one image as a polygon (or a component set),
lifted to the model surface as a footprint (triangle + barycentric
samples), and stored that way: any registered view, including photos
added later, renders it by projecting the footprint and clipping against
depth visibility, the schedule snapshot, and that view's occlusion masks.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import MissedModel, NothingOnModel, NotVisible, UnknownId, ValidationError
from .geometry import Intrinsics, Pose, project_many
from .imutil import polygon_is_simple, rasterize_polygon
from .scene import BuildingModel, RenderMaps, render_depth_normals

STATUSES = ("ahead", "on-time", "behind", "deviation")

# fill colors per schedule status; alpha is the overlay fill opacity
STATUS_COLORS = {
    "ahead": (0.13, 0.65, 0.21),
    "on-time": (1.0, 1.0, 1.0),
    "behind": (0.82, 0.12, 0.12),
    "deviation": (0.10, 0.15, 0.55),
}
STATUS_FILL_ALPHA = 0.45

SELECTION_MODES = ("element", "type", "group", "face", "lasso", "brush", "occlusion-region")


@dataclass
class Selection:
    mode: str
    pixel_mask: np.ndarray
    component_ids: set[str] = field(default_factory=set)


@dataclass(frozen=True)
class FootprintPatch:
    """Barycentric samples of one triangle covered by an annotation."""

    triangle: int
    barycentric: np.ndarray  # (n, 3)


@dataclass
class Footprint:
    """Model-surface anchoring of an annotation."""

    patches: list[FootprintPatch] = field(default_factory=list)
    component_ids: set[str] = field(default_factory=set)
    dropped_fraction: float = 0.0

    def world_points(self, model: BuildingModel) -> np.ndarray:
        pts = []
        for patch in self.patches:
            tri = model.triangles[patch.triangle]
            corners = model.vertices[tri]
            pts.append(patch.barycentric @ corners)
        if not pts:
            return np.zeros((0, 3))
        return np.vstack(pts)

    def triangles(self) -> list[int]:
        return [p.triangle for p in self.patches]


@dataclass
class Annotation:
    annotation_id: str
    author: str
    created: str  # ISO-8601
    status: str
    note: str
    source_image: str
    footprint: Footprint

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValidationError(f"unknown status {self.status!r}; expected one of {STATUSES}")


@dataclass
class Overlay:
    """An annotation projected into one view."""

    annotation_id: str
    image_id: str
    mask: np.ndarray
    outlines: list[np.ndarray]  # list of (n, 2) pixel polygons
    status: str
    color: tuple
    fill_alpha: float
    visible_fraction: float
    note: str = ""



def resolve_selection(
    mode: str,
    seed,
    camera_pose: Pose,
    intr: Intrinsics,
    model: BuildingModel,
    date: dt.date,
    masks: dict[str, np.ndarray] | None = None,
    maps: RenderMaps | None = None,
) -> Selection:
    """Resolve a marquee-tool selection into pixels + components.

    ``seed`` depends on the mode: a pixel for element/type/group/face and
    occlusion-region, a vertex list for lasso, (points, radius) for brush.
    """
    if mode not in SELECTION_MODES:
        raise ValidationError(f"unknown selection mode {mode!r}")
    if maps is None:
        maps = render_depth_normals(model, camera_pose, intr, date=date)
    h, w = maps.depth.shape

    if mode in ("element", "type", "group", "face"):
        pixel = np.asarray(seed, dtype=float).reshape(2)
        col = int(pixel[0])
        row = int(pixel[1])
        if not (0 <= col < w and 0 <= row < h):
            raise ValidationError(f"seed pixel {pixel} outside image")
        comp_idx = maps.component[row, col]
        if comp_idx < 0:
            raise MissedModel(f"no component under pixel {pixel}")
        comp_id = maps.component_ids[comp_idx]
        if mode == "element":
            return Selection(mode, maps.component == comp_idx, {comp_id})
        if mode == "face":
            tri = maps.triangle[row, col]
            return Selection(mode, maps.triangle == tri, {comp_id})
        tag = (
            model.by_id[comp_id].element_type if mode == "type" else model.by_id[comp_id].group
        )
        members = {
            c.component_id
            for c in model.components
            if (c.element_type if mode == "type" else c.group) == tag
        }
        member_idx = [maps.component_ids.index(m) for m in members if m in maps.component_ids]
        mask = np.isin(maps.component, member_idx)
        return Selection(mode, mask, members)

    if mode == "lasso":
        vertices = np.asarray(seed, dtype=float).reshape(-1, 2)
        if len(vertices) < 3 or not polygon_is_simple(vertices):
            raise ValidationError("lasso polygon must have >= 3 vertices and be simple")
        mask = rasterize_polygon(vertices, (h, w))
        comps = {maps.component_ids[k] for k in np.unique(maps.component[mask]) if k >= 0}
        return Selection(mode, mask, comps)

    if mode == "brush":
        points, radius = seed
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        yy, xx = np.mgrid[0:h, 0:w]
        mask = np.zeros((h, w), dtype=bool)
        for p in points:
            mask |= (xx - p[0]) ** 2 + (yy - p[1]) ** 2 <= radius**2
        comps = {maps.component_ids[k] for k in np.unique(maps.component[mask]) if k >= 0}
        return Selection(mode, mask, comps)

    # occlusion-region: connected component of a mask containing the seed
    pixel = np.asarray(seed, dtype=float).reshape(2)
    if not masks:
        raise ValidationError("occlusion-region selection requires an occlusion mask")
    base = next(iter(masks.values())) if len(masks) == 1 else masks.get("static", next(iter(masks.values())))
    labeled, _ = ndimage.label(base)
    lbl = labeled[int(pixel[1]), int(pixel[0])]
    if lbl == 0:
        raise MissedModel(f"seed pixel {pixel} is not inside an occlusion region")
    return Selection(mode, labeled == lbl, set())


def anchor_annotation_3d(
    pixel_mask_or_polygon,
    camera_pose: Pose,
    intr: Intrinsics,
    model: BuildingModel,
    date: dt.date,
    maps: RenderMaps | None = None,
) -> Footprint:
    """Lift pixel-space annotation geometry onto the model surface.

    Accepts a boolean pixel mask or a polygon vertex list. Pixels that
    miss the model are dropped and counted in ``dropped_fraction``.

    Raises
    ------
    NothingOnModel
        Every covered pixel misses the model.
    """
    if maps is None:
        maps = render_depth_normals(model, camera_pose, intr, date=date)
    h, w = maps.depth.shape
    if isinstance(pixel_mask_or_polygon, np.ndarray) and pixel_mask_or_polygon.dtype == bool:
        mask = pixel_mask_or_polygon
    else:
        vertices = np.asarray(pixel_mask_or_polygon, dtype=float).reshape(-1, 2)
        if len(vertices) < 3 or not polygon_is_simple(vertices):
            raise ValidationError("annotation polygon must have >= 3 vertices and be simple")
        mask = rasterize_polygon(vertices, (h, w))
    total = int(mask.sum())
    if total == 0:
        raise NothingOnModel("annotation covers no pixels")
    on_model = mask & (maps.triangle >= 0)
    kept = int(on_model.sum())
    if kept == 0:
        raise NothingOnModel("annotation geometry entirely misses the model")

    rows, cols = np.nonzero(on_model)
    tris = maps.triangle[rows, cols]
    # pixel centers -> ray hits -> barycentric coordinates per triangle
    from .scene import camera_rays

    pixels = np.stack([cols + 0.5, rows + 0.5], axis=1).astype(float)
    origins, dirs = camera_rays(camera_pose, intr, pixels)
    depth = maps.depth[rows, cols]
    dz = dirs @ camera_pose.R.T[:, 2]
    points = origins + dirs * (depth / dz)[:, None]

    patches = []
    comp_ids = set()
    for tri in np.unique(tris):
        sel = tris == tri
        corners = model.vertices[model.triangles[tri]]
        bary = _barycentric(points[sel], corners)
        patches.append(FootprintPatch(triangle=int(tri), barycentric=bary))
        comp_ids.add(model.component_of_triangle(int(tri)))
    return Footprint(
        patches=patches,
        component_ids=comp_ids,
        dropped_fraction=float((total - kept) / total),
    )


def footprint_from_components(model: BuildingModel, component_ids: set[str]) -> Footprint:
    """Footprint covering whole components (their full surfaces)."""
    patches = []
    for cid in sorted(component_ids):
        comp = model.by_id.get(cid)
        if comp is None:
            raise UnknownId(f"unknown component {cid!r}")
        for tri in comp.face_range:
            patches.append(
                FootprintPatch(
                    triangle=tri,
                    barycentric=np.array(
                        [[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0], [1 / 3, 1 / 3, 1 / 3]]
                    ),
                )
            )
    return Footprint(patches=patches, component_ids=set(component_ids))


def _barycentric(points: np.ndarray, corners: np.ndarray) -> np.ndarray:
    v0 = corners[1] - corners[0]
    v1 = corners[2] - corners[0]
    v2 = points - corners[0]
    d00 = v0 @ v0
    d01 = v0 @ v1
    d11 = v1 @ v1
    d20 = v2 @ v0
    d21 = v2 @ v1
    denom = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / denom
    w = (d00 * d21 - d01 * d20) / denom
    u = 1.0 - v - w
    return np.stack([u, v, w], axis=1)


def transfer_annotation(
    annotation: Annotation,
    target_pose: Pose,
    target_intr: Intrinsics,
    model: BuildingModel,
    date: dt.date,
    image_id: str = "",
    occlusion_masks: "list[np.ndarray] | None" = None,
    maps: RenderMaps | None = None,
    depth_tolerance: float = 0.02,
) -> Overlay:
    """Project an annotation's footprint into a target view.

    Footprint samples are clipped by the schedule snapshot (triangles of
    components absent at ``date`` drop out), by depth visibility against
    the id/depth map, and by the provided occlusion masks.

    Raises
    ------
    NotVisible
        The footprint is entirely hidden in this view.
    """
    if maps is None:
        maps = render_depth_normals(model, target_pose, target_intr, date=date)
    h, w = maps.depth.shape
    visible_comps = model.snapshot_at(date).visible

    if annotation.footprint.component_ids and not annotation.footprint.patches:
        keep = annotation.footprint.component_ids & visible_comps
        idx = [maps.component_ids.index(c) for c in keep if c in maps.component_ids]
        mask = np.isin(maps.component, idx)
    else:
        fp = annotation.footprint
        world = fp.world_points(model)
        tris = np.concatenate(
            [[p.triangle] * len(p.barycentric) for p in fp.patches]
        ).astype(int)
        comp_ok = np.array(
            [model.component_of_triangle(int(t)) in visible_comps for t in tris]
        )
        pix, in_front = project_many(world, target_pose, target_intr)
        cam_z = target_pose.apply(world)[:, 2]
        cols = np.floor(pix[:, 0]).astype(np.int64, casting="unsafe", copy=False)
        rows = np.floor(pix[:, 1]).astype(np.int64, casting="unsafe", copy=False)
        inb = in_front & (pix[:, 0] >= 0) & (pix[:, 0] < w) & (pix[:, 1] >= 0) & (pix[:, 1] < h)
        mask = np.zeros((h, w), dtype=bool)
        keep = inb & comp_ok
        rows_k = rows[keep]
        cols_k = cols[keep]
        depth_ok = np.abs(maps.depth[rows_k, cols_k] - cam_z[keep]) <= (
            depth_tolerance * np.maximum(cam_z[keep], 1.0)
        )
        mask[rows_k[depth_ok], cols_k[depth_ok]] = True
        # close single-pixel sampling gaps without growing the outline
        mask = ndimage.binary_closing(mask, structure=np.ones((3, 3)))

    total_before_occlusion = int(mask.sum())
    for om in occlusion_masks or []:
        mask &= ~om
    if not mask.any():
        raise NotVisible(
            f"annotation {annotation.annotation_id!r} is not visible in {image_id!r}"
        )
    denom = max(total_before_occlusion, 1)
    return Overlay(
        annotation_id=annotation.annotation_id,
        image_id=image_id,
        mask=mask,
        outlines=mask_outlines(mask),
        status=annotation.status,
        color=STATUS_COLORS[annotation.status],
        fill_alpha=STATUS_FILL_ALPHA,
        visible_fraction=float(mask.sum() / denom),
        note=annotation.note,
    )


def mask_outlines(mask: np.ndarray) -> list[np.ndarray]:
    """Ordered boundary polygons of each connected mask component
    (Moore neighborhood tracing with a backtrack pointer)."""
    labeled, n = ndimage.label(mask)
    h, w = mask.shape
    # neighbors in clockwise order starting north
    ring = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]
    ring_index = {m: i for i, m in enumerate(ring)}
    outlines = []
    for lbl in range(1, n + 1):
        comp = labeled == lbl
        rows, cols = np.nonzero(comp)
        start = (int(rows[0]), int(cols[0]))  # topmost-leftmost via row-major order
        back = (start[0], start[1] - 1)  # west neighbor: outside by construction
        boundary = [start]
        cur = start
        for _ in range(4 * (len(rows) + 1) * 2):
            offset = (back[0] - cur[0], back[1] - cur[1])
            b_idx = ring_index[offset]
            found = None
            prev = back
            for k in range(1, 9):
                d = (b_idx + k) % 8
                ny, nx = cur[0] + ring[d][0], cur[1] + ring[d][1]
                if 0 <= ny < h and 0 <= nx < w and comp[ny, nx]:
                    found = (ny, nx)
                    break
                prev = (ny, nx)
            if found is None:
                break  # isolated pixel
            back = prev
            cur = found
            if cur == start and len(boundary) > 1:
                break
            boundary.append(cur)
        outlines.append(np.array([(c, r) for r, c in boundary], dtype=float))
    return outlines
