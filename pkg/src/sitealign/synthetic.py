"""Synthetic construction-site generator: a scheduled building model,
ground-truth cameras, and procedurally textured renders.

Everything here is deterministic given a seed. The textures are 3D
(attached to world coordinates), so the same surface point renders the
same color from every viewpoint, which is what makes the rendered
collections matchable by the feature pipeline. The bundled demo project
for the CLI and the test fixtures both come from this module.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, Pose
from .imutil import save_image
from .registration import Camera, Correspondence2D3D
from .scene import BuildingModel, Component, save_manifest, save_mesh

DEFAULT_LIGHT = np.array([1.0, 1.0, -1.0]) / np.sqrt(3.0)  # from azimuth 135, tilted down


def box_mesh(center, size) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box: 8 vertices, 12 outward-wound triangles."""
    c = np.asarray(center, dtype=float)
    s = np.asarray(size, dtype=float) / 2.0
    corners = (
        np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float) * s
        + c
    )
    quads = [
        (0, 1, 3, 2),  # -x
        (4, 6, 7, 5),  # +x
        (0, 4, 5, 1),  # -y
        (2, 3, 7, 6),  # +y
        (0, 2, 6, 4),  # -z
        (1, 5, 7, 3),  # +z
    ]
    tris = []
    for a, b, c2, d in quads:
        tris += [[a, b, c2], [a, c2, d]]
    return corners, np.asarray(tris, dtype=int)


def merge_meshes(parts: list[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Concatenate (vertices, triangles) parts; returns face offsets per part."""
    verts = []
    tris = []
    offsets = []
    v0 = 0
    f0 = 0
    for v, t in parts:
        verts.append(v)
        tris.append(t + v0)
        offsets.append(f0)
        v0 += len(v)
        f0 += len(t)
    return np.vstack(verts), np.vstack(tris), offsets


def _hash_lattice(ix, iy, iz, seed: int) -> np.ndarray:
    h = (
        ix.astype(np.uint64) * np.uint64(73856093)
        ^ iy.astype(np.uint64) * np.uint64(19349663)
        ^ iz.astype(np.uint64) * np.uint64(83492791)
        ^ np.uint64(seed * 2654435761 % (1 << 63))
    )
    h ^= h >> np.uint64(13)
    h *= np.uint64(0x2545F4914F6CDD1D)
    h ^= h >> np.uint64(31)
    return (h % np.uint64(1 << 24)).astype(np.float64) / float(1 << 24)


def value_noise(points: np.ndarray, scale: float, seed: int = 0) -> np.ndarray:
    """Trilinear value noise on a world-space lattice, in [0, 1)."""
    p = np.asarray(points, dtype=np.float64) / scale
    i = np.floor(p).astype(np.int64)
    f = p - i
    out = np.zeros(len(p))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (
                    (f[:, 0] if dx else 1 - f[:, 0])
                    * (f[:, 1] if dy else 1 - f[:, 1])
                    * (f[:, 2] if dz else 1 - f[:, 2])
                )
                out += w * _hash_lattice(i[:, 0] + dx, i[:, 1] + dy, i[:, 2] + dz, seed)
    return out


def checker(points: np.ndarray, scale: float) -> np.ndarray:
    """3D checkerboard parity in {0, 1}."""
    cells = np.floor(np.asarray(points, dtype=np.float64) / scale).astype(np.int64)
    return ((cells[:, 0] + cells[:, 1] + cells[:, 2]) % 2).astype(np.float64)


_MATERIAL_BASE = {
    "concrete": (0.62, 0.60, 0.58),
    "brick": (0.62, 0.32, 0.24),
    "glass": (0.45, 0.62, 0.72),
    "steel": (0.48, 0.50, 0.55),
    "soil": (0.45, 0.36, 0.26),
    "asphalt": (0.30, 0.30, 0.32),
    "wood": (0.55, 0.42, 0.26),
}

# texture contrast per material: the ground is kept low-contrast so facade
# features dominate the match sets of the front photo cluster
_MATERIAL_CONTRAST = {"asphalt": 0.30, "soil": 0.10}


def cell_noise(points: np.ndarray, scale: float, seed: int = 0) -> np.ndarray:
    """Piecewise-constant lattice noise in [0, 1): one random level per cell."""
    i = np.floor(np.asarray(points, dtype=np.float64) / scale).astype(np.int64)
    return _hash_lattice(i[:, 0], i[:, 1], i[:, 2], seed)


def surface_color(points: np.ndarray, material: str, seed: int = 0) -> np.ndarray:
    """Deterministic high-contrast 3D texture for a material.

    Multi-octave random block mosaic: edges and corners everywhere, yet no
    two neighborhoods repeat, so feature descriptors stay distinctive (a
    periodic pattern like a checkerboard aliases the matcher).
    """
    base = np.array(_MATERIAL_BASE.get(material, (0.5, 0.5, 0.5)))
    v = (
        0.55 * cell_noise(points, 0.45, seed=seed + 1)
        + 0.30 * cell_noise(points, 0.18, seed=seed + 2)
        + 0.15 * cell_noise(points, 0.08, seed=seed + 3)
    )
    contrast = _MATERIAL_CONTRAST.get(material, 0.80)
    mod = 1.05 - contrast + contrast * v
    # smooth large-scale tint: locally similar block corners get distinct
    # neighborhoods, which keeps descriptors from aliasing across repeats
    tint = 0.72 + 0.56 * value_noise(points, 1.7, seed=seed + 9)
    col = base[None, :] * (mod * tint)[:, None]
    return np.clip(col, 0.0, 1.0)


def render_view(
    model: BuildingModel,
    camera: Camera,
    date: dt.date | None = None,
    light: np.ndarray = DEFAULT_LIGHT,
    texture_seed: int = 0,
    return_maps: bool = False,
    supersample: int = 1,
):
    """Rasterize a textured, Lambert-shaded view of the model.

    Returns the (H, W, 3) image in [0, 1]; with ``return_maps`` also the
    per-pixel depth (camera z) and triangle-index maps. ``supersample``
    renders at an integer multiple and box-downsamples, which removes the
    staircase aliasing that otherwise pollutes corner detection.
    """
    if supersample > 1:
        s = int(supersample)
        intr0 = camera.intrinsics
        big = Camera(
            camera.image_id,
            Intrinsics(intr0.focal * s, intr0.k1, intr0.k2, intr0.width * s, intr0.height * s),
            camera.pose,
            camera.is_anchor,
        )
        out = render_view(model, big, date, light, texture_seed, return_maps, 1)
        if return_maps:
            img, depth, tri = out
            img = img.reshape(intr0.height, s, intr0.width, s, 3).mean(axis=(1, 3))
            off = s // 2
            return img, depth[off::s, off::s].copy(), tri[off::s, off::s].copy()
        return out.reshape(intr0.height, s, intr0.width, s, 3).mean(axis=(1, 3))

    intr = camera.intrinsics
    pose = camera.pose
    w, h = intr.width, intr.height
    active = None if date is None else model.snapshot_at(date).visible
    tri_mask = model.triangle_mask(active)

    # sky gradient background
    rows = np.linspace(0.0, 1.0, h)[:, None]
    img = np.empty((h, w, 3))
    img[..., 0] = 0.62 - 0.25 * rows
    img[..., 1] = 0.73 - 0.22 * rows
    img[..., 2] = 0.88 - 0.12 * rows
    depth = np.full((h, w), np.inf)
    tri_map = np.full((h, w), -1, dtype=int)

    V = model.vertices
    cam_v = pose.apply(V)
    z = cam_v[:, 2]
    px = intr.focal * cam_v[:, :2] / np.maximum(z[:, None], 1e-9) + intr.principal_point

    light = np.asarray(light, dtype=float)
    light = light / np.linalg.norm(light)

    for tri in np.flatnonzero(tri_mask):
        ia, ib, ic = model.triangles[tri]
        if z[ia] < 0.05 or z[ib] < 0.05 or z[ic] < 0.05:
            continue
        pa, pb, pc = px[ia], px[ib], px[ic]
        xmin = max(int(np.floor(min(pa[0], pb[0], pc[0]))), 0)
        xmax = min(int(np.ceil(max(pa[0], pb[0], pc[0]))), w - 1)
        ymin = max(int(np.floor(min(pa[1], pb[1], pc[1]))), 0)
        ymax = min(int(np.ceil(max(pa[1], pb[1], pc[1]))), h - 1)
        if xmin > xmax or ymin > ymax:
            continue
        area = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0])
        if abs(area) < 1e-12:
            continue
        xs, ys = np.meshgrid(
            np.arange(xmin, xmax + 1) + 0.5, np.arange(ymin, ymax + 1) + 0.5
        )
        w0 = ((pb[0] - xs) * (pc[1] - ys) - (pb[1] - ys) * (pc[0] - xs)) / area
        w1 = ((pc[0] - xs) * (pa[1] - ys) - (pc[1] - ys) * (pa[0] - xs)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        inv_z = w0 * (1.0 / z[ia]) + w1 * (1.0 / z[ib]) + w2 * (1.0 / z[ic])
        z_pix = 1.0 / np.maximum(inv_z, 1e-12)
        yy, xx = np.nonzero(inside)
        rows_i = yy + ymin
        cols_i = xx + xmin
        zi = z_pix[yy, xx]
        better = zi < depth[rows_i, cols_i]
        if not better.any():
            continue
        rows_i, cols_i = rows_i[better], cols_i[better]
        yy, xx = yy[better], xx[better]
        zi = zi[better]
        # perspective-correct world position
        ww0 = (w0[yy, xx] / z[ia]) * zi
        ww1 = (w1[yy, xx] / z[ib]) * zi
        ww2 = (w2[yy, xx] / z[ic]) * zi
        world = ww0[:, None] * V[ia] + ww1[:, None] * V[ib] + ww2[:, None] * V[ic]
        comp = model.component_of_triangle(tri)
        material = model.by_id[comp].material_name
        color = surface_color(world, material, seed=texture_seed)
        n = model._normals[tri]
        shade = 0.45 + 0.55 * max(0.0, float(-n @ light))
        img[rows_i, cols_i] = np.clip(color * shade, 0.0, 1.0)
        depth[rows_i, cols_i] = zi
        tri_map[rows_i, cols_i] = tri
    if return_maps:
        return img, depth, tri_map
    return img


# --- the demo site -----------------------------------------------------------


def demo_model(include_fence: bool = False) -> BuildingModel:
    """Ground slab + scheduled building components (+ optional fence
    occluder, for rendering scenes the workbench model does not know).

    The core has a large south facade: photo clusters shot from offset
    positions in front of it stay homography-consistent (the facade
    dominates their matches) while carrying real baselines, which is what
    lets one anchor bootstrap the whole collection.
    """
    parts = [
        box_mesh((0.0, 0.0, -0.15), (26.0, 26.0, 0.3)),  # ground
        box_mesh((0.0, 0.0, 2.5), (10.0, 5.0, 5.0)),  # core, facade plane y = -2.5
        box_mesh((6.5, -0.5, 1.25), (3.0, 4.0, 2.5)),  # wing
        box_mesh((-2.0, 0.5, 6.0), (5.0, 3.0, 2.0)),  # upper floor
        box_mesh((-7.2, 0.8, 1.6), (2.2, 2.2, 3.2)),  # stair tower, west side
    ]
    comps = [
        ("ground", "Ground slab", "slab", "site", "asphalt", "2020-01-01", "2020-02-01"),
        ("core", "Core walls", "wall", "building", "brick", "2020-02-01", "2020-05-01"),
        ("wing", "East wing", "wall", "building", "concrete", "2020-06-01", "2020-09-01"),
        ("upper", "Upper floor", "wall", "building", "glass", "2020-09-01", "2020-12-01"),
        ("tower", "Stair tower", "wall", "building", "wood", "2020-02-15", "2020-04-15"),
    ]
    if include_fence:
        parts.append(box_mesh((0.0, -6.5, 0.9), (8.0, 0.12, 1.8)))
        comps.append(
            ("fence", "Site fence", "fence", "site", "wood", "2020-01-01", "2020-01-15")
        )
    verts, tris, offsets = merge_meshes(parts)
    components = []
    for (cid, name, etype, group, mat, start, finish), off, (_, t) in zip(
        comps, offsets, parts
    ):
        components.append(
            Component(
                component_id=cid,
                name=name,
                element_type=etype,
                group=group,
                material_name=mat,
                start=dt.date.fromisoformat(start),
                finish=dt.date.fromisoformat(finish),
                face_start=off,
                face_count=len(t),
            )
        )
    return BuildingModel(verts, tris, components)


def arc_cameras(
    n_views: int,
    width: int = 512,
    height: int = 384,
    radius: float = 11.0,
    arc_deg: float = 95.0,
    center=(0.0, 0.0, 1.2),
    height_range=(1.4, 3.2),
    start_deg: float = 210.0,
    fov_deg: float = 50.0,
) -> list[Camera]:
    """Truth cameras on an arc around the site, all looking at its center."""
    intr = Intrinsics.from_fov(fov_deg, width, height)
    center = np.asarray(center, dtype=float)
    cams = []
    for i in range(n_views):
        frac = i / max(n_views - 1, 1)
        ang = np.radians(start_deg + arc_deg * frac)
        mid = (height_range[0] + height_range[1]) / 2.0
        amp = (height_range[1] - height_range[0]) / 2.0
        zi = mid + amp * np.sin(2.0 * np.pi * i / max(n_views, 1))
        eye = center + np.array(
            [radius * np.cos(ang), radius * np.sin(ang), zi - center[2]]
        )
        pose = Pose.look_at(eye, center)
        cams.append(Camera(image_id=f"view{i:02d}", intrinsics=intr, pose=pose))
    return cams


@dataclass
class SyntheticSite:
    """A generated fixture: model, truth cameras, capture dates, picks."""

    model: BuildingModel
    render_model: BuildingModel
    cameras: list[Camera]
    capture_times: list[dt.datetime]
    view_date: dt.date
    anchor_id: str
    anchor_corrs: list[Correspondence2D3D]
    probe_points: np.ndarray
    assist_picks: dict = None  # image id -> picks answering an expected assist

    def camera(self, image_id: str) -> Camera:
        return next(c for c in self.cameras if c.image_id == image_id)

    def render(self, image_id: str, date: dt.date | None = None, supersample: int = 2) -> np.ndarray:
        return render_view(
            self.render_model,
            self.camera(image_id),
            date or self.view_date,
            supersample=supersample,
        )


def pickable_vertices(model: BuildingModel, camera: Camera, date: dt.date, n: int = 6) -> list[Correspondence2D3D]:
    """User-style picks: mesh vertices visible in the camera, spread out,
    paired with their exact projections."""
    from .geometry import project_many

    active = model.snapshot_at(date).visible
    mask = model.triangle_mask(active)
    vis_vertex_ids = np.unique(model.triangles[mask])
    verts = model.vertices[vis_vertex_ids]
    px, ok = project_many(verts, camera.pose, camera.intrinsics)
    inb = (
        ok
        & (px[:, 0] > 8)
        & (px[:, 0] < camera.intrinsics.width - 8)
        & (px[:, 1] > 8)
        & (px[:, 1] < camera.intrinsics.height - 8)
    )
    cand_ids = vis_vertex_ids[inb]
    cand_px = px[inb]
    cand_verts = verts[inb]
    # visibility: the vertex must actually be the nearest surface
    visible = []
    for vid, p, X in zip(cand_ids, cand_px, cand_verts):
        hit = model.raycast(
            camera.pose.center,
            X - camera.pose.center,
            active=set(active),
        )
        if hit is not None and np.linalg.norm(hit.point - X) < 1e-6:
            visible.append((p, X))
    if len(visible) < n:
        raise ValueError(f"only {len(visible)} pickable vertices (< {n})")
    # spread picks: greedy farthest-point in pixel space
    chosen = [0]
    pts = np.array([v[0] for v in visible])
    while len(chosen) < n:
        d = np.min(
            np.linalg.norm(pts[:, None, :] - pts[chosen][None, :, :], axis=2), axis=1
        )
        chosen.append(int(np.argmax(d)))
    return [Correspondence2D3D(pixel=visible[i][0], model_point=visible[i][1]) for i in chosen]


# anchor picks: six points spread over the south facade plane (picks on the
# propagation plane transfer exactly through facade homographies)
FACADE_PICKS = np.array(
    [
        [-4.2, -2.5, 0.8],
        [4.2, -2.5, 0.8],
        [-4.2, -2.5, 4.3],
        [4.2, -2.5, 4.3],
        [0.0, -2.5, 2.4],
        [-1.8, -2.5, 3.4],
    ]
)


def cluster_cameras(
    n: int = 3,
    width: int = 512,
    height: int = 384,
    distance: float = 12.5,
    fov_deg: float = 50.0,
) -> list[Camera]:
    """Mounted-camera-style views of the south facade: offset positions
    with real baselines whose matches stay facade-dominated, so they pass
    the homography gate against each other yet still triangulate."""
    intr = Intrinsics.from_fov(fov_deg, width, height)
    target = np.array([0.0, -2.5, 2.4])
    offsets = [
        (0.0, 0.0, 2.2),
        (-1.9, -0.3, 2.0),
        (1.9, 0.2, 2.5),
        (-0.9, 0.4, 2.8),
        (0.9, -0.5, 1.8),
    ]
    cams = []
    for i in range(n):
        ox, oy, z = offsets[i % len(offsets)]
        eye = np.array([ox, -distance + oy, z])
        cams.append(
            Camera(image_id=f"view{i:02d}", intrinsics=intr, pose=Pose.look_at(eye, target))
        )
    return cams


def build_demo_site(
    n_views: int = 12,
    n_cluster: int = 3,
    width: int = 512,
    height: int = 384,
    arc_span: tuple[float, float] = (222.0, 302.0),
    radius: float = 13.0,
    view_date: dt.date = dt.date(2020, 10, 1),
    include_fence: bool = False,
    multi_date: bool = False,
) -> SyntheticSite:
    """The standard fixture: a facade photo cluster plus an arc walk.

    With ``multi_date`` the cluster images get earlier capture dates (and
    should be rendered at those dates) to exercise the 4D paths.
    """
    model = demo_model(include_fence=False)
    render_model = demo_model(include_fence=include_fence)
    cameras = cluster_cameras(n_cluster, width=width, height=height)
    n_arc = n_views - n_cluster
    intr = Intrinsics.from_fov(50.0, width, height)
    center = np.array([0.0, 0.0, 1.5])
    for i in range(n_arc):
        frac = i / max(n_arc - 1, 1)
        ang = np.radians(arc_span[0] + (arc_span[1] - arc_span[0]) * frac)
        z = 2.1 + 0.8 * np.sin(2.0 * np.pi * i / max(n_arc, 1))
        eye = center + np.array([radius * np.cos(ang), radius * np.sin(ang), z - center[2]])
        cameras.append(
            Camera(
                image_id=f"view{n_cluster + i:02d}",
                intrinsics=intr,
                pose=Pose.look_at(eye, center),
            )
        )
    if multi_date:
        cluster_days = [dt.datetime(2020, 7, 1, 9), dt.datetime(2020, 8, 15, 9), dt.datetime(2020, 10, 1, 9)]
        times = [cluster_days[i % len(cluster_days)] for i in range(n_cluster)]
        t0 = dt.datetime(2020, 10, 1, 10, 0, 0)
        times += [t0 + dt.timedelta(minutes=20 * i) for i in range(n_arc)]
    else:
        t0 = dt.datetime(2020, 10, 1, 9, 0, 0)
        times = [t0 + dt.timedelta(minutes=20 * i) for i in range(n_views)]
    anchor = cameras[0]
    corrs = [
        Correspondence2D3D(
            pixel=_exact_projection(anchor, p),
            model_point=p,
        )
        for p in FACADE_PICKS
    ]
    probe = np.array(
        [
            [-5.0, -2.5, 5.0],
            [5.0, -2.5, 5.0],
            [-5.0, 2.5, 0.0],
            [5.0, -2.5, 0.0],
            [0.5, 2.0, 7.0],
            [8.0, -2.5, 2.5],
            [-4.5, 2.0, 7.0],
        ]
    )
    return SyntheticSite(
        model=model,
        render_model=render_model,
        cameras=cameras,
        capture_times=times,
        view_date=view_date,
        anchor_id=anchor.image_id,
        anchor_corrs=corrs,
        probe_points=probe,
    )


def _exact_projection(camera: Camera, point: np.ndarray) -> np.ndarray:
    from .geometry import project

    return project(point, camera.pose, camera.intrinsics)


WEST_PICKS = np.array(
    [
        [-5.0, -2.1, 0.8],
        [-5.0, 2.1, 0.8],
        [-5.0, -2.1, 4.3],
        [-5.0, 2.1, 4.3],
        [-5.0, 0.0, 2.4],
        [-5.0, -1.0, 3.3],
    ]
)


def _soil_ground(model: BuildingModel) -> BuildingModel:
    """Swap the ground to a near-textureless material: clusters that share
    only ground then share no matchable content."""
    import dataclasses

    comps = [
        dataclasses.replace(c, material_name="soil") if c.component_id == "ground" else c
        for c in model.components
    ]
    return BuildingModel(model.vertices, model.triangles, comps)


def build_stress_site(
    width: int = 512,
    height: int = 384,
    view_date: dt.date = dt.date(2020, 10, 1),
) -> SyntheticSite:
    """Sparse wide-baseline fixture: ten views only, a two-shot facade
    pair to bootstrap and eight more sweeping ~110 degrees of azimuth with
    a strong height ramp, so the median pairwise baseline exceeds 30
    degrees while adjacent hops stay chainable."""
    model = demo_model(include_fence=False)
    intr = Intrinsics.from_fov(50.0, width, height)
    center = np.array([0.0, 0.0, 1.5])
    radius = 13.0
    cameras = [
        Camera(
            image_id="view00",
            intrinsics=intr,
            pose=Pose.look_at(np.array([0.0, -12.5, 2.2]), np.array([0.0, -2.5, 2.4])),
        ),
        Camera(
            image_id="view01",
            intrinsics=intr,
            pose=Pose.look_at(np.array([-1.9, -12.8, 2.0]), np.array([0.0, -2.5, 2.4])),
        ),
    ]
    arc = np.linspace(214.0, 318.0, 8)
    for i, az in enumerate(arc):
        frac = i / 7.0
        z = 1.5 + 3.6 * frac * frac  # height ramp widens far-pair baselines
        ang = np.radians(az)
        eye = center + np.array([radius * np.cos(ang), radius * np.sin(ang), z - center[2]])
        cameras.append(
            Camera(image_id=f"view{i + 2:02d}", intrinsics=intr, pose=Pose.look_at(eye, center))
        )
    t0 = dt.datetime(2020, 10, 2, 9, 0, 0)
    times = [t0 + dt.timedelta(minutes=15 * i) for i in range(len(cameras))]
    anchor = cameras[0]
    corrs = [
        Correspondence2D3D(pixel=_exact_projection(anchor, p), model_point=p)
        for p in FACADE_PICKS
    ]
    probe = np.array(
        [
            [-5.0, -2.5, 5.0],
            [5.0, -2.5, 5.0],
            [5.0, 2.5, 0.0],
            [5.0, -2.5, 0.0],
            [0.5, 2.0, 7.0],
            [8.0, -2.5, 2.5],
            [-4.5, 2.0, 7.0],
        ]
    )
    return SyntheticSite(
        model=model,
        render_model=model,
        cameras=cameras,
        capture_times=times,
        view_date=view_date,
        anchor_id=anchor.image_id,
        anchor_corrs=corrs,
        probe_points=probe,
        assist_picks={},
    )


def build_disjoint_site(
    width: int = 448,
    height: int = 336,
    view_date: dt.date = dt.date(2020, 10, 1),
) -> SyntheticSite:
    """Two genuinely disconnected viewpoint clusters (south and west
    facades over a textureless ground): registering the second takes
    exactly one assist, answered with picks on the west face."""
    parts = [
        box_mesh((0.0, 0.0, -0.15), (26.0, 26.0, 0.3)),
        box_mesh((0.0, 0.0, 2.5), (10.0, 5.0, 5.0)),
    ]
    verts, tris, offsets = merge_meshes(parts)
    model = BuildingModel(
        verts,
        tris,
        [
            Component("ground", "Ground slab", "slab", "site", "soil",
                      dt.date(2020, 1, 1), dt.date(2020, 2, 1), offsets[0], 12),
            Component("core", "Core walls", "wall", "building", "brick",
                      dt.date(2020, 2, 1), dt.date(2020, 5, 1), offsets[1], 12),
        ],
    )
    intr = Intrinsics.from_fov(50.0, width, height)
    south_target = np.array([0.0, -2.5, 2.4])
    west_target = np.array([-5.0, 0.0, 2.4])
    cameras = []
    for i, (ox, z) in enumerate([(0.0, 2.2), (-1.6, 2.0), (1.6, 2.5)]):
        cameras.append(
            Camera(
                image_id=f"view{i:02d}",
                intrinsics=intr,
                pose=Pose.look_at(np.array([ox, -14.0, z]), south_target),
            )
        )
    for i, (oy, z) in enumerate([(0.0, 2.2), (-0.9, 2.0), (0.9, 2.5)]):
        cameras.append(
            Camera(
                image_id=f"view{i + 3:02d}",
                intrinsics=intr,
                pose=Pose.look_at(np.array([-17.5, oy, z]), west_target),
            )
        )
    t0 = dt.datetime(2020, 10, 2, 9, 0, 0)
    times = [t0 + dt.timedelta(minutes=15 * i) for i in range(len(cameras))]
    anchor = cameras[0]
    corrs = [
        Correspondence2D3D(pixel=_exact_projection(anchor, p), model_point=p)
        for p in FACADE_PICKS
    ]
    west_anchor = cameras[3]
    assist = {
        west_anchor.image_id: [
            Correspondence2D3D(pixel=_exact_projection(west_anchor, p), model_point=p)
            for p in WEST_PICKS
        ]
    }
    probe = np.array(
        [
            [-5.0, -2.5, 5.0],
            [5.0, -2.5, 5.0],
            [5.0, 2.5, 0.0],
            [0.5, 2.0, 7.0],
            [-4.5, 2.0, 7.0],
        ]
    )
    return SyntheticSite(
        model=model,
        render_model=model,
        cameras=cameras,
        capture_times=times,
        view_date=view_date,
        anchor_id=anchor.image_id,
        anchor_corrs=corrs,
        probe_points=probe,
        assist_picks=assist,
    )


def write_demo_project_inputs(root: Path, site: SyntheticSite | None = None) -> dict:
    """Materialize a demo site on disk: images + sidecars, mesh, manifest,
    anchor picks, and a ground-truth file for `sitealign eval`."""
    site = site or build_demo_site()
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    image_files = {}
    for cam, when in zip(site.cameras, site.capture_times):
        img = render_view(site.render_model, cam, site.view_date, supersample=2)
        path = root / "images" / f"{cam.image_id}.png"
        save_image(path, img)
        meta = {
            "capture_time": when.isoformat(),
            "focal_px": cam.intrinsics.focal,
        }
        path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        image_files[cam.image_id] = path
    save_mesh(root / "model.obj", site.model.vertices, site.model.triangles)
    save_manifest(root / "manifest.json", site.model.components)
    corrs = [
        {
            "pixel": [float(c.pixel[0]), float(c.pixel[1])],
            "model_point": [float(v) for v in c.model_point],
        }
        for c in site.anchor_corrs
    ]
    # a deliberately rough init, standing in for the user's GUI alignment
    anchor_cam = site.camera(site.anchor_id)
    rough = Pose(
        anchor_cam.pose.rotvec + np.array([0.08, -0.06, 0.1]),
        anchor_cam.pose.t + np.array([0.6, -0.8, 0.5]),
    )
    (root / "anchor_corrs.json").write_text(
        json.dumps(
            {
                "image": site.anchor_id,
                "correspondences": corrs,
                "init_pose": {
                    "rotvec": [float(v) for v in rough.rotvec],
                    "t": [float(v) for v in rough.t],
                },
            },
            indent=2,
            sort_keys=True,
        )
    )
    truth = {
        "cameras": {
            cam.image_id: {
                "rotvec": [float(v) for v in cam.pose.rotvec],
                "t": [float(v) for v in cam.pose.t],
                "focal": cam.intrinsics.focal,
                "k1": cam.intrinsics.k1,
                "k2": cam.intrinsics.k2,
                "width": cam.intrinsics.width,
                "height": cam.intrinsics.height,
            }
            for cam in site.cameras
        },
        "probe_points": [[float(v) for v in p] for p in site.probe_points],
    }
    (root / "truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True))
    return {
        "images": image_files,
        "mesh": root / "model.obj",
        "manifest": root / "manifest.json",
        "anchor_corrs": root / "anchor_corrs.json",
        "truth": root / "truth.json",
    }
