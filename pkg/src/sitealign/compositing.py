"""Model-over-photo overlay rendering and 4D reveal.

Flat-shaded stand-in for a physically based renderer: per-component
material colors with a single directional light, blended over the photo
inside the requested region, honoring occlusion masks when asked.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

import numpy as np

from .errors import NoTemporalData, ValidationError
from .geometry import Intrinsics, Pose, project_many
from .scene import BuildingModel, RenderMaps, render_depth_normals
from .timelapse import AlignedStack

# material name -> flat color; anything unknown renders neutral gray
MATERIAL_COLORS = {
    "concrete": (0.66, 0.64, 0.62),
    "brick": (0.70, 0.35, 0.26),
    "glass": (0.52, 0.70, 0.80),
    "steel": (0.55, 0.57, 0.62),
    "asphalt": (0.33, 0.33, 0.35),
    "soil": (0.48, 0.39, 0.29),
    "wood": (0.62, 0.48, 0.30),
}
DEFAULT_MATERIAL_COLOR = (0.6, 0.6, 0.6)

LIGHT_AZIMUTH_DEG = 135.0
LIGHT_ALTITUDE_DEG = 45.0

STYLES = ("solid", "semi-transparent", "wireframe", "status-colored")


def light_direction(azimuth_deg: float = LIGHT_AZIMUTH_DEG, altitude_deg: float = LIGHT_ALTITUDE_DEG) -> np.ndarray:
    """Unit direction of light travel for a sun at (azimuth, altitude)."""
    az = np.radians(azimuth_deg)
    alt = np.radians(altitude_deg)
    sun = np.array([np.cos(alt) * np.cos(az), np.cos(alt) * np.sin(az), np.sin(alt)])
    return -sun


@dataclass
class OverlaySpec:
    """What to composite: which snapshot over which photo, where, and how."""

    image_id: str
    date: dt.date
    style: str = "semi-transparent"
    alpha: float = 0.6
    region: np.ndarray | None = None  # boolean pixel mask; None = whole frame
    respect_occlusion: bool = True
    component_ids: set[str] | None = None  # restrict to a selection
    component_status: dict = field(default_factory=dict)  # id -> status color key
    light_azimuth_deg: float = LIGHT_AZIMUTH_DEG
    light_altitude_deg: float = LIGHT_ALTITUDE_DEG

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.style not in STYLES:
            raise ValidationError(f"unknown style {self.style!r}; expected one of {STYLES}")


def shade_model(
    model: BuildingModel,
    maps: RenderMaps,
    light: np.ndarray,
    component_status: dict | None = None,
) -> np.ndarray:
    """Flat Lambert shading of rendered id/normal maps."""
    from .annotation import STATUS_COLORS

    h, w = maps.depth.shape
    out = np.zeros((h, w, 3))
    lit = maps.component >= 0
    colors = np.zeros((len(maps.component_ids), 3))
    for i, cid in enumerate(maps.component_ids):
        comp = model.by_id[cid]
        if component_status and cid in component_status:
            colors[i] = STATUS_COLORS[component_status[cid]]
        else:
            colors[i] = MATERIAL_COLORS.get(comp.material_name, DEFAULT_MATERIAL_COLOR)
    ndotl = -(maps.normal @ light)
    shade = 0.45 + 0.55 * np.clip(ndotl, 0.0, 1.0)
    out[lit] = colors[maps.component[lit]] * shade[lit][:, None]
    return np.clip(out, 0.0, 1.0)


def composite(
    photo: np.ndarray,
    model: BuildingModel,
    camera_pose: Pose,
    intr: Intrinsics,
    spec: OverlaySpec,
    occlusion_masks: "list[np.ndarray] | None" = None,
    maps: RenderMaps | None = None,
) -> np.ndarray:
    """Blend the model snapshot over the photo per the overlay spec.

    Pixels outside the region (or with alpha 0) are returned bit-identical
    to the input; with ``respect_occlusion`` the photo also wins wherever
    an occlusion mask is set.
    """
    photo = np.asarray(photo, dtype=float)
    h, w = photo.shape[:2]
    if spec.region is not None and spec.region.shape != (h, w):
        raise ValidationError("region mask dimensions differ from the photo")
    out = photo.copy()
    if spec.alpha == 0.0:
        return out
    active = set(model.snapshot_at(spec.date).visible)
    if spec.component_ids is not None:
        active &= set(spec.component_ids)
    if maps is None:
        maps = render_depth_normals(model, camera_pose, intr, active=active)
    light = light_direction(spec.light_azimuth_deg, spec.light_altitude_deg)
    shaded = shade_model(model, maps, light, spec.component_status or None)

    covered = maps.component >= 0
    if spec.style == "wireframe":
        covered = _edge_mask(maps)
    blend = covered.copy()
    if spec.region is not None:
        blend &= spec.region
    if spec.respect_occlusion:
        for om in occlusion_masks or []:
            blend &= ~om
    alpha = 1.0 if spec.style in ("solid", "wireframe") else spec.alpha
    out[blend] = alpha * shaded[blend] + (1.0 - alpha) * photo[blend]
    return out


def _edge_mask(maps: RenderMaps) -> np.ndarray:
    """Pixels where the triangle id changes: the visible wireframe."""
    t = maps.triangle
    edge = np.zeros(t.shape, dtype=bool)
    edge[:, 1:] |= (t[:, 1:] != t[:, :-1]) & ((t[:, 1:] >= 0) | (t[:, :-1] >= 0))
    edge[1:, :] |= (t[1:, :] != t[:-1, :]) & ((t[1:, :] >= 0) | (t[:-1, :] >= 0))
    edge &= t >= -1
    return edge & ((t >= 0) | np.roll(t >= 0, 1, axis=0) | np.roll(t >= 0, 1, axis=1))


def reveal_4d(
    photo: np.ndarray,
    region: np.ndarray | None,
    target_date: dt.date,
    capture_date: dt.date,
    model: BuildingModel,
    camera_pose: Pose,
    intr: Intrinsics,
    stack: AlignedStack | None = None,
    stack_dates: "list[dt.date] | None" = None,
    image_id: str = "",
    alpha: float = 1.0,
    occlusion_masks: "list[np.ndarray] | None" = None,
) -> np.ndarray:
    """Peer forward or backward in time inside a region.

    Backward (``target_date < capture_date``): the nearest-in-time aligned
    frame from the viewpoint stack replaces region pixels (validity
    masked). Forward: the model snapshot at the target date is composited
    into the region.

    Raises
    ------
    NoTemporalData
        Backward reveal without an aligned stack covering this image.
    """
    photo = np.asarray(photo, dtype=float)
    h, w = photo.shape[:2]
    if region is None:
        region = np.ones((h, w), dtype=bool)
    if region.shape != (h, w):
        raise ValidationError("region mask dimensions differ from the photo")
    if not region.any():
        return photo.copy()

    if target_date >= capture_date:
        spec = OverlaySpec(
            image_id=image_id,
            date=target_date,
            style="semi-transparent",
            alpha=alpha,
            region=region,
            respect_occlusion=occlusion_masks is not None,
        )
        return composite(photo, model, camera_pose, intr, spec, occlusion_masks)

    if stack is None or len(stack.image_ids) < 2:
        raise NoTemporalData(
            f"no aligned time-lapse covers {image_id!r}; cannot reveal the past"
        )
    dates = stack_dates or [ts.date() for ts in stack.timestamps]
    candidates = [
        (abs((d - target_date).days), i)
        for i, d in enumerate(dates)
        if stack.image_ids[i] != image_id
    ]
    if not candidates:
        raise NoTemporalData("stack holds no other frame to reveal")
    _, best = min(candidates)
    out = photo.copy()
    paint = region & stack.valid[best]
    out[paint] = stack.frames[best][paint]
    return out
