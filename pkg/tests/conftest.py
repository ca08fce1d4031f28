"""Shared fixtures: session-scoped synthetic scenes and rendered views.

Rendering and registration dominate suite runtime, so anything reusable
is built exactly once per session.
"""

from __future__ import annotations

import datetime as dt

import numpy as np
import pytest

from sitealign.geometry import Intrinsics, Pose
from sitealign.pipeline import ImageMeta, Pipeline, PipelineConfig
from sitealign.registration import Camera
from sitealign.scene import BuildingModel, Component
from sitealign.synthetic import box_mesh, build_demo_site, merge_meshes, render_view


def make_box_model(center=(0, 0, 0), size=(1, 1, 1), comp_id="cube") -> BuildingModel:
    v, t = box_mesh(center, size)
    comp = Component(
        component_id=comp_id,
        name="Box",
        element_type="wall",
        group="g",
        material_name="concrete",
        start=dt.date(2020, 1, 1),
        finish=dt.date(2020, 2, 1),
        face_start=0,
        face_count=len(t),
    )
    return BuildingModel(v, t, [comp])


def make_two_box_model() -> BuildingModel:
    parts = [box_mesh((0, 0, 0), (1, 1, 1)), box_mesh((0, 2.5, 0), (1, 1, 1))]
    v, t, offsets = merge_meshes(parts)
    comps = [
        Component("near", "Near box", "wall", "g", "concrete",
                  dt.date(2020, 1, 1), dt.date(2020, 2, 1), offsets[0], 12),
        Component("far", "Far box", "wall", "g", "brick",
                  dt.date(2020, 3, 1), dt.date(2020, 4, 1), offsets[1], 12),
    ]
    return BuildingModel(v, t, comps)


@pytest.fixture(scope="session")
def demo_site():
    return build_demo_site(n_views=8)


@pytest.fixture(scope="session")
def demo_renders(demo_site):
    return {
        cam.image_id: render_view(
            demo_site.render_model, cam, demo_site.view_date, supersample=2
        )
        for cam in demo_site.cameras
    }


@pytest.fixture(scope="session")
def demo_pipeline(demo_site, demo_renders):
    """The 8-view demo collection, registered once for the whole session."""
    metas = {
        cam.image_id: ImageMeta(
            cam.intrinsics.width,
            cam.intrinsics.height,
            focal_px=cam.intrinsics.focal,
            capture_time=when.isoformat(),
        )
        for cam, when in zip(demo_site.cameras, demo_site.capture_times)
    }
    pipe = Pipeline(
        dict(demo_renders),
        metas,
        demo_site.model,
        PipelineConfig(max_features=2500, fast_threshold=0.025, share_intrinsics=True),
    )
    anchor = demo_site.camera(demo_site.anchor_id)
    init = Pose(anchor.pose.rotvec + 0.08, anchor.pose.t + 0.4)
    pipe.register_anchor(demo_site.anchor_id, demo_site.anchor_corrs, init=init)
    pipe.run()
    return pipe


@pytest.fixture()
def plain_intrinsics():
    return Intrinsics.from_fov(50.0, 640, 480)


def camera_at(eye, target=(0.0, 0.0, 0.0), intr=None, image_id="cam", anchor=False) -> Camera:
    intr = intr or Intrinsics.from_fov(50.0, 640, 480)
    return Camera(image_id=image_id, intrinsics=intr, pose=Pose.look_at(eye, target), is_anchor=anchor)
