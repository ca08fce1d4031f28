"""Per-viewpoint time-lapse alignment.

Images that relate to a reference image by a strong homography (the same
0.80 inlier-ratio gate the registration pipeline uses) form a viewpoint
group; warping every member into the reference frame yields a
pixel-aligned stack ordered by capture time, the substrate for dynamic
occlusion detection and backward time navigation.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .imutil import bilinear_sample, load_image, save_image
from .matching import Homography, passes_homography_gate

HOMOGRAPHY_GATE = 0.80


@dataclass
class ViewpointMember:
    image_id: str
    to_reference: Homography  # maps member pixels into the reference frame
    timestamp: dt.datetime


@dataclass
class ViewpointGroup:
    """A reference image and every image homography-consistent with it."""

    reference: str
    members: list[ViewpointMember] = field(default_factory=list)

    def __post_init__(self):
        self.members.sort(key=lambda m: (m.timestamp, m.image_id))

    @property
    def is_singleton(self) -> bool:
        return len(self.members) <= 1

    def member_ids(self) -> list[str]:
        return [m.image_id for m in self.members]


@dataclass
class AlignedStack:
    """Members warped into the reference frame, with coverage masks."""

    reference: str
    image_ids: list[str]
    timestamps: list[dt.datetime]
    frames: np.ndarray  # (n, H, W, 3)
    valid: np.ndarray  # (n, H, W) bool, false where the warp left bounds

    def frame_index(self, image_id: str) -> int:
        try:
            return self.image_ids.index(image_id)
        except ValueError as exc:
            raise ValidationError(f"image {image_id!r} not in stack") from exc


def group_viewpoints(
    image_ids: list[str],
    timestamps: dict[str, dt.datetime],
    homography_lookup,
    gate: float = HOMOGRAPHY_GATE,
) -> list[ViewpointGroup]:
    """One group per reference image, containing every image that passes
    the homography gate against it (reusing the registration pipeline's
    cached homographies via ``homography_lookup(ref, other)``).

    Images with no partner form singleton groups, which cannot be
    traversed temporally in 2D.
    """
    groups = []
    for ref in sorted(image_ids):
        members = [
            ViewpointMember(
                image_id=ref, to_reference=Homography(np.eye(3), 1.0), timestamp=timestamps[ref]
            )
        ]
        for other in sorted(image_ids):
            if other == ref:
                continue
            H = homography_lookup(ref, other)
            if H is None or not passes_homography_gate(H.inlier_ratio, gate):
                continue
            # lookup returns ref -> other; the stack needs other -> ref
            members.append(
                ViewpointMember(
                    image_id=other, to_reference=H.inverse(), timestamp=timestamps[other]
                )
            )
        groups.append(ViewpointGroup(reference=ref, members=members))
    return groups


def warp_into_reference(
    image: np.ndarray, to_reference: Homography, shape: tuple[int, int]
) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-warp ``image`` into the reference pixel grid by bilinear
    sampling; out-of-bounds samples are marked invalid, never fabricated."""
    h, w = shape
    cols, rows = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    ref_pixels = np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5], axis=1)
    src = to_reference.inverse().apply(ref_pixels) - 0.5
    vals, valid = bilinear_sample(image, src[:, 0].reshape(h, w), src[:, 1].reshape(h, w))
    return vals, valid


def build_stack(group: ViewpointGroup, images: dict[str, np.ndarray]) -> AlignedStack:
    """Warp every member into the reference frame.

    Raises
    ------
    ValidationError
        Singleton group (no temporal 2D traversal possible).
    """
    if group.is_singleton:
        raise ValidationError(
            f"viewpoint group {group.reference!r} is a singleton; no stack to build"
        )
    ref_img = images[group.reference]
    h, w = ref_img.shape[:2]
    frames = []
    valids = []
    ids = []
    times = []
    for m in group.members:
        img = images[m.image_id]
        vals, valid = warp_into_reference(img, m.to_reference, (h, w))
        frames.append(vals)
        valids.append(valid)
        ids.append(m.image_id)
        times.append(m.timestamp)
    return AlignedStack(
        reference=group.reference,
        image_ids=ids,
        timestamps=times,
        frames=np.stack(frames),
        valid=np.stack(valids),
    )


def save_stack(
    stack: AlignedStack,
    directory: Path,
    homographies: dict[str, np.ndarray] | None = None,
    config: dict | None = None,
):
    """Cache a stack as per-frame images plus a JSON manifest (homographies
    row-major, 9 floats; the producing config echoed for provenance)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"reference": stack.reference, "frames": []}
    if config is not None:
        manifest["config"] = config
    for i, (img_id, ts) in enumerate(zip(stack.image_ids, stack.timestamps)):
        frame_file = f"frame{i:03d}.png"
        mask_file = f"frame{i:03d}.mask.png"
        save_image(directory / frame_file, stack.frames[i])
        save_image(directory / mask_file, stack.valid[i].astype(float))
        entry = {
            "image": img_id,
            "timestamp": ts.isoformat(),
            "file": frame_file,
            "mask": mask_file,
        }
        if homographies and img_id in homographies:
            entry["to_reference"] = [float(v) for v in np.asarray(homographies[img_id]).ravel()]
        manifest["frames"].append(entry)
    (directory / "stack.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_stack(directory: Path) -> AlignedStack:
    directory = Path(directory)
    manifest = json.loads((directory / "stack.json").read_text())
    frames = []
    valids = []
    ids = []
    times = []
    for entry in manifest["frames"]:
        frames.append(load_image(directory / entry["file"]))
        valids.append(load_image(directory / entry["mask"]) > 0.5)
        ids.append(entry["image"])
        times.append(dt.datetime.fromisoformat(entry["timestamp"]))
    return AlignedStack(
        reference=manifest["reference"],
        image_ids=ids,
        timestamps=times,
        frames=np.stack(frames),
        valid=np.stack(valids),
    )
