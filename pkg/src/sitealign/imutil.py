"""Small image helpers shared across modules.

Images are numpy arrays in [0, 1]: grayscale (H, W) or RGB (H, W, 3),
float64. Files on disk are 8-bit PNG/JPEG via Pillow.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError


def load_image(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return arr


def save_image(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(Path(path))


def save_mask(path, mask: np.ndarray) -> None:
    """Persist a boolean mask as an 8-bit 0/255 single-channel image."""
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(Path(path))


def load_mask(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return arr >= 128


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    raise ValidationError(f"expected (H, W) or (H, W, 3) image, got shape {img.shape}")


def psnr(a: np.ndarray, b: np.ndarray, valid: np.ndarray | None = None) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = (a - b) ** 2
    if valid is not None:
        if a.ndim == 3:
            diff = diff[valid]
        else:
            diff = diff[valid]
    mse = float(np.mean(diff))
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    """Mean filter with reflected borders, exact via integral image."""
    if radius <= 0:
        return img.astype(np.float64, copy=True)
    pad = [(radius, radius), (radius, radius)] + [(0, 0)] * (img.ndim - 2)
    padded = np.pad(img.astype(np.float64), pad, mode="reflect")
    c = padded.cumsum(axis=0).cumsum(axis=1)
    c = np.pad(c, [(1, 0), (1, 0)] + [(0, 0)] * (img.ndim - 2))
    k = 2 * radius + 1
    h, w = img.shape[:2]
    out = (
        c[k : k + h, k : k + w]
        - c[:h, k : k + w]
        - c[k : k + h, :w]
        + c[:h, :w]
    )
    return out / (k * k)


def gaussian_blur(img: np.ndarray, sigma: float, truncate: float = 3.0) -> np.ndarray:
    """Separable Gaussian with kernel renormalized at the borders."""
    if sigma <= 0:
        return img.astype(np.float64, copy=True)
    radius = int(np.ceil(truncate * sigma))
    xs = np.arange(-radius, radius + 1)
    kernel = np.exp(-(xs**2) / (2.0 * sigma**2))

    def along(axis, arr):
        out = np.zeros_like(arr, dtype=np.float64)
        norm = np.zeros(arr.shape[:2], dtype=np.float64)
        for off, w in zip(xs, kernel):
            src = np.roll(arr, off, axis=axis)
            valid = np.ones(arr.shape[:2], dtype=bool)
            idx = [slice(None)] * 2
            if off > 0:
                idx[axis] = slice(0, off)
                valid[tuple(idx)] = False
            elif off < 0:
                idx[axis] = slice(arr.shape[axis] + off, None)
                valid[tuple(idx)] = False
            wmask = np.where(valid, w, 0.0)
            out += src * (wmask[..., None] if arr.ndim == 3 else wmask)
            norm += wmask
        return out / (norm[..., None] if arr.ndim == 3 else norm)

    return along(1, along(0, np.asarray(img, dtype=np.float64)))


def bilinear_sample(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``img`` at float coordinates; out-of-bounds samples invalid.

    Returns (values, valid). ``x`` is the column coordinate, ``y`` the row.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.floor(xc).astype(int)
    y0 = np.floor(yc).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    v = (
        img[y0, x0] * (1 - fx) * (1 - fy)
        + img[y0, x1] * fx * (1 - fy)
        + img[y1, x0] * (1 - fx) * fy
        + img[y1, x1] * fx * fy
    )
    return v, valid


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    """Vectorized RGB -> HSV, all channels in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    maxc = img.max(axis=-1)
    minc = img.min(axis=-1)
    v = maxc
    spread = maxc - minc
    s = np.where(maxc > 0, spread / np.where(maxc > 0, maxc, 1.0), 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        rc = np.where(spread > 0, (maxc - r) / spread, 0.0)
        gc = np.where(spread > 0, (maxc - g) / spread, 0.0)
        bc = np.where(spread > 0, (maxc - b) / spread, 0.0)
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(spread > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def rgb_to_lab(img: np.ndarray) -> np.ndarray:
    """sRGB (D65) -> CIELAB, vectorized."""
    img = np.asarray(img, dtype=np.float64)
    lin = np.where(img > 0.04045, ((img + 0.055) / 1.055) ** 2.4, img / 12.92)
    M = np.array(
        [
            [0.4124564, 0.3575761, 0.1804375],
            [0.2126729, 0.7151522, 0.0721750],
            [0.0193339, 0.1191920, 0.9503041],
        ]
    )
    xyz = lin @ M.T
    white = np.array([0.95047, 1.0, 1.08883])
    t = xyz / white
    f = np.where(t > (6.0 / 29.0) ** 3, np.cbrt(t), t / (3 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def polygon_is_simple(vertices: np.ndarray) -> bool:
    """True when no two non-adjacent edges of the closed polygon intersect."""
    v = np.asarray(vertices, dtype=np.float64)
    n = len(v)
    if n < 3:
        return False
    edges = [(v[i], v[(i + 1) % n]) for i in range(n)]

    def cross2(a, b) -> float:
        return a[0] * b[1] - a[1] * b[0]

    def seg_intersect(p1, p2, p3, p4) -> bool:
        d1 = cross2(p4 - p3, p1 - p3)
        d2 = cross2(p4 - p3, p2 - p3)
        d3 = cross2(p2 - p1, p3 - p1)
        d4 = cross2(p2 - p1, p4 - p1)
        return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))

    for i in range(n):
        for j in range(i + 1, n):
            if abs(i - j) in (1, n - 1):
                continue
            if seg_intersect(*edges[i], *edges[j]):
                return False
    return True


def rasterize_polygon(vertices: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Even-odd scanline fill of a closed polygon into a boolean mask.

    ``vertices`` are (x, y) pixel coordinates; a pixel is inside when its
    center (col + 0.5, row + 0.5) is inside the polygon.
    """
    v = np.asarray(vertices, dtype=np.float64)
    h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    ys = np.arange(h) + 0.5
    x1 = v[:, 0]
    y1 = v[:, 1]
    x2 = np.roll(x1, -1)
    y2 = np.roll(y1, -1)
    for row, yc in enumerate(ys):
        crosses = (y1 <= yc) != (y2 <= yc)
        if not np.any(crosses):
            continue
        xs = x1[crosses] + (yc - y1[crosses]) * (x2[crosses] - x1[crosses]) / (
            y2[crosses] - y1[crosses]
        )
        xs.sort()
        for i in range(0, len(xs) - 1, 2):
            lo = int(np.ceil(xs[i] - 0.5))
            hi = int(np.floor(xs[i + 1] - 0.5))
            if hi >= lo:
                mask[row, max(lo, 0) : min(hi + 1, w)] = True
    return mask
