"""Mask <-> boundary point cloud conversion.

A mask is an ``(H, W)`` uint8 label map with BACKGROUND=0, DISC=1, CUP=2.
Encoding traces the cup boundary and the outer boundary of disc-or-cup, samples
each contour uniformly by arc length and lifts the points to 3D with the class
encoded in the sign of z (cup ``+z0``, disc ``-z0``). Decoding reverses this by
angular ordering and polygon fill.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import kernels

log = logging.getLogger(__name__)

BACKGROUND, DISC, CUP = 0, 1, 2
PNG_VALUES = {BACKGROUND: 0, DISC: 128, CUP: 255}
DEFAULT_Z0 = 0.3
DEFAULT_POINTS = 512
EDGE_TOL = 0.5


class DegenerateMask(ValueError):
    """A class needed for encoding is missing from the mask."""


class DecodeError(ValueError):
    """A point cloud cannot be turned back into a mask."""


class MaskFormatError(ValueError):
    pass


@dataclass
class Contour:
    points: np.ndarray  # (K, 2) integer (x, y) pixel coordinates, closed implicitly
    label: int

    @property
    def perimeter(self):
        return polyline_length(self.points.astype(np.float64), closed=True)


@dataclass
class BoundaryPointCloud:
    points: np.ndarray  # (N, 3) normalised x, y, z
    center: np.ndarray = field(default_factory=lambda: np.zeros(2))
    scale: float = 1.0
    z0: float = DEFAULT_Z0
    group: str | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(2)
        self.scale = float(self.scale)

    @property
    def n(self):
        return len(self.points)

    @property
    def cup_mask(self):
        return self.points[:, 2] > 0

    def pixel_points(self):
        """Points with x, y mapped back to pixel coordinates."""
        return denormalize_cloud(self)


def signed_area(xy):
    x, y = xy[:, 0], xy[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def polyline_length(xy, closed=True):
    pts = np.vstack([xy, xy[:1]]) if closed else xy
    return float(np.sum(np.hypot(*np.diff(pts, axis=0).T)))


def _largest_component(binary):
    lab, n = ndimage.label(binary, structure=np.ones((3, 3), dtype=int))
    if n <= 1:
        return binary
    sizes = np.bincount(lab.ravel())[1:]
    return lab == (1 + int(np.argmax(sizes)))


def trace_region(binary, label):
    """Moore-neighbour trace of the outer boundary of the largest component."""
    region = np.ascontiguousarray(_largest_component(binary).astype(np.uint8))
    rc = kernels.moore_trace(region)
    xy = rc[:, ::-1].copy()
    # image y grows downward, so a counterclockwise loop on screen has negative shoelace area
    if len(xy) > 2 and signed_area(xy.astype(np.float64)) > 0:
        xy = np.vstack([xy[:1], xy[:0:-1]])
    return Contour(xy, label)


def extract_boundaries(mask):
    """Return ``{CUP: Contour, DISC: Contour}`` for a label map."""
    mask = np.asarray(mask)
    cup = mask == CUP
    disc = mask >= DISC
    if not cup.any():
        raise DegenerateMask("mask has no cup pixels")
    if not disc.any():
        raise DegenerateMask("mask has no disc pixels")
    return {CUP: trace_region(cup, CUP), DISC: trace_region(disc, DISC)}


def resample_closed(xy, n):
    """``n`` points spaced uniformly by arc length along a closed polyline."""
    xy = np.asarray(xy, dtype=np.float64)
    if len(xy) == 1:
        return np.repeat(xy, n, axis=0)
    loop = np.vstack([xy, xy[:1]])
    seg = np.hypot(*np.diff(loop, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    s = np.arange(n) * (total / n)
    x = np.interp(s, cum, loop[:, 0])
    y = np.interp(s, cum, loop[:, 1])
    return np.column_stack([x, y])


def normalize_cloud(raw, z0=DEFAULT_Z0, group=None):
    """Centre x, y on their mean and scale so that max |coordinate| is 1. z is kept."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("cannot normalise an empty cloud")
    center = raw[:, :2].mean(axis=0)
    shifted = raw[:, :2] - center
    scale = float(np.abs(shifted).max())
    if scale <= 0:
        raise ValueError("cloud has zero spatial extent")
    pts = raw.copy()
    pts[:, :2] = shifted / scale
    return BoundaryPointCloud(pts, center, scale, z0, group)


def denormalize_cloud(cloud):
    pts = cloud.points.copy()
    pts[:, :2] = pts[:, :2] * cloud.scale + cloud.center
    return pts


def sample_point_cloud(contours, n_points=DEFAULT_POINTS, z0=DEFAULT_Z0):
    """Arc-length sample ``n_points/2`` per class and lift to 3D (cup first)."""
    if n_points % 2:
        raise ValueError(f"n_points must be even, got {n_points}")
    if CUP not in contours or DISC not in contours:
        raise DegenerateMask("both cup and disc contours are required")
    half = n_points // 2
    blocks = []
    for label, z in ((CUP, z0), (DISC, -z0)):
        c = contours[label]
        if c.perimeter == 0.0:
            log.warning("contour of class %d is a single pixel; all %d samples coincide", label, half)
        elif len(c.points) < half:
            log.debug("contour of class %d has %d pixels for %d samples (sub-pixel spacing)",
                      label, len(c.points), half)
        xy = resample_closed(c.points, half)
        blocks.append(np.column_stack([xy, np.full(half, z)]))
    return normalize_cloud(np.vstack(blocks), z0=z0)


def encode_mask(mask, n_points=DEFAULT_POINTS, z0=DEFAULT_Z0):
    return sample_point_cloud(extract_boundaries(mask), n_points, z0)


def _angular_polygon(xy):
    c = xy.mean(axis=0)
    ang = np.arctan2(xy[:, 1] - c[1], xy[:, 0] - c[0])
    order = np.argsort(ang, kind="stable")
    return xy[order]


def rasterize_polygon(xy, height, width, edge_tol=EDGE_TOL):
    xy = np.asarray(xy, dtype=np.float64)
    return kernels.fill_polygon(np.ascontiguousarray(xy[:, 0]), np.ascontiguousarray(xy[:, 1]),
                                int(height), int(width), float(edge_tol)).astype(bool)


def decode_point_cloud(cloud, width, height, edge_tol=EDGE_TOL):
    """Rasterise a point cloud into a label map; the cup is clipped to the disc."""
    pix = denormalize_cloud(cloud)
    is_cup = pix[:, 2] > 0
    n_cup, n_disc = int(is_cup.sum()), int((~is_cup).sum())
    if n_cup < 3 or n_disc < 3:
        raise DecodeError(f"need >=3 points per class, got cup={n_cup} disc={n_disc}")
    disc = rasterize_polygon(_angular_polygon(pix[~is_cup, :2]), height, width, edge_tol)
    cup = rasterize_polygon(_angular_polygon(pix[is_cup, :2]), height, width, edge_tol) & disc
    out = np.zeros((height, width), dtype=np.uint8)
    out[disc] = DISC
    out[cup] = CUP
    return out


# file formats

def read_mask_png(path):
    img = Image.open(path)
    if img.mode != "L":
        raise MaskFormatError(f"{path}: expected 8-bit single-channel PNG, got mode {img.mode}")
    arr = np.asarray(img)
    out = np.zeros(arr.shape, dtype=np.uint8)
    valid = np.zeros(arr.shape, dtype=bool)
    for label, value in PNG_VALUES.items():
        hit = arr == value
        out[hit] = label
        valid |= hit
    if not valid.all():
        bad = np.unique(arr[~valid])[:5].tolist()
        raise MaskFormatError(f"{path}: unexpected pixel values {bad}")
    return out


def write_mask_png(path, mask):
    mask = np.asarray(mask)
    lut = np.zeros(256, dtype=np.uint8)
    for label, value in PNG_VALUES.items():
        lut[label] = value
    Image.fromarray(lut[mask.astype(np.uint8)], mode="L").save(path, format="PNG")


def write_fpc(path, cloud):
    lines = [f"FPC1 {cloud.n} {cloud.z0:.17g} {cloud.center[0]:.17g} "
             f"{cloud.center[1]:.17g} {cloud.scale:.17g}"]
    lines.extend(f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in cloud.points)
    Path(path).write_text("\n".join(lines) + "\n")


def read_fpc(path):
    text = Path(path).read_text().split("\n")
    head = text[0].split()
    if len(head) != 6 or head[0] != "FPC1":
        raise ValueError(f"{path}: bad point-cloud header {text[0]!r}")
    n = int(head[1])
    z0, cx, cy, scale = map(float, head[2:])
    body = [ln for ln in text[1:] if ln.strip()]
    if len(body) != n:
        raise ValueError(f"{path}: header says {n} points, found {len(body)}")
    pts = np.array([[float(v) for v in ln.split()] for ln in body], dtype=np.float64)
    if pts.shape != (n, 3):
        raise ValueError(f"{path}: malformed point rows")
    return BoundaryPointCloud(pts, (cx, cy), scale, z0)


# toy geometry used by tests, the dataset generator and the acceptance suite

def ellipse_mask(height, width, center, axes, angle=0.0):
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    c, s = np.cos(angle), np.sin(angle)
    dx, dy = xx - center[0], yy - center[1]
    u = (c * dx + s * dy) / axes[0]
    v = (-s * dx + c * dy) / axes[1]
    return u * u + v * v <= 1.0


def ellipse_pair_mask(height, width, disc_center, disc_axes, cup_center, cup_axes, angle=0.0):
    disc = ellipse_mask(height, width, disc_center, disc_axes, angle)
    cup = ellipse_mask(height, width, cup_center, cup_axes, angle) & disc
    out = np.zeros((height, width), dtype=np.uint8)
    out[disc] = DISC
    out[cup] = CUP
    return out


def random_ellipse_pair(rng, size=64, ratio_range=(0.25, 0.65), radius_range=(14.0, 24.0)):
    r = rng.uniform(*radius_range)
    ecc = rng.uniform(0.85, 1.15)
    disc_axes = (r * ecc, r / ecc)
    ratio = rng.uniform(*ratio_range)
    k = np.sqrt(ratio)
    center = (size / 2 + rng.uniform(-3, 3), size / 2 + rng.uniform(-3, 3))
    off = rng.uniform(-0.08, 0.08, size=2) * r
    cup_center = (center[0] + off[0], center[1] + off[1])
    return ellipse_pair_mask(size, size, center, disc_axes, cup_center,
                             (disc_axes[0] * k, disc_axes[1] * k), rng.uniform(0, np.pi))
