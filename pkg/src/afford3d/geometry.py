"""Pinhole projection, backprojection and depth residuals.

Pixel ``(u, v)`` has its centre at integer coordinates; ``u`` indexes columns.
Depth lookups use the nearest pixel, ``floor(u + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ContractViolation
from .scene_io import CameraIntrinsics, Pose

MIN_DEPTH = 1e-6


class PixelProjection(NamedTuple):
    u: float
    v: float
    z_proj: float
    point_index: int


@dataclass(frozen=True, eq=False)
class Projections:
    """Column-oriented batch of :class:`PixelProjection` (retained points only)."""

    u: np.ndarray
    v: np.ndarray
    z: np.ndarray
    index: np.ndarray

    def __len__(self):
        return len(self.index)

    def __iter__(self):
        for u, v, z, i in zip(self.u, self.v, self.z, self.index):
            yield PixelProjection(float(u), float(v), float(z), int(i))

    def __getitem__(self, item):
        return PixelProjection(float(self.u[item]), float(self.v[item]), float(self.z[item]),
                               int(self.index[item]))

    def subset(self, keep: np.ndarray) -> "Projections":
        return Projections(self.u[keep], self.v[keep], self.z[keep], self.index[keep])

    def pixels(self, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
        """Nearest integer pixel (col, row) of each projection, clipped to the image."""
        col = np.clip(np.floor(self.u + 0.5).astype(np.int64), 0, width - 1)
        row = np.clip(np.floor(self.v + 0.5).astype(np.int64), 0, height - 1)
        return col, row


def project_points(points, pose: Pose, intrinsics: CameraIntrinsics, indices=None) -> Projections:
    """Project world points into the image of a camera with camera-to-world ``pose``.

    Points at camera depth <= 1e-6 m or outside ``[0, width) x [0, height)`` are
    dropped; survivors keep their input order. ``indices`` overrides the reported
    point index (defaults to the row number in ``points``).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if indices is None:
        indices = np.arange(len(pts), dtype=np.int64)
    else:
        indices = np.asarray(indices, dtype=np.int64)
    cam = pose.world_to_camera(pts)
    z = cam[:, 2]
    front = z > MIN_DEPTH
    cam, z, indices = cam[front], z[front], indices[front]
    u = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
    v = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    inside = (u >= 0) & (u < intrinsics.width) & (v >= 0) & (v < intrinsics.height)
    return Projections(u[inside], v[inside], z[inside], indices[inside])


def backproject_pixels(u, v, depth, pose: Pose, intrinsics: CameraIntrinsics) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(~(d > 0)):
        raise ContractViolation("backprojection requires depth > 0")
    x = (u - intrinsics.cx) / intrinsics.fx * d
    y = (v - intrinsics.cy) / intrinsics.fy * d
    cam = np.stack(np.broadcast_arrays(x, y, d), axis=-1)
    return pose.camera_to_world(cam.reshape(-1, 3)).reshape(cam.shape)


def backproject_pixel(u: float, v: float, depth: float, pose: Pose,
                      intrinsics: CameraIntrinsics) -> np.ndarray:
    """World coordinates of pixel ``(u, v)`` at camera depth ``depth`` metres."""
    if not depth > 0:
        raise ContractViolation(f"backprojection requires depth > 0, got {depth}")
    return backproject_pixels(u, v, depth, pose, intrinsics).reshape(3)


def valid_depth(depth) -> np.ndarray:
    depth = np.asarray(depth)
    return np.isfinite(depth) & (depth > 0)


def depth_residuals(projections: Projections, depth_map: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``z_proj - sensor_depth`` at the nearest pixel.

    Returns ``(point_index, residual)`` arrays. Projections that land on an
    invalid depth reading are omitted.
    """
    h, w = depth_map.shape
    col, row = projections.pixels(w, h)
    sensor = depth_map[row, col]
    ok = valid_depth(sensor)
    return projections.index[ok], projections.z[ok] - sensor[ok]
