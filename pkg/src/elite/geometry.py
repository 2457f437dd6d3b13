"""Pinhole camera, point-to-pixel projection and voxel partitioning."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        ext = np.asarray(self.extrinsic, dtype=np.float64)
        object.__setattr__(self, "extrinsic", ext)
        if not (self.fx > 0 and self.fy > 0):
            raise ContractError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ContractError("image size must be positive")
        if ext.shape != (4, 4):
            raise ContractError("extrinsic must be 4x4")
        rot = ext[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6, rtol=0):
            raise ContractError("extrinsic rotation is not orthonormal")
        if not np.allclose(ext[3], [0, 0, 0, 1]):
            raise ContractError("extrinsic last row must be [0, 0, 0, 1]")

    def to_camera(self, xyz: np.ndarray) -> np.ndarray:
        """LiDAR-frame points (N x 3) to camera-frame points."""
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        return xyz @ self.extrinsic[:3, :3].T + self.extrinsic[:3, 3]

    def to_lidar(self, xyz_cam: np.ndarray) -> np.ndarray:
        xyz_cam = np.asarray(xyz_cam, dtype=np.float64).reshape(-1, 3)
        return (xyz_cam - self.extrinsic[:3, 3]) @ self.extrinsic[:3, :3]

    def unproject(self, u, v, depth) -> np.ndarray:
        """Pixel coordinates at a camera-frame depth back to camera-frame points."""
        u, v, depth = (np.asarray(a, dtype=np.float64) for a in (u, v, depth))
        x = (u - self.cx) / self.fx * depth
        y = (v - self.cy) / self.fy * depth
        return np.stack([x, y, depth], axis=-1)


def round_half_up(x):
    """Nearest integer, ties toward +inf."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


@dataclass(frozen=True)
class PixelCorrespondences:
    """Kept points and where they land, ordered by point index."""

    point_index: np.ndarray
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray

    def __len__(self):
        return len(self.point_index)

    def pixels(self):
        return self.v, self.u


def project_points(cloud: np.ndarray, cam: CameraModel) -> PixelCorrespondences:
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 4) if np.size(cloud) else np.zeros((0, 4))
    xc = cam.to_camera(cloud[:, :3])
    z = xc[:, 2]
    front = z > 0
    safe = np.where(front, z, 1.0)
    u = round_half_up(cam.fx * xc[:, 0] / safe + cam.cx)
    v = round_half_up(cam.fy * xc[:, 1] / safe + cam.cy)
    keep = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    idx = np.flatnonzero(keep)
    return PixelCorrespondences(idx, u[idx], v[idx], z[idx])


@dataclass(frozen=True)
class VoxelPartition:
    voxel_edge: float
    assignment: np.ndarray
    voxel_count: int


def voxelize(cloud: np.ndarray, edge: float) -> VoxelPartition:
    """Bin points into cubic voxels; ids follow first occurrence in the cloud."""
    if not edge > 0:
        raise ContractError("voxel edge must be positive")
    xyz = np.asarray(cloud, dtype=np.float64).reshape(-1, 4)[:, :3] if np.size(cloud) else np.zeros((0, 3))
    if len(xyz) == 0:
        return VoxelPartition(float(edge), np.zeros(0, dtype=np.int64), 0)
    keys = np.floor(xyz / edge).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    return VoxelPartition(float(edge), rank[inverse], len(first))


def stage_edges(base_edge: float, stages: int) -> list[float]:
    """Voxel edge per stage, doubling from ``base_edge``."""
    return [base_edge * 2 ** l for l in range(stages)]
