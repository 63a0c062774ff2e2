"""Labeled point clouds, occupancy grids, and the conversions between them.

Grid arrays are indexed ``[z, y, x]`` so that C-order flattening is
x-fastest, matching the on-disk raster order and the ``(D, H, W)`` tensor
layout.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels

DEGENERACY = 1e-9
NORM_TOL = 1e-9


@dataclass
class LabeledPointCloud:
    points: np.ndarray
    labels: np.ndarray
    category: str = "unknown"
    shape_id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.points.shape[0] < 1:
            raise ValueError("point cloud needs at least one point")
        if self.labels.shape[0] != self.points.shape[0]:
            raise ValueError(f"{self.points.shape[0]} points but {self.labels.shape[0]} labels")
        if self.labels.min() < 1:
            raise ValueError("part labels must be positive integers")

    def __len__(self):
        return self.points.shape[0]

    def replace(self, points=None, labels=None):
        return LabeledPointCloud(
            self.points if points is None else points,
            self.labels if labels is None else labels,
            self.category,
            self.shape_id,
        )


@dataclass
class VoxelGrid:
    occupancy: np.ndarray
    labels: np.ndarray = None
    # transient: voxel linear index of each source point
    point_voxels: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.occupancy = np.asarray(self.occupancy, dtype=bool)
        R = self.occupancy.shape[0]
        if self.occupancy.shape != (R, R, R):
            raise ValueError(f"occupancy must be cubic, got {self.occupancy.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != self.occupancy.shape:
                raise ValueError("labels and occupancy shapes differ")
            if np.any((self.labels > 0) != self.occupancy):
                raise ValueError("labels must be set exactly at occupied voxels")

    @property
    def resolution(self):
        return self.occupancy.shape[0]

    @property
    def occupied_count(self):
        return int(self.occupancy.sum())

    def with_labels(self, labels):
        return VoxelGrid(self.occupancy, labels, self.point_voxels)


def normalize_cloud(cloud):
    """Center at the centroid and scale so the farthest point has norm 1."""
    centered = cloud.points - cloud.points.mean(axis=0)
    radius = np.sqrt((centered ** 2).sum(axis=1)).max()
    if radius <= DEGENERACY:
        raise ValueError("degenerate point cloud: all points coincide")
    return cloud.replace(points=centered / radius)


def voxel_coords(points, R):
    """Per-axis voxel indices ``(i, j, k)`` for x, y, z of normalized points."""
    idx = np.floor((points + 1.0) / 2.0 * R).astype(np.int64)
    return np.clip(idx, 0, R - 1)


def voxel_keys(points, R):
    """Linear x-fastest voxel index of each point."""
    ijk = voxel_coords(points, R)
    return (ijk[:, 2] * R + ijk[:, 1]) * R + ijk[:, 0]


def _check_normalized(points):
    worst = np.abs(points).max()
    if worst > 1.0 + NORM_TOL:
        raise ValueError(f"cloud is not normalized: |coordinate| reaches {worst:.6g} > 1")


def voxelize(cloud, R):
    """Occupancy grid with majority-vote part labels (ties to the smallest id)."""
    if R < 2:
        raise ValueError(f"resolution must be >= 2, got {R}")
    _check_normalized(cloud.points)
    keys = voxel_keys(cloud.points, R)
    uk, ul = kernels.majority_vote(keys, cloud.labels)
    occ = np.zeros(R ** 3, dtype=bool)
    lab = np.zeros(R ** 3, dtype=np.int64)
    occ[uk] = True
    lab[uk] = ul
    return VoxelGrid(occ.reshape(R, R, R), lab.reshape(R, R, R), keys)


def project_labels_to_points(grid, cloud):
    """Give each point the predicted label of its voxel.

    Points whose voxel carries no prediction fall back to the nearest labeled
    voxel by center distance, ties to the smallest linear index.
    """
    if grid.labels is None:
        raise ValueError("grid has no labels to project")
    R = grid.resolution
    if grid.point_voxels is not None and len(grid.point_voxels) != len(cloud):
        raise ValueError("grid was built from a different cloud")
    _check_normalized(cloud.points)
    flat = grid.labels.reshape(-1)
    labeled = np.flatnonzero(flat > 0)
    if labeled.size == 0:
        raise ValueError("prediction mask is empty")
    keys = voxel_keys(cloud.points, R)
    if grid.point_voxels is not None and not np.array_equal(keys, grid.point_voxels):
        raise ValueError("resolution or normalization differs from the grid's source cloud")
    out = flat[keys].copy()
    missing = np.flatnonzero(out == 0)
    if missing.size:
        centers = np.stack(np.unravel_index(labeled, (R, R, R)), axis=1)[:, ::-1]
        for i in missing:
            ijk = np.unravel_index(keys[i], (R, R, R))[::-1]
            d2 = ((centers - np.array(ijk)) ** 2).sum(axis=1)
            out[i] = flat[labeled[np.argmin(d2)]]
    return out


def rotate_cloud(cloud, n, up_axis=1):
    """Rotate by ``n * pi / 6`` about the upright axis (+y by default)."""
    if not 0 <= n <= 11 or int(n) != n:
        raise ValueError(f"rotation index must be in 0..11, got {n}")
    if n == 0:
        return cloud.replace(points=cloud.points.copy())
    theta = n * np.pi / 6
    c, s = np.cos(theta), np.sin(theta)
    # right-handed rotation in the plane of the two axes following up_axis
    a, b = (up_axis + 1) % 3, (up_axis + 2) % 3
    p = cloud.points
    out = p.copy()
    out[:, a] = c * p[:, a] - s * p[:, b]
    out[:, b] = s * p[:, a] + c * p[:, b]
    return cloud.replace(points=out)


def sparse_vote_projection(cloud, R):
    """Ground-truth labels quantized at resolution ``R`` and read back per point.

    Works on voxel keys without allocating an ``R^3`` grid, so very fine
    resolutions are cheap.
    """
    _check_normalized(cloud.points)
    keys = voxel_keys(cloud.points, R)
    uk, ul = kernels.majority_vote(keys, cloud.labels)
    return ul[np.searchsorted(uk, keys)]


def quantization_upper_bound(cloud, R, parts=None, strict=False):
    """Best point-level shape IoU (percent) any voxel labeling at ``R`` can reach."""
    from .metrics import shape_iou

    pred = sparse_vote_projection(cloud, R)
    parts = parts if parts is not None else np.unique(cloud.labels)
    return shape_iou(pred, cloud.labels, parts, strict=strict)


def all_points_distinct(cloud, R):
    keys = voxel_keys(cloud.points, R)
    return np.unique(keys).size == keys.size
