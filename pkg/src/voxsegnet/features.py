"""Part-based shape descriptors and small clustering utilities.

A shape's descriptor concatenates, in part-id order, the channel means of the
head-input feature maps over the voxels predicted as each part. Parts with no
predicted voxel contribute a zero block.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .models import forward_segment

MAX_KMEANS_ITERS = 100


@dataclass
class PartFeature:
    category: str
    blocks: np.ndarray          # (parts, channels)
    presence: np.ndarray        # (parts,) bool
    shape_id: str = ""

    @property
    def vector(self):
        return self.blocks.reshape(-1)

    @property
    def presence_bits(self):
        return "".join("1" if p else "0" for p in self.presence)


def part_blocks(feature_maps, labels, parts):
    """Masked channel means of ``(C, D, H, W)`` maps for part ids ``1..parts``."""
    C = feature_maps.shape[0]
    flat = feature_maps.reshape(C, -1)
    lab = labels.reshape(-1)
    blocks = np.zeros((parts, C), dtype=np.float64)
    presence = np.zeros(parts, dtype=bool)
    for p in range(1, parts + 1):
        sel = lab == p
        if sel.any():
            blocks[p - 1] = flat[:, sel].astype(np.float64).mean(axis=1)
            presence[p - 1] = True
    return blocks, presence


def extract_part_feature(model, grid, category="unknown", shape_id=""):
    """Descriptor of one grid; masks come from the model's own prediction."""
    R = model.spec.resolution
    if grid.resolution != R:
        raise ValueError(f"grid resolution {grid.resolution} does not match model resolution {R}")
    _, pred = forward_segment(model, grid)
    maps = model.features["head_in"].data[0]
    blocks, presence = part_blocks(maps, pred, model.spec.labels)
    return PartFeature(category, blocks, presence, shape_id)


def write_features(path, feats):
    feats = list(feats)
    D = len(feats[0].vector) if feats else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["shape_id", "part_presence_bits"] + [f"f_{i}" for i in range(D)])
        for f in feats:
            if len(f.vector) != D:
                raise ValueError(f"feature length {len(f.vector)} of {f.shape_id} differs from {D}")
            w.writerow([f.shape_id, f.presence_bits] + [repr(float(v)) for v in f.vector])


def read_features(path):
    """Return ``(shape_ids, presence_bits, matrix)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["shape_id", "part_presence_bits"]:
        raise ValueError(f"{path}: not a feature CSV")
    body = rows[1:]
    if not body:
        raise ValueError(f"{path}: no feature rows")
    ids = [r[0] for r in body]
    bits = [r[1] for r in body]
    mat = np.array([[float(v) for v in r[2:]] for r in body])
    return ids, bits, mat


def pairwise_distances(features, chunk=256):
    """Euclidean distance matrix, from explicit differences (exact zeros for duplicates)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be a 2-D array (one row per shape)")
    d = np.empty((len(x), len(x)))
    for i in range(0, len(x), chunk):
        diff = x[i:i + chunk, None, :] - x[None, :, :]
        d[i:i + chunk] = np.sqrt((diff * diff).sum(axis=2))
    return d


def knn(features, query, k):
    """Indices of the ``k`` rows nearest to ``query``; ties to the smaller index."""
    x = np.asarray(features, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[1] != q.size:
        raise ValueError(f"query length {q.size} does not match feature length {x.shape[-1]}")
    if not 1 <= k <= len(x):
        raise ValueError(f"k={k} outside 1..{len(x)}")
    d = np.sqrt(((x - q) ** 2).sum(axis=1))
    return np.lexsort((np.arange(len(x)), d))[:k]


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    objective: list = field(default_factory=list)
    iterations: int = 0


def _assign(x, centroids):
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1), d2


def kmeans(features, k, seed=0):
    """Lloyd's algorithm seeded with ``k`` distinct sample points.

    ``objective`` records the within-cluster sum of squares after each
    assignment step; it never increases.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be a 2-D array")
    if k < 1 or k > len(x):
        raise ValueError(f"k={k} outside 1..{len(x)}")
    _, first = np.unique(x, axis=0, return_index=True)
    if len(first) < k:
        raise ValueError(f"only {len(first)} distinct points for k={k}")
    rng = np.random.default_rng(seed)
    centroids = x[rng.choice(np.sort(first), size=k, replace=False)].copy()
    assign, d2 = _assign(x, centroids)
    objective = [float(d2[np.arange(len(x)), assign].sum())]
    it = 0
    for it in range(1, MAX_KMEANS_ITERS + 1):
        for j in range(k):
            members = assign == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
        new, d2 = _assign(x, centroids)
        objective.append(float(d2[np.arange(len(x)), new].sum()))
        if np.array_equal(new, assign):
            break
        assign = new
    return KMeansResult(assign, centroids, objective, it)


def cluster_purity(assignments, truth):
    """Fraction of items whose cluster's majority class matches their own."""
    assignments = np.asarray(assignments)
    truth = np.asarray(truth)
    hit = 0
    for c in np.unique(assignments):
        _, counts = np.unique(truth[assignments == c], return_counts=True)
        hit += counts.max()
    return hit / len(truth)
