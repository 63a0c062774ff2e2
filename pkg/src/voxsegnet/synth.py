"""Procedural labeled point clouds built from boxes and upright cylinders.

Each category is a recipe of primitives whose dimensions are drawn from fixed
ranges. Surfaces are sampled uniformly by area. Raw coordinates are in
arbitrary units with the floor at y = 0; :func:`voxsegnet.voxel.normalize_cloud`
maps them into the unit ball.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .io import read_cloud, write_cloud
from .voxel import LabeledPointCloud

# part id -> name, per synthetic category
CATEGORY_PARTS = {
    "table": {1: "top", 2: "leg"},
    "chair": {1: "back", 2: "seat", 3: "leg", 4: "arm"},
    "lamp": {1: "base", 2: "pole", 3: "shade"},
}

# first global id and part count of each category in the 50-part ShapeNet labeling
SHAPENET_PART_OFFSETS = {
    "airplane": (0, 4), "bag": (4, 2), "cap": (6, 2), "car": (8, 4),
    "chair": (12, 4), "earphone": (16, 3), "guitar": (19, 3), "knife": (22, 2),
    "lamp": (24, 4), "laptop": (28, 2), "motorbike": (30, 6), "mug": (36, 2),
    "pistol": (38, 3), "rocket": (41, 3), "skateboard": (44, 3), "table": (47, 3),
}

DEFAULT_POINTS = 2048
MIN_PART_FRACTION = 0.01


def global_to_local(labels, category):
    """Map 0-based global ShapeNet part ids to this category's ids 1..K."""
    start, count = SHAPENET_PART_OFFSETS[category]
    labels = np.asarray(labels, dtype=np.int64)
    local = labels - start + 1
    if local.min() < 1 or local.max() > count:
        raise ValueError(f"labels outside the {category} range {start}..{start + count - 1}")
    return local


def part_count(category):
    if category not in CATEGORY_PARTS:
        raise ValueError(f"unknown category {category!r}; expected one of {sorted(CATEGORY_PARTS)}")
    return len(CATEGORY_PARTS[category])


@dataclass(frozen=True)
class Box:
    center: tuple
    half: tuple
    label: int

    def faces(self):
        c, h = np.asarray(self.center), np.asarray(self.half)
        out = []
        for axis in range(3):
            u, v = [a for a in range(3) if a != axis]
            area = 4.0 * h[u] * h[v]
            for sign in (-1.0, 1.0):
                out.append((area, ("box", axis, sign)))
        return out

    def sample(self, face, n, rng):
        _, axis, sign = face
        c, h = np.asarray(self.center), np.asarray(self.half)
        p = c + (rng.random((n, 3)) * 2.0 - 1.0) * h
        p[:, axis] = c[axis] + sign * h[axis]
        return p

    def distance(self, p):
        """Unsigned distance from points to the box surface."""
        c, h = np.asarray(self.center), np.asarray(self.half)
        q = np.abs(p - c) - h
        outside = np.sqrt((np.maximum(q, 0.0) ** 2).sum(axis=1))
        inside = np.minimum(q.max(axis=1), 0.0)
        return np.abs(outside + inside)


@dataclass(frozen=True)
class Cylinder:
    """Closed cylinder with a vertical (y) axis."""

    center: tuple
    radius: float
    half_height: float
    label: int

    def faces(self):
        r, hh = self.radius, self.half_height
        return [
            (2.0 * np.pi * r * 2.0 * hh, ("side",)),
            (np.pi * r * r, ("cap", -1.0)),
            (np.pi * r * r, ("cap", 1.0)),
        ]

    def sample(self, face, n, rng):
        cx, cy, cz = self.center
        theta = rng.random(n) * 2.0 * np.pi
        if face[0] == "side":
            rad = np.full(n, self.radius)
            y = cy + (rng.random(n) * 2.0 - 1.0) * self.half_height
        else:
            rad = self.radius * np.sqrt(rng.random(n))
            y = np.full(n, cy + face[1] * self.half_height)
        return np.stack([cx + rad * np.cos(theta), y, cz + rad * np.sin(theta)], axis=1)

    def distance(self, p):
        cx, cy, cz = self.center
        d_rad = np.hypot(p[:, 0] - cx, p[:, 2] - cz) - self.radius
        d_ax = np.abs(p[:, 1] - cy) - self.half_height
        outside = np.hypot(np.maximum(d_rad, 0.0), np.maximum(d_ax, 0.0))
        inside = np.minimum(np.maximum(d_rad, d_ax), 0.0)
        return np.abs(outside + inside)


@dataclass
class ShapeRecipe:
    category: str
    seed: int
    primitives: list = field(default_factory=list)
    n_points: int = DEFAULT_POINTS

    @property
    def shape_id(self):
        return f"{self.category}_{self.seed:010d}"

    def labels(self):
        return sorted({p.label for p in self.primitives})


def _u(rng, lo, hi):
    return float(lo + (hi - lo) * rng.random())


def _legs(rng, label, half_w, half_d, height, thick, inset=0.0):
    """Four square legs under a rectangle, floor at y = 0."""
    legs = []
    for sx in (-1, 1):
        for sz in (-1, 1):
            cx = sx * (half_w - thick / 2 - inset)
            cz = sz * (half_d - thick / 2 - inset)
            legs.append(Box((cx, height / 2, cz), (thick / 2, height / 2, thick / 2), label))
    return legs


def _chair(rng):
    w = _u(rng, 0.45, 0.55)        # half width
    d = _u(rng, 0.42, 0.52)        # half depth
    seat_h = _u(rng, 0.85, 1.0)
    seat_t = _u(rng, 0.14, 0.18)
    back_h = _u(rng, 0.8, 1.05)
    back_t = _u(rng, 0.14, 0.18)
    leg_t = _u(rng, 0.18, 0.22)
    prims = _legs(rng, 3, w, d, seat_h, leg_t)
    prims.append(Box((0.0, seat_h + seat_t / 2, 0.0), (w, seat_t / 2, d), 2))
    top = seat_h + seat_t
    prims.append(Box((0.0, top + back_h / 2, -d + back_t / 2), (w, back_h / 2, back_t / 2), 1))
    if rng.random() < 0.5:
        arm_h = _u(rng, 0.3, 0.4)
        arm_t = _u(rng, 0.14, 0.18)
        for sx in (-1, 1):
            cx = sx * (w + arm_t / 2)
            prims.append(Box((cx, top + arm_h / 2, back_t / 2), (arm_t / 2, arm_h / 2, d - back_t / 2), 4))
    return prims


def _table(rng):
    w = _u(rng, 0.7, 0.95)
    d = _u(rng, 0.45, 0.7)
    h = _u(rng, 0.75, 0.95)
    top_t = _u(rng, 0.1, 0.14)
    leg_t = _u(rng, 0.19, 0.24)
    prims = _legs(rng, 2, w, d, h, leg_t, inset=_u(rng, 0.0, 0.08))
    prims.append(Box((0.0, h + top_t / 2, 0.0), (w, top_t / 2, d), 1))
    return prims


def _lamp(rng):
    base_r = _u(rng, 0.3, 0.42)
    base_hh = _u(rng, 0.04, 0.07)
    pole_r = _u(rng, 0.06, 0.09)
    pole_h = _u(rng, 1.0, 1.4)
    shade_r = _u(rng, 0.35, 0.5)
    shade_hh = _u(rng, 0.18, 0.26)
    y0 = 2 * base_hh
    return [
        Cylinder((0.0, base_hh, 0.0), base_r, base_hh, 1),
        Cylinder((0.0, y0 + pole_h / 2, 0.0), pole_r, pole_h / 2, 2),
        Cylinder((0.0, y0 + pole_h + shade_hh, 0.0), shade_r, shade_hh, 3),
    ]


_BUILDERS = {"chair": _chair, "table": _table, "lamp": _lamp}


def make_recipe(category, seed, n_points=DEFAULT_POINTS):
    part_count(category)
    rng = np.random.default_rng([seed, sorted(_BUILDERS).index(category)])
    return ShapeRecipe(category, seed, _BUILDERS[category](rng), n_points)


def sample_recipe(recipe, max_tries=20):
    """Sample the recipe's surfaces; returns the cloud and each point's primitive index."""
    faces = [(area, k, face) for k, prim in enumerate(recipe.primitives) for area, face in prim.faces()]
    areas = np.array([f[0] for f in faces])
    rng = np.random.default_rng([recipe.seed, 1 + sorted(_BUILDERS).index(recipe.category)])
    for _ in range(max_tries):
        counts = rng.multinomial(recipe.n_points, areas / areas.sum())
        pts, owner = [], []
        for (_, k, face), n in zip(faces, counts):
            if n:
                pts.append(recipe.primitives[k].sample(face, n, rng))
                owner.append(np.full(n, k))
        owner = np.concatenate(owner)
        labels = np.array([recipe.primitives[k].label for k in owner])
        frac = np.bincount(labels)[1:] / len(labels)
        present = np.array(recipe.labels())
        if np.all(frac[present - 1] >= MIN_PART_FRACTION):
            cloud = LabeledPointCloud(np.concatenate(pts), labels, recipe.category, recipe.shape_id)
            return cloud, owner
    raise RuntimeError(f"{recipe.shape_id}: a part stayed below {MIN_PART_FRACTION:.0%} of the points")


def generate_shape(category, seed, n_points=DEFAULT_POINTS):
    cloud, _ = sample_recipe(make_recipe(category, seed, n_points))
    return cloud


def make_dataset(category, n_train, n_test, seed, out):
    """Write ``out/{train,test}/<id>.txt`` plus ``out/manifest.json``."""
    part_count(category)
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    rng = np.random.default_rng(seed)
    seeds = rng.choice(2 ** 31 - 1, size=n_train + n_test, replace=False)
    manifest = {"category": category, "train": [], "test": []}
    for split, chunk in (("train", seeds[:n_train]), ("test", seeds[n_train:])):
        os.makedirs(os.path.join(out, split), exist_ok=True)
        for s in chunk:
            cloud = generate_shape(category, int(s))
            write_cloud(os.path.join(out, split, cloud.shape_id + ".txt"), cloud)
            manifest[split].append(cloud.shape_id)
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest


def load_dataset(root, split="train"):
    """Read one split of a dataset directory.

    With a manifest, shapes are loaded in manifest order; otherwise every
    ``*.txt`` under ``root/split`` (or ``root`` itself) in name order.
    """
    path = os.path.join(root, "manifest.json")
    if os.path.exists(path):
        with open(path) as fh:
            manifest = json.load(fh)
        if split not in manifest:
            raise ValueError(f"{path} has no split {split!r}")
        cat = manifest.get("category", "unknown")
        return [read_cloud(os.path.join(root, split, f"{sid}.txt"), cat, sid) for sid in manifest[split]]
    folder = os.path.join(root, split) if os.path.isdir(os.path.join(root, split)) else root
    names = sorted(n for n in os.listdir(folder) if n.endswith(".txt"))
    if not names:
        raise ValueError(f"no point-cloud files in {folder}")
    return [read_cloud(os.path.join(folder, n)) for n in names]
