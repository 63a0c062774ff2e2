import json
import os

import numpy as np
import pytest

from voxsegnet.synth import (
    CATEGORY_PARTS, Box, Cylinder, generate_shape, global_to_local, load_dataset, make_dataset,
    make_recipe, part_count, sample_recipe,
)
from voxsegnet.voxel import normalize_cloud, voxelize


@pytest.mark.parametrize("category", sorted(CATEGORY_PARTS))
def test_labels_size_and_part_fractions(category):
    for seed in range(1, 6):
        c = generate_shape(category, seed)
        assert len(c) >= 500
        assert set(c.labels.tolist()) <= set(CATEGORY_PARTS[category])
        assert c.category == category and c.shape_id.startswith(category)
        frac = np.bincount(c.labels) / len(c)
        assert all(frac[p] >= 0.01 for p in set(c.labels.tolist()))
        voxelize(normalize_cloud(c), 32)


def test_table_seed_one_and_fixed_part_sets():
    c = generate_shape("table", 1)
    assert set(c.labels.tolist()) == {1, 2}
    assert set(generate_shape("lamp", 3).labels.tolist()) == {1, 2, 3}
    chair_sets = {frozenset(generate_shape("chair", s).labels.tolist()) for s in range(20)}
    assert chair_sets == {frozenset({1, 2, 3}), frozenset({1, 2, 3, 4})}


def test_arms_roughly_half():
    arms = sum(4 in generate_shape("chair", s, n_points=600).labels for s in range(60))
    assert 15 <= arms <= 45


def test_determinism():
    a, b = generate_shape("chair", 42), generate_shape("chair", 42)
    assert np.array_equal(a.points, b.points) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.points, generate_shape("chair", 43).points)


@pytest.mark.parametrize("category", sorted(CATEGORY_PARTS))
def test_points_on_their_primitive(category):
    for seed in range(4):
        recipe = make_recipe(category, seed)
        cloud, owner = sample_recipe(recipe)
        for k, prim in enumerate(recipe.primitives):
            pts = cloud.points[owner == k]
            if len(pts):
                assert prim.distance(pts).max() <= 1e-9
                assert np.all(cloud.labels[owner == k] == prim.label)


def test_primitive_distance_oracles():
    box = Box((0.0, 0.0, 0.0), (1.0, 2.0, 3.0), 1)
    p = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.5, 2.0, 0.0]])
    assert box.distance(p).tolist() == [1.0, 1.0, 0.0]
    cyl = Cylinder((0.0, 0.0, 0.0), 1.0, 1.0, 1)
    p = np.array([[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 1.0, 0.5], [4.0, 5.0, 0.0]])
    assert cyl.distance(p).tolist() == [1.0, 2.0, 0.0, 5.0]


@pytest.mark.parametrize("category,leg", [("chair", 3), ("table", 2)])
def test_legs_at_least_two_voxels_at_32(category, leg):
    for seed in range(40):
        recipe = make_recipe(category, seed)
        cloud, _ = sample_recipe(recipe)
        radius = np.linalg.norm(cloud.points - cloud.points.mean(axis=0), axis=1).max()
        legs = [p for p in recipe.primitives if p.label == leg]
        thin = min(2 * min(p.half[0], p.half[2]) for p in legs)
        assert thin / radius * 32 / 2 >= 2.0


def test_unknown_category():
    with pytest.raises(ValueError, match="unknown category"):
        generate_shape("sofa", 1)
    assert part_count("chair") == 4


def test_global_to_local():
    assert global_to_local([12, 13, 15], "chair").tolist() == [1, 2, 4]
    with pytest.raises(ValueError):
        global_to_local([16], "chair")


def test_dataset_layout_determinism_and_disjointness(tmp_path):
    m = make_dataset("chair", 20, 5, 7, tmp_path / "a")
    make_dataset("chair", 20, 5, 7, tmp_path / "b")
    assert len(m["train"]) == 20 and len(m["test"]) == 5
    assert not set(m["train"]) & set(m["test"])
    files = sorted(os.listdir(tmp_path / "a" / "train")) + sorted(os.listdir(tmp_path / "a" / "test"))
    assert len(set(files)) == 25
    for split in ("train", "test"):
        for name in os.listdir(tmp_path / "a" / split):
            assert (tmp_path / "a" / split / name).read_bytes() == (tmp_path / "b" / split / name).read_bytes()
    saved = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert saved == m and saved["category"] == "chair"
    train = load_dataset(tmp_path / "a", "train")
    assert [c.shape_id for c in train] == m["train"]
    ref = generate_shape("chair", int(m["train"][0].split("_")[1]))
    assert np.abs(train[0].points - ref.points).max() <= 1e-9
    assert np.array_equal(train[0].labels, ref.labels)
    with pytest.raises(ValueError):
        make_dataset("chair", 0, 1, 7, tmp_path / "c")
