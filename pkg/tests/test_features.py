import math

import numpy as np
import pytest

from voxsegnet.features import (
    PartFeature, cluster_purity, extract_part_feature, kmeans, knn, pairwise_distances,
    part_blocks, read_features, write_features,
)
from voxsegnet.models import ArchitectureSpec, build_model
from voxsegnet.synth import generate_shape
from voxsegnet.tensor import Tensor, no_grad
from voxsegnet.voxel import normalize_cloud, voxelize


def chair_grid(seed, R=8):
    return voxelize(normalize_cloud(generate_shape("chair", seed)), R)


def test_chair_descriptor_is_256_dims_and_deterministic():
    model = build_model(ArchitectureSpec("voxsegnet", 8, 4, 64, 8), seed=0)
    grid = chair_grid(1)
    with no_grad():
        model(Tensor(grid.occupancy[None, None].astype(float)))
    f = extract_part_feature(model, grid, "chair", "c1")
    assert f.vector.shape == (256,)
    again = extract_part_feature(model, grid, "chair", "c1")
    assert np.array_equal(f.vector, again.vector)
    # presence flags follow the predicted voxel counts; absent blocks are zero
    from voxsegnet.models import forward_segment
    _, pred = forward_segment(model, grid)
    for p in range(4):
        assert f.presence[p] == bool(np.any(pred == p + 1))
        if not f.presence[p]:
            assert not f.blocks[p].any()
    with pytest.raises(ValueError, match="resolution"):
        extract_part_feature(model, chair_grid(1, 16))


@pytest.mark.parametrize("variant,channels", [("unet3d", 6), ("sde_concat", 5)])
def test_descriptor_length_is_parts_times_width(variant, channels):
    model = build_model(ArchitectureSpec(variant, 8, 3, channels, 2), seed=0)
    grid = chair_grid(2)
    grid = grid.with_labels(np.minimum(grid.labels, 3))
    with no_grad():
        model(Tensor(grid.occupancy[None, None].astype(float)))
    f = extract_part_feature(model, grid)
    assert f.vector.size == 3 * model.features["head_in"].shape[1]


def test_constant_maps_and_empty_part():
    maps = np.full((5, 3, 3, 3), 2.5)
    labels = np.zeros((3, 3, 3), int)
    labels[0, 0, :2] = 1
    labels[2, 2, 2] = 3
    blocks, presence = part_blocks(maps, labels, 4)
    assert presence.tolist() == [True, False, True, False]
    assert np.all(blocks[[0, 2]] == 2.5) and not blocks[[1, 3]].any()


def test_block_is_masked_channel_mean(rng):
    maps = rng.standard_normal((3, 4, 4, 4))
    labels = rng.integers(0, 3, (4, 4, 4))
    blocks, _ = part_blocks(maps, labels, 2)
    for p in (1, 2):
        for c in range(3):
            vals = [maps[(c,) + i] for i in np.ndindex(4, 4, 4) if labels[i] == p]
            assert abs(blocks[p - 1, c] - sum(vals) / len(vals)) <= 1e-12


def test_distances_against_loop(rng):
    x = rng.standard_normal((7, 5))
    d = pairwise_distances(x, chunk=3)
    for i in range(7):
        assert d[i, i] == 0.0
        for j in range(7):
            ref = math.sqrt(sum((x[i, k] - x[j, k]) ** 2 for k in range(5)))
            assert abs(d[i, j] - ref) <= 1e-12
    with pytest.raises(ValueError):
        pairwise_distances(np.zeros(3))


def test_uniform_block_permutation_preserves_distances(rng):
    blocks = rng.standard_normal((6, 4, 3))
    perm = [2, 0, 3, 1]
    a = pairwise_distances(blocks.reshape(6, -1))
    b = pairwise_distances(blocks[:, perm].reshape(6, -1))
    assert np.abs(a - b).max() <= 1e-12


def test_knn_duplicate_first_and_ties(rng):
    x = rng.standard_normal((6, 4))
    x[4] = x[1]
    assert knn(x, x[1], 2).tolist() == [1, 4]
    assert knn(np.array([[1.0], [-1.0], [1.0]]), [0.0], 3).tolist() == [0, 1, 2]
    with pytest.raises(ValueError):
        knn(x, x[0], 7)
    with pytest.raises(ValueError):
        knn(x, [0.0], 1)


def test_kmeans_separated_groups_and_properties(rng):
    a = rng.normal(0.0, 0.1, (15, 3))
    b = rng.normal(5.0, 0.1, (15, 3))
    x = np.vstack([a, b])
    truth = np.array([0] * 15 + [1] * 15)
    res = kmeans(x, 2, seed=7)
    assert cluster_purity(res.assignments, truth) == 1.0
    assert all(b <= a + 1e-9 for a, b in zip(res.objective, res.objective[1:]))
    assert np.array_equal(kmeans(x, 2, seed=7).assignments, res.assignments)
    noisy = rng.standard_normal((40, 2))
    obj = kmeans(noisy, 5, seed=1).objective
    assert all(b <= a + 1e-9 for a, b in zip(obj, obj[1:]))


def test_kmeans_k_equals_n_and_errors(rng):
    x = rng.standard_normal((5, 2))
    res = kmeans(x, 5, seed=3)
    assert sorted(res.assignments.tolist()) == [0, 1, 2, 3, 4]
    assert np.array_equal(res.centroids[res.assignments], x)
    with pytest.raises(ValueError, match="distinct"):
        kmeans(np.zeros((4, 2)), 2)
    with pytest.raises(ValueError):
        kmeans(x, 6)


def test_cluster_purity_examples():
    assert cluster_purity([0, 0, 1, 1], [5, 5, 6, 6]) == 1.0
    assert cluster_purity([0, 0, 0, 1], [5, 6, 5, 6]) == 0.75


def test_feature_csv_round_trip(tmp_path, rng):
    feats = [PartFeature("chair", rng.standard_normal((2, 3)), np.array([True, False]), f"s{i}")
             for i in range(3)]
    path = tmp_path / "f.csv"
    write_features(path, feats)
    ids, bits, mat = read_features(path)
    assert ids == ["s0", "s1", "s2"] and bits == ["10"] * 3
    assert np.array_equal(mat, np.stack([f.vector for f in feats]))
    assert open(path).readline().strip() == "shape_id,part_presence_bits,f_0,f_1,f_2,f_3,f_4,f_5"
