import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from crowdpatch.scenes import (PlacementError, density_from_points, make_dataset, make_scene,
                               nearest_neighbor_distances, split_indices, synth_scene)


def _gauss(sigma, r0, c0):
    norm = 1.0 / (2 * np.pi * sigma**2)
    return lambda c, r: norm * np.exp(-((r - r0) ** 2 + (c - c0) ** 2) / (2 * sigma**2))


def test_empty_scene_has_background_only():
    img, pts = synth_scene(3, 0, 32, 32)
    assert pts.shape == (0, 2)
    assert img.shape == (3, 32, 32) and 0.0 <= img.min() and img.max() <= 1.0


def test_same_seed_gives_identical_bytes():
    a, pa = synth_scene(11, 20, 64, 64, "clustered")
    b, pb = synth_scene(11, 20, 64, 64, "clustered")
    assert a.tobytes() == b.tobytes() and pa.tobytes() == pb.tobytes()


def test_different_seeds_differ():
    assert not np.array_equal(synth_scene(1, 5, 32, 32)[0], synth_scene(2, 5, 32, 32)[0])


def test_points_lie_inside_canvas():
    _, pts = synth_scene(5, 40, 64, 48)
    assert np.all(pts >= 0) and np.all(pts[:, 0] <= 63) and np.all(pts[:, 1] <= 47)


def test_clustered_neighbours_are_closer_than_uniform():
    _, clustered = synth_scene(7, 50, 128, 128, "clustered")
    _, uniform = synth_scene(7, 50, 128, 128, "uniform")

    def brute(points):
        out = []
        for i, p in enumerate(points):
            out.append(min(np.hypot(*(p - q)) for j, q in enumerate(points) if j != i))
        return np.array(out)

    assert np.allclose(nearest_neighbor_distances(clustered), brute(clustered))
    assert np.median(brute(clustered)) < np.median(brute(uniform))


def test_overfull_canvas_raises_placement_error():
    with pytest.raises(PlacementError, match="could not place"):
        synth_scene(0, 2000, 32, 32)


@pytest.mark.parametrize("args", [dict(count=-1), dict(h=31), dict(w=16)])
def test_bad_arguments(args):
    kw = dict(seed=0, count=1, h=32, w=32) | args
    with pytest.raises(ValueError):
        synth_scene(**kw)


def test_unknown_style():
    with pytest.raises(ValueError, match="style"):
        synth_scene(0, 3, 32, 32, "spiral")


# ---------------------------------------------------------------- density maps

def test_zero_points_zero_map():
    assert not density_from_points(np.empty((0, 2)), 4.0, 16, 16).any()


def test_centered_point_mass_matches_integral():
    d = density_from_points(np.array([[31.5, 31.5]]), 4.0, 64, 64)
    mass, _ = integrate.dblquad(_gauss(4.0, 31.5, 31.5), -0.5, 63.5, -0.5, 63.5, epsabs=1e-12)
    assert abs(d.sum() - mass) < 1e-9
    assert abs(d.sum() - 1.0) < 1e-6


def test_pixel_values_match_cell_integrals():
    rng = np.random.default_rng(4)
    r0, c0 = rng.uniform(5, 25, size=2)
    d = density_from_points(np.array([[r0, c0]]), 2.5, 32, 32)
    for i, j in rng.integers(0, 32, size=(6, 2)):
        cell, _ = integrate.dblquad(_gauss(2.5, r0, c0), i - 0.5, i + 0.5, j - 0.5, j + 0.5, epsabs=1e-13)
        assert d[i, j] == pytest.approx(cell, abs=1e-11)


def test_truncation_near_border_loses_mass():
    d = density_from_points(np.array([[0.0, 0.0]]), 4.0, 64, 64)
    assert 0.2 < d.sum() < 0.35  # roughly a quarter survives in the corner


def test_density_is_deterministic():
    pts = np.array([[10.2, 11.7], [30.0, 5.5]])
    assert np.array_equal(density_from_points(pts, 4.0, 48, 48), density_from_points(pts.copy(), 4.0, 48, 48))


def test_sigma_must_be_positive():
    with pytest.raises(ValueError):
        density_from_points(np.zeros((1, 2)), 0.0, 8, 8)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(12, 51), st.floats(12, 51)), min_size=1, max_size=25))
def test_mass_invariant_for_interior_points(points):
    d = density_from_points(np.array(points), 4.0, 64, 64)
    assert np.all(d >= 0)
    assert abs(d.sum() - len(points)) <= 0.01 * len(points)


# ---------------------------------------------------------------- datasets

def test_scene_density_matches_points():
    sc = make_scene(9, 12, 64, 64)
    assert sc.count == 12
    assert np.array_equal(sc.density, density_from_points(sc.points, 4.0, 64, 64))


def test_dataset_seeds_and_counts():
    ds = make_dataset(2, 6, 32, 32, count_range=(1, 4), style="mixed")
    assert [s.seed for s in ds] == [200000 + i for i in range(6)]
    assert all(1 <= s.count <= 4 for s in ds)


def test_split_is_80_10_10_by_index():
    sp = split_indices(500)
    assert (len(sp["train"]), len(sp["val"]), len(sp["test"])) == (400, 50, 50)
    assert sp["train"].stop == sp["val"].start and sp["val"].stop == sp["test"].start == 450
