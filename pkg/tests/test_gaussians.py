from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lipsplat.errors import InvalidArgumentError, ParseError
from lipsplat.gaussians import (SH_C0, GaussianSet, densify_and_prune, init_random, knn_scale, read_ply,
                                write_ply)
from lipsplat.nn import logit, sigmoid

FIXTURES = Path(__file__).parent / "fixtures"
BOX = (-np.ones(3), np.ones(3))


def test_single_gaussian():
    gs = init_random(1, BOX, seed=5)
    assert len(gs) == 1
    assert np.all(np.abs(gs.means) <= 1)
    assert gs.opacity[0] == pytest.approx(0.1, abs=1e-15)
    np.testing.assert_array_equal(gs.colors, [[0.5, 0.5, 0.5]])
    np.testing.assert_array_equal(gs.quats, [[1, 0, 0, 0]])


def test_init_is_deterministic():
    assert init_random(50, BOX, 3).equals(init_random(50, BOX, 3))
    assert not init_random(50, BOX, 3).equals(init_random(50, BOX, 4))


def test_init_rejects_bad_input():
    with pytest.raises(InvalidArgumentError):
        init_random(0, BOX, 0)
    with pytest.raises(InvalidArgumentError):
        init_random(5, (np.zeros(3), np.array([1, 0, 1.0])), 0)


def test_init_markers_appended():
    mk = np.array([[0.1, 0.2, 0.3], [0.0, 0.0, 0.0]])
    gs = init_random(10, BOX, 0, markers=mk, marker_scale=0.02)
    assert len(gs) == 12 and gs.marker.sum() == 2
    np.testing.assert_array_equal(gs.means[gs.marker], mk)
    np.testing.assert_allclose(gs.scales[gs.marker], 0.02)


def test_knn_scale_unit_lattice():
    g = np.stack(np.meshgrid(*[np.arange(6.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
    s = knn_scale(g)
    # exhaustive oracle
    d = np.linalg.norm(g[:, None] - g[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    ref = np.sort(d, axis=1)[:, :3].mean(1)
    np.testing.assert_allclose(s, ref, rtol=1e-12)
    interior = np.all((g > 0) & (g < 5), axis=1)
    np.testing.assert_allclose(s[interior], 1.0)


@given(arrays(np.float64, 8, elements=st.floats(-5, 5)), arrays(np.float64, 8, elements=st.floats(1e-6, 1 - 1e-6)))
def test_decode_maps_round_trip(x, p):
    np.testing.assert_allclose(np.log(np.exp(x)), x, rtol=0, atol=1e-12)
    np.testing.assert_allclose(logit(sigmoid(x)), x, rtol=0, atol=1e-12)
    np.testing.assert_allclose(sigmoid(logit(p)), p, rtol=0, atol=1e-12)
    assert np.all((sigmoid(4 * x) > 0) & (sigmoid(4 * x) < 1))


def _set(n, rng, opacity=0.5, scale=0.01):
    return GaussianSet(rng.normal(size=(n, 3)), np.tile([1.0, 0, 0, 0], (n, 1)), np.full((n, 3), np.log(scale)),
                       np.full(n, logit(opacity)), rng.uniform(size=(n, 3)), np.zeros(n, bool))


def test_zero_gradients_only_prune(rng):
    gs = _set(6, rng)
    gs.opacity_logit[2] = logit(0.001)
    r = densify_and_prune(gs, np.zeros(6), 2e-4, 0.05, rng)
    assert len(r.gaussians) == 5 and r.n_pruned == 1 and r.n_cloned == r.n_split == 0
    np.testing.assert_array_equal(r.parent, [0, 1, 3, 4, 5])


def test_single_clone_grows_by_one(rng):
    gs = _set(6, rng)
    g = np.zeros(6)
    g[4] = 1.0
    r = densify_and_prune(gs, g, 2e-4, 0.05, rng, grad_dir=np.tile([1.0, 0, 0], (6, 1)))
    assert len(r.gaussians) == 7 and r.n_cloned == 1
    assert r.parent[-1] == 4 and r.fresh[-1]
    # offset half a scale downhill
    np.testing.assert_allclose(r.gaussians.means[-1], gs.means[4] - [0.005, 0, 0])


def test_split_replaces_with_two_children(rng):
    gs = _set(4, rng, scale=0.2)
    g = np.zeros(4)
    g[1] = 1.0
    r = densify_and_prune(gs, g, 2e-4, 0.05, rng)
    assert len(r.gaussians) == 5 and r.n_split == 1
    np.testing.assert_allclose(r.gaussians.scales[-2:], 0.2 / 1.6)
    assert list(r.parent[-2:]) == [1, 1]


def test_markers_never_densified_or_pruned(rng):
    gs = _set(4, rng, opacity=0.001)
    gs.marker[0] = True
    r = densify_and_prune(gs, np.ones(4), 2e-4, 0.05, rng)
    assert r.gaussians.marker.sum() == 1


def test_max_count_cap(rng):
    gs = _set(10, rng)
    r = densify_and_prune(gs, np.linspace(1, 2, 10), 2e-4, 0.05, rng, max_count=13)
    assert len(r.gaussians) == 13
    assert set(r.parent[10:]) == {7, 8, 9}


@given(st.integers(1, 30), st.integers(0, 2 ** 31))
def test_densify_never_empty_or_nan(n, seed):
    rng = np.random.default_rng(seed)
    gs = _set(n, rng, opacity=0.003)
    gs.log_scales[:] = rng.uniform(-6, 0, size=(n, 3))
    r = densify_and_prune(gs, rng.exponential(1e-4, size=n), 2e-4, 0.05, rng)
    assert len(r.gaussians) >= 1
    for k in GaussianSet.PARAMS:
        assert np.all(np.isfinite(getattr(r.gaussians, k)))


def test_ply_round_trip_bitwise(tmp_path, rng):
    gs = _set(7, rng)
    gs.quats = rng.normal(size=(7, 4))
    gs.marker[[1, 5]] = True
    write_ply(tmp_path / "a.ply", gs)
    assert read_ply(tmp_path / "a.ply").equals(gs)


def test_ply_missing_property(tmp_path):
    text = (FIXTURES / "minimal_3dgs.ply").read_text().replace("property float opacity\n", "")
    (tmp_path / "b.ply").write_text(text)
    with pytest.raises(ParseError, match="opacity"):
        read_ply(tmp_path / "b.ply")


def test_ply_truncated_binary(tmp_path, rng):
    write_ply(tmp_path / "a.ply", _set(3, rng))
    data = (tmp_path / "a.ply").read_bytes()
    (tmp_path / "t.ply").write_bytes(data[:-10])
    with pytest.raises(ParseError) as e:
        read_ply(tmp_path / "t.ply")
    assert e.value.offset is not None
    (tmp_path / "x.ply").write_bytes(b"not a ply")
    with pytest.raises(ParseError):
        read_ply(tmp_path / "x.ply")


def test_third_party_ply_mapping():
    gs = read_ply(FIXTURES / "minimal_3dgs.ply")
    assert len(gs) == 2 and not gs.marker.any()
    np.testing.assert_allclose(gs.means[0], [0.5, -1, 2])
    np.testing.assert_allclose(gs.colors[0], 0.5 + SH_C0 * np.array([0.0, 1, -1]))
    np.testing.assert_allclose(gs.opacity_logit, [2, -2])
    np.testing.assert_allclose(gs.log_scales[0], [-3, -2.5, -4])
    np.testing.assert_allclose(gs.quats[1], [0.5] * 4)
