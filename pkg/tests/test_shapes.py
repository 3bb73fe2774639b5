import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from morphodiff import shapes


def brute_chamfer(a, b):
    da = [min(np.hypot(*(p - q)) for q in b) for p in a]
    db = [min(np.hypot(*(p - q)) for q in a) for p in b]
    return np.mean(da) + np.mean(db)


def test_disc_radius_band():
    pts = shapes.sample_surface(shapes.ShapeSpec("disc", {"r": 0.5}, 3), 256)
    r = np.linalg.norm(pts, axis=1)
    s = shapes.DEFAULT_JITTER
    assert pts.shape == (256, 2)
    assert r.min() >= 0.8 - 3 * s and r.max() <= 0.8 + 3 * s


def test_box_points_on_boundary_without_jitter():
    pts = shapes.sample_surface(shapes.ShapeSpec("box", {"w": 0.4, "h": 0.4}), 8, jitter=0.0)
    half = 0.8
    on_edge = np.isclose(np.abs(pts).max(1), half, atol=1e-12)
    assert on_edge.all()


def test_blob_bounds():
    spec = shapes.random_spec(np.random.default_rng(7), "n-legged-blob", seed=7)
    spec.params["n"] = 4
    pts = shapes.sample_surface(spec, 256)
    assert pts.shape == (256, 2) and np.isfinite(pts).all()
    assert np.abs(pts).max() <= 1.0


def test_rejects_too_few_points_and_degenerate():
    with pytest.raises(ValueError):
        shapes.sample_surface(shapes.ShapeSpec("disc", {"r": 0.5}), 4)
    with pytest.raises(ValueError):
        shapes.sample_surface(shapes.ShapeSpec("box", {"w": 0.0, "h": 0.4}), 64)


def test_corpus_contract_and_determinism():
    specs, clouds = shapes.generate_corpus(70, seed=0)
    assert clouds.shape == (70, 256, 2)
    _, again = shapes.generate_corpus(70, seed=0)
    assert np.array_equal(clouds, again)
    fams = [s.family for s in specs]
    counts = [fams.count(f) for f in shapes.FAMILIES]
    assert max(counts) - min(counts) == 0
    assert np.abs(clouds.mean(1)).max() < 1e-9
    assert np.abs(clouds).max() <= 1.0
    one_specs, one = shapes.generate_corpus(1, seed=5)
    assert one.shape == (1, 256, 2)


def test_corpus_regions_inside_workspace():
    specs, _ = shapes.generate_corpus(35, seed=2)
    for s in specs:
        g = shapes.region(s)
        assert g.is_valid and g.area > 0


def test_corpus_round_trip(tmp_path):
    specs, clouds = shapes.generate_corpus(5, seed=1)
    shapes.save_corpus(str(tmp_path), specs, clouds)
    s2, c2 = shapes.load_corpus(str(tmp_path))
    assert np.array_equal(clouds, c2)
    assert [s.to_dict() for s in specs] == [s.to_dict() for s in s2]


def test_chamfer_examples():
    assert shapes.chamfer([[0, 0]], [[1, 0]]) == 2.0
    assert shapes.chamfer([[0, 0], [2, 0]], [[1, 0]]) == 2.0
    a = np.random.default_rng(0).random((20, 2))
    assert shapes.chamfer(a, a) == 0.0
    with pytest.raises(ValueError):
        shapes.chamfer(np.zeros((0, 2)), a)


pts = st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), min_size=1, max_size=12)


@given(pts, pts)
def test_chamfer_symmetric_nonnegative_and_matches_brute_force(a, b):
    a, b = np.array(a), np.array(b)
    c = shapes.chamfer(a, b)
    assert c >= 0
    assert c == pytest.approx(shapes.chamfer(b, a), abs=1e-12)
    assert c == pytest.approx(brute_chamfer(a, b), abs=1e-12)


@given(pts)
def test_chamfer_zero_on_permutation(a):
    a = np.array(a)
    assert shapes.chamfer(a, a[::-1]) <= 1e-12


def test_nearest_chamfer_matches_exhaustive():
    _, corpus = shapes.generate_corpus(40, seed=3)
    _, q = shapes.generate_corpus(6, seed=4)
    fast = shapes.nearest_chamfer(q, corpus, candidates=40)
    exact = np.array([shapes.chamfer_batch(x, corpus).min() for x in q])
    assert np.allclose(fast, exact, atol=1e-12)
