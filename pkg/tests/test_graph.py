import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import edge_sum, pairwise_sum
from skelae.autodiff import backward, leaf
from skelae.autodiff.gradcheck import check_gradients
from skelae.autodiff.node import ShapeError
from skelae.graph import NTU25_BONES, build_graph, laplacian_quadratic, named_graph, r_skel


def test_two_joint_graph():
    g = build_graph(2, [(0, 1)])
    assert g.W.tolist() == [[0, 1], [1, 0]]
    assert g.D.tolist() == [[1, 0], [0, 1]]
    assert g.L.tolist() == [[1, -1], [-1, 1]]


def test_path3_spectrum():
    g = named_graph("path3")
    assert np.all(g.L.sum(axis=1) == 0)
    np.testing.assert_allclose(np.linalg.eigvalsh(g.L), [0.0, 1.0, 3.0], atol=1e-12)


def test_ntu_topology():
    g = named_graph("ntu25")
    assert g.m == 25 and g.bone_count == 24 == len(NTU25_BONES)
    assert np.trace(g.L) == 48
    assert np.array_equal(g.W, g.W.T) and np.all(np.diag(g.W) == 0)
    assert set(np.unique(g.W)) == {0.0, 1.0}
    assert np.linalg.eigvalsh(g.L).min() >= -1e-10
    assert np.allclose(g.L @ np.ones(25), 0)


def test_build_graph_errors():
    with pytest.raises(ValueError, match="self-loop"):
        build_graph(3, [(1, 1)])
    with pytest.raises(ValueError, match="out of range"):
        build_graph(3, [(0, 3)])
    with pytest.raises(KeyError):
        named_graph("nope")


def test_quadratic_examples():
    g = build_graph(2, [(0, 1)])
    z = np.array([1.0, 0.0])
    assert laplacian_quadratic(z, g.L) == 1.0
    assert pairwise_sum(z, g.W) == 2.0
    assert laplacian_quadratic(np.full(2, 3.7), g.L) == 0.0
    with pytest.raises(ShapeError):
        laplacian_quadratic(np.ones(3), g.L)


def test_quadratic_equals_edge_sum_on_ntu():
    g = named_graph("ntu25")
    rng = np.random.default_rng(0)
    for _ in range(20):
        z = rng.normal(size=25)
        q = laplacian_quadratic(z, g.L)
        assert abs(q - edge_sum(z, g.edges)) <= 1e-12 * max(1.0, q)
        assert abs(2 * q - pairwise_sum(z, g.W)) <= 1e-12 * max(1.0, q)
        # zLz = ||sqrt(L) z||^2
        w, v = np.linalg.eigh(g.L)
        Q = v @ np.diag(np.sqrt(np.clip(w, 0, None))) @ v.T
        assert abs(np.sum((Q @ z) ** 2) - q) <= 1e-10 * max(1.0, q)


def test_r_skel_reductions():
    g = named_graph("ntu25")
    rng = np.random.default_rng(1)
    # all joints coincident in each frame/axis -> zero
    x = np.broadcast_to(rng.normal(size=(3, 3, 1, 7)), (3, 3, 25, 7)).copy()
    assert r_skel(leaf(x), g.L).value == pytest.approx(0.0, abs=1e-12)
    z = rng.normal(size=25)
    single = r_skel(leaf(z.reshape(1, 1, 25, 1)), g.L).value
    assert single == pytest.approx(laplacian_quadratic(z, g.L), rel=1e-14)


def test_r_skel_gradient():
    g = named_graph("toy9")
    rng = np.random.default_rng(2)
    x = leaf(rng.normal(size=(2, 3, 9, 5)))
    backward(r_skel(x, g.L))
    expected = np.einsum("ij,ncjt->ncit", 2 * g.L, x.value) / (2 * 3 * 5)
    np.testing.assert_allclose(x.grad, expected, rtol=1e-13)
    assert check_gradients(lambda: r_skel(x, g.L), [x])[0] <= 1e-6


def test_r_skel_shape_error():
    with pytest.raises(ShapeError):
        r_skel(leaf(np.zeros((1, 3, 8, 4))), named_graph("toy9").L)


@given(arrays(np.float64, (2, 3, 9, 4), elements=st.floats(-10, 10)),
       st.floats(-5, 5), st.integers(0, 2))
@settings(max_examples=50, deadline=None)
def test_r_skel_nonnegative_and_translation_invariant(x, shift, axis):
    L = named_graph("toy9").L
    base = r_skel(leaf(x), L).value
    assert base >= -1e-9
    moved = x.copy()
    moved[:, axis] += shift
    assert r_skel(leaf(moved), L).value == pytest.approx(base, rel=1e-9, abs=1e-9)


def test_r_skel_bone_stretch_and_untouched_edges():
    g = named_graph("toy9")
    rng = np.random.default_rng(3)
    z = rng.normal(size=9)
    # pull joint 4 (hand) away from joint 3 (elbow) along the line joining them
    i, j = 3, 4
    direction = np.sign(z[j] - z[i]) or 1.0
    stretched = z.copy()
    stretched[j] += 0.5 * direction
    assert laplacian_quadratic(stretched, g.L) > laplacian_quadratic(z, g.L)
    # moving non-adjacent joints 2 and 8 leaves the contribution of edges not touching them unchanged
    moved = z.copy()
    moved[2] += 1.0
    moved[8] -= 2.0
    untouched = [e for e in g.edges if 2 not in e and 8 not in e]
    assert edge_sum(moved, untouched) == edge_sum(z, untouched)
