import itertools

import networkx as nx
import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from acgm import dagmath as dm

CHAIN3 = np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]])

# A=0, B=1, C=2, D=3, E=4
FIG2 = np.zeros((5, 5), dtype=int)
for src, dst in [(0, 1), (0, 2), (1, 3), (2, 3), (3, 4), (0, 4), (2, 4)]:
    FIG2[src, dst] = 1


def all_binary_3x3():
    # all 2^9 patterns; a diagonal entry is a self-loop, i.e. a cycle
    for bits in itertools.product([0, 1], repeat=9):
        yield np.array(bits).reshape(3, 3)


def central_diff(f, W, h=1e-5):
    G = np.zeros_like(W)
    for idx in np.ndindex(*W.shape):
        Wp, Wm = W.copy(), W.copy()
        Wp[idx] += h
        Wm[idx] -= h
        G[idx] = (f(Wp) - f(Wm)) / (2 * h)
    return G


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)))


def walks_of_length(A, k):
    d = A.shape[0]
    count = 0
    for path in itertools.product(range(d), repeat=k + 1):
        if all(A[path[m], path[m + 1]] for m in range(k)):
            count += 1
    return count


class TestMatexpTrace:
    def test_zero(self):
        assert dm.matexp_trace(np.zeros((3, 3))) == 3.0

    def test_swap_matches_reference(self):
        B = np.array([[0.0, 1.0], [1.0, 0.0]])
        ref = np.trace(scipy.linalg.expm(B))
        assert dm.matexp_trace(B) == pytest.approx(ref, rel=1e-12)
        assert dm.matexp_trace(B) == pytest.approx(3.0861613, abs=1e-7)

    def test_nilpotent_exact(self):
        assert dm.matexp_trace(np.array([[0.0, 1.0], [0.0, 0.0]])) == 2.0

    @pytest.mark.parametrize("d", [3, 5, 8])
    def test_random_against_expm(self, d):
        rng = np.random.default_rng(d)
        B = rng.random((d, d))
        assert dm.matexp_trace(B) == pytest.approx(np.trace(scipy.linalg.expm(B)), rel=1e-10)

    def test_stack(self):
        rng = np.random.default_rng(0)
        Bs = rng.random((4, 3, 3))
        out = dm.matexp_trace(Bs)
        assert out.shape == (4,)
        for b, o in zip(Bs, out):
            assert o == pytest.approx(dm.matexp_trace(b), rel=1e-12)

    def test_non_square(self):
        with pytest.raises(ValueError):
            dm.matexp_trace(np.zeros((2, 3)))


class TestAcyclicity:
    def test_zero(self):
        assert dm.acyclicity_value(np.zeros((4, 4))) == 0.0

    def test_two_cycle(self):
        A = np.array([[0, 1], [1, 0]])
        assert dm.acyclicity_value(A) == pytest.approx(2 * np.cosh(1) - 2, rel=1e-12)
        assert dm.acyclicity_value(A) == pytest.approx(1.0861613, abs=1e-7)

    def test_chain_is_zero(self):
        assert dm.acyclicity_value(CHAIN3) == 0.0

    def test_exhaustive_3x3_characterization(self):
        n = 0
        for A in all_binary_3x3():
            g = dm.acyclicity_value(A)
            assert g >= 0
            assert (g < 1e-9) == nx.is_directed_acyclic_graph(nx.DiGraph(A))
            assert (g < 1e-9) == dm.is_acyclic(A)
            n += 1
        assert n == 512

    def test_random_binary_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            d = rng.integers(2, 9)
            A = (rng.random((d, d)) < 0.3).astype(int)
            np.fill_diagonal(A, 0)
            assert dm.acyclicity_value(A) >= 0

    def test_grad_zero(self):
        np.testing.assert_array_equal(dm.acyclicity_grad(np.zeros((3, 3))), np.zeros((3, 3)))

    def test_grad_symmetric_pair(self):
        W = np.array([[0.0, 0.5], [0.5, 0.0]])
        G = dm.acyclicity_grad(W)
        fd = central_diff(dm.acyclicity_value, W)
        assert rel_err(G, fd) < 1e-4
        # 2 * 0.5 * sinh(0.25)
        assert G[0, 1] == pytest.approx(0.2526123168, rel=1e-9)
        assert G[1, 0] == pytest.approx(0.2526123168, rel=1e-9)

    @pytest.mark.parametrize("d", [3, 5, 8])
    def test_grad_finite_differences(self, d):
        rng = np.random.default_rng(10 + d)
        for _ in range(10):
            W = rng.random((d, d))
            np.fill_diagonal(W, 0)
            assert rel_err(dm.acyclicity_grad(W), central_diff(dm.acyclicity_value, W)) < 1e-4


class TestDepth:
    def test_chain(self):
        assert dm.depth_value(CHAIN3, 2) == 1.0
        assert dm.depth_value(CHAIN3, 3) == 0.0

    def test_zero(self):
        for k in (1, 2, 5):
            assert dm.depth_value(np.zeros((4, 4)), k) == 0.0

    def test_k_zero_rejected(self):
        with pytest.raises(ValueError):
            dm.depth_value(CHAIN3, 0)

    def test_walk_enumeration(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            d = int(rng.integers(2, 6))
            A = (rng.random((d, d)) < 0.4).astype(int)
            np.fill_diagonal(A, 0)
            for k in range(1, 5):
                assert dm.depth_value(A, k) == walks_of_length(A, k)

    def test_grad_k1(self):
        rng = np.random.default_rng(3)
        np.testing.assert_array_equal(dm.depth_grad(rng.random((4, 4)), 1), np.ones((4, 4)))

    def test_grad_chain_k2(self):
        G = dm.depth_grad(np.array([[0.0, 1.0], [0.0, 0.0]]), 2)
        assert G[0, 1] == 0.0
        assert G[1, 0] == 2.0

    @pytest.mark.parametrize("d,k", [(3, 2), (5, 3), (5, 4), (8, 3)])
    def test_grad_finite_differences(self, d, k):
        rng = np.random.default_rng(100 * d + k)
        for _ in range(10):
            W = rng.random((d, d))
            np.fill_diagonal(W, 0)
            fd = central_diff(lambda M: dm.depth_value(M, k), W)
            assert rel_err(dm.depth_grad(W, k), fd) < 1e-4

    def test_grad_singular(self):
        W = np.array([[0.0, 1.0, 1.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
        assert np.linalg.matrix_rank(W) < 3
        fd = central_diff(lambda M: dm.depth_value(M, 3), W)
        assert rel_err(dm.depth_grad(W, 3), fd) < 1e-6

    def test_stack_matches_single(self):
        rng = np.random.default_rng(4)
        Ws = rng.random((5, 4, 4))
        np.testing.assert_allclose(dm.depth_value(Ws, 3), [dm.depth_value(w, 3) for w in Ws])
        np.testing.assert_allclose(dm.depth_grad(Ws, 3), [dm.depth_grad(w, 3) for w in Ws])


class TestDiscrete:
    def test_is_acyclic(self):
        assert dm.is_acyclic(np.zeros((3, 3)))
        assert not dm.is_acyclic(np.array([[0, 1], [1, 0]]))
        assert dm.is_acyclic(dm.G528)

    def test_find_cycle(self):
        assert dm.find_cycle(np.array([[0, 1], [1, 0]])) == [0, 1, 0]
        cyc = dm.find_cycle(np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]]))
        assert cyc[0] == cyc[-1] and len(cyc) == 4

    def test_topological_order(self):
        assert dm.topological_order(np.array([[0, 1], [0, 0]])) == [0, 1]
        assert dm.topological_order(np.zeros((3, 3), dtype=int)) == [0, 1, 2]
        pos = {v: p for p, v in enumerate(dm.topological_order(FIG2))}
        assert pos[0] < pos[1] and pos[0] < pos[2]
        assert pos[1] < pos[3] and pos[2] < pos[3]
        assert pos[3] < pos[4]

    def test_topological_order_cyclic(self):
        with pytest.raises(dm.CyclicGraphError):
            dm.topological_order(np.array([[0, 1], [1, 0]]))

    def test_nilpotent_index(self):
        assert dm.nilpotent_index(CHAIN3) == 3
        assert dm.nilpotent_index(np.zeros((3, 3), dtype=int)) == 1
        assert dm.nilpotent_index(np.array([[0, 1], [1, 0]])) is None

    def test_longest_path(self):
        assert dm.longest_path_edges(np.zeros((3, 3), dtype=int)) == 0
        assert dm.longest_path_edges(CHAIN3) == 2
        with pytest.raises(dm.CyclicGraphError):
            dm.longest_path_edges(np.array([[0, 1], [1, 0]]))

    def test_nilpotent_vs_longest_path(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            d = int(rng.integers(1, 8))
            A = dm.random_dag(d, rng, p=rng.random())
            assert dm.nilpotent_index(A) == dm.longest_path_edges(A) + 1

    def test_parents(self):
        assert dm.parents_of(FIG2, 3) == {1, 2}
        assert dm.parents_of(np.zeros((3, 3), dtype=int), 1) == set()
        assert dm.parents_of(CHAIN3, 2) == {1}
        with pytest.raises(ValueError):
            dm.parents_of(CHAIN3, 3)

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            dm.is_acyclic(np.array([[0, 2], [0, 0]]))


class TestG528:
    def test_load(self):
        A = dm.load_g528()
        assert dm.edge_count(A) == 28
        assert dm.is_acyclic(A)
        assert dm.depth_value(A, 5) == 0

    def test_measured_depth(self):
        # matrix powers and longest-path DP agree: index 4, not 5
        A = dm.load_g528()
        assert dm.depth_value(A, 3) > 0
        assert dm.depth_value(A, 4) == 0
        assert dm.longest_path_edges(A) == 3
        assert dm.nilpotent_index(A) == 4


@st.composite
def dags(draw):
    d = draw(st.integers(1, 9))
    seed = draw(st.integers(0, 2**32 - 1))
    p = draw(st.floats(0.0, 1.0))
    return dm.random_dag(d, np.random.default_rng(seed), p)


@settings(max_examples=300, deadline=None)
@given(dags())
def test_topological_order_respects_edges(A):
    order = dm.topological_order(A)
    assert dm.is_topological(A, order)
    assert dm.is_acyclic(A)


def test_topological_order_10k_random():
    rng = np.random.default_rng(6)
    for _ in range(10_000):
        A = dm.random_dag(int(rng.integers(1, 9)), rng, p=rng.random())
        assert dm.is_topological(A, dm.topological_order(A))
