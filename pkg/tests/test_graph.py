import numpy as np
import pytest

from unist import tensor as T
from unist.errors import DataError, ShapeError
from unist.graph import (
    CandidateRelations,
    TrafficGraph,
    compose_relations,
    gcn_propagate,
    row_normalize,
    select_relation,
)
from unist.tensor import Tensor, backward

from helpers import assert_close_to_fd, central_difference


def path_graph():
    # 0 -> 1 -> 2
    return TrafficGraph(3, [(0, 1, 1.0), (1, 2, 1.0)], np.ones((3, 2)))


def random_graph(rng, n=10, p=0.25):
    edges = []
    for i in range(n):
        for j in range(n):
            if i != j and rng.random() < p:
                edges.append((i, j, float(rng.uniform(0.2, 2.0))))
    if not edges:
        edges = [(0, 1, 1.0)]
    return TrafficGraph(n, edges, rng.uniform(1, 4, (n, 2)))


class TestTrafficGraph:
    def test_adjacency_matches_edges(self):
        g = path_graph()
        assert g.adjacency[0, 1] == 1.0
        assert g.adjacency[1, 0] == 0.0
        assert g.adjacency.diagonal().sum() == 0.0

    def test_bad_feature_rows_rejected(self):
        with pytest.raises(DataError):
            TrafficGraph(3, [(0, 1, 1.0)], np.ones((2, 2)))

    def test_nonpositive_weight_rejected(self):
        with pytest.raises(DataError):
            TrafficGraph(2, [(0, 1, 0.0)], np.ones((2, 1)))

    def test_removing_edges_only_zeroes_entries(self):
        rng = np.random.default_rng(2)
        g = random_graph(rng)
        removed = g.without_edges(g.edges[:3][:2] and [(s, d) for s, d, _ in g.edges[:3]])
        fwd_before = g.candidates().matrices[0]
        fwd_after = removed.candidates().matrices[0]
        created = (fwd_after > 0) & (fwd_before == 0)
        assert not created.any()
        rev_created = (removed.candidates().matrices[1] > 0) & (g.candidates().matrices[1] == 0)
        assert not rev_created.any()


class TestRowNormalize:
    def test_already_stochastic(self):
        m = np.array([[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_array_equal(row_normalize(m), m)

    def test_zero_row_convention(self):
        out = row_normalize(np.array([[2.0, 2.0], [0.0, 0.0]]))
        np.testing.assert_array_equal(out, [[0.5, 0.5], [0.0, 0.0]])
        assert not np.isnan(out).any()

    def test_identity_fixed_point(self):
        np.testing.assert_array_equal(row_normalize(np.eye(4)), np.eye(4))

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            row_normalize(np.array([[1.0, -0.5]]))


class TestSelectRelation:
    def test_saturating_logits_pick_one_candidate(self):
        g = path_graph()
        cands = g.candidates()
        out = select_relation(cands, Tensor([50.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, cands.matrices[0], atol=1e-12)

    def test_equal_logits_over_identical_matrices(self):
        g = path_graph()
        m = g.candidates().matrices[0]
        cands = CandidateRelations([m, m, np.eye(3)])
        out = select_relation(cands, Tensor([3.0, 3.0, -50.0]))
        np.testing.assert_allclose(out.data, m, atol=1e-12)

    def test_hand_mixture(self):
        g = path_graph()
        a_fwd = g.candidates().matrices[0]
        cands = CandidateRelations([np.eye(3), a_fwd])
        out = select_relation(cands, Tensor([0.0, np.log(3.0)]))
        np.testing.assert_allclose(out.data, 0.25 * np.eye(3) + 0.75 * a_fwd, atol=1e-12)

    def test_differentiable_wrt_logits(self):
        g = path_graph()
        cands = g.candidates()
        logits = Tensor([0.1, -0.2, 0.3], requires_grad=True)
        w = np.random.default_rng(0).uniform(-1, 1, (3, 3))
        backward(T.reduce_sum(T.mul(select_relation(cands, logits), Tensor(w))))

        def f():
            z = logits.data - logits.data.max()
            e = np.exp(z)
            s = e / e.sum()
            mix = sum(si * mi for si, mi in zip(s, cands.matrices))
            return float((mix * w).sum())

        (fd,) = central_difference(f, [logits.data])
        assert_close_to_fd(logits.grad, fd)


def make_logits(c, layers, values=0.0):
    return [
        [[Tensor(np.full(3, values), requires_grad=True) for _ in range(2)] for _ in range(layers)]
        for _ in range(c)
    ]


class TestComposeRelations:
    def test_identity_logits_give_identity(self):
        g = path_graph()
        logits = make_logits(2, 2)
        # favor the identity (last candidate) everywhere
        for per_channel in logits:
            for layer in per_channel:
                for vec in layer:
                    vec.data[...] = [-50.0, -50.0, 50.0]
        for a in compose_relations(g.candidates(), logits):
            np.testing.assert_allclose(a.data, np.eye(3), atol=1e-12)

    def test_two_hop_on_path(self):
        g = path_graph()
        a_fwd = g.candidates().matrices[0]
        cands = CandidateRelations([a_fwd, np.eye(3)])
        logits = [[[Tensor([50.0, -50.0]), Tensor([50.0, -50.0])]]]
        (out,) = compose_relations(cands, logits)
        expected = row_normalize(a_fwd @ a_fwd)  # two-hop reachability, renormalized
        np.testing.assert_allclose(out.data, expected, atol=1e-10)

    def test_row_sums_zero_or_one_over_random_draws(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            g = random_graph(rng)
            logits = [
                [
                    [Tensor(rng.uniform(-2, 2, 3)) for _ in range(2)]
                    for _ in range(2)
                ]
                for _ in range(2)
            ]
            for a in compose_relations(g.candidates(), logits):
                sums = a.data.sum(axis=1)
                assert (a.data >= -1e-15).all()
                near_zero = np.abs(sums) <= 1e-10
                near_one = np.abs(sums - 1.0) <= 1e-10
                assert (near_zero | near_one).all()

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        g = random_graph(rng)
        draw = [rng.uniform(-2, 2, 3) for _ in range(4)]
        logits = [[[Tensor(draw[0]), Tensor(draw[1])], [Tensor(draw[2]), Tensor(draw[3])]]]
        (a,) = compose_relations(g.candidates(), logits)
        for _ in range(10):
            perm = rng.permutation(g.num_nodes)
            pg = g.permuted(perm)
            logits_p = [[[Tensor(draw[0]), Tensor(draw[1])], [Tensor(draw[2]), Tensor(draw[3])]]]
            (ap,) = compose_relations(pg.candidates(), logits_p)
            p = np.zeros((g.num_nodes, g.num_nodes))
            p[perm, np.arange(g.num_nodes)] = 1.0  # p @ x permutes rows i -> perm[i]
            np.testing.assert_allclose(ap.data, p @ a.data @ p.T, atol=1e-10)

    def test_identity_candidate_set_reduces_to_plain_gcn(self):
        g = path_graph()
        cands = CandidateRelations([np.eye(3)])
        logits = [[[Tensor([0.0]), Tensor([0.0])]]]
        (a,) = compose_relations(cands, logits)
        np.testing.assert_allclose(a.data, np.eye(3), atol=1e-12)
        w = Tensor(np.eye(2))
        feats = Tensor(np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]))
        out = gcn_propagate(a, feats, w)
        np.testing.assert_allclose(out.data, feats.data)


class TestGcnPropagate:
    def test_zero_adjacency_identity_weight_passthrough(self):
        feats = Tensor(np.array([[1.0, 0.5], [2.0, 3.0]]))
        out = gcn_propagate(Tensor(np.zeros((2, 2))), feats, Tensor(np.eye(2)))
        np.testing.assert_allclose(out.data, feats.data)

    def test_negative_weight_clamps_to_zero(self):
        feats = Tensor(np.array([[1.0, 0.5], [2.0, 3.0]]))
        out = gcn_propagate(Tensor(np.zeros((2, 2))), feats, Tensor(-np.eye(2)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 2)))

    def test_hand_two_node_example(self):
        a = Tensor(np.array([[0.0, 1.0], [0.0, 0.0]]))
        feats = Tensor(np.eye(2))
        out = gcn_propagate(a, feats, Tensor(np.eye(2)))
        np.testing.assert_allclose(out.data, [[0.5, 0.5], [0.0, 1.0]])

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            gcn_propagate(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))), Tensor(np.eye(2)))
