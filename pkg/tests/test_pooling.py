import numpy as np
import oracles
import pytest
from helpers import path_graph, random_system, rel_residual

from eghn import autodiff as ad
from eghn.autodiff import Tensor
from eghn.pooling import (
    DegenerateClusterError,
    EPoolLayer,
    EUpPoolLayer,
    broadcast_clusters,
    hard_assignment,
    pool_states,
)
from eghn.system import EuclideanAction, SystemGraph, apply_action, random_action

ROLES = ("position", "velocity")


def make_pool(rng, K=2, c=4, e=2, recursive=True, **kw):
    return EPoolLayer(c, 8, K, ROLES, rng, edge_dim=e, recursive=recursive, **kw)


def make_up(rng, c=4):
    return EUpPoolLayer(c, 8, ROLES, rng)


def fixed_scores(layer, logits):
    """Swap the score MLP for fixed logits (saturated when the gaps are huge)."""
    layer.score = lambda h: ad.softmax(Tensor(logits), axis=-1)


class TestEPool:
    def test_single_cluster_is_the_mean(self, rng):
        layer = make_pool(rng, K=1)
        sys = random_system(rng, N=5)
        high, S = layer(sys)
        assert np.array_equal(S.data, np.ones((5, 1)))
        updated = layer.emmp(sys)
        assert np.allclose(high.Z.data[0], updated.Z.data.mean(axis=0), rtol=0, atol=1e-14)

    def test_translation(self, rng):
        layer = make_pool(rng, K=3)
        for _ in range(20):
            sys = random_system(rng, N=6)
            b = random_action(rng).b
            high, _ = layer(sys)
            moved, _ = layer(apply_action(EuclideanAction(np.eye(3), b), sys))
            expected = high.Z.data.copy()
            expected[..., 0] += b
            assert np.abs(moved.Z.data - expected).max() < 1e-10

    def test_hard_path_clusters(self, rng):
        layer = make_pool(rng, K=2)
        fixed_scores(layer, np.array([[1e6, 0], [1e6, 0], [0, 1e6], [0, 1e6]]))
        sys = random_system(rng, N=4).replace(A_local=path_graph(4))
        high, S = layer(sys)
        assert np.array_equal(high.A_local.data, [[2.0, 1.0], [1.0, 2.0]])
        members = layer.emmp(sys).Z.data
        assert np.allclose(high.Z.data[0], members[:2].mean(axis=0), rtol=0, atol=1e-14)
        assert np.allclose(high.Z.data[1], members[2:].mean(axis=0), rtol=0, atol=1e-14)

    def test_rows_sum_to_one(self, rng):
        layer = make_pool(rng, K=4)
        _, S = layer(random_system(rng, N=7, batch=3))
        assert np.abs(S.data.sum(axis=-1) - 1).max() < 1e-12
        assert (S.data > 0).all() and (S.data < 1).all()

    def test_degenerate_cluster(self):
        S = np.array([[1.0, 0.0], [1.0, 0.0]])
        with pytest.raises(DegenerateClusterError, match="degenerate cluster"):
            pool_states(S, np.zeros((2, 3, 2)))

    def test_too_many_clusters(self, rng):
        with pytest.raises(ValueError, match="clusters"):
            make_pool(rng, K=6)(random_system(rng, N=5))

    def test_pool_features_switch(self, rng):
        layer = make_pool(rng, K=2, pool_features="updated")
        sys = random_system(rng, N=5)
        high, S = layer(sys)
        h_up = layer.emmp(sys).h.data
        expected = (S.data.T @ h_up) / S.data.sum(axis=0)[:, None]
        assert np.allclose(high.h.data, expected, rtol=0, atol=1e-13)

    def test_oracle(self):
        rng = np.random.default_rng(31)
        layer = make_pool(rng, K=2)
        sys = random_system(rng, N=4)
        sys = sys.replace(A_global=rng.random((4, 4)) * (1 - np.eye(4)))
        high, S = layer(sys)
        Zh, hh, Al, Ag, S_ref = oracles.epool(layer, sys.Z, sys.h, sys.A_local, sys.A_global, sys.edge_attr)
        for got, ref in ((high.Z, Zh), (high.h, hh), (high.A_local, Al), (high.A_global, Ag), (S, S_ref)):
            assert np.abs(got.data - ref).max() < 1e-12

    def test_permutation(self, rng):
        layer = make_pool(rng, K=3)
        sys = random_system(rng, N=6)
        perm = rng.permutation(6)
        high, S = layer(sys)
        high_p, S_p = layer(apply_action(EuclideanAction(np.eye(3), np.zeros(3), perm), sys))
        assert np.abs(S_p.data - S.data[perm]).max() < 1e-13
        assert np.abs(high_p.Z.data - high.Z.data).max() < 1e-12


class TestEUpPool:
    def test_single_cluster_broadcast(self, rng):
        S = np.ones((4, 1))
        Z_high = rng.normal(size=(1, 3, 2))
        Z_agg, _ = broadcast_clusters(S, Z_high, rng.normal(size=(1, 4)))
        assert np.array_equal(Z_agg.data, np.repeat(Z_high, 4, axis=0))

    def test_broadcast_translation(self, rng):
        S = rng.dirichlet(np.ones(3), size=5)
        Z_high = rng.normal(size=(3, 3, 2))
        b = rng.normal(size=3) * 5
        moved = Z_high.copy()
        moved[..., 0] += b
        a0, _ = broadcast_clusters(S, Z_high, np.zeros((3, 1)))
        a1, _ = broadcast_clusters(S, moved, np.zeros((3, 1)))
        assert np.abs(a1.data[..., 0] - a0.data[..., 0] - b).max() < 1e-12

    def test_rows_must_sum_to_one(self, rng):
        up = make_up(rng)
        low = random_system(rng, N=3)
        high = random_system(rng, N=2)
        with pytest.raises(ValueError, match="sum to 1"):
            up(high, np.full((3, 2), 0.6), low)

    def test_oracle(self):
        rng = np.random.default_rng(41)
        up = make_up(rng)
        low = random_system(rng, N=3)
        high = random_system(rng, N=2)
        S = rng.dirichlet(np.ones(2), size=3)
        out = up(high, S, low)
        Z_ref, h_ref = oracles.euppool(up, high.Z, high.h, S, low.Z, low.h)
        assert np.abs(out.Z.data - Z_ref).max() < 1e-12
        assert np.abs(out.h.data - h_ref).max() < 1e-12

    def test_keeps_node_count(self, rng):
        up = make_up(rng)
        low = random_system(rng, N=7)
        out = up(random_system(rng, N=3), rng.dirichlet(np.ones(3), size=7), low)
        assert out.Z.shape == low.Z.shape


class TestPipeline:
    def test_equivariance(self):
        rng = np.random.default_rng(51)
        pool = make_pool(rng, K=3)
        up = make_up(rng)

        def run(sys):
            high, S = pool(sys)
            return up(high, S, sys), high

        worst = 0.0
        for trial in range(100):
            sys = random_system(rng, N=6)
            g = random_action(rng, reflect=bool(trial % 2))
            out, high = run(sys)
            out_g, high_g = run(apply_action(g, sys))
            worst = max(
                worst,
                rel_residual(out_g.Z, apply_action(g, out.numpy()).Z),
                rel_residual(out_g.h, out.h),
                rel_residual(high_g.Z, apply_action(EuclideanAction(g.R, g.b), high.numpy()).Z),
            )
        assert worst < 1e-8

    def test_gradients_reach_inputs_and_scores(self, rng):
        pool = make_pool(rng, K=2)
        up = make_up(rng)
        sys = random_system(rng, N=5)
        Z0 = Tensor(sys.Z.copy(), requires_grad=True)
        s = sys.replace(Z=Z0)
        high, S = pool(s)
        out = up(high, S, s)
        ad.backward((out.Z * rng.normal(size=out.Z.shape)).sum())
        assert np.abs(Z0.grad).max() > 0
        assert all(np.abs(p.grad).max() > 0 for p in pool.score.parameters())


def test_hard_assignment_ties_to_lowest():
    S = np.array([[0.5, 0.5], [0.2, 0.8], [1 / 3, 1 / 3 + 1e-9]])
    assert hard_assignment(S).tolist() == [0, 1, 1]
    assert hard_assignment(np.full((4, 3), 1 / 3)).tolist() == [0, 0, 0, 0]


def test_system_graph_rejects_role_mismatch(rng):
    with pytest.raises(ValueError, match="roles"):
        SystemGraph(np.zeros((2, 3, 2)), np.zeros((2, 1)), np.zeros((2, 2)), np.zeros((2, 2)), None, ("position",))
