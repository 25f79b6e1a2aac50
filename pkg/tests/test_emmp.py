import numpy as np
import oracles
import pytest
from helpers import path_graph, random_system, rel_residual, sampled_grad_error

from eghn import autodiff as ad
from eghn.autodiff import Tensor
from eghn.emmp import EmmpLayer, _flat_gram, center_states
from eghn.system import EuclideanAction, SystemGraph, apply_action, random_action

MATRIX_MODES = ("generalized", "gmn-degenerate")
ALL_MODES = ("generalized", "gmn-degenerate", "egnn-relaxed")


def make_layer(mode, rng, c=4, e=2, m=2, recursive=False, hidden=8, adjacency="global"):
    roles = ("position", "velocity", "other")[:m]
    return EmmpLayer(c, hidden, roles, rng, mode=mode, edge_dim=e, recursive=recursive, adjacency=adjacency)


def equivariance_residual(layer, sys, g):
    out = layer(sys)
    moved = layer(apply_action(g, sys))
    expected = apply_action(g, out.numpy())
    return max(rel_residual(moved.Z, expected.Z), rel_residual(moved.h, expected.h))


class TestCenterStates:
    roles = ("position", "velocity")

    def test_single_node(self, rng):
        Z = rng.normal(size=(1, 3, 2))
        Zc, _ = center_states(Z, self.roles)
        assert np.array_equal(Zc.data[0, :, 0], np.zeros(3))
        assert np.array_equal(Zc.data[0, :, 1], Z[0, :, 1])

    def test_symmetric_pair(self, rng):
        x = rng.normal(size=3)
        Z = np.stack([np.stack([x, x], -1), np.stack([-x, x], -1)])
        Zc, Zbar = center_states(Z, self.roles)
        assert np.allclose(Zc.data[..., 0], [x, -x], atol=1e-15)
        assert np.allclose(Zbar.data, 0.0)

    def test_translation_cancels(self, rng):
        Z = rng.normal(size=(6, 3, 2))
        b = rng.normal(size=3) * 5
        Zt = Z.copy()
        Zt[..., 0] += b
        assert np.abs(center_states(Zt, self.roles)[0].data - center_states(Z, self.roles)[0].data).max() < 1e-12


class TestOracle:
    @pytest.mark.parametrize("mode", MATRIX_MODES)
    @pytest.mark.parametrize("recursive", [False, True])
    def test_two_nodes(self, mode, recursive):
        rng = np.random.default_rng(5)
        layer = make_layer(mode, rng, recursive=recursive)
        sys = random_system(rng, N=2)
        sys = sys.replace(A_global=np.array([[0.0, 1.0], [1.0, 0.0]]))
        out = layer(sys)
        Z_ref, h_ref = oracles.emmp(layer, sys.Z, sys.h, sys.A_global, sys.edge_attr)
        assert np.abs(out.Z.data - Z_ref).max() < 1e-12
        assert np.abs(out.h.data - h_ref).max() < 1e-12

    @pytest.mark.parametrize("recursive", [False, True])
    def test_egnn_line_graph(self, recursive):
        rng = np.random.default_rng(6)
        layer = make_layer("egnn-relaxed", rng, recursive=recursive)
        sys = random_system(rng, N=3).replace(A_global=path_graph(3))
        out = layer(sys)
        Z_ref, h_ref = oracles.emmp(layer, sys.Z, sys.h, sys.A_global, sys.edge_attr)
        assert np.abs(out.Z.data - Z_ref).max() < 1e-12
        assert np.abs(out.h.data - h_ref).max() < 1e-12

    @pytest.mark.parametrize("mode", ALL_MODES)
    def test_weighted_adjacency_batched(self, mode):
        rng = np.random.default_rng(7)
        layer = make_layer(mode, rng, recursive=True)
        sys = random_system(rng, N=5, batch=3)
        W = rng.random((3, 5, 5))
        sys = sys.replace(A_global=(W + np.swapaxes(W, 1, 2)) * (1 - np.eye(5)))
        out = layer(sys)
        for b in range(3):
            Z_ref, h_ref = oracles.emmp(layer, sys.Z[b], sys.h[b], sys.A_global[b], sys.edge_attr[b])
            assert np.abs(out.Z.data[b] - Z_ref).max() < 1e-12
            assert np.abs(out.h.data[b] - h_ref).max() < 1e-12


class TestDegenerateInputs:
    @pytest.mark.parametrize("mode", ALL_MODES)
    def test_isolated_node(self, mode, rng):
        layer = make_layer(mode, rng)
        sys = random_system(rng, N=3)
        A = np.zeros((3, 3))
        A[1, 2] = A[2, 1] = 1.0
        out = layer(sys.replace(A_global=A))
        assert np.array_equal(out.Z.data[0], sys.Z[0])
        width = layer.phi_h.widths[0] - sys.h.shape[-1]
        expected = layer.phi_h(Tensor(np.concatenate([sys.h[0], np.zeros(width)]))).data
        assert np.allclose(out.h.data[0], expected, rtol=0, atol=1e-14)

    def test_coincident_nodes_do_not_move(self, rng):
        layer = make_layer("egnn-relaxed", rng)
        Z = np.repeat(rng.normal(size=(1, 3, 2)), 2, axis=0)
        h = np.repeat(rng.normal(size=(1, 4)), 2, axis=0)
        A = np.array([[0.0, 1.0], [1.0, 0.0]])
        out = layer(SystemGraph(Z, h, A, A, np.zeros((2, 2, 2))))
        assert np.array_equal(out.Z.data, Z)

    def test_no_channels(self, rng):
        layer = make_layer("generalized", rng)
        sys = random_system(rng)
        with pytest.raises(ValueError):
            layer(sys.replace(Z=np.zeros((5, 3, 0)), roles=()))

    def test_feature_width_checked(self, rng):
        layer = make_layer("generalized", rng, c=3)
        with pytest.raises(ValueError, match="node features"):
            layer(random_system(rng, c=4))

    def test_unknown_mode(self, rng):
        with pytest.raises(ValueError, match="mode"):
            make_layer("attention", rng)


class TestSymmetry:
    @pytest.mark.parametrize("mode", ALL_MODES)
    @pytest.mark.parametrize("recursive", [False, True])
    def test_equivariance(self, mode, recursive):
        rng = np.random.default_rng(11)
        layer = make_layer(mode, rng, recursive=recursive)
        worst = 0.0
        for trial in range(100):
            sys = random_system(rng, N=5)
            g = random_action(rng, reflect=bool(trial % 2))
            worst = max(worst, equivariance_residual(layer, sys, g))
        assert worst < 1e-8

    @pytest.mark.parametrize("mode", ALL_MODES)
    def test_other_channel(self, mode, rng):
        layer = make_layer(mode, rng, m=3, recursive=True)
        sys = random_system(rng, N=4, m=3)
        for _ in range(10):
            assert equivariance_residual(layer, sys, random_action(rng)) < 1e-8

    @pytest.mark.parametrize("mode", ALL_MODES)
    def test_permutation(self, mode, rng):
        layer = make_layer(mode, rng, recursive=True)
        sys = random_system(rng, N=6)
        perm = rng.permutation(6)
        g = EuclideanAction(np.eye(3), np.zeros(3), perm)
        out = layer(sys)
        moved = layer(apply_action(g, sys))
        # identical terms, different summation order: equal up to rounding
        assert np.abs(moved.Z.data - out.Z.data[perm]).max() < 1e-13
        assert np.abs(moved.h.data - out.h.data[perm]).max() < 1e-13

    def test_plain_mode_is_not_equivariant(self, rng):
        layer = make_layer("plain", rng, recursive=True)
        sys = random_system(rng, N=5)
        g = random_action(rng)
        assert equivariance_residual(layer, sys, g) > 1e-2

    def test_gram_invariance(self, rng):
        Z = rng.normal(size=(4, 3, 2))
        roles = ("position", "velocity")
        b = rng.normal(size=3) * 4
        Zt = Z.copy()
        Zt[..., 0] += b
        R = random_action(rng).R
        Zr = R @ Z
        grams = [_flat_gram(center_states(z, roles)[0], 3).data for z in (Z, Zt, Zr)]
        assert np.abs(grams[1] - grams[0]).max() < 1e-12
        assert np.abs(grams[2] - grams[0]).max() < 1e-10


def tie_generalized_to_gmn(gen, gmn, m):
    """Set the generalized layer's weights so it reads only Z_i - Z_j and emits P H with P = [I; -I]."""
    k = 2 * m
    Q = np.zeros((k * k, m * m))
    for a in range(m):
        for b in range(m):
            col = a * m + b
            Q[a * k + b, col] += 1
            Q[a * k + m + b, col] -= 1
            Q[(m + a) * k + b, col] -= 1
            Q[(m + a) * k + m + b, col] += 1
    W0 = gmn.phi_H.layers[0].weight.data
    gen.phi_H.layers[0].weight.data = np.concatenate([Q @ W0[: m * m], W0[m * m :]])
    gen.phi_H.layers[0].bias.data = gmn.phi_H.layers[0].bias.data.copy()
    for lg, lm in zip(gen.phi_H.layers[1:-1], gmn.phi_H.layers[1:-1]):
        lg.weight.data, lg.bias.data = lm.weight.data.copy(), lm.bias.data.copy()
    last_g, last_m = gen.phi_H.layers[-1], gmn.phi_H.layers[-1]
    last_g.weight.data = np.concatenate([last_m.weight.data, -last_m.weight.data], axis=1)
    last_g.bias.data = np.concatenate([last_m.bias.data, -last_m.bias.data])
    c = gmn.feat_dim
    Wh = gmn.phi_h.layers[0].weight.data
    gen.phi_h.layers[0].weight.data = np.concatenate([Wh[:c], 0.5 * Wh[c:], -0.5 * Wh[c:]])
    gen.phi_h.layers[0].bias.data = gmn.phi_h.layers[0].bias.data.copy()
    for lg, lm in zip(gen.phi_h.layers[1:], gmn.phi_h.layers[1:]):
        lg.weight.data, lg.bias.data = lm.weight.data.copy(), lm.bias.data.copy()
    for lg, lm in zip(gen.phi_v.layers, gmn.phi_v.layers):
        lg.weight.data, lg.bias.data = lm.weight.data.copy(), lm.bias.data.copy()


class TestModeConsistency:
    def test_tied_generalized_equals_gmn(self, rng):
        gen = make_layer("generalized", rng, recursive=True)
        gmn = make_layer("gmn-degenerate", rng, recursive=True)
        tie_generalized_to_gmn(gen, gmn, 2)
        for _ in range(5):
            sys = random_system(rng, N=5)
            a, b = gen(sys), gmn(sys)
            assert np.abs(a.Z.data - b.Z.data).max() < 1e-12
            assert np.abs(a.h.data - b.h.data).max() < 1e-12


class TestGradientFlow:
    @pytest.mark.parametrize("mode", ALL_MODES)
    def test_four_layers(self, mode):
        rng = np.random.default_rng(21)
        layers = [make_layer(mode, rng, recursive=True, hidden=4) for _ in range(4)]
        sys = random_system(rng, N=4)
        Z0 = Tensor(sys.Z.copy(), requires_grad=True)
        wZ = rng.normal(size=sys.Z.shape)
        wh = rng.normal(size=sys.h.shape)

        def loss():
            s = sys.replace(Z=Z0)
            for layer in layers:
                s = layer(s)
            return (s.Z * wZ).sum() + (s.h * wh).sum()

        params = [Z0] + [p for layer in layers for p in layer.parameters()]
        ad.backward(loss())
        assert sampled_grad_error(loss, params, rng) < 1e-4
