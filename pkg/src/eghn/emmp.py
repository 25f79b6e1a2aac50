"""Equivariant matrix message passing.

Four update rules share one layer class:

``generalized``
    ``H_ij = phi_H(Zhat_ij^T Zhat_ij / n, h_i, h_j, e_ij)`` with
    ``Zhat_ij = [Z_i - Zbar, Z_j - Zbar]``; ``Z'_i = Z_i + sum_j a_ij Zhat_ij H_ij``
    and ``h'_i = phi_h(h_i, sum_j a_ij H_ij)``.
``gmn-degenerate``
    the same with ``Zhat_ij = Z_i - Z_j``.
``egnn-relaxed``
    radial messages only: ``m_ij = phi_e(h_i, h_j, |x_i - x_j|^2, e_ij)`` and
    ``x'_i = x_i + C sum_j a_ij (x_i - x_j) phi_x(m_ij)`` with ``C = 1/max(deg_i, 1)``.
``plain``
    a non-equivariant message-passing layer on raw coordinates, kept as an
    ablation control.

With ``recursive=True`` and both a position and a velocity channel, the
velocity is updated first, ``v' = phi_v(h'_i) v + dv``, and the position then
integrates it over a unit step, ``x' = x + v'``.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MLP, Linear, Module
from .system import ChannelRole, SystemGraph, parse_roles, position_mask, role_index

MODES = ("generalized", "gmn-degenerate", "egnn-relaxed", "plain")


def center_states(Z, roles) -> tuple[Tensor, Tensor]:
    """Subtract the node mean from Position columns.

    Returns ``(Z - Zbar, Zbar)`` where ``Zbar`` has shape ``(..., 1, n, m)``
    and is zero outside Position columns.
    """
    Z = ad.as_tensor(Z)
    if Z.shape[-3] < 1:
        raise ValueError("center_states needs at least one node")
    Zbar = Z.mean(axis=-3, keepdims=True) * position_mask(roles)
    return Z - Zbar, Zbar


def pair_linear(linear: Linear, blocks) -> Tensor:
    """First layer of an edge MLP applied to a concatenation of pair inputs.

    ``blocks`` is a sequence of ``(tensor, kind)``: ``"edge"`` tensors have
    shape ``(..., N, N, d)``, ``"src"``/``"dst"`` tensors are node arrays
    ``(..., N, d)`` read at ``i`` or ``j``.  Node blocks are multiplied before
    broadcasting, which is exact and avoids N-fold redundant work.
    """
    W = linear.weight
    off = 0
    out = None
    for t, kind in blocks:
        if t is None:
            continue
        t = ad.as_tensor(t)
        d = t.shape[-1]
        if d == 0:
            continue
        lead = t.shape[:-1]
        y = (t.reshape(-1, d) @ W[off : off + d]).reshape(lead + (linear.fan_out,))
        off += d
        if kind == "src":
            y = y.reshape(lead[:-1] + (lead[-1], 1, linear.fan_out))
        elif kind == "dst":
            y = y.reshape(lead[:-1] + (1, lead[-1], linear.fan_out))
        elif kind != "edge":
            raise ValueError(f"unknown block kind {kind!r}")
        out = y if out is None else out + y
    if off != linear.fan_in:
        raise ValueError(f"pair inputs supply {off} features but the layer expects {linear.fan_in}")
    return out + linear.bias if linear.bias is not None else out


def _expand_pairs(Zc: Tensor) -> tuple[Tensor, Tensor]:
    """Broadcast node states ``(..., N, n, m)`` to ``(..., N, N, n, m)`` at ``i`` and at ``j``."""
    lead = Zc.shape[:-3]
    N, n, m = Zc.shape[-3:]
    full = lead + (N, N, n, m)
    Zi = ad.broadcast_to(Zc.reshape(lead + (N, 1, n, m)), full)
    Zj = ad.broadcast_to(Zc.reshape(lead + (1, N, n, m)), full)
    return Zi, Zj


def _flat_gram(Y: Tensor, n: int) -> Tensor:
    k = Y.shape[-1]
    G = (Y.mT @ Y) * (1.0 / n)
    return G.reshape(G.shape[:-2] + (k * k,))


class EmmpLayer(Module):
    """One message-passing layer over a chosen adjacency.

    ``adjacency`` selects ``"global"`` or ``"local"`` from the input system
    unless overridden per call.
    """

    def __init__(
        self,
        feat_dim: int,
        hidden: int,
        roles,
        rng: np.random.Generator,
        mode: str = "generalized",
        edge_dim: int = 0,
        out_feat_dim: int | None = None,
        recursive: bool = False,
        adjacency: str = "global",
        n: int = 3,
        activation: str = "silu",
    ):
        if mode not in MODES:
            raise ValueError(f"unknown EMMP mode {mode!r}; expected one of {MODES}")
        self.roles = parse_roles(roles)
        self.mode = mode
        self.n = n
        self.feat_dim = feat_dim
        self.edge_dim = edge_dim
        self.out_feat_dim = out_feat_dim or feat_dim
        self.adjacency = adjacency
        self.pos = role_index(self.roles, ChannelRole.POSITION)
        self.vel = role_index(self.roles, ChannelRole.VELOCITY)
        self.recursive = bool(recursive) and self.pos is not None and self.vel is not None
        m = len(self.roles)
        c, e, co = feat_dim, edge_dim, self.out_feat_dim
        if mode == "egnn-relaxed" and self.pos is None:
            raise ValueError("egnn-relaxed mode needs a Position channel")
        if mode == "generalized":
            k = 2 * m
            self.phi_H = MLP([k * k + 2 * c + e, hidden, hidden, k * m], rng, activation)
            self.phi_h = MLP([c + k * m, hidden, co], rng, activation)
        elif mode == "gmn-degenerate":
            self.phi_H = MLP([m * m + 2 * c + e, hidden, hidden, m * m], rng, activation)
            self.phi_h = MLP([c + m * m, hidden, co], rng, activation)
        elif mode == "egnn-relaxed":
            self.phi_e = MLP([2 * c + 1 + e, hidden, hidden], rng, activation, output_activation=activation)
            self.phi_x = MLP([hidden, hidden, 1], rng, activation, last_scale=1e-2)
            self.phi_h = MLP([c + hidden, hidden, co], rng, activation)
        else:
            self.phi_e = MLP([2 * c + 2 * n * m + e, hidden, hidden], rng, activation, output_activation=activation)
            self.phi_z = MLP([c + hidden, hidden, n * m], rng, activation, last_scale=1e-2)
            self.phi_h = MLP([c + hidden, hidden, co], rng, activation)
        if self.recursive:
            self.phi_v = MLP([co, hidden, 1], rng, activation)

    # ------------------------------------------------------------------
    def __call__(self, sys: SystemGraph, which: str | None = None) -> SystemGraph:
        return emmp_forward(self, sys, which)

    def _edge_attr(self, sys: SystemGraph):
        if self.edge_dim == 0:
            return None
        if sys.edge_attr is None:
            raise ValueError(f"layer expects {self.edge_dim} edge attributes but the system has none")
        E = ad.as_tensor(sys.edge_attr)
        if E.shape[-1] != self.edge_dim:
            raise ValueError(f"layer expects {self.edge_dim} edge attributes, got {E.shape[-1]}")
        return E

    def _matrix_messages(self, Z: Tensor, h: Tensor, A: Tensor, E) -> tuple[Tensor, Tensor]:
        """Return ``(sum_j a_ij M_ij, sum_j a_ij vec(H_ij))`` for the matrix modes."""
        n = Z.shape[-2]
        m = Z.shape[-1]
        if self.mode == "generalized":
            Zc, _ = center_states(Z, self.roles)
            Zi, Zj = _expand_pairs(Zc)
            Zhat = ad.concat([Zi, Zj], axis=-1)
            rows = 2 * m
        else:
            Zi, Zj = _expand_pairs(Z)
            Zhat = Zi - Zj
            rows = m
        gram = _flat_gram(Zhat, n)
        pre = pair_linear(self.phi_H.layers[0], [(gram, "edge"), (h, "src"), (h, "dst"), (E, "edge")])
        Hflat = self.phi_H.tail(pre)
        H = Hflat.reshape(Hflat.shape[:-1] + (rows, m))
        M = Zhat @ H
        a = A.reshape(A.shape + (1, 1))
        sum_M = (M * a).sum(axis=-3)
        sum_H = (Hflat * A.reshape(A.shape + (1,))).sum(axis=-2)
        return sum_M, sum_H

    def _assemble(self, Z: Tensor, h_new: Tensor, delta: Tensor) -> Tensor:
        """Residual update of every column, or velocity-then-position when recursive."""
        if not self.recursive:
            return Z + delta
        p, q = self.pos, self.vel
        v = Z[..., q : q + 1]
        scale = self.phi_v(h_new)
        scale = scale.reshape(scale.shape[:-1] + (1, 1))
        v_new = scale * v + delta[..., q : q + 1]
        x_new = Z[..., p : p + 1] + v_new
        cols = []
        for k in range(Z.shape[-1]):
            if k == p:
                cols.append(x_new)
            elif k == q:
                cols.append(v_new)
            else:
                cols.append(Z[..., k : k + 1] + delta[..., k : k + 1])
        return ad.concat(cols, axis=-1)


def emmp_forward(layer: EmmpLayer, sys: SystemGraph, which: str | None = None) -> SystemGraph:
    """Apply one layer; returns a system with updated ``Z`` and ``h``."""
    Z = ad.as_tensor(sys.Z)
    h = ad.as_tensor(sys.h)
    if Z.shape[-1] == 0:
        raise ValueError("nodes need at least one directional channel")
    if Z.shape[-1] != len(layer.roles):
        raise ValueError(f"layer built for {len(layer.roles)} channels, state has {Z.shape[-1]}")
    if h.shape[-1] != layer.feat_dim:
        raise ValueError(f"layer expects {layer.feat_dim} node features, got {h.shape[-1]}")
    A = ad.as_tensor(sys.adjacency(which or layer.adjacency))
    E = layer._edge_attr(sys)

    if layer.mode in ("generalized", "gmn-degenerate"):
        delta, agg = layer._matrix_messages(Z, h, A, E)
        h_new = layer.phi_h(ad.concat([h, agg], axis=-1))
        Z_new = layer._assemble(Z, h_new, delta)
    elif layer.mode == "egnn-relaxed":
        Z_new, h_new = _egnn_update(layer, Z, h, A, E)
    else:
        Z_new, h_new = _plain_update(layer, Z, h, A, E)
    return sys.replace(Z=Z_new, h=h_new)


def egnn_relaxed_forward(layer: EmmpLayer, sys: SystemGraph, which: str | None = None) -> SystemGraph:
    if layer.mode != "egnn-relaxed":
        raise ValueError(f"layer is in {layer.mode!r} mode")
    return emmp_forward(layer, sys, which)


def _egnn_update(layer: EmmpLayer, Z: Tensor, h: Tensor, A: Tensor, E):
    p = layer.pos
    x = Z[..., p]
    lead = x.shape[:-2]
    N, n = x.shape[-2:]
    diff = x.reshape(lead + (N, 1, n)) - x.reshape(lead + (1, N, n))
    r2 = (diff * diff).sum(axis=-1, keepdims=True)
    pre = pair_linear(layer.phi_e.layers[0], [(h, "src"), (h, "dst"), (r2, "edge"), (E, "edge")])
    msg = layer.phi_e.tail(pre)
    a = A.reshape(A.shape + (1,))
    agg = (msg * a).sum(axis=-2)
    deg = ad.maximum(A.sum(axis=-1, keepdims=True), 1.0)
    shift = (diff * layer.phi_x(msg) * a).sum(axis=-2) / deg
    h_new = layer.phi_h(ad.concat([h, agg], axis=-1))
    # only the position column receives a radial update
    delta_cols = [shift.reshape(shift.shape + (1,)) if k == p else None for k in range(Z.shape[-1])]
    if layer.recursive:
        q = layer.vel
        scale = layer.phi_v(h_new)
        v_new = scale.reshape(scale.shape[:-1] + (1, 1)) * Z[..., q : q + 1] + delta_cols[p]
        x_new = Z[..., p : p + 1] + v_new
        cols = []
        for k in range(Z.shape[-1]):
            cols.append(x_new if k == p else v_new if k == q else Z[..., k : k + 1])
    else:
        cols = [Z[..., k : k + 1] + delta_cols[k] if k == p else Z[..., k : k + 1] for k in range(Z.shape[-1])]
    return ad.concat(cols, axis=-1), h_new


def _plain_update(layer: EmmpLayer, Z: Tensor, h: Tensor, A: Tensor, E):
    lead = Z.shape[:-2]
    n, m = Z.shape[-2:]
    Zf = Z.reshape(lead + (n * m,))
    pre = pair_linear(
        layer.phi_e.layers[0], [(h, "src"), (h, "dst"), (Zf, "src"), (Zf, "dst"), (E, "edge")]
    )
    msg = layer.phi_e.tail(pre)
    agg = (msg * A.reshape(A.shape + (1,))).sum(axis=-2)
    node_in = ad.concat([h, agg], axis=-1)
    delta = layer.phi_z(node_in).reshape(lead + (n, m))
    h_new = layer.phi_h(node_in)
    return layer._assemble(Z, h_new, delta), h_new
