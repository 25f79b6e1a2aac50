"""Equivariant pooling (coarsening) and up-pooling (refinement)."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .emmp import EmmpLayer, _flat_gram, center_states
from .nn import MLP, Linear, Module
from .system import SystemGraph, parse_roles, rescale_adjacency


class DegenerateClusterError(ValueError):
    pass


class EPoolLayer(Module):
    """Internal EMMP over the local adjacency, then a softmax assignment to ``K`` clusters."""

    def __init__(
        self,
        feat_dim: int,
        hidden: int,
        n_clusters: int,
        roles,
        rng: np.random.Generator,
        edge_dim: int = 0,
        recursive: bool = False,
        mode: str = "generalized",
        adjacency: str = "local",
        pool_features: str = "input",
        n: int = 3,
    ):
        if n_clusters < 1:
            raise ValueError(f"cluster count must be >= 1, got {n_clusters}")
        if pool_features not in ("input", "updated"):
            raise ValueError(f"pool_features must be 'input' or 'updated', got {pool_features!r}")
        self.roles = parse_roles(roles)
        self.n_clusters = n_clusters
        self.pool_features = pool_features
        self.emmp = EmmpLayer(
            feat_dim, hidden, self.roles, rng, mode=mode, edge_dim=edge_dim,
            recursive=recursive, adjacency=adjacency, n=n,
        )
        # small last layer keeps the initial assignment close to uniform
        self.score = MLP([feat_dim, hidden, n_clusters], rng, output_activation="softmax", last_scale=0.1)

    def __call__(self, sys: SystemGraph) -> tuple[SystemGraph, Tensor]:
        return epool_forward(self, sys)


def _check_mass(mass: Tensor, min_mass: float) -> None:
    if np.any(~(mass.data > min_mass)):
        raise DegenerateClusterError(f"degenerate cluster: column sum {mass.data.min():.3e}")


def pool_states(S: Tensor, Z: Tensor, min_mass: float = 1e-12) -> Tensor:
    """Score-weighted cluster means ``Z_high_j = sum_i s_ij Z_i / sum_i s_ij``.

    ``min_mass`` guards externally supplied ``S``.  Scores produced by the
    layer pass 0: a tiny but positive column sum still gives a well-defined
    weighted mean in floating point.
    """
    S, Z = ad.as_tensor(S), ad.as_tensor(Z)
    lead = Z.shape[:-3]
    N, n, m = Z.shape[-3:]
    K = S.shape[-1]
    mass = S.sum(axis=-2)
    _check_mass(mass, min_mass)
    num = S.mT @ Z.reshape(lead + (N, n * m))
    return (num / mass.reshape(mass.shape + (1,))).reshape(num.shape[:-2] + (K, n, m))


def pool_features(S: Tensor, h: Tensor, min_mass: float = 1e-12) -> Tensor:
    S, h = ad.as_tensor(S), ad.as_tensor(h)
    mass = S.sum(axis=-2)
    _check_mass(mass, min_mass)
    return (S.mT @ h) / mass.reshape(mass.shape + (1,))


def epool_forward(layer: EPoolLayer, sys_low: SystemGraph) -> tuple[SystemGraph, Tensor]:
    """Coarsen ``sys_low`` to ``K`` nodes; returns ``(sys_high, S)``.

    The high-level local adjacency is ``S^T A_local S``; the global one is
    the re-scored form from :func:`rescale_adjacency`.  Edge attributes do not
    survive coarsening.
    """
    N = sys_low.num_nodes
    if not N >= layer.n_clusters:
        raise ValueError(f"cannot pool {N} nodes into {layer.n_clusters} clusters")
    updated = layer.emmp(sys_low)
    S = layer.score(updated.h)
    Z_high = pool_states(S, updated.Z, min_mass=0.0)
    h_src = sys_low.h if layer.pool_features == "input" else updated.h
    h_high = pool_features(S, h_src, min_mass=0.0)
    A_loc = ad.as_tensor(sys_low.A_local)
    A_local_high = S.mT @ A_loc @ S
    A_global_high = rescale_adjacency(sys_low.A_global, S)
    sys_high = SystemGraph(Z_high, h_high, A_local_high, A_global_high, None, sys_low.roles)
    return sys_high, S


class EUpPoolLayer(Module):
    """Broadcast cluster states back to members and mix them with the low-level states.

    One trunk MLP reads ``(Zhat^T Zhat / n, h_low, h_agg)``; a feature head
    gives the new node features and a coefficient head gives the ``2m x m``
    matrix that recombines ``Zhat = [Z_low - Zbar_low, Z_agg - Zbar_agg]``.
    """

    def __init__(self, feat_dim: int, hidden: int, roles, rng: np.random.Generator, n: int = 3):
        self.roles = parse_roles(roles)
        m = len(self.roles)
        k = 2 * m
        self.trunk = MLP([k * k + 2 * feat_dim, hidden, hidden], rng, output_activation="silu")
        self.feat_head = Linear(hidden, feat_dim, rng)
        # start as a pass-through of the low-level block: W = [I; 0]
        self.coef_head = Linear(hidden, k * m, rng, scale=0.1)
        self.coef_head.bias.data = np.concatenate([np.eye(m), np.zeros((m, m))]).reshape(-1)
        self.n = n

    def __call__(self, sys_high: SystemGraph, S, sys_low: SystemGraph) -> SystemGraph:
        return euppool_forward(self, sys_high, S, sys_low)


def broadcast_clusters(S, Z_high, h_high) -> tuple[Tensor, Tensor]:
    """``Z_agg_i = sum_j s_ij Z_high_j`` and ``h_agg_i = sum_j s_ij h_high_j``."""
    S, Z_high, h_high = ad.as_tensor(S), ad.as_tensor(Z_high), ad.as_tensor(h_high)
    lead = Z_high.shape[:-3]
    K, n, m = Z_high.shape[-3:]
    N = S.shape[-2]
    Z_agg = (S @ Z_high.reshape(lead + (K, n * m))).reshape(lead + (N, n, m))
    return Z_agg, S @ h_high


def euppool_forward(layer: EUpPoolLayer, sys_high: SystemGraph, S, sys_low: SystemGraph) -> SystemGraph:
    S = ad.as_tensor(S)
    rows = S.data.sum(axis=-1)
    if np.abs(rows - 1.0).max() > 1e-8:
        raise ValueError(f"score rows must sum to 1 (max deviation {np.abs(rows - 1.0).max():.3e})")
    Z_high = ad.as_tensor(sys_high.Z)
    Z_low = ad.as_tensor(sys_low.Z)
    K, n, m = Z_high.shape[-3:]
    N = Z_low.shape[-3]
    if S.shape[-2:] != (N, K):
        raise ValueError(f"S has shape {S.shape}, expected (..., {N}, {K})")
    Z_agg, h_agg = broadcast_clusters(S, Z_high, sys_high.h)
    h_low = ad.as_tensor(sys_low.h)
    Zc_low, Zbar_low = center_states(Z_low, layer.roles)
    Zc_agg, _ = center_states(Z_agg, layer.roles)
    Zhat = ad.concat([Zc_low, Zc_agg], axis=-1)
    gram = _flat_gram(Zhat, n)
    t = layer.trunk(ad.concat([gram, h_low, h_agg], axis=-1))
    h_out = layer.feat_head(t)
    W = layer.coef_head(t)
    W = W.reshape(W.shape[:-1] + (2 * m, m))
    Z_out = Zhat @ W + Zbar_low
    return sys_low.replace(Z=Z_out, h=h_out)


def hard_assignment(S) -> np.ndarray:
    """Argmax cluster per node; ties go to the lowest index."""
    S = S.data if isinstance(S, Tensor) else np.asarray(S)
    return np.argmax(S, axis=-1)
