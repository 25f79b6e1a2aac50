"""Multi-body systems, Euclidean actions and adjacency construction."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ChannelRole(str, Enum):
    POSITION = "position"
    VELOCITY = "velocity"
    OTHER = "other"


def parse_roles(roles) -> tuple[ChannelRole, ...]:
    out = tuple(ChannelRole(r) for r in roles)
    if not out:
        raise ValueError("a directional state needs at least one channel")
    return out


def position_mask(roles) -> np.ndarray:
    """1.0 for Position columns, 0.0 elsewhere, shape (m,)."""
    return np.array([1.0 if r == ChannelRole.POSITION else 0.0 for r in parse_roles(roles)])


def role_index(roles, role: ChannelRole) -> int | None:
    for k, r in enumerate(parse_roles(roles)):
        if r == role:
            return k
    return None


def _data(x):
    return x.data if isinstance(x, Tensor) else x


@dataclass(frozen=True)
class SystemGraph:
    """One level of the hierarchy.

    Arrays may carry leading batch axes; the trailing layout is
    ``Z: (N, n, m)``, ``h: (N, c)``, adjacencies ``(N, N)`` and
    ``edge_attr: (N, N, e)``.  Fields hold numpy arrays or Tensors.
    """

    Z: object
    h: object
    A_local: object
    A_global: object
    edge_attr: object = None
    roles: tuple = (ChannelRole.POSITION, ChannelRole.VELOCITY)

    def __post_init__(self):
        object.__setattr__(self, "roles", parse_roles(self.roles))
        Z = _data(self.Z)
        if Z.shape[-1] != len(self.roles):
            raise ValueError(f"Z has {Z.shape[-1]} channels but {len(self.roles)} roles")

    @property
    def num_nodes(self) -> int:
        return _data(self.Z).shape[-3]

    @property
    def N(self) -> int:
        return self.num_nodes

    def replace(self, **changes) -> "SystemGraph":
        return dataclasses.replace(self, **changes)

    def adjacency(self, which: str):
        if which == "local":
            return self.A_local
        if which == "global":
            return self.A_global
        raise ValueError(f"unknown adjacency {which!r}; expected 'local' or 'global'")

    def numpy(self) -> "SystemGraph":
        """Copy with every Tensor field replaced by its array."""
        return SystemGraph(
            _data(self.Z), _data(self.h), _data(self.A_local), _data(self.A_global),
            None if self.edge_attr is None else _data(self.edge_attr), self.roles,
        )


@dataclass(frozen=True)
class EuclideanAction:
    """``x -> R x + b`` for positions, ``v -> R v`` otherwise, plus an optional node relabeling.

    ``perm[k]`` is the old index of new node ``k``.
    """

    R: np.ndarray
    b: np.ndarray
    perm: np.ndarray | None = None

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if R.ndim != 2 or R.shape[0] != R.shape[1] or b.shape != (R.shape[0],):
            raise ValueError(f"action needs square R and matching b, got {R.shape} and {b.shape}")
        err = np.abs(R.T @ R - np.eye(R.shape[0])).max()
        if err > 1e-10:
            raise ValueError(f"R is not orthogonal (max |R^T R - I| = {err:.3e})")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "b", b)
        if self.perm is not None:
            object.__setattr__(self, "perm", np.asarray(self.perm, dtype=np.int64))

    @classmethod
    def identity(cls, n: int = 3) -> "EuclideanAction":
        return cls(np.eye(n), np.zeros(n))

    def compose(self, first: "EuclideanAction") -> "EuclideanAction":
        """The action ``self ∘ first`` (apply ``first``, then ``self``)."""
        perm = None
        if first.perm is not None or self.perm is not None:
            n_nodes = len(first.perm if first.perm is not None else self.perm)
            p1 = first.perm if first.perm is not None else np.arange(n_nodes)
            p2 = self.perm if self.perm is not None else np.arange(n_nodes)
            perm = p1[p2]
        return EuclideanAction(self.R @ first.R, self.R @ first.b + self.b, perm)


def apply_action(g: EuclideanAction, sys: SystemGraph) -> SystemGraph:
    """Transform geometric channels of ``sys`` by ``g``; scalars and adjacencies only follow ``perm``."""
    Z = _data(sys.Z)
    n = Z.shape[-2]
    if g.R.shape[0] != n:
        raise ValueError(f"action acts on R^{g.R.shape[0]} but states live in R^{n}")
    pos = position_mask(sys.roles)
    Zn = np.matmul(g.R, Z) + g.b[:, None] * pos[None, :]
    h, Al, Ag, E = _data(sys.h), _data(sys.A_local), _data(sys.A_global), sys.edge_attr
    E = None if E is None else _data(E)
    if g.perm is not None:
        p = g.perm
        Zn = Zn[..., p, :, :]
        h = h[..., p, :]
        Al = Al[..., p, :][..., :, p]
        Ag = Ag[..., p, :][..., :, p]
        if E is not None:
            E = E[..., p, :, :][..., :, p, :]
    return SystemGraph(Zn, h, Al, Ag, E, sys.roles)


def transform_states(g: EuclideanAction, Z, roles) -> np.ndarray:
    """Apply ``g`` (rotation/translation only) to a bare state array ``(..., N, n, m)``."""
    Z = _data(Z)
    return np.matmul(g.R, Z) + g.b[:, None] * position_mask(roles)[None, :]


def random_action(rng: np.random.Generator, n: int = 3, max_shift: float = 10.0,
                  reflect: bool | None = None, n_nodes: int | None = None) -> EuclideanAction:
    """Haar-random orthogonal matrix (optionally forced to a reflection) and a shift with norm <= max_shift."""
    Q, Rr = np.linalg.qr(rng.standard_normal((n, n)))
    Q = Q * np.sign(np.diag(Rr))
    if reflect is not None:
        is_reflection = np.linalg.det(Q) < 0
        if is_reflection != reflect:
            Q[:, 0] = -Q[:, 0]
    direction = rng.standard_normal(n)
    direction /= np.linalg.norm(direction)
    b = direction * rng.uniform(0.0, max_shift)
    perm = rng.permutation(n_nodes) if n_nodes is not None else None
    return EuclideanAction(Q, b, perm)


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# ----------------------------------------------------------------------
# adjacency
# ----------------------------------------------------------------------


def build_global_adjacency(positions, threshold: float = np.inf) -> np.ndarray:
    """0/1 adjacency with an edge wherever the pairwise distance is below ``threshold``.

    ``positions`` has shape ``(..., N, n)``; the diagonal is always zero.
    """
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    x = np.asarray(positions, dtype=np.float64)
    N = x.shape[-2]
    if np.isinf(threshold):
        A = np.ones(x.shape[:-2] + (N, N))
    else:
        d = np.linalg.norm(x[..., :, None, :] - x[..., None, :, :], axis=-1)
        A = (d < threshold).astype(np.float64)
    A[..., np.arange(N), np.arange(N)] = 0.0
    return A


def row_normalize(M: Tensor) -> Tensor:
    """Divide every nonzero row by its sum; all-zero rows stay zero."""
    M = ad.as_tensor(M)
    rs = M.sum(axis=-1, keepdims=True)
    guard = (rs.data == 0.0).astype(np.float64)
    return M / (rs + guard)


def rescale_adjacency(A, S) -> Tensor:
    """Coarsen an adjacency through a soft assignment.

    Computes ``S^T A S``, row-normalizes it, zeroes the diagonal and
    symmetrizes by averaging with the transpose.
    """
    A, S = ad.as_tensor(A), ad.as_tensor(S)
    if A.shape[-1] != S.shape[-2]:
        raise ValueError(f"rescale_adjacency: A {A.shape} does not match S {S.shape}")
    M = row_normalize(S.mT @ A @ S)
    K = S.shape[-1]
    M = M * (1.0 - np.eye(K))
    return (M + M.mT) * 0.5


def stick_adjacency(n_nodes: int, sticks) -> np.ndarray:
    A = np.zeros((n_nodes, n_nodes))
    for i, j in sticks:
        if i == j or not (0 <= i < n_nodes and 0 <= j < n_nodes):
            raise ValueError(f"invalid stick ({i}, {j}) for {n_nodes} nodes")
        A[i, j] = A[j, i] = 1.0
    return A
