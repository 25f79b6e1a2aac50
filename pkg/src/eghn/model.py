"""The encoder-decoder hierarchy and its training objective."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .emmp import EmmpLayer
from .nn import Linear, Module
from .pooling import EPoolLayer, EUpPoolLayer
from .system import ChannelRole, SystemGraph, parse_roles, role_index, row_normalize

ADJACENCY_MODES = ("dual", "global-only", "local-only")


@dataclass
class EghnConfig:
    """Architecture and optimisation settings.

    ``enc_layers``/``dec_layers`` count external EMMPs only; they are spread
    over the ``levels`` E-Pool / E-UpPool pairs with at least one per pair.
    ``levels = 0`` gives a flat stack of ``enc_layers + dec_layers`` external
    layers (the EGNN baseline).
    """

    enc_layers: int = 4
    dec_layers: int = 2
    levels: int = 1
    clusters: list[int] = field(default_factory=lambda: [3])
    hidden: int = 64
    lam: float = 4.0
    lr: float = 5e-4
    weight_decay: float = 1e-4
    grad_clip: float = 100.0  # global gradient-norm cap, 0 disables
    batch_size: int = 50
    threshold: float = math.inf
    node_feat_dim: int = 1
    edge_dim: int = 2
    n: int = 3
    roles: tuple = ("position", "velocity")
    recursive: bool = True
    external_mode: str = "egnn-relaxed"
    internal_mode: str = "generalized"
    equivariant: bool = True
    adjacency_mode: str = "dual"
    pool_features: str = "input"
    supervise_velocity: bool = False
    epochs: int = 500
    patience: int = 50

    def validate(self) -> None:
        if self.levels < 0:
            raise ValueError("levels must be >= 0")
        if len(self.clusters) != self.levels:
            raise ValueError(f"need one cluster count per level: levels={self.levels}, clusters={self.clusters}")
        if any(k < 1 for k in self.clusters):
            raise ValueError(f"cluster counts must be positive, got {self.clusters}")
        if any(b > a for a, b in zip(self.clusters, self.clusters[1:])):
            raise ValueError(f"cluster counts must not grow with depth, got {self.clusters}")
        if self.levels and (self.enc_layers < self.levels or self.dec_layers < self.levels):
            raise ValueError("every E-Pool and E-UpPool needs at least one external EMMP before it")
        if self.levels == 0 and self.enc_layers + self.dec_layers < 1:
            raise ValueError("a flat model needs at least one layer")
        for name in ("hidden", "batch_size", "node_feat_dim", "n", "epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.adjacency_mode not in ADJACENCY_MODES:
            raise ValueError(f"adjacency_mode must be one of {ADJACENCY_MODES}")
        parse_roles(self.roles)

    def replace(self, **changes) -> "EghnConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["roles"] = [str(ChannelRole(r).value) for r in self.roles]
        d["threshold"] = None if math.isinf(self.threshold) else self.threshold
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EghnConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "threshold" in d and d["threshold"] is None:
            d["threshold"] = math.inf
        if "roles" in d:
            d["roles"] = tuple(d["roles"])
        if "clusters" in d:
            d["clusters"] = list(d["clusters"])
        return cls(**d)


# rows of the published hyper-parameter table: lr, lambda, weight decay, encoder/decoder EMMP depth
PRESET_ROWS = {
    "(3,3,1)": (5e-4, 4.0, 1e-4, 4, 2),
    "(3,3,5)": (1e-3, 4.0, 1e-4, 4, 2),
    "(5,5,1)": (3e-4, 2.0, 1e-6, 4, 2),
    "(5,5,5)": (1e-3, 0.1, 1e-12, 4, 2),
    "(5,10,1)": (1e-4, 4.0, 1e-4, 2, 2),
    "(5,10,5)": (5e-4, 4.0, 1e-4, 4, 2),
    "(10,10,1)": (5e-4, 2.0, 1e-6, 4, 2),
    "(10,10,5)": (3e-4, 1.0, 1e-8, 4, 2),
    "mocap-walk": (4e-4, 1.0, 1e-6, 2, 2),
    "mocap-run": (3e-4, 1.0, 1e-6, 4, 1),
    "md": (2e-4, 0.5, 1e-4, 3, 2),
}

_BATCH = {"mocap-walk": 12, "mocap-run": 12, "md": 8}
_CLUSTERS = {"mocap-walk": 5, "mocap-run": 5, "md": 15}


def preset(name: str) -> EghnConfig:
    """Default config for a named dataset row, e.g. ``"(3,3,1)"`` or ``"md"``."""
    key = name.replace(" ", "")
    if key not in PRESET_ROWS:
        raise KeyError(f"no preset {name!r}; known: {sorted(PRESET_ROWS)}")
    lr, lam, wd, enc, dec = PRESET_ROWS[key]
    if key in _CLUSTERS:
        K = _CLUSTERS[key]
    else:
        K = int(key.strip("()").split(",")[0])  # one cluster per complex
    return EghnConfig(
        enc_layers=enc, dec_layers=dec, levels=1, clusters=[K], lam=lam, lr=lr,
        weight_decay=wd, batch_size=_BATCH.get(key, 50),
    )


def split_layers(total: int, levels: int) -> list[int]:
    base, extra = divmod(total, levels)
    return [base + (1 if l < extra else 0) for l in range(levels)]


class EghnModel(Module):
    def __init__(self, cfg: EghnConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        roles = parse_roles(cfg.roles)
        hid = cfg.hidden
        ext_mode = cfg.external_mode if cfg.equivariant else "plain"
        int_mode = cfg.internal_mode if cfg.equivariant else "plain"
        ext_adj = "local" if cfg.adjacency_mode == "local-only" else "global"
        int_adj = "global" if cfg.adjacency_mode == "global-only" else "local"

        def ext(edge_dim):
            return EmmpLayer(hid, hid, roles, rng, mode=ext_mode, edge_dim=edge_dim,
                             recursive=cfg.recursive, adjacency=ext_adj, n=cfg.n)

        self.embed = Linear(cfg.node_feat_dim, hid, rng)
        L = cfg.levels
        if L == 0:
            self.flat = [ext(cfg.edge_dim) for _ in range(cfg.enc_layers + cfg.dec_layers)]
            self.encoder, self.pools, self.decoder, self.uppools = [], [], [], []
            return
        self.flat = []
        enc_counts = split_layers(cfg.enc_layers, L)
        dec_counts = split_layers(cfg.dec_layers, L)
        self.encoder = []
        self.pools = []
        for l in range(L):
            e = cfg.edge_dim if l == 0 else 0
            self.encoder.append([ext(e) for _ in range(enc_counts[l])])
            self.pools.append(
                EPoolLayer(hid, hid, cfg.clusters[l], roles, rng, edge_dim=e, recursive=cfg.recursive,
                           mode=int_mode, adjacency=int_adj, pool_features=cfg.pool_features, n=cfg.n)
            )
        # decoder[l] runs on the level-(l+1) system before uppools[l] maps it back to level l
        self.decoder = [[ext(0) for _ in range(dec_counts[l])] for l in range(L)]
        self.uppools = [EUpPoolLayer(hid, hid, roles, rng, n=cfg.n) for _ in range(L)]

    def __call__(self, sys: SystemGraph):
        return eghn_forward(self, sys)


def build_from_config(cfg: EghnConfig, seed: int) -> EghnModel:
    """Deterministic construction: the same config and seed give identical weights."""
    return EghnModel(cfg, np.random.default_rng(seed))


@dataclass
class ForwardResult:
    sys_out: SystemGraph
    scores: list  # one S per E-Pool, outermost first
    adjacencies: list  # the adjacency each E-Pool's internal EMMP consumed
    levels: list  # the low-level system fed to each E-Pool


def eghn_forward(model: EghnModel, sys_in: SystemGraph) -> ForwardResult:
    cfg = model.cfg
    sys = sys_in.replace(h=model.embed(ad.as_tensor(sys_in.h)))
    if cfg.levels == 0:
        for layer in model.flat:
            sys = layer(sys)
        return ForwardResult(sys, [], [], [])
    cache = []
    scores, adjs, lows = [], [], []
    for l in range(cfg.levels):
        for layer in model.encoder[l]:
            sys = layer(sys)
        K = model.pools[l].n_clusters
        if K > sys.num_nodes:
            raise ValueError(f"level {l}: {K} clusters for {sys.num_nodes} nodes")
        high, S = model.pools[l](sys)
        cache.append((sys, S))
        scores.append(S)
        adjs.append(sys.adjacency(model.pools[l].emmp.adjacency))
        lows.append(sys)
        sys = high
    for l in reversed(range(cfg.levels)):
        for layer in model.decoder[l]:
            sys = layer(sys)
        low, S = cache[l]
        sys = model.uppools[l](sys, S, low)
    return ForwardResult(sys, scores, adjs, lows)


def connectivity_term(S, A) -> Tensor:
    """``|| rownorm(S^T A S) - I ||_F^2`` per batch element."""
    S, A = ad.as_tensor(S), ad.as_tensor(A)
    K = S.shape[-1]
    D = row_normalize(S.mT @ A @ S) - np.eye(K)
    return (D * D).sum(axis=(-2, -1))


def eghn_loss(Z_out, Z_gt, scores, adjacencies, lam: float, roles=("position", "velocity"),
              supervise_velocity: bool = False) -> Tensor:
    """Squared error over supervised channels plus ``lam`` times the connectivity terms.

    Per sample: ``sum_i ||Z_out_i - Z_gt_i||^2`` over supervised columns,
    summed with ``lam * sum_l ||rownorm(S_l^T A_l S_l) - I||_F^2``.  Leading
    batch axes are averaged.
    """
    Z_out = ad.as_tensor(Z_out)
    Z_gt = ad.as_tensor(Z_gt)
    if Z_out.shape != Z_gt.shape:
        raise ValueError(f"prediction {Z_out.shape} and target {Z_gt.shape} differ")
    roles = parse_roles(roles)
    mask = np.array([
        1.0 if r == ChannelRole.POSITION or (supervise_velocity and r == ChannelRole.VELOCITY) else 0.0
        for r in roles
    ])
    d = (Z_out - Z_gt) * mask
    per_sample = (d * d).sum(axis=(-3, -2, -1))
    if lam:
        for S, A in zip(scores, adjacencies):
            per_sample = per_sample + lam * connectivity_term(S, A)
    return per_sample.mean() if per_sample.ndim else per_sample


def position_mse(Z_out, Z_gt, roles=("position", "velocity")) -> float:
    """Mean over every scalar position entry (nodes, coordinates, samples)."""
    Z_out = Z_out.data if isinstance(Z_out, Tensor) else np.asarray(Z_out)
    Z_gt = Z_gt.data if isinstance(Z_gt, Tensor) else np.asarray(Z_gt)
    p = role_index(roles, ChannelRole.POSITION)
    return float(np.mean((Z_out[..., p] - Z_gt[..., p]) ** 2))
