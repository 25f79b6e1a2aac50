"""M-complex datasets: generation, JSON-lines serialization and model-facing loading.

A dataset directory holds ``train.jsonl``, ``val.jsonl``, ``test.jsonl`` and a
``manifest.json`` sidecar.  Ground-truth complex membership lives under each
record's ``_meta`` key and is only reachable through :func:`load_meta`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .simulator import SimParams, SimState, build_complexes, init_system, integrate, sample_signature
from .system import SystemGraph, build_global_adjacency, stick_adjacency

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")


class SchemaError(ValueError):
    """A record or manifest does not match the supported schema."""


@dataclass(frozen=True)
class Sample:
    """Model-facing view of one record; carries no ground-truth membership."""

    system_id: int
    positions: np.ndarray
    velocities: np.ndarray
    charges: np.ndarray
    sticks: np.ndarray
    target_positions: np.ndarray
    target_velocities: np.ndarray
    horizon: float
    extra_features: np.ndarray | None = None

    @property
    def num_nodes(self) -> int:
        return self.positions.shape[0]


@dataclass
class Dataset:
    train: list
    val: list
    test: list
    manifest: dict

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)


# ----------------------------------------------------------------------
# records
# ----------------------------------------------------------------------


def make_record(system_id, x0, v0, charges, sticks, xT, vT, membership, seed, T, dt, signature,
                extra_features=None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "system_id": int(system_id),
        "input": {
            "positions": np.asarray(x0).tolist(),
            "velocities": np.asarray(v0).tolist(),
            "charges": np.asarray(charges).tolist(),
            "sticks": np.asarray(sticks, dtype=np.int64).reshape(-1, 2).tolist(),
            "extra_features": None if extra_features is None else np.asarray(extra_features).tolist(),
        },
        "target": {"positions": np.asarray(xT).tolist(), "velocities": np.asarray(vT).tolist()},
        "_meta": {
            "membership": np.asarray(membership, dtype=np.int64).tolist(),
            "seed": int(seed),
            "T": int(T),
            "dt": float(dt),
            "signature": [[s, int(k)] for s, k in signature],
        },
    }


def serialize_record(rec: dict) -> str:
    return json.dumps(rec, separators=(",", ":"))


def parse_record(line: str) -> dict:
    rec = json.loads(line)
    version = rec.get("schema_version")
    if not isinstance(version, int) or version > SCHEMA_VERSION or version < 1:
        raise SchemaError(f"unsupported record schema_version {version!r} (supported: {SCHEMA_VERSION})")
    _validate_record(rec)
    return rec


def _validate_record(rec: dict) -> None:
    try:
        inp, tgt = rec["input"], rec["target"]
        x = np.asarray(inp["positions"], dtype=np.float64)
        v = np.asarray(inp["velocities"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as err:
        raise SchemaError(f"malformed record: {err}") from None
    N = x.shape[0] if x.ndim == 2 else -1
    if x.shape != (N, 3) or v.shape != (N, 3):
        raise SchemaError(f"positions/velocities must be N x 3, got {x.shape} and {v.shape}")
    for key in ("positions", "velocities"):
        if np.asarray(tgt[key]).shape != (N, 3):
            raise SchemaError(f"target {key} must be {N} x 3")
    if len(inp["charges"]) != N:
        raise SchemaError("one charge per particle required")
    for i, j in inp["sticks"]:
        if not (0 <= i < N and 0 <= j < N) or i == j:
            raise SchemaError(f"stick ({i}, {j}) out of range for {N} particles")


def record_to_sample(rec: dict, horizon: float) -> Sample:
    inp, tgt = rec["input"], rec["target"]
    extra = inp.get("extra_features")
    return Sample(
        system_id=int(rec["system_id"]),
        positions=np.asarray(inp["positions"], dtype=np.float64),
        velocities=np.asarray(inp["velocities"], dtype=np.float64),
        charges=np.asarray(inp["charges"], dtype=np.float64),
        sticks=np.asarray(inp["sticks"], dtype=np.int64).reshape(-1, 2),
        target_positions=np.asarray(tgt["positions"], dtype=np.float64),
        target_velocities=np.asarray(tgt["velocities"], dtype=np.float64),
        horizon=float(horizon),
        extra_features=None if extra is None else np.asarray(extra, dtype=np.float64),
    )


# ----------------------------------------------------------------------
# generation
# ----------------------------------------------------------------------


def distinct_signatures(M: int, avg_size: float, J: int, rng: np.random.Generator, max_tries: int = 10000) -> list:
    sigs = [sample_signature(M, avg_size, rng, exact=True)]
    tries = 0
    while len(sigs) < J:
        tries += 1
        if tries > max_tries:
            raise ValueError(f"could not find {J} distinct complex combinations for M={M}, avg_size={avg_size}")
        s = sample_signature(M, avg_size, rng, exact=False)
        if s not in sigs:
            sigs.append(s)
    return sigs


def record_seed(seed: int, split: str, k: int) -> int:
    ss = np.random.SeedSequence([seed, SPLITS.index(split), k])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def simulate_batch(signature, seeds, M: int, avg_size: float, T: int, params: SimParams):
    """Roll out one system topology for several seeds at once."""
    states = []
    complexes = build_complexes(signature)
    for s in seeds:
        st, _ = init_system(M, avg_size, seed=s, signature=signature, params=params)
        states.append(st)
    batch = SimState(
        np.stack([s.x for s in states]), np.stack([s.v for s in states]),
        np.stack([s.charges for s in states]), states[0].sticks, np.stack([s.lengths for s in states]),
    )
    _, _, final = integrate(batch, T, params.dt, params, record=False)
    membership = np.zeros(batch.x.shape[-2], dtype=np.int64)
    for k, c in enumerate(complexes):
        membership[list(c.indices)] = k
    return batch, final, membership


def make_dataset(out_dir, M: int, avg_size: float, J: int, counts: dict, T: int, dt: float = 1e-3,
                 seed: int = 0, params: SimParams | None = None) -> dict:
    """Simulate and write every split plus ``manifest.json``; returns the manifest."""
    if any(int(counts.get(s, 0)) <= 0 for s in SPLITS):
        raise ValueError(f"every split needs a positive count, got {counts}")
    if J < 1:
        raise ValueError("J must be >= 1")
    params = params or SimParams(dt=dt)
    if params.dt != dt:
        params = SimParams(**{**params.__dict__, "dt": dt})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    sigs = distinct_signatures(M, avg_size, J, rng)
    for split in SPLITS:
        n = int(counts[split])
        seeds = [record_seed(seed, split, k) for k in range(n)]
        records: list = [None] * n
        for sid, sig in enumerate(sigs):
            idx = [k for k in range(n) if k % J == sid]
            if not idx:
                continue
            init, final, membership = simulate_batch(sig, [seeds[k] for k in idx], M, avg_size, T, params)
            for b, k in enumerate(idx):
                records[k] = make_record(
                    sid, init.x[b], init.v[b], init.charges[b], init.sticks, final.x[b], final.v[b],
                    membership, seeds[k], T, dt, sig,
                )
        with open(out / f"{split}.jsonl", "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(serialize_record(rec) + "\n")
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "counts": {s: int(counts[s]) for s in SPLITS},
        "generation": {
            "M": M, "avg_size": avg_size, "J": J, "T": T, "dt": dt, "seed": seed,
            "softening": params.softening, "sigma_center": params.sigma_center,
            "offset_scale": params.offset_scale, "sigma_velocity": params.sigma_velocity,
        },
        "systems": [[[s, int(k)] for s, k in sig] for sig in sigs],
        "files": {s: f"{s}.jsonl" for s in SPLITS},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# ----------------------------------------------------------------------
# loading
# ----------------------------------------------------------------------


def read_manifest(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    man = json.loads(p.read_text())
    version = man.get("schema_version")
    if not isinstance(version, int) or version > SCHEMA_VERSION or version < 1:
        raise SchemaError(f"unsupported manifest schema_version {version!r}")
    return man


def iter_records(path):
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield parse_record(line)


def horizon_of(manifest: dict) -> float:
    g = manifest["generation"]
    return float(g["T"]) * float(g["dt"])


def load_split(root, split: str) -> list[Sample]:
    """Model-facing loader: returns :class:`Sample` objects without ``_meta``."""
    man = read_manifest(root)
    horizon = horizon_of(man)
    return [record_to_sample(r, horizon) for r in iter_records(Path(root) / man["files"][split])]


def load_dataset(root) -> Dataset:
    man = read_manifest(root)
    return Dataset(*(load_split(root, s) for s in SPLITS), manifest=man)


def load_meta(root, split: str) -> list[dict]:
    """Evaluation-only access to ground-truth membership and generation seeds."""
    man = read_manifest(root)
    return [r["_meta"] for r in iter_records(Path(root) / man["files"][split])]


# ----------------------------------------------------------------------
# model inputs
# ----------------------------------------------------------------------


def sample_arrays(samples: list[Sample], threshold: float = np.inf, roles=("position", "velocity")):
    """Stack samples of equal size into a batched :class:`SystemGraph` plus target states.

    Node feature: ``|v_i|`` (then any extra features).  Edge attributes:
    ``c_i c_j`` and a stick indicator.
    """
    Ns = {s.num_nodes for s in samples}
    if len(Ns) != 1:
        raise ValueError(f"cannot batch systems of different sizes {sorted(Ns)}")
    x = np.stack([s.positions for s in samples])
    v = np.stack([s.velocities for s in samples])
    q = np.stack([s.charges for s in samples])
    Z = np.stack([x, v], axis=-1)
    h = np.linalg.norm(v, axis=-1, keepdims=True)
    if samples[0].extra_features is not None:
        h = np.concatenate([h, np.stack([s.extra_features for s in samples])], axis=-1)
    N = x.shape[1]
    A_local = np.stack([stick_adjacency(N, s.sticks) for s in samples])
    A_global = build_global_adjacency(x, threshold)
    edge = np.stack([q[:, :, None] * q[:, None, :], A_local], axis=-1)
    sys = SystemGraph(Z, h, A_local, A_global, edge, roles)
    Z_gt = np.stack([np.stack([s.target_positions for s in samples]),
                     np.stack([s.target_velocities for s in samples])], axis=-1)
    return sys, Z_gt


def batches(samples: list, batch_size: int, rng: np.random.Generator | None = None):
    """Index batches grouped by node count; shuffled when ``rng`` is given."""
    groups: dict[int, list[int]] = {}
    order = rng.permutation(len(samples)) if rng is not None else np.arange(len(samples))
    for k in order:
        groups.setdefault(samples[k].num_nodes, []).append(int(k))
    out = []
    for N in sorted(groups):
        idx = groups[N]
        out.extend(idx[i : i + batch_size] for i in range(0, len(idx), batch_size))
    if rng is not None:
        out = [out[k] for k in rng.permutation(len(out))]
    return out
