"""Training, evaluation, baselines and ablations on M-complex datasets."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError
from .data import Sample, sample_arrays
from .model import EghnConfig, EghnModel, eghn_loss, position_mse
from .nn import Adam, clip_grad_norm, read_checkpoint, save_checkpoint
from .pooling import hard_assignment
from .system import ChannelRole, role_index

RUN_RECORD_VERSION = 1
MODEL_KINDS = ("eghn", "egnn-baseline", "linear")
VARIANTS = ("full", "no-equivariance", "no-connectivity", "global-only", "local-only")
ABLATIONS = ("K-sweep", "no-equivariance", "no-connectivity", "global-only", "local-only")


class NumericError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class RunRecord:
    model_kind: str
    variant: str
    seed: int
    config: dict
    train_loss: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_mse: float = math.nan
    test_mse: float = math.nan
    epochs_run: int = 0
    stopped_early: bool = False
    wall_clock: float = 0.0
    num_parameters: int = 0
    checkpoint: str | None = None
    schema_version: int = RUN_RECORD_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        version = d.get("schema_version")
        if version != RUN_RECORD_VERSION:
            raise ValueError(f"unsupported run record schema_version {version!r}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def write_loss_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_mse"])
            for k, (tl, vm) in enumerate(zip(self.train_loss, self.val_mse)):
                w.writerow([k, repr(tl), repr(vm)])


# ----------------------------------------------------------------------
# configs
# ----------------------------------------------------------------------


def egnn_config(cfg: EghnConfig) -> EghnConfig:
    """Flat baseline: four external layers, no pooling."""
    return cfg.replace(levels=0, clusters=[], enc_layers=4, dec_layers=0, lam=0.0)


def variant_config(cfg: EghnConfig, variant: str) -> EghnConfig:
    if variant == "full":
        return cfg
    if variant == "no-equivariance":
        return cfg.replace(equivariant=False)
    if variant == "no-connectivity":
        return cfg.replace(lam=0.0)
    if variant in ("global-only", "local-only"):
        return cfg.replace(adjacency_mode=variant)
    if variant.startswith("K="):
        return cfg.replace(clusters=[int(variant[2:])] * cfg.levels)
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS} or 'K=<int>'")


# ----------------------------------------------------------------------
# batching
# ----------------------------------------------------------------------


class Prepared:
    """Model inputs for a split, stacked once per node count."""

    def __init__(self, samples: list[Sample], cfg: EghnConfig):
        self.size = len(samples)
        self.groups = {}
        by_n: dict[int, list[int]] = {}
        for k, s in enumerate(samples):
            by_n.setdefault(s.num_nodes, []).append(k)
        for N, idx in sorted(by_n.items()):
            sys, Z_gt = sample_arrays([samples[k] for k in idx], cfg.threshold, cfg.roles)
            self.groups[N] = (np.asarray(idx), sys, Z_gt)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        out = []
        for N, (idx, _, _) in self.groups.items():
            order = rng.permutation(len(idx)) if rng is not None else np.arange(len(idx))
            out.extend((N, order[i : i + batch_size]) for i in range(0, len(order), batch_size))
        if rng is not None:
            out = [out[k] for k in rng.permutation(len(out))]
        return out

    def get(self, N: int, rows):
        idx, sys, Z_gt = self.groups[N]
        take = lambda a: None if a is None else a[rows]  # noqa: E731
        sub = sys.replace(Z=sys.Z[rows], h=sys.h[rows], A_local=sys.A_local[rows],
                          A_global=sys.A_global[rows], edge_attr=take(sys.edge_attr))
        return idx[rows], sub, Z_gt[rows]


# ----------------------------------------------------------------------
# prediction and metrics
# ----------------------------------------------------------------------


def linear_predict(samples: list[Sample]) -> np.ndarray:
    """Constant-velocity extrapolation ``x_T = x_0 + v_0 * T * dt``."""
    return np.stack([s.positions + s.velocities * s.horizon for s in samples])


def predict(model: EghnModel, samples: list[Sample], batch_size: int = 100):
    """Final states and pooling scores for every sample, in input order."""
    prep = samples if isinstance(samples, Prepared) else Prepared(samples, model.cfg)
    Z_out = [None] * prep.size
    scores = [None] * prep.size
    with ad.no_grad():
        for N, rows in prep.batches(batch_size):
            idx, sys, _ = prep.get(N, rows)
            res = model(sys)
            for b, k in enumerate(idx):
                Z_out[k] = ad.as_tensor(res.sys_out.Z).data[b]
                scores[k] = [S.data[b] for S in res.scores]
    return Z_out, scores


def evaluate(model: EghnModel, samples, batch_size: int = 100) -> float:
    """Position MSE averaged over every scalar entry of the split."""
    prep = samples if isinstance(samples, Prepared) else Prepared(samples, model.cfg)
    total, count = 0.0, 0
    with ad.no_grad():
        for N, rows in prep.batches(batch_size):
            _, sys, Z_gt = prep.get(N, rows)
            out = model(sys).sys_out.Z
            mse = position_mse(out, Z_gt, model.cfg.roles)
            n = Z_gt[..., 0].size
            total += mse * n
            count += n
    return total / count


def node_errors(model: EghnModel, samples, batch_size: int = 100) -> list[np.ndarray]:
    """Per-node squared position error ``|x_out_i - x_gt_i|^2`` for every sample."""
    Z_out, _ = predict(model, samples, batch_size)
    p = role_index(model.cfg.roles, ChannelRole.POSITION)
    return [np.sum((z[..., p] - s.target_positions) ** 2, axis=-1) for z, s in zip(Z_out, samples)]


def load_model(path) -> EghnModel:
    """Rebuild a model from a checkpoint written by :func:`train`."""
    state, extra = read_checkpoint(path)
    if "config" not in extra:
        raise ValueError(f"{path}: checkpoint carries no model config")
    model = EghnModel(EghnConfig.from_dict(extra["config"]), np.random.default_rng(0))
    model.load_state_dict(state)
    return model


def evaluate_checkpoint(path, samples: list[Sample]) -> tuple[float, list[np.ndarray]]:
    """MSE and per-node errors of a saved model on a split."""
    model = load_model(path)
    N = model.cfg.n
    if samples and samples[0].positions.shape[-1] != N:
        raise ValueError(f"checkpoint expects {N}-d coordinates, data has {samples[0].positions.shape[-1]}")
    return evaluate(model, samples), node_errors(model, samples)


def linear_mse(samples: list[Sample]) -> float:
    pred = linear_predict(samples)
    gt = np.stack([s.target_positions for s in samples])
    return float(np.mean((pred - gt) ** 2))


def cluster_purity(assignment, membership) -> float:
    """Fraction of nodes whose hard cluster's majority complex matches their own.

    ``purity = sum_k max_c |{i : a_i = k, y_i = c}| / N``.
    """
    a = np.asarray(assignment)
    y = np.asarray(membership)
    if a.shape != y.shape:
        raise ValueError(f"assignment {a.shape} and membership {y.shape} differ")
    total = 0
    for k in np.unique(a):
        total += np.bincount(y[a == k]).max()
    return total / a.size


def pooling_purity(model: EghnModel, samples: list[Sample], metas: list[dict], level: int = -1) -> float:
    """Mean purity of the hard assignments of one E-Pool over a split."""
    if model.cfg.levels == 0:
        raise ValueError("model has no pooling layers")
    _, scores = predict(model, samples)
    vals = [cluster_purity(hard_assignment(sc[level]), m["membership"]) for sc, m in zip(scores, metas)]
    return float(np.mean(vals))


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------


def _model_config(kind: str, cfg: EghnConfig) -> EghnConfig:
    if kind == "eghn":
        return cfg
    if kind in ("egnn-baseline", "egnn"):
        return egnn_config(cfg)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def train(kind: str, cfg: EghnConfig, dataset, seed: int = 0, variant: str = "full",
          epochs: int | None = None, log=None, checkpoint_path=None):
    """Fit one model and report its test MSE at the best-validation epoch.

    Returns ``(record, model)``; ``model`` is None for the linear baseline.
    Raises :class:`NumericError` as soon as a loss or gradient goes non-finite.
    """
    if kind == "linear":
        rec = RunRecord("linear", "full", seed, cfg.to_dict())
        rec.best_val_mse = linear_mse(dataset.val)
        rec.test_mse = linear_mse(dataset.test)
        return rec, None
    mcfg = _model_config(kind, variant_config(cfg, variant))
    epochs = mcfg.epochs if epochs is None else epochs
    init_seq, shuffle_seq = np.random.SeedSequence(seed).spawn(2)
    model = EghnModel(mcfg, np.random.default_rng(init_seq))
    rng = np.random.default_rng(shuffle_seq)
    opt = Adam(model.parameters(), lr=mcfg.lr, weight_decay=mcfg.weight_decay)
    train_prep = Prepared(dataset.train, mcfg)
    val_prep = Prepared(dataset.val, mcfg)
    rec = RunRecord(kind, variant, seed, mcfg.to_dict(), num_parameters=model.num_parameters())
    best_state, best_val, since_best = model.state_dict(), math.inf, 0
    t0 = time.perf_counter()
    for epoch in range(epochs):
        total = 0.0
        for N, rows in train_prep.batches(mcfg.batch_size, rng):
            _, sys, Z_gt = train_prep.get(N, rows)
            opt.zero_grad()
            try:
                res = model(sys)
                loss = eghn_loss(res.sys_out.Z, Z_gt, res.scores, res.adjacencies, mcfg.lam,
                                 mcfg.roles, mcfg.supervise_velocity)
                ad.backward(loss)
            except NonFiniteError as err:
                ad.get_tape().clear()
                raise NumericError(f"epoch {epoch}: {err}") from err
            grads_ok = all(p.grad is None or np.isfinite(p.grad).all() for p in opt.params)
            if not grads_ok:
                raise NumericError(f"epoch {epoch}: non-finite gradient")
            clip_grad_norm(opt.params, mcfg.grad_clip)
            opt.step()
            total += loss.item() * len(rows)
        rec.train_loss.append(total / train_prep.size)
        val = evaluate(model, val_prep)
        rec.val_mse.append(val)
        rec.epochs_run = epoch + 1
        if log is not None:
            log(f"[{kind}/{variant} seed={seed}] epoch {epoch:4d} loss {rec.train_loss[-1]:.5f} val {val:.5f}")
        if val < best_val:
            best_val, best_state, since_best = val, model.state_dict(), 0
            rec.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= mcfg.patience:
                rec.stopped_early = True
                break
    model.load_state_dict(best_state)
    rec.best_val_mse = best_val
    rec.test_mse = evaluate(model, dataset.test)
    rec.wall_clock = time.perf_counter() - t0
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, {"config": mcfg.to_dict(), "kind": kind, "seed": seed})
        rec.checkpoint = str(checkpoint_path)
    return rec, model


def run_ablation(which: str, cfg: EghnConfig, dataset, seeds=(0, 1, 2), ks=None, epochs: int | None = None,
                 log=None) -> dict:
    """Train one ablation for every seed; returns ``{variant: [RunRecord, ...]}``.

    ``K-sweep`` trains one variant per cluster count in ``ks``.
    """
    if which not in ABLATIONS:
        raise ValueError(f"unknown ablation {which!r}; expected one of {ABLATIONS}")
    if which == "K-sweep":
        if not ks:
            raise ValueError("K-sweep needs a list of cluster counts")
        variants = [f"K={k}" for k in ks]
    else:
        variants = [which]
    out = {}
    for v in variants:
        out[v] = [train("eghn", cfg, dataset, seed=s, variant=v, epochs=epochs, log=log)[0] for s in seeds]
    return out


def seed_mean(records: list[RunRecord]) -> float:
    return float(np.mean([r.test_mse for r in records]))
