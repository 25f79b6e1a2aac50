import dataclasses
import itertools
import math

import numpy as np
import pytest

from eghn.data import Dataset, load_dataset, load_meta, make_dataset
from eghn.model import EghnConfig, build_from_config, eghn_loss, position_mse
from eghn.nn import save_checkpoint
from eghn.training import (
    NumericError,
    RunRecord,
    cluster_purity,
    evaluate,
    evaluate_checkpoint,
    linear_mse,
    pooling_purity,
    run_ablation,
    train,
    variant_config,
)
from eghn.system import random_action


def tiny_config(**kw):
    base = dict(hidden=8, enc_layers=2, dec_layers=1, levels=1, clusters=[3], batch_size=4, epochs=3, patience=50)
    base.update(kw)
    return EghnConfig(**base)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    make_dataset(root, 3, 3, 1, {"train": 8, "val": 4, "test": 4}, T=100, seed=2)
    return root, load_dataset(root)


def moved_sample(s, g):
    mv = lambda x: x @ g.R.T + g.b  # noqa: E731
    return dataclasses.replace(
        s, positions=mv(s.positions), velocities=s.velocities @ g.R.T,
        target_positions=mv(s.target_positions), target_velocities=s.target_velocities @ g.R.T,
    )


class TestMetrics:
    def test_linear_is_exact_without_forces(self, dataset):
        _, ds = dataset
        neutral = [dataclasses.replace(s, charges=np.zeros_like(s.charges), sticks=np.zeros((0, 2), int))
                   for s in ds.test]
        # a force-free particle moves along x_0 + v_0 t; use that as the target
        exact = [dataclasses.replace(s, target_positions=s.positions + s.velocities * s.horizon) for s in neutral]
        assert linear_mse(exact) < 1e-10

    def test_perfect_prediction(self, rng):
        Z = rng.normal(size=(4, 5, 3, 2))
        assert position_mse(Z, Z.copy()) == 0.0

    def test_unit_offset(self, rng):
        Z = rng.normal(size=(4, 5, 3, 2))
        assert position_mse(Z + 1.0, Z) == pytest.approx(1.0, abs=1e-14)

    def test_scripted_mse(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            a, b = rng.normal(size=(6, 3, 2)), rng.normal(size=(6, 3, 2))
            total = sum((a[i, d, 0] - b[i, d, 0]) ** 2 for i in range(6) for d in range(3))
            assert abs(position_mse(a, b) - total / 18) < 1e-12

    def test_linear_invariant_under_actions(self, dataset, rng):
        _, ds = dataset
        base = linear_mse(ds.test)
        for _ in range(5):
            g = random_action(rng, reflect=True)
            assert linear_mse([moved_sample(s, g) for s in ds.test]) == pytest.approx(base, rel=1e-12)

    def test_eval_invariant_under_actions(self, dataset, rng):
        _, ds = dataset
        model = build_from_config(tiny_config(), 0)
        base = evaluate(model, ds.test)
        for _ in range(3):
            g = random_action(rng, reflect=True)
            assert evaluate(model, [moved_sample(s, g) for s in ds.test]) == pytest.approx(base, rel=1e-6)


def purity_expectation(membership, K):
    """Mean purity over every hard assignment of the nodes to ``K`` clusters."""
    vals = [cluster_purity(np.array(a), membership) for a in itertools.product(range(K), repeat=len(membership))]
    return float(np.mean(vals))


class TestPurity:
    def test_one_hot_match(self):
        assert cluster_purity([2, 2, 0, 0, 1], [0, 0, 1, 1, 2]) == 1.0

    def test_uniform_scores_tie_to_lowest(self):
        from eghn.pooling import hard_assignment

        a = hard_assignment(np.full((4, 2), 0.5))
        assert cluster_purity(a, [0, 0, 1, 1]) == 0.5

    def test_random_scores_match_expectation(self):
        from eghn.pooling import hard_assignment

        membership = np.repeat([0, 1, 2], 3)
        expected = purity_expectation(membership, 3)
        got = []
        for seed in range(100):
            r = np.random.default_rng(seed)
            S = r.dirichlet(np.ones(3), size=9)
            got.append(cluster_purity(hard_assignment(S), membership))
        assert abs(np.mean(got) - expected) < 0.1

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cluster_purity([0, 1], [0, 1, 1])

    def test_model_purity_in_range(self, dataset):
        root, ds = dataset
        p = pooling_purity(build_from_config(tiny_config(), 0), ds.test, load_meta(root, "test"))
        assert 1 / 3 <= p <= 1.0


class TestTraining:
    def test_deterministic(self, dataset):
        _, ds = dataset
        a, _ = train("eghn", tiny_config(), ds, seed=4)
        b, _ = train("eghn", tiny_config(), ds, seed=4)
        assert a.train_loss == b.train_loss and a.val_mse == b.val_mse and a.test_mse == b.test_mse

    def test_seeds_differ(self, dataset):
        _, ds = dataset
        a, _ = train("eghn", tiny_config(epochs=1), ds, seed=0)
        b, _ = train("eghn", tiny_config(epochs=1), ds, seed=1)
        assert a.train_loss != b.train_loss

    def test_loss_decreases(self, dataset):
        _, ds = dataset
        rec, _ = train("eghn", tiny_config(epochs=15, lr=3e-3), ds, seed=0)
        assert rec.train_loss[-1] < rec.train_loss[0]
        assert rec.best_val_mse == min(rec.val_mse)

    def test_early_stopping(self, dataset):
        _, ds = dataset
        rec, _ = train("egnn-baseline", tiny_config(epochs=30, patience=1, lr=0.5), ds, seed=0)
        assert rec.stopped_early and rec.epochs_run < 30

    def test_lambda_zero_is_pure_mse(self, rng):
        cfg = variant_config(tiny_config(), "no-connectivity")
        assert cfg.lam == 0.0
        Z_out, Z_gt = rng.normal(size=(6, 3, 2)), rng.normal(size=(6, 3, 2))
        S = rng.dirichlet(np.ones(3), size=6)
        loss = eghn_loss(Z_out, Z_gt, [S], [np.ones((6, 6))], cfg.lam).item()
        assert loss == pytest.approx(18 * position_mse(Z_out, Z_gt), rel=1e-14)

    def test_no_equivariance_control(self, dataset, rng):
        _, ds = dataset
        model = build_from_config(variant_config(tiny_config(), "no-equivariance"), 0)
        g = random_action(rng)
        base = evaluate(model, ds.test)
        assert abs(evaluate(model, [moved_sample(s, g) for s in ds.test]) - base) / base > 1e-2

    def test_nan_aborts(self, dataset):
        _, ds = dataset
        bad = [dataclasses.replace(ds.train[0], positions=np.full_like(ds.train[0].positions, np.nan))]
        with pytest.raises(NumericError):
            train("eghn", tiny_config(), Dataset(bad + ds.train[1:], ds.val, ds.test, ds.manifest))

    def test_linear_record(self, dataset):
        _, ds = dataset
        rec, model = train("linear", tiny_config(), ds)
        assert model is None and rec.test_mse == linear_mse(ds.test)

    def test_checkpoint_evaluation(self, dataset, tmp_path):
        _, ds = dataset
        path = tmp_path / "m.ckpt.json"
        rec, model = train("eghn", tiny_config(epochs=2), ds, checkpoint_path=path)
        mse, per_node = evaluate_checkpoint(path, ds.test)
        assert mse == rec.test_mse == evaluate(model, ds.test)
        assert len(per_node) == len(ds.test) and per_node[0].shape == (ds.test[0].num_nodes,)

    def test_checkpoint_shape_mismatch(self, dataset, tmp_path):
        _, ds = dataset
        cfg = tiny_config(node_feat_dim=2)
        path = tmp_path / "wide.ckpt.json"
        save_checkpoint(path, build_from_config(cfg, 0), {"config": cfg.to_dict(), "kind": "eghn", "seed": 0})
        with pytest.raises(ValueError):
            evaluate_checkpoint(path, ds.test)

    def test_run_record_round_trip(self, dataset, tmp_path):
        _, ds = dataset
        rec, _ = train("eghn", tiny_config(epochs=2), ds)
        rec.save(tmp_path / "r.json")
        assert RunRecord.load(tmp_path / "r.json") == rec
        d = rec.to_dict()
        d["schema_version"] = 2
        with pytest.raises(ValueError, match="schema_version"):
            RunRecord.from_dict(d)

    def test_ablation_k_sweep(self, dataset):
        _, ds = dataset
        out = run_ablation("K-sweep", tiny_config(epochs=1), ds, seeds=(0,), ks=[2, 3])
        assert set(out) == {"K=2", "K=3"}
        assert out["K=2"][0].config["clusters"] == [2]

    def test_unknown_ablation(self, dataset):
        with pytest.raises(ValueError):
            run_ablation("dropout", tiny_config(), dataset[1])


def test_one_sample_overfit(dataset):
    _, ds = dataset
    one = ds.train[:1]
    cfg = tiny_config(hidden=16, lr=3e-3, weight_decay=0.0, epochs=2000, patience=2000, batch_size=1)
    rec, model = train("eghn", cfg, Dataset(one, one, one, ds.manifest))
    assert rec.best_val_mse < 1e-4
    assert not math.isnan(rec.test_mse)
