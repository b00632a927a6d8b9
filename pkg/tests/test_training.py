import math

import numpy as np
import pytest

from conftest import finite_difference, naive_an_full_loss, rel_err
from hybridsdm import tensor as T
from hybridsdm.data import Blob, HalfPlane, ObservationSet, raster_from_region, sample_region
from hybridsdm.errors import DimensionError, DomainError, ParameterError
from hybridsdm.training import (AdamState, EvalSpec, MetricsLog, TrainConfig, adam_step, an_full_loss,
                                apply_observation_cap, grid_configs, sample_pseudoabsences, sweep,
                                train, train_model)

TINY = dict(features=16, features_per_level=4, r_min=4, r_max=16, table_size=2 ** 10, batch_size=64)


class TestLoss:
    def test_all_half(self):
        assert abs(an_full_loss([[0.5]], [0], [[0.5]], 1.0).item() - 2 * math.log(2)) < 1e-12
        assert abs(an_full_loss([[0.5]], [0], [[0.5]], 1.0).item() - 1.386294) < 1e-6

    def test_two_species_example(self):
        got = an_full_loss([[0.8, 0.1]], [0], [[0.2, 0.3]], 2.0).item()
        want = -0.5 * (2 * math.log(0.8) + math.log(0.9) + math.log(0.8) + math.log(0.7))
        assert abs(got - want) < 1e-12

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_double_loop(self, seed):
        rng = np.random.default_rng(seed)
        n, s = rng.integers(1, 21), rng.integers(1, 11)
        lam = [1.0, 10.0, 2048.0][seed % 3]
        p, q = rng.uniform(0.01, 0.99, (n, s)), rng.uniform(0.01, 0.99, (n, s))
        sp = rng.integers(0, s, n)
        assert abs(an_full_loss(p, sp, q, lam).item() - naive_an_full_loss(p, sp, q, lam)) < 1e-10

    def test_gradients(self, rng):
        p = T.Tensor(rng.uniform(0.05, 0.95, (5, 3)), True)
        q = T.Tensor(rng.uniform(0.05, 0.95, (5, 3)), True)
        sp = rng.integers(0, 3, 5)
        T.backward(an_full_loss(p, sp, q, 7.0))
        for t in (p, q):
            fd = finite_difference(lambda: an_full_loss(p.values, sp, q.values, 7.0).item(), t,
                                   np.arange(15))
            assert rel_err(t.grad.ravel(), fd) < 1e-7

    def test_doubling_lambda_doubles_presence_gradient(self, rng):
        def presence_grad(lam):
            p = T.Tensor(rng.uniform(0.1, 0.9, (4, 3)), True) if lam == 1 else p_saved
            T.backward(an_full_loss(p, sp, q, lam))
            return p, p.grad[np.arange(4), sp]

        sp = np.array([0, 2, 1, 0])
        q = rng.uniform(0.1, 0.9, (4, 3))
        p_saved, g1 = presence_grad(1)
        p_saved.zero_grad()
        _, g2 = presence_grad(2)
        np.testing.assert_allclose(g2, 2 * g1, rtol=1e-14)

    @pytest.mark.parametrize("p", [0.0, 1.0, np.nan])
    def test_rejects_boundary_probabilities(self, p):
        with pytest.raises(DomainError):
            an_full_loss([[p]], [0], [[0.5]], 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            an_full_loss(np.full((2, 2), 0.5), [0, 1], np.full((2, 3), 0.5), 1.0)


class TestPseudoabsences:
    def test_range_and_shape(self, rng):
        z = sample_pseudoabsences(1000, rng).values
        assert z.shape == (1000, 2) and np.abs(z).max() <= 1

    def test_deterministic(self):
        a = sample_pseudoabsences(50, np.random.default_rng(3)).values
        b = sample_pseudoabsences(50, np.random.default_rng(3)).values
        np.testing.assert_array_equal(a, b)

    def test_uniform_moments(self):
        z = sample_pseudoabsences(10 ** 6, np.random.default_rng(0)).values
        assert np.all(np.abs(z.mean(axis=0)) < 0.005)
        assert np.all(np.abs(z.var(axis=0) - 1 / 3) < 0.005)

    def test_rejects_zero(self, rng):
        with pytest.raises(ParameterError):
            sample_pseudoabsences(0, rng)


def _obs(counts, seed=0):
    rng = np.random.default_rng(seed)
    species = np.concatenate([np.full(c, k) for k, c in enumerate(counts)])
    return ObservationSet(rng.uniform(-1, 1, (len(species), 2)), species,
                          {f"sp{k}": k for k in range(len(counts))})


class TestObservationCap:
    def test_large_cap_unchanged(self):
        data = _obs([5, 3, 7])
        assert apply_observation_cap(data, 7, np.random.default_rng(0)) == data

    def test_small_species_kept(self):
        capped = apply_observation_cap(_obs([3, 100]), 10, np.random.default_rng(0))
        assert capped.counts().tolist() == [3, 10]

    def test_reproducible(self):
        data = _obs([100])
        a = apply_observation_cap(data, 10, np.random.default_rng(5))
        b = apply_observation_cap(data, 10, np.random.default_rng(5))
        assert a == b and len(a) == 10

    def test_empty_species_stays_empty(self):
        data = ObservationSet(np.zeros((4, 2)), [0, 0, 2, 2], {"a": 0, "b": 1, "c": 2})
        assert apply_observation_cap(data, 1, np.random.default_rng(0)).counts().tolist() == [1, 0, 1]

    def test_rejects_zero(self):
        with pytest.raises(ParameterError):
            apply_observation_cap(_obs([3]), 0, np.random.default_rng(0))


class TestAdam:
    def test_zero_gradient_no_move(self):
        w = T.Tensor(np.array([[1.5, -2.0]]), True)
        state = AdamState.for_params([w])
        for _ in range(5):
            adam_step([w], [np.zeros((1, 2))], state, 0.1)
        np.testing.assert_array_equal(w.values, [[1.5, -2.0]])

    def test_first_step_is_lr(self):
        w = T.Tensor(np.array([[1.0, 1.0]]), True)
        adam_step([w], [np.array([[3.0, -0.01]])], AdamState.for_params([w]), 0.01)
        np.testing.assert_allclose(w.values, [[0.99, 1.01]], atol=1e-8)

    def test_quadratic_converges(self):
        w = T.Tensor(np.array([[1.0]]), True)
        state = AdamState.for_params([w])
        for _ in range(200):
            adam_step([w], [2 * w.values], state, 0.1)
        assert abs(w.values[0, 0]) < 0.1

    def test_shape_mismatch(self):
        w = T.Tensor(np.zeros((2, 2)), True)
        with pytest.raises(DimensionError):
            adam_step([w], [np.zeros((2, 3))], AdamState.for_params([w]), 0.1)


class TestConfig:
    def test_round_trip(self):
        c = TrainConfig(epochs=3, obs_cap=10)
        assert TrainConfig.from_dict(c.to_dict()) == c

    def test_unknown_key(self):
        with pytest.raises(ParameterError, match="bogus"):
            TrainConfig.from_dict({"bogus": 1})

    def test_hash_ignores_seed(self):
        assert TrainConfig(seed=1).config_hash() == TrainConfig(seed=2).config_hash()
        assert TrainConfig(learning_rate=0.1).config_hash() != TrainConfig().config_hash()

    @pytest.mark.parametrize("kw", [dict(epochs=0), dict(learning_rate=0), dict(batch_size=0),
                                    dict(dropout_p=1.0), dict(obs_cap=0), dict(implicitness=0.3)])
    def test_validate(self, kw):
        with pytest.raises(ParameterError):
            TrainConfig(**kw).validate()


class TestTrain:
    def test_first_loss_at_zero_init(self):
        data = ObservationSet(np.array([[0.1, 0.2]]), [0], {"a": 0})
        cfg = TrainConfig(epochs=1, lambda_pos=1.0, **TINY)
        _, hist = train_model(cfg, data)
        assert abs(hist[0]["mean_loss"] - 2 * math.log(2)) < 1e-12

    def test_deterministic(self):
        data = _obs([40, 40, 40])
        cfg = TrainConfig(epochs=2, **TINY)
        a, b = train(cfg, data), train(cfg, data)
        assert a.history == b.history
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_seed_changes_result(self):
        data = _obs([40, 40])
        a = train(TrainConfig(epochs=1, seed=0, **TINY), data)
        b = train(TrainConfig(epochs=1, seed=1, **TINY), data)
        assert a.history != b.history

    def test_loss_decreases(self):
        rng = np.random.default_rng(0)
        pts = np.concatenate([rng.uniform(0.2, 0.8, (200, 2)), rng.uniform(-0.8, -0.2, (200, 2))])
        data = ObservationSet(pts, np.repeat([0, 1], 200), {"a": 0, "b": 1})
        _, hist = train_model(TrainConfig(epochs=8, learning_rate=1e-2, lambda_pos=16.0, **TINY), data)
        assert hist[-1]["mean_loss"] < hist[0]["mean_loss"]

    def test_metrics_log(self, tmp_path):
        data = _obs([20])
        log = MetricsLog(tmp_path / "m.tsv")
        train_model(TrainConfig(epochs=3, **TINY), data, log)
        rows = MetricsLog.read(tmp_path / "m.tsv")
        assert [r["epoch"] for r in rows] == [1, 2, 3]
        assert (tmp_path / "m.tsv").read_text().splitlines()[0] == "epoch\tmean_loss\tseconds"

    def test_obs_cap_applied(self):
        data = _obs([200, 5])
        model, _ = train_model(TrainConfig(epochs=1, obs_cap=10, **TINY), data)
        assert model.vocab == ["sp0", "sp1"]

    def test_empty_data(self):
        with pytest.raises(ParameterError):
            train_model(TrainConfig(**TINY), ObservationSet(np.zeros((0, 2)), [], {"a": 0}))


def _sweep_fixture():
    regions = [Blob((0.4, 0.4), 0.25), HalfPlane((1.0, 0.0), 0.3)]
    rng = np.random.default_rng(0)
    pts = [sample_region(r, 60, rng) for r in regions]
    data = ObservationSet(np.concatenate(pts), np.repeat([0, 1], 60), {"a": 0, "b": 1})
    rasters = [raster_from_region(n, r, (20, 20)) for n, r in zip("ab", regions)]
    return data, EvalSpec(rasters, {"first": ["a"]})


class TestSweep:
    def test_rows_and_best(self, tmp_path):
        data, spec = _sweep_fixture()
        base = TrainConfig(epochs=2, **{**TINY, "features_per_level": 4})
        configs = grid_configs(base, implicitness=(0.0, 0.5), learning_rates=(1e-2, 1e-4), seeds=(0, 1))
        res = sweep(configs, data, spec)
        maps = res.values("map")
        assert len(maps) == 8
        assert {r["seed"] for r in maps} == {0, 1}
        assert len(res.values("map_first")) == 8
        best = res.best()
        assert len(best) == 2
        for b in best:
            cand = {}
            for r in maps:
                if r["implicitness"] == b["implicitness"]:
                    cand.setdefault(r["lr"], []).append(r["value"])
            assert b["best_lr"] == max(cand, key=lambda lr: np.mean(cand[lr]))
        res.write_csv(tmp_path / "s.csv")
        header = (tmp_path / "s.csv").read_text().splitlines()[0]
        assert header == "implicitness,lr,obs_cap,seed,config_hash,metric,value"

    def test_failed_run_recorded(self):
        data, spec = _sweep_fixture()
        data.coords[0] = [1.5, 0.0]  # outside the domain, so training raises
        res = sweep([TrainConfig(epochs=1, **TINY)], data, spec)
        assert res.rows[0]["metric"] == "error"

    def test_empty_sweep(self):
        data, spec = _sweep_fixture()
        with pytest.raises(ParameterError):
            sweep([], data, spec)
