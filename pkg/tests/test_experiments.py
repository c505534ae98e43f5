import csv

import numpy as np
import pytest

from otdro import experiments as ex
from otdro.experiments import (ConfigError, ExperimentConfig, Family, MetricsRow,
                               eval_oos_cvar, eval_oos_expected_loss, eval_oos_mean_loss,
                               gen_discrete_experiment, gen_gaussian_experiment,
                               gen_gmm_experiment, gen_linreg_experiment, make_train_config,
                               run_experiment, sensitivity_sweep, regression_model)
from otdro.problems import risk_coefficient
from otdro.transport import DiscreteDistribution, GaussianMoments


def quick(**kw):
    train = {"maxiter": 5, "step": 1e-3, **kw.pop("train", {})}
    return ExperimentConfig(trials=kw.pop("trials", 2), oos_samples=kw.pop("oos_samples", 2000),
                            train=make_train_config(train), **kw)


def test_gaussian_generator():
    a, b = gen_gaussian_experiment(4, 11), gen_gaussian_experiment(4, 11)
    np.testing.assert_array_equal(a.mean, b.mean)
    for s in range(20):
        g = gen_gaussian_experiment(3, s)
        assert np.all(np.abs(g.mean) <= 1.0)
        assert np.linalg.eigvalsh(g.cov).min() >= 1e-6 * (1 - 1e-9)


def test_discrete_generator():
    d = gen_discrete_experiment(3, 10, 0)
    assert d.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.abs(d.points) <= 1.0)
    first = np.array([gen_discrete_experiment(3, 10, s).weights[0] for s in range(10_000)])
    # Dirichlet(1,...,1) marginal: mean 1/n, variance (n-1)/(n^2 (n+1))
    sd = np.sqrt(9 / (100 * 11) / first.size)
    assert abs(first.mean() - 0.1) <= 3 * sd


def test_gmm_generator():
    g = gen_gmm_experiment(2, 3, 5)
    assert g.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert all(np.linalg.eigvalsh(c.cov).min() > 0 for c in g.components)
    draws = g.sample(100_000, np.random.default_rng(0))
    spread = np.sqrt(max(np.var(draws, axis=0)) / draws.shape[0])
    assert np.max(np.abs(draws.mean(axis=0) - g.mean)) <= 4 * spread


def test_linreg_generator():
    m = gen_linreg_experiment(3)
    assert -10 <= m.w <= 10 and 500 <= m.sigma ** 2 <= 1000
    single = gen_linreg_experiment(single=True)
    assert (single.w, single.sigma) == (1.0, 10.0)
    xy = single.sample(200_000, np.random.default_rng(1))
    assert np.all(np.abs(xy[:, 0]) <= 10)
    assert np.var(xy[:, 1] - xy[:, 0]) == pytest.approx(100.0, rel=0.02)


def test_regression_model_fixture():
    assert len(ex.REGRESSION_MODELS) == 10
    m = regression_model(0)
    assert m.w == -6.7805 and m.sigma ** 2 == pytest.approx(564.285)


def test_gaussian_cvar_closed_form():
    mom = GaussianMoments([0.2, -0.1], [[0.04, 0.01], [0.01, 0.09]])
    w = np.array([0.6, 0.4])
    exact = -w @ mom.mean + risk_coefficient(0.05) * np.sqrt(w @ mom.cov @ w)
    assert eval_oos_cvar(w, mom, 0.05, 10 ** 7, 0) == pytest.approx(exact, rel=0.01)


def test_cvar_limits():
    point = DiscreteDistribution([[0.3, 0.5]], [1.0])
    assert eval_oos_cvar([0.5, 0.5], point, 0.05, 1000) == pytest.approx(-0.4)
    mom = GaussianMoments([0.2], [[1.0]])
    assert eval_oos_mean_loss([1.0], mom, 10 ** 6, 3) == pytest.approx(-0.2, abs=5e-3)
    with pytest.raises(ValueError):
        eval_oos_cvar([1.0], mom, 0.0)


def test_expected_loss_oracles():
    m = gen_linreg_experiment(single=True)
    n = 10 ** 7
    assert eval_oos_expected_loss([1.0], m, "abs", n, 0) == pytest.approx(
        10 * np.sqrt(2 / np.pi), rel=0.01)
    assert eval_oos_expected_loss([1.0], m, "sq", n, 0) == pytest.approx(100.0, rel=0.01)
    noiseless = ex.LinRegModel(2.0, 0.0)
    assert eval_oos_expected_loss([2.0], noiseless, "abs", 1000) == 0.0
    with pytest.raises(ValueError):
        eval_oos_expected_loss([1.0], m, "huber", 10)


def test_oos_standard_error_scaling():
    mom = GaussianMoments([0.0], [[1.0]])
    sd = [np.std([eval_oos_mean_loss([1.0], mom, n, s) for s in range(30)])
          for n in (2000, 8000)]
    # quadrupling the sample size should halve the error
    assert 1.4 <= sd[0] / sd[1] <= 2.9


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(family="nope")
    with pytest.raises(ConfigError):
        ExperimentConfig(J=0)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"family": "portfolio_gaussian", "colour": 1})
    with pytest.raises(ConfigError):
        make_train_config({"lam": 1})
    cfg = ExperimentConfig.from_dict({"family": "regression_sq", "n_b": 7,
                                      "train": {"maxiter": 3}})
    assert cfg.train.n_b == 7 and cfg.train.maxiter == 3 and cfg.is_regression


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = quick(family=Family.PORTFOLIO_GAUSSIAN, k=2, J=15)
    return cfg, out, run_experiment(cfg, out)


def test_run_experiment_outputs(small_run):
    cfg, out, res = small_run
    assert len(res.rows) == cfg.trials and not res.failures
    for r in res.rows:
        values = [getattr(r, h) for h in MetricsRow.HEADER]
        assert all(np.isfinite(v) for v in values)
        assert r.rel_f == pytest.approx((r.f0 - r.f_star) / abs(r.f0))
    assert (out / "trace_0.csv").exists() and (out / "trace_1.csv").exists()


def test_metrics_csv_roundtrip(small_run):
    _, out, res = small_run
    with open(out / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == MetricsRow.HEADER
    for written, row in zip(rows[1:], res.rows):
        for h, text in zip(MetricsRow.HEADER, written):
            assert float(text) == float(getattr(row, h))


def test_baseline_metric_is_unlearned(small_run):
    cfg, _, res = small_run
    truth, samples = ex.trial_data(cfg, 0)
    base = ex.evaluate_theta(cfg, np.eye(cfg.k), 0)
    assert base["worst_case"] == pytest.approx(res.rows[0].f0, rel=1e-9)
    assert base["out_of_sample"] == pytest.approx(res.rows[0].l0, rel=1e-12)
    assert base["normalized_distance"] == pytest.approx(res.rows[0].dist0, rel=1e-9)


def test_run_is_deterministic(small_run, tmp_path):
    cfg, out, _ = small_run
    run_experiment(cfg, tmp_path)
    assert (tmp_path / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()


@pytest.mark.parametrize("family", [Family.PORTFOLIO_DISCRETE, Family.PORTFOLIO_GMM,
                                    Family.REGRESSION_ABS, Family.REGRESSION_SQ])
def test_other_families_run(family):
    cfg = quick(family=family, k=2 if family.value.startswith("portfolio") else 1, J=12,
                trials=1, distance_replication=5)
    res = run_experiment(cfg)
    assert not res.failures
    assert np.isfinite(res.rows[0].l_star) and res.rows[0].dist_star >= 0


def test_failures_recorded(monkeypatch, tmp_path):
    real = ex.train

    def flaky(bid, data, tcfg):
        if flaky.calls == 1:
            flaky.calls += 1
            raise RuntimeError("boom")
        flaky.calls += 1
        return real(bid, data, tcfg)
    flaky.calls = 0
    monkeypatch.setattr(ex, "train", flaky)
    res = run_experiment(quick(family=Family.PORTFOLIO_GAUSSIAN, k=2, J=10, trials=3), tmp_path)
    assert sorted(r.trial for r in res.rows) == [0, 2]
    assert "boom" in res.failures[1]
    assert "boom" in (tmp_path / "failures.csv").read_text()


def test_sensitivity_sweep(tmp_path):
    cfg = quick(family=Family.PORTFOLIO_GAUSSIAN, k=2, J=10, trials=2)
    improve, viol, fails = sensitivity_sweep(cfg, [0.0, 10.0], [100.0], tmp_path)
    assert improve.shape == viol.shape == (2, 1)
    assert np.all(np.isfinite(improve)) and not fails
    rows = list(csv.reader(open(tmp_path / "sensitivity_violation.csv")))
    assert rows[0] == ["lam_p", "100"] and len(rows) == 3
    again, _, _ = sensitivity_sweep(cfg, [0.0, 10.0], [100.0])
    np.testing.assert_array_equal(again, improve)


def test_repro_plan_targets():
    for name in ex.REPRO_NAMES:
        plan = ex.repro_plan(name, 1, trials=1, maxiter=2)
        assert plan and all(c.train.maxiter == 2 and c.trials == 1 for _, c in plan)
    with pytest.raises(ConfigError):
        ex.repro_plan("fig9", 0)
    fig2 = dict(ex.repro_plan("fig2", 0))
    assert fig2["lam0"].train.lam_p == 0.0 and fig2["lam10"].train.lam_p == 10.0
