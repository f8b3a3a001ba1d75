import math

import numpy as np
import pytest

from fusioncurve.dataset import ArmLabel
from fusioncurve.eif import eif_values, plugin_mediation
from fusioncurve.estimator import EstimatorConfig, estimate_curve
from fusioncurve.nuisance import fit_bundle, make_folds
from fusioncurve.simlab import (DgpConfig, SimulationSummary, dgp_spec, generate,
                                generate_two_arm, oracle_nuisances, oracle_truth,
                                run_study, two_arm_spec)

# independently simulated reference values for the default design at c=0
# (4e6 draws from the closed conditional law; mc error ~2.5e-4)
TRUTH_INV_5 = 0.48329
TRUTH_APP_5 = 0.47916
TRUTH_J2_C1 = 0.39535
TRUTH_J2_C2 = 0.25388
FRAC_EVENT = 0.402
FRAC_RANDOM_CENS = 0.146
FRAC_ADMIN = 0.451


@pytest.fixture(scope="module")
def oracle_run():
    cfg = DgpConfig(c=0.0, n_h=20000, seed=9)
    ds = generate(cfg)
    bundle = oracle_nuisances(cfg)
    vals = eif_values(bundle, ds, None, (ArmLabel.INVESTIGATIONAL,), np.array([5.0]))
    return cfg, ds, bundle, vals[:, 0, 0, 0]


def test_generate_composition_matches_design():
    ds = generate(DgpConfig(c=0.0, n_h=60000, seed=5))
    assert ds.n == 75000 and ds.d == 6 and ds.J == 1
    assert ds.horizon == 5.5
    h = ds.gamma == 0
    tt, dd = ds.t_obs[h], ds.delta[h]
    se = math.sqrt(0.25 / 60000)
    assert abs((dd == 1).mean() - FRAC_EVENT) < 4 * se
    assert abs(((dd == 0) & (tt < 5.5)).mean() - FRAC_RANDOM_CENS) < 4 * se
    assert abs(((dd == 0) & (tt == 5.5)).mean() - FRAC_ADMIN) < 4 * se
    # bridging rows are marker-only; the historical trial has no 1' arm
    assert np.all(np.isnan(ds.t_obs[ds.gamma == 1]))
    assert set(np.unique(ds.arm[h])) == {0, 1}
    assert set(np.unique(ds.arm[ds.gamma == 1])) == {1, 2}


def test_generate_marker_and_covariate_moments():
    ds = generate(DgpConfig(c=0.25, n_h=60000, seed=7))
    mu = 0.25 * np.array([1, 1, 1, 0.8, 0.8, 0.8])
    assert np.allclose(ds.x.mean(axis=0), mu, atol=0.02)
    assert np.allclose(ds.x.std(axis=0), math.sqrt(0.5), atol=0.02)
    b2 = (ds.gamma == 1) & (ds.arm == 2)
    b1 = (ds.gamma == 1) & (ds.arm == 1)
    # investigational arm doubles the arm-specific marker shift
    mean2 = 4 + 1.5 * mu[0] - mu[2] + 1.5 * mu[5] + 2 * (0.5 * mu[1] + 0.5 * mu[2] + 0.5 * mu[3] - mu[5])
    mean1 = 4 + 1.5 * mu[0] - mu[2] + 1.5 * mu[5] + (0.5 * mu[1] + 0.5 * mu[2] + 0.5 * mu[3] - mu[5])
    assert abs(ds.s[b2, 0].mean() - mean2) < 0.08
    assert abs(ds.s[b1, 0].mean() - mean1) < 0.08


def test_generate_deterministic_and_seed_sensitive():
    a = generate(DgpConfig(n_h=400, seed=3))
    b = generate(DgpConfig(n_h=400, seed=3))
    c = generate(DgpConfig(n_h=400, seed=4))
    assert np.array_equal(a.x, b.x) and np.array_equal(a.t_obs, b.t_obs, equal_nan=True)
    assert not np.array_equal(a.x, c.x)


def test_config_defaults_and_validation():
    cfg = DgpConfig(n_h=1000)
    assert cfg.n_bridge == 250
    assert cfg.kappa == 0.2
    assert DgpConfig(n_h=1000, n_b=100).n_bridge == 100
    with pytest.raises(ValueError):
        DgpConfig(c=-0.1)
    with pytest.raises(ValueError):
        DgpConfig(n_h=4)
    with pytest.raises(ValueError):
        DgpConfig(J=0)


def test_truth_matches_reference_values():
    cfg = DgpConfig(c=0.0, n_h=1000)
    tr = oracle_truth(cfg, a=2, t=5.0, draws=10 ** 6, seed=1)
    assert abs(tr.value - TRUTH_INV_5) < 3 * math.sqrt(tr.mc_se ** 2 + 2.5e-4 ** 2)
    tr1 = oracle_truth(cfg, a=1, t=5.0, draws=10 ** 6, seed=2)
    assert abs(tr1.value - TRUTH_APP_5) < 3 * math.sqrt(tr1.mc_se ** 2 + 2.5e-4 ** 2)


def test_truth_competing_causes():
    cfg = DgpConfig(c=0.0, n_h=1000, J=2)
    t1 = oracle_truth(cfg, a=2, t=5.0, j=1, draws=10 ** 6, seed=4)
    t2 = oracle_truth(cfg, a=2, t=5.0, j=2, draws=10 ** 6, seed=4)
    tall = oracle_truth(cfg, a=2, t=5.0, draws=10 ** 6, seed=4)
    assert abs(t1.value - TRUTH_J2_C1) < 3 * math.sqrt(t1.mc_se ** 2 + 2.5e-4 ** 2)
    assert abs(t2.value - TRUTH_J2_C2) < 3 * math.sqrt(t2.mc_se ** 2 + 2.5e-4 ** 2)
    # same seed shares the draws, so causes partition the all-cause count
    assert t1.value + t2.value == pytest.approx(tall.value, abs=1e-12)


def test_truth_grid_monotone_and_zero_at_origin():
    cfg = DgpConfig(c=0.05, n_h=1000)
    grid = np.array([0.0, 0.5, 1.0, 2.0, 3.5, 5.0])
    tr = oracle_truth(cfg, a=2, t=grid, draws=10 ** 5, seed=6)
    assert tr.value.shape == grid.shape
    assert tr.value[0] == 0.0
    assert np.all(np.diff(tr.value) >= 0.0)


def test_truth_validation():
    cfg = DgpConfig(n_h=1000)
    with pytest.raises(ValueError):
        oracle_truth(cfg, a=2, t=5.0, draws=10 ** 4)
    with pytest.raises(ValueError):
        oracle_truth(cfg, a=0, t=5.0)
    with pytest.raises(ValueError):
        oracle_truth(cfg, a=2, t=5.0, j=2)


def test_oracle_bundle_design_constants(oracle_run):
    cfg, ds, bundle, _ = oracle_run
    x = ds.x[:5]
    assert np.allclose(bundle.p_gamma(x), cfg.kappa)
    assert np.allclose(bundle.p_arm_bridging(x, 2), 0.5)
    assert np.allclose(bundle.p_hist_approved(x), (1 - cfg.kappa) * 0.5)
    # log-density at the conditional mean is the Gaussian normalizing constant
    mean = bundle._marker_mean(x, 2, 1)
    lp = bundle.marker_logpdf(x, mean, 2, 1)
    assert np.allclose(lp, -0.5 * math.log(2 * math.pi))


def test_oracle_bundle_hazard_surfaces(oracle_run):
    _, ds, bundle, _ = oracle_run
    x, s = ds.x[:8], ds.s[:8]
    cum = bundle.event_cum_at(x, s, np.array([2.0, 5.0]))
    row = bundle.event_cum_rowwise(x, s, np.full(8, 2.0))
    assert np.allclose(cum[:, 0], row)
    assert np.all(cum[:, 1] > cum[:, 0])
    jumps = bundle.event_jumps_at_grid(x, s)
    total = sum(j.sum(axis=1) for j in jumps.values())
    assert np.allclose(total, bundle.event_cum_rowwise(x, s, np.full(8, 5.5)), rtol=1e-10)
    assert np.allclose(bundle.cens_surv_at(x, s, np.array([0.0]))[:, 0], 1.0)
    assert np.all(bundle.cens_surv_rowwise(x, s, np.full(8, 3.0)) < 1.0)


def test_oracle_bundle_integration_nodes(oracle_run):
    _, ds, bundle, _ = oracle_run
    x = ds.x[:6]
    nodes, w = bundle.marker_integration_nodes(x, 2)
    assert nodes.shape == (32, 6, 1)
    assert w.sum() == pytest.approx(1.0)
    # weighted node mean recovers the conditional marker mean
    mean = (nodes * w[:, None, None]).sum(axis=0)
    assert np.allclose(mean, bundle._marker_mean(x, 2, 1), atol=1e-10)

    b2 = oracle_nuisances(DgpConfig(n_h=1000, J=2))
    n2a, w2 = b2.marker_integration_nodes(x, 2)
    n2b, _ = b2.marker_integration_nodes(x, 2)
    assert n2a.shape == (256, 6, 2)
    assert np.array_equal(n2a, n2b)
    assert np.allclose(w2, 1.0 / 256)


def test_oracle_eif_is_unbiased(oracle_run):
    _, ds, _, phi = oracle_run
    se = phi.std(ddof=1) / math.sqrt(ds.n)
    assert abs(phi.mean() - TRUTH_INV_5) < 3 * se


def test_oracle_mode_estimate_agrees_with_plugin(oracle_run):
    cfg, ds, bundle, phi = oracle_run
    ec = EstimatorConfig(times=[5.0], times_only=True,
                         arms=(ArmLabel.INVESTIGATIONAL,), bundle=bundle,
                         band_draws=0)
    curve, _ = estimate_curve(ds, ec)
    est = float(curve.estimate[0, 0, 0])
    assert est == pytest.approx(phi.mean(), abs=1e-12)
    assert curve.meta["mode"] == "oracle"
    pm = float(plugin_mediation(bundle, ds, 2, 5.0))
    assert abs(est - pm) < 3 * float(curve.se[0, 0, 0])


def test_dgp_spec_recovers_true_coefficients():
    ds = generate(DgpConfig(c=0.0, n_h=20000, seed=13))
    folds = make_folds(ds, 2, seed=0)
    bundle = fit_bundle(ds, folds, 1, dgp_spec(1))
    # event features: x0, x4, x1*s, x3*s, a*x1, a*x2, a*x5
    true_ev = np.array([0.5, -0.5, 0.39, 0.12, 0.2, 0.6, -1.2])
    assert np.allclose(bundle.event_fits[1].coef, true_ev, atol=0.1)
    true_cens = np.array([-0.4, 0.1])
    assert np.allclose(bundle.cens_fit.coef, true_cens, atol=0.15)


def test_run_study_summary_well_formed(tmp_path):
    summ = run_study([(500, 0.0)], reps=6, seed=5, truth_draws=10 ** 5)
    row = summ.rows[0]
    assert row["n_used"] + row["n_failed"] == 6
    assert 0.0 <= row["coverage"] <= 1.0
    assert row["mean"] == pytest.approx(row["bias"] + row["truth"])
    assert row["rmse"] >= abs(row["bias"])

    out = tmp_path / "table.csv"
    summ.write_csv(out)
    lines = out.read_text().splitlines()
    assert lines[0] == "n_h,c,mean,median,bias,pct_bias,rmse,avg_se,coverage"
    assert len(lines) == 2
    assert float(lines[1].split(",")[2]) == row["mean"]

    blob = summ.to_json_dict()
    assert blob["schema_version"] == 1
    assert blob["scale"] == "survival"
    assert blob["rows"][0]["coverage"] == row["coverage"]


def test_run_study_reproducible_and_thread_invariant():
    a = run_study([(500, 0.0)], reps=4, seed=11, truth_draws=10 ** 5)
    b = run_study([(500, 0.0)], reps=4, seed=11, truth_draws=10 ** 5)
    c = run_study([(500, 0.0)], reps=4, seed=11, truth_draws=10 ** 5, threads=2)
    assert a.rows[0] == b.rows[0] == c.rows[0]
    d = run_study([(500, 0.0)], reps=4, seed=12, truth_draws=10 ** 5)
    assert d.rows[0]["mean"] != a.rows[0]["mean"]


def test_run_study_validation():
    with pytest.raises(ValueError):
        run_study([(500, 0.0)], reps=0)


def test_two_arm_generator():
    recs = generate_two_arm(3000, seed=8)
    assert len(recs) == 3000
    arms = np.array([int(r.a) for r in recs])
    assert set(arms) == {1, 2}
    assert all(r.t_obs is not None and r.delta is not None for r in recs)
    again = generate_two_arm(3000, seed=8)
    assert [r.t_obs for r in again] == [r.t_obs for r in recs]

    # a positive direct effect raises investigational-arm event rates
    null = generate_two_arm(6000, seed=9)
    alt = generate_two_arm(6000, seed=9, direct_effect=1.0)
    def event_frac(rs, a):
        sel = [r for r in rs if int(r.a) == a]
        return np.mean([r.delta for r in sel])
    assert event_frac(alt, 2) > event_frac(null, 2) + 0.1
    assert event_frac(alt, 1) == pytest.approx(event_frac(null, 1), abs=0.02)


def test_two_arm_spec_shape():
    spec = two_arm_spec()
    assert spec.event_features.n_terms == 7
    assert spec.cens_features.n_terms == 2
    assert spec.gamma_x_cols == () and spec.arm_x_cols == ()
