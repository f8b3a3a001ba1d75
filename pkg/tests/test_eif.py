import numpy as np
import pytest

from fusioncurve.dataset import FusedDataset, SubjectRecord, TrialIndicator, ArmLabel
from fusioncurve.errors import (
    CauseOutOfRange,
    FoldMismatch,
    GridBeyondHorizon,
    LowInformation,
    NoArmRows,
    NoBridgingRows,
    NoHistoricalApprovedRows,
    PositivityViolated,
)
from fusioncurve.eif import (
    DiscreteToyModel,
    EifMatrix,
    Row,
    _columns,
    _hist_weight,
    _phi_censored_cols,
    _phi_competing_cols,
    _phi_complete_cols,
    _row_cols,
    check_sum_to_allcause,
    eif_censored_row,
    eif_competing_row,
    eif_complete_rows,
    eif_values,
    gateaux_check,
    new_tally,
    plugin_mediation,
    plugin_outcome,
    plugin_weighting,
    time_grid,
    toy_no_censoring,
    toy_psi,
    toy_two_cause,
    toy_with_censoring,
)
from fusioncurve.nuisance import SurvivalFit, SurvivalKind, NuisanceBundle, \
    default_spec, fit_bundle, fspec, make_folds
from tests.conftest import synth_records


def _build(recs, n_causes=1):
    tmax = max(r.t_obs for r in recs if r.t_obs is not None)
    return FusedDataset(recs, horizon=tmax, n_causes=n_causes)


def _fitted(ds, J=1, seed=3):
    folds = make_folds(ds, 2, seed=seed)
    return fit_bundle(ds, folds, 1, default_spec(ds.d, J))


# --- toy models and the pathwise-derivative certification -------------------
def test_toy_tables_are_probability_distributions():
    for toy in (toy_no_censoring(), toy_with_censoring(), toy_two_cause()):
        tab = toy.joint_table()
        assert abs(sum(tab.values()) - 1.0) < 1e-12
        assert all(p > 0 for p in tab.values())
        toy.check_positivity()


def test_toy_functional_matches_frozen_values():
    assert toy_psi(toy_no_censoring(), 2, 2.0) == pytest.approx(
        0.758949229827, abs=1e-9)
    assert toy_psi(toy_with_censoring(), 2, 2.0) == pytest.approx(
        0.758949229827, abs=1e-9)
    assert toy_psi(toy_two_cause(), 2, 2.0, 1) == pytest.approx(
        0.443565610149, abs=1e-9)
    assert toy_psi(toy_two_cause(), 2, 2.0, 2) == pytest.approx(
        0.298987807965, abs=1e-9)
    # cause-specific risks add up to the all-cause risk
    c = toy_two_cause()
    assert toy_psi(c, 2, 2.0, 1) + toy_psi(c, 2, 2.0, 2) == pytest.approx(
        toy_psi(c, 2, 2.0), abs=1e-12)


def test_gateaux_uncensored_toy():
    assert gateaux_check(toy_no_censoring(), 2, 2.0) < 1e-6


def test_gateaux_censored_toy():
    assert gateaux_check(toy_with_censoring(), 2, 2.0) < 1e-6


def test_gateaux_two_cause_toy():
    assert gateaux_check(toy_two_cause(), 2, 2.0, cause=1) < 1e-6
    assert gateaux_check(toy_two_cause(), 2, 2.0, cause=2) < 1e-6


def _centered_at(toy, o, a, t, cause=None):
    row = Row((float(o[1]),), int(o[2]), 1 if o[0] == "b" else 0,
              (float(o[3]),),
              None if o[0] == "b" else float(o[4]),
              None if o[0] == "b" else int(o[5]))
    bundle = toy.bundle()
    psi0 = toy_psi(toy, a, t, cause)
    if cause is not None:
        raw = eif_competing_row(bundle, row, a, t, cause)
        return raw - (1.0 - row.gamma / toy.p_gamma) - psi0
    if toy.censored:
        raw = eif_censored_row(bundle, row, a, t)
        return raw - (1.0 - row.gamma / toy.p_gamma) - psi0
    raw = float(_phi_complete_cols(bundle, _row_cols(row), a,
                                   np.asarray([t]))[0, 0])
    return raw - psi0


def test_centered_values_match_frozen_derivative_spots():
    # numeric pathwise derivatives frozen from an independent enumeration
    A, B, C = toy_no_censoring(), toy_with_censoring(), toy_two_cause()
    spots = [
        (A, ("h", 1, 1, 2, 1.0, 1), None, 0.062093595802),
        (A, ("h", 0, 0, 0, 3.0, 1), None, -0.758949229828),
        (A, ("b", 1, 2, 0), None, 1.914431432513),
        (A, ("b", 0, 1, 2), None, 1.761042805485),
        (B, ("h", 1, 1, 2, 2.0, 1), None, 1.155019927569),
        (B, ("h", 0, 1, 1, 1.5, 0), None, -1.107572512646),
        (B, ("b", 1, 2, 1), None, 1.796220645187),
        (C, ("h", 1, 1, 2, 2.0, 1), 1, 3.341848206029),
        (C, ("h", 0, 1, 1, 2.0, 2), 1, -2.027014360031),
        (C, ("h", 1, 1, 0, 1.5, 0), 1, -0.984969201753),
        (C, ("b", 1, 2, 1), 1, 1.064131944651),
        (C, ("b", 0, 1, 2), 1, 1.014337747439),
        (C, ("h", 1, 1, 2, 2.0, 1), 2, -2.073958220361),
        (C, ("h", 0, 1, 1, 2.0, 2), 2, 2.481146233295),
    ]
    for toy, o, cause, want in spots:
        assert _centered_at(toy, o, 2, 2.0, cause) == pytest.approx(
            want, abs=1e-6)


def test_gateaux_rejects_degenerate_positivity():
    base = toy_no_censoring()
    bad = DiscreteToyModel(
        p_gamma=base.p_gamma, p_x1=base.p_x1, hist_arm=base.hist_arm,
        bridge_arm=(1.0, 0.0), s_table=base.s_table,
        event_coefs=base.event_coefs)
    with pytest.raises(PositivityViolated):
        gateaux_check(bad, 2, 2.0)


def test_deterministic_event_time_zero_outcome_residual():
    # nearly all event mass on the first atom regardless of (x, s, a): the
    # historical outcome residual y(T) - mu vanishes at the realized time
    base = toy_no_censoring()
    toy = DiscreteToyModel(
        p_gamma=base.p_gamma, p_x1=base.p_x1, hist_arm=base.hist_arm,
        bridge_arm=base.bridge_arm, s_table=base.s_table,
        event_coefs={(0, 1): (30.0, 0.0, 0.0, 0.0),
                     (1, 1): (-30.0, 0.0, 0.0, 0.0),
                     (2, 1): (-30.0, 0.0, 0.0, 0.0)})
    bundle = toy.bundle()
    for x in (0, 1):
        for s in (0, 1, 2):
            row = Row((float(x),), 1, 0, (float(s),), 1.0, 1)
            for t in (1.0, 2.0):
                phi = float(_phi_complete_cols(bundle, _row_cols(row), 2,
                                               np.asarray([t]))[0, 0])
                assert abs(phi) < 1e-12


# --- reductions on fitted bundles -------------------------------------------
def test_censored_reduces_to_complete_without_censoring():
    ds = _build(synth_records(n_h=120, n_b=60, seed=11, all_events=True))
    b = _fitted(ds)
    # no censoring events -> the fitted censoring model is identically G^C = 1
    assert b.cens_fit.times.size == 0
    cols = _columns(ds)
    taus = np.array([0.5, 1.0, 2.0, 3.0])
    # uncentered conventions differ by the constant 1 - Gamma/kappa (the
    # censored display is on the risk scale with its leading "1 -"); after
    # aligning, the hazard-grid route and the direct conditional-mean route
    # must agree at every row and time
    offset = (1.0 - ds.gamma / b.kappa)[:, None]
    for a in (1, 2):
        phi_cens = _phi_censored_cols(b, cols, a, taus)
        phi_full = _phi_complete_cols(b, cols, a, taus)
        assert np.abs(phi_cens - phi_full - offset).max() < 1e-10
        # the offset averages to zero, so the two estimates agree exactly
        assert np.abs(phi_cens.mean(axis=0) - phi_full.mean(axis=0)).max() < 1e-10


def test_competing_single_cause_equals_censored():
    ds = _build(synth_records(n_h=150, n_b=70, seed=7))
    b = _fitted(ds, seed=9)
    cols = _columns(ds)
    taus = np.array([0.4, 1.1, 2.3, 3.5])
    for a in (1, 2):
        phi_c = _phi_censored_cols(b, cols, a, taus)
        phi_j = _phi_competing_cols(b, cols, a, taus, (1,))[:, :, 0]
        assert np.abs(phi_j - phi_c).max() < 1e-10


def test_competing_row_matches_censored_row():
    ds = _build(synth_records(n_h=60, n_b=30, seed=21))
    b = _fitted(ds, seed=2)
    for i in (0, 5, ds.n - 1):
        row = Row.from_dataset(ds, i)
        a = eif_censored_row(b, row, 2, 1.5)
        c = eif_competing_row(b, row, 2, 1.5, 1)
        assert c == pytest.approx(a, abs=1e-10)


def test_cause_plugins_sum_to_allcause():
    ds = _build(synth_records(n_h=200, n_b=80, J=2, seed=13), n_causes=2)
    b = _fitted(ds, J=2, seed=1)
    rep = check_sum_to_allcause(b, ds, 2, 2.0)
    assert rep.passed
    assert rep.plugin_gap < 1e-8
    assert rep.eif_gap < 1e-6
    # single cause: trivially passes
    ds1 = _build(synth_records(n_h=80, n_b=40, seed=3))
    rep1 = check_sum_to_allcause(_fitted(ds1, seed=4), ds1, 2, 1.5)
    assert rep1.passed


def test_degenerate_second_cause():
    ds = _build(synth_records(n_h=200, n_b=80, J=2, seed=17), n_causes=2)
    b = _fitted(ds, J=2, seed=5)
    # zero out the second cause-specific hazard, keeping everything else
    null_fit = SurvivalFit(SurvivalKind.EVENT, 2, fspec(), np.zeros(0),
                           np.zeros(0), np.zeros(0))
    bnull = NuisanceBundle(b.fold, b.kappa, 2, b.gamma_fit, b.arm_fit,
                           b.hist_fit, b.density_fits,
                           {1: b.event_fits[1], 2: null_fit}, b.cens_fit,
                           b.spec)
    # rows consistent with a law under which cause 2 never fires
    idx = np.flatnonzero(ds.delta != 2)
    cols = tuple(c[idx] for c in _columns(ds))
    taus = np.array([0.8, 1.7])
    phi = _phi_competing_cols(bnull, cols, 2, taus, (1, 2))
    phi_c = _phi_censored_cols(bnull, cols, 2, taus)
    assert np.abs(phi[:, :, 0] - phi_c).max() < 1e-6
    # cause-2 influence collapses to the bare centering constant, which
    # averages to zero over a full sample because kappa-hat = n_b / n
    gam = ds.gamma[idx]
    assert np.abs(phi[:, :, 1] - (1.0 - gam / b.kappa)[:, None]).max() < 1e-12
    assert abs(np.mean(1.0 - ds.gamma / ds.kappa_hat)) < 1e-12


def test_complete_indicator_agrees_with_callable_outcome():
    ds = _build(synth_records(n_h=90, n_b=40, seed=31, all_events=True))
    b = _fitted(ds, seed=6)
    tau = 1.7
    direct = eif_complete_rows(b, ds, None, 2, [tau])
    via_y = eif_complete_rows(b, ds, None, 2, [tau],
                              y=lambda u: 1.0 if u <= tau else 0.0)
    assert np.abs(direct - via_y).max() < 1e-12


# --- plug-in forms ----------------------------------------------------------
class _ConstantRiskStub:
    """Protocol stand-in: conditional risk 0.3 everywhere, one marker node."""

    fold = None
    J = 1

    def __init__(self, kappa, p_arm=0.5, p_hist=0.35):
        self.kappa = kappa
        self.grid = np.array([1.0])
        self._lam = -np.log(0.7)
        self._p_arm = p_arm
        self._p_hist = p_hist

    def event_cum_at(self, x, s, times):
        return np.full((x.shape[0], np.atleast_1d(times).size), self._lam)

    def marker_integration_nodes(self, x, arm):
        return np.zeros((1, x.shape[0], 1)), np.ones(1)

    def p_arm_bridging(self, x, arm):
        return np.full(x.shape[0], self._p_arm)

    def p_gamma(self, x):
        return np.full(x.shape[0], self.kappa)

    def p_hist_approved(self, x):
        return np.full(x.shape[0], self._p_hist)

    def marker_logpdf(self, x, s, arm, gamma):
        return np.zeros(x.shape[0])

    def cens_surv_rowwise(self, x, s, t):
        return np.ones(x.shape[0])


def test_plugin_mediation_constant_risk():
    ds = _build(synth_records(n_h=40, n_b=20, seed=2))
    stub = _ConstantRiskStub(ds.kappa_hat)
    for a in (1, 2):
        for t in (0.5, 2.0):
            assert plugin_mediation(stub, ds, a, t) == pytest.approx(0.3, abs=1e-12)


def test_plugin_outcome_constant_risk_equal_propensity():
    # exactly half the bridging rows in each arm makes the 1/0.5 weights
    # average out exactly
    rng = np.random.default_rng(8)
    recs = []
    for i in range(30):
        recs.append(SubjectRecord((float(rng.normal()),), ArmLabel(i % 2),
                                  TrialIndicator.HISTORICAL,
                                  (float(rng.normal()),), 1.0 + i * 0.1, 1))
    for i in range(20):
        arm = ArmLabel.APPROVED if i % 2 == 0 else ArmLabel.INVESTIGATIONAL
        recs.append(SubjectRecord((float(rng.normal()),), arm,
                                  TrialIndicator.BRIDGING, (float(rng.normal()),)))
    ds = _build(recs)
    stub = _ConstantRiskStub(ds.kappa_hat, p_arm=0.5)
    for a in (1, 2):
        assert plugin_outcome(stub, ds, a, 1.5) == pytest.approx(0.3, abs=1e-12)


def test_plugin_weighting_collapses_to_ecdf():
    # flat density ratio, Gamma-propensity = kappa, no censoring: the
    # reweighted average is the arm-1 historical empirical CDF
    ds = _build(synth_records(n_h=80, n_b=40, seed=19, all_events=True))
    hist1 = (ds.gamma == 0) & (ds.arm == 1)
    stub = _ConstantRiskStub(ds.kappa_hat, p_hist=hist1.sum() / ds.n)
    for t in (0.7, 1.9, 4.0):
        want = float(np.mean(ds.t_obs[hist1] <= t))
        assert plugin_weighting(stub, ds, 2, t) == pytest.approx(want, abs=1e-12)


def test_plugin_weighting_warns_when_no_events_qualify():
    ds = _build(synth_records(n_h=50, n_b=25, seed=23))
    stub = _ConstantRiskStub(ds.kappa_hat)
    t_first = float(np.nanmin(ds.t_obs)) / 2.0
    with pytest.warns(LowInformation):
        val = plugin_weighting(stub, ds, 2, t_first)
    assert val == 0.0


def test_plugin_row_guards():
    ds = _build(synth_records(n_h=40, n_b=20, seed=2))
    stub = _ConstantRiskStub(ds.kappa_hat)

    class _NS:
        pass

    empty = _NS()
    empty.gamma = np.zeros(10, dtype=int)
    empty.arm = np.ones(10, dtype=int)
    empty.x = np.zeros((10, 1))
    empty.s = np.zeros((10, 1))
    empty.t_obs = np.ones(10)
    empty.delta = np.ones(10, dtype=int)
    empty.n = 10
    with pytest.raises(NoBridgingRows):
        plugin_mediation(stub, empty, 2, 1.0)

    only_b = _NS()
    only_b.gamma = np.ones(10, dtype=int)
    only_b.arm = np.full(10, 2, dtype=int)
    only_b.x = np.zeros((10, 1))
    only_b.s = np.zeros((10, 1))
    only_b.t_obs = np.full(10, np.nan)
    only_b.delta = np.full(10, -1, dtype=int)
    only_b.n = 10
    with pytest.raises(NoArmRows):
        plugin_outcome(stub, only_b, 1, 1.0)
    with pytest.raises(NoHistoricalApprovedRows):
        plugin_weighting(stub, only_b, 2, 1.0)

    with pytest.raises(CauseOutOfRange):
        plugin_mediation(stub, ds, 2, 1.0, j=5)


# --- influence matrix and row API -------------------------------------------
def test_matrix_estimates_are_column_means():
    ds = _build(synth_records(n_h=70, n_b=30, seed=29))
    b = _fitted(ds, seed=12)
    taus = np.array([0.5, 1.5, 2.5])
    vals = eif_values(b, ds, None, (1, 2), taus)
    mat = EifMatrix(vals, taus, (1, 2), (None,))
    assert np.all(np.isfinite(mat.values))
    assert np.abs(mat.estimates - vals.mean(axis=0)).max() < 1e-12
    assert mat.se().shape == (3, 2, 1)


def test_indicator_gating_row_wise():
    ds = _build(synth_records(n_h=60, n_b=30, seed=37))
    b = _fitted(ds, seed=8)
    # placebo-arm historical row: every data-dependent term is gated off
    row0 = Row((0.3, -0.2), 0, 0, (0.1,), 1.2, 1)
    assert eif_censored_row(b, row0, 2, 2.0) == 1.0
    # approved-arm bridging row evaluated at the other arm: the marker and
    # outcome enter only through x (terms (ii) gated off, (iii) depends on x)
    r1 = Row((0.5, 0.5), 1, 1, (0.0,))
    r2 = Row((0.5, 0.5), 1, 1, (3.0,))
    assert eif_censored_row(b, r1, 2, 2.0) == eif_censored_row(b, r2, 2, 2.0)
    # same row in the evaluated arm responds to its own marker
    r3 = Row((0.5, 0.5), 2, 1, (0.0,))
    r4 = Row((0.5, 0.5), 2, 1, (3.0,))
    assert eif_censored_row(b, r3, 2, 2.0) != eif_censored_row(b, r4, 2, 2.0)


def test_fold_mismatch_and_cause_range():
    ds = _build(synth_records(n_h=60, n_b=30, seed=41))
    b = _fitted(ds, seed=10)
    assert b.fold == 1
    row_clash = Row((0.0, 0.0), 1, 0, (0.0,), 1.0, 1, fold=2)
    with pytest.raises(FoldMismatch):
        eif_censored_row(b, row_clash, 2, 1.0)
    row_ok = Row((0.0, 0.0), 1, 0, (0.0,), 1.0, 1, fold=1)
    eif_censored_row(b, row_ok, 2, 1.0)
    with pytest.raises(CauseOutOfRange):
        eif_competing_row(b, row_ok, 2, 1.0, 2)
    with pytest.raises(CauseOutOfRange):
        eif_competing_row(b, row_ok, 2, 1.0, 0)


def test_matrix_csv_round_trip(tmp_path):
    ds = _build(synth_records(n_h=40, n_b=20, seed=43))
    b = _fitted(ds, seed=14)
    taus = np.array([1.0, 2.0])
    vals = eif_values(b, ds, None, (1, 2), taus)
    mat = EifMatrix(vals, taus, (1, 2), (None,))
    path = tmp_path / "eif.csv"
    mat.write_csv(path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "subject_id,arm,time,cause,phi"
    assert len(lines) == 1 + ds.n * 2 * 2
    first = lines[1].split(",")
    assert first[0] == "0" and first[1] == "1" and first[3] == ""
    assert float(first[4]) == vals[0, 0, 0, 0]
    codes = {ln.split(",")[1] for ln in lines[1:]}
    assert codes == {"1", "1p"}


def test_time_grid_validation():
    g = time_grid([3.0, 1.0, 2.0, 2.0], horizon=5.0)
    assert np.array_equal(g, [1.0, 2.0, 3.0])
    with pytest.raises(GridBeyondHorizon):
        time_grid([1.0, 6.0], horizon=5.0)
    with pytest.raises(ValueError):
        time_grid([-1.0, 2.0], horizon=5.0)
    with pytest.raises(ValueError):
        time_grid([], horizon=5.0)


def test_truncation_tallies_fire():
    ds = _build(synth_records(n_h=40, n_b=20, seed=2))
    hist = (ds.gamma == 0) & (ds.arm == 1)

    class _Extreme(_ConstantRiskStub):
        def p_hist_approved(self, x):
            return np.full(x.shape[0], 1e-4)

        def marker_logpdf(self, x, s, arm, gamma):
            return np.zeros(x.shape[0]) if gamma == 0 \
                else np.full(x.shape[0], 9.0)

    tally = new_tally()
    w = _hist_weight(_Extreme(ds.kappa_hat), ds.x[hist], ds.s[hist], 2, tally)
    assert tally["prop_floored"] == hist.sum()
    assert tally["density_ratio_capped"] == hist.sum()
    assert np.all(w <= ds.kappa_hat ** -1 * (1.0 / 0.01) * 50.0 + 1e-9)
