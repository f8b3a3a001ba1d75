"""Cross-fitted one-step curve estimation and inference.

Assembles the influence evaluations from `eif` into K-fold cross-fitted
estimates of counterfactual cumulative incidence over a time grid, with
pointwise standard errors, multiplier-bootstrap uniform bands, isotonic
monotone correction, a risk-scale sensitivity transform, relative vaccine
efficacy, a no-direct-effect falsification test, and a misspecification
replication harness.
"""

import concurrent.futures
import dataclasses
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import isotonic_regression
from scipy.special import expit
from scipy.stats import norm

from fusioncurve.dataset import _ARM_TEXT, ArmLabel, FusedDataset, SubjectRecord, TrialIndicator
from fusioncurve.eif import EifMatrix, eif_values, new_tally, time_grid
from fusioncurve.errors import (
    DegenerateVariance,
    DenominatorNearZero,
    GridBeyondHorizon,
    InsufficientEvents,
    NoEvents,
)
from fusioncurve.nuisance import (
    G_MIN,
    FeatureSpec,
    NuisanceSpec,
    SurvivalFit,
    SurvivalKind,
    default_spec,
    fit_bundle,
    fit_survival,
    fspec,
    make_folds,
)

EPS_DEN = 1e-6          # relative-VE denominator guard


# ---------------------------------------------------------------------------
# sensitivity transform
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SensitivitySpec:
    """Risk-scale sensitivity knobs: transmissibility factor and logit offset."""

    rho: float = 1.0
    h_offset: float = 0.0

    def __post_init__(self):
        if not (self.rho > 0.0):
            raise ValueError(f"rho must be positive, got {self.rho}")

    @property
    def identity(self) -> bool:
        return self.rho == 1.0 and self.h_offset == 0.0


def _apply_sensitivity(sens, r):
    """clamp(rho * expit(logit(r) + h), 0, 1) with endpoint conventions.

    Returns (transformed array, number of clamped cells).  Inputs outside
    (0, 1) (possible for interval endpoints) map to the continuous extension:
    r <= 0 -> 0, r >= 1 -> min(rho, 1).
    """
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.log(r) - np.log1p(-r)
        raw = sens.rho * expit(z + sens.h_offset)
    raw = np.where(r <= 0.0, 0.0, raw)
    raw = np.where(r >= 1.0, sens.rho, raw)
    clamped = int(np.count_nonzero(raw > 1.0))
    return np.clip(raw, 0.0, 1.0), clamped


# ---------------------------------------------------------------------------
# monotone correction
# ---------------------------------------------------------------------------
def pava(values) -> np.ndarray:
    """Equal-weight pool-adjacent-violators projection onto nondecreasing sequences."""
    v = np.asarray(values, dtype=float)
    if v.ndim != 1:
        raise ValueError("pava expects a 1-d sequence")
    if v.size <= 1 or np.all(np.diff(v) >= 0.0):
        return v.copy()
    return np.asarray(isotonic_regression(v, increasing=True).x, dtype=float)


def _pava_cols(arr):
    # arr (m, A, C) or None; projects each (arm, cause) series along time
    if arr is None:
        return None
    out = np.empty_like(arr)
    m, A, C = arr.shape
    for a in range(A):
        for c in range(C):
            out[:, a, c] = pava(arr[:, a, c])
    return out


# ---------------------------------------------------------------------------
# result containers
# ---------------------------------------------------------------------------
def _series_dict(names, arrays, ti, ai, ci):
    row = {}
    for name, arr in zip(names, arrays):
        row[name] = None if arr is None else float(arr[ti, ai, ci])
    return row


_CURVE_FIELDS = ("estimate", "se", "ci_lo", "ci_hi", "band_lo", "band_hi",
                 "mono_estimate", "mono_ci_lo", "mono_ci_hi",
                 "mono_band_lo", "mono_band_hi")


@dataclass
class CurveEstimate:
    """Per (arm, cause, time) one-step estimates with pointwise and uniform inference.

    All value arrays have shape (m, n_arms, n_causes) aligned with `times`,
    `arms` and `causes`; band arrays are None when no band was requested.
    The mono_* fields hold the isotonic projection of the corresponding
    series (estimates clamped to [0, 1]); the unprojected values stay
    alongside.
    """

    times: np.ndarray
    arms: tuple
    causes: tuple
    estimate: np.ndarray
    se: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    band_lo: Optional[np.ndarray] = None
    band_hi: Optional[np.ndarray] = None
    band_q: Optional[np.ndarray] = None
    mono_estimate: Optional[np.ndarray] = None
    mono_ci_lo: Optional[np.ndarray] = None
    mono_ci_hi: Optional[np.ndarray] = None
    mono_band_lo: Optional[np.ndarray] = None
    mono_band_hi: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def _arrays(self):
        return (self.estimate, self.se, self.ci_lo, self.ci_hi,
                self.band_lo, self.band_hi, self.mono_estimate,
                self.mono_ci_lo, self.mono_ci_hi, self.mono_band_lo,
                self.mono_band_hi)

    def to_json_dict(self) -> dict:
        series = []
        for ai, a in enumerate(self.arms):
            for ci, c in enumerate(self.causes):
                entry = {"arm": _ARM_TEXT[ArmLabel(a)],
                         "cause": None if c is None else int(c)}
                for name, arr in zip(_CURVE_FIELDS, self._arrays()):
                    entry[name] = None if arr is None else [float(v) for v in arr[:, ai, ci]]
                if self.band_q is not None:
                    entry["band_q"] = float(self.band_q[ai, ci])
                series.append(entry)
        return {"schema_version": 1,
                "times": [float(t) for t in self.times],
                "meta": self.meta,
                "series": series}

    def write_csv(self, path) -> None:
        cols = ",".join(_CURVE_FIELDS)
        with open(path, "w") as fh:
            fh.write(f"arm,cause,time,{cols}\n")
            for ai, a in enumerate(self.arms):
                code = _ARM_TEXT[ArmLabel(a)]
                for ci, c in enumerate(self.causes):
                    cause = "" if c is None else str(c)
                    for ti, t in enumerate(self.times):
                        vals = _series_dict(_CURVE_FIELDS, self._arrays(), ti, ai, ci)
                        cells = ["" if vals[k] is None else repr(vals[k])
                                 for k in _CURVE_FIELDS]
                        fh.write(f"{code},{cause},{float(t)!r}," + ",".join(cells) + "\n")


@dataclass
class BandResult:
    """Uniform-band half-width data from the Gaussian-multiplier bootstrap."""

    level: float
    draws: int
    seed: int
    q: np.ndarray        # (n_arms, n_causes) sup-statistic quantile, floored at z
    sd: np.ndarray       # (m, n_arms, n_causes) per-time influence SD
    lo: np.ndarray
    hi: np.ndarray


# ---------------------------------------------------------------------------
# configuration and grid
# ---------------------------------------------------------------------------
@dataclass
class EstimatorConfig:
    """Settings for estimate_curve; defaults give the standard analysis."""

    K: int = 5
    seed: int = 0
    times: Optional[Sequence] = None
    times_only: bool = False
    arms: tuple = (ArmLabel.INVESTIGATIONAL,)
    causes: Optional[tuple] = None
    spec: Optional[NuisanceSpec] = None
    sensitivity: Optional[SensitivitySpec] = None
    level: float = 0.95
    band_draws: int = 1000
    band_seed: Optional[int] = None
    bundle: object = None          # pre-built nuisances: single pass, no fitting


def default_grid(ds, times=None, times_only=False) -> np.ndarray:
    """Deciles of observed historical event times within the horizon, merged
    with any user-supplied times (`times_only` keeps just the user times)."""
    if times is not None and times_only:
        return time_grid(times, ds.horizon)
    hist_events = ds.t_obs[(ds.gamma == 0) & (ds.delta >= 1)]
    pts = []
    if hist_events.size:
        dec = np.quantile(hist_events, np.linspace(0.1, 0.9, 9))
        pts.extend(dec[dec <= ds.horizon])
    if times is not None:
        pts.extend(np.asarray(times, dtype=float))
    if not pts:
        raise NoEvents("no historical events inside the horizon and no user grid")
    return time_grid(pts, ds.horizon)


def _validate_config(ds, config):
    arms = tuple(int(a) for a in config.arms)
    if not arms or any(a not in (1, 2) for a in arms):
        raise ValueError(f"arms must be a nonempty subset of (1, 2), got {config.arms}")
    if not (0.0 < config.level < 1.0):
        raise ValueError(f"level must be in (0, 1), got {config.level}")
    if config.bundle is None and config.K < 2:
        raise ValueError(f"cross-fitting needs K >= 2, got {config.K}")
    causes = None
    if config.causes is not None:
        causes = tuple(int(c) for c in config.causes)
        bad = [c for c in causes if not (1 <= c <= ds.J)]
        if bad:
            raise ValueError(f"causes {bad} outside 1..{ds.J}")
    return arms, causes


# ---------------------------------------------------------------------------
# uniform band
# ---------------------------------------------------------------------------
_BAND_CHUNK = 256


def uniform_band(eif: EifMatrix, level: float = 0.95, draws: int = 1000,
                 seed: int = 0) -> BandResult:
    """Studentized sup-statistic band via the Gaussian-multiplier bootstrap.

    For each multiplier draw xi ~ N(0, I_n) the statistic is
    sup_t |n^{-1/2} sum_i xi_i phi*_it| / SD_t per (arm, cause), with phi*
    the influence residuals (centered per trial when the matrix carries the
    trial indicator, since both study sizes are fixed by design) and SD_t
    their matching standard deviation; the band is
    estimate +- q * SD_t / sqrt(n) with q the `level` quantile of the draws,
    floored at the pointwise normal quantile so the band always contains
    the pointwise CI.

    Raises
    ------
    DegenerateVariance
        If some influence column is constant (SD zero).
    """
    if draws < 200:
        raise ValueError(f"need at least 200 multiplier draws, got {draws}")
    values = eif.values
    n, m, A, C = values.shape
    centered = eif.residuals()
    ddof = 1 if eif.gamma is None else 2
    sd = np.sqrt((centered ** 2).sum(axis=0) / (n - ddof))
    flat = (np.ptp(values, axis=0) == 0.0) | (sd == 0.0)
    if np.any(flat):
        where = np.argwhere(flat)[0]
        raise DegenerateVariance(
            f"influence column constant at time index {where[0]}")
    scaled = (centered / (sd * math.sqrt(n))).reshape(n, m * A * C)
    rng = np.random.default_rng(seed)
    sups = np.empty((draws, A, C))
    done = 0
    while done < draws:
        b = min(_BAND_CHUNK, draws - done)
        xi = rng.standard_normal((b, n))
        z = (xi @ scaled).reshape(b, m, A, C)
        sups[done:done + b] = np.abs(z).max(axis=1)
        done += b
    z_level = norm.ppf(0.5 + level / 2.0)
    q = np.maximum(np.quantile(sups, level, axis=0), z_level)
    est = eif.estimates
    half = q[None, :, :] * sd / math.sqrt(n)
    return BandResult(level, draws, seed, q, sd, est - half, est + half)


# ---------------------------------------------------------------------------
# the main entry point
# ---------------------------------------------------------------------------
def estimate_curve(ds: FusedDataset, config: Optional[EstimatorConfig] = None):
    """K-fold cross-fitted one-step estimate of counterfactual incidence.

    Fits all nuisances out-of-fold, evaluates the influence function on each
    held-out fold, and averages the uncentered values; the standard error is
    the within-trial-centered sample SD of those values over sqrt(n), since
    the design fixes both study sizes.  A uniform band is attached
    when `config.band_draws` >= 200, the sensitivity transform is applied to
    estimate / CI / band (bitwise no-op at the identity), and the isotonic
    projections fill the mono_* fields.

    Parameters
    ----------
    ds : FusedDataset
    config : EstimatorConfig, optional

    Returns
    -------
    (CurveEstimate, EifMatrix)

    Raises
    ------
    GridBeyondHorizon, plus any nuisance-fitting error.
    """
    config = config if config is not None else EstimatorConfig()
    arms, causes = _validate_config(ds, config)
    taus = default_grid(ds, config.times, config.times_only)
    cause_axis = (None,) if causes is None else causes
    m, A, C = taus.size, len(arms), len(cause_axis)

    tally = new_tally()
    values = np.empty((ds.n, m, A, C))
    if config.bundle is not None:
        values[:] = eif_values(config.bundle, ds, None, arms, taus, causes, tally)
        mode = "oracle"
    else:
        spec = config.spec if config.spec is not None else default_spec(ds.d, ds.J)
        folds = make_folds(ds, config.K, config.seed)
        for k in range(1, config.K + 1):
            idx = np.flatnonzero(folds == k)
            bundle = fit_bundle(ds, folds, k, spec)
            values[idx] = eif_values(bundle, ds, idx, arms, taus, causes, tally)
        mode = "crossfit"

    mat = EifMatrix(values, taus, arms, cause_axis, gamma=ds.gamma)
    est = mat.estimates
    se = mat.se()
    z = norm.ppf(0.5 + config.level / 2.0)
    ci_lo, ci_hi = est - z * se, est + z * se

    band_lo = band_hi = band_q = None
    band_draws = 0
    if config.band_draws and config.band_draws >= 200:
        bseed = config.band_seed if config.band_seed is not None else config.seed
        band = uniform_band(mat, config.level, config.band_draws, bseed)
        band_lo, band_hi, band_q = band.lo, band.hi, band.q
        band_draws = band.draws

    sens = config.sensitivity if config.sensitivity is not None else SensitivitySpec()
    clamped = 0
    if not sens.identity:
        est, c0 = _apply_sensitivity(sens, est)
        ci_lo, c1 = _apply_sensitivity(sens, ci_lo)
        ci_hi, c2 = _apply_sensitivity(sens, ci_hi)
        clamped = c0 + c1 + c2
        if band_lo is not None:
            band_lo, c3 = _apply_sensitivity(sens, band_lo)
            band_hi, c4 = _apply_sensitivity(sens, band_hi)
            clamped += c3 + c4
        if clamped:
            warnings.warn(f"sensitivity transform clamped {clamped} cell(s) to [0, 1]")

    meta = {"mode": mode, "K": 0 if mode == "oracle" else config.K,
            "seed": config.seed, "n": ds.n, "n_h": ds.n_h, "n_b": ds.n_b,
            "kappa_hat": ds.kappa_hat, "level": config.level,
            "band_draws": band_draws, "truncation": dict(tally),
            "sensitivity": {"rho": sens.rho, "h_offset": sens.h_offset,
                            "clamped": clamped}}
    curve = CurveEstimate(taus, arms, cause_axis, est, se, ci_lo, ci_hi,
                          band_lo, band_hi, band_q, meta=meta)
    _fill_monotone(curve)
    return curve, mat


def _fill_monotone(curve):
    curve.mono_estimate = np.clip(_pava_cols(curve.estimate), 0.0, 1.0)
    curve.mono_ci_lo = _pava_cols(curve.ci_lo)
    curve.mono_ci_hi = _pava_cols(curve.ci_hi)
    curve.mono_band_lo = _pava_cols(curve.band_lo)
    curve.mono_band_hi = _pava_cols(curve.band_hi)
    return curve


def monotone_correct(curve: CurveEstimate) -> CurveEstimate:
    """Isotonic projection of the estimate and interval endpoints.

    Returns a copy whose mono_* fields are the equal-weight PAVA projection
    of the corresponding unprojected series (estimates clamped to [0, 1]);
    idempotent because projections are always recomputed from the raw values.
    """
    out = dataclasses.replace(curve)
    return _fill_monotone(out)


# ---------------------------------------------------------------------------
# relative vaccine efficacy
# ---------------------------------------------------------------------------
@dataclass
class RelVeEstimate:
    """Relative VE 1 - R(1',t)/R(1,t) with delta-method inference.

    `se` is the SD/sqrt(n) of the displayed influence values for the
    log-scale contrast; CI endpoints come from the relative-risk transform
    1 - RR * exp(-+ z * se).  Times where the two arms coincide exactly are
    flagged degenerate and carry NaN se/CI.
    """

    times: np.ndarray
    cause: Optional[int]
    relve: np.ndarray
    se: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    degenerate: np.ndarray
    level: float
    n: int

    def to_json_dict(self) -> dict:
        return {"schema_version": 1,
                "times": [float(t) for t in self.times],
                "cause": None if self.cause is None else int(self.cause),
                "relve": [float(v) for v in self.relve],
                "se": [None if math.isnan(v) else float(v) for v in self.se],
                "ci_lo": [None if math.isnan(v) else float(v) for v in self.ci_lo],
                "ci_hi": [None if math.isnan(v) else float(v) for v in self.ci_hi],
                "degenerate": [bool(v) for v in self.degenerate],
                "level": self.level, "n": self.n}

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("time,relve,se,ci_lo,ci_hi,degenerate\n")
            for i, t in enumerate(self.times):
                cells = [repr(float(t)), repr(float(self.relve[i]))]
                for arr in (self.se, self.ci_lo, self.ci_hi):
                    v = float(arr[i])
                    cells.append("" if math.isnan(v) else repr(v))
                cells.append(str(int(self.degenerate[i])))
                fh.write(",".join(cells) + "\n")


def relative_ve(eif: EifMatrix, cause=None, level: float = 0.95) -> RelVeEstimate:
    """Relative vaccine efficacy of arm 1' versus arm 1 from shared influence columns.

    Per time: relVE = 1 - R(1')/R(1); the per-subject influence value for the
    log-scale contrast is (phi*_1' - RR * phi*_1) / (R_1 - R_1') with phi*
    the centered columns, and the CI maps back through the relative risk.
    Its SD centers within each trial when the matrix carries the trial
    indicator, matching the fixed-study-sizes design.

    Raises
    ------
    DenominatorNearZero
        If R(1, t) <= 1e-6 at some grid time.
    ValueError
        If the matrix lacks one of the two arms or the requested cause.
    """
    arms = tuple(int(a) for a in eif.arms)
    if 1 not in arms or 2 not in arms:
        raise ValueError(f"relative VE needs influence columns for arms 1 and 1', got {eif.arms}")
    try:
        ci = eif.causes.index(cause)
    except ValueError:
        raise ValueError(f"cause {cause} not among evaluated causes {eif.causes}")
    i1, i2 = arms.index(1), arms.index(2)
    phi1 = eif.values[:, :, i1, ci]
    phi2 = eif.values[:, :, i2, ci]
    n = phi1.shape[0]
    r1 = phi1.mean(axis=0)
    r2 = phi2.mean(axis=0)
    low = r1 <= EPS_DEN
    if np.any(low):
        t_bad = float(eif.times[np.argmax(low)])
        raise DenominatorNearZero(f"R(1, t={t_bad}) <= {EPS_DEN}; relative VE undefined")
    rr = r2 / r1
    ve = 1.0 - rr
    diff = r1 - r2
    degenerate = diff == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        ell = ((phi2 - r2) - rr * (phi1 - r1)) / diff
    if eif.gamma is None:
        ell = ell - ell.mean(axis=0)
        ddof = 1
    else:
        for g in (0, 1):
            rows = eif.gamma == g
            ell[rows] -= ell[rows].mean(axis=0)
        ddof = 2
    se = np.empty(r1.size)
    for t in range(r1.size):
        se[t] = (np.nan if degenerate[t]
                 else math.sqrt((ell[:, t] ** 2).sum() / (n - ddof) / n))
    z = norm.ppf(0.5 + level / 2.0)
    with np.errstate(invalid="ignore"):
        ci_lo = 1.0 - rr * np.exp(z * se)
        ci_hi = np.minimum(1.0 - rr * np.exp(-z * se), 1.0)
    return RelVeEstimate(np.asarray(eif.times, dtype=float), cause, ve, se,
                         ci_lo, ci_hi, degenerate, level, n)


# ---------------------------------------------------------------------------
# no-controlled-direct-effects falsification test
# ---------------------------------------------------------------------------
@dataclass
class NcdeTestResult:
    """Counterfactual-versus-actual incidence comparison at one time point."""

    t_star: float
    counterfactual: float
    actual: float
    difference: float
    ci_lo: float
    ci_hi: float
    reject: bool
    alpha: float
    draws: int
    n_approved: int
    n_investigational: int
    seed: int

    def to_json_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schema_version"] = 1
        return d


def _two_arm_split(records):
    rec1, rec2 = [], []
    for r in records:
        if r.t_obs is None or r.delta is None:
            raise ValueError("the falsification test needs outcomes on every record")
        if int(r.a) == 1:
            rec1.append(r)
        elif int(r.a) == 2:
            rec2.append(r)
        else:
            raise ValueError("records must come from the two vaccine arms (1 and 1')")
    if len(rec1) < 2 or len(rec2) < 2:
        raise ValueError(f"need both arms populated, got {len(rec1)} approved "
                         f"and {len(rec2)} investigational rows")
    return rec1, rec2


def _single_arm_spec(d, n_marker):
    # event/censoring features without an arm term (single-arm pseudo-historical data)
    ev = [{"kind": "x", "index": j} for j in range(d)]
    ev += [{"kind": "s", "index": j} for j in range(n_marker)]
    allx = tuple(range(d))
    return NuisanceSpec(event_features=FeatureSpec(tuple(ev)),
                        cens_features=FeatureSpec(tuple(ev)),
                        gamma_x_cols=allx, arm_x_cols=allx, hist_x_cols=allx,
                        density_x_cols=allx)


def ncde_test(records, t_star: float, alpha: float = 0.05, draws: int = 500,
              K: int = 5, seed: int = 0,
              spec: Optional[NuisanceSpec] = None) -> NcdeTestResult:
    """Falsification test of the no-direct-effect assumption on a two-arm trial.

    Treats the approved-arm rows as a pseudo-historical study and the
    investigational-arm rows (outcomes masked) as a pseudo-bridging study,
    estimates the counterfactual incidence at `t_star` through the fusion
    machinery, and compares it with the actual investigational-arm incidence
    by inverse-probability-of-censoring weighting.  The difference CI comes
    from a stratified nonparametric bootstrap (resampling each arm's subject
    contributions with nuisances held fixed), percentile method.

    Parameters
    ----------
    records : sequence of SubjectRecord
        A two-arm trial where BOTH arms carry observed outcomes.
    t_star : float
        Comparison time; must not exceed the largest observed time.
    alpha : float
        Test level.
    draws : int
        Bootstrap resamples (>= 200).
    K, seed, spec
        Cross-fitting and nuisance settings for the counterfactual arm.

    Raises
    ------
    InsufficientEvents
        If the investigational arm has no qualifying events by t_star.
    GridBeyondHorizon
        If t_star exceeds the observed follow-up.
    """
    if draws < 200:
        raise ValueError(f"need at least 200 bootstrap draws, got {draws}")
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    rec1, rec2 = _two_arm_split(records)
    horizon = max(r.t_obs for r in rec1 + rec2)
    if t_star > horizon:
        raise GridBeyondHorizon(f"t_star {t_star} exceeds observed follow-up {horizon}")
    n_causes = max(1, max(r.delta for r in rec1 + rec2))

    pseudo = [SubjectRecord(r.x, ArmLabel.APPROVED, TrialIndicator.HISTORICAL,
                            r.s, r.t_obs, r.delta) for r in rec1]
    pseudo += [SubjectRecord(r.x, ArmLabel.INVESTIGATIONAL, TrialIndicator.BRIDGING,
                             r.s) for r in rec2]
    ds = FusedDataset(pseudo, horizon, n_causes=n_causes)
    if spec is None:
        spec = _single_arm_spec(ds.d, ds.n_marker)
    cfg = EstimatorConfig(K=K, seed=seed, times=[t_star], times_only=True,
                          arms=(ArmLabel.INVESTIGATIONAL,), spec=spec,
                          band_draws=0)
    curve, mat = estimate_curve(ds, cfg)
    counterfactual = float(curve.estimate[0, 0, 0])
    phi = mat.values[:, 0, 0, 0]
    n1, n2 = len(rec1), len(rec2)
    phi1, phi2 = phi[:n1], phi[n1:]

    x2 = np.array([r.x for r in rec2], dtype=float)
    s2 = np.array([r.s for r in rec2], dtype=float)
    t2 = np.array([r.t_obs for r in rec2])
    d2 = np.array([r.delta for r in rec2])
    hit = (d2 >= 1) & (t2 <= t_star)
    if not hit.any():
        raise InsufficientEvents(
            f"no investigational-arm events at or before t_star={t_star}")
    try:
        cens = fit_survival(SurvivalKind.CENSORING, t2, d2, x2, s2,
                            np.ones(n2), spec.cens_features)
        gc = np.exp(-np.exp(cens.linpred(x2, s2, np.ones(n2))) * cens.cum_base(t2))
    except NoEvents:
        gc = np.ones(n2)
    ipcw = hit / np.maximum(gc, G_MIN)
    actual = float(ipcw.mean())
    difference = counterfactual - actual

    rng = np.random.default_rng(seed)
    n = n1 + n2
    diffs = np.empty(draws)
    for b in range(draws):
        i1 = rng.integers(0, n1, n1)
        i2 = rng.integers(0, n2, n2)
        cf_b = (phi1[i1].sum() + phi2[i2].sum()) / n
        diffs[b] = cf_b - ipcw[i2].mean()
    lo, hi = np.quantile(diffs, [alpha / 2.0, 1.0 - alpha / 2.0])
    reject = bool(lo > 0.0 or hi < 0.0)
    return NcdeTestResult(float(t_star), counterfactual, actual, difference,
                          float(lo), float(hi), reject, alpha, draws, n1, n2, seed)


# ---------------------------------------------------------------------------
# misspecification harness
# ---------------------------------------------------------------------------
def misspec_scenarios(correct: NuisanceSpec) -> dict:
    """The four union-model scenarios built from a correctly specified NuisanceSpec.

    Ma keeps the event model and the bridging marker densities; Mb keeps the
    event model and the bridging arm propensity; Mc keeps everything except
    the event model; none_correct reduces every nuisance to intercept-only.
    """
    rep = dataclasses.replace
    flat = fspec()
    ma = rep(correct, cens_features=flat, gamma_x_cols=(), arm_x_cols=(),
             hist_x_cols=(), hist_density_x_cols=())
    mb = rep(correct, cens_features=flat, gamma_x_cols=(), hist_x_cols=(),
             density_x_cols=(), hist_density_x_cols=())
    mc = rep(correct, event_features=flat)
    none = rep(correct, event_features=flat, cens_features=flat,
               gamma_x_cols=(), arm_x_cols=(), hist_x_cols=(),
               density_x_cols=(), hist_density_x_cols=())
    return {"Ma": ma, "Mb": mb, "Mc": mc, "none_correct": none}


@dataclass
class MisspecReport:
    """Replication biases per nuisance-misspecification scenario."""

    target_time: float
    arm: int
    truth: float
    reps: int
    bias: dict                    # scenario -> mean estimate minus truth
    estimates: dict               # scenario -> per-replication estimates

    def to_json_dict(self) -> dict:
        return {"schema_version": 1, "target_time": self.target_time,
                "arm": int(self.arm), "truth": self.truth, "reps": self.reps,
                "bias": {k: float(v) for k, v in self.bias.items()},
                "estimates": {k: [float(e) for e in v]
                              for k, v in self.estimates.items()}}


def _misspec_rep(task):
    make_dataset, scenarios, t, arm, K, child, rep_seed = task
    ds = make_dataset(child)
    out = {}
    for name, spec in scenarios.items():
        cfg = EstimatorConfig(K=K, seed=rep_seed, times=[t], times_only=True,
                              arms=(arm,), spec=spec, band_draws=0)
        curve, _ = estimate_curve(ds, cfg)
        out[name] = float(curve.estimate[0, 0, 0])
    return out


def misspecification_suite(make_dataset: Callable, scenarios: Mapping,
                           target_time: float, truth: float, arm: int = 2,
                           reps: int = 100, K: int = 2, seed: int = 0,
                           threads: Optional[int] = None) -> MisspecReport:
    """Replication study of estimator bias under nuisance misspecification.

    `make_dataset` maps a numpy SeedSequence to a FusedDataset; each
    replication estimates the incidence at `target_time` under every
    scenario's NuisanceSpec on the same generated data, so the scenario
    contrast is paired.  Results are independent of `threads`.
    """
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(reps)
    tasks = [(make_dataset, dict(scenarios), float(target_time), int(arm), K,
              child, int(child.generate_state(1)[0] % (2 ** 31)))
             for child in children]
    results = _run_tasks(_misspec_rep, tasks, threads)
    names = list(scenarios)
    estimates = {name: [r[name] for r in results] for name in names}
    bias = {name: math.fsum(estimates[name]) / reps - truth for name in names}
    return MisspecReport(float(target_time), int(arm), float(truth), reps,
                         bias, estimates)


# ---------------------------------------------------------------------------
# deterministic task runner (shared with the simulation lab)
# ---------------------------------------------------------------------------
def _run_tasks(fn, tasks, threads=None):
    """Map fn over tasks; output order follows task order for any worker count."""
    if threads is None or threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as pool:
        chunk = max(1, len(tasks) // (4 * threads))
        return list(pool.map(fn, tasks, chunksize=chunk))
