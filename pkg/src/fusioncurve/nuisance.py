"""Nuisance-function fitting: propensities, marker densities, survival models.

All learners are parametric working models chosen to nest the simulation DGP
exactly: Newton logistic regression, homoscedastic linear-Gaussian conditional
densities per (arm, trial) stratum, and proportional-hazards fits with Breslow
baseline.  A NuisanceBundle packages one fold's fits behind a small evaluation
protocol (propensities, marker log-density and integration nodes, cumulative
hazards on a shared jump grid) that the EIF code consumes; oracle and toy
bundles duck-type the same protocol.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import roots_hermite

from fusioncurve.dataset import FusedDataset
from fusioncurve.errors import (
    CellTooSmall,
    NoEvents,
    Nonconvergence,
    RankDeficient,
    Separation,
    TooFewRows,
)

# truncation constants shared with the EIF evaluation (applied at use sites)
P_MIN = 0.01          # propensity clamp: probabilities kept in [P_MIN, 1-P_MIN]
G_MIN = 0.05          # floor for censoring survival when used as a divisor
RATIO_CAP = 50.0      # cap for the marker density ratio
SIGMA_MIN = 1e-6      # floor for the conditional-density residual scale

_gh_cache: dict = {}


def _gauss_hermite(n: int):
    if n not in _gh_cache:
        _gh_cache[n] = roots_hermite(n)
    return _gh_cache[n]


# ---------------------------------------------------------------------------
# feature specs
# ---------------------------------------------------------------------------
def _term_column(term: dict, x: np.ndarray, s: np.ndarray, arm) -> np.ndarray:
    kind = term["kind"]
    if kind == "x":
        return x[:, term["index"]]
    if kind == "s":
        return s[:, term.get("index", 0)]
    if kind == "xs":
        return x[:, term["x_index"]] * s[:, term.get("s_index", 0)]
    if kind == "a":
        a = np.asarray(arm) == 1
        return np.broadcast_to(a.astype(float), x.shape[:1]).copy()
    if kind == "ax":
        a = np.broadcast_to((np.asarray(arm) == 1).astype(float), x.shape[:1])
        return a * x[:, term["x_index"]]
    raise ValueError(f"unknown feature term kind '{kind}'")


@dataclass(frozen=True)
class FeatureSpec:
    """Ordered list of design terms over (x, s, arm) for survival models.

    Term kinds: x / s / xs (product) / a (arm dummy) / ax (arm x covariate).
    The arm dummy is I{A = approved} on historical two-arm data.
    """

    terms: tuple = ()

    def design(self, x: np.ndarray, s: np.ndarray, arm) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        s = np.asarray(s, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if not self.terms:
            return np.empty((x.shape[0], 0))
        return np.column_stack([_term_column(t, x, s, arm) for t in self.terms])

    @property
    def n_terms(self) -> int:
        return len(self.terms)


def fspec(*terms) -> FeatureSpec:
    return FeatureSpec(tuple(terms))


def parse_feature_terms(raw: Sequence[dict]) -> FeatureSpec:
    """Build a FeatureSpec from config-level dictionaries (validated)."""
    out = []
    for t in raw:
        kind = t.get("kind")
        if kind not in ("x", "s", "xs", "a", "ax"):
            raise ValueError(f"unknown feature term kind '{kind}'")
        out.append({k: (int(v) if k != "kind" else v) for k, v in t.items()})
    return FeatureSpec(tuple(out))


# ---------------------------------------------------------------------------
# logistic propensities
# ---------------------------------------------------------------------------
class BinaryTarget(enum.Enum):
    GAMMA_GIVEN_X = "GammaGivenX"
    ARM_GIVEN_X_BRIDGING = "ArmGivenXBridging"
    ARM_AND_GAMMA0_GIVEN_X = "ArmAndGamma0GivenX"


@dataclass
class BinaryModelFit:
    target: BinaryTarget
    coef: np.ndarray            # intercept first
    x_cols: tuple               # indices of covariates used (may be empty)

    def _design(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cols = [np.ones(x.shape[0])]
        cols.extend(x[:, j] for j in self.x_cols)
        return np.column_stack(cols)

    def predict_raw(self, x: np.ndarray) -> np.ndarray:
        eta = self._design(x) @ self.coef
        return 1.0 / (1.0 + np.exp(-eta))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.clip(self.predict_raw(x), P_MIN, 1.0 - P_MIN)


def fit_binary(target: BinaryTarget, x: np.ndarray, y: np.ndarray,
               x_cols: Optional[Sequence[int]] = None) -> BinaryModelFit:
    """Maximum-likelihood logistic fit by Newton iterations with step halving.

    Converged when the score max-norm drops below 1e-8; raises Separation on
    single-class input or diverging coefficients, RankDeficient on a singular
    design.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    if x_cols is None:
        x_cols = tuple(range(x.shape[1]))
    x_cols = tuple(x_cols)
    ones = np.ones((x.shape[0], 1))
    design = np.hstack([ones] + [x[:, [j]] for j in x_cols])
    n, p = design.shape
    if y.min() == y.max():
        raise Separation(f"{target.value}: single-class input")
    if np.linalg.matrix_rank(design) < p:
        raise RankDeficient(f"{target.value}: design matrix is rank deficient")

    def loglik(beta):
        eta = design @ beta
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)))

    beta = np.zeros(p)
    ll = loglik(beta)
    for _ in range(100):
        eta = design @ beta
        prob = 1.0 / (1.0 + np.exp(-eta))
        score = design.T @ (y - prob)
        if np.max(np.abs(score)) < 1e-8:
            return BinaryModelFit(target, beta, x_cols)
        w = prob * (1.0 - prob)
        hess = design.T @ (design * w[:, None])
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            raise Separation(f"{target.value}: singular Hessian (separated data)")
        # halve until the likelihood improves
        for _ in range(40):
            cand = beta + step
            ll_new = loglik(cand)
            if ll_new >= ll - 1e-12:
                break
            step = 0.5 * step
        beta, ll = cand, ll_new
        if np.max(np.abs(beta)) > 40.0:
            raise Separation(f"{target.value}: coefficients diverging (separation)")
    raise Separation(f"{target.value}: Newton iterations did not converge")


@dataclass
class ConstantBinaryFit:
    """Degenerate propensity (e.g. a single-arm bridging study): P = value."""

    target: BinaryTarget
    value: float

    def predict_raw(self, x):
        return np.full(np.atleast_2d(x).shape[0], self.value)

    def predict(self, x):
        return np.clip(self.predict_raw(x), P_MIN, 1.0 - P_MIN)


# ---------------------------------------------------------------------------
# conditional marker density
# ---------------------------------------------------------------------------
@dataclass
class ConditionalDensityFit:
    """Linear-Gaussian f(s | x) within one (arm, trial) stratum.

    beta has shape (1+len(x_cols), n_marker); sigma has shape (n_marker,).
    Marker coordinates are modeled as independent Gaussians.
    """

    arm: int
    gamma: int
    beta: np.ndarray
    sigma: np.ndarray
    x_cols: tuple

    def _design(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.column_stack([np.ones(x.shape[0])] + [x[:, j] for j in self.x_cols])

    def mean(self, x) -> np.ndarray:
        return self._design(x) @ self.beta

    def logpdf(self, x, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        z = (s - self.mean(x)) / self.sigma
        return np.sum(-0.5 * z * z - np.log(self.sigma) - 0.5 * np.log(2 * np.pi), axis=1)


def fit_conditional_density(stratum, x, s, x_cols=None) -> ConditionalDensityFit:
    """OLS mean with dof-corrected RMS residual scale, floored at SIGMA_MIN."""
    arm, gamma = stratum
    x = np.atleast_2d(np.asarray(x, dtype=float))
    s = np.asarray(s, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    if x_cols is None:
        x_cols = tuple(range(x.shape[1]))
    x_cols = tuple(x_cols)
    design = np.column_stack([np.ones(x.shape[0])] + [x[:, j] for j in x_cols])
    n, p = design.shape
    if n < p + 1:
        raise TooFewRows(f"stratum (arm={arm}, trial={gamma}): {n} rows for {p} parameters")
    beta, _, rank, _ = np.linalg.lstsq(design, s, rcond=None)
    if rank < p:
        raise RankDeficient(f"stratum (arm={arm}, trial={gamma}): rank {rank} < {p}")
    resid = s - design @ beta
    dof = max(n - p, 1)
    sigma = np.sqrt(np.sum(resid * resid, axis=0) / dof)
    return ConditionalDensityFit(arm, gamma, beta, np.maximum(sigma, SIGMA_MIN), x_cols)


# ---------------------------------------------------------------------------
# proportional hazards (Breslow)
# ---------------------------------------------------------------------------
class SurvivalKind(enum.Enum):
    EVENT = "Event"
    CENSORING = "Censoring"


@dataclass
class SurvivalFit:
    kind: SurvivalKind
    cause: Optional[int]
    features: FeatureSpec
    coef: np.ndarray
    times: np.ndarray        # ascending unique event times of the modeled type
    base_jumps: np.ndarray   # Breslow baseline hazard increments at `times`

    def linpred(self, x, s, arm) -> np.ndarray:
        if self.features.n_terms == 0:
            return np.zeros(np.atleast_2d(x).shape[0])
        return self.features.design(x, s, arm) @ self.coef

    def cum_base(self, t) -> np.ndarray:
        """Right-continuous baseline cumulative hazard at times t."""
        t = np.asarray(t, dtype=float)
        cum = np.concatenate([[0.0], np.cumsum(self.base_jumps)])
        return cum[np.searchsorted(self.times, t, side="right")]

    def cumhaz(self, t, x, s, arm) -> np.ndarray:
        """Lambda(t | x, s, arm): outer combination, shape (n, len(t))."""
        rel = np.exp(self.linpred(x, s, arm))
        return np.outer(rel, self.cum_base(np.atleast_1d(t)))

    def survival(self, t, x, s, arm) -> np.ndarray:
        return np.exp(-self.cumhaz(t, x, s, arm))


def fit_survival(kind: SurvivalKind, t_obs, delta, x, s, arm,
                 features: FeatureSpec, cause: Optional[int] = None,
                 admin_time: Optional[float] = None) -> SurvivalFit:
    """Partial-likelihood proportional-hazards fit with Breslow ties/baseline.

    kind EVENT with cause=k models delta==k as the event (all else censored);
    kind CENSORING models delta==0 as the event.  admin_time (censoring fits
    only) treats delta==0 rows at or beyond that time as administratively
    ended rather than censoring events, so a terminal atom cannot distort the
    fit; they stay in every risk set.  With an empty feature spec the baseline
    is exactly the Nelson-Aalen estimator.
    """
    t_obs = np.asarray(t_obs, dtype=float)
    delta = np.asarray(delta)
    if kind == SurvivalKind.CENSORING:
        event = delta == 0
        if admin_time is not None:
            event = event & (t_obs < admin_time)
    else:
        event = delta == (1 if cause is None else cause)
    if not event.any():
        raise NoEvents(f"{kind.value}{'' if cause is None else f' cause {cause}'}: "
                       "no events of the modeled type")
    design = features.design(x, s, arm)
    n, p = design.shape

    order = np.argsort(t_obs, kind="stable")
    ts, es, ds_mat = t_obs[order], event[order], design[order]
    uniq, first_idx = np.unique(ts, return_index=True)
    # events per unique time
    d_count = np.zeros(uniq.size)
    np.add.at(d_count, np.searchsorted(uniq, ts[es]), 1.0)
    is_event_time = d_count > 0

    def breslow_parts(beta):
        eta = ds_mat @ beta if p else np.zeros(n)
        w = np.exp(eta)
        s0 = np.cumsum(w[::-1])[::-1][first_idx]
        ll = float(np.sum(eta[es])) - float(np.sum(d_count[is_event_time]
                                                   * np.log(s0[is_event_time])))
        if p == 0:
            return ll, None, None, s0
        s1 = np.cumsum((w[:, None] * ds_mat)[::-1], axis=0)[::-1][first_idx]
        mean = s1 / s0[:, None]
        score = ds_mat[es].sum(axis=0) - (d_count[:, None] * mean)[is_event_time].sum(axis=0)
        outer = w[:, None, None] * (ds_mat[:, :, None] * ds_mat[:, None, :])
        s2 = np.cumsum(outer[::-1], axis=0)[::-1][first_idx]
        info = np.einsum("u,upq->pq", d_count, s2 / s0[:, None, None]) \
            - np.einsum("u,up,uq->pq", d_count, mean, mean)
        return ll, score, info, s0

    beta = np.zeros(p)
    if p:
        ll, score, info, _ = breslow_parts(beta)
        converged = False
        for _ in range(100):
            if np.max(np.abs(score)) < 1e-8:
                converged = True
                break
            try:
                step = np.linalg.solve(info, score)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(info, score, rcond=None)[0]
            # Newton decrement: scale-free stop when exp-weighted risk sums
            # leave the raw score above float noise at the optimum
            if abs(float(score @ step)) < 1e-10 * (1.0 + abs(ll)):
                converged = True
                break
            for _ in range(40):
                cand = beta + step
                ll_new, score_new, info_new, _ = breslow_parts(cand)
                if ll_new >= ll - 1e-12:
                    break
                step = 0.5 * step
            beta, ll, score, info = cand, ll_new, score_new, info_new
        if not converged:
            raise Nonconvergence(f"{kind.value}: partial-likelihood Newton did not converge")
    _, _, _, s0 = breslow_parts(beta)
    times = uniq[is_event_time]
    jumps = d_count[is_event_time] / s0[is_event_time]
    return SurvivalFit(kind, cause, features, beta, times, jumps)


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------
def make_folds(ds: FusedDataset, K: int, seed: int) -> np.ndarray:
    """Seeded stratified partition by (trial, arm); returns fold ids in 1..K."""
    if K < 2:
        raise CellTooSmall(f"K={K}: cross-fitting needs K >= 2")
    folds = np.zeros(ds.n, dtype=np.int64)
    cells = sorted({(int(g), int(a)) for g, a in zip(ds.gamma, ds.arm)})
    for ci, (g, a) in enumerate(cells):
        idx = np.flatnonzero((ds.gamma == g) & (ds.arm == a))
        if idx.size < K:
            raise CellTooSmall(f"cell (gamma={g}, arm={a}) has {idx.size} rows < K={K}")
        rng = np.random.default_rng(np.random.SeedSequence((seed, ci)))
        perm = rng.permutation(idx.size)
        folds[idx[perm]] = (np.arange(idx.size) % K) + 1
    return folds


# ---------------------------------------------------------------------------
# nuisance specification + bundle
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class NuisanceSpec:
    """Which features each nuisance model uses (misspecification = fewer)."""

    event_features: FeatureSpec
    cens_features: FeatureSpec
    gamma_x_cols: tuple = ()
    arm_x_cols: tuple = ()
    hist_x_cols: tuple = ()
    density_x_cols: tuple = ()
    # the historical marker density may be restricted separately (None means
    # "same columns as the bridging densities")
    hist_density_x_cols: Optional[tuple] = None
    gh_nodes: int = 32
    mc_draws: int = 256
    mc_seed: int = 1234
    cens_admin_time: Optional[float] = None


def default_spec(d: int, J: int = 1, cens_admin_time: Optional[float] = None) -> NuisanceSpec:
    """Rich generic default: x and s main effects plus arm interactions."""
    ev = [{"kind": "x", "index": j} for j in range(d)]
    ev += [{"kind": "s", "index": j} for j in range(J)]
    ev += [{"kind": "a"}]
    cen = [{"kind": "x", "index": j} for j in range(d)]
    cen += [{"kind": "s", "index": j} for j in range(J)]
    allx = tuple(range(d))
    return NuisanceSpec(event_features=FeatureSpec(tuple(ev)),
                        cens_features=FeatureSpec(tuple(cen)),
                        gamma_x_cols=allx, arm_x_cols=allx, hist_x_cols=allx,
                        density_x_cols=allx, cens_admin_time=cens_admin_time)


class NuisanceBundle:
    """One fold's fitted nuisances behind the evaluation protocol.

    The EIF code evaluates: kappa, propensities, marker log-density and
    integration nodes, the all-cause cumulative hazard and per-cause hazard
    increments on a shared event grid (always at the approved arm), and the
    censoring survival.  Oracle and toy bundles provide the same surface.
    """

    def __init__(self, fold: int, kappa: float, J: int,
                 gamma_fit, arm_fit, hist_fit,
                 density_fits: dict, event_fits: dict, cens_fit,
                 spec: NuisanceSpec):
        self.fold = fold
        self.kappa = kappa
        self.J = J
        self.gamma_fit = gamma_fit
        self.arm_fit = arm_fit
        self.hist_fit = hist_fit
        self.density_fits = density_fits      # keyed by (arm, gamma)
        self.event_fits = event_fits          # keyed by cause 1..J
        self.cens_fit = cens_fit
        self.spec = spec
        # fused grid over all causes (the EIF integrals run on this grid)
        self.grid = np.unique(np.concatenate([f.times for f in event_fits.values()]))
        self._mc_eps = None

    # propensities (raw values; clamping happens at use sites)
    def p_gamma(self, x):
        return self.gamma_fit.predict_raw(x)

    def p_arm_bridging(self, x, arm):
        p_inv = self.arm_fit.predict_raw(x)
        return p_inv if arm == 2 else 1.0 - p_inv

    def p_hist_approved(self, x):
        return self.hist_fit.predict_raw(x)

    # marker density
    def marker_logpdf(self, x, s, arm, gamma):
        return self.density_fits[(arm, gamma)].logpdf(x, s)

    def marker_integration_nodes(self, x, arm):
        """Nodes/weights for integrating against f(s | x, arm, bridging).

        Returns (nodes, weights): nodes (K, n, J), weights (K,).  Scalar
        markers use Gauss-Hermite; vector markers use fixed seeded draws.
        """
        fitd = self.density_fits[(arm, 1)]
        mean = fitd.mean(x)                      # (n, J)
        if self.J == 1:
            z, w = _gauss_hermite(self.spec.gh_nodes)
            nodes = mean[None, :, :] + np.sqrt(2.0) * fitd.sigma * z[:, None, None]
            return nodes, w / np.sqrt(np.pi)
        if self._mc_eps is None:
            rng = np.random.default_rng(self.spec.mc_seed)
            self._mc_eps = rng.standard_normal((self.spec.mc_draws, self.J))
        nodes = mean[None, :, :] + (self._mc_eps[:, None, :] * fitd.sigma)
        weights = np.full(self.spec.mc_draws, 1.0 / self.spec.mc_draws)
        return nodes, weights

    # survival pieces (always evaluated at the approved arm)
    def event_relrisk(self, x, s, cause):
        return np.exp(self.event_fits[cause].linpred(x, s, 1.0))

    def event_cum_at(self, x, s, times):
        """All-cause cumulative hazard, shape (n, len(times))."""
        times = np.atleast_1d(times)
        out = np.zeros((np.atleast_2d(x).shape[0], times.size))
        for k, f in self.event_fits.items():
            out += np.outer(np.exp(f.linpred(x, s, 1.0)), f.cum_base(times))
        return out

    def event_jumps_at_grid(self, x, s):
        """Per-cause hazard increments on self.grid: dict k -> (n, m)."""
        out = {}
        for k, f in self.event_fits.items():
            base = np.zeros(self.grid.size)
            pos = np.searchsorted(self.grid, f.times)
            base[pos] = f.base_jumps
            out[k] = np.outer(np.exp(f.linpred(x, s, 1.0)), base)
        return out

    def event_cum_rowwise(self, x, s, t):
        """All-cause cumulative hazard at each row's own time, shape (n,)."""
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape[0])
        for f in self.event_fits.values():
            out += np.exp(f.linpred(x, s, 1.0)) * f.cum_base(t)
        return out

    def cens_cum_at(self, x, s, times):
        return self.cens_fit.cumhaz(np.atleast_1d(times), x, s, 1.0)

    def cens_surv_at(self, x, s, times):
        return np.exp(-self.cens_cum_at(x, s, times))

    def cens_surv_rowwise(self, x, s, t):
        rel = np.exp(self.cens_fit.linpred(x, s, 1.0))
        return np.exp(-rel * self.cens_fit.cum_base(np.asarray(t, dtype=float)))


def fit_bundle(ds: FusedDataset, folds: np.ndarray, k: int,
               spec: NuisanceSpec) -> NuisanceBundle:
    """Fit every nuisance on the rows outside fold k."""
    train = folds != k
    if not train.any() or train.all():
        raise CellTooSmall(f"fold {k}: empty training or held-out set")
    x, s = ds.x[train], ds.s[train]
    gamma, arm = ds.gamma[train], ds.arm[train]
    t_obs, delta = ds.t_obs[train], ds.delta[train]

    gamma_fit = fit_binary(BinaryTarget.GAMMA_GIVEN_X, x, gamma == 1,
                           x_cols=spec.gamma_x_cols)
    bmask = gamma == 1
    bridge_arms = np.unique(arm[bmask])
    if bridge_arms.size == 1:
        arm_fit = ConstantBinaryFit(BinaryTarget.ARM_GIVEN_X_BRIDGING,
                                    1.0 if bridge_arms[0] == 2 else 0.0)
    else:
        arm_fit = fit_binary(BinaryTarget.ARM_GIVEN_X_BRIDGING,
                             x[bmask], arm[bmask] == 2, x_cols=spec.arm_x_cols)
    hist_fit = fit_binary(BinaryTarget.ARM_AND_GAMMA0_GIVEN_X, x,
                          (gamma == 0) & (arm == 1), x_cols=spec.hist_x_cols)

    density_fits = {}
    strata = [(1, 0)] + [(int(a), 1) for a in bridge_arms]
    hist_cols = spec.hist_density_x_cols
    if hist_cols is None:
        hist_cols = spec.density_x_cols
    for (a, g) in strata:
        m = (arm == a) & (gamma == g)
        cols = hist_cols if g == 0 else spec.density_x_cols
        density_fits[(a, g)] = fit_conditional_density(
            (a, g), x[m], s[m], x_cols=cols)

    hmask = gamma == 0
    event_fits = {}
    for cause in range(1, ds.J + 1):
        event_fits[cause] = fit_survival(
            SurvivalKind.EVENT, t_obs[hmask], delta[hmask], x[hmask], s[hmask],
            (arm[hmask] == 1).astype(float), spec.event_features,
            cause=None if ds.J == 1 else cause)
    try:
        cens_fit = fit_survival(
            SurvivalKind.CENSORING, t_obs[hmask], delta[hmask], x[hmask], s[hmask],
            (arm[hmask] == 1).astype(float), spec.cens_features,
            admin_time=spec.cens_admin_time)
    except NoEvents:
        # censoring-free historical data: G^C is identically 1
        cens_fit = SurvivalFit(SurvivalKind.CENSORING, None, fspec(),
                               np.zeros(0), np.zeros(0), np.zeros(0))

    return NuisanceBundle(k, ds.kappa_hat, ds.J, gamma_fit, arm_fit, hist_fit,
                          density_fits, event_fits, cens_fit, spec)
