"""Simulation laboratory: data generation, brute-force truths, replication studies.

The generator draws from a six-covariate two-trial design: a historical trial
with exponential event and censoring hazards (administrative cutoff on top)
and an immunobridging trial carrying markers only.  Truths come from a
Monte Carlo oracle over the counterfactual marker-mediated law, closed-form
nuisances are wrapped behind the bundle protocol for oracle-mode estimation,
and run_study produces the summary table of a bias/coverage replication
study on the survival scale.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from fusioncurve.dataset import ArmLabel, FusedDataset, SubjectRecord, TrialIndicator
from fusioncurve.errors import FusionError
from fusioncurve.estimator import EstimatorConfig, _run_tasks, estimate_curve
from fusioncurve.nuisance import NuisanceSpec, _gauss_hermite, parse_feature_terms

log = logging.getLogger(__name__)

_MU_SCALE = np.array([1.0, 1.0, 1.0, 0.8, 0.8, 0.8])
_X_SD = math.sqrt(0.5)


@dataclass(frozen=True)
class DgpConfig:
    """Scenario knobs for the simulated two-trial design.

    `c` shifts the covariate means (overlap difficulty), `n_b` defaults to
    n_h/4, `J` extends to competing causes (cause-k coefficients scaled by
    0.5^(k-1), marker coordinate k likewise).
    """

    c: float = 0.0
    n_h: int = 1000
    n_b: Optional[int] = None
    seed: object = 0
    J: int = 1
    h_admin: float = 5.5

    def __post_init__(self):
        if self.c < 0:
            raise ValueError(f"overlap parameter c must be >= 0, got {self.c}")
        if self.n_h < 8:
            raise ValueError(f"n_h too small: {self.n_h}")
        if self.J < 1:
            raise ValueError(f"J must be >= 1, got {self.J}")

    @property
    def n_bridge(self) -> int:
        return self.n_h // 4 if self.n_b is None else self.n_b

    @property
    def kappa(self) -> float:
        return self.n_bridge / (self.n_h + self.n_bridge)


def _mu(c):
    return c * _MU_SCALE


def _cause_scales(J):
    return 0.5 ** np.arange(J)


def _hist_marker_mean(x, a):
    # base marker mean in the historical trial; a is 0/1
    return (2.0 + 0.5 * x[:, 0] - x[:, 1] + 1.5 * x[:, 2]
            + a * (x[:, 1] - 0.5 * x[:, 3] + 1.5 * x[:, 4] - x[:, 5]))


def _bridge_marker_mean(x, a):
    # a is 1 (approved) or 2 (investigational); the arm multiplier is 1 or 2
    mult = np.where(np.asarray(a) == 2, 2.0, 1.0)
    return (4.0 + 1.5 * x[:, 0] - x[:, 2] + 1.5 * x[:, 5]
            + mult * (0.5 * x[:, 1] + 0.5 * x[:, 2] + 0.5 * x[:, 3] - x[:, 5]))


def _event_rates(x, s, a, J):
    """Cause-specific exponential rates (n, J); `a` is the 0/1 approved dummy."""
    s = np.atleast_2d(s.T).T  # (n, J)
    base_x = 0.5 * x[:, 0] - 0.5 * x[:, 4]
    inter = 1.3 * x[:, 1] + 0.4 * x[:, 3]
    arm_part = 0.2 * x[:, 1] + 0.6 * x[:, 2] - 1.2 * x[:, 5]
    out = np.empty((x.shape[0], J))
    for k, scale in enumerate(_cause_scales(J)):
        lin = scale * base_x + 0.3 * s[:, k] * scale * inter + a * scale * arm_part
        out[:, k] = 0.1 * np.exp(lin)
    return out


def _censor_rate(x, s):
    s0 = s[:, 0] if s.ndim == 2 else s
    return 0.03 * np.exp(-0.4 * x[:, 1] + 0.1 * s0)


def generate(cfg: DgpConfig) -> FusedDataset:
    """One fused dataset drawn from the simulation design.

    Historical rows carry (x, a in {0,1}, s, observed time, event type) with
    the administrative cutoff applied on top of random censoring; bridging
    rows carry (x, a in {1,1'}, s) only.  Same seed, same dataset.
    """
    rng = np.random.default_rng(cfg.seed)
    n_h, n_b, J = cfg.n_h, cfg.n_bridge, cfg.J
    scales = _cause_scales(J)

    xh = rng.normal(_mu(cfg.c), _X_SD, size=(n_h, 6))
    ah = rng.integers(0, 2, size=n_h)
    sh = scales * _hist_marker_mean(xh, ah)[:, None] + rng.normal(size=(n_h, J))
    rates = _event_rates(xh, sh, ah, J)
    latent = rng.exponential(1.0, size=(n_h, J)) / rates
    t_event = latent.min(axis=1)
    cause = latent.argmin(axis=1) + 1
    t_cens = rng.exponential(1.0 / _censor_rate(xh, sh))
    cutoff = np.minimum(t_cens, cfg.h_admin)
    t_obs = np.minimum(t_event, cutoff)
    delta = np.where(t_event <= cutoff, cause, 0)

    xb = rng.normal(_mu(cfg.c), _X_SD, size=(n_b, 6))
    ab = rng.integers(1, 3, size=n_b)
    sb = scales * _bridge_marker_mean(xb, ab)[:, None] + rng.normal(size=(n_b, J))

    recs = [SubjectRecord(tuple(xh[i]), ArmLabel(int(ah[i])), TrialIndicator.HISTORICAL,
                          tuple(sh[i]), float(t_obs[i]), int(delta[i]))
            for i in range(n_h)]
    recs += [SubjectRecord(tuple(xb[i]), ArmLabel(int(ab[i])), TrialIndicator.BRIDGING,
                           tuple(sb[i]))
             for i in range(n_b)]
    horizon = min(cfg.h_admin, float(t_obs.max()))
    return FusedDataset(recs, horizon, n_causes=J)


# ---------------------------------------------------------------------------
# truths
# ---------------------------------------------------------------------------
@dataclass
class OracleTruth:
    """Monte Carlo truth with its simulation standard error."""

    value: object          # float, or ndarray when t is a grid
    mc_se: object
    draws: int


def oracle_truth(cfg: DgpConfig, a, t, j: Optional[int] = None,
                 draws: int = 10 ** 6, seed: int = 1) -> OracleTruth:
    """Brute-force counterfactual truth P(T(a) <= t) in the bridging population.

    Draws bridging-law covariates and arm-`a` markers, then event times from
    the historical approved-arm law at those (x, s) — the mediation
    functional — with no censoring.  `t` may be a scalar or a grid (shared
    draws, so the curve is monotone by construction); `j` picks one cause.
    """
    if draws < 10 ** 5:
        raise ValueError(f"need at least 1e5 oracle draws, got {draws}")
    if int(a) not in (1, 2):
        raise ValueError(f"counterfactual arm must be 1 or 2, got {a}")
    J = cfg.J
    if j is not None and not (1 <= j <= J):
        raise ValueError(f"cause {j} outside 1..{J}")
    rng = np.random.default_rng(seed)
    scales = _cause_scales(J)
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))

    x = rng.normal(_mu(cfg.c), _X_SD, size=(draws, 6))
    arm = np.full(draws, int(a))
    s = scales * _bridge_marker_mean(x, arm)[:, None] + rng.normal(size=(draws, J))
    rates = _event_rates(x, s, 1, J)          # historical law, approved arm
    latent = rng.exponential(1.0, size=(draws, J)) / rates
    t_event = latent.min(axis=1)
    hit_cause = latent.argmin(axis=1) + 1

    vals = np.empty(t_arr.size)
    ses = np.empty(t_arr.size)
    for i, ti in enumerate(t_arr):
        ind = (t_event <= ti) if j is None else ((t_event <= ti) & (hit_cause == j))
        p = ind.mean()
        vals[i] = p
        ses[i] = math.sqrt(max(p * (1.0 - p), 0.0) / draws)
    if np.isscalar(t) or np.asarray(t).ndim == 0:
        return OracleTruth(float(vals[0]), float(ses[0]), draws)
    return OracleTruth(vals, ses, draws)


# ---------------------------------------------------------------------------
# closed-form nuisances behind the bundle protocol
# ---------------------------------------------------------------------------
class OracleBundle:
    """True design probabilities and hazards wrapped for the influence code.

    Continuous hazards are exposed exactly through the cumulative-hazard and
    survival methods; the martingale integrals run over a dense uniform grid
    whose spacing bounds the discretization error.
    """

    fold = None

    def __init__(self, cfg: DgpConfig, grid_points: int = 1500,
                 gh_nodes: int = 32, mc_draws: int = 256, mc_seed: int = 1234):
        self.cfg = cfg
        self.J = cfg.J
        self.kappa = cfg.kappa
        self.grid = np.linspace(cfg.h_admin / grid_points, cfg.h_admin, grid_points)
        self._gh_nodes = gh_nodes
        self._mc_draws = mc_draws
        self._mc_seed = mc_seed
        self._mc_eps = None
        self._scales = _cause_scales(cfg.J)

    # propensities: randomized design, constant in x
    def p_gamma(self, x):
        return np.full(np.atleast_2d(x).shape[0], self.kappa)

    def p_arm_bridging(self, x, arm):
        return np.full(np.atleast_2d(x).shape[0], 0.5)

    def p_hist_approved(self, x):
        return np.full(np.atleast_2d(x).shape[0], (1.0 - self.kappa) * 0.5)

    # marker law: per-coordinate Gaussians, unit residual scale
    def _marker_mean(self, x, arm, gamma):
        x = np.atleast_2d(x)
        if gamma == 1:
            base = _bridge_marker_mean(x, np.full(x.shape[0], int(arm)))
        else:
            base = _hist_marker_mean(x, 1 if int(arm) == 1 else 0)
        return self._scales * base[:, None]

    def marker_logpdf(self, x, s, arm, gamma):
        s = np.asarray(s, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        z = s - self._marker_mean(x, arm, gamma)
        return np.sum(-0.5 * z * z - 0.5 * math.log(2 * math.pi), axis=1)

    def marker_integration_nodes(self, x, arm):
        mean = self._marker_mean(x, arm, 1)
        if self.J == 1:
            z, w = _gauss_hermite(self._gh_nodes)
            nodes = mean[None, :, :] + math.sqrt(2.0) * z[:, None, None]
            return nodes, w / math.sqrt(math.pi)
        if self._mc_eps is None:
            rng = np.random.default_rng(self._mc_seed)
            self._mc_eps = rng.standard_normal((self._mc_draws, self.J))
        nodes = mean[None, :, :] + self._mc_eps[:, None, :]
        return nodes, np.full(self._mc_draws, 1.0 / self._mc_draws)

    # event law at the approved arm
    def _rates(self, x, s):
        s = np.asarray(s, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        return _event_rates(np.atleast_2d(x), s, 1, self.J)

    def event_cum_at(self, x, s, times):
        tot = self._rates(x, s).sum(axis=1)
        return np.outer(tot, np.atleast_1d(times))

    def event_cum_rowwise(self, x, s, t):
        return self._rates(x, s).sum(axis=1) * np.asarray(t, dtype=float)

    def event_jumps_at_grid(self, x, s):
        rates = self._rates(x, s)
        widths = np.diff(self.grid, prepend=0.0)
        return {k + 1: np.outer(rates[:, k], widths) for k in range(self.J)}

    # censoring law (the random part; the administrative cutoff is the horizon)
    def cens_surv_at(self, x, s, times):
        lam = _censor_rate(np.atleast_2d(x), np.atleast_2d(np.asarray(s, dtype=float)))
        return np.exp(-np.outer(lam, np.atleast_1d(times)))

    def cens_surv_rowwise(self, x, s, t):
        lam = _censor_rate(np.atleast_2d(x), np.atleast_2d(np.asarray(s, dtype=float)))
        return np.exp(-lam * np.asarray(t, dtype=float))


def oracle_nuisances(cfg: DgpConfig, grid_points: int = 1500) -> OracleBundle:
    """The exact DGP nuisances as a bundle-compatible object (oracle mode)."""
    return OracleBundle(cfg, grid_points=grid_points)


# ---------------------------------------------------------------------------
# correctly specified parametric feature sets
# ---------------------------------------------------------------------------
def dgp_spec(J: int = 1) -> NuisanceSpec:
    """Feature specs matching the simulation design's true functional forms."""
    ev = [{"kind": "x", "index": 0}, {"kind": "x", "index": 4}]
    for k in range(J):
        ev += [{"kind": "xs", "x_index": 1, "s_index": k},
               {"kind": "xs", "x_index": 3, "s_index": k}]
    ev += [{"kind": "ax", "x_index": 1}, {"kind": "ax", "x_index": 2},
           {"kind": "ax", "x_index": 5}]
    cen = [{"kind": "x", "index": 1}, {"kind": "s", "index": 0}]
    return NuisanceSpec(event_features=parse_feature_terms(ev),
                        cens_features=parse_feature_terms(cen),
                        gamma_x_cols=(), arm_x_cols=(), hist_x_cols=(),
                        density_x_cols=tuple(range(6)),
                        cens_admin_time=5.5)


# ---------------------------------------------------------------------------
# two-arm outcome trial for the falsification-test calibration
# ---------------------------------------------------------------------------
def generate_two_arm(n: int, c: float = 0.0, direct_effect: float = 0.0,
                     seed: object = 0, h_admin: float = 5.5):
    """A two-arm trial where both arms carry outcomes (falsification-test input).

    Covariates and markers follow the bridging design; event times come from
    the historical approved-arm law at (x, s) — so the null of no direct
    effect holds at direct_effect=0 — times a hazard factor
    exp(direct_effect) on the investigational arm otherwise.
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(_mu(c), _X_SD, size=(n, 6))
    arm = rng.integers(1, 3, size=n)
    s = _bridge_marker_mean(x, arm) + rng.normal(size=n)
    lam = _event_rates(x, s[:, None], 1, 1)[:, 0] * np.exp(
        direct_effect * (arm == 2))
    t_event = rng.exponential(1.0 / lam)
    t_cens = np.minimum(rng.exponential(1.0 / _censor_rate(x, s[:, None])), h_admin)
    t_obs = np.minimum(t_event, t_cens)
    delta = (t_event <= t_cens).astype(int)
    return [SubjectRecord(tuple(x[i]), ArmLabel(int(arm[i])),
                          TrialIndicator.HISTORICAL, (float(s[i]),),
                          float(t_obs[i]), int(delta[i]))
            for i in range(n)]


def two_arm_spec() -> NuisanceSpec:
    """Correct features for the two-arm trial's single-arm event/censoring laws."""
    ev = [{"kind": "x", "index": 0}, {"kind": "x", "index": 4},
          {"kind": "xs", "x_index": 1, "s_index": 0},
          {"kind": "xs", "x_index": 3, "s_index": 0},
          {"kind": "x", "index": 1}, {"kind": "x", "index": 2},
          {"kind": "x", "index": 5}]
    cen = [{"kind": "x", "index": 1}, {"kind": "s", "index": 0}]
    return NuisanceSpec(event_features=parse_feature_terms(ev),
                        cens_features=parse_feature_terms(cen),
                        gamma_x_cols=(), arm_x_cols=(), hist_x_cols=(),
                        density_x_cols=tuple(range(6)))


# ---------------------------------------------------------------------------
# replication study
# ---------------------------------------------------------------------------
@dataclass
class SimulationSummary:
    """Survival-scale summary of a replication study, one row per scenario."""

    target_time: float
    arm: int
    level: float
    reps: int
    seed: int
    rows: list = field(default_factory=list)

    _COLS = ("n_h", "c", "mean", "median", "bias", "pct_bias", "rmse",
             "avg_se", "coverage")

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(self._COLS) + "\n")
            for row in self.rows:
                fh.write(",".join(repr(row[k]) if isinstance(row[k], float)
                                  else str(row[k]) for k in self._COLS) + "\n")

    def to_json_dict(self) -> dict:
        return {"schema_version": 1, "scale": "survival",
                "target_time": self.target_time, "arm": int(self.arm),
                "level": self.level, "reps": self.reps, "seed": self.seed,
                "rows": [dict(r) for r in self.rows]}


def _study_rep(task):
    cfg, child, spec, t, K, level = task
    try:
        ds = generate(DgpConfig(c=cfg.c, n_h=cfg.n_h, n_b=cfg.n_b, seed=child,
                                J=cfg.J, h_admin=cfg.h_admin))
        rep_seed = int(child.generate_state(1)[0] % (2 ** 31))
        est_cfg = EstimatorConfig(K=K, seed=rep_seed, times=[t], times_only=True,
                                  arms=(ArmLabel.INVESTIGATIONAL,), spec=spec,
                                  level=level, band_draws=0)
        curve, _ = estimate_curve(ds, est_cfg)
        return float(curve.estimate[0, 0, 0]), float(curve.se[0, 0, 0])
    except (FusionError, np.linalg.LinAlgError) as exc:
        return ("fail", f"{type(exc).__name__}: {exc}")


def run_study(scenarios: Sequence, reps: int, target_time: float = 5.0,
              J: int = 1, K: int = 5, level: float = 0.95, seed: int = 0,
              spec: Optional[NuisanceSpec] = None, truth_draws: int = 10 ** 6,
              threads: Optional[int] = None) -> SimulationSummary:
    """Bias/coverage replication study over (n_h, c) scenarios.

    Per scenario: generate, estimate the incidence at `target_time` for the
    investigational arm with cross-fitted correctly-specified parametric
    nuisances, and compare with the Monte Carlo truth.  Summaries are on the
    survival scale (estimate 1 - R-hat against truth 1 - theta).  Failed
    replications are logged, excluded and counted.  Output is independent of
    `threads`.
    """
    if reps < 1:
        raise ValueError("need at least one replication")
    spec = spec if spec is not None else dgp_spec(J)
    z = float(norm.ppf(0.5 + level / 2.0))
    summary = SimulationSummary(float(target_time), int(ArmLabel.INVESTIGATIONAL),
                                level, reps, seed)
    for si, (n_h, c) in enumerate(scenarios):
        cfg = DgpConfig(c=float(c), n_h=int(n_h), seed=0, J=J)
        truth = oracle_truth(cfg, a=2, t=target_time, draws=truth_draws,
                             seed=seed + 7919 * (si + 1))
        surv_truth = 1.0 - truth.value
        children = np.random.SeedSequence((seed, si)).spawn(reps)
        tasks = [(cfg, child, spec, float(target_time), K, level)
                 for child in children]
        results = _run_tasks(_study_rep, tasks, threads)
        fails = [r[1] for r in results if isinstance(r, tuple) and r[0] == "fail"]
        good = [r for r in results if not (isinstance(r, tuple) and r[0] == "fail")]
        for msg in fails:
            log.warning("replication failed in scenario (n_h=%s, c=%s): %s",
                        n_h, c, msg)
        if not good:
            raise FusionError(f"all replications failed in scenario (n_h={n_h}, c={c})")
        surv = np.array([1.0 - est for est, _ in good])
        ses = np.array([se for _, se in good])
        R = len(good)
        mean = math.fsum(surv) / R
        covered = np.abs(surv - surv_truth) <= z * ses
        bias = mean - surv_truth
        row = {"n_h": int(n_h), "c": float(c),
               "mean": mean, "median": float(np.median(surv)),
               "bias": bias, "pct_bias": 100.0 * bias / surv_truth,
               "rmse": math.sqrt(math.fsum((surv - surv_truth) ** 2) / R),
               "avg_se": math.fsum(ses) / R,
               "coverage": math.fsum(covered) / R,
               "truth": surv_truth, "truth_mc_se": truth.mc_se,
               "n_failed": len(fails), "n_used": R}
        summary.rows.append(row)
    return summary
