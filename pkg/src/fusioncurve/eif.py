"""Plug-in functionals and efficient-influence-function evaluation.

Three algebraically equivalent plug-in forms of the bridging-arm risk
(mediation, outcome-regression, and reweighting) are provided alongside the
one-step influence evaluations: the censored single-endpoint form, its
complete-data outcome-residual counterpart, and the cause-specific competing
form.  Everything consumes an immutable nuisance bundle (fitted, oracle, or
discrete-toy) through the same small protocol, so one code path serves
estimation, reductions, and the exact pathwise-derivative certification.

Conventions baked in here:
  - the event model is always evaluated at the approved arm; bridging arms
    differ only through the marker distribution;
  - all time integrals are sums over the bundle's hazard-jump grid, with the
    survival compensator written in telescoping increments
    exp(Lam(u)) - exp(Lam(u-)) so the censoring-free case reduces exactly;
  - truncation (propensity floors, censoring floor, density-ratio cap) happens
    here at the point of use; bundles return raw values.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

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
from fusioncurve.nuisance import G_MIN, P_MIN, RATIO_CAP

LAM_CAP = 200.0       # cumulative-hazard ceiling (keeps exp() finite)
ATOM_CAP = 50.0       # pseudo-hazard increment for a probability-one toy atom
_CHUNK_CELLS = 25_000_000   # target elements per row-chunk in grid work


# ---------------------------------------------------------------------------
# time grid + influence matrix containers
# ---------------------------------------------------------------------------
def time_grid(values, horizon: float) -> np.ndarray:
    """Validated evaluation grid: sorted distinct times in (0, horizon]."""
    t = np.unique(np.asarray(values, dtype=float))
    if t.size == 0:
        raise ValueError("empty time grid")
    if t[0] <= 0.0 or not np.all(np.isfinite(t)):
        raise ValueError("grid times must be positive and finite")
    if t[-1] > horizon:
        raise GridBeyondHorizon(f"grid point {t[-1]} exceeds horizon {horizon}")
    return t


@dataclass
class EifMatrix:
    """Uncentered influence evaluations, indexed (subject, time, arm, cause).

    Column means are the one-step estimates by construction; `estimates`
    recomputes them, and the exporter writes the long audit format.  When
    `gamma` is given, variances center within each trial: the fused design
    fixes both study sizes, so the between-trial component of the influence
    spread does not contribute to the sampling variance of the estimate.
    """

    values: np.ndarray                 # (n, m, n_arms, n_causes)
    times: np.ndarray                  # (m,)
    arms: tuple                        # arm codes, e.g. (2,) or (1, 2)
    causes: tuple                      # (None,) single endpoint, else (1..J)
    gamma: Optional[np.ndarray] = None  # per-row trial indicator, 0/1

    @property
    def estimates(self) -> np.ndarray:
        return self.values.mean(axis=0)

    def residuals(self) -> np.ndarray:
        """Influence values centered overall, or per trial when gamma is set."""
        if self.gamma is None:
            return self.values - self.values.mean(axis=0)
        out = np.empty_like(self.values)
        for g in (0, 1):
            rows = self.gamma == g
            out[rows] = self.values[rows] - self.values[rows].mean(axis=0)
        return out

    def se(self) -> np.ndarray:
        n = self.values.shape[0]
        ddof = 1 if self.gamma is None else 2
        resid = self.residuals()
        return np.sqrt((resid ** 2).sum(axis=0) / (n - ddof)) / math.sqrt(n)

    def write_csv(self, path, subject_ids: Optional[Sequence] = None) -> None:
        from fusioncurve.dataset import _ARM_TEXT, ArmLabel
        n = self.values.shape[0]
        ids = subject_ids if subject_ids is not None else range(n)
        with open(path, "w") as fh:
            fh.write("subject_id,arm,time,cause,phi\n")
            for i, sid in enumerate(ids):
                for ti, t in enumerate(self.times):
                    for ai, a in enumerate(self.arms):
                        for ci, c in enumerate(self.causes):
                            cause = "" if c is None else str(c)
                            code = _ARM_TEXT[ArmLabel(a)]
                            phi = float(self.values[i, ti, ai, ci])
                            fh.write(f"{sid},{code},{float(t)!r},{cause},"
                                     f"{phi!r}\n")


def new_tally() -> dict:
    return {"density_ratio_capped": 0, "cens_floored": 0,
            "prop_floored": 0, "lam_capped": 0}


def _bump(tally, key, amount):
    if tally is not None and amount:
        tally[key] += int(amount)


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------
def _clip_div(p, lo, tally=None, key="prop_floored"):
    p = np.asarray(p, dtype=float)
    _bump(tally, key, np.count_nonzero(p < lo))
    return np.clip(p, lo, 1.0)


def _cap_lam(lam, tally=None):
    _bump(tally, "lam_capped", np.count_nonzero(lam > LAM_CAP))
    return np.minimum(lam, LAM_CAP)


def _hist_weight(bundle, x, s, a, tally=None):
    """w_h on historical approved rows: trial-odds times marker-density ratio."""
    pg = np.clip(bundle.p_gamma(x), P_MIN, 1.0 - P_MIN)
    ph = _clip_div(bundle.p_hist_approved(x), P_MIN, tally)
    logratio = bundle.marker_logpdf(x, s, a, 1) - bundle.marker_logpdf(x, s, 1, 0)
    with np.errstate(over="ignore"):
        rho = np.exp(logratio)
    _bump(tally, "density_ratio_capped", np.count_nonzero(rho > RATIO_CAP))
    rho = np.clip(rho, 0.0, RATIO_CAP)
    return pg / (bundle.kappa * ph) * rho


def _arm_gate(bundle, x, a, tally=None):
    p_arm = _clip_div(bundle.p_arm_bridging(x, a), P_MIN, tally)
    return 1.0 / (bundle.kappa * p_arm)


def _node_weights(wts, k):
    w = np.asarray(wts[k])
    return w if w.ndim == 0 else w[:, None]


def _sbar_survival(bundle, x, taus, a, tally=None):
    """Marker-integrated survival at the approved-arm event law, shape (n, m)."""
    nodes, wts = bundle.marker_integration_nodes(x, a)
    out = np.zeros((x.shape[0], np.atleast_1d(taus).size))
    for k in range(nodes.shape[0]):
        lam = _cap_lam(bundle.event_cum_at(x, nodes[k], taus), tally)
        out += np.exp(-lam) * _node_weights(wts, k)
    return out


def _positions(grid, taus):
    return np.searchsorted(grid, np.atleast_1d(taus), side="right") - 1


def _pick(cum, pos):
    out = np.zeros((cum.shape[0], pos.size))
    ok = pos >= 0
    if ok.any():
        out[:, ok] = cum[:, pos[ok]]
    return out


def _pick_rowwise(cum, pos):
    n = cum.shape[0]
    safe = np.clip(pos, 0, cum.shape[1] - 1)
    return np.where(pos >= 0, cum[np.arange(n), safe], 0.0)


def _row_chunks(n, width):
    size = max(256, _CHUNK_CELLS // max(width, 1))
    for lo in range(0, n, size):
        yield lo, min(lo + size, n)


def _hist_surv_mart(bundle, x, s, t_obs, is_event, taus, tally=None):
    """Counting-process jump and compensator of the survival augmentation.

    Returns (jump, comp), each (n, m); the displayed term is comp - jump.
    """
    taus = np.atleast_1d(taus)
    n, m = x.shape[0], taus.size
    grid = bundle.grid
    jump = np.zeros((n, m))
    comp = np.zeros((n, m))
    pos = _positions(grid, taus)
    for lo, hi in _row_chunks(n, grid.size):
        xc, sc, tc = x[lo:hi], s[lo:hi], t_obs[lo:hi]
        lam_g = _cap_lam(bundle.event_cum_at(xc, sc, grid), tally)
        e_right = np.exp(lam_g)
        e_left = np.exp(np.concatenate(
            [np.zeros((xc.shape[0], 1)), lam_g[:, :-1]], axis=1))
        gc_g = _clip_div(bundle.cens_surv_at(xc, sc, grid), G_MIN, tally,
                         "cens_floored")
        mask = grid[None, :] <= tc[:, None]
        acc = np.cumsum(np.where(mask, (e_right - e_left) / gc_g, 0.0), axis=1)
        lam_tau = _cap_lam(bundle.event_cum_at(xc, sc, taus), tally)
        comp[lo:hi] = np.exp(-lam_tau) * _pick(acc, pos)
        lam_t = _cap_lam(bundle.event_cum_rowwise(xc, sc, tc), tally)
        gc_t = _clip_div(bundle.cens_surv_rowwise(xc, sc, tc), G_MIN, tally,
                         "cens_floored")
        jump[lo:hi] = (is_event[lo:hi, None]
                       * (tc[:, None] <= taus[None, :])
                       * np.exp(lam_t[:, None] - lam_tau)
                       / gc_t[:, None])
    return jump, comp


def _cif_at(bundle, x, s, taus, causes, tally=None):
    """Cause-specific cumulative incidence F^j(tau | x, approved arm, s).

    Shape (n, m, C); increments dF^j = (G(u-) - G(u)) * dLam^j / dLam on the
    bundle grid, so the causes sum exactly to 1 - exp(-Lam).
    """
    taus = np.atleast_1d(taus)
    n, m = x.shape[0], taus.size
    grid = bundle.grid
    out = np.zeros((n, m, len(causes)))
    pos = _positions(grid, taus)
    for lo, hi in _row_chunks(n, grid.size * len(causes)):
        xc, sc = x[lo:hi], s[lo:hi]
        jumps = bundle.event_jumps_at_grid(xc, sc)
        dtot = sum(jumps[k] for k in jumps)
        lam = _cap_lam(np.cumsum(dtot, axis=1), tally)
        g_right = np.exp(-lam)
        g_left = np.exp(-np.concatenate(
            [np.zeros((xc.shape[0], 1)), lam[:, :-1]], axis=1))
        dmass = g_left - g_right
        safe = np.where(dtot > 0.0, dtot, 1.0)
        for ci, j in enumerate(causes):
            share = np.where(dtot > 0.0, jumps[j] / safe, 0.0)
            out[lo:hi, :, ci] = _pick(np.cumsum(dmass * share, axis=1), pos)
    return out


def _sbar_cif(bundle, x, taus, a, causes, tally=None):
    """Marker-integrated cause-specific incidence, shape (n, m, C)."""
    nodes, wts = bundle.marker_integration_nodes(x, a)
    out = np.zeros((x.shape[0], np.atleast_1d(taus).size, len(causes)))
    for k in range(nodes.shape[0]):
        w = _node_weights(wts, k)
        out += _cif_at(bundle, x, nodes[k], taus, causes, tally) * \
            (w[..., None] if w.ndim == 2 else w)
    return out


# ---------------------------------------------------------------------------
# influence evaluations (vectorized over rows x grid)
# ---------------------------------------------------------------------------
def _phi_censored_cols(bundle, cols, a, taus, tally=None):
    x, s, gamma, arm, t_obs, delta = cols
    taus = np.atleast_1d(taus)
    n, m = x.shape[0], taus.size
    kappa = bundle.kappa
    phi = np.ones((n, m))

    bmask = gamma == 1
    if bmask.any():
        gbar = _sbar_survival(bundle, x[bmask], taus, a, tally)
        phi[bmask] -= gbar / kappa
        amask = bmask & (arm == a)
        if amask.any():
            sel = amask[bmask]
            g_obs = np.exp(-_cap_lam(
                bundle.event_cum_at(x[amask], s[amask], taus), tally))
            gate = _arm_gate(bundle, x[amask], a, tally)
            phi[amask] -= gate[:, None] * (g_obs - gbar[sel])

    hmask = (gamma == 0) & (arm == 1)
    if hmask.any():
        w_h = _hist_weight(bundle, x[hmask], s[hmask], a, tally)
        jump, comp = _hist_surv_mart(bundle, x[hmask], s[hmask], t_obs[hmask],
                                     (delta[hmask] >= 1).astype(float),
                                     taus, tally)
        phi[hmask] -= w_h[:, None] * (comp - jump)
    return phi


def _mu_complete(bundle, x, s, taus, y, tally=None):
    """Conditional mean of y(T) under the approved-arm event law.

    y=None means the threshold family y(T)=I{T<=tau}, returning (n, m);
    a callable y (accepting +inf) integrates over the grid atoms, (n, 1).
    """
    if y is None:
        lam = _cap_lam(bundle.event_cum_at(x, s, np.atleast_1d(taus)), tally)
        return 1.0 - np.exp(-lam)
    grid = bundle.grid
    lam = _cap_lam(bundle.event_cum_at(x, s, grid), tally)
    g_right = np.exp(-lam)
    g_left = np.exp(-np.concatenate([np.zeros((x.shape[0], 1)), lam[:, :-1]],
                                    axis=1))
    yvals = np.asarray([float(y(u)) for u in grid])
    mu = (g_left - g_right) @ yvals + g_right[:, -1] * float(y(np.inf))
    return mu[:, None]


def _sbar_complete(bundle, x, taus, a, y, tally=None):
    nodes, wts = bundle.marker_integration_nodes(x, a)
    width = 1 if y is not None else np.atleast_1d(taus).size
    out = np.zeros((x.shape[0], width))
    for k in range(nodes.shape[0]):
        out += _mu_complete(bundle, x, nodes[k], taus, y, tally) * \
            _node_weights(wts, k)
    return out


def _phi_complete_cols(bundle, cols, a, taus, y=None, tally=None):
    """Outcome-residual (complete-data) influence for y(T); default thresholds.

    Assumes censoring-free rows: the observed time is the event time.
    """
    x, s, gamma, arm, t_obs, delta = cols
    taus = np.atleast_1d(taus)
    n = x.shape[0]
    m = 1 if y is not None else taus.size
    kappa = bundle.kappa
    phi = np.zeros((n, m))

    bmask = gamma == 1
    if bmask.any():
        mubar = _sbar_complete(bundle, x[bmask], taus, a, y, tally)
        phi[bmask] += mubar / kappa
        amask = bmask & (arm == a)
        if amask.any():
            sel = amask[bmask]
            mu_obs = _mu_complete(bundle, x[amask], s[amask], taus, y, tally)
            gate = _arm_gate(bundle, x[amask], a, tally)
            phi[amask] += gate[:, None] * (mu_obs - mubar[sel])

    hmask = (gamma == 0) & (arm == 1)
    if hmask.any():
        w_h = _hist_weight(bundle, x[hmask], s[hmask], a, tally)
        mu_h = _mu_complete(bundle, x[hmask], s[hmask], taus, y, tally)
        if y is None:
            y_obs = (t_obs[hmask, None] <= taus[None, :]).astype(float)
        else:
            y_obs = np.asarray([float(y(u)) for u in t_obs[hmask]])[:, None]
        phi[hmask] += w_h[:, None] * (y_obs - mu_h)
    return phi


def _phi_competing_cols(bundle, cols, a, taus, causes, tally=None):
    x, s, gamma, arm, t_obs, delta = cols
    taus = np.atleast_1d(taus)
    n, m = x.shape[0], taus.size
    kappa = bundle.kappa
    causes = tuple(causes)
    C = len(causes)

    if bundle.J == 1 and causes == (1,):
        # single-cause route shares the survival algebra bit for bit
        phi = np.empty((n, m, 1))
        phi[:, :, 0] = (1.0 - gamma / kappa)[:, None]
        bmask = gamma == 1
        if bmask.any():
            fbar = 1.0 - _sbar_survival(bundle, x[bmask], taus, a, tally)
            phi[bmask, :, 0] += fbar / kappa
            amask = bmask & (arm == a)
            if amask.any():
                sel = amask[bmask]
                f_obs = 1.0 - np.exp(-_cap_lam(
                    bundle.event_cum_at(x[amask], s[amask], taus), tally))
                gate = _arm_gate(bundle, x[amask], a, tally)
                phi[amask, :, 0] += gate[:, None] * (f_obs - fbar[sel])
        hmask = (gamma == 0) & (arm == 1)
        if hmask.any():
            w_h = _hist_weight(bundle, x[hmask], s[hmask], a, tally)
            jump, comp = _hist_surv_mart(
                bundle, x[hmask], s[hmask], t_obs[hmask],
                (delta[hmask] >= 1).astype(float), taus, tally)
            phi[hmask, :, 0] += w_h[:, None] * (jump - comp)
        return phi

    phi = np.empty((n, m, C))
    phi[:] = (1.0 - gamma / kappa)[:, None, None]

    bmask = gamma == 1
    if bmask.any():
        fbar = _sbar_cif(bundle, x[bmask], taus, a, causes, tally)
        phi[bmask] += fbar / kappa
        amask = bmask & (arm == a)
        if amask.any():
            sel = amask[bmask]
            f_obs = _cif_at(bundle, x[amask], s[amask], taus, causes, tally)
            gate = _arm_gate(bundle, x[amask], a, tally)
            phi[amask] += gate[:, None, None] * (f_obs - fbar[sel])

    hmask = (gamma == 0) & (arm == 1)
    if hmask.any():
        idx = np.flatnonzero(hmask)
        w_h = _hist_weight(bundle, x[hmask], s[hmask], a, tally)
        grid = bundle.grid
        pos = _positions(grid, taus)
        for lo, hi in _row_chunks(idx.size, grid.size * (C + 3)):
            rows = idx[lo:hi]
            xc, sc, tc = x[rows], s[rows], t_obs[rows]
            dc = delta[rows]
            jumps = bundle.event_jumps_at_grid(xc, sc)
            dtot = sum(jumps[k] for k in jumps)
            lam = _cap_lam(np.cumsum(dtot, axis=1), tally)
            e_right = np.exp(lam)
            e_left = np.exp(np.concatenate(
                [np.zeros((xc.shape[0], 1)), lam[:, :-1]], axis=1))
            r = e_right - e_left
            g_right = np.exp(-lam)
            g_left = np.exp(-np.concatenate(
                [np.zeros((xc.shape[0], 1)), lam[:, :-1]], axis=1))
            dmass = g_left - g_right
            gc_g = _clip_div(bundle.cens_surv_at(xc, sc, grid), G_MIN, tally,
                             "cens_floored")
            mask = grid[None, :] <= tc[:, None]
            a2 = np.cumsum(np.where(mask, r / gc_g, 0.0), axis=1)
            pos_tr = np.searchsorted(grid, tc, side="right") - 1
            lam_t = _cap_lam(bundle.event_cum_rowwise(xc, sc, tc), tally)
            g_t = np.exp(-lam_t)
            gc_t = _clip_div(bundle.cens_surv_rowwise(xc, sc, tc), G_MIN,
                             tally, "cens_floored")
            share_total = np.where(dtot > 0, dtot, 1.0)
            one_minus = -np.expm1(-dtot)        # 1 - exp(-dLam)
            for ci, j in enumerate(causes):
                share_j = np.where(dtot > 0.0, jumps[j] / share_total, 0.0)
                f_atom = np.cumsum(dmass * share_j, axis=1)
                c_j = share_j * one_minus
                a1 = np.cumsum(np.where(mask, (c_j + f_atom * r) / gc_g, 0.0),
                               axis=1)
                f_tau = _pick(f_atom, pos)
                comp = _pick(a1, pos) - f_tau * _pick(a2, pos)
                f_t = _pick_rowwise(f_atom, pos_tr)
                hval = ((dc == j).astype(float)[:, None]
                        - (f_tau - f_t[:, None]) / g_t[:, None])
                jterm = ((dc >= 1)[:, None]
                         * (tc[:, None] <= taus[None, :])
                         * hval / gc_t[:, None])
                phi[rows, :, ci] += w_h[lo:hi, None] * (jterm - comp)
    return phi


def _columns(ds, idx=None):
    if idx is None:
        idx = slice(None)
    return (ds.x[idx], ds.s[idx], ds.gamma[idx], ds.arm[idx],
            ds.t_obs[idx], ds.delta[idx])


def eif_values(bundle, ds, idx, arms, taus, causes=None, tally=None) -> np.ndarray:
    """Influence evaluations for the rows `idx`, shape (len, m, A, C)."""
    cols = _columns(ds, idx)
    taus = np.atleast_1d(taus)
    arms = tuple(arms)
    cause_axis = (None,) if causes is None else tuple(causes)
    out = np.empty((cols[0].shape[0], taus.size, len(arms), len(cause_axis)))
    for ai, a in enumerate(arms):
        if causes is None:
            out[:, :, ai, 0] = _phi_censored_cols(bundle, cols, a, taus, tally)
        else:
            out[:, :, ai, :] = _phi_competing_cols(bundle, cols, a, taus,
                                                   tuple(causes), tally)
    return out


# ---------------------------------------------------------------------------
# row-level wrappers
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Row:
    """One subject's observables plus the cross-fitting fold it belongs to."""

    x: tuple
    arm: int
    gamma: int
    s: tuple
    t_obs: Optional[float] = None
    delta: Optional[int] = None
    fold: Optional[int] = None

    @classmethod
    def from_dataset(cls, ds, i: int, folds=None):
        return cls(tuple(ds.x[i]), int(ds.arm[i]), int(ds.gamma[i]),
                   tuple(ds.s[i]),
                   None if np.isnan(ds.t_obs[i]) else float(ds.t_obs[i]),
                   None if ds.delta[i] < 0 else int(ds.delta[i]),
                   None if folds is None else int(folds[i]))


def _row_cols(row: Row):
    t = np.nan if row.t_obs is None else float(row.t_obs)
    d = -1 if row.delta is None else int(row.delta)
    return (np.asarray([row.x], dtype=float), np.asarray([row.s], dtype=float),
            np.asarray([row.gamma]), np.asarray([row.arm]),
            np.asarray([t]), np.asarray([d]))


def _check_fold(bundle, row: Row):
    bf = getattr(bundle, "fold", None)
    if row.fold is not None and bf is not None and row.fold != bf:
        raise FoldMismatch(f"row belongs to fold {row.fold}, "
                           f"bundle holds out fold {bf}")


def eif_censored_row(bundle, row: Row, a, t) -> float:
    """Single-endpoint influence value of one subject at one time."""
    _check_fold(bundle, row)
    return float(_phi_censored_cols(bundle, _row_cols(row), a,
                                    np.asarray([float(t)]))[0, 0])


def eif_competing_row(bundle, row: Row, a, t, j: int) -> float:
    """Cause-j influence value of one subject at one time."""
    _check_fold(bundle, row)
    if not 1 <= int(j) <= bundle.J:
        raise CauseOutOfRange(f"cause {j} outside 1..{bundle.J}")
    causes = tuple(range(1, bundle.J + 1))
    vals = _phi_competing_cols(bundle, _row_cols(row), a,
                               np.asarray([float(t)]), causes)
    return float(vals[0, 0, causes.index(int(j))])


def eif_complete_rows(bundle, ds, idx, a, taus, y=None, tally=None) -> np.ndarray:
    """Complete-data outcome-residual influence; y=None gives I{T<=tau}."""
    return _phi_complete_cols(bundle, _columns(ds, idx), a,
                              np.atleast_1d(taus), y, tally)


# ---------------------------------------------------------------------------
# plug-in forms
# ---------------------------------------------------------------------------
def plugin_mediation(bundle, ds, a, t, j: Optional[int] = None) -> float:
    """Marker-integrated risk averaged over bridging covariates."""
    bmask = ds.gamma == 1
    if not bmask.any():
        raise NoBridgingRows("no bridging rows to average over")
    x = ds.x[bmask]
    if j is None:
        vals = 1.0 - _sbar_survival(bundle, x, [float(t)], a)[:, 0]
    else:
        if not 1 <= int(j) <= bundle.J:
            raise CauseOutOfRange(f"cause {j} outside 1..{bundle.J}")
        vals = _sbar_cif(bundle, x, [float(t)], a, (int(j),))[:, 0, 0]
    return float(vals.mean())


def plugin_outcome(bundle, ds, a, t, j: Optional[int] = None) -> float:
    """Arm-propensity-weighted conditional risk at observed markers."""
    amask = (ds.gamma == 1) & (ds.arm == a)
    if not amask.any():
        raise NoArmRows(f"no bridging rows in arm {a}")
    x, s = ds.x[amask], ds.s[amask]
    if j is None:
        risk = 1.0 - np.exp(-_cap_lam(bundle.event_cum_at(x, s, [float(t)])))[:, 0]
    else:
        if not 1 <= int(j) <= bundle.J:
            raise CauseOutOfRange(f"cause {j} outside 1..{bundle.J}")
        risk = _cif_at(bundle, x, s, [float(t)], (int(j),))[:, 0, 0]
    p_arm = _clip_div(bundle.p_arm_bridging(x, a), P_MIN)
    return float(np.sum(risk / p_arm) / (ds.n * bundle.kappa))


def plugin_weighting(bundle, ds, a, t, j: Optional[int] = None) -> float:
    """Inverse-censoring-weighted, density-ratio-reweighted event fraction."""
    hmask = (ds.gamma == 0) & (ds.arm == 1)
    if not hmask.any():
        raise NoHistoricalApprovedRows("no historical approved-arm rows")
    x, s = ds.x[hmask], ds.s[hmask]
    t_obs, delta = ds.t_obs[hmask], ds.delta[hmask]
    if j is not None and not 1 <= int(j) <= bundle.J:
        raise CauseOutOfRange(f"cause {j} outside 1..{bundle.J}")
    w_h = _hist_weight(bundle, x, s, a)
    hit = ((delta >= 1) if j is None else (delta == int(j))) \
        & (t_obs <= float(t))
    if not hit.any():
        warnings.warn(LowInformation(
            f"no qualifying events at or before t={t}; reweighted estimate is 0"))
        return 0.0
    gc = _clip_div(bundle.cens_surv_rowwise(x[hit], s[hit], t_obs[hit]),
                   G_MIN, None, "cens_floored")
    return float(np.sum(w_h[hit] / gc) / ds.n)


@dataclass
class SumToAllCauseReport:
    plugin_sum: float
    allcause_plugin: float
    eif_sum: float
    allcause_eif: float
    plugin_gap: float
    eif_gap: float
    passed: bool


def check_sum_to_allcause(bundle, ds, a, t, plugin_tol=1e-8,
                          eif_tol=1e-6) -> SumToAllCauseReport:
    """Do cause-specific estimates add up to the pooled all-cause estimate?"""
    causes = tuple(range(1, bundle.J + 1))
    plugin_sum = sum(plugin_mediation(bundle, ds, a, t, j) for j in causes)
    allcause_plugin = plugin_mediation(bundle, ds, a, t, None)
    vals = eif_values(bundle, ds, None, (a,), [float(t)], causes=causes)
    eif_sum = float(vals.mean(axis=0)[0, 0, :].sum()) - \
        (bundle.J - 1) * float(np.mean(1.0 - ds.gamma / bundle.kappa))
    allcause_eif = float(eif_values(bundle, ds, None, (a,),
                                    [float(t)]).mean(axis=0)[0, 0, 0])
    plugin_gap = abs(plugin_sum - allcause_plugin)
    eif_gap = abs(eif_sum - allcause_eif)
    return SumToAllCauseReport(plugin_sum, allcause_plugin, eif_sum,
                               allcause_eif, plugin_gap, eif_gap,
                               plugin_gap <= plugin_tol and eif_gap <= eif_tol)


# ---------------------------------------------------------------------------
# discrete toy models and the pathwise-derivative certification
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class DiscreteToyModel:
    """Finite-support joint law over (trial, arm, covariate, marker, time).

    The covariate is binary, the marker takes three levels, events sit on a
    small time grid, and an optional censoring layer interleaves.  Everything
    needed by the evaluation protocol (propensities, marker pmfs, hazards) is
    derived from the explicit tables, so the same influence code runs here
    with zero discretization slack.
    """

    p_gamma: float
    p_x1: tuple                    # P(X=1 | trial), index 0 = historical
    hist_arm: tuple                # (intercept, slope) for P(A=approved | x)
    bridge_arm: tuple              # (intercept, slope) for P(A=invest. | x)
    s_table: dict                  # (trial, arm, x) -> marker pmf tuple
    event_coefs: dict              # (atom_idx, cause) -> (c0, cx, cs, ca)
    events: tuple = (1.0, 2.0, 3.0)
    censor_coefs: Optional[tuple] = None    # per censor atom: (c0, cx, cs)
    censors: tuple = (0.5, 1.5, 2.5)        # plus an implicit never-censored atom

    @property
    def J(self) -> int:
        return max(k for (_, k) in self.event_coefs)

    @property
    def censored(self) -> bool:
        return self.censor_coefs is not None

    def p_x(self, x, g):
        p1 = self.p_x1[g]
        return p1 if x == 1 else 1.0 - p1

    def p_arm(self, arm, x, g):
        if g == 0:
            p1 = self.hist_arm[0] + self.hist_arm[1] * x
            return p1 if arm == 1 else 1.0 - p1
        p2 = self.bridge_arm[0] + self.bridge_arm[1] * x
        return p2 if arm == 2 else 1.0 - p2

    def q_event(self, x, a, s) -> dict:
        """Joint event pmf over (atom index, cause)."""
        w = {key: math.exp(c[0] + c[1] * x + c[2] * s + c[3] * a)
             for key, c in self.event_coefs.items()}
        z = sum(w.values())
        return {key: v / z for key, v in w.items()}

    def q_censor(self, x, s) -> list:
        w = [math.exp(c[0] + c[1] * x + c[2] * s) for c in self.censor_coefs]
        w.append(math.exp(0.3 - 0.05 * x))
        z = sum(w)
        return [v / z for v in w]

    def joint_table(self) -> dict:
        tab = {}
        for x, a, s in itertools.product((0, 1), (0, 1), range(3)):
            base = (1 - self.p_gamma) * self.p_x(x, 0) * self.p_arm(a, x, 0) \
                * self.s_table[(0, a, x)][s]
            q = self.q_event(x, a, s)
            ev_marg = [sum(q[(i, k)] for k in range(1, self.J + 1))
                       for i in range(len(self.events))]
            if not self.censored:
                for i, t in enumerate(self.events):
                    for k in range(1, self.J + 1):
                        if q[(i, k)] > 0:
                            tab[("h", x, a, s, t, k)] = base * q[(i, k)]
                continue
            qc = self.q_censor(x, s)
            for i, t in enumerate(self.events):
                surv_c = sum(qc[i2] for i2 in range(len(qc))
                             if i2 >= len(self.censors)
                             or self.censors[i2] > t)
                for k in range(1, self.J + 1):
                    if q[(i, k)] > 0:
                        tab[("h", x, a, s, t, k)] = base * q[(i, k)] * surv_c
            for i, w_t in enumerate(self.censors):
                surv_t = sum(ev_marg[i2] for i2 in range(len(self.events))
                             if self.events[i2] > w_t)
                tab[("h", x, a, s, w_t, 0)] = base * qc[i] * surv_t
        for x, a, s in itertools.product((0, 1), (1, 2), range(3)):
            tab[("b", x, a, s)] = self.p_gamma * self.p_x(x, 1) \
                * self.p_arm(a, x, 1) * self.s_table[(1, a, x)][s]
        return tab

    def check_positivity(self):
        probs = [self.p_gamma, 1 - self.p_gamma]
        probs += [self.p_x(x, g) for x in (0, 1) for g in (0, 1)]
        probs += [self.p_arm(a, x, 0) for a in (0, 1) for x in (0, 1)]
        probs += [self.p_arm(a, x, 1) for a in (1, 2) for x in (0, 1)]
        probs += [p for pmf in self.s_table.values() for p in pmf]
        if min(probs) <= 0.0 or max(probs) >= 1.0:
            raise PositivityViolated(
                "toy propensity or pmf cell outside (0, 1)")

    def bundle(self) -> "ToyBundle":
        return ToyBundle(self)


def toy_no_censoring() -> DiscreteToyModel:
    return DiscreteToyModel(
        p_gamma=0.3, p_x1=(0.45, 0.55),
        hist_arm=(0.5, 0.1), bridge_arm=(0.4, 0.15),
        s_table=_TOY_S_TABLE,
        event_coefs={(0, 1): (0.2, 0.3, -0.2, 0.1),
                     (1, 1): (0.1, -0.1, 0.15, 0.0),
                     (2, 1): (-0.1, 0.05, 0.05, -0.2)})


def toy_with_censoring() -> DiscreteToyModel:
    base = toy_no_censoring()
    return DiscreteToyModel(
        p_gamma=base.p_gamma, p_x1=base.p_x1, hist_arm=base.hist_arm,
        bridge_arm=base.bridge_arm, s_table=base.s_table,
        event_coefs=base.event_coefs,
        censor_coefs=((0.1, 0.05, 0.0), (0.05, 0.0, 0.02), (0.02, 0.0, 0.0)))


def toy_two_cause() -> DiscreteToyModel:
    base = toy_with_censoring()
    coefs = dict(base.event_coefs)
    coefs.update({(0, 2): (-0.3, 0.1, 0.1, 0.0),
                  (1, 2): (-0.2, 0.05, -0.1, 0.1),
                  (2, 2): (-0.4, -0.05, 0.02, 0.0)})
    return DiscreteToyModel(
        p_gamma=base.p_gamma, p_x1=base.p_x1, hist_arm=base.hist_arm,
        bridge_arm=base.bridge_arm, s_table=base.s_table, event_coefs=coefs,
        censor_coefs=base.censor_coefs)


_TOY_S_TABLE = {
    (0, 0, 0): (0.50, 0.30, 0.20), (0, 0, 1): (0.30, 0.40, 0.30),
    (0, 1, 0): (0.40, 0.35, 0.25), (0, 1, 1): (0.25, 0.35, 0.40),
    (1, 1, 0): (0.45, 0.30, 0.25), (1, 1, 1): (0.30, 0.35, 0.35),
    (1, 2, 0): (0.35, 0.30, 0.35), (1, 2, 1): (0.20, 0.35, 0.45),
}


class ToyBundle:
    """Evaluation-protocol adapter for a DiscreteToyModel.

    Hazard increments are presented as dLam^k = (lam^k / lam) * (-log(1-lam)),
    so the exponential-form survival in the evaluator equals the toy's exact
    product-limit survival and the compensator increments equal the true
    per-atom conditional probabilities.
    """

    fold = None

    def __init__(self, toy: DiscreteToyModel):
        self.toy = toy
        self.kappa = toy.p_gamma
        self.J = toy.J
        self.grid = np.asarray(toy.events, dtype=float)
        # latent hazards per (x, s): lam[k][atom]
        self._jump_tab = {}
        self._gc_tab = {}
        for x in (0, 1):
            for s in range(3):
                q = toy.q_event(x, 1, s)
                surv = 1.0
                djs = {k: np.zeros(self.grid.size) for k in range(1, toy.J + 1)}
                for i in range(self.grid.size):
                    atom = sum(q[(i, k)] for k in range(1, toy.J + 1))
                    lam_tot = atom / surv if surv > 0 else 1.0
                    dlam = ATOM_CAP if lam_tot >= 1.0 else -math.log1p(-lam_tot)
                    for k in range(1, toy.J + 1):
                        sharek = (q[(i, k)] / atom) if atom > 0 else 0.0
                        djs[k][i] = sharek * dlam
                    surv -= atom
                self._jump_tab[(x, s)] = djs
                if toy.censored:
                    qc = toy.q_censor(x, s)
                    self._gc_tab[(x, s)] = np.asarray(
                        [sum(qc[i2] for i2 in range(len(qc))
                             if i2 >= len(toy.censors)
                             or toy.censors[i2] > v) for v in self.grid])
                else:
                    self._gc_tab[(x, s)] = np.ones(self.grid.size)

    @staticmethod
    def _ints(v):
        v = np.asarray(v, dtype=float)
        if v.ndim == 2:
            v = v[:, 0]
        return np.rint(v).astype(int)

    def p_gamma(self, x):
        xi = self._ints(x)
        out = np.empty(xi.size)
        for v in (0, 1):
            num = self.toy.p_gamma * self.toy.p_x(v, 1)
            den = num + (1 - self.toy.p_gamma) * self.toy.p_x(v, 0)
            out[xi == v] = num / den
        return out

    def p_hist_approved(self, x):
        xi = self._ints(x)
        out = np.empty(xi.size)
        for v in (0, 1):
            num = (1 - self.toy.p_gamma) * self.toy.p_x(v, 0) \
                * self.toy.p_arm(1, v, 0)
            den = self.toy.p_gamma * self.toy.p_x(v, 1) \
                + (1 - self.toy.p_gamma) * self.toy.p_x(v, 0)
            out[xi == v] = num / den
        return out

    def p_arm_bridging(self, x, arm):
        return np.asarray([self.toy.p_arm(arm, v, 1) for v in self._ints(x)])

    def marker_logpdf(self, x, s, arm, gamma):
        xi, si = self._ints(x), self._ints(s)
        return np.asarray([math.log(self.toy.s_table[(gamma, arm, v)][w])
                           for v, w in zip(xi, si)])

    def marker_integration_nodes(self, x, arm):
        xi = self._ints(x)
        nodes = np.tile(np.arange(3.0)[:, None, None], (1, xi.size, 1))
        wts = np.asarray([[self.toy.s_table[(1, arm, v)][w] for v in xi]
                          for w in range(3)])
        return nodes, wts

    def event_jumps_at_grid(self, x, s):
        xi, si = self._ints(x), self._ints(s)
        out = {}
        for k in range(1, self.J + 1):
            out[k] = np.asarray([self._jump_tab[(v, w)][k]
                                 for v, w in zip(xi, si)])
        return out

    def event_cum_at(self, x, s, times):
        jumps = self.event_jumps_at_grid(x, s)
        tot = np.cumsum(sum(jumps.values()), axis=1)
        pos = _positions(self.grid, times)
        return _pick(tot, pos)

    def event_cum_rowwise(self, x, s, t):
        jumps = self.event_jumps_at_grid(x, s)
        tot = np.cumsum(sum(jumps.values()), axis=1)
        pos = np.searchsorted(self.grid, np.asarray(t, dtype=float),
                              side="right") - 1
        return _pick_rowwise(tot, pos)

    def cens_surv_at(self, x, s, times):
        xi, si = self._ints(x), self._ints(s)
        gc = np.asarray([self._gc_tab[(v, w)] for v, w in zip(xi, si)])
        pos = _positions(self.grid, times)
        out = np.ones((xi.size, np.atleast_1d(times).size))
        ok = pos >= 0
        if ok.any():
            out[:, ok] = gc[:, pos[ok]]
        return out

    def cens_surv_rowwise(self, x, s, t):
        if not self.toy.censored:
            return np.ones(np.asarray(t).size)
        xi, si = self._ints(x), self._ints(s)
        t = np.asarray(t, dtype=float)
        out = np.ones(t.size)
        for i, (v, w, ti) in enumerate(zip(xi, si, t)):
            qc = self.toy.q_censor(v, w)
            out[i] = sum(qc[i2] for i2 in range(len(qc))
                         if i2 >= len(self.toy.censors)
                         or self.toy.censors[i2] > ti)
        return out


# --- exact functional on a (possibly contaminated) toy table ----------------
def _toy_curves(table, toy, x, s):
    """Hazard-identified G and cause CIFs at the approved arm for one (x, s)."""
    atoms = sorted({k[4] for k in table if k[0] == "h"})
    causes = range(1, toy.J + 1)
    mass = {v: {k: 0.0 for k in range(toy.J + 1)} for v in atoms}
    for key, p in table.items():
        if key[0] == "h" and key[1] == x and key[2] == 1 and key[3] == s:
            mass[key[4]][key[5]] += p
    at_risk = sum(sum(m.values()) for m in mass.values())
    G, F = {}, {k: {} for k in causes}
    g_prev = 1.0
    f_prev = {k: 0.0 for k in causes}
    for v in atoms:
        if v in toy.events:
            lam = {k: (mass[v][k] / at_risk if at_risk > 0 else 0.0)
                   for k in causes}
            for k in causes:
                F[k][v] = f_prev[k] + g_prev * lam[k]
                f_prev[k] = F[k][v]
            g_prev *= 1.0 - sum(lam.values())
            G[v] = g_prev
        at_risk -= sum(mass[v].values())
    return G, F


def _step_at(curve, t, start):
    best = start
    for v in sorted(curve):
        if v <= t:
            best = curve[v]
    return best


def toy_psi(toy: DiscreteToyModel, a, t, j: Optional[int] = None,
            table: Optional[dict] = None) -> float:
    """Exact mediation functional on the toy, sampling fraction held fixed."""
    tab = table if table is not None else toy.joint_table()
    out = 0.0
    for x in (0, 1):
        mass_arm = {s: tab[("b", x, a, s)] for s in range(3)}
        z = sum(mass_arm.values())
        gamma_x = sum(p for k, p in tab.items() if k[0] == "b" and k[1] == x)
        gx = 0.0
        for s in range(3):
            G, F = _toy_curves(tab, toy, x, s)
            if j is None:
                val = 1.0 - _step_at(G, t, 1.0)
            else:
                val = _step_at(F[j], t, 0.0)
            gx += (mass_arm[s] / z) * val
        out += gamma_x * gx
    return out / toy.p_gamma


def _toy_row(o) -> Row:
    if o[0] == "b":
        _, x, arm, s = o
        return Row((float(x),), int(arm), 1, (float(s),))
    _, x, arm, s, t_obs, delta = o
    return Row((float(x),), int(arm), 0, (float(s),), float(t_obs), int(delta))


def _richardson(fn, eps):
    d1 = (fn(eps) - fn(-eps)) / (2 * eps)
    d2 = (fn(eps / 2) - fn(-eps / 2)) / eps
    return (4 * d2 - d1) / 3


def gateaux_check(toy: DiscreteToyModel, a=2, t=2.0,
                  eps_grid: Sequence[float] = (2.5e-4,),
                  cause: Optional[int] = None) -> float:
    """Certify the influence algebra against exact pathwise derivatives.

    For every support point o, the functional is re-evaluated under the
    contaminated law (1-eps) P + eps point-mass at o, differentiated by
    Richardson-extrapolated central differences, and compared to the centered
    influence value this module computes.  Returns the worst absolute gap.
    """
    toy.check_positivity()
    tab = toy.joint_table()
    bundle = toy.bundle()
    psi0 = toy_psi(toy, a, t, cause)
    eps = min(eps_grid)
    worst = 0.0
    for o in tab:
        def psi_eps(e, _o=o):
            mixed = {k: (1 - e) * p for k, p in tab.items()}
            mixed[_o] += e
            return toy_psi(toy, a, t, cause, mixed)
        numeric = _richardson(psi_eps, eps)
        row = _toy_row(o)
        if cause is not None:
            val = eif_competing_row(bundle, row, a, t, cause)
            expected = val - (1.0 - row.gamma / toy.p_gamma) - psi0
        elif toy.censored:
            val = eif_censored_row(bundle, row, a, t)
            expected = val - (1.0 - row.gamma / toy.p_gamma) - psi0
        else:
            val = float(_phi_complete_cols(bundle, _row_cols(row), a,
                                           np.asarray([float(t)]))[0, 0])
            expected = val - psi0
        worst = max(worst, abs(numeric - expected))
    return worst
