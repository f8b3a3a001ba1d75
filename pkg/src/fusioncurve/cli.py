"""Command-line front end: estimate, relve, ncde-test, simulate, gateaux-check.

Runs are driven by a TOML config plus flags (flags win), write versioned
JSON/CSV artifacts plus a plain-text report under --out, and follow a fixed
exit-code contract: 0 ok, 1 check failed, 2 configuration/usage error,
3 runtime estimation error.  Fixed seeds give byte-identical outputs,
independent of --threads.
"""

import json
import os
import sys

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:          # python 3.10
    import tomli as tomllib

from fusioncurve import errors
from fusioncurve.dataset import (ArmLabel, SubjectRecord, TrialIndicator,
                                 load_fused_csv, overlap_report, _read_rows,
                                 _require, _ARM_CODES, _ARM_TEXT)
from fusioncurve.eif import (DiscreteToyModel, gateaux_check, toy_no_censoring,
                             toy_two_cause, toy_with_censoring)
from fusioncurve.estimator import (EstimatorConfig, SensitivitySpec,
                                   estimate_curve, ncde_test, relative_ve)
from fusioncurve.nuisance import NuisanceSpec, parse_feature_terms
from fusioncurve.simlab import run_study

SCHEMA_VERSION = 1
GATEAUX_TOL = 1e-6

_ARM_TOKENS = {"1": 1, "approved": 1, "1p": 2, "2": 2, "investigational": 2}

# config errors exit 2; anything else raised during estimation exits 3
_CONFIG_ERRORS = (errors.MissingColumn, errors.BadArmCode, errors.NonPositiveTime,
                  errors.EmptyArm, errors.HorizonExceedsData,
                  errors.AllBridgingDropped, errors.GridBeyondHorizon,
                  errors.CauseOutOfRange, errors.PositivityViolated)


class ConfigError(Exception):
    pass


def _fail(code: int, msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _guard(fn, *args, **kwargs):
    """Run an estimation step under the exit-code contract."""
    try:
        return fn(*args, **kwargs)
    except _CONFIG_ERRORS as exc:
        _fail(2, f"{type(exc).__name__}: {exc}")
    except ValueError as exc:
        _fail(2, str(exc))
    except (errors.FusionError, np.linalg.LinAlgError) as exc:
        _fail(3, f"{type(exc).__name__}: {exc}")


# ---------------------------------------------------------------------------
# config parsing (strict: unknown keys are errors)
# ---------------------------------------------------------------------------
_ALLOWED = {
    "": {"input", "estimate", "band", "sensitivity", "nuisance", "simulate",
         "ncde", "output"},
    "input": {"historical", "bridging", "trial", "horizon", "schema"},
    "input.schema": {"covariate_cols", "marker_cols", "arm_col", "time_col",
                     "event_col"},
    "estimate": {"K", "seed", "arms", "causes", "level", "times", "times_only"},
    "band": {"draws", "seed"},
    "sensitivity": {"rho", "h_offset"},
    "nuisance": {"event_features", "cens_features", "gamma_x_cols",
                 "arm_x_cols", "hist_x_cols", "density_x_cols",
                 "hist_density_x_cols", "cens_admin_time", "gh_nodes",
                 "mc_draws", "mc_seed"},
    "simulate": {"scenarios", "reps", "target_time", "K", "J", "seed",
                 "truth_draws", "threads"},
    "ncde": {"t_star", "alpha", "draws", "K", "seed"},
    "output": {"dir"},
}


def _check_keys(table: dict, where: str):
    for key in table:
        if key not in _ALLOWED[where]:
            label = f"{where}.{key}" if where else key
            raise ConfigError(f"unknown config key '{label}'")


def load_run_config(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            blob = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}")
    _check_keys(blob, "")
    for section in blob:
        if not isinstance(blob[section], dict):
            raise ConfigError(f"config section '{section}' must be a table")
        _check_keys(blob[section], section)
    if "schema" in blob.get("input", {}):
        _check_keys(blob["input"]["schema"], "input.schema")
    for entry in blob.get("simulate", {}).get("scenarios", []):
        if not isinstance(entry, dict):
            raise ConfigError("each [[simulate.scenarios]] entry must be a "
                              "table with keys n_h and c")
        for key in entry:
            if key not in ("n_h", "c"):
                raise ConfigError(f"unknown scenario key '{key}'")
        if "n_h" not in entry or "c" not in entry:
            raise ConfigError("scenario entries need both n_h and c")
    return blob


def _resolve(base: str, p: str) -> str:
    return p if os.path.isabs(p) else os.path.join(base, p)


def _load_fused(cfg: dict, base: str):
    inp = cfg.get("input", {})
    for key in ("historical", "bridging", "horizon", "schema"):
        if key not in inp:
            raise ConfigError(f"config needs input.{key}")
    schema = inp["schema"]
    for key in _ALLOWED["input.schema"]:
        if key not in schema:
            raise ConfigError(f"config needs input.schema.{key}")
    return load_fused_csv(_resolve(base, inp["historical"]),
                          _resolve(base, inp["bridging"]),
                          schema, float(inp["horizon"]))


def _load_trial(cfg: dict, base: str):
    """Outcome-bearing two-arm records for the falsification test."""
    inp = cfg.get("input", {})
    if "trial" not in inp or "schema" not in inp:
        raise ConfigError("config needs input.trial and input.schema")
    schema = inp["schema"]
    for key in _ALLOWED["input.schema"]:
        if key not in schema:
            raise ConfigError(f"config needs input.schema.{key}")
    path = _resolve(base, inp["trial"])
    xcols, mcols = list(schema["covariate_cols"]), list(schema["marker_cols"])
    acol, tcol, ecol = schema["arm_col"], schema["time_col"], schema["event_col"]
    records = []
    for idx, row in enumerate(_read_rows(path, xcols + mcols + [acol, tcol, ecol])):
        code = _require(row, acol, idx, path)
        if code not in ("1", "1p"):
            raise errors.BadArmCode(
                f"{path}: row {idx}: arm '{code}' not allowed (expected 1 or 1p)")
        records.append(SubjectRecord(
            x=tuple(float(_require(row, c, idx, path)) for c in xcols),
            a=_ARM_CODES[code], gamma=TrialIndicator.HISTORICAL,
            s=tuple(float(_require(row, c, idx, path)) for c in mcols),
            t_obs=float(_require(row, tcol, idx, path)),
            delta=int(_require(row, ecol, idx, path))))
    return records


def _parse_arms(tokens):
    out = []
    for tok in tokens:
        key = str(tok).lower()
        if key not in _ARM_TOKENS:
            raise ConfigError(f"unknown arm '{tok}' (use 1/approved or 1p/investigational)")
        code = ArmLabel(_ARM_TOKENS[key])
        if code not in out:
            out.append(code)
    return tuple(out)


def _build_spec(cfg: dict) -> NuisanceSpec:
    nz = cfg.get("nuisance")
    if nz is None:
        return None
    if "event_features" not in nz or "cens_features" not in nz:
        raise ConfigError("nuisance section needs event_features and cens_features")
    kwargs = {"event_features": parse_feature_terms(nz["event_features"]),
              "cens_features": parse_feature_terms(nz["cens_features"])}
    for key in ("gamma_x_cols", "arm_x_cols", "hist_x_cols", "density_x_cols",
                "hist_density_x_cols"):
        if key in nz:
            kwargs[key] = tuple(int(c) for c in nz[key])
    for key in ("cens_admin_time", "gh_nodes", "mc_draws", "mc_seed"):
        if key in nz:
            kwargs[key] = nz[key]
    return NuisanceSpec(**kwargs)


def _estimator_config(cfg: dict, seed, grid, arms, causes, rho, h_offset, level):
    est = cfg.get("estimate", {})
    band = cfg.get("band", {})
    sens = cfg.get("sensitivity", {})
    times = [float(v) for v in grid.split(",")] if grid else est.get("times")
    arm_tokens = arms if arms else est.get("arms", ["1p"])
    cause_sel = tuple(int(c) for c in causes) if causes else \
        (tuple(int(c) for c in est.get("causes", ())) or None)
    rho_val = rho if rho is not None else sens.get("rho", 1.0)
    h_val = h_offset if h_offset is not None else sens.get("h_offset", 0.0)
    sens_spec = SensitivitySpec(rho=float(rho_val), h_offset=float(h_val))
    return EstimatorConfig(
        K=int(est.get("K", 5)),
        seed=int(seed if seed is not None else est.get("seed", 0)),
        times=times,
        times_only=bool(est.get("times_only", False)),
        arms=_parse_arms(arm_tokens),
        causes=cause_sel,
        spec=_build_spec(cfg),
        sensitivity=None if sens_spec.identity else sens_spec,
        level=float(level if level is not None else est.get("level", 0.95)),
        band_draws=int(band.get("draws", 1000)),
        band_seed=band.get("seed"))


def _out_dir(cfg: dict, out, base: str) -> str:
    target = out or cfg.get("output", {}).get("dir")
    if target is None:
        raise ConfigError("no output directory (give --out or output.dir)")
    target = _resolve(base, target)
    os.makedirs(target, exist_ok=True)
    return target


def _threads(flag, cfg_section):
    if flag is not None:
        return int(flag)
    if "threads" in cfg_section:
        return int(cfg_section["threads"])
    env = os.environ.get("FUSIONCURVE_THREADS")
    return int(env) if env else None


def _write_json(path: str, blob: dict):
    with open(path, "w") as fh:
        json.dump(blob, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _estimate_report(path, ds, curve):
    meta = curve.meta
    ov = overlap_report(ds)
    with open(path, "w") as fh:
        fh.write("estimate report\n===============\n")
        fh.write(f"dataset: n={ds.n} (historical {ds.n_h}, bridging {ds.n_b}), "
                 f"d={ds.d}, J={ds.J}, horizon={ds.horizon}\n")
        fh.write(f"mode: {meta['mode']}, K={meta['K']}, seed={meta['seed']}, "
                 f"level={meta['level']}\n")
        fh.write("grid: " + ", ".join(repr(float(t)) for t in curve.times) + "\n")
        fh.write("arms: " + ", ".join(_ARM_TEXT[ArmLabel(a)] for a in curve.arms) + "\n")
        fh.write("covariate overlap (bridging range vs historical range, "
                 "fraction of bridging rows outside):\n")
        for j in range(ds.d):
            fh.write(f"  x{j}: hist [{ov.hist_min[j]:.3f}, {ov.hist_max[j]:.3f}], "
                     f"bridging [{ov.bridge_min[j]:.3f}, {ov.bridge_max[j]:.3f}], "
                     f"outside {100.0 * ov.outside_fraction[j]:.2f}%\n")
        tally = meta.get("truncation", {})
        if tally:
            fh.write("truncation activations: "
                     + ", ".join(f"{k}={v}" for k, v in sorted(tally.items())) + "\n")
        else:
            fh.write("truncation activations: none\n")
        sens = meta.get("sensitivity")
        if sens is None:
            fh.write("sensitivity: identity\n")
        else:
            fh.write(f"sensitivity: rho={sens['rho']}, h_offset={sens['h_offset']}, "
                     f"clamped {sens['clamped']} cell(s)\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
@click.group()
def main():
    """Counterfactual incidence estimation from fused trial data."""


_shared = [
    click.option("--config", "config_path", required=True,
                 type=click.Path(exists=True, dir_okay=False)),
    click.option("--seed", type=int, default=None),
    click.option("--threads", type=int, default=None),
    click.option("--out", default=None, help="output directory"),
]


def _with_shared(fn):
    for opt in reversed(_shared):
        fn = opt(fn)
    return fn


@main.command()
@_with_shared
@click.option("--grid", default=None, help="comma-separated evaluation times")
@click.option("--arm", "arms", multiple=True)
@click.option("--cause", "causes", multiple=True, type=int)
@click.option("--rho", type=float, default=None)
@click.option("--h-offset", type=float, default=None)
@click.option("--level", type=float, default=None)
def estimate(config_path, seed, threads, out, grid, arms, causes, rho,
             h_offset, level):
    """Estimate counterfactual incidence curves; writes curve/eif/report files."""
    try:
        cfg = load_run_config(config_path)
        base = os.path.dirname(os.path.abspath(config_path))
        target = _out_dir(cfg, out, base)
        ds = _load_fused(cfg, base)
        ec = _estimator_config(cfg, seed, grid, arms, causes, rho, h_offset, level)
    except (ConfigError, ValueError, KeyError, TypeError) as exc:
        _fail(2, str(exc))
    except _CONFIG_ERRORS as exc:
        _fail(2, f"{type(exc).__name__}: {exc}")
    curve, mat = _guard(estimate_curve, ds, ec)
    curve.write_csv(os.path.join(target, "curve.csv"))
    _write_json(os.path.join(target, "curve.json"), curve.to_json_dict())
    mat.write_csv(os.path.join(target, "eif.csv"))
    _estimate_report(os.path.join(target, "report.txt"), ds, curve)
    click.echo(f"wrote curve.csv, curve.json, eif.csv, report.txt to {target}")


@main.command()
@_with_shared
@click.option("--grid", default=None, help="comma-separated evaluation times")
@click.option("--cause", "cause", type=int, default=None)
@click.option("--level", type=float, default=None)
def relve(config_path, seed, threads, out, grid, cause, level):
    """Relative vaccine efficacy of 1' against 1; writes relve.csv/relve.json."""
    try:
        cfg = load_run_config(config_path)
        base = os.path.dirname(os.path.abspath(config_path))
        target = _out_dir(cfg, out, base)
        ds = _load_fused(cfg, base)
        ec = _estimator_config(cfg, seed, grid, ("1", "1p"), (), None, None, level)
    except (ConfigError, ValueError, KeyError, TypeError) as exc:
        _fail(2, str(exc))
    except _CONFIG_ERRORS as exc:
        _fail(2, f"{type(exc).__name__}: {exc}")

    def run():
        _, mat = estimate_curve(ds, ec)
        return relative_ve(mat, cause=cause, level=ec.level)

    rv = _guard(run)
    rv.write_csv(os.path.join(target, "relve.csv"))
    _write_json(os.path.join(target, "relve.json"), rv.to_json_dict())
    click.echo(f"wrote relve.csv, relve.json to {target}")


@main.command("ncde-test")
@_with_shared
def ncde_cmd(config_path, seed, threads, out):
    """No-direct-effect falsification test on outcome-bearing two-arm data."""
    try:
        cfg = load_run_config(config_path)
        base = os.path.dirname(os.path.abspath(config_path))
        target = _out_dir(cfg, out, base)
        records = _load_trial(cfg, base)
        nc = cfg.get("ncde", {})
        if "t_star" not in nc:
            raise ConfigError("config needs ncde.t_star")
        kwargs = dict(t_star=float(nc["t_star"]),
                      alpha=float(nc.get("alpha", 0.05)),
                      draws=int(nc.get("draws", 500)),
                      K=int(nc.get("K", 5)),
                      seed=int(seed if seed is not None else nc.get("seed", 0)),
                      spec=_build_spec(cfg))
    except (ConfigError, ValueError, KeyError, TypeError) as exc:
        _fail(2, str(exc))
    except _CONFIG_ERRORS as exc:
        _fail(2, f"{type(exc).__name__}: {exc}")
    res = _guard(ncde_test, records, **kwargs)
    _write_json(os.path.join(target, "ncde.json"), res.to_json_dict())
    verdict = "reject" if res.reject else "no evidence against"
    click.echo(f"ncde test at t*={res.t_star}: difference {res.difference:+.4f} "
               f"[{res.ci_lo:.4f}, {res.ci_hi:.4f}] -> {verdict} "
               f"the no-direct-effect assumption")
    click.echo(f"wrote ncde.json to {target}")


_DEFAULT_SCENARIOS = [(n_h, c) for c in (0.0, 0.05, 0.125, 0.25)
                      for n_h in (1000, 2000, 3000, 4000)]


@main.command()
@_with_shared
def simulate(config_path, seed, threads, out):
    """Replication study over (n_h, c) scenarios; writes table1.csv/table1.json."""
    try:
        cfg = load_run_config(config_path)
        base = os.path.dirname(os.path.abspath(config_path))
        target = _out_dir(cfg, out, base)
        sim = cfg.get("simulate", {})
        scen_cfg = sim.get("scenarios")
        scenarios = ([(int(e["n_h"]), float(e["c"])) for e in scen_cfg]
                     if scen_cfg else _DEFAULT_SCENARIOS)
        kwargs = dict(reps=int(sim.get("reps", 1000)),
                      target_time=float(sim.get("target_time", 5.0)),
                      J=int(sim.get("J", 1)),
                      K=int(sim.get("K", 5)),
                      seed=int(seed if seed is not None else sim.get("seed", 0)),
                      truth_draws=int(sim.get("truth_draws", 10 ** 6)),
                      threads=_threads(threads, sim))
    except (ConfigError, ValueError, KeyError, TypeError) as exc:
        _fail(2, str(exc))
    summ = _guard(run_study, scenarios, **kwargs)
    summ.write_csv(os.path.join(target, "table1.csv"))
    _write_json(os.path.join(target, "table1.json"), summ.to_json_dict())
    click.echo(f"wrote table1.csv, table1.json to {target}")
    total = summ.reps * len(summ.rows)
    failed = sum(r["n_failed"] for r in summ.rows)
    if failed > 0.10 * total:
        _fail(3, f"{failed}/{total} replications failed")


_TOYS = {"no-censoring": toy_no_censoring,
         "censoring": toy_with_censoring,
         "two-cause": toy_two_cause}

_TOY_KEYS = {"p_gamma", "p_x1", "hist_arm", "bridge_arm", "s_table",
             "event_coefs", "events", "censor_coefs", "censors"}


def _toy_from_file(path: str) -> DiscreteToyModel:
    try:
        with open(path, "rb") as fh:
            blob = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}")
    if set(blob) != {"toy"}:
        raise ConfigError("toy file must contain exactly one [toy] table")
    t = blob["toy"]
    for key in t:
        if key not in _TOY_KEYS:
            raise ConfigError(f"unknown toy key '{key}'")
    for key in ("p_gamma", "p_x1", "hist_arm", "bridge_arm", "s_table",
                "event_coefs"):
        if key not in t:
            raise ConfigError(f"toy file needs toy.{key}")
    kwargs = dict(
        p_gamma=float(t["p_gamma"]),
        p_x1=tuple(float(v) for v in t["p_x1"]),
        hist_arm=tuple(float(v) for v in t["hist_arm"]),
        bridge_arm=tuple(float(v) for v in t["bridge_arm"]),
        s_table={tuple(int(v) for v in k.split(",")): tuple(float(p) for p in pmf)
                 for k, pmf in t["s_table"].items()},
        event_coefs={tuple(int(v) for v in k.split(",")): tuple(float(c) for c in cs)
                     for k, cs in t["event_coefs"].items()})
    if "events" in t:
        kwargs["events"] = tuple(float(v) for v in t["events"])
    if "censor_coefs" in t:
        kwargs["censor_coefs"] = tuple(tuple(float(v) for v in row)
                                       for row in t["censor_coefs"])
    if "censors" in t:
        kwargs["censors"] = tuple(float(v) for v in t["censors"])
    return DiscreteToyModel(**kwargs)


@main.command("gateaux-check")
@click.option("--toy", "toys", multiple=True,
              type=click.Choice(sorted(_TOYS)), help="restrict to named toys")
@click.option("--toy-file", type=click.Path(exists=True, dir_okay=False),
              default=None, help="TOML description of a custom discrete toy")
@click.option("--out", default=None, help="also write gateaux.json here")
def gateaux_cmd(toys, toy_file, out):
    """Certify the influence algebra against exact pathwise derivatives."""
    try:
        if toy_file is not None:
            jobs = [(os.path.basename(toy_file), _toy_from_file(toy_file), None)]
        else:
            names = list(toys) if toys else sorted(_TOYS)
            jobs = [(name, _TOYS[name](), None) for name in names]
            for name, toy, _ in list(jobs):
                if toy.J > 1:
                    jobs.append((f"{name}[cause=1]", toy, 1))
    except (ConfigError, ValueError, TypeError) as exc:
        _fail(2, str(exc))
    results = []
    worst = 0.0
    for name, toy, cause in jobs:
        try:
            err = gateaux_check(toy, cause=cause)
        except errors.PositivityViolated as exc:
            _fail(2, f"PositivityViolated: {exc}")
        except (errors.FusionError, np.linalg.LinAlgError) as exc:
            _fail(3, f"{type(exc).__name__}: {exc}")
        ok = err < GATEAUX_TOL
        worst = max(worst, err)
        results.append({"toy": name, "max_error": err, "ok": ok})
        click.echo(f"{name}: max gateaux error {err:.3e} "
                   f"({'ok' if ok else 'FAIL'}, tol {GATEAUX_TOL:g})")
    if out:
        os.makedirs(out, exist_ok=True)
        _write_json(os.path.join(out, "gateaux.json"),
                    {"schema_version": SCHEMA_VERSION, "tolerance": GATEAUX_TOL,
                     "results": results, "worst": worst,
                     "ok": worst < GATEAUX_TOL})
    if worst >= GATEAUX_TOL:
        _fail(1, f"worst gateaux error {worst:.3e} exceeds {GATEAUX_TOL:g}")
    click.echo("all influence checks passed")


if __name__ == "__main__":
    main()
