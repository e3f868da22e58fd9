"""Command-line entry point.

Usage::

    groupr2 COMMAND --config PATH [--seed N] [--out DIR] [--workers N] [--nongrouped]

Commands: ``prior-predictive``, ``density``, ``fit``, ``simulate``, ``hyper``.
The config is an INI file (sections below) or the same schema as JSON. Every
run writes ``manifest.json`` with the fully resolved config; passing that
file back as ``--config`` repeats the run and reproduces every output file.

Exit codes: 0 success, 2 configuration or input error, 3 numerical or
sampler failure.
"""

import argparse
import configparser
import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from scipy import stats

from . import hyperopt, prior_core, shrinkage, simharness
from .errors import DomainError, NumericError, is_pole
from .model import GroupR2Model, RegressionData, standardize
from .prior_core import GroupStructure, Hyperparams, InterceptPrior, SigmaPrior
from .sampler import SamplerConfig, ebfmi, ess, rhat, sample

COMMANDS = ("prior-predictive", "density", "fit", "simulate", "hyper")
EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 2, 3


class ConfigError(Exception):
    pass


# -- config schema --------------------------------------------------------------
#
# section -> key -> (type, default). Types: int, float, str, bool, and list
# variants written "floats", "ints", "strs". A default of None means optional.

_SAMPLER = {
    "n_chains": ("int", 4),
    "n_warmup": ("int", 1000),
    "n_samples": ("int", 1000),
    "target_accept": ("float", 0.95),
    "max_tree_depth": ("int", 10),
}

_PRIOR = {
    "preset": ("str", None),
    "a1": ("float", None),
    "a2": ("float", None),
    "a_G": ("float", None),
    "c": ("floats", None),
    "sigma_df": ("float", 3.0),
    "sigma_scale": ("float", None),
    "intercept_mean": ("float", None),
    "intercept_sd": ("float", None),
    "intercept_flat": ("bool", False),
}

SCHEMA = {
    "prior-predictive": {
        "prior_predictive": {
            "a_G": ("floats", [0.1, 0.5, 1.0]),
            "c_g": ("floats", [0.1, 0.5, 1.0]),
            "a1": ("float", None),
            "a2": ("float", 0.5),
            "G": ("int", 10),
            "p_g": ("int", 20),
            "n_sims": ("int", 4000),
        },
    },
    "density": {
        "density": {
            "b_max": ("float", 5.0),
            "n_points": ("int", 201),
            "c_g": ("floats", [0.25, 0.5, 1.0]),
            "a2": ("floats", [0.5]),
            "r2_mean": ("floats", [0.25, 0.5, 0.75]),
            "r2_precision": ("floats", [1.0, 5.0, 10.0]),
            "tau2_max": ("float", 10.0),
            "corr_a_G": ("floats", [0.1, 0.5, 1.0]),
            "corr_c_min": ("float", 0.05),
            "corr_c_max": ("float", 3.0),
            "corr_n": ("int", 60),
            "corr_G": ("int", 10),
            "corr_p_g": ("int", 10),
        },
    },
    "fit": {
        "fit": {
            "data": ("str", None),
            "groups": ("str", None),
            "response": ("str", "y"),
        },
        "prior": dict(_PRIOR, preset=("str", "R2-u")),
        "sampler": _SAMPLER,
    },
    "simulate": {
        "simulate": {
            "n": ("int", 100),
            "p": ("int", 40),
            "group_size": ("int", 10),
            "rho_in": ("float", 0.8),
            "rho_out": ("float", 0.2),
            "signals": ("strs", ["Distributed", "Concentrated"]),
            "r2": ("floats", [0.25, 0.8]),
            "presets": ("strs", ["R2-1.0"]),
            "replications": ("int", 20),
        },
        "sampler": _SAMPLER,
    },
    "hyper": {
        "hyper": {
            "group_sizes": ("ints", None),
            "preset": ("str", None),
            "r2_mean": ("float", None),
            "r2_precision": ("float", None),
            "signal": ("strs", None),
            "couple": ("str", None),
            "c_g": ("floats", None),
        },
    },
}


def _cast(kind, value, where):
    try:
        if kind.endswith("s") and kind != "bool":
            if isinstance(value, str):
                value = [v.strip() for v in value.split(",") if v.strip()]
            elif not isinstance(value, (list, tuple)):
                value = [value]
            return [_cast(kind[:-1], v, where) for v in value]
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            if isinstance(value, bool):
                return value
            s = str(value).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: cannot read {value!r} as {kind}") from None


def read_config(path):
    """Load an INI or JSON config into ``{section: {key: value}}``."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if text.lstrip().startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return raw
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return {s: dict(parser[s]) for s in parser.sections()}


def resolve_config(raw, command=None, seed=None):
    """Validate ``raw`` against the schema for ``command`` and fill defaults.

    The ``run`` section may carry ``command`` and ``seed``; explicit
    arguments take precedence.
    """
    raw = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}
    run = raw.pop("run", {}) or {}
    if not isinstance(run, dict):
        raise ConfigError("section 'run' must be a table")
    command = command or run.get("command")
    if command not in COMMANDS:
        raise ConfigError(f"unknown or missing command {command!r}; choose from {COMMANDS}")
    if seed is None:
        seed = run.get("seed", 0)
    seed = _cast("int", seed, "run.seed")
    if not 0 <= seed < 2 ** 64:
        raise ConfigError("seed must fit in 64 unsigned bits")
    extra_run = set(run) - {"command", "seed"}
    if extra_run:
        raise ConfigError(f"unknown keys in [run]: {sorted(extra_run)}")
    schema = SCHEMA[command]
    unknown = set(raw) - set(schema)
    if unknown:
        raise ConfigError(f"sections not used by {command}: {sorted(unknown)}")
    out = {"run": {"command": command, "seed": seed}}
    for section, keys in schema.items():
        given = raw.get(section, {}) or {}
        if not isinstance(given, dict):
            raise ConfigError(f"section {section!r} must be a table")
        bad = set(given) - set(keys)
        if bad:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(bad)}")
        res = {}
        for key, (kind, default) in keys.items():
            if key in given and given[key] is not None and given[key] != "":
                res[key] = _cast(kind, given[key], f"{section}.{key}")
            else:
                res[key] = default
        out[section] = res
    return out


# -- output helpers -------------------------------------------------------------


def fmt(x):
    """Serialize a value for CSV: floats with 17 significant digits."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return format(x, ".17g")
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _tag(x):
    return format(float(x), "g")


def _sub_seed(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def _sampler_config(cfg, seed, workers=1):
    s = cfg["sampler"]
    try:
        return SamplerConfig(n_chains=s["n_chains"], n_warmup=s["n_warmup"],
                             n_samples=s["n_samples"], target_accept=s["target_accept"],
                             max_tree_depth=s["max_tree_depth"], seed=seed, workers=workers)
    except DomainError as exc:
        raise ConfigError(f"[sampler]: {exc}") from None


# -- commands -------------------------------------------------------------------


def cmd_prior_predictive(cfg, out, workers=1):
    """Prior predictive effective sizes and R² over an (a_G, c_g) grid."""
    c = cfg["prior_predictive"]
    if c["n_sims"] < 0 or c["G"] < 1 or c["p_g"] < 1:
        raise ConfigError("n_sims must be >= 0, G and p_g >= 1")
    structure = GroupStructure.uniform(c["G"], c["p_g"])
    seed = cfg["run"]["seed"]
    summary = []
    cell = 0
    for a_G in c["a_G"]:
        for c_g in c["c_g"]:
            a1 = c["a1"] if c["a1"] is not None else c["G"] * a_G
            hyper = Hyperparams(a1, c["a2"], a_G, (c_g,) * c["G"])
            meff, r2 = shrinkage.prior_predictive_meff(hyper, structure, c["n_sims"],
                                                       _sub_seed(seed, cell), workers=1,
                                                       with_r2=True)
            cell += 1
            tag = f"aG-{_tag(a_G)}_cg-{_tag(c_g)}"
            write_csv(os.path.join(out, f"meff_samples_{tag}.csv"), ["sim", "group", "meff_g"],
                      ((s, g + 1, meff[s, g]) for s in range(meff.shape[0])
                       for g in range(meff.shape[1])))
            write_csv(os.path.join(out, f"r2_samples_{tag}.csv"), ["sim", "r2"],
                      ((s, r2[s]) for s in range(r2.shape[0])))
            flat = meff.ravel()
            if flat.size:
                q = np.quantile(flat, [0.05, 0.5, 0.95])
                summary.append((a_G, c_g, a1, c["a2"], flat.mean(), q[0], q[1], q[2]))
            else:
                summary.append((a_G, c_g, a1, c["a2"]) + (math.nan,) * 4)
    write_csv(os.path.join(out, "meff_summary.csv"),
              ["a_G", "c_g", "a1", "a2", "mean", "q05", "median", "q95"], summary)


def cmd_density(cfg, out, workers=1):
    """Marginal coefficient densities, Beta / BetaPrime curves and log-variance correlations."""
    c = cfg["density"]
    if c["n_points"] < 2:
        raise ConfigError("n_points must be >= 2")
    grid = np.linspace(-c["b_max"], c["b_max"], c["n_points"])
    rows = []
    for a2 in c["a2"]:
        for c_g in c["c_g"]:
            for b in grid:
                v = prior_core.marginal_b_logdensity(float(b), c_g, a2)
                if is_pole(v):
                    rows.append((c_g, a2, b, math.inf, math.inf, "pole"))
                else:
                    rows.append((c_g, a2, b, v, math.exp(v), "ok"))
    write_csv(os.path.join(out, "marginal_density.csv"),
              ["c_g", "a2", "b", "log_density", "density", "flag"], rows)

    r2_grid = np.linspace(0.0, 1.0, 201)[1:-1]
    tau_grid = np.linspace(0.0, c["tau2_max"], 201)[1:]
    beta_rows, bp_rows = [], []
    for mu in c["r2_mean"]:
        for nu in c["r2_precision"]:
            a1, a2 = prior_core.beta_shapes_from_mean_precision(mu, nu)
            beta_rows += [(mu, nu, a1, a2, x, stats.beta.pdf(x, a1, a2)) for x in r2_grid]
            bp_rows += [(mu, nu, a1, a2, t, math.exp(prior_core.betaprime_logpdf(float(t), a1, a2)))
                        for t in tau_grid]
    write_csv(os.path.join(out, "beta_density.csv"), ["mu", "nu", "a1", "a2", "r2", "density"],
              beta_rows)
    write_csv(os.path.join(out, "betaprime_density.csv"),
              ["mu", "nu", "a1", "a2", "tau2", "density"], bp_rows)

    c_grid = np.linspace(c["corr_c_min"], c["corr_c_max"], c["corr_n"])
    corr_rows = [(a_G, cg, prior_core.log_variance_correlation(a_G, c["corr_G"], float(cg),
                                                                c["corr_p_g"]))
                 for a_G in c["corr_a_G"] for cg in c_grid]
    write_csv(os.path.join(out, "correlation.csv"), ["a_G", "c_g", "correlation"], corr_rows)


def _read_table(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    if not rows:
        raise ConfigError(f"{path} is empty")
    return rows[0], rows[1:]


def load_fit_data(cfg, nongrouped=False):
    """Read the data and group map; return ``(y, X, names, structure)``.

    Predictors are reordered so that each group is contiguous, in order of
    first appearance in the group map. Columns are standardized.
    """
    f = cfg["fit"]
    if not f["data"]:
        raise ConfigError("[fit] data is required")
    header, body = _read_table(f["data"])
    if f["response"] not in header:
        raise ConfigError(f"response column {f['response']!r} not in {f['data']}")
    try:
        values = np.array([[float(v) for v in row] for row in body if row], dtype=float)
    except ValueError:
        raise ConfigError(f"{f['data']} has non-numeric entries") from None
    if values.ndim != 2 or values.shape[0] < 3:
        raise ConfigError("data needs at least 3 rows")
    iy = header.index(f["response"])
    predictors = [h for i, h in enumerate(header) if i != iy]
    if not predictors:
        raise ConfigError("no predictor columns")
    y = values[:, iy]
    if nongrouped or not f["groups"]:
        order = predictors
        sizes = (len(predictors),)
    else:
        gh, gbody = _read_table(f["groups"])
        if [h.strip() for h in gh[:2]] != ["predictor", "group"]:
            raise ConfigError("group map header must be 'predictor,group'")
        mapping = {}
        for row in gbody:
            if row:
                mapping[row[0].strip()] = row[1].strip()
        missing = [p for p in predictors if p not in mapping]
        if missing:
            raise ConfigError(f"predictors without a group: {missing}")
        labels = []
        for p in predictors:
            if mapping[p] not in labels:
                labels.append(mapping[p])
        order = [p for lab in labels for p in predictors if mapping[p] == lab]
        sizes = tuple(sum(1 for p in predictors if mapping[p] == lab) for lab in labels)
    cols = [header.index(p) for p in order]
    X = values[:, cols]
    if np.any(X.std(axis=0, ddof=1) == 0):
        raise ConfigError("constant predictor column")
    return y, standardize(X), order, GroupStructure(sizes)


def _fit_hyper(cfg, structure):
    pr = cfg["prior"]
    explicit = [pr[k] is not None for k in ("a1", "a2", "a_G", "c")]
    try:
        if any(explicit):
            if not all(explicit):
                raise ConfigError("explicit priors need all of a1, a2, a_G, c")
            c = pr["c"] if len(pr["c"]) == structure.G else pr["c"] * structure.G
            if len(c) != structure.G:
                raise ConfigError(f"c has {len(pr['c'])} entries for {structure.G} groups")
            base = Hyperparams(pr["a1"], pr["a2"], pr["a_G"], tuple(c))
        else:
            base = hyperopt.resolve_preset(pr["preset"], structure).hyper
        return Hyperparams(base.a1, base.a2, base.a_G, base.c,
                           sigma_prior=SigmaPrior(pr["sigma_df"], pr["sigma_scale"]),
                           intercept_prior=InterceptPrior(pr["intercept_mean"], pr["intercept_sd"],
                                                          pr["intercept_flat"]))
    except DomainError as exc:
        raise ConfigError(f"[prior]: {exc}") from None


def _summ(x):
    flat = np.asarray(x).ravel()
    q = np.quantile(flat, [0.05, 0.95])
    if np.ptp(flat) == 0:
        rh, es = math.nan, math.nan
    else:
        rh, es = rhat(x), ess(x)
    return flat.mean(), flat.std(ddof=1), q[0], q[1], rh, es


def cmd_fit(cfg, out, workers=1, nongrouped=False):
    """Fit the regression and write draws, a posterior summary and diagnostics."""
    y, X, names, structure = load_fit_data(cfg, nongrouped)
    hyper = _fit_hyper(cfg, structure)
    model = GroupR2Model(RegressionData(y, X, structure), hyper)
    config = _sampler_config(cfg, cfg["run"]["seed"], workers)
    draws = sample(model, config)
    t = draws.transformed
    kappa = 1.0 / (1.0 + t["lambda2"])
    meff_g = np.stack([np.sum(1.0 - kappa[..., sl], axis=-1) for sl in structure.slices()], axis=-1)
    r2_g = t["phi"] * t["r2"][..., None]
    quantities = {"b0": t["b0"], "sigma": t["sigma"], "tau2": t["tau2"], "r2": t["r2"],
                  "meff": meff_g.sum(axis=-1)}
    for j, name in enumerate(names):
        quantities[f"b[{name}]"] = t["b"][:, :, j]
    for g in range(structure.G):
        quantities[f"r2_g[{g + 1}]"] = r2_g[:, :, g]
        quantities[f"meff_g[{g + 1}]"] = meff_g[:, :, g]
    header = ["draw", "lp", "divergent", "tree_depth"] + list(quantities)
    for k in range(draws.n_chains):
        write_csv(os.path.join(out, f"draws_chain{k + 1}.csv"), header,
                  ([s, draws.log_density[k, s], draws.divergent[k, s], draws.tree_depth[k, s]]
                   + [quantities[q][k, s] for q in quantities] for s in range(draws.n_draws)))
    write_csv(os.path.join(out, "summary.csv"),
              ["quantity", "mean", "sd", "q05", "q95", "rhat", "ess_bulk"],
              ([q] + list(_summ(v)) for q, v in quantities.items()))
    diag = {
        "divergences": int(draws.divergent.sum()),
        "divergence_rate": draws.divergence_rate,
        "step_size": draws.step_size.tolist(),
        "ebfmi": ebfmi(draws).tolist(),
        "max_tree_depth_hits": int((draws.tree_depth >= config.max_tree_depth).sum()),
        "mean_tree_depth": float(draws.tree_depth.mean()),
        "mean_accept_stat": float(draws.accept_stat.mean()),
        "structure": list(structure.group_sizes),
        "predictor_order": names,
        "hyperparameters": {"a1": hyper.a1, "a2": hyper.a2, "a_G": hyper.a_G, "c": list(hyper.c),
                            "sigma_df": model.sigma_df, "sigma_scale": model.sigma_scale,
                            "intercept_mean": model.intercept_mean,
                            "intercept_sd": model.intercept_sd,
                            "intercept_flat": model.intercept_flat},
        "persistent_divergence": draws.divergence_rate > 0.25,
    }
    write_json(os.path.join(out, "diagnostics.json"), diag)
    return draws


_METRIC_COLS = ["elpd", "rmse_all", "rmse_zero", "rmse_nonzero", "coverage95", "sensitivity",
                "specificity", "rhat_max", "ess_min"]


def _simulate_cell(args):
    """One (scenario, R², replication): fit every preset on the same dataset."""
    spec, presets, sampler_kw, rep = args
    data_seed, sampler_seed = simharness.replication_seeds(spec.seed, rep)
    data = simharness.simulate_dataset(spec, np.random.default_rng(data_seed))
    cfg = SamplerConfig(**sampler_kw, seed=sampler_seed)
    results = {}
    for name in presets:
        try:
            draws = simharness.fit(data, name, cfg)
            results[name] = ("ok", simharness.evaluate(draws, data))
        except (NumericError, DomainError, FloatingPointError) as exc:
            results[name] = (f"error: {type(exc).__name__}: {exc}".replace("\n", " "), None)
    return results


def cmd_simulate(cfg, out, workers=1):
    """Paired grouped/nongrouped simulation study."""
    c = cfg["simulate"]
    seed = cfg["run"]["seed"]
    s = cfg["sampler"]
    _sampler_config(cfg, seed)  # validate early
    grouped = list(c["presets"])
    try:
        pairs = [(g, hyperopt.nongrouped_counterpart(g)) for g in grouped]
        specs = []
        for i, signal in enumerate(c["signals"]):
            for j, r2 in enumerate(c["r2"]):
                cell_seed = simharness.scenario_seed(seed, i, j)
                specs.append(simharness.ScenarioSpec(n=c["n"], p=c["p"], r2_target=r2,
                                                     signal=signal, group_size=c["group_size"],
                                                     rho_in=c["rho_in"], rho_out=c["rho_out"],
                                                     seed=cell_seed))
    except DomainError as exc:
        raise ConfigError(f"[simulate]: {exc}") from None
    presets = [p for pair in pairs for p in pair]
    jobs = [(sp, presets, dict(s), rep) for sp in specs for rep in range(c["replications"])]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_simulate_cell, jobs))
    else:
        results = [_simulate_cell(j) for j in jobs]

    metric_rows, delta_rows, roc_rows = [], [], []
    for (sp, _, _, rep), res in zip(jobs, results):
        for name in presets:
            status, m = res[name]
            vals = [getattr(m, k) for k in _METRIC_COLS] if m else [math.nan] * len(_METRIC_COLS)
            metric_rows.append([sp.signal, sp.r2_target, name, rep] + vals + [status])
            if m:
                for level, fpr, tpr in m.roc_by_level:
                    roc_rows.append([sp.signal, sp.r2_target, name, rep, level, fpr, tpr])
        for g, ng in pairs:
            (sg, mg), (sn, mn) = res[g], res[ng]
            if mg and mn:
                d_elpd = simharness.delta_metric(mg.elpd, mn.elpd)
                delta_rows.append([sp.signal, sp.r2_target, g, ng, rep, d_elpd,
                                   simharness.delta_metric(mg.elpd, mn.elpd, "asinh")]
                                  + [simharness.delta_metric(getattr(mg, k), getattr(mn, k))
                                     for k in ("rmse_all", "rmse_zero", "rmse_nonzero",
                                               "coverage95", "sensitivity", "specificity")]
                                  + ["ok"])
            else:
                delta_rows.append([sp.signal, sp.r2_target, g, ng, rep] + [math.nan] * 8
                                  + [sg if sg != "ok" else sn])
    write_csv(os.path.join(out, "metrics.csv"),
              ["scenario", "r2_target", "prior", "replication"] + _METRIC_COLS + ["status"],
              metric_rows)
    write_csv(os.path.join(out, "deltas.csv"),
              ["scenario", "r2_target", "prior_grouped", "prior_nongrouped", "replication",
               "d_elpd", "d_elpd_asinh", "d_rmse_all", "d_rmse_zero", "d_rmse_nonzero",
               "d_coverage95", "d_sensitivity", "d_specificity", "status"], delta_rows)
    write_csv(os.path.join(out, "roc.csv"),
              ["scenario", "r2_target", "prior", "replication", "level", "fpr", "tpr"], roc_rows)
    return metric_rows, delta_rows


def cmd_hyper(cfg, out, workers=1):
    """Resolve a preset or a knowledge record to hyperparameters."""
    h = cfg["hyper"]
    if not h["group_sizes"]:
        raise ConfigError("[hyper] group_sizes is required")
    try:
        structure = GroupStructure(tuple(h["group_sizes"]))
        if h["preset"]:
            preset = hyperopt.resolve_preset(h["preset"], structure)
            hyper, why, structure = preset.hyper, f"preset {h['preset']}", preset.structure
        else:
            signal = h["signal"]
            if signal is not None and len(signal) == 1:
                signal = signal[0]
            c_g = h["c_g"]
            if c_g is not None and len(c_g) == 1:
                c_g = c_g[0]
            know = hyperopt.Knowledge(h["r2_mean"], h["r2_precision"], signal, h["couple"], c_g)
            hyper, why = hyperopt.recommend(know, structure)
    except DomainError as exc:
        raise ConfigError(f"[hyper]: {exc}") from None
    write_json(os.path.join(out, "hyperparams.json"),
               {"a1": hyper.a1, "a2": hyper.a2, "a_G": hyper.a_G, "c": list(hyper.c),
                "group_sizes": list(structure.group_sizes), "mu_r2": hyper.mu_r2,
                "nu_r2": hyper.nu_r2, "rationale": why})


_HANDLERS = {
    "prior-predictive": cmd_prior_predictive,
    "density": cmd_density,
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "hyper": cmd_hyper,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="groupr2", description="Group-R2 prior toolkit")
    parser.add_argument("command", nargs="?", choices=COMMANDS,
                        help="what to run; may instead be given as [run] command in the config")
    parser.add_argument("--config", required=True, help="INI or JSON config (or a manifest.json)")
    parser.add_argument("--seed", type=int, default=None, help="overrides [run] seed")
    parser.add_argument("--out", default=".", help="output directory (created if missing)")
    default_workers = os.environ.get("GROUPR2_WORKERS") or os.cpu_count() or 1
    parser.add_argument("--workers", type=int, default=int(default_workers),
                        help="parallel workers (default: $GROUPR2_WORKERS or the CPU count)")
    parser.add_argument("--nongrouped", action="store_true",
                        help="fit: ignore the group map and use one group")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USER if exc.code else EXIT_OK
    try:
        cfg = resolve_config(read_config(args.config), args.command, args.seed)
        if args.nongrouped and cfg["run"]["command"] != "fit":
            raise ConfigError("--nongrouped only applies to fit")
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        os.makedirs(args.out, exist_ok=True)
        write_json(os.path.join(args.out, "manifest.json"), cfg)
        command = cfg["run"]["command"]
        kwargs = {"nongrouped": True} if command == "fit" and args.nongrouped else {}
        _HANDLERS[command](cfg, args.out, workers=args.workers, **kwargs)
    except (ConfigError, DomainError) as exc:
        print(f"groupr2: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (NumericError, FloatingPointError) as exc:
        print(f"groupr2: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
