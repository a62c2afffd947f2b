"""Seeded experiment orchestration: task construction, runs, metrics files,
bound reports and parameter sweeps.

Output layout of one experiment directory::

    resolved_config.txt   snapshot that reproduces the run bit-exactly
    metrics.csv           one row per logged event, all seeds
    series_seed<s>.json   logged series needed to re-evaluate the bounds
    bounds_seed<s>.json   bound report keyed by cloud epoch
    ERROR                 only after a failure; holds the error message
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import warnings

import numpy as np

from . import bounds as bd
from . import data as dp
from . import mobility as mob
from .config import ExperimentConfig
from .engine import CLOUD_AGG, HFLConfig, Scenario, run_mob_hierfavg
from .errors import ConfigError, MobHFLError, NonMixingError, StructureError
from .model import MEAN_QUADRATIC, MLP, ModelSpec

log = logging.getLogger(__name__)

METRICS_SCHEMA = 1
METRICS_COLUMNS = ("seed", "cloud_epoch", "edge_round", "tau", "event", "test_acc", "train_loss",
                   "cf_diff", "avg_prob_diff", "theta_min", "theta_max")
SWEEP_AXES = ("speed", "tau_e", "tau_l", "N", "M", "p_s", "tau_pair")
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

BOUND_CASE = {"iid": bd.IID, "local_niid": bd.EDGE_IID, "edge_niid": bd.EDGE_NIID}


def build_task(cfg, seed):
    """Model spec, training set, test set (restricted to the classes in use) and plan."""
    train = dp.generate_synthetic(cfg.C, cfg.d, cfg.per_class, cfg.separation, seed, cfg.offset, split=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        if cfg.partition == "iid":
            plan = dp.partition_iid(train, cfg.M, seed)
        elif cfg.partition == "local_niid":
            plan = dp.partition_local_niid(train, cfg.M, cfg.l, seed)
        else:
            plan = dp.partition_edge_niid(train, cfg.N, cfg.M, cfg.l, seed)
    if cfg.task == MEAN_QUADRATIC:
        spec = ModelSpec(MEAN_QUADRATIC, targets=dp.class_means(cfg.C, cfg.d, cfg.separation) + cfg.offset)
        return spec, train, None, plan
    hidden = cfg.hidden if cfg.task == MLP else ()
    spec = ModelSpec(cfg.task, cfg.d, cfg.C, hidden)
    test = dp.generate_synthetic(cfg.C, cfg.d, cfg.test_per_class, cfg.separation, seed, cfg.offset, split=1)
    test = test.subset(np.flatnonzero(np.isin(test.labels, plan.classes_used)))
    return spec, train, test, plan


def load_matrix(path, N):
    try:
        Q = np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read transition matrix: {exc}", key="matrix_path") from None
    if Q.shape != (N, N):
        raise ConfigError(f"transition matrix is {Q.shape}, expected ({N}, {N})", key="matrix_path")
    return mob.validate_transition(Q)


def build_scenario(cfg):
    """Scenario plus the transition matrix that governs it (None when static)."""
    if cfg.mobility == "static":
        return Scenario.static(), None
    if cfg.mobility in ("ring", "speed"):
        Q = mob.ring_transition(mob.RingParams(cfg.N, cfg.p_s))
        return Scenario.markov(Q), Q
    if cfg.mobility == "matrix":
        Q = load_matrix(cfg.matrix_path, cfg.N)
        return Scenario.markov(Q), Q
    trace = mob.load_trace(cfg.trace_path, cfg.N)
    return Scenario.from_trace(trace), mob.empirical_transition(trace, cfg.N, cfg.M)


def hfl_config(cfg, seed, scenario):
    return HFLConfig(M=cfg.M, N=cfg.N, tau_l=cfg.tau_l, tau_e=cfg.tau_e, K=cfg.K, eta=cfg.eta,
                     batch_size=cfg.batch_size, scenario=scenario, full_batch=cfg.full_batch,
                     empty_edge_policy=cfg.empty_edge_policy, workers=cfg.workers, seed=seed,
                     log_local=cfg.log_local)


def _fmt(x):
    if x is None:
        return ""
    return repr(float(x))


def metrics_row(seed, rec):
    return [str(seed), str(rec.cloud_epoch), str(rec.edge_round), str(rec.tau), rec.event,
            _fmt(rec.test_accuracy), _fmt(rec.train_loss), _fmt(rec.cf_difference),
            _fmt(rec.avg_prob_difference), _fmt(min(rec.theta)), _fmt(max(rec.theta))]


def emit_metrics(rows, path):
    """Write ``(seed, RoundRecord)`` pairs as a metrics CSV with the fixed column order."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for seed, rec in rows:
            writer.writerow(metrics_row(seed, rec))


def read_metrics(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
            raise ConfigError(f"{path}: unexpected metrics columns {reader.fieldnames}")
        return list(reader)


def _event_and_accuracy(row):
    if isinstance(row, dict):
        acc = row["test_acc"]
        return row["event"], int(row["cloud_epoch"]), (float(acc) if acc else None)
    return row.event, row.cloud_epoch, row.test_accuracy


def epochs_to_accuracy(rows, targets):
    """First cloud epoch whose test accuracy reaches each target, or -1.

    Only cloud-aggregation rows count, and the first crossing wins even if
    accuracy later drops below the target again.
    """
    curve = [(k, a) for ev, k, a in map(_event_and_accuracy, rows) if ev == CLOUD_AGG and a is not None]
    out = []
    for target in targets:
        out.append(next((k for k, a in curve if a >= target), -1))
    return out


def final_accuracy(rows):
    curve = [a for ev, _, a in map(_event_and_accuracy, rows) if ev == CLOUD_AGG and a is not None]
    return curve[-1] if curve else None


def bound_series(cfg, result, spec, train, plan, Q):
    """Estimate the bound constants from a finished run; probes are the cloud checkpoints."""
    memberships = np.asarray(result.assignments)
    probes = result.cloud_models
    est = bd.estimate_gradient_differences(spec, train, plan, memberships, probes, cfg.N)
    smooth = bd.estimate_smoothness(spec, train, plan, probes)
    G = None
    if spec.is_classifier:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            G = bd.estimate_G(spec, train.subset(plan.all_indices()), probes)
    lam = None
    if Q is not None:
        try:
            lam = mob.lambda_star(Q)
        except (NonMixingError, StructureError) as exc:
            log.info("no mixing rate for this scenario: %s", exc)
    pooled = train.labels[plan.all_indices()]
    p_global = dp.label_distribution(pooled, train.num_classes)
    pdiff = []
    for a in memberships:
        dists, _ = dp.edge_label_distributions(train.labels, plan, a, cfg.N, train.num_classes)
        pdiff.append([None if np.isnan(row).any() else dp.probability_difference(p_global, row)
                      for row in dists])
    expected = None
    if lam is not None and lam > 0:
        expected = expected_prob_diff(train.labels, plan, memberships[0], Q, cfg.N, p_global, lam)
    cf = [r.cf_difference for r in result.records if r.event == CLOUD_AGG]
    return bd.BoundSeries(
        case=BOUND_CASE[cfg.partition], eta=cfg.eta, tau_l=cfg.tau_l, tau_e=cfg.tau_e, K=cfg.K,
        N=cfg.N, beta=smooth.beta, rho=smooth.rho, delta=est.delta,
        Delta_series=[float(x) for x in est.Delta_series], prob_diff_series=pdiff,
        theta_series=est.theta_series.tolist(), cf_measured=cf, G=G, lambda_star=lam,
        expected_prob_diff_series=expected, extra={"delta_m": est.delta_m.tolist()},
    )


def expected_prob_diff(labels, plan, assignment, Q, N, p_global, lam, floor=1e-8):
    """Exact (infinite-fleet) per-edge probability differences under ``Q``, for
    every step ``j`` with ``lam**j >= floor``; None if an edge loses all mass."""
    dists, theta = dp.edge_label_distributions(labels, plan, assignment, N, len(p_global))
    horizon = int(math.floor(math.log(floor) / math.log(lam))) if lam < 1 else 0
    P = np.nan_to_num(dists)
    out = []
    try:
        for j in range(horizon + 1):
            out.append([dp.probability_difference(p_global, row) if t > 0 else None
                        for row, t in zip(P, theta)])
            P, theta = mob.label_evolution(P, Q, theta)
    except MobHFLError as exc:
        log.info("expected label evolution unavailable: %s", exc)
        return None
    return out


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_bound_files(out_dir, seed, series):
    _write_json(os.path.join(out_dir, f"series_seed{seed}.json"), series.to_json())
    _write_json(os.path.join(out_dir, f"bounds_seed{seed}.json"), bd.bound_report(series))


def run_experiment(cfg: ExperimentConfig):
    """Run every seed of ``cfg`` into ``cfg.output_dir`` and return an exit status."""
    cfg.validate()
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    marker = os.path.join(out, "ERROR")
    if os.path.exists(marker):
        os.remove(marker)
    with open(os.path.join(out, "resolved_config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    with open(os.path.join(out, "metrics.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        try:
            scenario, Q = build_scenario(cfg)
            for seed in cfg.seeds:
                spec, train, test, plan = build_task(cfg, seed)

                def sink(rec, seed=seed):
                    writer.writerow(metrics_row(seed, rec))

                result = run_mob_hierfavg(hfl_config(cfg, seed, scenario), train, plan, spec,
                                          test_set=test, sink=sink)
                fh.flush()
                if cfg.bounds:
                    write_bound_files(out, seed, bound_series(cfg, result, spec, train, plan, Q))
        except (MobHFLError, OSError) as exc:
            fh.flush()
            with open(marker, "w", encoding="utf-8") as mf:
                mf.write(f"{type(exc).__name__}: {exc}\n")
            log.error("experiment failed: %s", exc)
            return EXIT_CONFIG if isinstance(exc, ConfigError) else EXIT_RUNTIME
    return EXIT_OK


def reevaluate_bounds(directory):
    """Rebuild every ``bounds_seed*.json`` in ``directory`` from its logged series."""
    written = []
    for name in sorted(os.listdir(directory)):
        if name.startswith("series_seed") and name.endswith(".json"):
            with open(os.path.join(directory, name), encoding="utf-8") as fh:
                series = bd.BoundSeries.from_json(json.load(fh))
            target = os.path.join(directory, name.replace("series_", "bounds_"))
            _write_json(target, bd.bound_report(series))
            written.append(target)
    if not written:
        raise ConfigError(f"no series_seed*.json files in {directory}")
    return written


def apply_axis(cfg, axis, value):
    """Copy of ``cfg`` with one sweep coordinate set."""
    if axis == "speed":
        return cfg.replace(mobility="speed", speed_mps=float(value)).resolve().validate()
    if axis == "p_s":
        return cfg.replace(mobility="ring", p_s=float(value), speed_mps=None).validate()
    if axis == "tau_pair":
        try:
            tl, te = (int(x) for x in str(value).lower().split("x"))
        except ValueError:
            raise ConfigError(f"tau_pair values look like '6x10', got {value!r}") from None
        return cfg.replace(tau_l=tl, tau_e=te).validate()
    if axis in ("tau_e", "tau_l", "N", "M"):
        return cfg.replace(**{axis: int(value)}).validate()
    raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def summarize_point(metrics_path, seeds, targets):
    """Summary statistics for one sweep point, computed from its metrics CSV only."""
    rows = read_metrics(metrics_path)
    finals, losses, etts = [], [], []
    for seed in seeds:
        mine = [r for r in rows if r["seed"] == str(seed)]
        clouds = [r for r in mine if r["event"] == CLOUD_AGG]
        if not clouds:
            continue
        acc = final_accuracy(mine)
        if acc is not None:
            finals.append(acc)
        losses.append(float(clouds[-1]["train_loss"]))
        etts.append(epochs_to_accuracy(mine, targets))
    row = {"n_seeds": len(losses),
           "mean_final_acc": _mean(finals), "std_final_acc": _std(finals),
           "mean_final_loss": _mean(losses), "std_final_loss": _std(losses)}
    for i, t in enumerate(targets):
        hits = [e[i] for e in etts if e[i] >= 0]
        row[f"epochs_to_{t}_mean"] = _mean(hits) if hits else -1
        row[f"epochs_to_{t}_reached"] = len(hits)
    return row


def _mean(xs):
    return float(np.mean(xs)) if xs else None


def _std(xs):
    # sample standard deviation; 0 for a single seed
    return float(np.std(xs, ddof=1)) if len(xs) > 1 else (0.0 if xs else None)


def sweep(cfg, axis, values):
    """Run ``cfg`` at every axis value (each in its own subdirectory) and write
    ``summary.csv``. Failing points are recorded and the sweep continues."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    os.makedirs(cfg.output_dir, exist_ok=True)
    summary = []
    for value in values:
        point_dir = os.path.join(cfg.output_dir, f"{axis}={value}")
        row = {"axis": axis, "value": str(value)}
        try:
            point = apply_axis(cfg, axis, value).replace(output_dir=point_dir)
            status = run_experiment(point)
        except MobHFLError as exc:
            os.makedirs(point_dir, exist_ok=True)
            with open(os.path.join(point_dir, "ERROR"), "w", encoding="utf-8") as fh:
                fh.write(f"{type(exc).__name__}: {exc}\n")
            status = EXIT_CONFIG
        row["status"] = status
        metrics_path = os.path.join(point_dir, "metrics.csv")
        if os.path.exists(metrics_path):
            row.update(summarize_point(metrics_path, cfg.seeds, cfg.targets))
        summary.append(row)
    write_summary(summary, os.path.join(cfg.output_dir, "summary.csv"), cfg.targets)
    return summary


def summary_columns(targets):
    cols = ["axis", "value", "status", "n_seeds", "mean_final_acc", "std_final_acc",
            "mean_final_loss", "std_final_loss"]
    for t in targets:
        cols += [f"epochs_to_{t}_mean", f"epochs_to_{t}_reached"]
    return cols


def write_summary(summary, path, targets):
    cols = summary_columns(targets)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for row in summary:
            writer.writerow(["" if row.get(c) is None else
                             (repr(row[c]) if isinstance(row[c], float) and math.isfinite(row[c]) else row[c])
                             for c in cols])
