"""Seeded runs, Monte Carlo cells and the on-disk artifact tree.

Seed splitting: for a (master_seed, snr, run_index) triple a
``SeedSequence([master_seed, sign, round(100*|snr|), run_index])`` is spawned
into three children whose first 32-bit words seed the training noise, the
test noise and the network initialization, in that order. The method does not
enter, so CKF and BPTT runs with the same index see identical data.

Artifact layout (version ``LAYOUT_VERSION``)::

    manifest.yaml  config.yaml  runs.csv  summary.csv  summary.yaml  failures.csv
    bands/<method>_snr_<snr>.csv
    runs/<method>/snr_<snr>/run_<index>/{run.yaml, learning_curve.csv, weights.csv,
                                         filtered.csv | rollout.csv}
    datasets/snr_<snr>/{train,test}.csv (+ .yaml sidecars; written by ``simulate``)

Floats are written with ``repr`` so reruns are byte-identical.
"""

import dataclasses
import functools
import logging
import math
import os
from pathlib import Path

import numpy as np
import yaml

from hybridckf import __version__, mlp
from hybridckf.bptt import bptt_train, open_loop_nrmse
from hybridckf.ckf import ckf_test, ckf_train
from hybridckf.errors import Diverged, MissingArtifact, TooManyFailures
from hybridckf.metrics import RunOutcome, evaluate, monte_carlo, nrmse, windowed_nrmse
from hybridckf.retina import PRESSURE_LABELS, make_train_test

logger = logging.getLogger(__name__)

LAYOUT_VERSION = "1"
CHANNELS = tuple(label.lower() for label in PRESSURE_LABELS)
#: a BPTT run has "reached its floor" once its test NRMSE is within this factor of its best
BPTT_FLOOR_FACTOR = 1.05


@dataclasses.dataclass(frozen=True)
class RunSeeds:
    train_noise: int
    test_noise: int
    init: int


def derive_seeds(master_seed, snr, run_index):
    sign = 0 if snr >= 0 else 1
    ss = np.random.SeedSequence([int(master_seed), sign, int(round(abs(snr) * 100)), int(run_index)])
    words = [int(child.generate_state(1)[0]) for child in ss.spawn(3)]
    return RunSeeds(*words)


def snr_tag(snr):
    return f"{snr:g}"


def make_datasets(cfg, snr, seeds):
    sim = cfg["sim"]
    return make_train_test(
        cfg.retina_params(),
        sim["dt"],
        sim["train_seconds"],
        sim["test_seconds"],
        snr,
        seeds.train_noise,
        seeds.test_noise,
        method=sim["integrator"],
    )


def _first_below(curve, level):
    hits = np.flatnonzero(np.asarray(curve) < level)
    return int(hits[0]) if hits.size else None


def _ckf_run(cfg, train, test, seeds):
    fcfg = cfg.filter_config(train)
    trained = ckf_train(train, fcfg, seed=seeds.init)
    tcfg = fcfg.with_model(meas_noise=cfg.meas_noise_for(test))
    tested = ckf_test(test, trained.weights, tcfg)
    test_curve = windowed_nrmse(tested.means, test.p_true, fcfg.window)
    n = max(train.n_t, test.n_t)
    curve = np.full((n, 3), np.nan)
    curve[:, 0] = np.arange(n)
    curve[: train.n_t, 1] = trained.learning_curve
    curve[: test.n_t, 2] = test_curve
    return trained.weights, tested.means, tested.variances, curve, {
        "max_rung": int(max(trained.max_rung, tested.max_rung)),
        "test_curve": test_curve,
    }


def _bptt_run(cfg, train, test, seeds):
    bcfg = cfg.bptt_config(seeds.init)
    res = bptt_train(train, bcfg, test_ds=test)
    _, traj = open_loop_nrmse(res.weights, test, bcfg)
    if traj is None:
        raise Diverged("open-loop test rollout diverged")
    return res.weights, traj, np.zeros_like(traj), res.learning_curve, {}


def execute_run(cfg, snr, method, run_index):
    """One seeded train/test run; returns a :class:`RunOutcome` keyed by run index."""
    seeds = derive_seeds(cfg["master_seed"], snr, run_index)
    train, test = make_datasets(cfg, snr, seeds)
    runner = {"ckf": _ckf_run, "bptt": _bptt_run}[method]
    weights, means, variances, curve, info = runner(cfg, train, test, seeds)
    report = evaluate(means, test.p_true, CHANNELS)
    floor = nrmse(train.y_noisy, train.y_clean) if train.is_noisy else 0.0
    if method == "ckf":
        reach = _first_below(info.pop("test_curve"), floor)
    else:
        test_col = curve[:, 2]
        finite = test_col[np.isfinite(test_col)]
        reach = None
        if finite.size:
            reach = int(np.flatnonzero(test_col <= BPTT_FLOOR_FACTOR * finite.min())[0])
    extras = {
        "seeds": dataclasses.asdict(seeds),
        "times": test.times,
        "truth": test.p_true,
        "means": means,
        "variances": variances,
        "learning_curve": curve,
        "weights": mlp.flatten(weights),
        "template": weights,
        "noise_floor": float(floor),
        "steps_to_floor": reach,
        **info,
    }
    return RunOutcome(
        seed=run_index,
        metrics={
            "mape": report.mape,
            "nrmse": report.nrmse,
            "nrmse_range_squared": report.nrmse_range_squared,
        },
        trajectories={c: means[:, i] for i, c in enumerate(CHANNELS)},
        extras=extras,
    )


def run_cell(cfg, snr, method, jobs=1):
    """Monte Carlo over ``n_runs`` run indices for one (snr, method) cell."""
    run = functools.partial(execute_run, cfg, snr, method)
    return monte_carlo(run, range(cfg["n_runs"]), jobs=jobs)


# ---------------------------------------------------------------- writing


def fmt(x):
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    lines.extend(",".join(fmt(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_yaml(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(data, sort_keys=True), encoding="utf-8")


def _plain(x):
    """YAML-safe copy with floats in round-trip form."""
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


def write_weights(path, params):
    meta = "# hybridckf-weights v1 n={} in_offset={} in_gain={} out_gain={}".format(
        mlp.N_WEIGHTS,
        ";".join(fmt(v) for v in params.in_offset),
        ";".join(fmt(v) for v in params.in_gain),
        fmt(params.out_gain),
    )
    values = mlp.flatten(params)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = "\n".join(fmt(v) for v in values)
    path.write_text(f"{meta}\nvalue\n{body}\n", encoding="utf-8")


def read_weights(path):
    path = Path(path)
    if not path.is_file():
        raise MissingArtifact(f"no weights file at {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# hybridckf-weights"):
        raise MissingArtifact(f"{path} is not a weights file")
    meta = dict(item.split("=", 1) for item in lines[0].split()[3:])
    values = np.array([float(v) for v in lines[2:]])
    if len(values) != int(meta["n"]):
        raise MissingArtifact(f"{path} holds {len(values)} values, expected {meta['n']}")
    template = mlp.zero_params()
    template = dataclasses.replace(
        template,
        in_offset=np.array([float(v) for v in meta["in_offset"].split(";")]),
        in_gain=np.array([float(v) for v in meta["in_gain"].split(";")]),
        out_gain=float(meta["out_gain"]),
    )
    return mlp.unflatten(values, template)


def write_dataset(path, ds):
    rows = zip(
        ds.times, ds.pin, ds.pout, *ds.p_true.T,
        ds.pin_noisy if ds.is_noisy else ds.pin,
        ds.pout_noisy if ds.is_noisy else ds.pout,
        *(ds.observations.T),
    )  # fmt: skip
    header = ["t", "pin", "pout", "p1", "p2", "p4", "p5", "pin_noisy", "pout_noisy", "y1", "y2", "y5"]
    write_csv(path, header, rows)
    write_yaml(
        Path(path).with_suffix(".yaml"),
        _plain({"dt": ds.dt, "n_t": ds.n_t, "snr_db": ds.snr_db, "seed": ds.seed, "layout_version": LAYOUT_VERSION}),
    )


def run_dir(out, method, snr, run_index):
    return Path(out) / "runs" / method / f"snr_{snr_tag(snr)}" / f"run_{run_index:03d}"


def write_run(out, method, snr, outcome):
    d = run_dir(out, method, snr, outcome.seed)
    ex = outcome.extras
    times, means, variances = ex["times"], ex["means"], ex["variances"]
    if method == "ckf":
        header = ["t"] + [f"{c}_{s}" for c in CHANNELS for s in ("mean", "var")]
        rows = (
            [t] + [v for pair in zip(m, var) for v in pair] for t, m, var in zip(times, means, variances)
        )
        write_csv(d / "filtered.csv", header, rows)
    else:
        write_csv(d / "rollout.csv", ["t", *CHANNELS], ([t, *m] for t, m in zip(times, means)))
    write_csv(d / "learning_curve.csv", ["epoch", "train_nrmse", "test_nrmse"], ex["learning_curve"].tolist())
    write_weights(d / "weights.csv", mlp.unflatten(ex["weights"], ex["template"]))
    info = {
        "method": method,
        "snr_db": snr,
        "run_index": outcome.seed,
        "seeds": ex["seeds"],
        "metrics": outcome.metrics,
        "noise_floor": ex["noise_floor"],
        "steps_to_floor": ex["steps_to_floor"],
    }
    if "max_rung" in ex:
        info["max_rung"] = ex["max_rung"]
    write_yaml(d / "run.yaml", _plain(info))


def band_path(out, method, snr):
    return Path(out) / "bands" / f"{method}_snr_{snr_tag(snr)}.csv"


def write_band(out, method, snr, summary):
    first = summary.outcomes[0].extras
    times, truth = first["times"], first["truth"]
    header = ["t"] + [f"{c}_{s}" for c in CHANNELS for s in ("true", "mean", "low", "high", "sd")]
    cols = [times]
    for i, c in enumerate(CHANNELS):
        cols += [truth[:, i], summary.band_mean[c], summary.band_low[c], summary.band_high[c], summary.band_sd[c]]
    write_csv(band_path(out, method, snr), header, zip(*cols))


def write_header_files(out, cfg, command):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml(), encoding="utf-8")
    write_yaml(out / "manifest.yaml", {"layout_version": LAYOUT_VERSION, "command": command, "version": __version__})


SUMMARY_HEADER = [
    "method", "snr_db", "n_runs", "n_failed",
    "mape_mean", "mape_ci_low", "mape_ci_high",
    "nrmse_mean", "nrmse_ci_low", "nrmse_ci_high",
    "nrmse_range_squared_mean",
]  # fmt: skip


def run_sweep(cfg, out, jobs=1, command="sweep"):
    """All (snr, method) cells; returns the list of cells that failed outright."""
    out = Path(out)
    write_header_files(out, cfg, command)
    run_rows, summary_rows, failure_rows, failed_cells = [], [], [], []
    summary_doc = {}
    for snr in cfg["snr_levels"]:
        for method in cfg["methods"]:
            try:
                summary = run_cell(cfg, snr, method, jobs=jobs)
            except TooManyFailures as exc:
                logger.error("cell %s at %s dB failed: %s", method, snr, exc)
                failed_cells.append((method, snr))
                failure_rows += [(snr, method, s, msg) for s, msg in exc.failures]
                summary_rows.append([method, snr, 0, len(exc.failures)] + [math.nan] * 7)
                continue
            for o in summary.outcomes:
                write_run(out, method, snr, o)
                run_rows.append([o.extras["seeds"]["init"], method, snr, o.metrics["mape"], o.metrics["nrmse"]])
            failure_rows += [(snr, method, s, msg) for s, msg in summary.failures]
            write_band(out, method, snr, summary)
            m, ci = summary.metric_mean, summary.metric_ci95
            summary_rows.append([
                method, snr, summary.n_runs, len(summary.failures),
                m["mape"], *ci["mape"], m["nrmse"], *ci["nrmse"], m["nrmse_range_squared"],
            ])  # fmt: skip
            summary_doc[f"{method}@{snr_tag(snr)}"] = _plain({
                "n_runs": summary.n_runs,
                "run_indices": summary.seeds,
                "failures": [list(f) for f in summary.failures],
                "mean": m,
                "ci95": {k: list(v) for k, v in ci.items()},
            })  # fmt: skip
    write_csv(out / "runs.csv", ["seed", "method", "snr_db", "mape", "nrmse"], run_rows)
    write_csv(out / "summary.csv", SUMMARY_HEADER, summary_rows)
    write_csv(out / "failures.csv", ["snr_db", "method", "run_index", "error"], failure_rows)
    write_yaml(out / "summary.yaml", summary_doc)
    return failed_cells


def run_single(cfg, out, command="train"):
    """Run index 0 for every (snr, method); writes run directories and ``runs.csv``."""
    out = Path(out)
    write_header_files(out, cfg, command)
    rows = []
    for snr in cfg["snr_levels"]:
        for method in cfg["methods"]:
            o = execute_run(cfg, snr, method, 0)
            write_run(out, method, snr, o)
            rows.append([o.extras["seeds"]["init"], method, snr, o.metrics["mape"], o.metrics["nrmse"]])
    write_csv(out / "runs.csv", ["seed", "method", "snr_db", "mape", "nrmse"], rows)


def simulate(cfg, out):
    out = Path(out)
    write_header_files(out, cfg, "simulate")
    for snr in cfg["snr_levels"]:
        train, test = make_datasets(cfg, snr, derive_seeds(cfg["master_seed"], snr, 0))
        write_dataset(out / "datasets" / f"snr_{snr_tag(snr)}" / "train.csv", train)
        write_dataset(out / "datasets" / f"snr_{snr_tag(snr)}" / "test.csv", test)


def evaluate_tree(cfg, out):
    """Re-evaluate stored weights on regenerated test data; writes ``evaluation.csv``."""
    out = Path(out)
    run_files = sorted((out / "runs").glob("*/snr_*/run_*/run.yaml")) if (out / "runs").is_dir() else []
    if not run_files:
        raise MissingArtifact(f"no trained runs under {out / 'runs'}")
    rows = []
    for path in run_files:
        info = yaml.safe_load(path.read_text(encoding="utf-8"))
        weights = read_weights(path.parent / "weights.csv")
        seeds = RunSeeds(**info["seeds"])
        snr, method = float(info["snr_db"]), info["method"]
        train, test = make_datasets(cfg, snr, seeds)
        if method == "ckf":
            fcfg = cfg.filter_config(train).with_model(meas_noise=cfg.meas_noise_for(test))
            means = ckf_test(test, weights, fcfg).means
        else:
            _, means = open_loop_nrmse(weights, test, cfg.bptt_config(seeds.init))
            if means is None:
                raise Diverged(f"open-loop rollout diverged for {path.parent}")
        report = evaluate(means, test.p_true, CHANNELS)
        rows.append([seeds.init, method, snr, report.mape, report.nrmse, report.nrmse_range_squared])
    write_csv(
        out / "evaluation.csv", ["seed", "method", "snr_db", "mape", "nrmse", "nrmse_range_squared"], rows
    )
    return rows


def default_jobs():
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1
