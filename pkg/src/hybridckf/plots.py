"""SVG figures from an artifact tree.

* ``example_<method>_snr_<snr>.svg``: one run's test-phase estimates over the
  noisy measurements and ground truth.
* ``bands_<method>_snr_<snr>.svg``: Monte Carlo mean with a 95% band.
* ``learning_snr_<snr>.svg``: train/test learning curves with the noise floor.

Every figure is rendered before any file is written, so a missing input
leaves the directory untouched.
"""

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import yaml  # noqa: E402

from hybridckf.config import ExperimentConfig  # noqa: E402
from hybridckf.errors import MissingArtifact  # noqa: E402
from hybridckf.experiment import CHANNELS, RunSeeds, make_datasets, snr_tag  # noqa: E402
from hybridckf.metrics import Z95  # noqa: E402

plt.rcParams["svg.hashsalt"] = "hybridckf"
_OBSERVED_COLUMNS = {"p1": "y1", "p2": "y2", "p5": "y5"}


def read_table(path):
    """CSV as a dict of float columns."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise MissingArtifact(f"{path} is empty")
    header, body = rows[0], rows[1:]
    data = np.array([[float(v) if v else np.nan for v in r] for r in body]).reshape(len(body), len(header))
    return {name: data[:, i] for i, name in enumerate(header)}


def band_region(table, channel):
    """``(t, low, high)`` of the shaded band: mean -+ 1.96 sd across runs."""
    mean, sd = table[f"{channel}_mean"], table[f"{channel}_sd"]
    return table["t"], mean - Z95 * sd, mean + Z95 * sd


def noise_floor(run_info):
    return float(run_info["noise_floor"])


def _svg(fig):
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()


def _band_figure(table, method, snr):
    fig, axes = plt.subplots(len(CHANNELS), 1, figsize=(7, 8), sharex=True)
    for ax, c in zip(axes, CHANNELS):
        t, low, high = band_region(table, c)
        ax.fill_between(t, low, high, color="tab:blue", alpha=0.3, linewidth=0, label="95% band")
        ax.plot(t, table[f"{c}_mean"], color="tab:blue", linewidth=1.0, label="mean estimate")
        ax.plot(t, table[f"{c}_true"], color="black", linestyle="--", linewidth=0.8, label="ground truth")
        ax.set_ylabel(f"{c.upper()} [mmHg]")
    axes[0].legend(loc="upper right", fontsize="small")
    axes[0].set_title(f"{method.upper()} Monte Carlo, SNR {snr_tag(snr)} dB")
    axes[-1].set_xlabel("t [s]")
    return _svg(fig)


def _example_figure(est, test, method, snr):
    fig, axes = plt.subplots(len(CHANNELS), 1, figsize=(7, 8), sharex=True)
    suffix = "_mean" if method == "ckf" else ""
    for i, (ax, c) in enumerate(zip(axes, CHANNELS)):
        if c in _OBSERVED_COLUMNS:
            k = list(_OBSERVED_COLUMNS).index(c)
            ax.plot(test.times, test.observations[:, k], color="0.7", linewidth=0.5, label="measured")
        ax.plot(test.times, test.p_true[:, i], color="black", linestyle="--", linewidth=0.8, label="ground truth")
        ax.plot(est["t"], est[c + suffix], color="tab:red", linewidth=1.0, label="estimate")
        ax.set_ylabel(f"{c.upper()} [mmHg]")
    axes[0].legend(loc="upper right", fontsize="small")
    axes[0].set_title(f"{method.upper()} single run, SNR {snr_tag(snr)} dB")
    axes[-1].set_xlabel("t [s]")
    return _svg(fig)


def _learning_figure(curves, snr):
    fig, axes = plt.subplots(1, len(curves), figsize=(5 * len(curves), 3.6), squeeze=False)
    for ax, (method, curve, floor) in zip(axes[0], curves):
        ax.plot(curve["epoch"], curve["train_nrmse"], color="tab:blue", label="train")
        ax.plot(curve["epoch"], curve["test_nrmse"], color="tab:orange", linestyle="--", label="test")
        ax.axhline(floor, color="black", linewidth=1.0, label="noise floor")
        ax.set_yscale("log")
        ax.set_xlabel("filter step" if method == "ckf" else "epoch")
        ax.set_ylabel("NRMSE")
        ax.set_title(f"{method.upper()}, SNR {snr_tag(snr)} dB")
        ax.legend(fontsize="small")
    fig.tight_layout()
    return _svg(fig)


def _load_config(root):
    path = root / "config.yaml"
    if not path.is_file():
        raise MissingArtifact(f"no config.yaml in {root}")
    tree = yaml.safe_load(path.read_text(encoding="utf-8"))
    tree.pop("config_version", None)
    return ExperimentConfig.from_dict(tree)


def emit_plots(artifact_dir, out_dir=None):
    """Render every figure the artifact tree supports; returns written paths."""
    root = Path(artifact_dir)
    out_dir = Path(out_dir) if out_dir is not None else root / "figures"
    run_files = sorted(root.glob("runs/*/snr_*/run_000/run.yaml"))
    band_files = sorted(root.glob("bands/*_snr_*.csv"))
    if not run_files and not band_files:
        raise MissingArtifact(f"no runs or bands under {root}")
    cfg = _load_config(root)

    rendered = {}
    for path in band_files:
        method, tag = path.stem.split("_snr_")
        rendered[f"bands_{method}_snr_{tag}.svg"] = _band_figure(read_table(path), method, float(tag))

    by_snr = {}
    for path in run_files:
        info = yaml.safe_load(path.read_text(encoding="utf-8"))
        method, snr = info["method"], float(info["snr_db"])
        name = "filtered.csv" if method == "ckf" else "rollout.csv"
        for needed in (name, "learning_curve.csv"):
            if not (path.parent / needed).is_file():
                raise MissingArtifact(f"{path.parent / needed} is missing")
        _, test = make_datasets(cfg, snr, RunSeeds(**info["seeds"]))
        rendered[f"example_{method}_snr_{snr_tag(snr)}.svg"] = _example_figure(
            read_table(path.parent / name), test, method, snr
        )
        by_snr.setdefault(snr, []).append(
            (method, read_table(path.parent / "learning_curve.csv"), noise_floor(info))
        )
    for snr, curves in sorted(by_snr.items()):
        curves.sort(key=lambda c: c[0] != "ckf")
        rendered[f"learning_snr_{snr_tag(snr)}.svg"] = _learning_figure(curves, snr)

    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name in sorted(rendered):
        target = out_dir / name
        target.write_text(rendered[name], encoding="utf-8")
        written.append(target)
    return written
