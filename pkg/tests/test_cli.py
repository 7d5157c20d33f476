import filecmp
import os
from pathlib import Path

import numpy as np
import pytest
import yaml

from hybridckf import mlp
from hybridckf.cli import main
from hybridckf.config import DEFAULTS, ExperimentConfig, parse_override
from hybridckf.errors import ConfigError, MissingArtifact
from hybridckf.experiment import derive_seeds, execute_run, read_weights, write_weights
from hybridckf.metrics import Z95, nrmse
from hybridckf.plots import band_region, emit_plots, noise_floor, read_table

TINY = [
    "sim.train_seconds=0.6",
    "sim.test_seconds=0.4",
    "n_runs=3",
    "snr_levels=[22.56]",
    "bptt.epochs=3",
]


def tree_files(root):
    return sorted(p.relative_to(root) for p in Path(root).rglob("*") if p.is_file())


@pytest.fixture(scope="module")
def swept(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep") / "a"
    args = ["sweep", "--out", str(out), "--jobs", "1"]
    for item in TINY:
        args += ["--set", item]
    assert main(args) == 0
    return out


class TestConfig:
    def test_empty_mapping_is_complete(self):
        cfg = ExperimentConfig.load(text="{}")
        assert cfg.tree == ExperimentConfig.load().tree
        assert cfg["snr_levels"] == [49.53, 39.52, 32.58, 29.51, 22.56]

    def test_override_types(self):
        cfg = ExperimentConfig.load(
            overrides=["filter.q_s=1e-3", "snr_levels=[30, 20]", "bptt.truncation_window=25", "filter.test_q_p4=null"]
        )
        assert cfg["filter"]["q_s"] == 1e-3
        assert cfg["snr_levels"] == [30.0, 20.0]
        assert cfg["bptt"]["truncation_window"] == 25
        assert cfg["filter"]["test_q_p4"] is None

    def test_parse_override_nesting(self):
        assert parse_override("a.b.c=[1, 2]") == {"a": {"b": {"c": [1, 2]}}}

    @pytest.mark.parametrize(
        "override,key",
        [
            ("filter.nope=1", "filter.nope"),
            ("bogus=1", "bogus"),
            ("n_runs=0", "n_runs"),
            ("methods=[ukf]", "methods"),
            ("filter.q_s=[1, 2]", "filter.q_s"),
            ("bptt.truncation_window=half", "bptt.truncation_window"),
            ("sim=3", "sim"),
        ],
    )
    def test_errors_name_the_key(self, override, key):
        with pytest.raises(ConfigError) as info:
            ExperimentConfig.load(overrides=[override])
        assert info.value.key == key

    def test_domain_errors_surface(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.load(overrides=["retina.drivers.pin_mean=15"])

    def test_round_trip(self):
        cfg = ExperimentConfig.load(overrides=["filter.q_s=[1e-4, 1e-4, 1e-3, 1e-4]"])
        again = yaml.safe_load(cfg.to_yaml())
        again.pop("config_version")
        assert ExperimentConfig.from_dict(again).tree == cfg.tree

    def test_defaults_untouched(self):
        ExperimentConfig.load(overrides=["n_runs=2"])
        assert DEFAULTS["n_runs"] == 10


class TestSeeds:
    def test_paired_across_methods(self):
        cfg = ExperimentConfig.load(overrides=TINY)
        a = execute_run(cfg, 22.56, "ckf", 1)
        b = execute_run(cfg, 22.56, "bptt", 1)
        assert a.extras["seeds"] == b.extras["seeds"]
        np.testing.assert_array_equal(a.extras["truth"], b.extras["truth"])

    def test_distinct_streams(self):
        seeds = {derive_seeds(0, snr, i) for snr in (22.56, 49.53) for i in range(5)}
        assert len(seeds) == 10
        s = derive_seeds(0, 22.56, 0)
        assert len({s.train_noise, s.test_noise, s.init}) == 3
        assert derive_seeds(1, 22.56, 0) != s


class TestWeightsFile:
    def test_round_trip(self, tmp_path):
        params = mlp.mlp_init(3)
        write_weights(tmp_path / "w.csv", params)
        assert read_weights(tmp_path / "w.csv") == params
        lines = (tmp_path / "w.csv").read_text().splitlines()
        assert lines[0].startswith("#") and len(lines) == 2 + 101

    def test_missing(self, tmp_path):
        with pytest.raises(MissingArtifact):
            read_weights(tmp_path / "absent.csv")


class TestCommands:
    def test_sweep_tree(self, swept):
        names = {str(p) for p in tree_files(swept)}
        for required in ("config.yaml", "manifest.yaml", "runs.csv", "summary.csv", "summary.yaml"):
            assert required in names
        summary = (swept / "summary.csv").read_text().splitlines()
        assert len(summary) == 3  # header + ckf + bptt
        runs = (swept / "runs.csv").read_text().splitlines()
        assert runs[0] == "seed,method,snr_db,mape,nrmse"
        assert len(runs) == 1 + 6
        filtered = (swept / "runs/ckf/snr_22.56/run_000/filtered.csv").read_text().splitlines()
        assert filtered[0] == "t,p1_mean,p1_var,p2_mean,p2_var,p4_mean,p4_var,p5_mean,p5_var"
        curve = (swept / "runs/bptt/snr_22.56/run_000/learning_curve.csv").read_text().splitlines()
        assert curve[0] == "epoch,train_nrmse,test_nrmse" and len(curve) == 4

    def test_config_embedded(self, swept):
        stored = yaml.safe_load((swept / "config.yaml").read_text())
        assert stored["n_runs"] == 3 and stored["bptt"]["epochs"] == 3

    def test_deterministic_rerun(self, swept, tmp_path):
        out = tmp_path / "b"
        args = ["sweep", "--out", str(out), "--jobs", "2"]
        for item in TINY:
            args += ["--set", item]
        assert main(args) == 0
        assert tree_files(out) == tree_files(swept)
        for rel in tree_files(swept):
            assert filecmp.cmp(out / rel, swept / rel, shallow=False), rel

    def test_unknown_key_exit(self, tmp_path, capsys):
        assert main(["sweep", "--out", str(tmp_path / "x"), "--set", "filter.bogus=1"]) == 1
        assert "filter.bogus" in capsys.readouterr().err
        assert not (tmp_path / "x").exists()

    def test_config_file(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("snr_levels: [25.0]\nsim:\n  train_seconds: 0.3\n  test_seconds: 0.2\n")
        assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "s"), "--seed", "4"]) == 0
        header = (tmp_path / "s/datasets/snr_25/train.csv").read_text().splitlines()[0]
        assert header == "t,pin,pout,p1,p2,p4,p5,pin_noisy,pout_noisy,y1,y2,y5"
        meta = yaml.safe_load((tmp_path / "s/datasets/snr_25/train.yaml").read_text())
        assert meta["n_t"] == 30 and meta["snr_db"] == 25.0
        assert yaml.safe_load((tmp_path / "s/config.yaml").read_text())["master_seed"] == 4

    def test_missing_config_file(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "none.yaml"), "--out", str(tmp_path / "s")]) == 1

    def test_train_then_evaluate(self, tmp_path):
        out = tmp_path / "t"
        args = ["train", "--out", str(out)]
        for item in TINY:
            args += ["--set", item]
        assert main(args) == 0
        assert main(["evaluate", "--out", str(out)]) == 0
        runs = (out / "runs.csv").read_text().splitlines()[1:]
        evals = (out / "evaluation.csv").read_text().splitlines()[1:]
        by_key = lambda rows: {tuple(r.split(",")[:3]): r.split(",")[3:5] for r in rows}
        assert by_key(runs) == by_key(evals)

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_run_failure_exit(self, tmp_path):
        args = ["sweep", "--out", str(tmp_path / "f"), "--jobs", "1", "--set", "sim.dt=5.0"]
        args += ["--set", "sim.train_seconds=100", "--set", "sim.test_seconds=50"]
        args += ["--set", "methods=[ckf]", "--set", "n_runs=2", "--set", "snr_levels=[30]"]
        assert main(args) == 2
        assert (tmp_path / "f/failures.csv").read_text().count("\n") == 3


class TestPlots:
    def test_emits_svgs(self, swept, tmp_path):
        written = emit_plots(swept, tmp_path / "fig")
        names = sorted(p.name for p in written)
        assert names == [
            "bands_bptt_snr_22.56.svg",
            "bands_ckf_snr_22.56.svg",
            "example_bptt_snr_22.56.svg",
            "example_ckf_snr_22.56.svg",
            "learning_snr_22.56.svg",
        ]
        for p in written:
            assert p.read_text().lstrip().startswith("<?xml")

    def test_plots_deterministic(self, swept, tmp_path):
        a = emit_plots(swept, tmp_path / "a")
        b = emit_plots(swept, tmp_path / "b")
        for pa, pb in zip(a, b):
            assert pa.read_bytes() == pb.read_bytes()

    def test_band_half_width(self, swept):
        table = read_table(swept / "bands/ckf_snr_22.56.csv")
        for c in ("p1", "p2", "p4", "p5"):
            _, low, high = band_region(table, c)
            np.testing.assert_allclose((high - low) / 2, Z95 * table[f"{c}_sd"], rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(low, table[f"{c}_low"], rtol=1e-12)

    def test_noise_floor_definition(self, swept):
        info = yaml.safe_load((swept / "runs/ckf/snr_22.56/run_000/run.yaml").read_text())
        cfg = ExperimentConfig.load(overrides=TINY)
        from hybridckf.experiment import RunSeeds, make_datasets

        train, _ = make_datasets(cfg, 22.56, RunSeeds(**info["seeds"]))
        assert noise_floor(info) == pytest.approx(nrmse(train.y_noisy, train.y_clean), rel=1e-12)

    def test_empty_dir(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        with pytest.raises(MissingArtifact):
            emit_plots(empty)
        assert os.listdir(empty) == []
        assert main(["plot", "--out", str(empty)]) == 1
        assert os.listdir(empty) == []
