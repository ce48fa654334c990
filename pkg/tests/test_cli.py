import json
import os

import numpy as np
import pytest

from aqrobust import cli


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def cohort(workdir):
    out = workdir / "cohort"
    rc = cli.main(["synth", "--out", str(out), "--d", "6", "--n", "600",
                   "--seed", "1", "--difficulty", "0.2"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def trained(workdir, cohort):
    out = workdir / "model"
    rc = cli.main(["train", "--data", str(cohort), "--out", str(out),
                   "--episodes", "800", "--max-questions", "4",
                   "--val-every", "200", "--seed", "0"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def swept(workdir, cohort, trained):
    out = workdir / "sweep"
    rc = cli.main(["sweep", "--model", str(trained / "bundle.npz"),
                   "--data", str(cohort), "--out", str(out),
                   "--methods", "fgsm,bim", "--epsilons", "0,0.5,1.0,2.0",
                   "--n-samples", "25", "--max-questions", "4", "--seed", "0"])
    assert rc == 0
    return out


class TestSynth:
    def test_outputs(self, cohort):
        for name in ("data.csv", "schema.txt", "catalog.txt", "dataset.npz",
                     "synth_config.json"):
            assert (cohort / name).exists()

    def test_refuses_nonempty_out(self, cohort):
        rc = cli.main(["synth", "--out", str(cohort), "--d", "6", "--n",
                       "600"])
        assert rc == cli.EXIT_CONFIG

    def test_force_overwrites(self, workdir):
        out = workdir / "cohort2"
        assert cli.main(["synth", "--out", str(out), "--d", "4",
                         "--n", "100"]) == 0
        assert cli.main(["synth", "--out", str(out), "--d", "4", "--n", "100",
                         "--force"]) == 0

    def test_bad_dims(self, workdir):
        rc = cli.main(["synth", "--out", str(workdir / "x"), "--d", "1",
                       "--n", "600"])
        assert rc == cli.EXIT_CONFIG


class TestTrain:
    def test_outputs(self, trained):
        for name in ("bundle.npz", "history.csv", "train_report.json",
                     "train_config.json"):
            assert (trained / name).exists()
        report = json.loads((trained / "train_report.json").read_text())
        assert 0.0 <= report["best_val_auc"] <= 1.0
        assert report["seed"] == 0

    def test_missing_data_dir(self, workdir):
        rc = cli.main(["train", "--data", str(workdir / "nope"), "--out",
                       str(workdir / "m2"), "--episodes", "10"])
        assert rc == cli.EXIT_DATA


class TestSweep:
    def test_outputs(self, swept):
        for name in ("grid.csv", "timing.csv", "heatmap.csv", "records.csv",
                     "report.json", "sweep_config.json"):
            assert (swept / name).exists()

    def test_epsilon_zero_row_has_zero_rate(self, swept):
        import csv
        rows = list(csv.DictReader(open(swept / "grid.csv")))
        assert len(rows) == 8
        zero = [r for r in rows if float(r["epsilon"]) == 0.0]
        assert zero and all(float(r["success_rate"]) == 0.0 for r in zero)

    def test_unknown_method(self, workdir, cohort, trained):
        rc = cli.main(["sweep", "--model", str(trained / "bundle.npz"),
                       "--data", str(cohort), "--out", str(workdir / "s2"),
                       "--methods", "fgsm,warp", "--epsilons", "0.5"])
        assert rc == cli.EXIT_CONFIG

    def test_bad_epsilons(self, workdir, cohort, trained):
        rc = cli.main(["sweep", "--model", str(trained / "bundle.npz"),
                       "--data", str(cohort), "--out", str(workdir / "s3"),
                       "--epsilons", "0.5,potato"])
        assert rc == cli.EXIT_CONFIG

    def test_missing_model(self, workdir, cohort):
        rc = cli.main(["sweep", "--model", str(workdir / "no.npz"),
                       "--data", str(cohort), "--out", str(workdir / "s4")])
        assert rc == cli.EXIT_DATA


class TestStats:
    def test_report_with_checksum(self, workdir, swept):
        out = workdir / "stats.txt"
        rc = cli.main(["stats", "--grid", str(swept / "grid.csv"),
                       "--out", str(out)])
        assert rc == 0
        text = out.read_text()
        assert "SHA-256: " in text
        assert "ANOVA" in text
        assert "Tukey HSD" in text

    def test_missing_grid(self, workdir):
        assert cli.main(["stats", "--grid", str(workdir / "no.csv")]) \
            == cli.EXIT_DATA

    def test_too_few_groups(self, workdir, swept, tmp_path):
        import csv
        rows = [r for r in csv.DictReader(open(swept / "grid.csv"))
                if r["method"] == "fgsm"]
        p = tmp_path / "one.csv"
        with open(p, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=rows[0].keys())
            w.writeheader()
            w.writerows(rows)
        assert cli.main(["stats", "--grid", str(p)]) == cli.EXIT_DATA

    def test_stdout_mode(self, swept, capsys):
        rc = cli.main(["stats", "--grid", str(swept / "grid.csv")])
        assert rc == 0
        assert "Bonferroni" in capsys.readouterr().out


class TestValidate:
    def test_clean_cohort_passes(self, cohort):
        rc = cli.main(["validate", "--data", str(cohort / "data.csv"),
                       "--schema", str(cohort / "schema.txt"),
                       "--catalog", str(cohort / "catalog.txt")])
        assert rc == 0

    def test_violations_found(self, cohort, tmp_path, capsys):
        lines = (cohort / "data.csv").read_text().splitlines()
        header = lines[0].split(",")
        # blow up a bounded continuous column on one row
        target = next(i for i, h in enumerate(header) if h == "g0")
        row = lines[1].split(",")
        row[target] = "950"
        bad = tmp_path / "bad.csv"
        bad.write_text("\n".join([lines[0], ",".join(row)] + lines[2:]) + "\n")
        out = tmp_path / "report.json"
        rc = cli.main(["validate", "--data", str(bad),
                       "--schema", str(cohort / "schema.txt"),
                       "--catalog", str(cohort / "catalog.txt"),
                       "--out", str(out)])
        assert rc == cli.EXIT_DATA
        blob = json.loads(out.read_text())
        assert blob["invalid_rows"] == 1


class TestConfigFile:
    def test_unknown_key_rejected(self, tmp_path, workdir):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"d": 4, "n": 100, "bogus": 1}))
        rc = cli.main(["synth", "--config", str(cfg),
                       "--out", str(workdir / "c1")])
        assert rc == cli.EXIT_CONFIG

    def test_config_supplies_values(self, tmp_path, workdir):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"d": 4, "n": 120, "seed": 9}))
        out = workdir / "c2"
        rc = cli.main(["synth", "--config", str(cfg), "--out", str(out)])
        assert rc == 0
        echo = json.loads((out / "synth_config.json").read_text())
        assert echo["d"] == 4 and echo["n"] == 120 and echo["seed"] == 9

    def test_flags_override_config(self, tmp_path, workdir):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"d": 4, "n": 120, "seed": 9}))
        out = workdir / "c3"
        rc = cli.main(["synth", "--config", str(cfg), "--out", str(out),
                       "--seed", "3"])
        assert rc == 0
        echo = json.loads((out / "synth_config.json").read_text())
        assert echo["seed"] == 3

    def test_config_dir_env(self, tmp_path, workdir, monkeypatch):
        cfg_dir = tmp_path / "configs"
        cfg_dir.mkdir()
        (cfg_dir / "synth.json").write_text(json.dumps({"d": 4, "n": 110}))
        monkeypatch.setenv(cli.CONFIG_DIR_ENV, str(cfg_dir))
        out = workdir / "c4"
        rc = cli.main(["synth", "--config", "synth.json", "--out", str(out)])
        assert rc == 0

    def test_invalid_json(self, tmp_path, workdir):
        cfg = tmp_path / "broken.json"
        cfg.write_text("{nope")
        rc = cli.main(["synth", "--config", str(cfg),
                       "--out", str(workdir / "c5")])
        assert rc == cli.EXIT_CONFIG

    def test_missing_config(self, workdir):
        rc = cli.main(["synth", "--config", "/does/not/exist.json",
                       "--out", str(workdir / "c6")])
        assert rc == cli.EXIT_CONFIG


class TestTopLevel:
    def test_bad_threads(self):
        assert cli.main(["--threads", "0", "stats", "--grid", "x"]) \
            == cli.EXIT_CONFIG

    def test_threads_sets_env(self, workdir):
        out = workdir / "t1"
        rc = cli.main(["--threads", "2", "synth", "--out", str(out),
                       "--d", "4", "--n", "100"])
        assert rc == 0
        assert os.environ["OMP_NUM_THREADS"] == "2"

    def test_unknown_subcommand(self):
        assert cli.main(["frobnicate"]) == cli.EXIT_CONFIG

    def test_seed_echoed_in_outputs(self, swept):
        blob = json.loads((swept / "report.json").read_text())
        assert blob["config"]["seed"] == 0
