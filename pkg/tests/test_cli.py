import json

import numpy as np
import pytest

from dclimba import cli
from dclimba.gridio import read_grd


def run_cli(*argv):
    return cli.run(list(argv))


@pytest.fixture(scope="module")
def world_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("world")
    code = run_cli("synth", "--out", str(d), "--grid", "4x4", "--years", "3",
                   "--seed", "21", "--bias-a", "1.3", "--bias-p", "1.1",
                   "--drizzle-prob", "0.3")
    assert code == 0
    return d


@pytest.fixture(scope="module")
def trained(world_dir, tmp_path_factory):
    d = tmp_path_factory.mktemp("train")
    ckpt = d / "model.dckp"
    code = run_cli("train", "--ref", str(world_dir / "ref.grd"),
                   "--gcm", str(world_dir / "gcm.grd"),
                   "--attrs", str(world_dir / "attrs"),
                   "--out", str(ckpt), "--epochs", "2",
                   "--train-window", "0:730", "--val-window", "730:1095",
                   "--seed", "5", "--loss-log", str(d / "loss.csv"))
    assert code == 0
    return ckpt


class TestSynth:
    def test_outputs_exist(self, world_dir):
        for name in ("ref.grd", "gcm.grd"):
            assert (world_dir / name).exists()
        for attr in ("elevation", "slope", "aspect", "landcover"):
            assert (world_dir / "attrs" / f"{attr}.grd").exists()

    def test_byte_identical_reruns(self, world_dir, tmp_path):
        again = tmp_path / "again"
        assert run_cli("synth", "--out", str(again), "--grid", "4x4", "--years",
                       "3", "--seed", "21", "--bias-a", "1.3", "--bias-p", "1.1",
                       "--drizzle-prob", "0.3") == 0
        for name in ("ref.grd", "gcm.grd"):
            assert (again / name).read_bytes() == (world_dir / name).read_bytes()


class TestPipeline:
    def test_train_correct_evaluate_report(self, world_dir, trained, tmp_path):
        corrected = tmp_path / "corrected.grd"
        assert run_cli("correct", "--ckpt", str(trained),
                       "--gcm", str(world_dir / "gcm.grd"),
                       "--attrs", str(world_dir / "attrs"),
                       "--out", str(corrected), "--window", "730:1095") == 0
        fld = read_grd(corrected)
        assert np.isfinite(fld.values).all()
        assert (fld.values >= 0).all()

        report = tmp_path / "report.json"
        assert run_cli("evaluate", "--ref", str(world_dir / "ref.grd"),
                       "--sim", str(world_dir / "gcm.grd"),
                       "--window", "730:1095", "--base-window", "0:730",
                       "--out", str(report)) == 0
        rep = json.loads(report.read_text())
        assert set(rep["indices"]) == {"r10mm", "r20mm", "rx1day", "rx5day",
                                       "sdii", "cdd", "cwd", "r95ptot", "r99ptot"}
        assert rep["composite_mean_abs_pct_bias"] is not None
        assert len(rep["quantile_curves"]) > 0

        txt = tmp_path / "report.txt"
        assert run_cli("report", "--in", str(report), "--format", "text",
                       "--out", str(txt)) == 0
        assert "composite score" in txt.read_text()
        csvp = tmp_path / "report.csv"
        assert run_cli("report", "--in", str(report), "--format", "csv",
                       "--out", str(csvp)) == 0
        assert csvp.read_text().startswith("table,key,value")

    def test_correct_is_deterministic(self, world_dir, trained, tmp_path):
        outs = []
        for name in ("a.grd", "b.grd"):
            p = tmp_path / name
            assert run_cli("correct", "--ckpt", str(trained),
                           "--gcm", str(world_dir / "gcm.grd"),
                           "--attrs", str(world_dir / "attrs"),
                           "--out", str(p), "--window", "730:900") == 0
            outs.append(p.read_bytes())
        assert outs[0] == outs[1]

    def test_baseline_command(self, world_dir, tmp_path):
        out = tmp_path / "qm.grd"
        assert run_cli("baseline", "--method", "qm", "--ref",
                       str(world_dir / "ref.grd"), "--gcm-hist",
                       str(world_dir / "gcm.grd"), "--gcm-apply",
                       str(world_dir / "gcm.grd"), "--fit-window", "0:730",
                       "--out", str(out)) == 0
        fld = read_grd(out)
        assert (fld.values[np.isfinite(fld.values)] >= 0).all()

    def test_evaluate_fd_and_trend(self, world_dir, tmp_path):
        report = tmp_path / "full.json"
        code = run_cli("evaluate", "--ref", str(world_dir / "ref.grd"),
                       "--sim", str(world_dir / "gcm.grd"),
                       "--window", "0:730", "--fd", "--trend",
                       "--raw-hist", str(world_dir / "gcm.grd"),
                       "--raw-future", str(world_dir / "gcm.grd"),
                       "--deb-hist", str(world_dir / "ref.grd"),
                       "--deb-future", str(world_dir / "ref.grd"),
                       "--out", str(report))
        assert code == 0
        rep = json.loads(report.read_text())
        assert "fd" in rep and len(rep["fd"]["levels"]) == 99
        stats = {row["statistic"] for row in rep["trend_bias"]}
        assert stats == {"mean", "q95", "wet_days", "very_wet_days"}

    def test_trend_without_files_usage_error(self, world_dir, tmp_path):
        assert run_cli("evaluate", "--ref", str(world_dir / "ref.grd"),
                       "--sim", str(world_dir / "gcm.grd"),
                       "--window", "0:730", "--trend",
                       "--out", str(tmp_path / "r.json")) == 1


class TestExitCodes:
    def test_overlapping_windows_usage_error(self, world_dir, tmp_path):
        code = run_cli("train", "--ref", str(world_dir / "ref.grd"),
                       "--gcm", str(world_dir / "gcm.grd"),
                       "--attrs", str(world_dir / "attrs"),
                       "--out", str(tmp_path / "x.dckp"), "--epochs", "1",
                       "--train-window", "0:730", "--val-window", "500:1000")
        assert code == 1

    def test_unknown_flag_usage_error(self):
        assert run_cli("synth", "--out", "/tmp/x", "--frobnicate") == 1

    def test_bad_window_usage_error(self, world_dir, tmp_path):
        assert run_cli("train", "--ref", str(world_dir / "ref.grd"),
                       "--gcm", str(world_dir / "gcm.grd"),
                       "--attrs", str(world_dir / "attrs"),
                       "--out", str(tmp_path / "x.dckp"),
                       "--train-window", "10", "--val-window", "0:10") == 1

    def test_mismatched_grids_data_error(self, world_dir, tmp_path):
        other = tmp_path / "small"
        assert run_cli("synth", "--out", str(other), "--grid", "2x2",
                       "--years", "1", "--seed", "0") == 0
        code = run_cli("evaluate", "--ref", str(world_dir / "ref.grd"),
                       "--sim", str(other / "ref.grd"),
                       "--out", str(tmp_path / "r.json"))
        assert code == 2

    def test_missing_file_data_error(self, tmp_path):
        assert run_cli("correct", "--ckpt", str(tmp_path / "none.dckp"),
                       "--gcm", str(tmp_path / "none.grd"),
                       "--attrs", str(tmp_path), "--out",
                       str(tmp_path / "o.grd")) == 2
