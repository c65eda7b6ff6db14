import csv
import json

import numpy as np
import pytest

from qe.calib import OutlierProfile, synth_calibration
from qe.cli import main
from qe.tensorfile import write_tensor

PROFILE = OutlierProfile(always_hot=2, always_gain=14.0, modality_hot=3,
                         modality_gain=14.0, token_hot=1, token_gain=5.0)


def make_model(tmp_path, n_layers=2, d=16, seed=9):
    model_dir = tmp_path / "model"
    model_dir.mkdir(exist_ok=True)
    entries = []
    for i in range(n_layers):
        rng = np.random.default_rng(seed + i)
        w = rng.normal(size=(d, d))
        write_tensor(model_dir / f"w{i}.qet", w)
        entries.append({"name": f"layer{i}", "weight": f"w{i}.qet"})
    (model_dir / "model.json").write_text(json.dumps({"layers": entries}))
    return model_dir / "model.json"


def make_calib(tmp_path, d=16, tokens=64, seed=3, name="calib.qet"):
    x, _ = synth_calibration(d, tokens, 2, seed=seed, profile=PROFILE)
    path = tmp_path / name
    write_tensor(path, x)
    return path


def quantize_args(model, calib, out, extra=()):
    return ["quantize", "--model", str(model), "--calib", str(calib),
            "--wbits", "4", "--abits", "8", "--k", "2", "--experts", "2",
            "--rank", "4", "--seed", "7", "--out", str(out), *extra]


class TestQuantize:
    def test_basic_run(self, tmp_path, capsys):
        model = make_model(tmp_path)
        calib = make_calib(tmp_path)
        assert main(quantize_args(model, calib, tmp_path / "pkg")) == 0
        out = capsys.readouterr().out
        assert "layer0" in out and "layer1" in out
        assert (tmp_path / "pkg" / "manifest.json").is_file()

    def test_byte_identical_across_runs(self, tmp_path):
        model = make_model(tmp_path)
        calib = make_calib(tmp_path)
        assert main(quantize_args(model, calib, tmp_path / "a")) == 0
        assert main(quantize_args(model, calib, tmp_path / "b")) == 0
        files_a = sorted(p.relative_to(tmp_path / "a")
                         for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b")
                         for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (tmp_path / "a" / rel).read_bytes() == \
                (tmp_path / "b" / rel).read_bytes()

    def test_jobs_env_override(self, tmp_path, monkeypatch):
        model = make_model(tmp_path)
        calib = make_calib(tmp_path)
        monkeypatch.setenv("QE_JOBS", "2")
        assert main(quantize_args(model, calib, tmp_path / "par")) == 0
        monkeypatch.setenv("QE_JOBS", "1")
        assert main(quantize_args(model, calib, tmp_path / "ser")) == 0
        for rel in ["manifest.json", "tensors/layer0/codes.qet"]:
            assert (tmp_path / "par" / rel).read_bytes() == \
                (tmp_path / "ser" / rel).read_bytes()

    def test_zero_weight_model(self, tmp_path):
        model_dir = tmp_path / "model"
        model_dir.mkdir()
        write_tensor(model_dir / "w.qet", np.zeros((16, 16)))
        (model_dir / "model.json").write_text(
            json.dumps({"layers": [{"name": "z", "weight": "w.qet"}]}))
        calib = make_calib(tmp_path)
        assert main(quantize_args(model_dir / "model.json", calib,
                                  tmp_path / "pkg")) == 0
        manifest = json.loads((tmp_path / "pkg" / "manifest.json").read_text())
        assert manifest["layers"][0]["name"] == "z"

    def test_truncation_warning(self, tmp_path, caplog):
        # (n_experts + 1) * k exceeds d_in: routed set must truncate.
        model = make_model(tmp_path, n_layers=1, d=16)
        calib = make_calib(tmp_path)
        args = ["quantize", "--model", str(model), "--calib", str(calib),
                "--k", "4", "--experts", "8", "--rank", "4",
                "--seed", "0", "--out", str(tmp_path / "pkg")]
        with caplog.at_level("WARNING"):
            assert main(args) == 0
        assert any("truncat" in rec.message for rec in caplog.records)

    def test_unreadable_model_exits_2(self, tmp_path, capsys):
        calib = make_calib(tmp_path)
        assert main(quantize_args(tmp_path / "missing.json", calib,
                                  tmp_path / "pkg")) == 2

    def test_malformed_tensor_exits_2_with_offset(self, tmp_path, capsys):
        model = make_model(tmp_path, n_layers=1)
        bad = tmp_path / "bad.qet"
        bad.write_bytes(b"XXXX\x00\x00\x00\x00")
        assert main(quantize_args(model, bad, tmp_path / "pkg")) == 2
        err = capsys.readouterr().err
        assert "offset" in err

    def test_synth_calibration_source(self, tmp_path):
        model = make_model(tmp_path, n_layers=1)
        args = quantize_args(model, "synth", tmp_path / "pkg",
                             extra=["--calib-tokens", "32"])
        assert main(args) == 0


class TestEval:
    @pytest.fixture()
    def package(self, tmp_path):
        model = make_model(tmp_path)
        calib = make_calib(tmp_path)
        assert main(quantize_args(model, calib, tmp_path / "pkg")) == 0
        return tmp_path / "pkg"

    def test_report_structure(self, tmp_path, package):
        holdout = make_calib(tmp_path, seed=11, name="holdout.qet")
        out = tmp_path / "report.json"
        args = ["eval", "--package", str(package), "--calib", str(holdout),
                "--variants", "fp,rtn,shared,qe,random,oracle",
                "--out", str(out)]
        assert main(args) == 0
        report = json.loads(out.read_text())
        assert len(report["layers"]) == 2
        layer = report["layers"][0]
        assert layer["variants"]["fp"]["mean_l2"] == 0.0
        assert set(layer["variants"]) == {"fp", "rtn", "shared_only", "qe",
                                          "qe_random_route", "qe_oracle_route"}
        hist = layer["routing"]["histogram"]
        assert sum(hist) == layer["tokens"]
        assert "config" in report

    def test_deterministic_reports(self, tmp_path, package):
        holdout = make_calib(tmp_path, seed=11, name="holdout.qet")
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        base = ["eval", "--package", str(package), "--calib", str(holdout)]
        assert main(base + ["--out", str(a)]) == 0
        assert main(base + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_monotone_variant_ordering(self, tmp_path, package):
        holdout = make_calib(tmp_path, seed=11, name="holdout.qet")
        out = tmp_path / "r.json"
        assert main(["eval", "--package", str(package), "--calib", str(holdout),
                     "--variants", "rtn,shared,qe", "--out", str(out)]) == 0
        agg = json.loads(out.read_text())["aggregate"]
        assert agg["qe"]["mean_l2"] <= agg["shared_only"]["mean_l2"]
        assert agg["shared_only"]["mean_l2"] <= agg["rtn"]["mean_l2"]

    def test_unknown_variant_exits_2(self, tmp_path, package):
        holdout = make_calib(tmp_path, seed=11, name="h.qet")
        assert main(["eval", "--package", str(package), "--calib", str(holdout),
                     "--variants", "qe,bogus"]) == 2

    def test_missing_package_exits_2(self, tmp_path):
        holdout = make_calib(tmp_path, seed=11, name="h.qet")
        assert main(["eval", "--package", str(tmp_path / "none"),
                     "--calib", str(holdout)]) == 2


class TestAnalyze:
    def test_csv_outputs(self, tmp_path):
        d = 16
        rng = np.random.default_rng(0)
        weights = tmp_path / "w.qet"
        write_tensor(weights, rng.normal(size=(d, d)))
        # Only an always-hot set of size k: its frequencies are exactly 1.
        x, _ = synth_calibration(d, 128, 2, seed=3,
                                 profile=OutlierProfile(always_hot=2,
                                                        always_gain=16.0))
        calib = tmp_path / "calib.qet"
        write_tensor(calib, x)
        out = tmp_path / "analysis"
        assert main(["analyze", "--calib", str(calib), "--weights", str(weights),
                     "--k", "2", "--out", str(out)]) == 0
        with open(tmp_path / "analysis.channels.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert rows[0].keys() == {"rank", "channel", "freq", "mean_abs_activation"}
        # Always-hot channels from the generator sit at frequency 1.
        assert float(rows[0]["freq"]) == 1.0
        assert float(rows[1]["freq"]) == 1.0
        freqs = [float(r["freq"]) for r in rows]
        assert freqs == sorted(freqs, reverse=True)
        with open(tmp_path / "analysis.overlap.csv") as fh:
            stats = {r["stat"]: float(r["value"]) for r in csv.DictReader(fh)}
        assert 0.0 <= stats["mean_jaccard"] <= 1.0
        assert stats["pairs"] == 128 * 127 / 2

    def test_single_token(self, tmp_path):
        d = 8
        rng = np.random.default_rng(1)
        weights = tmp_path / "w.qet"
        write_tensor(weights, rng.normal(size=(4, d)))
        x = rng.normal(size=(1, d))
        calib = tmp_path / "one.qet"
        write_tensor(calib, x)
        out = tmp_path / "single"
        assert main(["analyze", "--calib", str(calib), "--weights", str(weights),
                     "--k", "3", "--out", str(out)]) == 0
        with open(tmp_path / "single.channels.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3
        assert all(float(r["freq"]) == 1.0 for r in rows)


class TestCost:
    def test_default_table_contains_reference_shapes(self, tmp_path):
        out = tmp_path / "cost.csv"
        assert main(["cost", "--out", str(out)]) == 0
        with open(out) as fh:
            rows = {r["name"]: r for r in csv.DictReader(fh)}
        assert set(rows) == {"3584x3584", "3584x18944", "18944x3584"}
        square = rows["3584x3584"]
        assert int(square["origin_flops"]) == 1_644_167_168
        assert int(square["qe_flops"]) == 1_644_167_168 + 62_390_272
        assert int(square["qe_params_paper"]) == 14_909_440
        assert rows["3584x18944"]["qe_params_paper"] == ""

    def test_empty_shape_list(self, tmp_path):
        shapes = tmp_path / "shapes.json"
        shapes.write_text("[]")
        out = tmp_path / "cost.csv"
        assert main(["cost", "--shapes", str(shapes), "--out", str(out)]) == 0
        with open(out) as fh:
            assert list(csv.DictReader(fh)) == []

    def test_custom_shapes_json_format(self, tmp_path):
        shapes = tmp_path / "shapes.json"
        shapes.write_text(json.dumps(
            [{"s": 1, "d_in": 64, "d_out": 64, "r": 64, "n_experts": 8}]))
        out = tmp_path / "cost.json"
        assert main(["cost", "--shapes", str(shapes), "--format", "json",
                     "--out", str(out)]) == 0
        row = json.loads(out.read_text())[0]
        assert row["qe_params_detailed"] == 41_472

    def test_bad_shapes_file_exits_2(self, tmp_path):
        shapes = tmp_path / "shapes.json"
        shapes.write_text("{oops")
        assert main(["cost", "--shapes", str(shapes)]) == 2
