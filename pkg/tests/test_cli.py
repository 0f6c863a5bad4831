"""Command-line surface: exit codes, outputs, and full-run determinism."""

import json
from pathlib import Path

import pytest

from liverseg.cli import main

TINY_CFG = {
    "data_dir": "data", "checkpoint_dir": "ckpt", "output_dir": "out",
    "phantom": {"train_volumes": 2, "val_volumes": 1, "shape": [16, 64, 64]},
    "train": {"epochs": 1, "stage2_epochs": 0, "batch_size": 4,
              "crop_size": 48, "slice_budget": 4, "seed": 0},
    "scales": {"base": 64, "scales": [64, 72]},
}


def _write_cfg(root, doc=TINY_CFG):
    p = Path(root) / "cfg.json"
    p.write_text(json.dumps(doc))
    return str(p)


def _run_chain(root, commands):
    cfg = _write_cfg(root)
    for cmd in commands:
        rc = main(cmd + ["--config", cfg])
        assert rc == 0, f"{cmd} exited {rc}"


# -- full chain --------------------------------------------------------------

def test_full_chain_and_outputs(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    _run_chain(tmp_path, [
        ["phantom"], ["preprocess"], ["train"],
        ["predict", "--single-scale"], ["evaluate"],
        ["overlay", "--volume", "vol000"],
    ])
    out = capsys.readouterr().out
    assert "wrote 2 train and 1 val volumes" in out
    assert "balanced training slices" in out
    assert "Liver Dice" in out and "mean" in out
    assert (tmp_path / "out" / "preprocess.json").exists()
    assert (tmp_path / "out" / "masks" / "vol000.ct").exists()
    assert (tmp_path / "out" / "report.json").exists()
    assert len(list((tmp_path / "out" / "overlays").glob("*.png"))) == 16


def test_two_runs_bit_identical(tmp_path, monkeypatch):
    digests = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        monkeypatch.chdir(d)
        _run_chain(d, [["phantom"], ["train"], ["predict", "--single-scale"],
                       ["evaluate"]])
        digests.append({
            "ckpt": (d / "ckpt" / "stage1_liver.net").read_bytes(),
            "mask": (d / "out" / "masks" / "vol000.ct").read_bytes(),
            "report": (d / "out" / "report.json").read_bytes(),
        })
    assert digests[0] == digests[1]


def test_seed_flag_changes_data(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = _write_cfg(tmp_path)
    vols = []
    for seed, dest in (("0", "data"), ("7", "data7")):
        assert main(["phantom", "--config", cfg, "--seed", seed]) == 0
        if dest != "data":
            (tmp_path / "data").rename(tmp_path / dest)
        vols.append((tmp_path / dest / "train" / "vol000.ct").read_bytes())
    assert vols[0] != vols[1]


# -- verification commands ---------------------------------------------------

def test_gradcheck_reports_and_passes(capsys):
    assert main(["gradcheck", "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    assert "max relative error" in out
    assert "FAIL" not in out
    assert out.count("ok ") >= 10


def test_gradcheck_rejects_bad_seeds(capsys):
    assert main(["gradcheck", "--seeds", "one,two"]) == 2
    assert "bad --seeds" in capsys.readouterr().err


def test_shapecheck_full_scale_column(capsys):
    assert main(["shapecheck", "--full-scale"]) == 0
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if l.startswith("row")]
    assert len(lines) == 13
    assert lines[0] == "row01  504x504  channels 64"
    assert lines[-1] == "row13  63x63  channels 2"
    assert "parameters: 123970498" in out


def test_shapecheck_desk_default(capsys):
    assert main(["shapecheck"]) == 0
    out = capsys.readouterr().out
    assert "input 64x64" in out
    assert "row13  8x8  channels 2" in out


def test_shapecheck_width_multiplier_thins(capsys):
    assert main(["shapecheck", "--width-multiplier", "0.125"]) == 0
    first = capsys.readouterr().out
    assert main(["shapecheck"]) == 0
    second = capsys.readouterr().out
    n = lambda s: int(s.rsplit("parameters: ", 1)[1].split()[0])
    assert n(first) > n(second)


def test_shapecheck_arch_file(tmp_path, capsys):
    from liverseg.network import desk_spec
    p = tmp_path / "arch.json"
    p.write_text(json.dumps(desk_spec(0.5).to_json_dict()))
    assert main(["shapecheck", "--arch", str(p)]) == 0
    assert "width multiplier 0.5" in capsys.readouterr().out
    assert main(["shapecheck", "--arch", str(p), "--full-scale"]) == 2


# -- failure modes -----------------------------------------------------------

def test_unknown_command_is_usage_error(capsys):
    with pytest.raises(SystemExit) as e:
        main(["segment-everything"])
    assert e.value.code == 2


def test_conflicting_scale_flags(capsys):
    with pytest.raises(SystemExit) as e:
        main(["predict", "--multiscale", "--single-scale"])
    assert e.value.code == 2


def test_bad_config_is_diagnosed(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"train": {"epochs": -3}}))
    assert main(["train", "--config", str(p)]) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_predict_without_data(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(["predict", "--config", _write_cfg(tmp_path)]) == 1
    assert "error:" in capsys.readouterr().err


def test_evaluate_before_predict(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    cfg = _write_cfg(tmp_path)
    assert main(["phantom", "--config", cfg]) == 0
    assert main(["evaluate", "--config", cfg]) == 1
    assert "run predict first" in capsys.readouterr().err


def test_overlay_missing_volume(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    cfg = _write_cfg(tmp_path)
    assert main(["phantom", "--config", cfg]) == 0
    assert main(["overlay", "--config", cfg, "--volume", "vol999"]) == 1
    assert "error:" in capsys.readouterr().err


def test_help_documents_override_flags(capsys):
    for cmd, flags in (("train", ("--seed", "--epochs", "--width-multiplier")),
                       ("predict", ("--single-scale", "--multiscale"))):
        with pytest.raises(SystemExit) as e:
            main([cmd, "--help"])
        assert e.value.code == 0
        text = capsys.readouterr().out
        for f in flags:
            assert f in text
