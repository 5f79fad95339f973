import json
from pathlib import Path

import pandas as pd
import pytest

from dsadlc import __version__
from dsadlc.cli import main
from dsadlc.config import RunConfig, dump_config, load_config, parse_config
from dsadlc.errors import ConfigError
from dsadlc.labeling import CaseSet

SMALL = """\
seed = 2
epochs = 1
stride_s = 4.0
ablations = ["no-ds"]

[synth]
recordings = 1
seed = 5
duration = 150
"""


def test_defaults_validate():
    cfg = RunConfig()
    assert cfg.train_fraction == 0.9 and cfg.dup_factor == 16 and cfg.t_react == 1.0 and cfg.t_h == 1.5
    assert cfg.ablations == ("full", "no-ego", "no-surround", "no-ds")
    assert not cfg.safety_mask


def test_unknown_key_names_key_and_line():
    with pytest.raises(ConfigError, match=r"<config>:2: unknown key 't_hh'"):
        parse_config("seed = 1\nt_hh = 1.5\n")
    with pytest.raises(ConfigError, match=r":3: unknown key 'synth.speed'"):
        parse_config("seed = 1\n[synth]\nspeed = 3\n")
    with pytest.raises(ConfigError, match="t_hh"):
        parse_config('{"seed": 1, "t_hh": 2}')


@pytest.mark.parametrize("text", ["train_fraction = 1.2", "train_fraction = 0", "epochs = 0", "t_react = -1",
                                  "dup_factor = 1.5", 'ablations = ["half"]', "seed = ", "[synth]\nrecordings = 0"])
def test_bad_values_are_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_json_and_toml_agree():
    toml_cfg = parse_config(SMALL)
    json_cfg = parse_config(dump_config(toml_cfg))
    assert json_cfg == toml_cfg
    assert toml_cfg.synth.scenarios()[0].rng_seed == 5


def test_validate_command(tmp_path, capsys):
    good = tmp_path / "run.toml"
    good.write_text(SMALL)
    assert main(["validate", "--config", str(good)]) == 0
    assert capsys.readouterr().out.strip() == "OK"
    bad = tmp_path / "bad.toml"
    bad.write_text("t_hh = 1.5\n")
    assert main(["validate", "--config", str(bad)]) == 2
    assert "t_hh" in capsys.readouterr().err
    bad.write_text("train_fraction = 1.2\n")
    assert main(["validate", "--config", str(bad)]) == 2
    assert "train_fraction" in capsys.readouterr().err
    assert main(["validate", "--config", str(tmp_path / "nope.toml")]) == 2


def test_version_command(capsys):
    assert main(["version"]) == 0
    out = capsys.readouterr().out
    assert __version__ in out and "case file format" in out and "weight file format" in out


def test_usage_errors(tmp_path, capsys):
    assert main(["experiment", "--cases", str(tmp_path / "missing.bin")]) == 2
    assert "error [experiment]" in capsys.readouterr().err
    assert main(["experiment"]) == 2
    assert main(["bogus"]) == 2
    assert main(["predict", "--model", "m.w", "--cases", "c.bin", "--mask", "maybe"]) == 2


def test_runtime_errors_exit_one(tmp_path, capsys):
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"not a case file")
    assert main(["train", "--cases", str(junk), "--out", str(tmp_path / "m.w")]) == 1
    assert "error [train]" in capsys.readouterr().err


def test_pipeline_end_to_end(tmp_path, capsys):
    cfg = tmp_path / "run.toml"
    cfg.write_text(SMALL)
    data = tmp_path / "data"
    assert main(["synth", "--config", str(cfg), "--out", str(data), "--seed", "5"]) == 0
    assert (data / "01_tracks.csv").exists() and (data / "01_groundTruthLaneChanges.csv").exists()
    assert main(["ingest", "--dataset-root", str(data)]) == 0
    cases = tmp_path / "cases.bin"
    assert main(["extract", "--dataset-root", str(data), "--out", str(cases), "--stride", "4"]) == 0
    loaded = CaseSet.read(cases)
    assert loaded.meta["stride_s"] == 4.0 and len(loaded) > 0
    model, test = tmp_path / "m.w", tmp_path / "test.bin"
    assert main(["train", "--cases", str(cases), "--ablation", "no-ds", "--epochs", "1",
                 "--test-out", str(test), "--out", str(model)]) == 0
    preds = tmp_path / "preds.csv"
    assert main(["predict", "--model", str(model), "--cases", str(test), "--mask", "on", "--out", str(preds)]) == 0
    df = pd.read_csv(preds)
    assert len(df) == len(CaseSet.read(test))
    assert ((df.p_keep + df.p_left + df.p_right - 1).abs() < 1e-9).all()
    report = tmp_path / "report"
    assert main(["eval", "--model", str(model), "--cases", str(test), "--recordings", str(data),
                 "--report", str(report)]) == 0
    assert (report / "accuracy.txt").exists() and (report / "impact" / "impact.txt").exists()
    assert "NoDS" in capsys.readouterr().out


def test_single_ablation_experiment(tmp_path, capsys):
    cfg = tmp_path / "run.toml"
    cfg.write_text(SMALL)
    out = tmp_path / "out"
    assert main(["experiment", "--config", str(cfg), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "NoDS" in text and "Full" not in text
    summary = json.loads((out / "report.json").read_text())
    assert list(summary["accuracy_pct"]) == ["NoDS"]
    assert summary["config"]["seed"] == 2
    assert (out / "ablation.txt").read_text().startswith("# resolved configuration")
    assert (out / "model_no-ds.w").exists() and (out / "cases.bin").exists()
    # rerunning from the cached case file gives the same models
    assert main(["experiment", "--config", str(cfg), "--out", str(out), "--cases", str(out / "cases.bin")]) == 0
    again = json.loads((out / "report.json").read_text())
    assert again["accuracy_pct"] == summary["accuracy_pct"]
    assert again["weights_sha256"] == summary["weights_sha256"]


def test_shipped_config_is_valid():
    cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "desk.toml")
    assert cfg.synth.recordings == 3 and cfg.stride_s == 12.0 and len(cfg.ablations) == 4
