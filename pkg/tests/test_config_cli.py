import json

import pytest

from brainshift import nifti
from brainshift.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from brainshift.config import ConfigError, PipelineConfig, parse_config, weights_from_json
from brainshift.synthesis import LossWeights


def test_dump_parse_round_trip():
    cfg = PipelineConfig()
    assert parse_config(cfg.to_json()) == cfg


def test_partial_config_and_shared_metrics():
    cfg = parse_config('{"metrics": {"n_bins": 32}, "synth": {"lr": 0.1, "weights": {"skull": 2}}}')
    assert cfg.synth.lr == 0.1
    assert cfg.synth.weights.skull == 2.0
    assert cfg.align.metrics.n_bins == 32 and cfg.synth.metrics.n_bins == 32
    assert cfg.align == PipelineConfig().align.__class__(metrics=cfg.metrics)


@pytest.mark.parametrize("text", [
    '{"sytnh": {}}',
    '{"synth": {"learning_rate": 0.1}}',
    '{"synth": {"weights": {"skul": 1}}}',
    '{"synth": {"iterations": "many"}}',
    '{"synth": {"iterations": 1.5}}',
    '{"align": {"free": ["tx", "bogus"]}}',
    '{"metrics": {"range": [1, 2, 3]}}',
    '{"synth": {"weights": {"jeffrey": 0, "ssim": 0, "ventricle": 0, "hematoma": 0, "skull": 0, '
    '"jacobian": 0, "gradient": 0}}}',
    '{"classify": {"k": 1}}',
    'not json',
    '[]',
])
def test_bad_configs_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_weights_from_json():
    assert weights_from_json('{"skull": 1.0}') == LossWeights(skull=1.0)
    full = PipelineConfig().to_json()
    assert weights_from_json(full) == LossWeights()
    with pytest.raises(ConfigError):
        weights_from_json('{"bone": 1.0}')


def test_exit_codes(tmp_path, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["classify"]) == EXIT_USAGE
    assert main(["classify", "--in", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == EXIT_USAGE
    (tmp_path / "bad.json").write_text('{"nope": 1}')
    assert main(["classify", "--config", str(tmp_path / "bad.json"), "--in", "x", "--out", "y"]) == EXIT_USAGE
    (tmp_path / "junk.nii").write_bytes(b"\x00" * 100)
    assert main(["align", "--in", str(tmp_path / "junk.nii"), "--out", str(tmp_path / "o.nii")]) == EXIT_DATA
    (tmp_path / "bad.csv").write_text("id\nx\n")
    assert main(["classify", "--in", str(tmp_path / "bad.csv"), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_threads_env(monkeypatch):
    monkeypatch.setenv("BRAINSHIFT_THREADS", "zero")
    assert main(["--dump-config"]) == EXIT_USAGE


def test_dump_config(capsys):
    assert main(["--dump-config"]) == EXIT_OK
    assert parse_config(capsys.readouterr().out) == PipelineConfig()
    assert main(["classify", "--seed", "9", "--dump-config"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["classify"]["seed"] == 9


def test_phantom_biomarkers_pipeline(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"grid": [32, 32, 32], "side": "left", "thickness": 4.0}))
    out = tmp_path / "case"
    assert main(["phantom", "--spec", str(spec), "--out", str(out)]) == EXIT_OK
    for name in ("volume.nii", "labels.nii", "gt_field.nii", "case.json"):
        assert (out / name).is_file()
    assert nifti.read_nifti(out / "volume.nii").dims == (32, 32, 32)
    rec = tmp_path / "rec.csv"
    assert main(["biomarkers", "--in", str(out / "gt_field.nii"), "--masks", str(out / "labels.nii"),
                 "--out", str(rec), "--id", "c1", "--surgery", "1"]) == EXIT_OK
    row = rec.read_text().splitlines()[1].split(",")
    assert row[0] == "c1" and float(row[4]) > 0
    (tmp_path / "spec_bad.json").write_text('{"grid": [32, 32, 32], "colour": 1}')
    assert main(["phantom", "--spec", str(tmp_path / "spec_bad.json"), "--out", str(out)]) == EXIT_USAGE


def test_align_and_synth_commands(tmp_path):
    out = tmp_path / "case"
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"grid": [32, 32, 32], "side": "right", "thickness": 4.0}))
    assert main(["phantom", "--spec", str(spec), "--out", str(out)]) == EXIT_OK
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"align": {"iterations": 3}, "synth": {"iterations": 3}}))
    assert main(["align", "--config", str(cfg), "--in", str(out / "volume.nii"), "--out", str(tmp_path / "al.nii"),
                 "--masks", str(out / "labels.nii"), "--out-masks", str(tmp_path / "al_labels.nii")]) == EXIT_OK
    report = json.loads((tmp_path / "al.nii.json").read_text())
    assert set(report["transform"]) == {"pitch", "yaw", "roll", "tx", "ty", "tz"}
    assert main(["synth", "--config", str(cfg), "--in", str(out / "volume.nii"), "--masks", str(out / "labels.nii"),
                 "--out-field", str(tmp_path / "f.nii"), "--out-image", str(tmp_path / "p.nii"),
                 "--report", str(tmp_path / "trace.csv")]) == EXIT_OK
    assert len((tmp_path / "trace.csv").read_text().splitlines()) == 4
    assert nifti.read_field(tmp_path / "f.nii").dims == (32, 32, 32)
    assert main(["synth", "--in", str(out / "volume.nii"), "--masks", str(out / "labels.nii")]) == EXIT_USAGE


def test_cohort_report_byte_identical(tmp_path):
    for run in ("a", "b"):
        d = tmp_path / run
        assert main(["phantom", "--cohort", "12", "--seed", "5", "--out", str(d)]) == EXIT_OK
        assert main(["report", "--in", str(d / "cohort.csv"), "--out", str(d / "rep"), "--seed", "2"]) == EXIT_OK
    a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert a and any(p.suffix == ".svg" for p in a)
    for rel in a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
