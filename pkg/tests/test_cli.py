import csv
import io
import json

import numpy as np
import pytest

from caaegv import config as cfgmod
from caaegv.cli import main
from caaegv.dataset import SyntheticFaceParams, render_synthetic_face, save_png
from caaegv.exceptions import BadConfig, NonFiniteLoss

TINY = {
    "epochs": 1, "image_size": 16, "n_z": 8, "batch_size": 16,
    "arch": {"enc_channels": [4, 8], "gen_channels": [8, 4], "dz_hidden": [8], "dimg_channels": [4, 8],
             "fm_channels": [4, 8]},
    "dataset": {"synthetic": {"count": 100, "seed": 1, "identities": 20}},
    "evaluation": {"classifier_epochs": 1, "embedder_epochs": 1},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["prepare", "--config", str(cfg), "--out", str(root / "data")]) == 0
    young = '{"synthetic": {"count": 10, "seed": 9, "age_range": [0, 5]}}'
    assert main(["prepare", "--config", str(cfg), "--out", str(root / "young"), "--set", f"dataset={young}"]) == 0
    assert main(["ablation", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "abl")]) == 0
    ckpts = ",".join(str(root / "abl" / m / "final") for m in ("CAAE", "CAAE-G", "CAAE-V", "CAAE-GV"))
    assert main(["evaluate", "--config", str(cfg), "--checkpoints", ckpts, "--inputs", str(root / "young"),
                 "--out", str(root / "report.json")]) == 0
    return root


def test_prepare_manifest(workspace, tmp_path):
    doc = json.loads((workspace / "data" / "dataset.json").read_text())
    assert len(doc["records"]) == 100
    assert main(["prepare", "--config", str(workspace / "tiny.json"), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "dataset.json").read_bytes() == (workspace / "data" / "dataset.json").read_bytes()
    saved = json.loads((workspace / "data" / "config.json").read_text())
    assert saved["epochs"] == 1 and saved["lambda"] == 100.0


def test_prepare_errors(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["prepare", "--source", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == 2
    assert main(["prepare", "--source", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2


def test_ablation_runs(workspace):
    for name, flags in {"CAAE": (False, False), "CAAE-G": (True, False), "CAAE-V": (False, True),
                        "CAAE-GV": (True, True)}.items():
        run = workspace / "abl" / name
        assert (run / "final" / "weights.bin").exists() and (run / "train_log.ndjson").exists()
        saved = json.loads((run / "config.json").read_text())
        assert (saved["gender_on"], saved["vgg_on"]) == flags
        meta = json.loads((run / "final" / "manifest.json").read_text())["meta"]
        assert meta["variant"] == name


def test_ablation_parallel_matches_sequential(workspace, tmp_path):
    cfg = str(workspace / "tiny.json")
    args = ["ablation", "--config", cfg, "--data", str(workspace / "data"), "--set", 'models=["CAAE", "CAAE-GV"]']
    assert main([*args, "--out", str(tmp_path / "par"), "--jobs", "2"]) == 0
    for name in ("CAAE", "CAAE-GV"):
        a = (tmp_path / "par" / name / "final" / "weights.bin").read_bytes()
        assert a == (workspace / "abl" / name / "final" / "weights.bin").read_bytes()


def test_train_single_and_output_root(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("CAAEGV_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["train", "--config", str(workspace / "tiny.json"), "--data", str(workspace / "data"),
                 "--set", "gender_on=false", "--seed", "3"]) == 0
    run = tmp_path / "root" / "train"
    assert json.loads((run / "config.json").read_text())["seed"] == 3
    assert (run / "final" / "manifest.json").exists()


def test_simulate_strip(workspace, tmp_path):
    from PIL import Image

    face = tmp_path / "face.png"
    save_png(face, render_synthetic_face(SyntheticFaceParams(3, 2, "female", 32)))
    out = tmp_path / "strip.png"
    assert main(["simulate", "--checkpoint", str(workspace / "abl" / "CAAE-GV" / "final"), "--image", str(face),
                 "--sex", "female", "--out", str(out)]) == 0
    assert Image.open(out).size == (160, 16)
    assert main(["simulate", "--checkpoint", str(tmp_path), "--image", str(face), "--sex", "male",
                 "--out", str(out)]) == 2


def test_report_table(workspace, capsys):
    assert main(["report", "--in", str(workspace / "report.json")]) == 0
    text = capsys.readouterr().out
    assert "Gender Score Comparison" in text and "FR" in text
    fr_lines = [l for l in text.splitlines() if l.startswith("1.6")]
    assert fr_lines
    report = json.loads((workspace / "report.json").read_text())
    base = report["models"]["CAAE"]["fr"]["1.6"]
    assert fr_lines[0].split()[1] == f"{base:.2f}"


def test_report_csv_baseline_bare(workspace, capsys):
    assert main(["report", "--in", str(workspace / "report.json"), "--format", "csv"]) == 0
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    starts = [i for i, r in enumerate(rows) if r[0].startswith("table")]
    assert len(starts) == 4
    gains_seen = 0
    for start, end in zip(starts, [*starts[1:], len(rows)]):
        header, body = rows[start + 1], rows[start + 2:end]
        base_cols = [i for i, h in enumerate(header) if h.split(":")[-1] == "CAAE"]
        other_cols = [i for i, h in enumerate(header) if h.split(":")[-1] in ("CAAE-G", "CAAE-V", "CAAE-GV")]
        for row in body:
            assert all("(" not in row[i] for i in base_cols)
            gains_seen += sum(row[i].endswith("%)") for i in other_cols)
    assert gains_seen > 0


def test_report_errors(tmp_path):
    (tmp_path / "empty.json").write_text("{}")
    assert main(["report", "--in", str(tmp_path / "empty.json")]) == 2
    (tmp_path / "bad.json").write_text(json.dumps({"meta": {}, "models": {}, "gains": {}}))
    assert main(["report", "--in", str(tmp_path / "bad.json")]) == 2
    (tmp_path / "junk.json").write_text("not json")
    assert main(["report", "--in", str(tmp_path / "junk.json")]) == 2
    assert main(["report", "--in", str(tmp_path / "missing.json")]) == 2


def test_config_errors(tmp_path):
    assert main(["train", "--set", "learning_rate=-1", "--out", str(tmp_path)]) == 2
    assert main(["train", "--set", "bogus=1", "--out", str(tmp_path)]) == 2
    (tmp_path / "c.json").write_text("[1, 2]")
    assert main(["train", "--config", str(tmp_path / "c.json")]) == 2
    assert main(["frobnicate"]) == 2
    with pytest.raises(BadConfig):
        cfgmod.load_config(None, [("split", [0.5, 0.5, 0.5])])


def test_numeric_failure_exit_code(monkeypatch, workspace, tmp_path):
    import caaegv.cli as cli

    def boom(*a, **k):
        raise NonFiniteLoss("recon", 0, float("nan"))

    monkeypatch.setattr(cli, "train", boom)
    assert main(["train", "--config", str(workspace / "tiny.json"), "--data", str(workspace / "data"),
                 "--out", str(tmp_path)]) == 3


def test_overrides_and_defaults():
    assert cfgmod.parse_override("arch.tile_s=2") == ("arch.tile_s", 2)
    assert cfgmod.parse_override("dataset.directory=faces") == ("dataset.directory", "faces")
    cfg = cfgmod.load_config(None, [("arch.tile_s", 2), ("evaluation.classifier_epochs", 3)])
    assert cfg["arch"] == {"tile_s": 2}
    assert cfg["evaluation"]["classifier_epochs"] == 3 and cfg["evaluation"]["embedder_epochs"] == 10
    assert cfgmod.train_config(cfg, "CAAE").arch_config().tile_s == 0
    assert cfgmod.load_schema()["additionalProperties"] is False
    np.testing.assert_allclose(sum(cfgmod.DEFAULT_CONFIG["split"]), 1.0)
