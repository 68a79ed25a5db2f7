import json

import numpy as np
import pytest
from click.testing import CliRunner

from msfuse.cli import main
from msfuse.volume import read_volume, write_volume


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    res = runner.invoke(main, ["synth", "--out-dir", str(root / "data"), "--n", "3", "--extent", "16", "--seed", "2"])
    assert res.exit_code == 0, res.output
    cfg = {"variant": "focal", "base_filters": 2, "patch": [16, 16, 16], "num_levels": 1,
           "iterations": 2, "val_every": 1, "seed": 3}
    (root / "cfg.json").write_text(json.dumps(cfg))
    res = runner.invoke(main, ["train", "--config", str(root / "cfg.json"), "--data", str(root / "data"),
                               "--out-dir", str(root / "run")])
    assert res.exit_code == 0, res.output
    return root, json.loads(res.output.strip().splitlines()[-1])


def test_synth_writes_triples(workspace):
    root, _ = workspace
    names = sorted(p.name for p in (root / "data").iterdir())
    assert names[:3] == ["case_000_ct.h3v", "case_000_mask.h3v", "case_000_pet.h3v"]
    assert len(names) == 9


def test_train_outputs(workspace):
    root, summary = workspace
    assert (root / "run" / "best.h3ck").exists()
    lines = (root / "run" / "history.csv").read_text().splitlines()
    assert lines[0] == "iteration,lr,loss,bce,dice" and len(lines) == 3
    assert len(summary["val_ids"]) == 1


def test_predict_and_eval(workspace):
    root, summary = workspace
    runner = CliRunner()
    cid = summary["val_ids"][0]
    pred = root / "pred"
    pred.mkdir()
    res = runner.invoke(main, ["predict", "--checkpoint", str(root / "run" / "best.h3ck"),
                               "--ct", str(root / "data" / f"{cid}_ct.h3v"),
                               "--pet", str(root / "data" / f"{cid}_pet.h3v"),
                               "--out-prob", str(pred / f"{cid}_prob.h3v"),
                               "--out-mask", str(pred / f"{cid}_mask.h3v")])
    assert res.exit_code == 0, res.output
    m = read_volume(pred / f"{cid}_mask.h3v")
    assert m.kind == "mask" and m.voxels.shape == (16, 16, 16)
    prob = read_volume(pred / f"{cid}_prob.h3v")
    assert prob.voxels.shape == (32, 16, 16)
    assert prob.voxels.min() >= 0 and prob.voxels.max() <= 1

    gt = root / "gt"
    gt.mkdir()
    (gt / f"{cid}_mask.h3v").write_bytes((root / "data" / f"{cid}_mask.h3v").read_bytes())
    res = runner.invoke(main, ["eval", "--pred", str(pred), "--gt", str(gt),
                               "--out-json", str(root / "r.json"), "--out-csv", str(root / "r.csv")])
    assert res.exit_code == 0, res.output
    assert (root / "r.csv").read_text().startswith("case_id,class,dsc\n")
    report = json.loads((root / "r.json").read_text())
    assert 0.0 <= report["mean_aggregated"] <= 1.0


def test_prep_then_train_preprocessed(workspace, tmp_path):
    root, _ = workspace
    runner = CliRunner()
    for cid in ("case_000", "case_001"):
        d = root / "data"
        res = runner.invoke(main, ["prep", "--ct", str(d / f"{cid}_ct.h3v"), "--pet", str(d / f"{cid}_pet.h3v"),
                                   "--mask", str(d / f"{cid}_mask.h3v"), "--out-dir", str(tmp_path / "prep"),
                                   "--case-id", cid])
        assert res.exit_code == 0, res.output
    ct = read_volume(tmp_path / "prep" / "case_000_ct.h3v")
    assert ct.voxels.min() >= 0 and ct.voxels.max() <= 1
    res = runner.invoke(main, ["train", "--config", str(root / "cfg.json"), "--data", str(tmp_path / "prep"),
                               "--out-dir", str(tmp_path / "run"), "--preprocessed"])
    assert res.exit_code == 0, res.output


def test_exit_codes(tmp_path, workspace):
    root, _ = workspace
    runner = CliRunner()
    (tmp_path / "bad.json").write_text(json.dumps({"no_such_key": 1}))
    res = runner.invoke(main, ["train", "--config", str(tmp_path / "bad.json"), "--data", str(root / "data"),
                               "--out-dir", str(tmp_path / "o")])
    assert res.exit_code == 2
    (tmp_path / "empty").mkdir()
    res = runner.invoke(main, ["train", "--config", str(root / "cfg.json"), "--data", str(tmp_path / "empty"),
                               "--out-dir", str(tmp_path / "o")])
    assert res.exit_code == 3
    (tmp_path / "junk.h3v").write_bytes(b"JUNK")
    res = runner.invoke(main, ["predict", "--checkpoint", str(root / "run" / "best.h3ck"),
                               "--ct", str(tmp_path / "junk.h3v"), "--pet", str(tmp_path / "junk.h3v"),
                               "--out-prob", str(tmp_path / "p.h3v"), "--out-mask", str(tmp_path / "m.h3v")])
    assert res.exit_code == 3


def test_numeric_failure_exit_code(tmp_path, workspace):
    root, _ = workspace
    runner = CliRunner()
    data = tmp_path / "nan"
    data.mkdir()
    for p in (root / "data").glob("case_00[01]_*"):
        (data / p.name).write_bytes(p.read_bytes())
    for cid in ("case_000", "case_001"):
        pet = read_volume(data / f"{cid}_pet.h3v")
        write_volume(pet.with_voxels(np.full_like(pet.voxels, np.nan)), data / f"{cid}_pet.h3v")
    cfg = json.loads((root / "cfg.json").read_text()) | {"augment": False}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    res = runner.invoke(main, ["train", "--config", str(tmp_path / "c.json"), "--data", str(data),
                               "--out-dir", str(tmp_path / "o")])
    assert res.exit_code == 4, res.output
