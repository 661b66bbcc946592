import csv
import io
import json
import tarfile

import numpy as np
import pytest

from siblurry.cli import (
    ExperimentConfig,
    apply_overrides,
    cmd_download,
    cmd_export_pool,
    cmd_generate,
    cmd_plot,
    cmd_run,
    load_config,
    main,
)
from siblurry.engine import RunRecord
from siblurry.scenario import StreamManifest

TINY = {"name": "synthetic", "num_classes": 4, "dim": 16, "per_class": 24, "noise": 0.05, "seed": 0}


def tiny_config(out, **train):
    return ExperimentConfig.from_dict({"dataset": TINY, "output_dir": str(out),
                                       "train": {"seeds": [1], **train}})


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_generate_is_idempotent(tmp_path):
    a = cmd_generate(tiny_config(tmp_path / "a"))
    b = cmd_generate(tiny_config(tmp_path / "b"))
    assert (tmp_path / "a/manifest.jsonl").read_bytes() == (tmp_path / "b/manifest.jsonl").read_bytes()
    assert a["entries"] == 4 * 24
    rows = read_csv(tmp_path / "a/stats.csv")
    assert sum(int(r["num_samples"]) for r in rows) == 96
    assert (tmp_path / "a/stats.txt").read_text().strip() == a["table"]
    assert json.loads((tmp_path / "a/effective_config.json").read_text())["dataset"] == TINY


def test_generate_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        cmd_generate(tiny_config(blocker / "sub"))


def test_run_single_seed_std_zero(tmp_path):
    summary = cmd_run(tiny_config(tmp_path, method="linear_probe"))
    assert summary["status"] == "completed"
    for metric in ("a_auc", "a_last", "forgetting"):
        assert summary[metric]["std"] == 0.0
    assert (tmp_path / "record_seed1.jsonl").exists()


@pytest.mark.slow
def test_run_five_seeds_and_rerun(tmp_path):
    cfg = tiny_config(tmp_path / "r1", seeds=[1, 2, 3, 4, 5])
    s1 = cmd_run(cfg)
    assert sorted(p.name for p in (tmp_path / "r1").glob("record_seed*.jsonl")) == \
        [f"record_seed{i}.jsonl" for i in range(1, 6)]
    assert (tmp_path / "r1/summary.json").exists()
    assert len(s1["a_last"]["values"]) == 5
    s2 = cmd_run(tiny_config(tmp_path / "r2", seeds=[1, 2, 3, 4, 5]))
    assert s1 == s2


def test_run_with_shared_manifest(tmp_path):
    cmd_generate(tiny_config(tmp_path / "g"))
    summary = cmd_run(tiny_config(tmp_path / "r", method="linear_probe", seeds=[1, 2]),
                      manifest_path=str(tmp_path / "g/manifest.jsonl"))
    assert summary["status"] == "completed" and len(summary["a_last"]["values"]) == 2


def test_run_marks_failed_seed(tmp_path):
    cfg = tiny_config(tmp_path, method="linear_probe", seeds=[1, 2])
    summary = cmd_run(cfg, manifest_path=str(tmp_path / "missing.jsonl"))
    assert summary["status"] == "failed"
    assert set(summary["failed_seeds"]) == {1, 2}


def test_plot_outputs(tmp_path):
    cmd_run(tiny_config(tmp_path / "run", method="linear_probe", seeds=[1, 2, 3]))
    paths = sorted((tmp_path / "run").glob("record_seed*.jsonl"))
    res = cmd_plot(paths, tmp_path / "plots")
    records = [RunRecord.load(p) for p in paths]
    for r in records:
        rows = read_csv(tmp_path / f"plots/accuracy_seed{r.seed}.csv")
        assert len(rows) == len(r.eval_points)
    curve = read_csv(tmp_path / "plots/accuracy_curve.csv")
    assert len(curve) == res["grid_points"]
    # independent recomputation of the mean band on the shared grid
    grid = [float(row["samples_seen"]) for row in curve]
    per_seed = np.array([np.interp(grid, *zip(*r.eval_points)) for r in records])
    np.testing.assert_allclose([float(row["mean"]) for row in curve], per_seed.mean(0), atol=1e-12)
    np.testing.assert_allclose([float(row["std"]) for row in curve], per_seed.std(0, ddof=1), atol=1e-12)
    assert len(read_csv(tmp_path / "plots/loss_trace.csv")) == sum(len(r.loss_trace) for r in records)
    for name in ("accuracy_curve.png", "loss_trace.png"):
        assert (tmp_path / "plots" / name).stat().st_size > 0
    with pytest.raises(ValueError):
        cmd_plot([], tmp_path / "x")


def test_export_pool(tmp_path):
    from siblurry.backbone import FrozenViT, ModelState, toy_spec

    fresh = ModelState(FrozenViT(toy_spec()), num_classes=6, pool_size=4)
    fresh.save(tmp_path / "fresh.pt")
    res = cmd_export_pool(tmp_path / "fresh.pt", tmp_path / "fresh")
    assert np.all(np.loadtxt(tmp_path / "fresh/masks.csv", delimiter=",") == 1.0)
    assert res["total_selections"] == 0

    cmd_run(tiny_config(tmp_path / "run"))
    res = cmd_export_pool(tmp_path / "run/checkpoint_seed1.pt", tmp_path / "exp")
    counts = np.loadtxt(tmp_path / "exp/counts.csv", delimiter=",")
    rec = RunRecord.load(tmp_path / "run/record_seed1.jsonl")
    assert counts.sum() == rec.total_selections == res["total_selections"]
    assert np.loadtxt(tmp_path / "exp/keys.csv", delimiter=",").shape == (10, 64)


def test_main_generate_and_error(tmp_path, capsys):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({"dataset": TINY}))
    assert main(["generate", "--config", str(cfg), "--output-dir", str(tmp_path / "o"), "--seed", "4"]) == 0
    assert StreamManifest.load(tmp_path / "o/manifest.jsonl").config.seed == 4
    assert main(["generate", "--config", str(cfg), "--set", "scenario.num_tasks=0"]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] and err["command"] == "generate"


def test_main_run(tmp_path, capsys):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({"dataset": TINY}))
    code = main(["run", "--config", str(cfg), "--method", "linear_probe", "--seeds", "3",
                 "--output-dir", str(tmp_path / "o")])
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert out["seeds"] == [3]


def test_download_with_fake_fetch(tmp_path):
    def fake_fetch(url, dest):
        buf = io.BytesIO()
        with tarfile.open(fileobj=buf, mode="w:gz") as tf:
            data = b"hello"
            info = tarfile.TarInfo("cifar-100-python/meta")
            info.size = len(data)
            tf.addfile(info, io.BytesIO(data))
        dest.write_bytes(buf.getvalue())

    root = cmd_download("cifar100", tmp_path / "data", fetch=fake_fetch)
    assert (root / "cifar-100-python/meta").read_bytes() == b"hello"
    with pytest.raises(ValueError):
        cmd_download("mnist", tmp_path)


def test_overrides_and_roundtrip(tmp_path):
    raw = apply_overrides({}, ["train.lr=0.01", "scenario.num_tasks=3", "dataset.name=synthetic",
                               "train.seeds=[7, 8]", "output_dir=out"])
    cfg = ExperimentConfig.from_dict(raw)
    assert cfg.train.lr == 0.01 and cfg.scenario.num_tasks == 3 and cfg.train.seeds == [7, 8]
    path = cfg.write(tmp_path / "c.json")
    assert load_config(str(path)).to_dict() == cfg.to_dict()
    with pytest.raises(ValueError):
        apply_overrides({}, ["novalue"])
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"bogus": {}})


def test_named_dataset_needs_root(monkeypatch):
    from siblurry.cli import resolve_dataset

    monkeypatch.delenv("SIBLURRY_DATA_ROOT", raising=False)
    with pytest.raises(ValueError):
        resolve_dataset({"name": "cifar100"})
