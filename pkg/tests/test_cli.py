import json
from pathlib import Path

import numpy as np
import pytest

from conftest import DATA_ROOT, needs_mnist
from llvit import checkpoint
from llvit.cli import main
from llvit.config import preset

TOY = {
    "model": {"image_size": 28, "patch_size": 7, "channels": 1, "dim": 16, "heads": 2,
              "depth": 1, "num_classes": 10,
              "mixer": {"kind": "lut", "widths": [64, 32], "fan_in": 4, "bits": 4}},
    "optim": {"batch_size": 64, "epochs": 2, "lr": 0.002},
    "data": {"name": "mnist", "train_subset": 512, "calib_samples": 256},
    "seed": 7,
}


def write_cfg(tmp_path, cfg=TOY, name="toy.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def test_stats_table_cells(capsys):
    assert main(["stats", "--preset", "ivit-t"]) == 0
    out = capsys.readouterr().out
    for cell in ("1,327,104", "442,368", "1,769,472", "261,439,488", "89,415,936",
                 "87,146,496", "348,585,984"):
        assert cell in out


def test_stats_baseline_json(tmp_path, capsys):
    out = tmp_path / "s.json"
    assert main(["stats", "--preset", "llvit-t", "--baseline", "ivit-t", "--json", str(out)]) == 0
    d = json.loads(out.read_text())
    assert d["reduction"]["weight_reduction_pct"] >= 60 and "config" in d and "tool_version" in d


def test_stats_csv(capsys):
    assert main(["stats", "--preset", "ivit-t", "--csv"]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 11


def test_stats_geometry_mismatch(capsys):
    assert main(["stats", "--preset", "llvit-t", "--baseline", "tiny-mnist-mlp"]) == 2
    assert "geometry mismatch" in capsys.readouterr().err


def test_bad_config_field_path(tmp_path, capsys):
    bad = json.loads(json.dumps(TOY))
    bad["model"]["mixer"]["fan_in"] = 9
    assert main(["stats", "--config", str(write_cfg(tmp_path, bad))]) == 2
    assert "model.mixer.fan_in" in capsys.readouterr().err


def test_unknown_config_field(tmp_path, capsys):
    bad = dict(TOY, optimiser={})
    assert main(["stats", "--config", str(write_cfg(tmp_path, bad))]) == 2
    assert "optimiser" in capsys.readouterr().err


def test_perf_default_and_sweep(tmp_path, capsys):
    assert main(["perf", "--preset", "ivit-t"]) == 0
    assert "latency" in capsys.readouterr().out
    csv = tmp_path / "sweep.csv"
    assert main(["perf", "--preset", "llvit-t", "--sweep", "--csv", str(csv)]) == 0
    assert len(csv.read_text().strip().splitlines()) == 5


def test_perf_bad_p(capsys):
    assert main(["perf", "--preset", "ivit-t", "--P", "0"]) == 2


def test_train_missing_dataset(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["train", "--config", str(cfg), "--data-root", str(tmp_path / "none"),
                 "--out", str(tmp_path / "o")]) == 2


def test_eval_bad_magic(tmp_path, capsys):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"garbage!" + bytes(32))
    assert main(["eval", "--checkpoint", str(p)]) == 2


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    if not (DATA_ROOT / "mnist" / "train-images-idx3-ubyte").exists():
        pytest.skip("MNIST not present")
    d = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(d)
    out = d / "run"
    code = main(["--threads", "1", "train", "--config", str(cfg), "--data-root", str(DATA_ROOT),
                 "--out", str(out)])
    assert code == 0
    return d, cfg, out


@needs_mnist
def test_train_artifacts(trained):
    _, _, out = trained
    lines = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert [l["epoch"] for l in lines] == [0, 1]
    assert lines[1]["train_loss"] < lines[0]["train_loss"]
    assert (out / "best.ckpt").exists() and (out / "last.ckpt").exists()
    _, meta = checkpoint.load(out / "last.ckpt")
    assert meta["config"]["seed"] == 7 and "tool_version" in meta


@needs_mnist
def test_eval_reproduces_log(trained, tmp_path, capsys):
    _, _, out = trained
    rep = tmp_path / "eval.json"
    assert main(["eval", "--checkpoint", str(out / "last.ckpt"), "--data-root", str(DATA_ROOT),
                 "--int8", "--json", str(rep)]) == 0
    d = json.loads(rep.read_text())
    last = json.loads((out / "metrics.jsonl").read_text().splitlines()[-1])
    assert d["float"]["accuracy"] == last["test_accuracy"]
    assert set(d["float"]["per_class"]) == {str(i) for i in range(10)}
    assert 0.0 <= d["int8"]["argmax_agreement"] <= 1.0
    assert d["config"]["seed"] == 7


@needs_mnist
def test_eval_class_mismatch(trained, tmp_path, capsys):
    _, _, out = trained
    arrays, meta = checkpoint.load(out / "last.ckpt")
    meta["config"]["model"]["num_classes"] = 12
    arrays["model/head.weight"] = np.zeros((16, 12), np.float32)
    arrays["model/head.bias"] = np.zeros(12, np.float32)
    checkpoint.save(tmp_path / "m.ckpt", arrays, meta)
    assert main(["eval", "--checkpoint", str(tmp_path / "m.ckpt"),
                 "--data-root", str(DATA_ROOT)]) == 2
    assert "classes" in capsys.readouterr().err


@needs_mnist
def test_resume_identical_checkpoint(trained, capsys):
    d, cfg, out = trained
    part = d / "part"
    base = ["--threads", "1", "train", "--config", str(cfg), "--data-root", str(DATA_ROOT),
            "--out", str(part)]
    assert main(base + ["--stop-after", "1"]) == 0
    assert main(base + ["--resume"]) == 0
    a, _ = checkpoint.load(out / "last.ckpt")
    b, _ = checkpoint.load(part / "last.ckpt")
    assert all(np.array_equal(a[k], b[k]) for k in a)


@needs_mnist
def test_export_deterministic(trained, tmp_path, capsys):
    _, _, out = trained
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for p in (a, b):
        assert main(["export", "--checkpoint", str(out / "last.ckpt"), "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    net = json.loads(a.read_text())
    assert net["config"]["seed"] == 7 and len(net["encoders"]) == 1


@needs_mnist
def test_export_mlp_checkpoint(tmp_path, capsys):
    cfg = json.loads(json.dumps(TOY))
    cfg["model"]["mixer"] = {"kind": "mlp"}
    cfg["optim"]["epochs"] = 1
    cfg["data"]["train_subset"] = 64
    p = write_cfg(tmp_path, cfg)
    assert main(["train", "--config", str(p), "--data-root", str(DATA_ROOT),
                 "--out", str(tmp_path / "o")]) == 0
    assert main(["export", "--checkpoint", str(tmp_path / "o" / "last.ckpt"),
                 "--out", str(tmp_path / "n.json")]) == 2
    assert "nothing to export" in capsys.readouterr().err


@needs_mnist
@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_abort_exit_code(tmp_path, capsys):
    cfg = json.loads(json.dumps(TOY))
    cfg["optim"].update(lr=1e30, epochs=1, weight_decay=0.0)
    cfg["data"]["train_subset"] = 256
    p = write_cfg(tmp_path, cfg)
    assert main(["train", "--config", str(p), "--data-root", str(DATA_ROOT),
                 "--out", str(tmp_path / "o")]) == 3
    assert "non-finite" in capsys.readouterr().err


def test_presets_match_shipped_configs():
    root = Path(__file__).resolve().parents[1] / "configs"
    from llvit.config import PRESETS, load_run_config

    for name in PRESETS:
        assert load_run_config(root / f"{name}.json").to_dict() == preset(name).to_dict()
