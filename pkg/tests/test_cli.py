import json
import time

import pytest

from voxelstruct import cli
from voxelstruct.nets import LANDMARK_NAMES

FAST = ["--set", "net.latent_dim=4", "--set", "net.encoder_channels=[2,4,4,8]",
        "--set", "net.detector_channels=[2,2,2,2]", "--set", "net.detector_fc=[8,8]"]


def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert cli.main(["gen-data", "--out", str(d), "--count", "24", "--dim", "16", "--seed", "2"]) == 0
    return d


@pytest.fixture(scope="module")
def runs(data, tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    vae, det, joint = root / "vae", root / "det", root / "joint"
    assert cli.main(["train", "--mode", "vae", "--data", str(data), "--out", str(vae),
                     "--set", "train.vae.epochs=1", *FAST]) == 0
    assert cli.main(["train", "--mode", "detector", "--data", str(data), "--out", str(det),
                     "--set", "train.detector.epochs=1", *FAST]) == 0
    assert cli.main(["train", "--mode", "joint", "--data", str(data), "--out", str(joint),
                     "--init", f"{vae}/model.ckpt,{det}/model.ckpt", "--set", "train.stage1.iters=2",
                     "--set", "train.stage1.fine_batches=[4]", "--set", "train.stage1.fine_iters=1",
                     "--set", "train.stage2.epochs=0", "--set", "train.weights.alpha2=0", *FAST]) == 0
    return vae, det, joint


def test_gen_data_smoke(tmp_path, capsys):
    t0 = time.perf_counter()
    assert cli.main(["gen-data", "--out", str(tmp_path / "d"), "--count", "10", "--dim", "16"]) == 0
    assert time.perf_counter() - t0 < 5
    files = sorted((tmp_path / "d" / "shapes").iterdir())
    assert len(files) == 10 and all(f.read_bytes()[:5] == b"VOXB1" for f in files)
    assert (tmp_path / "d" / "manifest.json").is_file()
    assert "wrote 10 shapes" in capsys.readouterr().out


def test_gen_data_byte_identical(tmp_path, monkeypatch):
    args = ["--count", "12", "--dim", "16", "--seed", "9"]
    assert cli.main(["gen-data", "--out", str(tmp_path / "a"), *args]) == 0
    monkeypatch.setenv("VOXELSTRUCT_THREADS", "3")
    assert cli.main(["gen-data", "--out", str(tmp_path / "b"), *args]) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_gen_data_no_annotations(tmp_path):
    assert cli.main(["gen-data", "--out", str(tmp_path / "d"), "--count", "10", "--annotated-frac", "0"]) == 0
    man = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert not any(e["annotated"] for e in man["samples"])
    assert list((tmp_path / "d" / "landmarks").iterdir()) == []
    rc = cli.main(["train", "--mode", "detector", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "r"), *FAST])
    assert rc == cli.EXIT_DATA


def test_bad_arguments_exit_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as ei:
        cli.main(["gen-data", "--count", "3"])
    assert ei.value.code == 2
    assert cli.main(["gen-data", "--out", str(tmp_path), "--dim", "12"]) == 2
    capsys.readouterr()


def test_help_documents_flags(capsys):
    for sub in ("gen-data", "train", "eval"):
        with pytest.raises(SystemExit):
            cli.main([sub, "--help"])
        out = capsys.readouterr().out
        assert "default" in out
    with pytest.raises(SystemExit):
        cli.main(["train", "--help"])
    out = capsys.readouterr().out
    assert "train.stage1.iters = 150" in out and "--record-timing" in out


def test_missing_dataset_is_io_error(tmp_path):
    assert cli.main(["train", "--mode", "vae", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 3


def test_unknown_config_key(data, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"vae": {"epochz": 3}}}))
    assert cli.main(["train", "--mode", "vae", "--data", str(data), "--out", str(tmp_path / "o"),
                     "--config", str(cfg)]) == 2


def test_config_grid_mismatch(data, tmp_path):
    assert cli.main(["train", "--mode", "vae", "--data", str(data), "--out", str(tmp_path / "o"),
                     "--set", "net.grid_dim=32"]) == 5


def test_joint_requires_init(data, tmp_path):
    assert cli.main(["train", "--mode", "joint", "--data", str(data), "--out", str(tmp_path / "o"), *FAST]) == 2


def test_train_outputs_and_rerun_identical(data, runs, tmp_path):
    vae = runs[0]
    assert {p.name for p in vae.iterdir()} >= {"model.ckpt", "train_log.csv", "config.json"}
    again = tmp_path / "vae2"
    assert cli.main(["train", "--mode", "vae", "--data", str(data), "--out", str(again),
                     "--set", "train.vae.epochs=1", *FAST]) == 0
    assert _tree(vae) == _tree(again)


def test_joint_log_keeps_consistency_column(runs):
    lines = (runs[2] / "train_log.csv").read_text().splitlines()
    header = lines[0].split(",")
    assert "l_consist" in header
    rows = [dict(zip(header, ln.split(","))) for ln in lines[1:]]
    shape = [r for r in rows if not r["stage"].startswith("detector")]
    assert shape and all(float(r["l_consist"]) > 0 for r in shape)


def test_eval_protocols(data, runs, tmp_path):
    vae, det, joint = runs
    out = tmp_path / "rep"
    models = f"{vae}/model.ckpt,{joint}/model.ckpt"
    assert cli.main(["eval", "--protocol", "sweep", "--models", models, "--names", "shape,struct",
                     "--data", str(data), "--out", str(out), "--levels", "0,0.25,0.5,0.75"]) == 0
    rows = (out / "sweep.csv").read_text().splitlines()[1:]
    assert sum(r.startswith("shape,") for r in rows) == 4 and sum(r.startswith("struct,") for r in rows) == 4
    assert len((out / "sweep_paired.csv").read_text().splitlines()) == 5

    assert cli.main(["eval", "--protocol", "interpolate", "--models", f"{joint}/model.ckpt",
                     "--names", "j", "--data", str(data), "--out", str(out), "--k", "8"]) == 0
    d = out / "interpolate_j"
    assert len(list(d.glob("frame*.voxf"))) == 8 and len(list(d.glob("frame*.pgm"))) == 24

    assert cli.main(["eval", "--protocol", "consistency", "--models", f"{vae}/model.ckpt",
                     "--detector", f"{det}/model.ckpt", "--names", "v", "--out", str(out), "--n", "64"]) == 0
    header = (out / "consistency_v.csv").read_text().splitlines()[0].split(",")
    assert header == ["sample", *LANDMARK_NAMES, "mean"]

    assert cli.main(["eval", "--protocol", "complete", "--models", f"{vae}/model.ckpt", "--names", "v",
                     "--data", str(data), "--out", str(out), "--sparsify", "0.5", "--crop", "x:low:0.3"]) == 0
    doc = json.loads((out / "complete_v.json").read_text())
    assert doc["degradation"]["sparsify"] == 0.5 and 0 <= doc["aggregates"]["iou"]["mean"] <= 1

    # consistency without detector weights anywhere is a data error
    assert cli.main(["eval", "--protocol", "consistency", "--models", f"{vae}/model.ckpt",
                     "--out", str(out)]) == 4


def test_eval_rejects_mixed_configs(data, runs, tmp_path):
    other = tmp_path / "other"
    assert cli.main(["train", "--mode", "vae", "--data", str(data), "--out", str(other),
                     "--set", "train.vae.epochs=0", "--set", "net.latent_dim=4"]) == 0
    rc = cli.main(["eval", "--protocol", "iou", "--models", f"{runs[0]}/model.ckpt,{other}/model.ckpt",
                   "--names", "a,b", "--data", str(data), "--out", str(tmp_path / "rep")])
    assert rc == 5


def test_tampered_config_hash(runs, tmp_path, data):
    import shutil
    copy = tmp_path / "vae"
    shutil.copytree(runs[0], copy)
    doc = json.loads((copy / "config.json").read_text())
    doc["net"]["latent_dim"] = 5
    (copy / "config.json").write_text(json.dumps(doc))
    rc = cli.main(["eval", "--protocol", "iou", "--models", f"{copy}/model.ckpt", "--data", str(data),
                   "--out", str(tmp_path / "r")])
    assert rc == 5


def test_threads_env(monkeypatch):
    monkeypatch.setenv("VOXELSTRUCT_THREADS", "2")
    assert cli.worker_threads() == 2
    monkeypatch.setenv("VOXELSTRUCT_THREADS", "x")
    with pytest.raises(cli.CliError):
        cli.worker_threads()
    monkeypatch.delenv("VOXELSTRUCT_THREADS")
    assert cli.worker_threads() >= 1
