import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from fcbfuse.cli import main
from fcbfuse.synthetic import blob_dataset, write_dataset

TRAIN_FLAGS = ["--seed", "0", "--epochs", "2", "--max-steps", "2", "--batch-size", "4",
               "--no-augment", "--threads", "1"]


def tree_digest(root):
    h = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A two-step toy run on 20 pairs with the seeded 80/10/10 split."""
    base = tmp_path_factory.mktemp("cli")
    data = write_dataset(base / "data", blob_dataset(20, (64, 64), seed=5))
    before = tree_digest(data)
    out = base / "run"
    code = main(["train", "--data", str(data), "--out", str(out)] + TRAIN_FLAGS)
    assert code == 0
    assert tree_digest(data) == before
    return data, out


def test_train_writes_outputs(trained):
    _, out = trained
    for name in ("best.ckpt", "train_log.csv", "split.tsv", "run_config.json"):
        assert (out / name).is_file(), name
    lines = (out / "train_log.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_mdice,lr"
    splits = [line.split("\t")[1] for line in (out / "split.tsv").read_text().splitlines()]
    assert (splits.count("train"), splits.count("val"), splits.count("test")) == (16, 2, 2)


def test_train_on_four_pairs_with_overfit_split(toy_dataset, tmp_path):
    out = tmp_path / "run"
    code = main(["train", "--data", str(toy_dataset), "--out", str(out), "--split", "overfit"]
                + TRAIN_FLAGS)
    assert code == 0
    assert {p.name for p in out.iterdir()} >= {"best.ckpt", "train_log.csv", "split.tsv"}


def test_train_is_deterministic(toy_dataset, tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["train", "--data", str(toy_dataset), "--out", str(out), "--split", "overfit",
                     "--seed", "3", "--epochs", "1", "--max-steps", "1", "--threads", "1"]) == 0
        outs.append(out)
    for name in ("train_log.csv", "best.ckpt", "split.tsv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def test_four_pairs_cannot_be_split(toy_dataset, tmp_path, capsys):
    assert main(["train", "--data", str(toy_dataset), "--out", str(tmp_path / "r")] + TRAIN_FLAGS) == 3
    assert "at least 10" in capsys.readouterr().err


def test_missing_masks_dir_is_data_error(tmp_path, capsys):
    data = write_dataset(tmp_path / "d", blob_dataset(2, (64, 64), seed=0))
    for f in (data / "masks").iterdir():
        f.unlink()
    (data / "masks").rmdir()
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "r")] + TRAIN_FLAGS) == 3
    assert str(data / "masks") in capsys.readouterr().err


def test_config_errors(tmp_path, toy_dataset, capsys):
    assert main(["train", "--data", str(toy_dataset)]) == 2  # no seed
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad)]) == 2
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"seed": 0, "data": str(toy_dataset), "colour": "red"}))
    assert main(["train", "--config", str(unknown)]) == 2
    assert "colour" in capsys.readouterr().err


def test_bad_thread_env(toy_dataset, tmp_path, monkeypatch):
    monkeypatch.setenv("FCBFUSE_THREADS", "many")
    assert main(["train", "--data", str(toy_dataset), "--out", str(tmp_path / "r"), "--seed", "0",
                 "--split", "overfit", "--max-steps", "1"]) == 2


def test_print_config_merges_file_and_flags(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"seed": 1, "data": "somewhere", "epochs": 5}))
    assert main(["train", "--config", str(cfg), "--epochs", "7", "--print-config"]) == 0
    resolved = json.loads(capsys.readouterr().out)
    assert resolved["seed"] == 1 and resolved["epochs"] == 7 and resolved["batch_size"] == 16


def test_eval_test_split(trained, tmp_path, capsys):
    data, out = trained
    assert main(["eval", "--checkpoint", str(out / "best.ckpt"), "--data", str(data),
                 "--split", "test", "--out", str(tmp_path)]) == 0
    printed = capsys.readouterr().out
    for col in ("mDice", "mIoU", "mPrec", "mRec"):
        assert col in printed
    summary = json.loads((tmp_path / "report.json").read_text())
    assert summary["count"] == 2
    assert (tmp_path / "report.csv").read_text().startswith("id,dice,iou,precision,recall\n")


def test_eval_full_dataset_is_labelled(trained, tmp_path):
    _, out = trained
    other = write_dataset(tmp_path / "ellipses", blob_dataset(3, (64, 64), "ellipse", seed=1))
    assert main(["eval", "--checkpoint", str(out / "best.ckpt"), "--data", str(other),
                 "--full-dataset", "--train-name", "circles", "--out", str(tmp_path / "rep")]) == 0
    summary = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert summary["name"] == "train:circles→test:ellipses"
    assert summary["count"] == 3


def test_eval_size_mismatch_is_checkpoint_error(trained, tmp_path):
    data, out = trained
    assert main(["eval", "--checkpoint", str(out / "best.ckpt"), "--data", str(data),
                 "--size", "32", "32", "--out", str(tmp_path)]) == 5
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(data)]) == 5


def test_predict_outputs(trained, tmp_path):
    data, out = trained
    inputs = sorted((data / "images").iterdir())[:2]
    pred = tmp_path / "pred"
    assert main(["predict", "--checkpoint", str(out / "best.ckpt"), "--out", str(pred),
                 "--dump-features", "--ablate-fcb"] + [str(p) for p in inputs]) == 0
    for p in inputs:
        for suffix in ("mask", "tb", "fcb", "withfcb", "withoutfcb"):
            assert (pred / f"{p.stem}_{suffix}.png").is_file(), suffix
        mask = np.asarray(Image.open(pred / f"{p.stem}_mask.png"))
        assert mask.shape == (64, 64) and set(np.unique(mask)) <= {0, 255}
    assert len(list(pred.iterdir())) == 5 * len(inputs)


def test_predict_continues_past_bad_input(trained, tmp_path, capsys):
    data, out = trained
    good = sorted((data / "images").iterdir())[0]
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"garbage")
    pred = tmp_path / "pred"
    code = main(["predict", "--checkpoint", str(out / "best.ckpt"), "--out", str(pred),
                 str(bad), str(good)])
    assert code != 0
    assert (pred / f"{good.stem}_mask.png").is_file()
    assert "broken.png" in capsys.readouterr().err


def test_predict_is_deterministic(trained, tmp_path):
    data, out = trained
    img = sorted((data / "images").iterdir())[0]
    for k in range(2):
        assert main(["predict", "--checkpoint", str(out / "best.ckpt"), "--out", str(tmp_path / str(k)),
                     "--threads", "1", str(img)]) == 0
    name = f"{img.stem}_mask.png"
    assert (tmp_path / "0" / name).read_bytes() == (tmp_path / "1" / name).read_bytes()


def test_predict_resize_to_source(trained, tmp_path):
    _, out = trained
    src = blob_dataset(1, (96, 80), seed=2)[0]
    path = tmp_path / "big.png"
    Image.fromarray(np.round(src.image.transpose(1, 2, 0) * 255).astype(np.uint8)).save(path)
    assert main(["predict", "--checkpoint", str(out / "best.ckpt"), "--out", str(tmp_path / "p"),
                 "--resize-to-source", str(path)]) == 0
    assert np.asarray(Image.open(tmp_path / "p" / "big_mask.png")).shape == (96, 80)
