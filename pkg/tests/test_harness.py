import csv
import dataclasses
import json

import numpy as np
import pytest
import torch
from PIL import Image

from saliency_peft.backbone import ConfigError, build_backbone, freeze_partition
from saliency_peft.harness.cli import main
from saliency_peft.harness.config import RunConfig
from saliency_peft.harness.data import DatasetError, DatasetIndex, iterate_batches, load_dataset
from saliency_peft.harness.tensorfile import TensorFormatError, decode_tensor, encode_tensor, read_tensor, write_tensor
from saliency_peft.harness.training import (
    CheckpointError,
    TrainingError,
    evaluate,
    evaluate_predictions,
    load_checkpoint,
    make_optimizer,
    predict,
    predict_samples,
    to_uint8,
    train,
)

from .conftest import tiny_run_config


# --- tensor files -------------------------------------------------------------

def test_zero_tensor_file_size(tmp_path):
    write_tensor(tmp_path / "z.ten", np.zeros((2, 3)))
    raw = (tmp_path / "z.ten").read_bytes()
    assert len(raw) == 4 + 1 + 8 + 24
    assert raw[:5] == b"TEN1\x02" and raw[5:13] == b"\x02\x00\x00\x00\x03\x00\x00\x00"


@pytest.mark.parametrize("shape", [(), (5,), (2, 3, 4), (1, 1, 1, 1, 1, 1, 1, 2)])
def test_round_trip_bitwise(tmp_path, shape):
    a = np.random.default_rng(0).standard_normal(shape).astype(np.float32)
    write_tensor(tmp_path / "a.ten", a)
    b = read_tensor(tmp_path / "a.ten")
    assert b.shape == a.shape and a.tobytes() == b.tobytes()


def test_truncation_reports_offset():
    buf = encode_tensor(np.ones((2, 3)))
    with pytest.raises(TensorFormatError, match="truncated payload") as e:
        decode_tensor(buf[:-5])
    assert e.value.offset == len(buf) - 5
    with pytest.raises(TensorFormatError, match="truncated dims"):
        decode_tensor(buf[:7])
    with pytest.raises(TensorFormatError, match="trailing"):
        decode_tensor(buf + b"\x00")


def test_bad_magic():
    with pytest.raises(TensorFormatError, match="magic") as e:
        decode_tensor(b"TEN2" + encode_tensor(np.zeros(1))[4:])
    assert e.value.offset == 0


# --- config -----------------------------------------------------------------

def test_config_json_round_trip(tmp_path):
    cfg = tiny_run_config()
    cfg.write(tmp_path / "c.json")
    again = RunConfig.load(tmp_path / "c.json")
    assert again == cfg


def test_unknown_keys_rejected_with_path():
    data = tiny_run_config().to_dict()
    data["peft"]["adapter_bottleneck"] = 4
    with pytest.raises(ConfigError, match=r"config\.peft: unknown key"):
        RunConfig.from_dict(data)
    data = tiny_run_config().to_dict()
    data["prompts"]["sources"][1]["cross_attention"]["width"] = 4
    with pytest.raises(ConfigError, match=r"sources\[1\]\.cross_attention"):
        RunConfig.from_dict(data)


def test_type_and_value_errors():
    data = tiny_run_config().to_dict()
    data["batch_size"] = "8"
    with pytest.raises(ConfigError, match="batch_size"):
        RunConfig.from_dict(data)
    data["batch_size"] = 0
    with pytest.raises(ConfigError, match="batch_size"):
        RunConfig.from_dict(data)


def test_invalid_json(tmp_path):
    (tmp_path / "c.json").write_text("{nope")
    with pytest.raises(ConfigError, match="not valid JSON"):
        RunConfig.load(tmp_path / "c.json")


def test_default_config_is_valid():
    cfg = RunConfig()
    cfg.validate()
    assert cfg.optimizer.lr == 2e-4 and cfg.optimizer.weight_decay == 0 and cfg.batch_size == 8


# --- data ---------------------------------------------------------------------

def _write_pair(root, image_id, image, mask):
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(root / "images" / f"{image_id}.png")
    Image.fromarray(mask).save(root / "masks" / f"{image_id}.png")


def test_white_mask_and_resize(tmp_path):
    rng = np.random.default_rng(0)
    _write_pair(tmp_path, "a", rng.integers(0, 256, (60, 100, 3), dtype=np.uint8), np.full((60, 100), 255, np.uint8))
    [s] = load_dataset(DatasetIndex.from_root(tmp_path, 64))
    assert s.image.shape == (3, 64, 64)
    assert 0 <= s.image.min() and s.image.max() <= 1
    assert torch.equal(s.mask, torch.ones(1, 64, 64))
    assert s.gt.shape == (60, 100)


def test_index_errors(tmp_path):
    with pytest.raises(DatasetError, match="images/ and masks/"):
        DatasetIndex.from_root(tmp_path, 32)
    _write_pair(tmp_path, "a", np.zeros((4, 4, 3), np.uint8), np.zeros((4, 4), np.uint8))
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "images" / "b.png")
    with pytest.raises(DatasetError, match="missing mask"):
        DatasetIndex.from_root(tmp_path, 32)


def test_undecodable_file_fails_or_skips(tmp_path):
    _write_pair(tmp_path, "a", np.zeros((8, 8, 3), np.uint8), np.zeros((8, 8), np.uint8))
    _write_pair(tmp_path, "b", np.zeros((8, 8, 3), np.uint8), np.zeros((8, 8), np.uint8))
    (tmp_path / "images" / "b.png").write_bytes(b"not an image")
    index = DatasetIndex.from_root(tmp_path, 32)
    with pytest.raises(DatasetError, match="'b'"):
        load_dataset(index)
    assert [s.image_id for s in load_dataset(index, skip_bad_files=True)] == ["a"]


def test_shuffled_order_is_seeded(blob_samples):
    def order(seed):
        it = iterate_batches(blob_samples, 4, seed)
        return [next(it).ids for _ in range(6)]

    assert order(3) == order(3)
    assert order(3) != order(4)


# --- training -----------------------------------------------------------------

def test_short_run_writes_outputs(tmp_path, blob_root):
    cfg = tiny_run_config()
    cfg.steps, cfg.checkpoint_every, cfg.debug = 30, 15, True
    cfg.optimizer.lr = 5e-3
    cfg.paths.train_data, cfg.paths.out_dir = str(blob_root / "train"), str(tmp_path / "run")
    result = train(cfg)
    out = tmp_path / "run"
    assert {p.name for p in out.iterdir()} >= {"config.json", "train_log.csv", "checkpoint.pt", "checkpoint_step15.pt"}
    rows = list(csv.reader(open(out / "train_log.csv")))
    assert rows[0] == ["step", "bce", "iou", "total"] and len(rows) == 31
    assert result.frozen_before == result.frozen_after
    assert result.losses[-1][2] < result.losses[0][2]

    # rerunning from the echoed config reproduces the log
    again = RunConfig.load(out / "config.json")
    again.paths.out_dir = str(tmp_path / "rerun")
    train(again)
    assert (tmp_path / "rerun" / "train_log.csv").read_bytes() == (out / "train_log.csv").read_bytes()


def test_alpha_zero_matches_adapter_only(blob_samples):
    zero = tiny_run_config(alpha_mode="zero")
    plain = tiny_run_config(n_sources=0)
    for cfg in (zero, plain):
        cfg.steps = 8
    a = train(zero, blob_samples, write=False).losses
    b = train(plain, blob_samples, write=False).losses
    assert a == b


def test_non_finite_loss_aborts(blob_samples):
    bad = [dataclasses.replace(s) for s in blob_samples]
    bad[0] = dataclasses.replace(bad[0], image=torch.full_like(bad[0].image, float("nan")))
    cfg = tiny_run_config()
    cfg.batch_size = len(bad)
    with pytest.raises(TrainingError, match="non-finite"):
        train(cfg, bad, write=False)


def test_empty_trainable_set_is_config_error():
    cfg = tiny_run_config()
    backbone = build_backbone(cfg.backbone)
    with pytest.raises(ConfigError, match="no trainable"):
        make_optimizer(backbone, freeze_partition(backbone), cfg)


# --- checkpoints, evaluation, prediction ---------------------------------------

@pytest.fixture(scope="module")
def trained(tmp_path_factory, blob_root):
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_run_config()
    cfg.steps = 5
    cfg.paths.train_data, cfg.paths.out_dir = str(blob_root / "train"), str(out)
    return train(cfg), out


def test_checkpoint_round_trip_bit_identical(trained, blob_samples):
    result, out = trained
    ck = load_checkpoint(out / "checkpoint.pt")
    assert ck.step == 5 and ck.optimizer_state is not None
    assert torch.equal(
        torch.stack([torch.from_numpy(p) for p in predict_samples(result.model, blob_samples[:3])]),
        torch.stack([torch.from_numpy(p) for p in predict_samples(ck.model, blob_samples[:3])]),
    )


def test_corrupt_checkpoint(tmp_path, trained):
    (tmp_path / "bad.pt").write_bytes(b"garbage")
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "bad.pt")
    blob = torch.load(trained[1] / "checkpoint.pt", weights_only=True)
    blob["format_version"] = 99
    torch.save(blob, tmp_path / "v99.pt")
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v99.pt")


def test_evaluate_is_deterministic_and_consistent(trained, blob_root, tmp_path):
    _, out = trained
    a = evaluate(out / "checkpoint.pt", blob_root / "test", tmp_path / "eval")
    b = evaluate(out / "checkpoint.pt", blob_root / "test")
    assert a.to_dict() == b.to_dict()
    report = json.loads((tmp_path / "eval" / "report.json").read_text())
    assert report["n_images"] == 4
    with open(tmp_path / "eval" / "fm_curve.csv") as fh:
        assert max(float(r["f"]) for r in csv.DictReader(fh)) == report["max_f"]


def test_ground_truth_as_prediction(blob_samples):
    gts = [s.gt.numpy() for s in blob_samples]
    report = evaluate_predictions([g.astype(float) for g in gts], gts)
    assert report.mae == 0 and report.max_f == 1


def test_rounding_rule():
    assert (to_uint8(np.full((3, 3), 0.5)) == 128).all()
    assert to_uint8(np.array([0.0, 1.0, 0.2])).tolist() == [0, 255, 51]


def test_predict_size_and_determinism(trained, tmp_path):
    _, out = trained
    img = np.random.default_rng(0).integers(0, 256, (45, 70, 3), dtype=np.uint8)
    Image.fromarray(img).save(tmp_path / "in.png")
    predict(out / "checkpoint.pt", tmp_path / "in.png", tmp_path / "a.png")
    predict(out / "checkpoint.pt", tmp_path / "in.png", tmp_path / "b.png")
    with Image.open(tmp_path / "a.png") as im:
        assert im.size == (70, 45) and im.mode == "L"
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    with pytest.raises(OSError, match="missing.png"):
        predict(out / "checkpoint.pt", tmp_path / "missing.png", tmp_path / "c.png")


# --- CLI ----------------------------------------------------------------------

def test_cli_end_to_end(tmp_path, capsys):
    assert main(["make-corpus", "--out", str(tmp_path / "data"), "--n", "6", "--size", "32"]) == 0
    cfg = tiny_run_config()
    cfg.write(tmp_path / "cfg.json")
    run = tmp_path / "run"
    assert main(["train", "--config", str(tmp_path / "cfg.json"), "--data", str(tmp_path / "data"),
                 "--out", str(run), "--steps", "2"]) == 0
    assert main(["evaluate", "--checkpoint", str(run / "checkpoint.pt"), "--data", str(tmp_path / "data"),
                 "--out", str(tmp_path / "eval")]) == 0
    assert main(["curves", "--report", str(tmp_path / "eval" / "report.json"), "--out", str(tmp_path / "curves")]) == 0
    assert (tmp_path / "curves" / "pr_curve.csv").exists()
    image = next((tmp_path / "data" / "images").iterdir())
    assert main(["predict", "--checkpoint", str(run / "checkpoint.pt"), "--image", str(image),
                 "--out", str(tmp_path / "p.png")]) == 0
    capsys.readouterr()
    assert main(["params", "--config", str(tmp_path / "cfg.json"), "--json"]) == 0
    counts = json.loads(capsys.readouterr().out)
    assert counts["total"] == sum(counts["groups"].values())


def test_cli_reports_errors(tmp_path, capsys):
    (tmp_path / "cfg.json").write_text(json.dumps({"bogus": 1}))
    assert main(["params", "--config", str(tmp_path / "cfg.json")]) == 1
    assert "bogus" in capsys.readouterr().err
