import json

import numpy as np
import pytest

from stcsnn.cli import main
from stcsnn.compress import FrameTensor
from stcsnn.config import RunConfig
from stcsnn.errors import ConfigError
from stcsnn.events import encode_nmnist_bin, synth_two_class
from stcsnn.network import load_checkpoint, parse_arch, save_checkpoint
from stcsnn.train import init_model

SYNTH = {
    "dataset": {"kind": "synthetic", "width": 16, "height": 16, "limit_train": 40, "limit_test": 20,
                "duration": 10000, "rate": 1e-4},
    "model": {"arch": "8SC3-AP2-16FC-2Voting", "T": 2, "desired_count": 15},
    "optim": {"lr": 1e-3, "batch": 16, "epochs": 2, "seed": 0},
}


def write_config(tmp_path, data, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def with_changes(**sections):
    data = json.loads(json.dumps(SYNTH))
    for sec, values in sections.items():
        data.setdefault(sec, {}).update(values)
    return data


def test_config_defaults():
    cfg = RunConfig()
    h = cfg.hyper
    assert (h.V_th, h.S_max, h.alpha_H, h.alpha_W, cfg.model.N_r) == (10.0, 15, 1.0, 20.0, 8)
    assert (cfg.optim.lr, cfg.optim.batch, cfg.optim.epochs) == (2e-4, 64, 50)


def test_config_round_trip():
    cfg = RunConfig.from_dict(SYNTH)
    again = RunConfig.from_json(cfg.to_json())
    assert again == cfg and again.to_json() == cfg.to_json()


@pytest.mark.parametrize("data", [
    {"optim": {"lrr": 0.1}},
    {"extra": {}},
    {"optim": {"lr": "fast"}},
    {"model": {"T": 0}},
    {"model": {"arch": "8SC3-AP2"}},
    {"model": {"use_synaptic_block": 1}},
    {"hyper": {"V_th": -1}},
    {"dataset": {"kind": "nmnist"}},
])
def test_config_rejects(data):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(data)


def test_unknown_key_exits_1(tmp_path, capsys):
    assert main(["train", "--config", write_config(tmp_path, {"optim": {"lrr": 1}}), "--out",
                 str(tmp_path / "o")]) == 1
    assert "lrr" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_compress_empty_csv(tmp_path, capsys):
    (tmp_path / "a.csv").write_text("# nothing\n")
    assert main(["compress", str(tmp_path / "a.csv"), "-o", str(tmp_path / "out"), "--width", "4",
                 "--height", "3"]) == 0
    f = FrameTensor.from_bytes((tmp_path / "out" / "a.frames").read_bytes())
    assert f.shape == (2, 2, 3, 4) and not f.data.any()


def test_compress_nmnist_sample(tmp_path, capsys):
    src = tmp_path / "in"
    src.mkdir()
    (src / "00002.bin").write_bytes(encode_nmnist_bin(synth_two_class(1, 34, 34, 300000, 1e-5, seed=2)))
    args = ["compress", str(src), "-o", str(tmp_path / "out"), "--baseline-frames", "19.2"]
    assert main(args) == 0
    out = capsys.readouterr().out
    assert "shape: [2, 2, 34, 34]" in out and "N_r: 8" in out and "10.4167%" in out
    first = (tmp_path / "out" / "00002.frames").read_bytes()
    assert main(args) == 0
    assert (tmp_path / "out" / "00002.frames").read_bytes() == first


def test_compress_corrupt_input_names_file_and_record(tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(bytes([1, 1, 0, 0, 1]) + bytes([200, 1, 0, 0, 2]))
    assert main(["compress", str(bad), "-o", str(tmp_path / "out")]) == 2
    err = capsys.readouterr().err
    assert "bad.bin" in err and "record 1" in err


def test_train_zero_epochs(tmp_path, capsys):
    cfg = write_config(tmp_path, with_changes(optim={"epochs": 0}))
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "train.log").read_text() == ""
    model, state = load_checkpoint(tmp_path / "r" / "checkpoint.stck")
    fresh = init_model(parse_arch(SYNTH["model"]["arch"], 2), (2, 16, 16), 0)
    assert all(np.array_equal(model.params[n], fresh.params[n]) for n in fresh.params)
    assert state["epoch"] == 0


def test_train_log_and_eval(tmp_path, capsys):
    cfg = write_config(tmp_path, SYNTH)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    lines = (tmp_path / "r" / "train.log").read_text().splitlines()
    assert [len(l.split("\t")) for l in lines] == [5, 5]
    assert [l.split("\t")[0] for l in lines] == ["0", "1"]
    capsys.readouterr()

    ckpt = str(tmp_path / "r" / "checkpoint.stck")
    assert main(["eval", ckpt, "--config", cfg]) == 0
    first = capsys.readouterr().out
    assert main(["eval", ckpt, "--config", cfg]) == 0
    assert capsys.readouterr().out == first
    rows = [list(map(int, l.split())) for l in first.splitlines()[3:]]
    labels = synthetic_test_labels(cfg)
    assert [sum(r) for r in rows] == np.bincount(labels, minlength=2).tolist()


def synthetic_test_labels(cfg_path):
    from stcsnn.datasets import synthetic_streams
    d = RunConfig.load(cfg_path).dataset
    return synthetic_streams(d.limit_test, d.width, d.height, d.duration, d.rate, d.data_seed + 1)[1]


def test_eval_single_correct_sample(tmp_path, capsys):
    cfg = write_config(tmp_path, with_changes(dataset={"limit_train": 200}, optim={"epochs": 5}))
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    one = write_config(tmp_path, with_changes(dataset={"limit_test": 1}), "one.json")
    capsys.readouterr()
    assert main(["eval", str(tmp_path / "r" / "checkpoint.stck"), "--config", one]) == 0
    assert "accuracy: 1.000000" in capsys.readouterr().out


def test_eval_shape_mismatch(tmp_path, capsys):
    model = init_model(parse_arch("8SC3-AP2-16FC-2Voting", 2), (2, 8, 8), 0)
    save_checkpoint(tmp_path / "m.stck", model)
    assert main(["eval", str(tmp_path / "m.stck"), "--config", write_config(tmp_path, SYNTH)]) == 1


def test_train_resume_bit_identical(tmp_path):
    cfg2 = write_config(tmp_path, SYNTH, "two.json")
    cfg1 = write_config(tmp_path, with_changes(optim={"epochs": 1}), "one.json")
    assert main(["train", "--config", cfg2, "--out", str(tmp_path / "a"), "--precision", "64"]) == 0
    assert main(["train", "--config", cfg1, "--out", str(tmp_path / "b"), "--precision", "64"]) == 0
    assert main(["train", "--config", cfg2, "--out", str(tmp_path / "b"), "--precision", "64",
                 "--resume", str(tmp_path / "b" / "checkpoint.stck")]) == 0
    assert (tmp_path / "a" / "checkpoint.stck").read_bytes() == (tmp_path / "b" / "checkpoint.stck").read_bytes()
    mask = lambda p: [l.rsplit("\t", 1)[0] for l in p.read_text().splitlines()]
    assert mask(tmp_path / "a" / "train.log") == mask(tmp_path / "b" / "train.log")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_non_finite_exits_3(tmp_path, capsys):
    cfg = write_config(tmp_path, with_changes(optim={"lr": 1e308, "epochs": 3}))
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 3
    assert "non-finite" in capsys.readouterr().err


def test_train_csv_dataset(tmp_path, capsys):
    root = tmp_path / "data"
    for split, n in (("Train", 6), ("Test", 2)):
        for label in (0, 1):
            d = root / split / str(label)
            d.mkdir(parents=True)
            for k in range(n):
                s = synth_two_class(label, 8, 8, 1000, 1e-3, seed=[label, k, len(split)])
                (d / f"{k}.csv").write_text("".join(f"{e.x},{e.y},{e.t},{e.p}\n" for e in s))
    data = {"dataset": {"kind": "csv", "path": str(root), "width": 8, "height": 8},
            "model": {"arch": "2SC3-AP2-4FC-2Voting"}, "optim": {"epochs": 1, "batch": 4}}
    assert main(["train", "--config", write_config(tmp_path, data), "--out", str(tmp_path / "r")]) == 0
    assert len((tmp_path / "r" / "train.log").read_text().splitlines()) == 1


def test_gradcheck_default_and_fault(capsys):
    assert main(["gradcheck"]) == 0
    assert capsys.readouterr().out.strip().endswith("PASS")
    assert main(["gradcheck", "--perturb", "2.weight"]) == 3
    assert "FAIL: 2.weight" in capsys.readouterr().out


def test_gradcheck_conv_only(capsys):
    assert main(["gradcheck", "--arch", "2C3-AP2-2Voting"]) == 0
    out = capsys.readouterr().out
    assert " fd " in out and " oracle " not in out


def test_tau_stats(tmp_path, capsys):
    model = init_model(parse_arch("2SC3-AP2-6FC-4FC-2Voting", 2), (2, 4, 4), 0)
    save_checkpoint(tmp_path / "m.stck", model)
    assert main(["tau-stats", str(tmp_path / "m.stck")]) == 0
    out = capsys.readouterr().out
    assert out.count("layer ") == 2
    assert "layer 2: count 6 mean 0.500000 std 0.000000" in out
    assert "[0.50, 0.55)\t6" in out and "[0.50, 0.55)\t4" in out


def test_tau_stats_after_training(tmp_path, capsys):
    cfg = write_config(tmp_path, SYNTH)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    capsys.readouterr()
    assert main(["tau-stats", str(tmp_path / "r" / "checkpoint.stck")]) == 0
    head = capsys.readouterr().out.splitlines()[0].split()
    mean, std = float(head[5]), float(head[7])
    assert 0 < mean < 1 and np.isfinite(std)


def test_tau_stats_without_dense_layers(tmp_path, capsys):
    save_checkpoint(tmp_path / "c.stck", init_model(parse_arch("2C3-AP2-2Voting", 1), (2, 4, 4), 0))
    assert main(["tau-stats", str(tmp_path / "c.stck")]) == 0
    assert "no PMLIF layers" in capsys.readouterr().out


def test_train_nmnist_layout_with_crop(tmp_path):
    root = tmp_path / "nmnist"
    for split in ("Train", "Test"):
        for label in range(3):
            d = root / split / str(label)
            d.mkdir(parents=True)
            for k in range(2):
                s = synth_two_class(label % 2, 34, 34, 5000, 2e-4, seed=[label, k])
                (d / f"{k:05d}.bin").write_bytes(encode_nmnist_bin(s))
    data = {"dataset": {"kind": "nmnist", "path": str(root), "crop": [32, 32], "limit_train": 5},
            "model": {"arch": "4SC3-AP2-4C3-AP2-DP-8FC-3Voting"}, "optim": {"epochs": 1, "batch": 4}}
    assert main(["train", "--config", write_config(tmp_path, data), "--out", str(tmp_path / "r")]) == 0
    model, _ = load_checkpoint(tmp_path / "r" / "checkpoint.stck")
    assert model.input_shape == (2, 32, 32)
