import csv
import json

import numpy as np
import pytest

from shiftforge import autodiff as ad
from shiftforge.autodiff import Tensor
from shiftforge.training import (
    SGD,
    RunLog,
    TrainingDiverged,
    ablate,
    ablation_table,
    load_checkpoint,
    sgd_step,
    train,
)
from shiftforge.models import build_model


def scalar_param(value=1.0):
    return Tensor(np.array([value], np.float32), requires_grad=True, name="p")


def test_sgd_single_step():
    p = scalar_param()
    opt = SGD([p], momentum=0.0)
    p.grad = np.ones(1, np.float32)
    opt.step(0.1)
    assert p.data[0] == pytest.approx(0.9)


def test_sgd_momentum_two_steps():
    p = scalar_param()
    opt = SGD([p], momentum=0.9)
    for _ in range(2):
        p.grad = np.ones(1, np.float32)
        opt.step(0.1)
    assert 1.0 - p.data[0] == pytest.approx(0.29, abs=1e-6)


def test_sgd_validation():
    p = scalar_param()
    with pytest.raises(ValueError):
        SGD([p], 0.9).step(0.0)
    with pytest.raises(ValueError):
        SGD([p, scalar_param()])


def test_quantized_step_changes_latents_only_through_crossings(tiny_cfg, rng):
    cfg = tiny_cfg.replace(lr=1e-3)
    model = build_model(cfg.model_spec(), 0)
    opt = SGD(model.parameters(), cfg.momentum)
    layer = model.layers["fc2"]
    before_lat = [lat.data.copy() for lat in layer.weight_latents()]
    before_w = layer.effective_values()
    x = rng.normal(size=(32, 1, 28, 28)).astype(np.float32)
    sgd_step(model, opt, x, rng.integers(0, 10, 32), cfg.lr, cfg)
    after_lat = [lat.data for lat in layer.weight_latents()]
    assert any(not np.array_equal(a, b) for a, b in zip(before_lat, after_lat))
    crossed = np.zeros(before_w.shape, bool)
    for a, b in zip(before_lat, after_lat):
        crossed |= (a > 0) != (b > 0)
    changed = layer.effective_values() != before_w
    assert not np.any(changed & ~crossed)


def test_nan_aborts(tiny_cfg, rng):
    model = build_model(tiny_cfg.model_spec(), 0)
    opt = SGD(model.parameters(), 0.9)
    x = rng.normal(size=(4, 1, 28, 28)).astype(np.float32)
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged):
        sgd_step(model, opt, x, np.arange(4), 0.1, tiny_cfg)


def test_run_log_is_append_only():
    log = RunLog()
    log.append({"epoch": 1})
    with pytest.raises(ValueError):
        log.append({"epoch": 1})


def test_train_outputs_and_learning(tiny_cfg):
    res = train(tiny_cfg)
    out = res.output_dir
    for name in ("config.toml", "runlog.csv", "runlog.json", "metrics.csv", "histograms.json", "checkpoint.npz"):
        assert (out / name).exists(), name
    assert sorted(p.name for p in (out / "snapshots").iterdir()) == ["epoch_0000.npz", "epoch_0001.npz",
                                                                      "epoch_0002.npz"]
    rows = res.log.rows
    assert [r["epoch"] for r in rows] == [1, 2]
    assert rows[0]["lr"] == tiny_cfg.lr and rows[1]["lr"] == pytest.approx(tiny_cfg.lr / 2)
    assert rows[-1]["test_top1"] > 50.0
    assert rows[-1]["test_top5"] >= rows[-1]["test_top1"]
    assert res.record.epochs == [0, 1, 2]
    assert res.record.wlvr["fc2"][0] == 0.0  # dense prior: no zero weights at init
    assert res.log.summary["epochs_completed"] == 2
    with open(out / "runlog.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 2


def test_train_is_deterministic(tiny_cfg, tmp_path):
    a = train(tiny_cfg.replace(epochs=1, output_dir=str(tmp_path / "a")))
    b = train(tiny_cfg.replace(epochs=1, output_dir=str(tmp_path / "b")))
    strip = lambda rows: [{k: v for k, v in r.items() if k != "seconds"} for r in rows]  # noqa: E731
    assert strip(a.log.rows) == strip(b.log.rows)
    for k, v in a.model.state_arrays().items():
        np.testing.assert_array_equal(v, b.model.state_arrays()[k])


def test_resume_is_bitwise_identical(tiny_cfg, tmp_path):
    full = train(tiny_cfg.replace(output_dir=str(tmp_path / "full")))
    part_cfg = tiny_cfg.replace(output_dir=str(tmp_path / "part"))
    train(part_cfg, stop_after=1)
    resumed = train(part_cfg, resume=tmp_path / "part" / "checkpoint.npz")
    for k, v in full.model.state_arrays().items():
        np.testing.assert_array_equal(v, resumed.model.state_arrays()[k], err_msg=k)
    assert [r["train_loss"] for r in full.log.rows] == [r["train_loss"] for r in resumed.log.rows]
    assert full.record.wsvr == resumed.record.wsvr


def test_checkpoint_roundtrip_and_rejection(tiny_cfg, tmp_path):
    res = train(tiny_cfg.replace(epochs=1))
    ck = load_checkpoint(res.output_dir / "checkpoint.npz")
    assert ck["config"] == tiny_cfg.replace(epochs=1)
    assert ck["meta"]["modes"] == {"fc1": "fp32", "fc2": "s3_shift"}
    for k, v in res.model.state_arrays().items():
        np.testing.assert_array_equal(v, ck["model"].state_arrays()[k])
    bogus = tmp_path / "bogus.npz"
    np.savez(bogus, x=np.zeros(1))
    with pytest.raises(ValueError):
        load_checkpoint(bogus)


def test_ablate_validation(tiny_cfg):
    with pytest.raises(ValueError):
        ablate(tiny_cfg, {})
    with pytest.raises(ValueError):
        ablate(tiny_cfg, {"alpha": []})
    with pytest.raises(ValueError):
        ablate(tiny_cfg, {"batch": [1]})


def test_small_ablation(tiny_cfg):
    cfg = tiny_cfg.replace(epochs=1, train_limit=128, test_limit=64)
    rows = ablate(cfg, {"alpha": [1e-3, 0.0], "mode": ["fp32", "s3_ternary"]})
    assert [(r["alpha"], r["mode"]) for r in rows] == [(1e-3, "fp32"), (1e-3, "s3_ternary"),
                                                       (0.0, "fp32"), (0.0, "s3_ternary")]
    root = cfg.output_dir
    with open(f"{root}/ablation.csv") as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == 4 and table[0]["mode"] == "fp32"
    md = open(f"{root}/ablation.md").read()
    assert md.startswith("| alpha \\ mode |")
    # fp32 runs ignore alpha, so both alpha values give identical results
    assert rows[0]["final_train_loss"] == rows[2]["final_train_loss"]


def test_ablation_table_single_axis():
    text = ablation_table([{"alpha": 1e-5, "final_test_top1": 97.123, "final_test_top5": None,
                            "final_train_loss": 0.05}], ["alpha"])
    assert "97.12" in text and "| 1e-05 |" in text and "0.0500" in text
