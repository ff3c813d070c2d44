import csv
import json

import numpy as np
import pytest

from snnrobust.data import synth_blobs, write_csv, write_idx
from snnrobust.experiment import (
    SWEEP_COLUMNS,
    ConfigError,
    ExperimentError,
    build_dataset,
    build_model,
    export_gradient_heatmap,
    export_gradient_histogram,
    lambda_sweep,
    load_config,
    run_experiment,
    zero_bin_mass,
)
from snnrobust.model import SnnModel
from snnrobust.vulnerability import ConstantModel

TINY = {
    "seed": 3,
    "dataset": {"source": "blobs", "n": 150, "dims": 8, "classes": 3, "spread": 0.15, "center_scale": 0.8},
    "model": {"hidden": [12]},
    "train": {"epochs": 2},
}


def _without_timing(path):
    d = json.loads(path.read_text())
    d.pop("timing")
    return d


def test_minimal_run_reports_clean_accuracy(tmp_path):
    res = run_experiment({**TINY, "train": {"epochs": 1}}, tmp_path)
    s = json.loads((tmp_path / "summary.json").read_text())
    assert s["spec_version"] == "1.0" and 0 <= s["clean_accuracy"] <= 1
    assert s["attacks"] == {} and s["errors"] == []
    assert {"data", "train", "evaluate", "train_epoch_mean"} <= set(s["timing"])
    for f in ("model.json", "trace.csv", "attacks.jsonl"):
        assert (tmp_path / f).exists()
    assert isinstance(SnnModel.load(tmp_path / "model.json"), SnnModel)
    assert len(res.trace) == 1


def test_runs_are_reproducible(tmp_path):
    cfg = {
        **TINY,
        "attacks": [{"family": "fgsm", "epsilon": 0.1}, {"family": "pgd", "epsilon": 0.1, "steps": 3, "ensemble": True}],
        "vulnerability": {"epsilon": 0.1, "n_samples": 200, "n_eval": 3, "gap_epsilons": [0.0, 0.1]},
    }
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    a, b = (tmp_path / "a" / "summary.json"), (tmp_path / "b" / "summary.json")
    assert json.dumps(_without_timing(a), sort_keys=True) == json.dumps(_without_timing(b), sort_keys=True)
    assert (tmp_path / "a" / "attacks.jsonl").read_bytes() == (tmp_path / "b" / "attacks.jsonl").read_bytes()
    s = _without_timing(a)
    assert set(s["attacks"]) == {"FGSM", "PGD3-ensemble"}
    assert s["vulnerability"]["bound_violations"] == 0
    rows = list(csv.DictReader(open(tmp_path / "a" / "gap.csv")))
    assert [float(r["epsilon"]) for r in rows] == [0.0, 0.1]


def test_ablation_four_rows(tmp_path):
    cfg = {**TINY, "train": {"epochs": 1}, "attacks": [{"family": "fgsm", "epsilon": 0.1}], "ablation": {"lam_sr": 0.1, "lam_sr_star": 0.05, "at_epsilon": 0.025}}
    run_experiment(cfg, tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "ablation.csv")))
    assert [r["method"] for r in rows] == ["vanilla", "AT", "SR", "SR*"]
    assert set(rows[0]) == {"method", "clean", "FGSM", "l1", "l2"}


def test_checkpoints_every_k_epochs(tmp_path):
    run_experiment({**TINY, "train": {"epochs": 4}, "checkpoint_every": 2}, tmp_path)
    assert (tmp_path / "model_epoch2.json").exists() and (tmp_path / "model_epoch4.json").exists()


def test_failure_keeps_partial_outputs(tmp_path, monkeypatch):
    from snnrobust import experiment

    def boom(*a, **k):
        raise RuntimeError("attack exploded")

    monkeypatch.setattr(experiment, "evaluate", boom)
    with pytest.raises(ExperimentError) as info:
        run_experiment(TINY, tmp_path)
    assert info.value.phase == "evaluate"
    s = json.loads((tmp_path / "summary.json").read_text())
    assert s["errors"][0]["phase"] == "evaluate"
    assert (tmp_path / "model.json").exists()


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    with pytest.raises(ConfigError):
        load_config({"dataset": {"source": "idx", "images": str(tmp_path / "nope"), "labels": str(tmp_path / "nope")}})
    with pytest.raises(Exception):
        load_config({"train": {"lam": -1}})
    with pytest.raises(ConfigError):
        build_dataset({"source": "parquet"}, 0)


def test_config_file_relative_paths(tmp_path):
    write_idx(tmp_path / "i.idx", np.zeros((6, 4, 4), dtype=np.uint8))
    write_idx(tmp_path / "l.idx", np.array([0, 1] * 3, dtype=np.uint8))
    (tmp_path / "c.json").write_text(json.dumps({"dataset": {"source": "idx", "images": "i.idx", "labels": "l.idx"}}))
    cfg = load_config(tmp_path / "c.json")
    tr, te = build_dataset(cfg["dataset"], 0)
    assert len(tr) + len(te) == 6
    m = build_model({"arch": "mlp", "hidden": [4], "timesteps": 2}, tr, 0)
    assert m.counts(tr.x).shape == (len(tr), 2)
    conv = build_model({"arch": "conv", "width": 2, "timesteps": 2}, tr, 0)
    assert conv.counts(tr.x).shape == (len(tr), 2)


def test_csv_and_frame_sources(tmp_path):
    write_csv(tmp_path / "d.csv", synth_blobs(20, 4, 2, 0.1, seed=0))
    tr, te = build_dataset({"source": "csv", "path": str(tmp_path / "d.csv")}, 0)
    assert tr.sample_shape == (4,)
    tr, _ = build_dataset({"source": "frames", "n": 20, "t_frames": 3, "dims": 5, "classes": 2}, 0)
    m = build_model({"arch": "mlp", "hidden": [4], "timesteps": 8}, tr, 0)
    assert m.timesteps == 3


def test_lambda_sweep(tmp_path):
    rows = lambda_sweep(TINY, [0.0, 0.3], tmp_path / "sweep.csv", {"family": "fgsm", "epsilon": 0.1})
    back = list(csv.DictReader(open(tmp_path / "sweep.csv")))
    assert tuple(back[0]) == SWEEP_COLUMNS and len(back) == 2
    assert [r["lambda"] for r in rows] == [0.0, 0.3]
    with pytest.raises(ConfigError):
        lambda_sweep(TINY, [])


def test_sweep_lambda_zero_equals_vanilla_run(tmp_path):
    rows = lambda_sweep(TINY, [0.0])
    res = run_experiment(TINY, tmp_path)
    assert rows[0]["clean_acc"] == res.summary["clean_accuracy"]


def test_histogram_unit_mass(desk_model, desk_data, tmp_path):
    _, te = desk_data
    rows = export_gradient_histogram(desk_model, te, 21, path=tmp_path / "h.csv")
    assert sum(m for _, _, m in rows) == pytest.approx(1.0, abs=1e-9)
    back = list(csv.DictReader(open(tmp_path / "h.csv")))
    assert list(back[0]) == ["bin_lo", "bin_hi", "mass"] and len(back) == 21
    with pytest.raises(ConfigError):
        export_gradient_histogram(desk_model, te, 1)


class _ConstantSnn(ConstantModel):
    def grad_fy(self, x, y=None, frames=False, **_):
        return super().grad_fy(x, y)


def test_histogram_constant_model_all_in_zero_bin(monkeypatch, desk_data):
    from snnrobust import experiment

    _, te = desk_data
    monkeypatch.setattr(experiment, "grad_fy_input", lambda m, x, y, frames=False: m.grad_fy(x, y))
    rows = export_gradient_histogram(_ConstantSnn(16), te, 11)
    assert zero_bin_mass(rows) == 1.0


def test_sr_concentrates_gradients_at_zero(desk_model, sr_model, desk_data):
    _, te = desk_data
    lim = 0.05
    van = zero_bin_mass(export_gradient_histogram(desk_model, te, 41, limit=lim))
    sr = zero_bin_mass(export_gradient_histogram(sr_model, te, 41, limit=lim))
    assert sr > van


def test_heatmap(desk_model, desk_data, tmp_path):
    _, te = desk_data
    grid = export_gradient_heatmap(desk_model, te.x[0], te.y[0], path=tmp_path / "g.csv")
    assert grid.shape == (1, 16) and np.all(grid >= 0)
    np.testing.assert_allclose(np.loadtxt(tmp_path / "g.csv", delimiter=",", ndmin=2), grid, rtol=1e-6)


def test_heatmap_image_shape_and_zero_sample():
    from snnrobust.model import small_conv

    m = small_conv(2, 8, 4, 3, width_mult=2, timesteps=2, seed=0, gain=2.0)
    x = np.random.default_rng(0).random((2, 8, 4))
    assert export_gradient_heatmap(m, x, 1).shape == (8, 4)
    for p in m.params():
        p.data[...] = 0
    np.testing.assert_array_equal(export_gradient_heatmap(m, x, 1), 0.0)


def test_sr_heatmap_sparser(desk_model, sr_model, desk_data):
    _, te = desk_data
    thr = 1e-3
    van = sum((export_gradient_heatmap(desk_model, te.x[i], te.y[i]) < thr).sum() for i in range(len(te)))
    sr = sum((export_gradient_heatmap(sr_model, te.x[i], te.y[i]) < thr).sum() for i in range(len(te)))
    assert sr > van
