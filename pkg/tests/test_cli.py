"""End-to-end command line behavior: chains, exit codes, manifests."""

import json

import numpy as np
import pytest

from stationcast import data as dt
from stationcast.cli import main
from stationcast.data import StationMeta, WeatherSeriesDataset


def _tiny_model_json(path, epochs=2, seed=1):
    doc = {
        "model": {
            "w_in": 6, "w_out": 3,
            "blocks": [{"cheb_order": 2, "temporal_kernels": [3],
                        "channels_in": 1, "channels_out": 2}],
            "d_emb": 2,
        },
        "train": {"epochs": epochs, "batch_size": 32, "seed": seed},
    }
    path.write_text(json.dumps(doc))
    return path


def test_synth_is_deterministic(tmp_path):
    a, b = tmp_path / "a.w2kt", tmp_path / "b.w2kt"
    args = ["synth", "--n", "5", "--t", "100", "--d", "1", "--seed", "1"]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    manifest = json.loads((tmp_path / "a.w2kt.manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 1
    assert manifest["config"]["n"] == 5
    assert manifest["wall_time_s"] >= 0.0


def test_unknown_flag_exits_1(capsys):
    assert main(["synth", "--bogus", "1"]) == 1
    assert "usage" in capsys.readouterr().err


def test_no_subcommand_exits_1():
    assert main([]) == 1


def test_help_exits_0():
    assert main(["--help"]) == 0


def test_full_smoke_chain(tmp_path):
    data = tmp_path / "synth.w2kt"
    graphs = tmp_path / "graphs.json"
    ckpt = tmp_path / "model.ckpt"
    history = tmp_path / "history.jsonl"
    metrics = tmp_path / "metrics.json"
    cfg = _tiny_model_json(tmp_path / "model.json")

    assert main(["synth", "--n", "6", "--t", "160", "--d", "1",
                 "--seed", "3", "--out", str(data)]) == 0
    assert main(["graphs", "--data", str(data), "--n-adjacent", "3",
                 "--out", str(graphs)]) == 0
    assert main(["train", "--data", str(data), "--graphs", str(graphs),
                 "--factor", "t", "--config", str(cfg),
                 "--out", str(ckpt), "--history", str(history)]) == 0
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(data),
                 "--graphs", str(graphs), "--out", str(metrics)]) == 0

    doc = json.loads(metrics.read_text())
    assert doc["space"] == "normalized"
    assert doc["overall"]["mae"] > 0.0
    assert len(doc["per_factor"]["t"]["mae_by_horizon"]) == 3

    lines = [json.loads(l) for l in history.read_text().splitlines()]
    assert len(lines) == 3  # two epochs plus the summary line
    assert lines[0]["epoch"] == 1
    assert "best_epoch" in lines[-1]

    for out in (data, graphs, ckpt, metrics):
        assert (tmp_path / (out.name + ".manifest.json")).exists()


def test_eval_baseline_and_pred_agree(tmp_path):
    data = tmp_path / "synth.w2kt"
    assert main(["synth", "--n", "5", "--t", "120", "--d", "1",
                 "--seed", "4", "--out", str(data)]) == 0
    m1 = tmp_path / "base.json"
    preds = tmp_path / "preds.bin"
    assert main(["eval", "--baseline", "persistence", "--data", str(data),
                 "--factor", "t", "--wprime", "6", "--w", "3",
                 "--save-pred", str(preds), "--out", str(m1)]) == 0
    m2 = tmp_path / "scored.json"
    assert main(["eval", "--pred", str(preds), "--data", str(data),
                 "--out", str(m2)]) == 0
    a = json.loads(m1.read_text())["overall"]
    b = json.loads(m2.read_text())["overall"]
    assert a["mae"] == pytest.approx(b["mae"], rel=1e-12)
    assert a["rmse"] == pytest.approx(b["rmse"], rel=1e-12)


def test_eval_requires_exactly_one_mode(tmp_path):
    data = tmp_path / "synth.w2kt"
    assert main(["synth", "--n", "5", "--t", "80", "--d", "1",
                 "--seed", "5", "--out", str(data)]) == 0
    out = tmp_path / "m.json"
    assert main(["eval", "--data", str(data), "--out", str(out)]) == 1
    assert main(["eval", "--data", str(data), "--baseline", "persistence",
                 "--ckpt", "x.ckpt", "--out", str(out)]) == 1
    assert main(["eval", "--data", str(data), "--baseline", "psychic",
                 "--out", str(out)]) == 1


def test_missing_input_exits_1(tmp_path):
    out = tmp_path / "g.json"
    code = main(["graphs", "--data", str(tmp_path / "nope.w2kt"),
                 "--out", str(out)])
    assert code == 1
    assert not out.exists()


def test_runtime_failure_exits_2(tmp_path):
    # a constant factor makes train-split normalization impossible
    stations = [StationMeta(f"S{i}", 35.0, 110.0 + 0.1 * i)
                for i in range(4)]
    values = np.full((4, 60, 1), 7.5)
    ds = WeatherSeriesDataset(stations, ["t"], values,
                              np.ones((4, 60, 1), dtype=bool))
    data = tmp_path / "flat.w2kt"
    dt.save_dataset(ds, data)
    code = main(["eval", "--baseline", "persistence", "--data", str(data),
                 "--factor", "t", "--wprime", "6", "--w", "3",
                 "--out", str(tmp_path / "m.json")])
    assert code == 2


def test_env_var_resolves_relative_paths(tmp_path, monkeypatch):
    monkeypatch.setenv("STATIONCAST_DATA_DIR", str(tmp_path))
    assert main(["synth", "--n", "5", "--t", "80", "--d", "1",
                 "--seed", "6", "--out", "rel.w2kt"]) == 0
    assert (tmp_path / "rel.w2kt").exists()
    assert main(["graphs", "--data", "rel.w2kt", "--n-adjacent", "2",
                 "--out", "rel_graphs.json"]) == 0
    assert (tmp_path / "rel_graphs.json").exists()


def test_env_var_resolves_checkpoint_graphs_path(tmp_path, monkeypatch):
    # train with relative paths so the checkpoint stores a relative graphs
    # path, then eval from another cwd with only the env var to find it
    work = tmp_path / "artifacts"
    work.mkdir()
    monkeypatch.chdir(work)
    assert main(["synth", "--n", "5", "--t", "80", "--d", "1",
                 "--seed", "6", "--out", "d.w2kt"]) == 0
    assert main(["graphs", "--data", "d.w2kt", "--n-adjacent", "2",
                 "--out", "g.json"]) == 0
    cfg = work / "cfg.json"
    _tiny_model_json(cfg)
    assert main(["train", "--data", "d.w2kt", "--graphs", "g.json",
                 "--config", str(cfg), "--out", "m.ckpt",
                 "--history", "h.jsonl"]) == 0
    elsewhere = tmp_path / "elsewhere"
    elsewhere.mkdir()
    monkeypatch.chdir(elsewhere)
    monkeypatch.setenv("STATIONCAST_DATA_DIR", str(work))
    assert main(["eval", "--data", "d.w2kt", "--ckpt", "m.ckpt",
                 "--out", "m_metrics.json"]) == 0
    assert (work / "m_metrics.json").exists()
    assert not (elsewhere / "m_metrics.json").exists()


def test_commands_do_not_mutate_inputs(tmp_path):
    data = tmp_path / "synth.w2kt"
    assert main(["synth", "--n", "5", "--t", "90", "--d", "1",
                 "--seed", "7", "--out", str(data)]) == 0
    before = data.read_bytes()
    assert main(["graphs", "--data", str(data), "--n-adjacent", "2",
                 "--out", str(tmp_path / "g.json")]) == 0
    assert data.read_bytes() == before


def test_preprocess_screens_and_fills(tmp_path):
    rng = np.random.default_rng(8)
    stations = [StationMeta(f"S{i}", 35.0 + 0.1 * i, 110.0) for i in range(4)]
    values = rng.normal(0.0, 1.0, (4, 200, 2))
    mask = np.ones((4, 200, 2), dtype=bool)
    # station 0: 5% missing records -> dropped; station 1: a few gaps, kept
    mask[0, :10, 0] = False
    mask[1, 50:51, 1] = False
    values[~mask] = np.nan
    # station 2: visibility default code on 4% of steps -> dropped
    values[2, :8, 1] = 999999.0
    ds = WeatherSeriesDataset(stations, ["t", "vv"], values, mask)
    raw = tmp_path / "raw.w2kt"
    dt.save_dataset(ds, raw)

    clean = tmp_path / "clean.w2kt"
    assert main(["preprocess", "--data", str(raw),
                 "--out", str(clean)]) == 0
    out = dt.load_dataset(clean)
    assert [s.station_id for s in out.stations] == ["S1", "S3"]
    assert out.mask.all()
    assert np.isfinite(out.values).all()
    manifest = json.loads((tmp_path / "clean.w2kt.manifest.json")
                          .read_text())
    assert manifest["config"]["missing_report"]["dropped"] == ["S0"]
    assert manifest["config"]["default_report"]["dropped"] == ["S2"]


def test_ablate_and_sweep_small(tmp_path):
    data = tmp_path / "synth.w2kt"
    cfg = _tiny_model_json(tmp_path / "model.json", epochs=1)
    assert main(["synth", "--n", "6", "--t", "120", "--d", "1",
                 "--seed", "9", "--out", str(data)]) == 0

    ablation = tmp_path / "ablation.json"
    assert main(["ablate", "--data", str(data), "--grid", "singles",
                 "--seeds", "0", "--config", str(cfg),
                 "--n-adjacent", "2", "--out", str(ablation)]) == 0
    doc = json.loads(ablation.read_text())
    assert len(doc["rows"]) == 5
    assert doc["reference_full_scale"]["five_graph"]["rmse"] == 2.0574

    sweep = tmp_path / "sweep.json"
    assert main(["sweep", "--data", str(data), "--counts", "2,3",
                 "--config", str(cfg), "--out", str(sweep)]) == 0
    curve = json.loads(sweep.read_text())
    assert curve["n_adjacent"] == [2, 3]
    assert len(curve["test_mae"]) == 2


def test_train_flag_overrides_config(tmp_path):
    data = tmp_path / "synth.w2kt"
    graphs = tmp_path / "g.json"
    cfg = _tiny_model_json(tmp_path / "model.json", epochs=5, seed=1)
    assert main(["synth", "--n", "5", "--t", "100", "--d", "1",
                 "--seed", "10", "--out", str(data)]) == 0
    assert main(["graphs", "--data", str(data), "--n-adjacent", "2",
                 "--out", str(graphs)]) == 0
    ckpt = tmp_path / "m.ckpt"
    hist = tmp_path / "h.jsonl"
    assert main(["train", "--data", str(data), "--graphs", str(graphs),
                 "--config", str(cfg), "--epochs", "1", "--seed", "2",
                 "--out", str(ckpt), "--history", str(hist)]) == 0
    lines = hist.read_text().splitlines()
    assert len(lines) == 2  # one epoch, one summary: flag beat the file
    manifest = json.loads((tmp_path / "m.ckpt.manifest.json").read_text())
    assert manifest["config"]["train_config"]["epochs"] == 1
    assert manifest["config"]["train_config"]["seed"] == 2
    assert manifest["seed"] == 2
    assert str(data) in manifest["input_hashes"]
