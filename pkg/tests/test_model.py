"""Forecaster architecture, gradients, training loop, and checkpoints."""

import json
import struct

import numpy as np
import pytest

from stationcast import graphs as gr
from stationcast import model as md
from stationcast import tape as tp
from stationcast.data import StationMeta, WeatherSeriesDataset
from stationcast.errors import CheckpointError, ConfigError, TrainingError


def _static_graphs(n, rng):
    out = {}
    for kind in ("distance", "neighbor", "pattern"):
        a = rng.uniform(0.0, 1.0, (n, n))
        a = (a + a.T) / 2.0
        np.fill_diagonal(a, 0.0)
        out[kind] = a
    return out


def _tiny_config(w_in=6, w_out=3, channels=3, d_emb=4):
    return md.ModelConfig(
        w_in=w_in, w_out=w_out, d=1,
        blocks=[md.StBlockConfig(2, [3], 1, channels)],
        d_emb=d_emb)


def _tiny_dataset(n=5, t=120, seed=0):
    rng = np.random.default_rng(seed)
    stations = [StationMeta(f"S{i}", 35.0 + 0.1 * i, 110.0 + 0.05 * i)
                for i in range(n)]
    base = rng.normal(0.0, 1.0, (n, 1, 1))
    drift = np.sin(np.arange(t) / 7.0)[None, :, None]
    values = base + drift + 0.1 * rng.normal(0.0, 1.0, (n, t, 1))
    return WeatherSeriesDataset(stations, ["t"], values,
                                np.ones((n, t, 1), dtype=bool))


# ---------------------------------------------------------------------------
# configuration contracts


def test_default_config_shapes():
    cfg = md.ModelConfig()
    assert cfg.t_remaining == 6
    model = md.build_model(20, cfg, seed=1)
    rng = np.random.default_rng(2)
    inputs = rng.normal(0.0, 1.0, (3, 20, 12, 1))
    preds = md.forward(model, inputs, _static_graphs(20, rng))
    assert preds.shape == (3, 20, 12, 1)
    assert np.isfinite(preds).all()


def test_decreasing_cheb_order_rejected():
    with pytest.raises(ConfigError, match="non-decreasing"):
        md.ModelConfig(blocks=[md.StBlockConfig(3, [3], 1, 4),
                               md.StBlockConfig(2, [3], 4, 4)])


def test_decreasing_temporal_kernel_rejected():
    with pytest.raises(ConfigError, match="decreases"):
        md.ModelConfig(blocks=[md.StBlockConfig(2, [5], 1, 4),
                               md.StBlockConfig(2, [3], 4, 4)])


def test_kernel_exhausting_window_rejected():
    with pytest.raises(ConfigError, match="block 1"):
        md.ModelConfig(w_in=6, blocks=[md.StBlockConfig(1, [3], 1, 4),
                                       md.StBlockConfig(1, [5], 4, 4)])


def test_channel_chain_mismatch_rejected():
    with pytest.raises(ConfigError, match="channel mismatch"):
        md.ModelConfig(blocks=[md.StBlockConfig(1, [3], 1, 4),
                               md.StBlockConfig(1, [3], 8, 4)])


def test_even_kernel_rejected():
    with pytest.raises(ConfigError, match="odd"):
        md.StBlockConfig(1, [4], 1, 4)


def test_first_block_must_match_factor_count():
    with pytest.raises(ConfigError, match="input channels"):
        md.ModelConfig(d=2, blocks=[md.StBlockConfig(1, [3], 1, 4)])


def test_build_model_deterministic():
    cfg = _tiny_config()
    a = md.build_model(5, cfg, seed=7)
    b = md.build_model(5, cfg, seed=7)
    c = md.build_model(5, cfg, seed=8)
    assert sorted(a.params) == sorted(b.params)
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    assert any(a.params[k].tobytes() != c.params[k].tobytes()
               for k in a.params)


# ---------------------------------------------------------------------------
# block semantics


def test_identity_block_passes_projection():
    # order-1 filter with identity weights, identity temporal kernel and a
    # zeroed mixing layer leave only the residual projection
    rng = np.random.default_rng(3)
    n, t, c, b = 4, 5, 3, 2
    eye = np.eye(c)
    res = rng.normal(0.0, 1.0, (c, c))
    weights = {
        "block0_cheb": eye[None],
        "block0_branch0": eye[None],
        "block0_fuse": np.zeros((c, c)),
        "block0_fuse_bias": np.zeros(c),
        "block0_res": res,
    }
    blk = md.StBlockConfig(1, [1], c, c)
    x = rng.normal(0.0, 1.0, (b, n, t, c))
    lt = np.stack([np.eye(n)] * b)
    out = md.st_block_forward(tp.TapeTensor(x), blk, tp.TapeTensor(lt),
                              weights, "block0")
    expected = np.einsum("bntc,cf->bntf", x, res)
    np.testing.assert_allclose(out.values, expected, rtol=0, atol=1e-14)


def test_temporal_multibranch_matches_direct():
    rng = np.random.default_rng(4)
    m, t, c = 6, 11, 3
    kernels = [3, 5]
    x = rng.normal(0.0, 1.0, (m, t, c))
    ws = [rng.normal(0.0, 1.0, (k, c, c)) for k in kernels]
    fuse = rng.normal(0.0, 1.0, (len(kernels) * c, c))
    bias = rng.normal(0.0, 1.0, c)
    out = md.temporal_multibranch(x, kernels, ws, fuse, bias)

    t_out = t - max(kernels) + 1
    branches = []
    for k, w in zip(kernels, ws):
        conv = np.zeros((m, t - k + 1, c))
        for pos in range(t - k + 1):
            for j in range(k):
                conv[:, pos, :] += x[:, pos + j, :] @ w[j]
        lead = (max(kernels) - k) // 2
        branches.append(conv[:, lead:lead + t_out, :])
    expected = np.concatenate(branches, axis=2) @ fuse + bias
    np.testing.assert_allclose(out.values, expected, atol=1e-10)


def test_st_block_matches_slice_loop():
    rng = np.random.default_rng(5)
    n, t, c_in, c_out, b, order = 5, 9, 2, 3, 2, 3
    kernels = [3, 5]
    blk = md.StBlockConfig(order, kernels, c_in, c_out)
    weights = {
        "block0_cheb": rng.normal(0.0, 1.0, (order, c_in, c_out)),
        "block0_branch0": rng.normal(0.0, 1.0, (3, c_out, c_out)),
        "block0_branch1": rng.normal(0.0, 1.0, (5, c_out, c_out)),
        "block0_fuse": rng.normal(0.0, 1.0, (2 * c_out, c_out)),
        "block0_fuse_bias": rng.normal(0.0, 1.0, c_out),
        "block0_res": rng.normal(0.0, 1.0, (c_in, c_out)),
    }
    x = rng.normal(0.0, 1.0, (b, n, t, c_in))
    lt = np.zeros((b, n, n))
    for i in range(b):
        a = rng.uniform(0.0, 1.0, (n, n))
        a = (a + a.T) / 2.0
        np.fill_diagonal(a, 0.0)
        lt[i] = gr.scaled_laplacian(a).l_tilde

    out = md.st_block_forward(tp.TapeTensor(x), blk, tp.TapeTensor(lt),
                              weights, "block0")

    # oracle: spatial filter one time slice at a time, then direct convs
    spatial = np.zeros((b, n, t, c_out))
    for i in range(b):
        for s in range(t):
            spatial[i, :, s, :] = gr.cheb_filter(lt[i],
                                                 weights["block0_cheb"],
                                                 x[i, :, s, :])
    spatial = np.maximum(spatial, 0.0)
    t_out = t - max(kernels) + 1
    branches = []
    for name, k in (("block0_branch0", 3), ("block0_branch1", 5)):
        w = weights[name]
        conv = np.zeros((b, n, t - k + 1, c_out))
        for pos in range(t - k + 1):
            for j in range(k):
                conv[:, :, pos, :] += spatial[:, :, pos + j, :] @ w[j]
        lead = (max(kernels) - k) // 2
        branches.append(conv[:, :, lead:lead + t_out, :])
    temporal = np.concatenate(branches, axis=3) @ weights["block0_fuse"] \
        + weights["block0_fuse_bias"]
    lead = (max(kernels) - 1) // 2
    residual = np.einsum("bntc,cf->bntf", x[:, :, lead:lead + t_out, :],
                         weights["block0_res"])
    np.testing.assert_allclose(out.values, temporal + residual, atol=1e-10)


# ---------------------------------------------------------------------------
# full forward


def test_forward_permutation_equivariance():
    rng = np.random.default_rng(6)
    n = 6
    cfg = _tiny_config()
    model = md.build_model(n, cfg, seed=11)
    static = _static_graphs(n, rng)
    inputs = rng.normal(0.0, 1.0, (3, n, cfg.w_in, 1))
    base = md.forward(model, inputs, static)

    perm = rng.permutation(n)
    pmodel = md.permute_nodes(model, perm)
    pstatic = {k: v[np.ix_(perm, perm)] for k, v in static.items()}
    ppreds = md.forward(pmodel, inputs[:, perm], pstatic)
    np.testing.assert_allclose(ppreds, base[:, perm], atol=1e-9)


def test_identical_windows_identical_predictions():
    rng = np.random.default_rng(7)
    n = 5
    cfg = _tiny_config()
    model = md.build_model(n, cfg, seed=3)
    win = rng.normal(0.0, 1.0, (n, cfg.w_in, 1))
    batch = np.stack([win, win, win])
    preds = md.forward(model, batch, _static_graphs(n, rng))
    assert preds[0].tobytes() == preds[1].tobytes() == preds[2].tobytes()


def test_graph_subset_models():
    rng = np.random.default_rng(8)
    n = 5
    inputs = rng.normal(0.0, 1.0, (2, n, 6, 1))
    static = _static_graphs(n, rng)
    for kinds in (("distance",), ("dynamic",), ("learnable", "dynamic"),
                  ("distance", "pattern", "learnable")):
        cfg = md.ModelConfig(w_in=6, w_out=3,
                             blocks=[md.StBlockConfig(2, [3], 1, 3)],
                             d_emb=4, graph_kinds=kinds)
        model = md.build_model(n, cfg, seed=0)
        expect = {"emb1", "emb2", "emb_theta1", "emb_theta2"}
        has = set(model.params)
        assert ("learnable" in kinds) == bool(expect & has)
        assert ("dynamic" in kinds) == ("dyn_w1" in has)
        preds = md.forward(model, inputs, static)
        assert preds.shape == (2, n, 3, 1)


def test_missing_static_graph_rejected():
    cfg = md.ModelConfig(w_in=6, w_out=3,
                         blocks=[md.StBlockConfig(2, [3], 1, 3)],
                         d_emb=4, graph_kinds=("distance", "neighbor"))
    model = md.build_model(4, cfg, seed=0)
    inputs = np.zeros((1, 4, 6, 1))
    with pytest.raises(ConfigError, match="neighbor"):
        md.forward(model, inputs, {"distance": np.ones((4, 4))})


def test_forward_rejects_wrong_window_shape():
    cfg = _tiny_config()
    model = md.build_model(4, cfg, seed=0)
    rng = np.random.default_rng(9)
    with pytest.raises(ConfigError, match="expected inputs"):
        md.forward(model, np.zeros((2, 4, 5, 1)), _static_graphs(4, rng))


def test_full_model_finite_diff():
    rng = np.random.default_rng(10)
    n, b = 4, 2
    cfg = _tiny_config()
    model = md.build_model(n, cfg, seed=5)
    static = _static_graphs(n, rng)
    inputs = rng.normal(0.0, 1.0, (b, n, cfg.w_in, 1))
    targets = rng.normal(0.0, 1.0, (b, n, cfg.w_out, 1))

    def build_loss(tparams):
        pred = md.forward_on_tape(tparams, cfg, n, inputs, static)
        return tp.reduce_mean(tp.absolute(tp.sub(pred, targets)))

    worst = tp.finite_diff_check(build_loss, model.params,
                                 rng=np.random.default_rng(1))
    assert worst <= 1e-4, f"worst relative gradient error {worst}"


# ---------------------------------------------------------------------------
# training protocol


def test_lr_schedule_compound():
    cfg = md.TrainConfig()
    assert cfg.lr_at(1) == pytest.approx(1e-2)
    assert cfg.lr_at(10) == pytest.approx(1e-2)
    assert cfg.lr_at(11) == pytest.approx(9.5e-3)
    assert cfg.lr_at(21) == pytest.approx(1e-2 * 0.95 ** 2)
    assert cfg.lr_at(41) == pytest.approx(1e-2 * 0.95 ** 4)
    assert cfg.lr_at(50) == pytest.approx(1e-2 * 0.95 ** 4)
    # frozen past the decay window
    assert cfg.lr_at(51) == pytest.approx(1e-2 * 0.95 ** 4)
    assert cfg.lr_at(100) == pytest.approx(1e-2 * 0.95 ** 4)


def test_lr_schedule_literal():
    cfg = md.TrainConfig(lr_decay_mode="literal")
    assert cfg.lr_at(1) == pytest.approx(1e-2)
    assert cfg.lr_at(11) == pytest.approx(5e-4)
    assert cfg.lr_at(51) == pytest.approx(1e-2 * 0.05 ** 4)


def _split(ds, a, b):
    return ds.slice_time(a, b)


def test_training_improves_and_is_deterministic():
    ds = _tiny_dataset(n=5, t=140, seed=1)
    train_ds, val_ds = _split(ds, 0, 100), _split(ds, 100, 140)
    rng = np.random.default_rng(12)
    static = _static_graphs(5, rng)
    cfg = _tiny_config()
    tcfg = md.TrainConfig(epochs=4, batch_size=32, seed=9)

    model = md.build_model(5, cfg, seed=2)
    fit_a, hist_a = md.train(model, train_ds, val_ds, static, tcfg)
    fit_b, hist_b = md.train(model, train_ds, val_ds, static, tcfg)

    assert len(hist_a.train_loss) == 4
    assert hist_a.train_loss[-1] < hist_a.train_loss[0]
    assert hist_a.best_epoch >= 1
    assert hist_a.train_loss == hist_b.train_loss
    assert hist_a.val_mae == hist_b.val_mae
    for k in fit_a.params:
        assert fit_a.params[k].tobytes() == fit_b.params[k].tobytes()
    # the returned model reproduces the best recorded validation error
    preds, tgts, _ = md.predict_dataset(fit_a, val_ds, static)
    val = float(np.abs(preds - tgts).mean())
    assert val == pytest.approx(min(hist_a.val_mae), abs=1e-12)


def test_training_early_stops_when_flat():
    ds = _tiny_dataset(n=4, t=80, seed=2)
    train_ds, val_ds = _split(ds, 0, 60), _split(ds, 60, 80)
    static = _static_graphs(4, np.random.default_rng(13))
    model = md.build_model(4, _tiny_config(), seed=1)
    tcfg = md.TrainConfig(epochs=50, early_stop_patience=2, lr0=0.0, seed=1)
    _, hist = md.train(model, train_ds, val_ds, static, tcfg)
    assert hist.stopped_early
    assert len(hist.val_mae) == 3
    assert hist.best_epoch == 1


def test_training_aborts_on_nonfinite_loss():
    ds = _tiny_dataset(n=4, t=60, seed=3)
    train_ds, val_ds = _split(ds, 0, 45), _split(ds, 45, 60)
    static = _static_graphs(4, np.random.default_rng(14))
    model = md.build_model(4, _tiny_config(), seed=1)
    model.params["out_b"][:] = np.nan
    with pytest.raises(TrainingError, match="epoch 1"):
        md.train(model, train_ds, val_ds, static, md.TrainConfig(epochs=2))


def test_history_dict_has_no_wall_time():
    hist = md.TrainHistory(train_loss=[1.0], val_mae=[2.0], lr=[0.01],
                           wall_time=[123.0], best_epoch=1)
    d = hist.to_dict()
    assert "wall_time" not in json.dumps(d)
    assert d["epochs"][0]["val_mae"] == 2.0


def test_predict_dataset_counts_windows():
    ds = _tiny_dataset(n=4, t=30, seed=4)
    model = md.build_model(4, md.ModelConfig(
        w_in=12, w_out=12, blocks=[md.StBlockConfig(2, [3], 1, 3)],
        d_emb=4), seed=0)
    static = _static_graphs(4, np.random.default_rng(15))
    preds, tgts, origins = md.predict_dataset(model, ds, static,
                                              batch_size=3)
    assert preds.shape == (7, 4, 12, 1)
    assert tgts.shape == (7, 4, 12, 1)
    # origins are absolute timestamps: one per hour from the epoch start
    assert list(origins) == [i * 3600 for i in range(7)]


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bitwise(tmp_path):
    model = md.build_model(5, _tiny_config(), seed=6)
    path = tmp_path / "model.ckpt"
    md.save_checkpoint(model, path, extra={"factor": "t"})
    back = md.load_checkpoint(path)
    assert back.n == model.n
    assert back.seed == model.seed
    assert back.config.to_dict() == model.config.to_dict()
    assert sorted(back.params) == sorted(model.params)
    for k in model.params:
        assert back.params[k].tobytes() == model.params[k].tobytes()


def test_checkpoint_save_is_byte_deterministic(tmp_path):
    model = md.build_model(5, _tiny_config(), seed=6)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    md.save_checkpoint(model, p1)
    md.save_checkpoint(model, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        md.load_checkpoint(path)


def test_checkpoint_rejects_unknown_version(tmp_path):
    model = md.build_model(4, _tiny_config(), seed=0)
    path = tmp_path / "model.ckpt"
    md.save_checkpoint(model, path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        md.load_checkpoint(path)


def test_checkpoint_missing_field_is_version_error(tmp_path):
    model = md.build_model(4, _tiny_config(), seed=0)
    path = tmp_path / "model.ckpt"
    md.save_checkpoint(model, path)
    raw = path.read_bytes()
    hlen = struct.unpack_from("<II", raw, 4)[1]
    header = json.loads(raw[12:12 + hlen])
    del header["seed"]
    blob = json.dumps(header, sort_keys=True).encode()
    patched = raw[:4] + struct.pack("<II", 1, len(blob)) + blob \
        + raw[12 + hlen:]
    path.write_bytes(patched)
    with pytest.raises(CheckpointError, match="seed"):
        md.load_checkpoint(path)


def test_checkpoint_truncation_detected(tmp_path):
    model = md.build_model(4, _tiny_config(), seed=0)
    path = tmp_path / "model.ckpt"
    md.save_checkpoint(model, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:len(raw) - 16])
    with pytest.raises(CheckpointError, match="truncated"):
        md.load_checkpoint(path)
