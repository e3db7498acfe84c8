"""Multi-graph spatio-temporal forecaster and its training loop.

The network stacks spatio-temporal blocks: a Chebyshev graph convolution
over stations, a ReLU, a multi-branch temporal convolution, and a residual
connection.  Ahead of the blocks, five adjacency matrices (three static,
one trainable, one recomputed per window) are fused with per-node weights,
symmetrized, and turned into a rescaled Laplacian.  A shared per-node
dense layer maps the remaining time-channel block to the forecast horizon.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import graphs as gr
from . import tape as tp
from .data import WeatherSeriesDataset, make_windows
from .errors import CheckpointError, ConfigError, TrainingError

STATIC_KINDS = ("distance", "neighbor", "pattern")
ALL_GRAPH_KINDS = ("distance", "neighbor", "pattern", "learnable", "dynamic")

_CKPT_MAGIC = b"W2KC"
_CKPT_VERSION = 1


@dataclass
class StBlockConfig:
    """One spatio-temporal block: graph filter order plus temporal branches."""

    cheb_order: int
    temporal_kernels: list
    channels_in: int
    channels_out: int

    def __post_init__(self):
        if self.cheb_order < 1:
            raise ConfigError("cheb_order must be at least 1")
        if not self.temporal_kernels:
            raise ConfigError("at least one temporal branch is required")
        for k in self.temporal_kernels:
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"temporal kernels must be odd and >= 1, "
                                  f"got {k}")
        if self.channels_in < 1 or self.channels_out < 1:
            raise ConfigError("channel counts must be positive")

    @property
    def max_kernel(self) -> int:
        return max(self.temporal_kernels)


def default_block_configs(channels_in: int = 1) -> list:
    """Two blocks with linearly growing spatial order and receptive field."""
    return [
        StBlockConfig(2, [3], channels_in, 32),
        StBlockConfig(3, [3, 5], 32, 32),
    ]


@dataclass
class ModelConfig:
    """Architecture settings; the training protocol lives in TrainConfig."""

    w_in: int = 12
    w_out: int = 12
    d: int = 1
    blocks: list = field(default_factory=default_block_configs)
    d_emb: int = 16
    alpha: float = 3.0
    beta: float = 0.5
    graph_kinds: tuple = ALL_GRAPH_KINDS

    def __post_init__(self):
        if isinstance(self.blocks, list) and self.blocks and \
                isinstance(self.blocks[0], dict):
            self.blocks = [StBlockConfig(**b) for b in self.blocks]
        self.graph_kinds = tuple(self.graph_kinds)
        if self.w_in < 1 or self.w_out < 1 or self.d < 1:
            raise ConfigError("window and factor dimensions must be positive")
        if not self.graph_kinds:
            raise ConfigError("at least one graph kind is required")
        for k in self.graph_kinds:
            if k not in ALL_GRAPH_KINDS:
                raise ConfigError(f"unknown graph kind {k!r}")
        if self.blocks[0].channels_in != self.d:
            raise ConfigError(f"first block expects {self.blocks[0].channels_in} "
                              f"input channels but data has {self.d}")
        t = self.w_in
        prev_k = 0
        prev_kernel = 0
        for i, blk in enumerate(self.blocks):
            if blk.cheb_order < prev_k:
                raise ConfigError(
                    f"block {i}: spatial order {blk.cheb_order} decreases "
                    f"(time-space consistency requires non-decreasing orders)")
            if blk.max_kernel < prev_kernel:
                raise ConfigError(
                    f"block {i}: max temporal kernel {blk.max_kernel} "
                    "decreases (time-space consistency)")
            if i > 0 and blk.channels_in != self.blocks[i - 1].channels_out:
                raise ConfigError(f"block {i}: channel mismatch with block "
                                  f"{i - 1}")
            t = t - (blk.max_kernel - 1)
            if t < 1:
                raise ConfigError(f"block {i}: temporal kernels exhaust the "
                                  f"window ({t} steps left)")
            prev_k, prev_kernel = blk.cheb_order, blk.max_kernel

    @property
    def t_remaining(self) -> int:
        t = self.w_in
        for blk in self.blocks:
            t -= blk.max_kernel - 1
        return t

    def to_dict(self) -> dict:
        d = asdict(self)
        d["graph_kinds"] = list(self.graph_kinds)
        return d


@dataclass
class TrainConfig:
    """Optimization protocol: MAE loss under Adam with a stepped schedule."""

    epochs: int = 100
    early_stop_patience: int = 50
    batch_size: int = 32
    lr0: float = 1e-2
    lr_decay_factor: float = 0.05
    lr_decay_every: int = 10
    decay_window: int = 50
    lr_decay_mode: str = "compound"  # or "literal": lr0 * factor^k
    loss: str = "mae"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be positive")
        if self.lr_decay_mode not in ("compound", "literal"):
            raise ConfigError(f"unknown lr decay mode {self.lr_decay_mode!r}")
        if self.loss != "mae":
            raise ConfigError("only the mae objective is supported")
        if self.lr_decay_every < 1 or self.decay_window < 0:
            raise ConfigError("schedule intervals must be positive")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch index; frozen past the window."""
        max_steps = max(self.decay_window // self.lr_decay_every - 1, 0)
        k = min((epoch - 1) // self.lr_decay_every, max_steps)
        if self.lr_decay_mode == "literal":
            return self.lr0 * self.lr_decay_factor ** k
        return self.lr0 * (1.0 - self.lr_decay_factor) ** k


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_mae: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def to_dict(self) -> dict:
        # wall time is excluded: reports must be byte-reproducible
        return {
            "epochs": [
                {"epoch": i + 1, "train_loss": self.train_loss[i],
                 "val_mae": self.val_mae[i], "lr": self.lr[i]}
                for i in range(len(self.train_loss))
            ],
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
        }


@dataclass
class MultiGraphForecaster:
    """Architecture config plus a flat named-parameter store."""

    config: ModelConfig
    n: int
    params: dict
    seed: int = 0

    def param_names(self) -> list:
        return sorted(self.params)

    def copy(self) -> "MultiGraphForecaster":
        return MultiGraphForecaster(self.config, self.n,
                           {k: v.copy() for k, v in self.params.items()},
                           self.seed)


# ---------------------------------------------------------------------------
# construction


def build_model(n_nodes: int, config: Optional[ModelConfig] = None,
                seed: int = 0) -> MultiGraphForecaster:
    """Initialize all parameters with seed-deterministic uniform fan-in."""
    if config is None:
        config = ModelConfig()
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, shape)

    params: dict = {}
    for i, blk in enumerate(config.blocks):
        c_in, c_out = blk.channels_in, blk.channels_out
        params[f"block{i}_cheb"] = uniform((blk.cheb_order, c_in, c_out),
                                           blk.cheb_order * c_in)
        for j, k in enumerate(blk.temporal_kernels):
            params[f"block{i}_branch{j}"] = uniform((k, c_out, c_out),
                                                    k * c_out)
        n_br = len(blk.temporal_kernels)
        params[f"block{i}_fuse"] = uniform((n_br * c_out, c_out),
                                           n_br * c_out)
        params[f"block{i}_fuse_bias"] = np.zeros(c_out)
        params[f"block{i}_res"] = uniform((c_in, c_out), c_in)
    if "learnable" in config.graph_kinds:
        lg = gr.init_learnable_graph(n_nodes, config.d_emb, config.alpha,
                                     rng=rng)
        params["emb1"], params["emb2"] = lg.e1, lg.e2
        params["emb_theta1"], params["emb_theta2"] = lg.theta1, lg.theta2
    if "dynamic" in config.graph_kinds:
        dg = gr.init_dynamic_graph(config.w_in, 1, config.d_emb, config.beta,
                                   rng=rng)
        params["dyn_w1"], params["dyn_w2"] = dg.w1, dg.w2
    share = 1.0 / len(config.graph_kinds)
    for kind in config.graph_kinds:
        params[f"fusion_{kind}"] = np.full((n_nodes, n_nodes), share)
    c_last = config.blocks[-1].channels_out
    flat = config.t_remaining * c_last
    params["out_w"] = uniform((flat, config.w_out * config.d), flat)
    params["out_b"] = np.zeros(config.w_out * config.d)
    return MultiGraphForecaster(config, n_nodes, params, seed)


# ---------------------------------------------------------------------------
# forward pieces (tape ops; accept tensors or arrays)


def temporal_multibranch(x, kernels: Sequence[int], branch_weights: Sequence,
                         fuse, fuse_bias):
    """Parallel 1-D convolutions over time, center-aligned, then a 1x1 mix.

    x: [M, T, C]; each branch_weights[j]: [kernels[j], C, C_br]; shorter
    branches are center-cropped to the longest branch's output length.
    """
    k_max = max(kernels)
    t_in = tp._as_array(x).shape[1]
    t_out = t_in - (k_max - 1)
    outs = []
    for k, w in zip(kernels, branch_weights):
        y = tp.conv1d(x, w)
        lead = (k_max - k) // 2
        if lead:
            y = tp.slice_axis(y, 1, lead, lead + t_out)
        outs.append(y)
    cat = outs[0] if len(outs) == 1 else tp.concat(outs, axis=2)
    return tp.add_bias(tp.matmul(cat, fuse), fuse_bias)


def _cheb_over_time(l_tilde, x, theta, order: int):
    """Chebyshev node mixing applied at every time slice.

    l_tilde: [B, N, N]; x: [B, N, T, C_in]; theta: [K, C_in, C_out].
    """
    b, n, t, c_in = tp._as_array(x).shape
    c_out = tp._as_array(theta).shape[-1]

    def coeff(k):
        return tp.reshape(tp.slice_axis(theta, 0, k, k + 1), (c_in, c_out))

    def apply_theta(s, k):
        # s: [B, N, T*C_in] node-mixed signal; theta acts per time slice
        u = tp.reshape(s, (b, n * t, c_in))
        return tp.matmul(u, coeff(k))

    packed = tp.reshape(x, (b, n, t * c_in))
    acc = apply_theta(packed, 0)
    if order > 1:
        cur = tp.matmul(l_tilde, packed)
        acc = tp.add(acc, apply_theta(cur, 1))
        prev = packed
        for k in range(2, order):
            nxt = tp.sub(tp.scalar_mul(2.0, tp.matmul(l_tilde, cur)), prev)
            prev, cur = cur, nxt
            acc = tp.add(acc, apply_theta(cur, k))
    return tp.reshape(acc, (b, n, t, c_out))


def st_block_forward(x, blk: StBlockConfig, l_tilde, weights: dict,
                     prefix: str):
    """One block: graph filter, relu, temporal branches, residual add."""
    b, n, t_in, c_in = tp._as_array(x).shape
    t_out = t_in - (blk.max_kernel - 1)
    if t_out < 1:
        raise ConfigError(f"temporal kernels exceed block input length {t_in}")
    spatial = tp.relu(_cheb_over_time(l_tilde, x, weights[prefix + "_cheb"],
                                      blk.cheb_order))
    flat = tp.reshape(spatial, (b * n, t_in, blk.channels_out))
    branches = [weights[f"{prefix}_branch{j}"]
                for j in range(len(blk.temporal_kernels))]
    temporal = temporal_multibranch(flat, blk.temporal_kernels, branches,
                                    weights[prefix + "_fuse"],
                                    weights[prefix + "_fuse_bias"])
    temporal = tp.reshape(temporal, (b, n, t_out, blk.channels_out))
    lead = (blk.max_kernel - 1) // 2
    res = tp.slice_axis(x, 2, lead, lead + t_out)
    res = tp.reshape(res, (b, n * t_out, c_in))
    res = tp.matmul(res, weights[prefix + "_res"])
    res = tp.reshape(res, (b, n, t_out, blk.channels_out))
    return tp.add(temporal, res)


def _fused_laplacian(weights: dict, cfg: ModelConfig, n: int, batch: int,
                     inputs: np.ndarray, static_graphs: dict):
    """Per-window rescaled Laplacian of the fused graph stack."""
    terms2d = {}
    for kind in cfg.graph_kinds:
        if kind in STATIC_KINDS:
            if kind not in static_graphs:
                raise ConfigError(f"model needs the {kind} graph but it was "
                                  "not supplied")
            a = static_graphs[kind]
            a = a.weights if isinstance(a, gr.Adjacency) else np.asarray(a)
            terms2d[kind] = a
        elif kind == "learnable":
            terms2d[kind] = gr.learnable_graph_op(
                weights["emb1"], weights["emb2"], weights["emb_theta1"],
                weights["emb_theta2"], cfg.alpha)
    fused = None
    if terms2d:
        flat = gr.fuse_graphs_op(
            terms2d, {k: weights[f"fusion_{k}"] for k in terms2d})
        fused = tp.tile_leading(flat, batch)
    if "dynamic" in cfg.graph_kinds:
        # node characteristics: the window of the first factor channel
        z = np.ascontiguousarray(inputs[:, :, :, 0]).reshape(batch, n, -1)
        a_k = gr.dynamic_graph_op(z, weights["dyn_w1"], weights["dyn_w2"],
                                  cfg.beta)
        w_k = tp.tile_leading(weights["fusion_dynamic"], batch)
        term = tp.hadamard(w_k, a_k)
        fused = term if fused is None else tp.add(fused, term)
    sym = gr.symmetrize_op(fused)
    return tp.scaled_laplacian_op(sym)


def forward_on_tape(weights: dict, cfg: ModelConfig, n: int,
                    inputs: np.ndarray, static_graphs: dict):
    """Differentiable forward pass; weights may be tape tensors or arrays."""
    if inputs.ndim != 4 or inputs.shape[1] != n or \
            inputs.shape[2] != cfg.w_in or inputs.shape[3] != cfg.d:
        raise ConfigError(f"expected inputs [B, {n}, {cfg.w_in}, {cfg.d}], "
                          f"got {inputs.shape}")
    batch = inputs.shape[0]
    l_tilde = _fused_laplacian(weights, cfg, n, batch, inputs, static_graphs)
    x = tp.TapeTensor(inputs)
    for i, blk in enumerate(cfg.blocks):
        x = st_block_forward(x, blk, l_tilde, weights, f"block{i}")
    flat = cfg.t_remaining * cfg.blocks[-1].channels_out
    x = tp.reshape(x, (batch, n, flat))
    out = tp.add_bias(tp.matmul(x, weights["out_w"]), weights["out_b"])
    return tp.reshape(out, (batch, n, cfg.w_out, cfg.d))


def forward(model: MultiGraphForecaster, inputs: np.ndarray,
            static_graphs: dict) -> np.ndarray:
    """Plain prediction pass: [B, N, W', D] windows to [B, N, W, D]."""
    return forward_on_tape(model.params, model.config, model.n, inputs,
                           static_graphs).values


def predict_dataset(model: MultiGraphForecaster, ds: WeatherSeriesDataset,
                    static_graphs: dict, batch_size: int = 64):
    """Forecast every window of a split; returns (preds, targets, origins)."""
    preds, targets, origins = [], [], []
    for batch in make_windows(ds, model.config.w_in, model.config.w_out,
                              batch_size=batch_size):
        preds.append(forward(model, batch.inputs, static_graphs))
        targets.append(batch.targets)
        origins.append(batch.origins)
    if not preds:
        raise ConfigError("split is too short to cut a single window")
    return (np.concatenate(preds), np.concatenate(targets),
            np.concatenate(origins))


def permute_nodes(model: MultiGraphForecaster, perm: np.ndarray) -> MultiGraphForecaster:
    """Model with stations relabeled by perm (for equivariance checks)."""
    out = model.copy()
    for name in ("emb1", "emb2"):
        if name in out.params:
            out.params[name] = out.params[name][perm]
    for name in list(out.params):
        if name.startswith("fusion_"):
            out.params[name] = out.params[name][np.ix_(perm, perm)]
    return out


# ---------------------------------------------------------------------------
# training


def _mae_loss(pred_t, targets: np.ndarray):
    return tp.reduce_mean(tp.absolute(tp.sub(pred_t, targets)))


def train(model: MultiGraphForecaster, train_ds: WeatherSeriesDataset,
          val_ds: WeatherSeriesDataset, static_graphs: dict,
          cfg: TrainConfig, progress=None):
    """Optimize MAE with Adam under the stepped schedule; keep the best.

    The best snapshot is the lowest validation MAE; training stops early
    when validation has not improved for the configured patience.
    ``progress(epoch, train_loss, val_mae, lr)`` is called after each epoch
    when given.
    """
    import time as _time

    mcfg = model.config
    rng = np.random.default_rng(cfg.seed)
    params = {k: v.copy() for k, v in model.params.items()}
    state = tp.AdamState()
    history = TrainHistory()
    best_val = np.inf
    best_params = {k: v.copy() for k, v in params.items()}
    best_epoch = 0

    for epoch in range(1, cfg.epochs + 1):
        t0 = _time.monotonic()
        lr = cfg.lr_at(epoch)
        losses = []
        for step, batch in enumerate(make_windows(
                train_ds, mcfg.w_in, mcfg.w_out,
                batch_size=cfg.batch_size, shuffle_rng=rng)):
            t = tp.Tape()
            tparams = {k: t.param(v, name=k) for k, v in params.items()}
            pred = forward_on_tape(tparams, mcfg, model.n, batch.inputs,
                                   static_graphs)
            loss = _mae_loss(pred, batch.targets)
            lv = float(loss.values)
            if not np.isfinite(lv):
                raise TrainingError(f"non-finite loss at epoch {epoch}, "
                                    f"step {step}")
            losses.append(lv)
            store = tp.backward(loss)
            grads = {k: tp.grad_of(store, tparams[k]) for k in params}
            params = tp.adam_step(params, grads, state, lr)
        if not losses:
            raise TrainingError("training split yields no windows")

        current = MultiGraphForecaster(mcfg, model.n, params, model.seed)
        val_pred, val_tgt, _ = predict_dataset(current, val_ds, static_graphs,
                                               batch_size=cfg.batch_size)
        val_mae = float(np.abs(val_pred - val_tgt).mean())
        history.train_loss.append(float(np.mean(losses)))
        history.val_mae.append(val_mae)
        history.lr.append(lr)
        history.wall_time.append(_time.monotonic() - t0)
        if progress is not None:
            progress(epoch, history.train_loss[-1], val_mae, lr)
        if val_mae < best_val:
            best_val = val_mae
            best_params = {k: v.copy() for k, v in params.items()}
            best_epoch = epoch
        elif epoch - best_epoch >= cfg.early_stop_patience:
            history.stopped_early = True
            break
    history.best_epoch = best_epoch
    return MultiGraphForecaster(mcfg, model.n, best_params, model.seed), history


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: MultiGraphForecaster, path,
                    extra: Optional[dict] = None) -> None:
    """Binary checkpoint: JSON header plus raw parameter buffers."""
    names = model.param_names()
    header = {
        "model_config": model.config.to_dict(),
        "n": model.n,
        "seed": model.seed,
        "params": [{"name": k, "shape": list(model.params[k].shape)}
                   for k in names],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [_CKPT_MAGIC, struct.pack("<II", _CKPT_VERSION, len(blob)), blob]
    for k in names:
        parts.append(np.ascontiguousarray(model.params[k],
                                          dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> MultiGraphForecaster:
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version "
                              f"{version}")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt checkpoint header") from None
    for fld in ("model_config", "n", "seed", "params"):
        if fld not in header:
            raise CheckpointError(f"{path}: checkpoint header lacks the "
                                  f"{fld!r} field (incompatible version)")
    config = ModelConfig(**header["model_config"])
    pos = 12 + hlen
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = pos + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: checkpoint is truncated")
        params[entry["name"]] = np.frombuffer(
            raw[pos:end], dtype="<f8").reshape(shape).copy()
        pos = end
    return MultiGraphForecaster(config, int(header["n"]), params,
                       int(header["seed"]))
