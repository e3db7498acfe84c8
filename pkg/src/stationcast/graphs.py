"""Station-network graph construction, fusion, and spectral filtering.

Five adjacency matrices over the same station set: geographic distance,
nearest-neighbor, series-pattern correlation, a trainable embedding graph,
and a per-window dynamic graph.  Fusion combines them with per-node
trainable weights.  The spectral half provides the rescaled Laplacian and
Chebyshev polynomial filtering used by the forecasting model.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import tape as tp
from .data import StationMeta, WeatherSeriesDataset
from .errors import ConfigError, PipelineError, SchemaError, StructuralError

EARTH_RADIUS_KM = 6371.0

GRAPH_KINDS = ("distance", "neighbor", "pattern", "learnable", "dynamic",
               "fused")

# default factor set for the pattern graph: temperature, visibility, humidity
PATTERN_FACTORS = ("t", "hv2", "rh")


@dataclass
class Adjacency:
    """One dense graph over the station set."""

    n: int
    weights: np.ndarray
    kind: str

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.kind not in GRAPH_KINDS:
            raise ConfigError(f"unknown graph kind {self.kind!r}")
        if self.weights.shape != (self.n, self.n):
            raise ConfigError(f"adjacency shape {self.weights.shape} "
                              f"does not match n={self.n}")
        if not np.isfinite(self.weights).all():
            raise StructuralError(f"{self.kind} graph has non-finite entries")
        if self.kind in ("distance", "pattern", "neighbor"):
            if np.diagonal(self.weights).any():
                raise StructuralError(f"{self.kind} graph has nonzero diagonal")
        # pattern correlations are signed, and fusion inherits their sign
        if self.kind not in ("pattern", "fused") and (self.weights < 0.0).any():
            raise StructuralError(f"{self.kind} graph has negative entries")


@dataclass
class DistanceGraphConfig:
    sigma: float
    epsilon: float = 0.1

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise ConfigError("sigma must be positive")
        if not 0.0 <= self.epsilon < 1.0:
            raise ConfigError("epsilon must lie in [0, 1)")


@dataclass
class NeighborGraphConfig:
    n_adjacent: int = 10

    def __post_init__(self):
        if self.n_adjacent < 1:
            raise ConfigError("n_adjacent must be at least 1")


@dataclass
class LearnableGraphParams:
    """Trainable node embeddings and mixing maps for the embedding graph."""

    e1: np.ndarray
    e2: np.ndarray
    theta1: np.ndarray
    theta2: np.ndarray
    alpha: float = 3.0

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise ConfigError("alpha must be positive")
        n, d = self.e1.shape
        if self.e2.shape != (n, d) or self.theta1.shape != (d, d) \
                or self.theta2.shape != (d, d):
            raise ConfigError("learnable graph parameter shapes disagree")


@dataclass
class DynamicGraphParams:
    """Projection maps for the per-window dynamic graph."""

    w1: np.ndarray
    w2: np.ndarray
    beta: float = 0.5

    def __post_init__(self):
        if self.beta <= 0.0:
            raise ConfigError("beta must be positive")
        if self.w1.shape != self.w2.shape or self.w1.ndim != 2:
            raise ConfigError("dynamic graph projection shapes disagree")


@dataclass
class FusionParams:
    """Per-node combination weights, one [N, N] matrix per graph."""

    weights: dict

    def __post_init__(self):
        shapes = {k: v.shape for k, v in self.weights.items()}
        if len(set(shapes.values())) > 1:
            raise ConfigError(f"fusion weight shapes disagree: {shapes}")


@dataclass
class ScaledLaplacian:
    l_tilde: np.ndarray
    lambda_max: float


@dataclass
class GraphSet:
    """Built graphs plus the settings that produced them."""

    n: int
    graphs: dict
    meta: dict = field(default_factory=dict)

    def __getitem__(self, kind: str) -> Adjacency:
        return self.graphs[kind]


# ---------------------------------------------------------------------------
# distances


def haversine_km(a, b) -> float:
    """Great-circle distance between two stations (or (lat, lon) pairs)."""
    lat1, lon1 = (a.lat, a.lon) if isinstance(a, StationMeta) else a
    lat2, lon2 = (b.lat, b.lon) if isinstance(b, StationMeta) else b
    return float(pairwise_distances_km(np.array([lat1, lat2]),
                                       np.array([lon1, lon2]))[0, 1])


def pairwise_distances_km(lats, lons) -> np.ndarray:
    """All-pairs great-circle distances in km.

    Computed with an elementwise-symmetric formula so the result is
    bitwise symmetric.
    """
    phi = np.radians(np.asarray(lats, dtype=np.float64))
    lam = np.radians(np.asarray(lons, dtype=np.float64))
    dphi = 0.5 * (phi[:, None] - phi[None, :])
    dlam = 0.5 * (lam[:, None] - lam[None, :])
    h = np.sin(dphi) ** 2 \
        + np.cos(phi)[:, None] * np.cos(phi)[None, :] * np.sin(dlam) ** 2
    h = np.clip(h, 0.0, 1.0)
    d = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(h))
    np.fill_diagonal(d, 0.0)
    return d


def auto_sigma(dist: np.ndarray) -> float:
    """Default kernel width: mean off-diagonal pairwise distance."""
    n = dist.shape[0]
    if n < 2:
        return 1.0
    off = ~np.eye(n, dtype=bool)
    return float(dist[off].mean())


# ---------------------------------------------------------------------------
# static graph builders


def build_distance_graph(stations: Sequence[StationMeta],
                         cfg: DistanceGraphConfig) -> Adjacency:
    """Thresholded Gaussian kernel on great-circle distance."""
    lats = np.array([s.lat for s in stations])
    lons = np.array([s.lon for s in stations])
    d = pairwise_distances_km(lats, lons)
    w = np.exp(-(d ** 2) / cfg.sigma ** 2)
    w = np.where(w >= cfg.epsilon, w, 0.0)
    np.fill_diagonal(w, 0.0)
    return Adjacency(len(stations), w, "distance")


def build_neighbor_graph(stations: Sequence[StationMeta],
                         cfg: NeighborGraphConfig) -> Adjacency:
    """Directed k-nearest graph: row i marks the n_adjacent closest stations.

    Distance ties break toward the lower station index, so the build is
    deterministic.
    """
    n = len(stations)
    if cfg.n_adjacent >= n:
        raise ConfigError(f"n_adjacent={cfg.n_adjacent} must be below the "
                          f"station count {n}")
    lats = np.array([s.lat for s in stations])
    lons = np.array([s.lon for s in stations])
    d = pairwise_distances_km(lats, lons)
    w = np.zeros((n, n))
    idx = np.arange(n)
    for i in range(n):
        others = idx[idx != i]
        # lexsort: primary key distance, secondary key station index
        order = others[np.lexsort((others, d[i, others]))]
        w[i, order[:cfg.n_adjacent]] = 1.0
    return Adjacency(n, w, "neighbor")


def _pearson_matrix(series: np.ndarray, stations, factor: str) -> np.ndarray:
    """Row-wise Pearson correlations, exactly symmetric by construction."""
    x = series - series.mean(axis=1, keepdims=True)
    norms = np.sqrt((x * x).sum(axis=1))
    for i, nv in enumerate(norms):
        # ptp catches exact constants whose float mean is off by rounding
        if nv <= 0.0 or np.ptp(series[i]) == 0.0:
            raise PipelineError(
                f"station {stations[i].station_id}, factor {factor!r}: "
                "constant training series, correlation undefined")
    z = x / norms[:, None]
    c = z @ z.T
    r = (c + c.T) / 2.0
    return np.clip(r, -1.0, 1.0)


def build_pattern_graph(train_ds: WeatherSeriesDataset,
                        factors: Sequence[str] = PATTERN_FACTORS) -> Adjacency:
    """Mean Pearson-correlation graph over the requested factors.

    Correlations are computed on the training series only; factors absent
    from the dataset are skipped, and if none remain every dataset factor
    is used instead.
    """
    present = [f for f in factors if f in train_ds.factors]
    if not present:
        present = list(train_ds.factors)
    mats = []
    for f in present:
        d = train_ds.factor_index(f)
        mats.append(_pearson_matrix(train_ds.values[:, :, d],
                                    train_ds.stations, f))
    r = np.mean(mats, axis=0)
    r = np.clip(r, -1.0, 1.0)
    np.fill_diagonal(r, 0.0)
    return Adjacency(train_ds.n_stations, r, "pattern")


# ---------------------------------------------------------------------------
# trainable graphs (tape-level ops plus numpy wrappers)


def init_learnable_graph(n: int, d_emb: int = 16, alpha: float = 3.0,
                         rng: Optional[np.random.Generator] = None
                         ) -> LearnableGraphParams:
    if rng is None:
        rng = np.random.default_rng(0)
    scale = 1.0 / np.sqrt(d_emb)
    return LearnableGraphParams(
        e1=rng.uniform(-scale, scale, (n, d_emb)),
        e2=rng.uniform(-scale, scale, (n, d_emb)),
        theta1=rng.uniform(-scale, scale, (d_emb, d_emb)),
        theta2=rng.uniform(-scale, scale, (d_emb, d_emb)),
        alpha=alpha)


def init_dynamic_graph(w_in: int, d: int, d_emb: int = 16, beta: float = 0.5,
                       rng: Optional[np.random.Generator] = None
                       ) -> DynamicGraphParams:
    if rng is None:
        rng = np.random.default_rng(0)
    scale = 1.0 / np.sqrt(w_in * d)
    return DynamicGraphParams(
        w1=rng.uniform(-scale, scale, (w_in * d, d_emb)),
        w2=rng.uniform(-scale, scale, (w_in * d, d_emb)),
        beta=beta)


def _antisym_graph(m1, m2, saturation: float):
    """ReLU(tanh(s * (M1 M2^T - M2 M1^T))); one-sided by antisymmetry."""
    if tp._as_array(m1).ndim == 3:
        m2t = tp.transpose(m2, (0, 2, 1))
        m1t = tp.transpose(m1, (0, 2, 1))
    else:
        m2t = tp.transpose(m2, (1, 0))
        m1t = tp.transpose(m1, (1, 0))
    g = tp.sub(tp.matmul(m1, m2t), tp.matmul(m2, m1t))
    return tp.relu(tp.tanh(tp.scalar_mul(saturation, g)))


def learnable_graph_op(e1, e2, theta1, theta2, alpha: float) -> tp.TapeTensor:
    """Differentiable embedding graph; accepts tape tensors or arrays."""
    m1 = tp.tanh(tp.scalar_mul(alpha, tp.matmul(e1, theta1)))
    m2 = tp.tanh(tp.scalar_mul(alpha, tp.matmul(e2, theta2)))
    return _antisym_graph(m1, m2, alpha)


def eval_learnable_graph(params: LearnableGraphParams) -> Adjacency:
    a = learnable_graph_op(params.e1, params.e2, params.theta1, params.theta2,
                           params.alpha)
    return Adjacency(params.e1.shape[0], a.values, "learnable")


def dynamic_graph_op(z, w1, w2, beta: float) -> tp.TapeTensor:
    """Differentiable per-window graph from flattened inputs.

    z is [N, W'*D] for one window or [B, N, W'*D] for a batch.
    """
    d1 = tp.tanh(tp.scalar_mul(beta, tp.matmul(z, w1)))
    d2 = tp.tanh(tp.scalar_mul(beta, tp.matmul(z, w2)))
    return _antisym_graph(d1, d2, beta)


def flatten_window(window: np.ndarray) -> np.ndarray:
    """[..., N, W', D] observations to [..., N, W'*D] node characteristics."""
    return np.ascontiguousarray(window).reshape(window.shape[:-2]
                                                + (-1,))


def eval_dynamic_graph(window: np.ndarray,
                       params: DynamicGraphParams) -> Adjacency:
    """Dynamic graph of one [N, W', D] input window."""
    if window.ndim != 3:
        raise ConfigError(f"expected one [N, W', D] window, got {window.shape}")
    z = flatten_window(window)
    if z.shape[1] != params.w1.shape[0]:
        raise ConfigError(f"window flattens to {z.shape[1]} features, "
                          f"projections expect {params.w1.shape[0]}")
    a = dynamic_graph_op(z, params.w1, params.w2, params.beta)
    return Adjacency(window.shape[0], a.values, "dynamic")


def init_fusion_params(n: int, kinds: Sequence[str]) -> FusionParams:
    """Equal-weight start: every graph contributes 1/|S| at every node pair."""
    w = 1.0 / len(kinds)
    return FusionParams({k: np.full((n, n), w) for k in kinds})


def fuse_graphs_op(adjs: dict, weights: dict) -> tp.TapeTensor:
    """Differentiable weighted elementwise sum over the graph set."""
    if set(adjs) != set(weights):
        raise ConfigError(f"graph set {sorted(adjs)} does not match fusion "
                          f"weights {sorted(weights)}")
    total = None
    for kind in sorted(adjs):
        term = tp.hadamard(weights[kind], adjs[kind])
        total = term if total is None else tp.add(total, term)
    return total


def fuse_graphs(graph_set: dict, fusion: FusionParams) -> Adjacency:
    adjs = {k: (g.weights if isinstance(g, Adjacency) else np.asarray(g))
            for k, g in graph_set.items()}
    fused = fuse_graphs_op(adjs, fusion.weights)
    n = next(iter(adjs.values())).shape[0]
    return Adjacency(n, fused.values, "fused")


# ---------------------------------------------------------------------------
# spectral machinery


def symmetrize(a: np.ndarray) -> np.ndarray:
    """(|A| + |A|^T) / 2: symmetric nonnegative version of any adjacency."""
    aa = np.abs(np.asarray(a, dtype=np.float64))
    return (aa + aa.T) / 2.0


def symmetrize_op(a) -> tp.TapeTensor:
    """Tape version of symmetrize for [N, N] or [B, N, N] tensors."""
    aa = tp.absolute(a)
    nd = tp._as_array(a).ndim
    axes = (0, 2, 1) if nd == 3 else (1, 0)
    return tp.scalar_mul(0.5, tp.add(aa, tp.transpose(aa, axes)))


def scaled_laplacian(adj: Union[Adjacency, np.ndarray],
                     presymmetrized: bool = False) -> ScaledLaplacian:
    """Rescaled normalized Laplacian 2L/lambda_max - I of a graph.

    The input is symmetrized first unless the caller vouches for it.
    Isolated nodes get a unit self-loop (with a warning) so degree
    normalization stays finite.
    """
    a = adj.weights if isinstance(adj, Adjacency) else np.asarray(adj, float)
    if not presymmetrized:
        a = symmetrize(a)
    if (a.sum(axis=1) <= 0.0).any():
        warnings.warn("isolated node: unit self-loop injected before "
                      "normalization", stacklevel=2)
    l_tilde, saved = tp._laplacian_forward(a)
    return ScaledLaplacian(l_tilde, saved[3])


def cheb_filter(lap: Union[ScaledLaplacian, np.ndarray], theta: np.ndarray,
                x: np.ndarray) -> np.ndarray:
    """Chebyshev polynomial graph filter, no eigendecomposition.

    y = sum_k T_k(L~) x theta_k with T_0 = I, T_1 = L~,
    T_k = 2 L~ T_{k-1} - T_{k-2}.
    """
    lt = lap.l_tilde if isinstance(lap, ScaledLaplacian) else np.asarray(lap)
    theta = np.asarray(theta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if theta.ndim != 3 or theta.shape[1] != x.shape[-1]:
        raise ConfigError(f"filter coefficients {theta.shape} do not match "
                          f"signal {x.shape}")
    prev = x
    y = prev @ theta[0]
    if theta.shape[0] > 1:
        cur = lt @ x
        y = y + cur @ theta[1]
        for k in range(2, theta.shape[0]):
            prev, cur = cur, 2.0 * (lt @ cur) - prev
            y = y + cur @ theta[k]
    return y


def cheb_filter_op(l_tilde, theta, x, order: int) -> tp.TapeTensor:
    """Tape version of cheb_filter.

    l_tilde: [N, N] or [B, N, N]; x: [N, C] or [B, N, C]; theta: [K, C_in,
    C_out] with K == order.
    """
    c_in = tp._as_array(x).shape[-1]
    c_out = tp._as_array(theta).shape[-1]

    def coeff(k):
        t = tp.slice_axis(theta, 0, k, k + 1)
        return tp.reshape(t, (c_in, c_out))

    prev = x
    y = tp.matmul(prev, coeff(0))
    if order > 1:
        cur = tp.matmul(l_tilde, x)
        y = tp.add(y, tp.matmul(cur, coeff(1)))
        for k in range(2, order):
            nxt = tp.sub(tp.scalar_mul(2.0, tp.matmul(l_tilde, cur)), prev)
            prev, cur = cur, nxt
            y = tp.add(y, tp.matmul(cur, coeff(k)))
    return y


# ---------------------------------------------------------------------------
# serialization

_GMAGIC = b"W2KG"
_GVERSION = 1
_JSON_MAX_N = 64


def save_graphs(gs: GraphSet, path) -> None:
    """Persist built graphs: JSON for small station sets, binary above."""
    path = Path(path)
    if gs.n <= _JSON_MAX_N:
        doc = {
            "format": "station-graphs",
            "version": _GVERSION,
            "n": gs.n,
            "meta": gs.meta,
            "graphs": {k: a.weights.tolist() for k, a in gs.graphs.items()},
            "kinds": {k: a.kind for k, a in gs.graphs.items()},
        }
        path.write_text(json.dumps(doc, indent=2, sort_keys=True))
        return
    parts = [_GMAGIC, struct.pack("<II", _GVERSION, gs.n)]
    meta_blob = json.dumps(gs.meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta_blob)))
    parts.append(meta_blob)
    parts.append(struct.pack("<I", len(gs.graphs)))
    for k in sorted(gs.graphs):
        a = gs.graphs[k]
        blob = k.encode("utf-8")
        parts.append(struct.pack("<H", len(blob)))
        parts.append(blob)
        kb = a.kind.encode("utf-8")
        parts.append(struct.pack("<H", len(kb)))
        parts.append(kb)
        parts.append(np.ascontiguousarray(a.weights, dtype="<f8").tobytes())
    path.write_bytes(b"".join(parts))


def load_graphs(path) -> GraphSet:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == _GMAGIC:
        pos = 4
        version, n = struct.unpack_from("<II", raw, pos)
        pos += 8
        if version != _GVERSION:
            raise StructuralError(f"{path}: unsupported graph file version "
                                  f"{version}")
        (mlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        meta = json.loads(raw[pos:pos + mlen].decode("utf-8"))
        pos += mlen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        graphs = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            key = raw[pos:pos + klen].decode("utf-8")
            pos += klen
            (kindlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            kind = raw[pos:pos + kindlen].decode("utf-8")
            pos += kindlen
            w = np.frombuffer(raw, dtype="<f8", count=n * n,
                              offset=pos).reshape(n, n).copy()
            pos += 8 * n * n
            graphs[key] = Adjacency(n, w, kind)
        return GraphSet(n, graphs, meta)
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise StructuralError(f"{path}: neither a graph JSON document nor a "
                              "packed graph file") from None
    if doc.get("format") != "station-graphs":
        raise StructuralError(f"{path}: not a graph document")
    if doc.get("version") != _GVERSION:
        raise StructuralError(f"{path}: unsupported graph file version "
                              f"{doc.get('version')}")
    n = int(doc["n"])
    graphs = {k: Adjacency(n, np.asarray(v, dtype=np.float64),
                           doc["kinds"][k])
              for k, v in doc["graphs"].items()}
    return GraphSet(n, graphs, doc.get("meta", {}))


def build_static_graphs(train_ds: WeatherSeriesDataset,
                        sigma: Union[float, str] = "auto",
                        epsilon: float = 0.1,
                        n_adjacent: int = 10,
                        pattern_factors: Sequence[str] = PATTERN_FACTORS
                        ) -> GraphSet:
    """Distance, neighbor, and pattern graphs in one pass."""
    lats = np.array([s.lat for s in train_ds.stations])
    lons = np.array([s.lon for s in train_ds.stations])
    dist = pairwise_distances_km(lats, lons)
    if sigma == "auto":
        sigma_v = auto_sigma(dist)
    else:
        sigma_v = float(sigma)
    graphs = {
        "distance": build_distance_graph(
            train_ds.stations, DistanceGraphConfig(sigma_v, epsilon)),
        "neighbor": build_neighbor_graph(
            train_ds.stations, NeighborGraphConfig(n_adjacent)),
        "pattern": build_pattern_graph(train_ds, pattern_factors),
    }
    meta = {"sigma": sigma_v, "epsilon": epsilon, "n_adjacent": n_adjacent,
            "pattern_factors": list(pattern_factors),
            "train_steps": train_ds.n_steps,
            "stations": [s.station_id for s in train_ds.stations]}
    return GraphSet(train_ds.n_stations, graphs, meta)
