"""Station time-series containers, quality pipeline, windowing, synthesis.

A dataset is a dense [N, T, D] float64 block plus a boolean observation
mask, station coordinates, and factor names.  The pipeline operations are
pure: each returns a new dataset and leaves its input untouched.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, PipelineError, SchemaError, StructuralError

# canonical factor short names; order fixes nothing, membership is the schema
FACTOR_NAMES = (
    "ap", "wvp", "t", "mxt", "mnt", "dt", "st", "rh", "ws", "mws",
    "wd", "mwd", "vv", "hv1", "hv2", "p1", "p2", "p3", "p4", "p5",
)

# sentinel codes stations report instead of a measurement
DEFAULT_CODES = {"vv": 999999.0, "hv1": 999999.0, "hv2": 999999.0}

_MAGIC = b"W2KT"
_VERSION = 1


@dataclass(frozen=True)
class StationMeta:
    """Identity and fixed coordinates of one ground station."""

    station_id: str
    lat: float
    lon: float
    alt: float = 0.0

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise SchemaError(f"station {self.station_id}: lat {self.lat} out of range")
        if not -180.0 <= self.lon <= 180.0:
            raise SchemaError(f"station {self.station_id}: lon {self.lon} out of range")


@dataclass
class NormStats:
    """Per-factor standardization constants, taken from a training split."""

    factors: list
    mean: np.ndarray
    std: np.ndarray


@dataclass
class BoxStats:
    q1: float
    median: float
    q3: float
    mean: float
    lower_whisker: float
    upper_whisker: float
    outlier_indices: np.ndarray


@dataclass
class WeatherSeriesDataset:
    """N stations by T hourly steps by D factors, with observation mask."""

    stations: list
    factors: list
    values: np.ndarray
    mask: np.ndarray
    time_start: int = 0
    time_step: int = 3600
    norm: Optional[NormStats] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        n, t, d = self.values.shape
        if t <= 0:
            raise StructuralError("dataset has no time steps")
        if len(self.stations) != n or len(self.factors) != d:
            raise StructuralError(
                f"metadata lengths ({len(self.stations)} stations, "
                f"{len(self.factors)} factors) do not match values shape {self.values.shape}")
        if self.mask.shape != self.values.shape:
            raise StructuralError("mask shape differs from values shape")
        ids = [s.station_id for s in self.stations]
        if len(set(ids)) != len(ids):
            raise StructuralError("duplicate station ids")
        for name in self.factors:
            if name not in FACTOR_NAMES:
                raise SchemaError(f"unknown factor name: {name!r}")
        if not np.isfinite(self.values[self.mask]).all():
            raise StructuralError("non-finite values at observed cells")

    @property
    def n_stations(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    @property
    def n_factors(self) -> int:
        return self.values.shape[2]

    def factor_index(self, name: str) -> int:
        try:
            return self.factors.index(name)
        except ValueError:
            raise SchemaError(f"factor {name!r} not in dataset "
                              f"(has {self.factors})") from None

    def select_stations(self, keep: Sequence[int]) -> "WeatherSeriesDataset":
        keep = list(keep)
        return replace(self,
                       stations=[self.stations[i] for i in keep],
                       values=self.values[keep].copy(),
                       mask=self.mask[keep].copy())

    def slice_time(self, start: int, stop: int) -> "WeatherSeriesDataset":
        return replace(self,
                       values=self.values[:, start:stop].copy(),
                       mask=self.mask[:, start:stop].copy(),
                       time_start=self.time_start + start * self.time_step)

    def select_factors(self, keep: Sequence[str]) -> "WeatherSeriesDataset":
        idx = [self.factor_index(name) for name in keep]
        norm = self.norm
        if norm is not None:
            old = [list(norm.factors).index(n) for n in keep]
            norm = NormStats(factors=list(keep),
                             mean=norm.mean[old].copy(),
                             std=norm.std[old].copy())
        return replace(self,
                       factors=list(keep),
                       values=self.values[:, :, idx].copy(),
                       mask=self.mask[:, :, idx].copy(),
                       norm=norm)


@dataclass
class WindowBatch:
    """One batch of forecasting windows cut from a single split."""

    inputs: np.ndarray   # [B, N, W_in, D]
    targets: np.ndarray  # [B, N, W_out, D]
    origins: np.ndarray  # epoch seconds of each window's first input step
    origin_indices: np.ndarray  # index of the first input step in the split


# ---------------------------------------------------------------------------
# loading and saving


def _mask_default_codes(values: np.ndarray, mask: np.ndarray, factors,
                        default_codes) -> None:
    for d, name in enumerate(factors):
        code = default_codes.get(name)
        if code is not None:
            mask[:, :, d] &= values[:, :, d] != code


def load_dataset(path, format: str = "packed_binary",
                 default_codes=DEFAULT_CODES) -> WeatherSeriesDataset:
    """Read a dataset from a CSV directory or a packed binary file."""
    if format == "csv_per_station":
        return _load_csv_dir(Path(path), default_codes)
    if format == "packed_binary":
        return _load_binary(Path(path))
    raise ConfigError(f"unknown dataset format {format!r}")


def _parse_time(text: str) -> int:
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        dt = datetime.fromisoformat(text)
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        return int(dt.timestamp())


def _load_csv_dir(root: Path, default_codes) -> WeatherSeriesDataset:
    meta_path = root / "stations.csv"
    if not meta_path.exists():
        raise StructuralError(f"missing station metadata file {meta_path}")
    metas: list[StationMeta] = []
    time_start = 0
    with open(meta_path, newline="") as fh:
        for row in csv.DictReader(fh):
            metas.append(StationMeta(row["station_id"].strip(),
                                     float(row["lat"]), float(row["lon"]),
                                     float(row.get("alt", 0.0) or 0.0)))
            if row.get("time_start"):
                time_start = _parse_time(row["time_start"])
    if not metas:
        raise StructuralError("station metadata file lists no stations")

    all_values, all_masks = [], []
    factors = None
    length = None
    for meta in metas:
        f = root / f"{meta.station_id}.csv"
        if not f.exists():
            raise StructuralError(f"missing series file {f}")
        with open(f, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise StructuralError(f"{f}: empty file")
            header = [h.strip() for h in header]
            for name in header:
                if name not in FACTOR_NAMES:
                    raise SchemaError(f"{f}: unknown factor name {name!r}")
            if factors is None:
                factors = header
            elif header != factors:
                raise SchemaError(f"{f}: factor columns {header} differ from "
                                  f"{factors}")
            vals, msk = [], []
            for row in reader:
                if len(row) != len(factors):
                    raise StructuralError(f"{f}: row width {len(row)} != "
                                          f"{len(factors)} factors")
                rv, rm = [], []
                for cell in row:
                    cell = cell.strip()
                    if cell == "" or cell.lower() == "nan":
                        rv.append(np.nan)
                        rm.append(False)
                    else:
                        rv.append(float(cell))
                        rm.append(True)
                vals.append(rv)
                msk.append(rm)
        if length is None:
            length = len(vals)
        elif len(vals) != length:
            raise StructuralError(
                f"{f}: {len(vals)} rows, other stations have {length}")
        all_values.append(vals)
        all_masks.append(msk)

    values = np.asarray(all_values, dtype=np.float64)
    mask = np.asarray(all_masks, dtype=bool)
    _mask_default_codes(values, mask, factors, default_codes)
    values = np.where(np.isfinite(values), values, 0.0)
    return WeatherSeriesDataset(metas, list(factors), values, mask,
                                time_start=time_start)


def save_csv_dir(ds: WeatherSeriesDataset, root) -> None:
    """Write the per-station CSV layout (used for fixtures and exports)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "stations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "lat", "lon", "alt", "time_start"])
        for s in ds.stations:
            w.writerow([s.station_id, repr(float(s.lat)), repr(float(s.lon)),
                        repr(float(s.alt)), ds.time_start])
    for i, s in enumerate(ds.stations):
        with open(root / f"{s.station_id}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(ds.factors)
            for t in range(ds.n_steps):
                row = []
                for d in range(ds.n_factors):
                    if ds.mask[i, t, d]:
                        # repr of a python float round-trips exactly
                        row.append(repr(float(ds.values[i, t, d])))
                    else:
                        row.append("")
                w.writerow(row)


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise StructuralError("packed dataset file is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def string(self) -> str:
        (n,) = self.unpack("H")
        return self.take(n).decode("utf-8")


def save_dataset(ds: WeatherSeriesDataset, path) -> None:
    """Write the packed little-endian binary layout."""
    parts = [_MAGIC, struct.pack("<I", _VERSION)]
    n, t, d = ds.values.shape
    parts.append(struct.pack("<III", n, t, d))
    parts.append(struct.pack("<qI", ds.time_start, ds.time_step))
    for name in ds.factors:
        parts.append(_pack_str(name))
    for s in ds.stations:
        parts.append(_pack_str(s.station_id))
        parts.append(struct.pack("<ddd", s.lat, s.lon, s.alt))
    if ds.norm is not None:
        parts.append(struct.pack("<B", 1))
        parts.append(np.asarray(ds.norm.mean, dtype="<f8").tobytes())
        parts.append(np.asarray(ds.norm.std, dtype="<f8").tobytes())
    else:
        parts.append(struct.pack("<B", 0))
    parts.append(np.ascontiguousarray(ds.values, dtype="<f8").tobytes())
    parts.append(np.packbits(ds.mask.reshape(-1)).tobytes())
    Path(path).write_bytes(b"".join(parts))


def _load_binary(path: Path) -> WeatherSeriesDataset:
    cur = _Cursor(path.read_bytes())
    if cur.take(4) != _MAGIC:
        raise StructuralError(f"{path}: not a packed dataset file")
    (version,) = cur.unpack("I")
    if version != _VERSION:
        raise StructuralError(f"{path}: unsupported dataset version {version}")
    n, t, d = cur.unpack("III")
    time_start, time_step = cur.unpack("qI")
    factors = [cur.string() for _ in range(d)]
    stations = []
    for _ in range(n):
        sid = cur.string()
        lat, lon, alt = cur.unpack("ddd")
        stations.append(StationMeta(sid, lat, lon, alt))
    (has_norm,) = cur.unpack("B")
    norm = None
    if has_norm:
        mean = np.frombuffer(cur.take(8 * d), dtype="<f8").copy()
        std = np.frombuffer(cur.take(8 * d), dtype="<f8").copy()
        norm = NormStats(list(factors), mean, std)
    count = n * t * d
    values = np.frombuffer(cur.take(8 * count), dtype="<f8").reshape(n, t, d).copy()
    mask_bytes = cur.take((count + 7) // 8)
    mask = np.unpackbits(np.frombuffer(mask_bytes, dtype=np.uint8),
                         count=count).astype(bool).reshape(n, t, d)
    return WeatherSeriesDataset(stations, factors, values, mask,
                                time_start=time_start, time_step=time_step,
                                norm=norm)


# ---------------------------------------------------------------------------
# quality screening


def screen_missing(ds: WeatherSeriesDataset, max_ratio: float = 0.01):
    """Drop stations with too many incomplete records.

    A record (one time step of one station) counts as missing when any
    factor cell is unobserved; the station is dropped when the missing
    fraction strictly exceeds ``max_ratio``.
    """
    record_missing = ~ds.mask.all(axis=2)  # [N, T]
    ratios = record_missing.mean(axis=1)
    keep = [i for i in range(ds.n_stations) if ratios[i] <= max_ratio]
    dropped = [ds.stations[i].station_id for i in range(ds.n_stations)
               if i not in keep]
    if not keep:
        raise PipelineError("missing-data screening dropped every station")
    report = {
        "rule": "whole-record: a step is missing if any factor cell is unobserved",
        "max_ratio": max_ratio,
        "ratios": {ds.stations[i].station_id: float(ratios[i])
                   for i in range(ds.n_stations)},
        "dropped": dropped,
    }
    return ds.select_stations(keep), report


def screen_defaults(ds: WeatherSeriesDataset, default_codes=None,
                    max_ratio: float = 0.01, factors=None):
    """Drop stations where any factor reports its default code too often.

    Surviving default-code cells are masked as unobserved so interpolation
    replaces them.
    """
    if default_codes is None:
        default_codes = DEFAULT_CODES
    if factors is None:
        factors = [f for f in ds.factors if f in default_codes]
    ratios: dict = {}
    drop = set()
    mask = ds.mask.copy()
    for name in factors:
        if name not in default_codes:
            raise ConfigError(f"no default code registered for factor {name!r}")
        if name not in ds.factors:
            continue
        d = ds.factor_index(name)
        hits = ds.values[:, :, d] == default_codes[name]
        frac = hits.mean(axis=1)
        for i in range(ds.n_stations):
            ratios.setdefault(ds.stations[i].station_id, {})[name] = float(frac[i])
            if frac[i] > max_ratio:
                drop.add(i)
        mask[:, :, d] &= ~hits
    keep = [i for i in range(ds.n_stations) if i not in drop]
    if not keep:
        raise PipelineError("default-code screening dropped every station")
    out = replace(ds, mask=mask).select_stations(keep)
    report = {
        "max_ratio": max_ratio,
        "ratios": ratios,
        "dropped": [ds.stations[i].station_id for i in sorted(drop)],
    }
    return out, report


def interpolate_linear(ds: WeatherSeriesDataset) -> WeatherSeriesDataset:
    """Fill unobserved cells by per-station linear interpolation in time.

    Leading and trailing gaps take the nearest observed value.  Observed
    cells are copied through untouched.
    """
    values = ds.values.copy()
    idx = np.arange(ds.n_steps)
    for i in range(ds.n_stations):
        for d in range(ds.n_factors):
            obs = ds.mask[i, :, d]
            if obs.all():
                continue
            if not obs.any():
                raise PipelineError(
                    f"station {ds.stations[i].station_id}, factor "
                    f"{ds.factors[d]}: no observed values to interpolate from")
            gaps = ~obs
            values[i, gaps, d] = np.interp(idx[gaps], idx[obs],
                                           ds.values[i, obs, d])
    return replace(ds, values=values, mask=np.ones_like(ds.mask))


def boxplot_stats(series) -> BoxStats:
    """Quartiles, whiskers at 1.5 IQR, and indices of points beyond them."""
    x = np.asarray(series, dtype=np.float64)
    q1, med, q3 = np.quantile(x, [0.25, 0.5, 0.75])
    iqr = q3 - q1
    lo = q1 - 1.5 * iqr
    hi = q3 + 1.5 * iqr
    out = np.where((x < lo) | (x > hi))[0]
    return BoxStats(float(q1), float(med), float(q3), float(x.mean()),
                    float(lo), float(hi), out)


# ---------------------------------------------------------------------------
# normalization and splitting


def compute_norm_stats(ds: WeatherSeriesDataset) -> NormStats:
    """Per-factor mean and standard deviation over all stations and steps."""
    flat = ds.values.reshape(-1, ds.n_factors)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    for d, s in enumerate(std):
        if s <= 0.0:
            raise PipelineError(f"factor {ds.factors[d]!r} has zero variance, "
                                "cannot standardize")
    return NormStats(list(ds.factors), mean, std)


def normalize(ds: WeatherSeriesDataset,
              stats: Optional[NormStats] = None):
    """Z-score the dataset; stats should come from the training split."""
    if stats is None:
        stats = compute_norm_stats(ds)
    if stats.factors != ds.factors:
        raise ConfigError("normalization stats cover different factors")
    values = (ds.values - stats.mean) / stats.std
    return replace(ds, values=values, norm=stats), stats


def denormalize(ds: WeatherSeriesDataset,
                stats: Optional[NormStats] = None) -> WeatherSeriesDataset:
    if stats is None:
        stats = ds.norm
    if stats is None:
        raise ConfigError("dataset carries no normalization stats")
    values = ds.values * stats.std + stats.mean
    return replace(ds, values=values, norm=None)


def denormalize_values(arr: np.ndarray, stats: NormStats,
                       factor: Optional[str] = None) -> np.ndarray:
    """Undo z-scoring on a raw array whose last axis indexes factors."""
    if factor is not None:
        d = stats.factors.index(factor)
        return arr * stats.std[d] + stats.mean[d]
    return arr * stats.std + stats.mean


def split_temporal(ds: WeatherSeriesDataset,
                   scheme: Union[tuple, list] = (3, 1, 2)):
    """Cut the timeline into contiguous train/val/test segments.

    ``scheme`` is either a ratio triple like (3, 1, 2) or three explicit
    (start, stop) index ranges.
    """
    t = ds.n_steps
    if len(scheme) != 3:
        raise ConfigError("split scheme needs exactly three parts")
    if all(isinstance(p, (tuple, list)) for p in scheme):
        ranges = [(int(a), int(b)) for a, b in scheme]
        if ranges[0][0] != 0 or ranges[2][1] != t:
            raise ConfigError("explicit ranges must cover the full timeline")
        for (a0, b0), (a1, _) in zip(ranges, ranges[1:]):
            if b0 != a1:
                raise ConfigError("explicit ranges must be contiguous")
    else:
        parts = [float(p) for p in scheme]
        total = sum(parts)
        n_train = int(t * parts[0] / total)
        n_val = int(t * parts[1] / total)
        ranges = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, t)]
    return tuple(ds.slice_time(a, b) for a, b in ranges)


def make_windows(split: WeatherSeriesDataset, w_in: int, w_out: int,
                 stride: int = 1, batch_size: Optional[int] = None,
                 shuffle_rng: Optional[np.random.Generator] = None
                 ) -> Iterator[WindowBatch]:
    """Yield forecasting windows fully contained in one split.

    Origins step by ``stride``; the window count at stride 1 is
    T - w_in - w_out + 1.  Never crosses the split boundary because it
    only ever sees one split.
    """
    if w_in <= 0 or w_out <= 0 or stride <= 0:
        raise ConfigError("window lengths and stride must be positive")
    t = split.n_steps
    origins = np.arange(0, t - w_in - w_out + 1, stride, dtype=np.int64)
    if shuffle_rng is not None:
        origins = origins[shuffle_rng.permutation(len(origins))]
    if batch_size is None:
        batch_size = max(len(origins), 1)
    for at in range(0, len(origins), batch_size):
        chunk = origins[at:at + batch_size]
        if len(chunk) == 0:
            return
        inputs = np.stack([split.values[:, o:o + w_in, :] for o in chunk])
        targets = np.stack([split.values[:, o + w_in:o + w_in + w_out, :]
                            for o in chunk])
        stamps = split.time_start + chunk * split.time_step
        yield WindowBatch(inputs, targets, stamps, chunk.copy())


def count_windows(t: int, w_in: int, w_out: int, stride: int = 1) -> int:
    return max(0, (t - w_in - w_out) // stride + 1)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    """Knobs for the synthetic station-network generator."""

    n: int = 20
    t: int = 2000
    d: int = 3
    seed: int = 0
    lat_center: float = 35.0
    lon_center: float = 110.0
    patch_deg: float = 4.0
    spatial_corr_scale_km: float = 150.0
    diurnal_amp: float = 5.0
    seasonal_amp: float = 8.0
    seasonal_period: int = 720
    ar_coeff: float = 0.9
    ar_amp: float = 2.0
    noise_amp: float = 0.5

    def __post_init__(self):
        if self.n < 1 or self.t < 1 or self.d < 1:
            raise ConfigError("synthetic dims must be positive")
        if self.d > len(FACTOR_NAMES):
            raise ConfigError(f"at most {len(FACTOR_NAMES)} factors")
        if not 0.0 <= self.ar_coeff < 1.0:
            raise ConfigError("ar_coeff must lie in [0, 1)")


# factors the generator emits, in order; chosen so the default pattern-graph
# factor set is available whenever d >= 3
_SYNTH_FACTORS = ("t", "hv2", "rh", "ap", "ws", "wvp", "dt", "st", "mxt",
                  "mnt", "vv", "hv1", "mws", "wd", "mwd", "p1", "p2", "p3",
                  "p4", "p5")


def generate_synthetic(cfg: SynthConfig) -> WeatherSeriesDataset:
    """Deterministic multi-station series with spatial structure.

    Each factor is a smooth station baseline plus diurnal and seasonal
    cycles plus a spatially correlated AR(1) field plus white noise.  The
    AR field is shared smoothly across nearby stations, so neighbors carry
    information about a station's future that its own history lacks.
    """
    from .graphs import pairwise_distances_km  # local import, no cycle at call time

    rng = np.random.default_rng(cfg.seed)
    half = cfg.patch_deg / 2.0
    lats = cfg.lat_center + rng.uniform(-half, half, cfg.n)
    lons = cfg.lon_center + rng.uniform(-half, half, cfg.n)
    alts = rng.uniform(0.0, 1500.0, cfg.n)
    stations = [StationMeta(f"S{i:03d}", float(lats[i]), float(lons[i]),
                            float(alts[i])) for i in range(cfg.n)]

    dist = pairwise_distances_km(lats, lons)
    cov = np.exp(-(dist / cfg.spatial_corr_scale_km) ** 2)
    chol = np.linalg.cholesky(cov + 1e-9 * np.eye(cfg.n))

    steps = np.arange(cfg.t)
    factors = list(_SYNTH_FACTORS[:cfg.d])
    values = np.empty((cfg.n, cfg.t, cfg.d))
    for d in range(cfg.d):
        base_level = 15.0 + 10.0 * d
        baseline = base_level + 3.0 * (chol @ rng.standard_normal(cfg.n))
        phase = 2.0 * np.pi * 0.02 * (chol @ rng.standard_normal(cfg.n))
        season_phase = 2.0 * np.pi * 0.02 * (chol @ rng.standard_normal(cfg.n))
        # (step mod period) keeps the cycles exactly periodic in floats
        diurnal = cfg.diurnal_amp * np.sin(
            2.0 * np.pi * (steps % 24) / 24.0 + phase[:, None])
        seasonal = cfg.seasonal_amp * np.sin(
            2.0 * np.pi * (steps % cfg.seasonal_period) / cfg.seasonal_period
            + season_phase[:, None])
        shocks = chol @ rng.standard_normal((cfg.t, cfg.n)).T
        ar = np.empty((cfg.n, cfg.t))
        scale = np.sqrt(1.0 - cfg.ar_coeff ** 2)
        state = shocks[:, 0]
        ar[:, 0] = state
        for t in range(1, cfg.t):
            state = cfg.ar_coeff * state + scale * shocks[:, t]
            ar[:, t] = state
        white = rng.standard_normal((cfg.n, cfg.t))
        values[:, :, d] = (baseline[:, None] + diurnal + seasonal
                           + cfg.ar_amp * ar + cfg.noise_amp * white)

    mask = np.ones_like(values, dtype=bool)
    return WeatherSeriesDataset(stations, factors, values, mask,
                                time_start=1577836800, time_step=3600)
