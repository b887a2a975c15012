"""Series ingestion, normalization, windowing and splits.

CSV and synthetic series flow through the same path: min-max normalize to
[0, 1], cut rolling (observation, target) windows, then split
chronologically 64/16/20 by recursively peeling off 20%. The validation
split doubles as the auxiliary dataset available to the curious server;
it may be re-cut at a finer stride than the attacked windows.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


@dataclass
class RawSeries:
    values: np.ndarray
    name: str = "series"
    sampling_period: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class WindowingSpec:
    h: int
    f: int
    step_attack: int = 1
    step_aux: int = 1

    def __post_init__(self):
        if self.h < 1 or self.f < 1:
            raise DataError("h and f must be >= 1")
        if self.step_attack < 1 or self.step_aux < 1:
            raise DataError("steps must be >= 1")

    @property
    def w(self) -> int:
        return self.h + self.f


@dataclass
class SeriesWindow:
    obs: np.ndarray  # (H, d)
    tar: np.ndarray  # (F, d)
    origin_index: int

    @property
    def full(self) -> np.ndarray:
        return np.concatenate([self.obs, self.tar], axis=0)


def minmax_normalize(series: RawSeries) -> tuple[RawSeries, tuple[float, float]]:
    """Scale to [0, 1]; returns the (min, max) needed to undo it exactly."""
    lo, hi = float(series.values.min()), float(series.values.max())
    if hi <= lo:
        raise DataError(f"constant series {series.name!r} cannot be normalized")
    scaled = (series.values - lo) / (hi - lo)
    return RawSeries(scaled, series.name, series.sampling_period), (lo, hi)


def denormalize(values: np.ndarray, bounds: tuple[float, float]) -> np.ndarray:
    lo, hi = bounds
    return np.asarray(values) * (hi - lo) + lo


def rolling_windows(series: RawSeries, spec: WindowingSpec, step: int) -> list[SeriesWindow]:
    """Windows of width h+f at the given stride; count = floor((len-w)/step)+1."""
    w = spec.w
    values = series.values
    if len(values) < w:
        raise DataError(f"series of length {len(values)} is shorter than window {w}")
    out = []
    for i in range(0, len(values) - w + 1, step):
        chunk = values[i : i + w]
        out.append(
            SeriesWindow(
                obs=chunk[: spec.h].reshape(spec.h, 1).copy(),
                tar=chunk[spec.h :].reshape(spec.f, 1).copy(),
                origin_index=i,
            )
        )
    return out


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split_windows(windows: list[SeriesWindow]) -> dict[str, list[SeriesWindow]]:
    """Chronological 64/16/20 split; the val slice serves as D_aux.

    Counts come from recursively taking 20%: test = round(0.2*n), then
    val = round(0.2*(n-test)), rounding half up.
    """
    n = len(windows)
    if n < 5:
        raise DataError(f"need at least 5 windows to split, got {n}")
    n_test = _round_half_up(0.2 * n)
    n_val = _round_half_up(0.2 * (n - n_test))
    n_train = n - n_test - n_val
    return {
        "train": windows[:n_train],
        "val": windows[n_train : n_train + n_val],
        "test": windows[n_train + n_val :],
    }


def synth_series(
    seed: int,
    length: int,
    period_steps: int,
    trend_slope: float = 0.0,
    noise_std: float = 0.0,
    name: str = "synthetic",
) -> RawSeries:
    """Two-harmonic periodic series with optional linear trend and noise.

    x_t = 0.5 + a1*sin(2*pi*t/p) + a2*sin(4*pi*t/p + phi) + slope*t + eps_t,
    min-max normalized afterwards. Amplitudes and phase are drawn once from
    the seed, so with zero noise and zero slope the series is exactly
    p-periodic (normalization is affine and preserves that).
    """
    if length < 2 * period_steps:
        raise DataError("length must cover at least two periods")
    rng = np.random.default_rng(seed)
    a1 = rng.uniform(0.2, 0.35)
    a2 = rng.uniform(0.05, 0.15)
    phi = rng.uniform(0.0, 2 * np.pi)
    t = np.arange(length)
    x = 0.5 + a1 * np.sin(2 * np.pi * t / period_steps)
    x = x + a2 * np.sin(4 * np.pi * t / period_steps + phi)
    x = x + trend_slope * t
    if noise_std > 0:
        x = x + rng.normal(0.0, noise_std, size=length)
    series, _ = minmax_normalize(RawSeries(x, name))
    return series


def load_csv(path: str | Path, column: str | None = None) -> RawSeries:
    """One series per file: header row, one value column.

    A timestamp column, when present, is ignored. Missing or blank values
    are filled by linear interpolation.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    if not rows:
        raise DataError(f"{path} has no data rows")

    def parse(cell: str) -> float:
        cell = cell.strip()
        if not cell:
            return np.nan
        try:
            return float(cell)
        except ValueError:
            return np.nan

    if column is not None:
        if column not in header:
            raise DataError(f"column {column!r} not in {header}")
        col = header.index(column)
    else:
        # First column whose cells are mostly numeric.
        col = None
        for j in range(len(header)):
            vals = [parse(r[j]) for r in rows[: min(50, len(rows))]]
            if np.mean([not np.isnan(v) for v in vals]) > 0.5:
                col = j
                break
        if col is None:
            raise DataError(f"no numeric column found in {path}")

    values = np.array([parse(r[col]) for r in rows])
    nans = np.isnan(values)
    if nans.all():
        raise DataError(f"column {header[col]!r} of {path} is empty")
    if nans.any():
        idx = np.arange(len(values))
        values[nans] = np.interp(idx[nans], idx[~nans], values[~nans])
    return RawSeries(values, name=path.stem)


# -- prepared dataset on disk ------------------------------------------------

_PACK_MAGIC = b"TSWPACK1"


@dataclass
class PreparedData:
    """Normalized windows plus split bookkeeping, as written by `data prepare`."""

    spec: WindowingSpec
    windows: list[SeriesWindow]
    split: dict[str, list[int]]  # window indices per split
    aux_windows: list[SeriesWindow]  # val segment re-cut at step_aux
    norm_bounds: tuple[float, float]
    source: str = "synthetic"
    period_steps: int | None = None

    def windows_of(self, part: str) -> list[SeriesWindow]:
        return [self.windows[i] for i in self.split[part]]


def prepare_dataset(
    series: RawSeries, spec: WindowingSpec, period_steps: int | None = None
) -> PreparedData:
    normalized, bounds = minmax_normalize(series)
    windows = rolling_windows(normalized, spec, spec.step_attack)
    parts = split_windows(windows)
    index_of = {id(w): i for i, w in enumerate(windows)}
    split = {k: [index_of[id(w)] for w in v] for k, v in parts.items()}

    val = parts["val"]
    lo = min(w.origin_index for w in val)
    hi = max(w.origin_index for w in val) + spec.w
    sub = RawSeries(normalized.values[lo:hi], normalized.name + ":val")
    aux = rolling_windows(sub, spec, spec.step_aux)
    for w in aux:
        w.origin_index += lo
    return PreparedData(
        spec=spec,
        windows=windows,
        split=split,
        aux_windows=aux,
        norm_bounds=bounds,
        source=series.name,
        period_steps=period_steps,
    )


def _write_pack(path: Path, h: int, f: int, windows: list[SeriesWindow]) -> None:
    with path.open("wb") as fh:
        fh.write(_PACK_MAGIC)
        fh.write(struct.pack("<qqq", h, f, len(windows)))
        for w in windows:
            fh.write(w.full.astype("<f8").tobytes())


def _read_pack(path: Path) -> tuple[int, int, list[SeriesWindow]]:
    raw = path.read_bytes()
    if raw[:8] != _PACK_MAGIC:
        raise DataError(f"{path} is not a window pack")
    h, f, count = struct.unpack_from("<qqq", raw, 8)
    body = np.frombuffer(raw, dtype="<f8", offset=32)
    w = h + f
    if body.size != count * w:
        raise DataError(f"{path} body has {body.size} values, expected {count * w}")
    rows = body.reshape(count, w)
    return h, f, [
        SeriesWindow(obs=r[:h].reshape(h, 1).copy(), tar=r[h:].reshape(f, 1).copy(), origin_index=-1)
        for r in rows
    ]


def save_prepared(data: PreparedData, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_pack(out / "windows.bin", data.spec.h, data.spec.f, data.windows)
    _write_pack(out / "aux_windows.bin", data.spec.h, data.spec.f, data.aux_windows)
    manifest = {
        "h": data.spec.h,
        "f": data.spec.f,
        "step_attack": data.spec.step_attack,
        "step_aux": data.spec.step_aux,
        "count": len(data.windows),
        "aux_count": len(data.aux_windows),
        "norm_min": data.norm_bounds[0],
        "norm_max": data.norm_bounds[1],
        "split": data.split,
        "origins": [w.origin_index for w in data.windows],
        "aux_origins": [w.origin_index for w in data.aux_windows],
        "source": data.source,
        "period_steps": data.period_steps,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def load_prepared(path: str | Path) -> PreparedData:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    h, f, windows = _read_pack(path / "windows.bin")
    _, _, aux = _read_pack(path / "aux_windows.bin")
    for w, o in zip(windows, manifest["origins"]):
        w.origin_index = o
    for w, o in zip(aux, manifest["aux_origins"]):
        w.origin_index = o
    spec = WindowingSpec(
        h=manifest["h"],
        f=manifest["f"],
        step_attack=manifest["step_attack"],
        step_aux=manifest["step_aux"],
    )
    return PreparedData(
        spec=spec,
        windows=windows,
        split={k: list(v) for k, v in manifest["split"].items()},
        aux_windows=aux,
        norm_bounds=(manifest["norm_min"], manifest["norm_max"]),
        source=manifest["source"],
        period_steps=manifest["period_steps"],
    )


def stack_batch(windows: list[SeriesWindow]) -> tuple[np.ndarray, np.ndarray]:
    obs = np.stack([w.obs for w in windows])
    tar = np.stack([w.tar for w in windows])
    return obs, tar
