"""Series ingestion, transforms, windowing, and synthetic generators."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "DataError",
    "DatasetBundle",
    "RawSeries",
    "SynthSpec",
    "TimeSeriesDataset",
    "load_csv_series",
    "load_dataset",
    "pct_change",
    "save_dataset",
    "synth_generate",
    "window_split",
    "window_split_many",
]


class DataError(ValueError):
    """Malformed input data or an invalid data request."""


@dataclass(frozen=True)
class RawSeries:
    """One named multi-channel series: values[t, c] for channel channels[c]."""

    name: str
    channels: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DataError(f"series '{self.name}': values must be 2-D, got {v.shape}")
        if v.shape[1] != len(self.channels):
            raise DataError(
                f"series '{self.name}': {len(self.channels)} channel names "
                f"for {v.shape[1]} columns"
            )
        if v.shape[0] < 1:
            raise DataError(f"series '{self.name}' is empty")
        if not np.all(np.isfinite(v)):
            raise DataError(f"series '{self.name}' contains non-finite values")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "channels", tuple(self.channels))

    def __len__(self):
        return self.values.shape[0]


@dataclass
class TimeSeriesDataset:
    """Windows of one split; every window is input_len + output_len rows."""

    subsequences: list[np.ndarray]
    input_len: int
    output_len: int
    n_channels: int
    split: str

    def __post_init__(self):
        window = self.input_len + self.output_len
        for i, w in enumerate(self.subsequences):
            if w.shape != (window, self.n_channels):
                raise DataError(
                    f"{self.split} window {i}: shape {w.shape}, "
                    f"expected {(window, self.n_channels)}"
                )

    def __len__(self):
        return len(self.subsequences)


@dataclass
class DatasetBundle:
    """Train/val/test windows plus the bookkeeping shared across splits."""

    train: TimeSeriesDataset
    val: TimeSeriesDataset
    test: TimeSeriesDataset
    channel_names: tuple[str, ...]
    input_len: int
    output_len: int
    seed: int
    fractions: tuple[float, float, float] = (0.85, 0.05, 0.10)

    def split(self, tag: str) -> TimeSeriesDataset:
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[tag]
        except KeyError:
            raise DataError(f"unknown split '{tag}'") from None


def load_csv_series(
    path: str,
    channels: list[str] | tuple[str, ...],
    group_column: str | None = None,
) -> list[RawSeries]:
    """Read per-group series from a CSV file.

    Selects ``channels`` columns; when ``group_column`` is given the file is
    partitioned by its values (row order preserved), otherwise the whole file
    is one series.  Rows where any requested value is missing or unparseable
    are dropped; groups left with fewer than 2 rows are skipped with a
    warning.  A missing column raises DataError.
    """
    channels = tuple(channels)
    if not channels:
        raise DataError("at least one channel required")
    groups: dict[str, list[list[float]]] = {}
    order: list[str] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in channels if c not in header]
        if group_column is not None and group_column not in header:
            missing.append(group_column)
        if missing:
            raise DataError(f"{path}: missing columns {missing}; header is {header}")
        for row in reader:
            key = row[group_column] if group_column is not None else ""
            try:
                vals = [float(row[c]) for c in channels]
            except (TypeError, ValueError):
                continue
            if not all(np.isfinite(vals)):
                continue
            if key not in groups:
                groups[key] = []
                order.append(key)
            groups[key].append(vals)

    out = []
    base = os.path.basename(path)
    for key in order:
        rows = groups[key]
        name = key if key else base
        if len(rows) < 2:
            log.warning("group '%s' in %s has %d usable rows; skipped", name, path, len(rows))
            continue
        out.append(RawSeries(name=name, channels=channels, values=np.asarray(rows)))
    if not out:
        raise DataError(f"{path}: no group with at least 2 usable rows")
    return out


def pct_change(series: RawSeries) -> RawSeries:
    """Per-channel relative step change: out[t] = (in[t+1] - in[t]) / in[t]."""
    v = series.values
    if v.shape[0] < 2:
        raise DataError(f"series '{series.name}': need >= 2 rows for pct_change")
    zero = np.argwhere(v[:-1] == 0.0)
    if zero.size:
        t, c = zero[0]
        raise DataError(
            f"series '{series.name}': zero value in channel "
            f"'{series.channels[c]}' at row {t} makes pct_change undefined"
        )
    return RawSeries(
        name=series.name,
        channels=series.channels,
        values=(v[1:] - v[:-1]) / v[:-1],
    )


def _cut_windows(values: np.ndarray, window: int, stride: int) -> list[np.ndarray]:
    length = values.shape[0]
    return [values[s : s + window].copy() for s in range(0, length - window + 1, stride)]


def _check_split_args(input_len, output_len, stride, fractions):
    if input_len < 1 or output_len < 1:
        raise DataError(f"input_len and output_len must be >= 1, got {input_len}, {output_len}")
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise DataError(f"fractions must be 3 non-negative values, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must sum to 1, got {sum(fractions)}")


def window_split_many(
    series_list: list[RawSeries],
    input_len: int,
    output_len: int,
    stride: int | None = None,
    fractions: tuple[float, float, float] = (0.85, 0.05, 0.10),
    seed: int = 0,
) -> DatasetBundle:
    """Cut every series into windows and assign each window to a split.

    Windows are disjoint subsequences by default (stride = window length).
    Each window lands in train/val/test independently at the given fractions,
    drawn from a generator seeded with ``seed``; window order inside a split
    follows series order then start position.
    """
    if not series_list:
        raise DataError("no series to window")
    window = input_len + output_len
    if stride is None:
        stride = window
    _check_split_args(input_len, output_len, stride, fractions)
    channels = series_list[0].channels
    for s in series_list:
        if s.channels != channels:
            raise DataError(f"series '{s.name}' channels {s.channels} != {channels}")

    rng = np.random.default_rng(seed)
    edges = (fractions[0], fractions[0] + fractions[1])
    buckets: dict[str, list[np.ndarray]] = {"train": [], "val": [], "test": []}
    total = 0
    for s in series_list:
        for w in _cut_windows(s.values, window, stride):
            u = rng.random()
            tag = "train" if u < edges[0] else ("val" if u < edges[1] else "test")
            buckets[tag].append(w)
            total += 1
    if total == 0:
        raise DataError(
            f"no window of length {window} fits; longest series has "
            f"{max(len(s) for s in series_list)} rows"
        )
    n = len(channels)
    return DatasetBundle(
        train=TimeSeriesDataset(buckets["train"], input_len, output_len, n, "train"),
        val=TimeSeriesDataset(buckets["val"], input_len, output_len, n, "val"),
        test=TimeSeriesDataset(buckets["test"], input_len, output_len, n, "test"),
        channel_names=channels,
        input_len=input_len,
        output_len=output_len,
        seed=seed,
        fractions=tuple(fractions),
    )


def window_split(
    series: RawSeries,
    input_len: int,
    output_len: int,
    stride: int | None = None,
    fractions: tuple[float, float, float] = (0.85, 0.05, 0.10),
    seed: int = 0,
) -> DatasetBundle:
    """Single-series convenience wrapper around :func:`window_split_many`."""
    return window_split_many([series], input_len, output_len, stride, fractions, seed)


# ---------------------------------------------------------------------------
# synthetic generators


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic series.

    kind 'sinusoid_mix': sum of unit sinusoids with the given periods.
    kind 'piecewise_linear': linear interpolation between seeded knot values
    at the given breakpoints (endpoints are always knots).
    kind 'ar_process': order-K linear recursion with matrix coefficients;
    the first K rows come from ``ar_init`` (zeros when omitted).
    Gaussian noise of scale ``noise_sd`` is added to every kind.
    """

    kind: str
    channels: int = 1
    length: int = 1000
    periods: tuple[float, ...] = (5.0, 20.0)
    breakpoints: tuple[int, ...] = ()
    ar_coeffs: tuple = ()
    ar_intercept: tuple = ()
    ar_init: tuple = ()
    noise_sd: float = 0.0
    seed: int = 0
    name: str = "synth"

    def __post_init__(self):
        if self.kind not in ("sinusoid_mix", "piecewise_linear", "ar_process"):
            raise DataError(f"unknown synthetic kind '{self.kind}'")
        if self.channels < 1:
            raise DataError(f"channels must be >= 1, got {self.channels}")
        if self.length < 2:
            raise DataError(f"length must be >= 2, got {self.length}")
        if self.noise_sd < 0:
            raise DataError(f"noise_sd must be >= 0, got {self.noise_sd}")
        if self.kind == "sinusoid_mix" and not self.periods:
            raise DataError("sinusoid_mix needs at least one period")
        if self.kind == "sinusoid_mix" and any(p <= 0 for p in self.periods):
            raise DataError(f"periods must be positive, got {self.periods}")
        if self.kind == "ar_process" and not self.ar_coeffs:
            raise DataError("ar_process needs coefficients")


def _ar_matrices(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    n = spec.channels
    raw = np.asarray(spec.ar_coeffs, dtype=np.float64)
    if raw.ndim == 1:
        # flat input: one scalar per lag for a single channel, otherwise
        # row-major n*n blocks, one per lag
        if n > 1 and raw.size % (n * n):
            raise DataError(
                f"{raw.size} AR coefficients do not form n*n blocks for n={n}"
            )
        mats = raw.reshape(-1, 1, 1) if n == 1 else raw.reshape(-1, n, n)
    else:
        mats = raw.reshape(-1, n, n)
    intercept = (
        np.asarray(spec.ar_intercept, dtype=np.float64).reshape(n)
        if len(spec.ar_intercept)
        else np.zeros(n)
    )
    order = mats.shape[0]
    # companion-matrix spectral radius decides stationarity
    comp = np.zeros((order * n, order * n))
    comp[:n, :] = np.concatenate([mats[k] for k in range(order)], axis=1)
    if order > 1:
        comp[n:, :-n] = np.eye((order - 1) * n)
    radius = np.abs(np.linalg.eigvals(comp)).max()
    if radius >= 1.0:
        raise DataError(f"AR coefficients are non-stationary (spectral radius {radius:.4f})")
    return mats, intercept


def synth_generate(spec: SynthSpec) -> RawSeries:
    """Deterministically generate the series described by ``spec``."""
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.length, dtype=np.float64)
    n = spec.channels

    if spec.kind == "sinusoid_mix":
        base = np.zeros(spec.length)
        for p in spec.periods:
            base += np.sin(2.0 * np.pi * t / p)
        values = np.tile(base[:, None], (1, n))
    elif spec.kind == "piecewise_linear":
        knots = sorted(set(spec.breakpoints) | {0, spec.length - 1})
        if any(k < 0 or k >= spec.length for k in knots):
            raise DataError(f"breakpoints outside [0, {spec.length - 1}]: {spec.breakpoints}")
        knot_vals = rng.uniform(-1.0, 1.0, size=(len(knots), n))
        values = np.empty((spec.length, n))
        for c in range(n):
            values[:, c] = np.interp(t, knots, knot_vals[:, c])
    else:  # ar_process
        mats, intercept = _ar_matrices(spec)
        order = mats.shape[0]
        init = (
            np.asarray(spec.ar_init, dtype=np.float64).reshape(-1, n)
            if len(spec.ar_init)
            else np.zeros((order, n))
        )
        if init.shape[0] != order:
            raise DataError(f"ar_init must provide {order} rows, got {init.shape[0]}")
        if spec.length <= order:
            raise DataError(f"length {spec.length} too short for order {order}")
        values = np.zeros((spec.length, n))
        values[:order] = init
        noise = rng.normal(0.0, spec.noise_sd, size=(spec.length, n)) if spec.noise_sd else None
        for i in range(order, spec.length):
            acc = intercept.copy()
            for k in range(order):
                acc += mats[k] @ values[i - 1 - k]
            values[i] = acc if noise is None else acc + noise[i]
        names = tuple(f"c{i}" for i in range(n))
        return RawSeries(name=spec.name, channels=names, values=values)

    if spec.noise_sd:
        values = values + rng.normal(0.0, spec.noise_sd, size=values.shape)
    names = tuple(f"c{i}" for i in range(n))
    return RawSeries(name=spec.name, channels=names, values=values)


# ---------------------------------------------------------------------------
# on-disk cache


def _atomic_write_bytes(path: str, payload: bytes):
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_dataset(bundle: DatasetBundle, directory: str, extra: dict | None = None):
    """Write a dataset cache: one stacked array per split plus a manifest.

    The same bundle always produces byte-identical files, so a rerun of the
    preparation step can be verified by comparison.
    """
    os.makedirs(directory, exist_ok=True)
    window = bundle.input_len + bundle.output_len
    manifest = {
        "format": "seqgame-dataset",
        "version": 1,
        "input_len": bundle.input_len,
        "output_len": bundle.output_len,
        "channels": list(bundle.channel_names),
        "seed": bundle.seed,
        "fractions": [repr(f) for f in bundle.fractions],
        "splits": {},
        "extra": extra or {},
    }
    for tag in ("train", "val", "test"):
        ds = bundle.split(tag)
        stacked = (
            np.stack(ds.subsequences)
            if ds.subsequences
            else np.zeros((0, window, ds.n_channels))
        )
        buf = io.BytesIO()
        np.save(buf, stacked)
        _atomic_write_bytes(os.path.join(directory, f"{tag}.npy"), buf.getvalue())
        manifest["splits"][tag] = {"file": f"{tag}.npy", "count": len(ds)}
    payload = json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    _atomic_write_bytes(os.path.join(directory, "manifest.json"), payload.encode())


def load_dataset(directory: str) -> DatasetBundle:
    """Reload a cache written by :func:`save_dataset`, bit-exactly."""
    manifest_path = os.path.join(directory, "manifest.json")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"no dataset manifest at {manifest_path}") from None
    except json.JSONDecodeError as err:
        raise DataError(f"corrupt dataset manifest {manifest_path}: {err}") from None
    if manifest.get("format") != "seqgame-dataset" or manifest.get("version") != 1:
        raise DataError(f"unrecognized dataset format in {manifest_path}")

    input_len = int(manifest["input_len"])
    output_len = int(manifest["output_len"])
    channels = tuple(manifest["channels"])
    datasets = {}
    for tag in ("train", "val", "test"):
        entry = manifest["splits"][tag]
        arr = np.load(os.path.join(directory, entry["file"]))
        if arr.shape[0] != entry["count"]:
            raise DataError(f"{tag} split: manifest says {entry['count']} windows, file has {arr.shape[0]}")
        datasets[tag] = TimeSeriesDataset(
            [arr[i] for i in range(arr.shape[0])],
            input_len,
            output_len,
            len(channels),
            tag,
        )
    return DatasetBundle(
        train=datasets["train"],
        val=datasets["val"],
        test=datasets["test"],
        channel_names=channels,
        input_len=input_len,
        output_len=output_len,
        seed=int(manifest["seed"]),
        fractions=tuple(float(f) for f in manifest["fractions"]),
    )
