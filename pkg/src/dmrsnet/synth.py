"""Synthetic tapped-delay-line channels and the binary dataset container."""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import (
    N_FREQ,
    N_PILOT_FREQ,
    N_PILOT_TIME,
    N_TIME,
    ChannelGrid,
    DmrsGrid,
    DmrsPattern,
    awgn_array,
    entry_power,
    extract_dmrs_array,
)

SPEED_OF_LIGHT = 299_792_458.0
KMH = 1000.0 / 3600.0

MAGIC = b"DLRS"
VERSION = 1

RECORD_DTYPE = np.dtype(
    [
        ("snr_db", "<f4"),
        ("truth", "<f4", (N_FREQ, N_TIME, 2)),
        ("dmrs", "<f4", (N_PILOT_FREQ, N_PILOT_TIME, 2)),
        ("seed", "<u8"),
    ]
)
_HEADER = struct.Struct("<4sII")
_PATTERN = struct.Struct(f"<{N_PILOT_FREQ}H{N_PILOT_TIME}H")


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedPayloadError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class ChannelParams:
    num_taps: int = 12
    rms_delay_spread_s: float = 100e-9
    ue_speed_mps: float = 30 * KMH
    carrier_hz: float = 3.5e9
    subcarrier_spacing_hz: float = 15e3
    symbol_duration_s: float = 1e-3 / 14
    shadow_sigma_db: float = 8.0

    def __post_init__(self):
        if int(self.num_taps) != self.num_taps or self.num_taps < 1:
            raise ValueError(f"num_taps must be an integer >= 1, got {self.num_taps}")
        for name in ("carrier_hz", "subcarrier_spacing_hz", "symbol_duration_s"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.rms_delay_spread_s < 0 or (self.num_taps > 1 and self.rms_delay_spread_s == 0):
            raise ValueError("rms_delay_spread_s must be positive for multi-tap channels")
        if self.ue_speed_mps < 0:
            raise ValueError("ue_speed_mps must be non-negative")
        if self.shadow_sigma_db < 0:
            raise ValueError("shadow_sigma_db must be non-negative")


@dataclass(frozen=True)
class ParamRanges:
    """Per-sample parameter distributions; delay and speed are drawn uniformly."""

    delay_spread_s: tuple[float, float] = (10e-9, 300e-9)
    ue_speed_kmh: tuple[float, float] = (0.0, 120.0)
    num_taps: int = 12
    carrier_hz: float = 3.5e9
    subcarrier_spacing_hz: float = 15e3
    symbol_duration_s: float = 1e-3 / 14
    shadow_sigma_db: float = 8.0

    def draw(self, rng: np.random.Generator) -> ChannelParams:
        return ChannelParams(
            num_taps=self.num_taps,
            rms_delay_spread_s=float(rng.uniform(*self.delay_spread_s)),
            ue_speed_mps=float(rng.uniform(*self.ue_speed_kmh)) * KMH,
            carrier_hz=self.carrier_hz,
            subcarrier_spacing_hz=self.subcarrier_spacing_hz,
            symbol_duration_s=self.symbol_duration_s,
            shadow_sigma_db=self.shadow_sigma_db,
        )


def tap_delays(params: ChannelParams) -> np.ndarray:
    """Equally spaced taps covering three RMS delay spreads, first tap at zero."""
    if params.num_taps == 1:
        return np.zeros(1)
    return np.linspace(0.0, 3.0 * params.rms_delay_spread_s, params.num_taps)


def synth_channel(params: ChannelParams, rng: np.random.Generator, n_freq: int = N_FREQ, n_time: int = N_TIME) -> ChannelGrid:
    """Draw one time-frequency channel realization.

    Taps carry complex Gaussian gains with an exponential power-delay profile
    (unit total power), one Doppler shift per tap from a uniform angle of
    arrival, and a common log-normal shadowing scale.
    """
    return ChannelGrid.from_array(_synth_array(params, rng, n_freq, n_time))


def _synth_array(params, rng, n_freq=N_FREQ, n_time=N_TIME):
    L = params.num_taps
    tau = tap_delays(params)
    if L == 1:
        pdp = np.ones(1)
    else:
        pdp = np.exp(-tau / params.rms_delay_spread_s)
        pdp /= pdp.sum()
    gains = (rng.standard_normal(L) + 1j * rng.standard_normal(L)) * np.sqrt(pdp / 2.0)
    f_max = params.ue_speed_mps * params.carrier_hz / SPEED_OF_LIGHT
    doppler = f_max * np.cos(rng.uniform(0.0, 2.0 * np.pi, L))
    scale = 10.0 ** (rng.normal(0.0, params.shadow_sigma_db) / 20.0) if params.shadow_sigma_db > 0 else 1.0

    f = np.arange(n_freq)[:, None]
    t = np.arange(n_time)[:, None]
    freq_resp = np.exp(-2j * np.pi * f * params.subcarrier_spacing_hz * tau[None, :])  # F x L
    time_resp = np.exp(2j * np.pi * t * params.symbol_duration_s * doppler[None, :])  # T x L
    h = scale * (freq_resp * gains[None, :]) @ time_resp.T
    return np.stack([h.real, h.imag], axis=-1)


# --- records and datasets -------------------------------------------------


def record_seed(dataset_seed: int, index: int) -> int:
    """64-bit per-record seed; any record can be regenerated from it alone."""
    ss = np.random.SeedSequence([int(dataset_seed), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def record_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (channel, noise) generators for one record."""
    ch, noise = np.random.SeedSequence(int(seed)).spawn(2)
    return np.random.default_rng(ch), np.random.default_rng(noise)


def noisy_pilots(truth: np.ndarray, pattern: DmrsPattern, snr_db: float, seed: int) -> np.ndarray:
    """Float32 noisy pilots of a float32 truth grid, reproducible from ``seed``."""
    truth = np.asarray(truth, dtype=np.float32)
    _, noise_rng = record_streams(seed)
    clean = extract_dmrs_array(truth, pattern)
    return awgn_array(clean, snr_db, float(entry_power(truth)), noise_rng).astype(np.float32)


@dataclass(frozen=True)
class SampleRecord:
    truth: ChannelGrid
    dmrs_noisy: DmrsGrid
    snr_db: float
    meta: dict


class Dataset:
    """Columnar in-memory dataset; ``truth`` is ``(N, 96, 14, 2)`` float32."""

    def __init__(self, pattern: DmrsPattern, snr_db, truth, dmrs, seeds):
        self.pattern = pattern
        self.snr_db = np.asarray(snr_db, dtype=np.float32)
        self.truth = np.asarray(truth, dtype=np.float32)
        self.dmrs = np.asarray(dmrs, dtype=np.float32)
        self.seeds = np.asarray(seeds, dtype=np.uint64)
        n = len(self.snr_db)
        if n == 0:
            raise ValueError("dataset must contain at least one record")
        if not (len(self.truth) == len(self.dmrs) == len(self.seeds) == n):
            raise ValueError("dataset columns have inconsistent lengths")

    def __len__(self):
        return len(self.snr_db)

    def __getitem__(self, i) -> SampleRecord:
        return SampleRecord(
            truth=ChannelGrid.from_array(self.truth[i]),
            dmrs_noisy=DmrsGrid.from_array(self.dmrs[i]),
            snr_db=float(self.snr_db[i]),
            meta={"seed": int(self.seeds[i])},
        )

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.pattern, self.snr_db[idx], self.truth[idx], self.dmrs[idx], self.seeds[idx])

    def norms(self) -> np.ndarray:
        """Frobenius norms of the truth grids."""
        return np.sqrt(np.sum(self.truth.astype(np.float64) ** 2, axis=(1, 2, 3)))


def generate_record(seed: int, snr_db: float, ranges: ParamRanges, pattern: DmrsPattern):
    ch_rng, _ = record_streams(seed)
    params = ranges.draw(ch_rng)
    truth = _synth_array(params, ch_rng).astype(np.float32)
    return truth, noisy_pilots(truth, pattern, snr_db, seed), params


def generate_dataset(
    count: int,
    snr_grid: Sequence[float],
    ranges: ParamRanges | None = None,
    pattern: DmrsPattern | None = None,
    seed: int = 0,
    workers: int = 1,
) -> Dataset:
    """Build ``count`` records with equal allocation across ``snr_grid`` (interleaved)."""
    ranges = ranges or ParamRanges()
    pattern = pattern or DmrsPattern()
    snr_grid = list(snr_grid)
    if count < 1 or not snr_grid or count % len(snr_grid):
        raise ValueError(f"count {count} must be a positive multiple of {len(snr_grid)} SNR points")
    snrs = np.array([snr_grid[i % len(snr_grid)] for i in range(count)], dtype=np.float32)
    seeds = [record_seed(seed, i) for i in range(count)]

    def one(i):
        return generate_record(seeds[i], float(snrs[i]), ranges, pattern)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(one, range(count)))
    else:
        out = [one(i) for i in range(count)]
    return Dataset(
        pattern,
        snrs,
        np.stack([o[0] for o in out]),
        np.stack([o[1] for o in out]),
        np.array(seeds, dtype=np.uint64),
    )


def make_dataset(count, snr_grid, ranges=None, pattern=None, seed=0, out_path=None, workers=1) -> Dataset:
    ds = generate_dataset(count, snr_grid, ranges, pattern, seed, workers)
    if out_path is not None:
        write_dataset(ds, out_path)
    return ds


def write_dataset(ds: Dataset, path) -> None:
    records = np.zeros(len(ds), dtype=RECORD_DTYPE)
    records["snr_db"] = ds.snr_db
    records["truth"] = ds.truth
    records["dmrs"] = ds.dmrs
    records["seed"] = ds.seeds
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(ds)))
        fh.write(_PATTERN.pack(*ds.pattern.freq_indices, *ds.pattern.time_indices))
        fh.write(records.tobytes())


def read_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic, not a DLRS dataset")
    if len(buf) < _HEADER.size + _PATTERN.size:
        raise TruncatedPayloadError(f"{path}: truncated payload (header incomplete)")
    _, version, count = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version mismatch, file has {version}, expected {VERSION}")
    idx = _PATTERN.unpack_from(buf, _HEADER.size)
    pattern = DmrsPattern(idx[:N_PILOT_FREQ], idx[N_PILOT_FREQ:])
    offset = _HEADER.size + _PATTERN.size
    expected = count * RECORD_DTYPE.itemsize
    if len(buf) - offset < expected:
        raise TruncatedPayloadError(
            f"{path}: truncated payload, header declares {count} records "
            f"({expected} bytes) but {len(buf) - offset} bytes remain"
        )
    if len(buf) - offset > expected:
        raise DatasetFormatError(f"{path}: {len(buf) - offset - expected} trailing bytes after payload")
    rec = np.frombuffer(buf, dtype=RECORD_DTYPE, count=count, offset=offset)
    return Dataset(pattern, rec["snr_db"], rec["truth"], rec["dmrs"], rec["seed"])


def params_dict(params: ChannelParams) -> dict:
    return asdict(params)
