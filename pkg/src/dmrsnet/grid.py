"""Channel grids, DMRS pilot patterns and the deterministic linear stage.

Grids are kept as two real planes. The array form used throughout the
package is ``(..., freq, time, 2)`` with plane 0 = real, plane 1 = imaginary,
which matches the on-disk byte order of the dataset container.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

N_FREQ = 96
N_TIME = 14
N_PILOT_FREQ = 48
N_PILOT_TIME = 2

NMSE_DB_FLOOR = -300.0


class GridError(ValueError):
    """Raised when a grid or pattern violates its shape/finiteness contract."""


def _check_plane(name: str, plane: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    plane = np.asarray(plane, dtype=np.float64)
    if plane.shape != shape:
        raise GridError(f"{name} plane has shape {plane.shape}, expected {shape}")
    if not np.all(np.isfinite(plane)):
        raise GridError(f"{name} plane contains non-finite entries")
    return plane


@dataclass(frozen=True, eq=False)
class _Grid:
    re: np.ndarray
    im: np.ndarray

    _shape = (0, 0)

    def __post_init__(self):
        object.__setattr__(self, "re", _check_plane("re", self.re, self._shape))
        object.__setattr__(self, "im", _check_plane("im", self.im, self._shape))

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr)
        if arr.shape != (*cls._shape, 2):
            raise GridError(f"array has shape {arr.shape}, expected {(*cls._shape, 2)}")
        return cls(arr[..., 0], arr[..., 1])

    @classmethod
    def from_complex(cls, z):
        z = np.asarray(z)
        return cls(z.real, z.imag)

    def to_array(self) -> np.ndarray:
        return np.stack([self.re, self.im], axis=-1)

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return bool(np.array_equal(self.re, other.re) and np.array_equal(self.im, other.im))


class ChannelGrid(_Grid):
    """Full 96 x 14 complex channel matrix."""

    _shape = (N_FREQ, N_TIME)


class DmrsGrid(_Grid):
    """48 x 2 complex channel observations at the pilot positions."""

    _shape = (N_PILOT_FREQ, N_PILOT_TIME)


@dataclass(frozen=True)
class DmrsPattern:
    """Pilot positions on the time-frequency plane (zero-based indices)."""

    freq_indices: tuple[int, ...] = field(default_factory=lambda: tuple(range(0, N_FREQ, 2)))
    time_indices: tuple[int, ...] = (3, 11)

    def __post_init__(self):
        f = tuple(int(i) for i in self.freq_indices)
        t = tuple(int(i) for i in self.time_indices)
        object.__setattr__(self, "freq_indices", f)
        object.__setattr__(self, "time_indices", t)
        _check_indices("freq", f, N_PILOT_FREQ, N_FREQ)
        _check_indices("time", t, N_PILOT_TIME, N_TIME)

    @classmethod
    def one_based_odd(cls) -> "DmrsPattern":
        """The alternative reading of "odd bins": zero-based 1, 3, ..., 95."""
        return cls(tuple(range(1, N_FREQ, 2)), (3, 11))


def _check_indices(axis: str, idx: Sequence[int], count: int, limit: int) -> None:
    if len(idx) != count:
        raise GridError(f"{axis} pattern needs {count} indices, got {len(idx)}")
    if any(i < 0 or i >= limit for i in idx):
        raise GridError(f"{axis} pattern indices must lie in [0, {limit - 1}]")
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise GridError(f"{axis} pattern indices must be strictly increasing")


@dataclass(frozen=True)
class CsifFeatures:
    mean: float
    variance: float
    snr_db: float

    def __post_init__(self):
        vals = (self.mean, self.variance, self.snr_db)
        if not all(np.isfinite(v) for v in vals):
            raise GridError("CSIF features must be finite")
        if self.variance < 0:
            raise GridError(f"variance must be non-negative, got {self.variance}")

    def as_array(self) -> np.ndarray:
        return np.array([self.mean, self.variance, self.snr_db], dtype=np.float64)


# --- array-level helpers (batched over leading axes) ----------------------


def extract_dmrs_array(grid: np.ndarray, pattern: DmrsPattern) -> np.ndarray:
    """Select pilot positions from ``(..., F, T, 2)`` arrays."""
    f = np.asarray(pattern.freq_indices)
    t = np.asarray(pattern.time_indices)
    return grid[..., f[:, None], t[None, :], :]


def axis_interp_matrix(pilots: Sequence[int], n_out: int) -> np.ndarray:
    """Linear interpolation/extrapolation weights of shape ``(n_out, len(pilots))``.

    Each output row is a two-point linear fit through the bracketing pilots;
    outside the pilot span the two nearest pilots are extended linearly.
    Rows at pilot positions are unit vectors, so pilots are reproduced exactly.
    """
    p = np.asarray(pilots, dtype=np.int64)
    n = len(p)
    mat = np.zeros((n_out, n))
    if n == 1:
        mat[:, 0] = 1.0
        return mat
    for x in range(n_out):
        j = int(np.searchsorted(p, x, side="right")) - 1
        j = min(max(j, 0), n - 2)
        w = (x - p[j]) / (p[j + 1] - p[j])
        if w == 0.0:
            mat[x, j] = 1.0
        elif w == 1.0:
            mat[x, j + 1] = 1.0
        else:
            mat[x, j] = 1.0 - w
            mat[x, j + 1] = w
    return mat


def interp_matrices(pattern: DmrsPattern, n_freq: int = N_FREQ, n_time: int = N_TIME):
    """Return ``(freq_matrix [F x 48], time_matrix [T x 2])``."""
    return (
        axis_interp_matrix(pattern.freq_indices, n_freq),
        axis_interp_matrix(pattern.time_indices, n_time),
    )


def linear_interpolate_array(dmrs: np.ndarray, pattern: DmrsPattern) -> np.ndarray:
    """Separable interpolation of ``(..., 48, 2, 2)`` pilots to ``(..., 96, 14, 2)``."""
    kf, kt = interp_matrices(pattern)
    return np.einsum("fk,...ksp,ts->...ftp", kf, np.asarray(dmrs, dtype=np.float64), kt)


def entry_power(arr: np.ndarray) -> np.ndarray:
    """Mean per-complex-entry power over the trailing ``(F, T, 2)`` axes."""
    arr = np.asarray(arr, dtype=np.float64)
    return np.sum(arr**2, axis=(-3, -2, -1)) / (arr.shape[-3] * arr.shape[-2])


def nmse_array(truth: np.ndarray, estimate: np.ndarray) -> np.ndarray:
    """Batched squared-Frobenius NMSE over the trailing three axes."""
    truth = np.asarray(truth, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    den = np.sum(truth**2, axis=(-3, -2, -1))
    if np.any(den <= 0):
        raise GridError("NMSE is undefined for a zero-norm ground truth")
    num = np.sum((truth - estimate) ** 2, axis=(-3, -2, -1))
    return num / den


# --- typed operations -----------------------------------------------------


def extract_dmrs(grid: ChannelGrid, pattern: DmrsPattern) -> DmrsGrid:
    return DmrsGrid.from_array(extract_dmrs_array(grid.to_array(), pattern))


def add_awgn(dmrs: DmrsGrid, snr_db: float, noise_ref_power: float, rng: np.random.Generator) -> DmrsGrid:
    """Add complex white Gaussian noise at ``snr_db`` relative to ``noise_ref_power``.

    Each real and imaginary entry receives variance ``sigma^2 / 2`` with
    ``sigma^2 = noise_ref_power * 10 ** (-snr_db / 10)``.
    """
    noisy = awgn_array(dmrs.to_array(), snr_db, noise_ref_power, rng)
    return DmrsGrid.from_array(noisy)


def awgn_array(arr: np.ndarray, snr_db: float, noise_ref_power: float, rng: np.random.Generator) -> np.ndarray:
    if not noise_ref_power > 0:
        raise GridError(f"noise_ref_power must be positive, got {noise_ref_power}")
    sigma2 = noise_ref_power * 10.0 ** (-snr_db / 10.0)
    arr = np.asarray(arr, dtype=np.float64)
    return arr + rng.standard_normal(arr.shape) * np.sqrt(sigma2 / 2.0)


def frob_norm(grid: ChannelGrid) -> float:
    return float(np.sqrt(np.sum(grid.re**2) + np.sum(grid.im**2)))


def nmse(truth: ChannelGrid, estimate: ChannelGrid) -> float:
    """Squared-Frobenius NMSE ``||H - H_est||^2 / ||H||^2``."""
    if frob_norm(truth) == 0:
        raise GridError("NMSE is undefined for a zero-norm ground truth")
    if truth == estimate:
        return 0.0
    return float(nmse_array(truth.to_array(), estimate.to_array()))


def to_db(value) -> np.ndarray | float:
    """``10 log10(value)`` clamped below at -300 dB."""
    v = np.asarray(value, dtype=np.float64)
    with np.errstate(divide="ignore"):
        out = np.maximum(10.0 * np.log10(v), NMSE_DB_FLOOR)
    return float(out) if out.ndim == 0 else out


def nmse_db(truth: ChannelGrid, estimate: ChannelGrid) -> float:
    return to_db(nmse(truth, estimate))


def stats(dmrs: DmrsGrid, snr_db: float) -> CsifFeatures:
    """Mean and population variance over all real scalars, plus the SNR label."""
    mean, var = stats_array(dmrs.to_array(), snr_db)[:2]
    return CsifFeatures(mean=float(mean), variance=float(var), snr_db=float(snr_db))


def stats_array(dmrs: np.ndarray, snr_db) -> np.ndarray:
    """Batched ``[mean, variance, snr_db]`` rows for ``(..., 48, 2, 2)`` inputs.

    Values are shifted by the first scalar before the two-pass variance, so
    constant inputs give exactly zero variance.
    """
    dmrs = np.asarray(dmrs, dtype=np.float64)
    flat = dmrs.reshape(*dmrs.shape[:-3], -1)
    shifted = flat - flat[..., :1]
    m = shifted.mean(axis=-1)
    var = ((shifted - m[..., None]) ** 2).mean(axis=-1)
    snr = np.broadcast_to(np.asarray(snr_db, dtype=np.float64), m.shape)
    return np.stack([flat[..., 0] + m, var, snr], axis=-1)


def linear_interpolate(dmrs: DmrsGrid, pattern: DmrsPattern) -> ChannelGrid:
    """Bilinear reconstruction of the full grid from the pilot sub-grid."""
    return ChannelGrid.from_array(linear_interpolate_array(dmrs.to_array(), pattern))
