"""Channel data: synthetic multipath CSI, angular-delay transform, truncation,
normalisation, NMSE and the ``.csid`` dataset file.

Dataset file layout (little-endian)::

    b"CSID" | version u16 | count u32 | Na u16 | Nt u16 | scenario u8
    | scale f32 | offset f32 | count * 2 * Na * Nt float32

Samples are stored sample-major, real plane then imaginary plane, row-major.
The normalisation record maps raw angular-delay values ``r`` to
``r * scale + offset``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .errors import DataError, FormatError, ShapeError, TruncatedError, VersionError

MAGIC = b"CSID"
VERSION = 1
_HEADER = struct.Struct("<4sHIHHBff")
HEADER_SIZE = _HEADER.size


class Scenario(enum.IntEnum):
    SYNTHETIC = 0
    CLUSTERED = 1
    IMPORTED = 2


# ---------------------------------------------------------------- transforms

def dft_matrix(n: int) -> np.ndarray:
    """Unitary DFT matrix ``F[m, k] = exp(-2j*pi*m*k/n) / sqrt(n)``."""
    idx = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(idx, idx) / n) / np.sqrt(n)


def to_angular_delay(h: np.ndarray) -> np.ndarray:
    """``F_c @ H @ F_t^H`` for H of shape (..., Nc, Nt)."""
    return np.fft.ifft(np.fft.fft(h, axis=-2, norm="ortho"), axis=-1, norm="ortho")


def from_angular_delay(hp: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_angular_delay`."""
    return np.fft.fft(np.fft.ifft(hp, axis=-2, norm="ortho"), axis=-1, norm="ortho")


def truncate(hp: np.ndarray, na: int) -> np.ndarray:
    """Keep the first ``na`` delay rows."""
    if hp.shape[-2] < na:
        raise ShapeError(f"cannot keep {na} rows of a matrix with {hp.shape[-2]} rows")
    return hp[..., :na, :]


def zero_fill(ha: np.ndarray, nc: int) -> np.ndarray:
    """Pad truncated angular-delay rows back to ``nc`` rows with zeros."""
    pad = [(0, 0)] * ha.ndim
    pad[-2] = (0, nc - ha.shape[-2])
    return np.pad(ha, pad)


def to_planes(ha: np.ndarray) -> np.ndarray:
    """Complex (..., Na, Nt) -> real (..., 2, Na, Nt)."""
    return np.stack([ha.real, ha.imag], axis=-3)


def from_planes(planes: np.ndarray) -> np.ndarray:
    return planes[..., 0, :, :] + 1j * planes[..., 1, :, :]


# ---------------------------------------------------------------- normalisation

@dataclass(frozen=True)
class Normalization:
    """Global affine map ``raw * scale + offset`` (symmetric around ``offset``)."""

    scale: float
    offset: float = 0.5

    @classmethod
    def fit(cls, raw: np.ndarray) -> "Normalization":
        peak = float(np.max(np.abs(raw))) if np.size(raw) else 0.0
        if not np.isfinite(peak) or peak == 0.0:
            raise DataError("cannot normalise zero-range data")
        scale = np.float32(0.5 / peak)
        if float(scale) * peak > 0.5:
            # float32 rounding went up; step down so the peak never clamps
            scale = np.nextafter(scale, np.float32(0))
        return cls(float(scale), 0.5)

    def apply(self, raw: np.ndarray) -> Tuple[np.ndarray, float]:
        """Return (values clamped to [0, 1], fraction of values that needed clamping)."""
        x = np.asarray(raw, dtype=np.float64) * self.scale + self.offset
        outside = (x < 0) | (x > 1)
        rate = float(outside.mean()) if x.size else 0.0
        return np.clip(x, 0.0, 1.0).astype(np.float32), rate

    def invert(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.offset) / self.scale


def normalize(raw: np.ndarray, record: Optional[Normalization] = None):
    """Returns ``(normalised, record, clamp_rate)``; fits a record when none is given."""
    record = Normalization.fit(raw) if record is None else record
    values, rate = record.apply(raw)
    return values, record, rate


def denormalize(values: np.ndarray, record: Normalization) -> np.ndarray:
    return record.invert(values)


# ---------------------------------------------------------------- metric

@dataclass(frozen=True)
class NmseResult:
    linear: float

    @property
    def db(self) -> float:
        return 10 * np.log10(self.linear) if self.linear > 0 else float("-inf")

    def __str__(self):
        return f"{self.db:.2f} dB (linear {self.linear:.4g})"


def nmse(ha, ha_hat, center: float = 0.5) -> NmseResult:
    """Mean over samples of ``||Ha - Ha_hat||^2 / ||Ha||^2`` on centred values.

    Inputs are (N, ...) batches (a single sample is accepted too); both are
    shifted by ``center`` before the ratio, so the constant-``center``
    predictor scores exactly 1 (0 dB).
    """
    a = np.asarray(ha, dtype=np.float64) - center
    b = np.asarray(ha_hat, dtype=np.float64) - center
    if a.shape != b.shape:
        raise ShapeError(f"nmse shapes differ: {a.shape} vs {b.shape}")
    if a.ndim < 2:
        a, b = a[None], b[None]
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    power = np.sum(a * a, axis=1)
    if np.any(power == 0):
        raise DataError("nmse reference sample has zero energy")
    err = np.sum((a - b) ** 2, axis=1)
    return NmseResult(float(np.mean(err / power)))


# ---------------------------------------------------------------- synthetic channels

def synthetic_channel(rng: np.random.Generator, n_paths: int, nc: int, nt: int,
                      max_delay: int, delays=None, angles=None, gains=None) -> np.ndarray:
    """One spatial-frequency channel H (nc x nt) as a sum of specular paths.

    Path p has an integer delay tap ``d_p < max_delay``, a ULA angle
    ``theta_p`` (half-wavelength spacing) and a complex Gaussian gain, so

        H[n, t] = sum_p g_p exp(2j pi n d_p / nc) exp(-1j pi t sin(theta_p))

    which puts all angular-delay energy in rows ``d_p`` after the transform.
    """
    if delays is None:
        delays = rng.integers(0, max_delay, size=n_paths)
    if angles is None:
        angles = rng.uniform(-np.pi / 2, np.pi / 2, size=n_paths)
    if gains is None:
        gains = (rng.standard_normal(n_paths) + 1j * rng.standard_normal(n_paths)) / np.sqrt(2 * n_paths)
    n = np.arange(nc)[:, None]
    t = np.arange(nt)[None, :]
    h = np.zeros((nc, nt), dtype=np.complex128)
    for d, th, g in zip(np.asarray(delays), np.asarray(angles), np.asarray(gains)):
        h += g * np.exp(2j * np.pi * n * d / nc) * np.exp(-1j * np.pi * t * np.sin(th))
    return h


@dataclass(frozen=True)
class Environment:
    """Fixed scatterer clusters shared by every sample drawn from it.

    A path picks a cluster at random, takes the cluster's delay tap plus a
    uniform offset in ``0..delay_spread`` and the cluster's angle plus
    Gaussian jitter of ``angle_spread`` radians. Cluster powers scale the
    complex Gaussian path gains.
    """

    delays: Tuple[int, ...]
    angles: Tuple[float, ...]
    powers: Tuple[float, ...]
    angle_spread: float = float(np.deg2rad(3.0))
    delay_spread: int = 1

    @classmethod
    def draw(cls, seed: int = 0, clusters: int = 6, max_delay: int = 16,
             angle_spread_deg: float = 3.0, delay_spread: int = 1) -> "Environment":
        if clusters < 1:
            raise DataError("an environment needs at least one cluster")
        if delay_spread >= max_delay:
            raise DataError(f"delay spread {delay_spread} leaves no room below {max_delay} taps")
        rng = np.random.default_rng(seed)
        delays = rng.integers(0, max_delay - delay_spread, size=clusters)
        angles = rng.uniform(-np.pi / 3, np.pi / 3, size=clusters)
        powers = rng.exponential(1.0, size=clusters)
        return cls(tuple(int(d) for d in delays), tuple(float(a) for a in angles),
                   tuple(float(p) for p in powers / powers.mean()),
                   float(np.deg2rad(angle_spread_deg)), int(delay_spread))

    @property
    def max_delay(self) -> int:
        return max(self.delays) + self.delay_spread + 1

    def paths(self, rng: np.random.Generator, n_paths: int):
        k = rng.integers(0, len(self.delays), size=n_paths)
        delays = np.asarray(self.delays)[k] + rng.integers(0, self.delay_spread + 1, size=n_paths)
        angles = np.asarray(self.angles)[k] + self.angle_spread * rng.standard_normal(n_paths)
        power = np.asarray(self.powers)[k] / n_paths
        gains = (rng.standard_normal(n_paths) + 1j * rng.standard_normal(n_paths)) * np.sqrt(power / 2)
        return delays, angles, gains


@dataclass
class CsiSample:
    h: np.ndarray           # complex (Nc, Nt), spatial-frequency
    ha: np.ndarray          # float32 (2, Na, Nt), normalised
    normalization: Normalization


@dataclass
class Dataset:
    samples: np.ndarray                     # float32 (count, 2, Na, Nt), values in [0, 1]
    normalization: Normalization
    scenario: Scenario = Scenario.SYNTHETIC
    clamp_rate: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 4 or self.samples.shape[1] != 2:
            raise ShapeError(f"dataset samples must be (count, 2, Na, Nt), got {self.samples.shape}")

    @property
    def count(self) -> int:
        return self.samples.shape[0]

    @property
    def na(self) -> int:
        return self.samples.shape[2]

    @property
    def nt(self) -> int:
        return self.samples.shape[3]

    def __len__(self):
        return self.count

    def raw(self) -> np.ndarray:
        """Complex (count, Na, Nt) angular-delay matrices before normalisation."""
        return from_planes(self.normalization.invert(self.samples))

    def subset(self, index) -> "Dataset":
        return Dataset(self.samples[index], self.normalization, self.scenario)


def generate_raw(count: int, seed: int, paths: Optional[int] = None, nc: int = 1024,
                 nt: int = 32, na: int = 32, path_range=(3, 12),
                 max_delay: Optional[int] = None,
                 environment: Optional[Environment] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Return (H stack (count, nc, nt), truncated complex Ha stack (count, na, nt)).

    Without an ``environment`` every path has independent uniform delay
    (first ``max_delay`` taps, default ``na // 2``) and angle.
    """
    if paths is not None and paths < 1:
        raise DataError(f"need at least one path, got {paths}")
    max_delay = max(1, na // 2) if max_delay is None else max_delay
    if environment is not None:
        max_delay = environment.max_delay
    if max_delay > na or max_delay > nc:
        raise DataError(f"delays up to {max_delay} taps would fall outside the first {na} rows")
    rng = np.random.default_rng(seed)
    hs = np.empty((count, nc, nt), dtype=np.complex128)
    for i in range(count):
        p = paths if paths is not None else int(rng.integers(path_range[0], path_range[1] + 1))
        if environment is None:
            hs[i] = synthetic_channel(rng, p, nc, nt, max_delay)
        else:
            d, a, g = environment.paths(rng, p)
            hs[i] = synthetic_channel(rng, p, nc, nt, max_delay, d, a, g)
    return hs, truncate(to_angular_delay(hs), na)


def generate_synthetic(count: int, paths: Optional[int] = None, seed: int = 0, nc: int = 1024,
                       nt: int = 32, na: int = 32, record: Optional[Normalization] = None,
                       environment: Optional[Environment] = None) -> Dataset:
    """Synthetic multipath dataset, normalised with ``record`` or a record fitted here.

    Pass the same ``environment`` (and training ``record``) when drawing a
    validation set for a clustered training set.
    """
    _, ha = generate_raw(count, seed, paths, nc, nt, na, environment=environment)
    values, record, rate = normalize(to_planes(ha), record)
    tag = Scenario.SYNTHETIC if environment is None else Scenario.CLUSTERED
    return Dataset(values, record, tag, rate)


# ---------------------------------------------------------------- file I/O

def dataset_save(ds: Dataset, path: Union[str, Path]) -> None:
    header = _HEADER.pack(MAGIC, VERSION, ds.count, ds.na, ds.nt, int(ds.scenario),
                          ds.normalization.scale, ds.normalization.offset)
    with open(path, "wb") as f:
        f.write(header)
        f.write(ds.samples.astype("<f4", copy=False).tobytes())


def dataset_load(path: Union[str, Path]) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        if raw[:4] != MAGIC[:len(raw[:4])]:
            raise FormatError(f"{path}: not a CSID dataset")
        raise TruncatedError(f"{path}: file shorter than the {HEADER_SIZE}-byte header")
    magic, version, count, na, nt, tag, scale, offset = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionError(f"{path}: unsupported dataset version {version}")
    if na == 0 or nt == 0:
        raise ShapeError(f"{path}: zero extent in header ({na}x{nt})")
    expected = count * 2 * na * nt * 4
    body = len(raw) - HEADER_SIZE
    if body < expected:
        raise TruncatedError(f"{path}: {body} data bytes, header implies {expected}")
    if body > expected:
        raise ShapeError(f"{path}: {body - expected} bytes beyond the {count} declared samples")
    try:
        scenario = Scenario(tag)
    except ValueError:
        raise FormatError(f"{path}: unknown scenario tag {tag}") from None
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER_SIZE).reshape(count, 2, na, nt)
    return Dataset(data.astype(np.float32), Normalization(scale, offset), scenario)


def import_raw(path: Union[str, Path], na: int = 32, nt: int = 32,
               scenario: Scenario = Scenario.IMPORTED,
               record: Normalization = Normalization(1.0, 0.0)) -> Dataset:
    """Wrap a headerless float32 array of shape (count, 2, na, nt).

    The values are taken as already normalised (the usual state of published
    COST2100-derived arrays); ``record`` describes how they relate to raw CSI.
    """
    raw = Path(path).read_bytes()
    per = 2 * na * nt * 4
    if len(raw) % per:
        raise ShapeError(f"{path}: {len(raw)} bytes is not a multiple of one {2}x{na}x{nt} sample")
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 2, na, nt)
    if data.size and (data.min() < 0 or data.max() > 1):
        raise DataError(f"{path}: imported values must already lie in [0, 1]")
    return Dataset(data.astype(np.float32), record, scenario)
