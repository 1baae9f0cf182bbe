"""Fourier projection and Pinsker shrinkage features.

Each channel is projected onto the orthonormal discrete Fourier basis, the
coefficients are shrunk by Pinsker's minimax weights, and the retained
coefficients are written in real Cartesian form:
``[Re c0, Re c1, Im c1, ..., Re c_{L-1}, Im c_{L-1}]`` (2L-1 values).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, RangeError, ShapeError

FEATURE_MAGIC = b"XFEA"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sHIIIII")


def fourier_project(signal, L: int) -> np.ndarray:
    """Orthonormal DFT coefficients for frequencies 0..L-1 along the last axis.

    Coefficient l is ``T**-0.5 * sum_t x[t] exp(-2 pi i l t / T)``.
    """
    x = np.asarray(signal, dtype=np.float64)
    T = x.shape[-1]
    if not 1 <= L <= T // 2 + 1:
        raise RangeError(f"L must lie in 1..{T // 2 + 1} for T={T}, got {L}")
    coef = np.fft.rfft(x, axis=-1)[..., :L] / np.sqrt(T)
    coef[..., 0] = coef[..., 0].real
    return coef


def ellipsoid_weights(alpha: float, count: int) -> np.ndarray:
    """Semi-axis sequence a_1=0, a_2m = a_2m+1 = (2m)**alpha (1-based)."""
    idx = np.arange(1, count + 1)
    a = (2.0 * (idx // 2)) ** alpha
    a[0] = 0.0
    return a


def pinsker_weights(alpha: float, mu: float, count: int) -> np.ndarray:
    if not alpha > 0 or not mu > 0 or count < 1:
        raise ConfigError("pinsker_weights needs alpha>0, mu>0, count>=1")
    return np.maximum(0.0, 1.0 - ellipsoid_weights(alpha, count) / mu)


def select_L(alpha: float, mu: float) -> int:
    """Number of complex coefficients (DC included) with a nonzero weight."""
    if not alpha > 0 or not mu > 0:
        raise ConfigError("select_L needs alpha>0 and mu>0")
    L = 1
    while (2.0 * L) ** alpha < mu:
        L += 1
    return L


def min_mu_for_L(alpha: float, L: int) -> float:
    """Smallest representable mu for which ``select_L(alpha, mu) == L``."""
    if L < 1:
        raise ConfigError("L must be at least 1")
    if L == 1:
        return float(np.nextafter(0.0, 1.0))
    return float(np.nextafter((2.0 * (L - 1)) ** alpha, np.inf))


@dataclass(frozen=True)
class PinskerConfig:
    """Either ``L`` or ``mu`` is primary.

    With ``L`` given, the implied threshold is the largest mu that still
    selects L, ``(2L)**alpha``, so harmonic m is weighted by ``1-(m/L)**alpha``.
    """

    alpha: float = 1.0
    mu: float | None = None
    L: int | None = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if (self.mu is None) == (self.L is None):
            raise ConfigError("exactly one of mu and L must be given")
        if self.L is not None and self.L < 1:
            raise ConfigError("L must be at least 1")
        if self.mu is not None and not self.mu > 0:
            raise ConfigError("mu must be positive")

    @property
    def n_coeffs(self) -> int:
        return self.L if self.L is not None else select_L(self.alpha, self.mu)

    @property
    def threshold(self) -> float:
        return self.mu if self.mu is not None else (2.0 * self.L) ** self.alpha

    def real_weights(self) -> np.ndarray:
        return pinsker_weights(self.alpha, self.threshold, 2 * self.n_coeffs - 1)


@dataclass(eq=False)
class FeatureMatrix:
    rows: np.ndarray
    labels: np.ndarray
    n_classes: int
    n_channels: int
    L: int

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.rows.ndim != 2:
            raise ShapeError("rows must be a 2-D matrix")
        if self.rows.shape[1] != self.n_channels * (2 * self.L - 1):
            raise ShapeError(
                f"D={self.rows.shape[1]} does not match N*(2L-1)={self.n_channels * (2 * self.L - 1)}"
            )
        if self.labels.shape != (self.rows.shape[0],):
            raise ShapeError("row count must equal label count")
        if self.labels.size and (self.labels.min() < 1 or self.labels.max() > self.n_classes):
            raise ShapeError(f"labels must lie in 1..{self.n_classes}")

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return self.with_rows(self.rows[indices], self.labels[indices])

    def with_rows(self, rows, labels=None):
        return FeatureMatrix(rows, self.labels if labels is None else labels,
                             self.n_classes, self.n_channels, self.L)

    def __eq__(self, other):
        if not isinstance(other, FeatureMatrix):
            return NotImplemented
        return (
            (self.n_classes, self.n_channels, self.L) == (other.n_classes, other.n_channels, other.L)
            and self.rows.shape == other.rows.shape
            and np.array_equal(self.labels, other.labels)
            and self.rows.tobytes() == other.rows.tobytes()
        )


def _real_cartesian(coef):
    """(..., L) complex -> (..., 2L-1) real, DC imaginary part dropped."""
    L = coef.shape[-1]
    out = np.empty(coef.shape[:-1] + (2 * L - 1,))
    out[..., 0] = coef[..., 0].real
    out[..., 1::2] = coef[..., 1:].real
    out[..., 2::2] = coef[..., 1:].imag
    return out


def extract_features(ts, cfg: PinskerConfig) -> FeatureMatrix:
    """Pinsker features of every trial, channels concatenated in index order."""
    L = cfg.n_coeffs
    coef = fourier_project(ts.signals, L)  # (n, N, L)
    feats = _real_cartesian(coef) * cfg.real_weights()
    rows = feats.reshape(ts.n_trials, -1)
    return FeatureMatrix(rows, ts.labels.copy(), ts.n_classes, ts.n_channels, L)


def write_features(path, fm: FeatureMatrix):
    header = _FEATURE_HEADER.pack(
        FEATURE_MAGIC, FEATURE_VERSION, fm.n_rows, fm.dim, fm.n_classes, fm.n_channels, fm.L
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(fm.labels.astype("<i4").tobytes())
        fh.write(fm.rows.astype("<f8").tobytes())


def read_features(path) -> FeatureMatrix:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _FEATURE_HEADER.size:
        raise FormatError("header", "file shorter than the fixed header")
    magic, version, n, d, k, n_ch, L = _FEATURE_HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise FormatError("magic", f"expected {FEATURE_MAGIC!r}, got {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError("version", f"unsupported version {version}")
    if L < 1 or n_ch < 1 or d != n_ch * (2 * L - 1):
        raise FormatError("dim", f"D={d} inconsistent with N={n_ch}, L={L}")
    if k < 1:
        raise FormatError("n_classes", "must be positive")
    expected = _FEATURE_HEADER.size + 4 * n + 8 * n * d
    if len(data) != expected:
        raise FormatError("payload", f"expected {expected} bytes, got {len(data)}")
    off = _FEATURE_HEADER.size
    labels = np.frombuffer(data, dtype="<i4", count=n, offset=off).astype(np.int64)
    if n and (labels.min() < 1 or labels.max() > k):
        raise FormatError("label", f"labels outside 1..{k}")
    rows = np.frombuffer(data, dtype="<f8", count=n * d, offset=off + 4 * n).reshape(n, d)
    return FeatureMatrix(rows.astype(np.float64), labels, int(k), int(n_ch), int(L))
