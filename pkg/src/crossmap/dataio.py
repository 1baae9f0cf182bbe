"""Trial data model, synthetic paired-subject generator, splits and trial files.

The synthetic pair stands in for two recorded subjects performing the same
K-target task. Class templates are band-limited sums of sinusoids whose
amplitudes are cosine-tuned to the target angle. The destination subject sees
each source template through a fixed warp: channel mixing, an elementwise odd
saturating nonlinearity, and a per-channel baseline shift.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateClassError, FormatError, SizeError

TRIAL_MAGIC = b"XTRL"
TRIAL_VERSION = 1
_TRIAL_HEADER = struct.Struct("<4sHIIIdI")


@dataclass(eq=False)
class TrialSet:
    """Labeled multichannel trials of one subject.

    ``signals`` has shape (n_trials, n_channels, n_samples) and dtype float32;
    ``labels`` holds integers in 1..n_classes.
    """

    labels: np.ndarray
    signals: np.ndarray
    n_classes: int
    sample_rate_hz: float = 1000.0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.signals = np.asarray(self.signals, dtype=np.float32)
        if self.signals.ndim != 3:
            raise SizeError("signals must be (n_trials, n_channels, n_samples)")
        if self.labels.shape != (self.signals.shape[0],):
            raise SizeError("one label per trial required")
        if self.n_channels < 1:
            raise SizeError("n_channels must be positive")
        if self.n_samples < 2:
            raise SizeError("n_samples must be at least 2")
        if self.n_classes < 1:
            raise SizeError("n_classes must be positive")
        if self.labels.size and (self.labels.min() < 1 or self.labels.max() > self.n_classes):
            raise SizeError(f"labels must lie in 1..{self.n_classes}")
        if not self.sample_rate_hz > 0:
            raise SizeError("sample_rate_hz must be positive")

    @property
    def n_trials(self):
        return self.signals.shape[0]

    @property
    def n_channels(self):
        return self.signals.shape[1]

    @property
    def n_samples(self):
        return self.signals.shape[2]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return TrialSet(self.labels[indices], self.signals[indices], self.n_classes, self.sample_rate_hz)

    def __eq__(self, other):
        if not isinstance(other, TrialSet):
            return NotImplemented
        return (
            self.n_classes == other.n_classes
            and self.sample_rate_hz == other.sample_rate_hz
            and self.signals.shape == other.signals.shape
            and np.array_equal(self.labels, other.labels)
            and self.signals.tobytes() == other.signals.tobytes()
        )


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 8
    n_channels: int = 8
    n_samples: int = 256
    noise_sigma: float = 6.0
    n_trials_per_subject: int = 1400
    template_harmonics: int = 2
    transfer_warp_gain: float = 3.0
    seed: int = 0
    sample_rate_hz: float = 1000.0
    # amplitude of the per-trial smooth jitter (DC and template harmonics)
    jitter_sigma: float = 0.3
    # "random": well-conditioned mixing plus baseline shift; "identity": neither
    mixing: str = "random"
    baseline_offset: float = 100.0

    def validate(self):
        if self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2")
        if self.n_channels < 1:
            raise ConfigError("n_channels must be positive")
        if self.n_samples < 2:
            raise ConfigError("n_samples must be at least 2")
        if self.n_trials_per_subject < 1:
            raise ConfigError("n_trials_per_subject must be positive")
        if self.template_harmonics < 1 or not self.template_harmonics < self.n_samples / 2:
            raise ConfigError("template_harmonics must satisfy 1 <= H < n_samples/2")
        if not self.noise_sigma >= 0:
            raise ConfigError("noise_sigma must be nonnegative")
        if not self.jitter_sigma >= 0:
            raise ConfigError("jitter_sigma must be nonnegative")
        if self.mixing not in ("random", "identity"):
            raise ConfigError(f"unknown mixing {self.mixing!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if not self.sample_rate_hz > 0:
            raise ConfigError("sample_rate_hz must be positive")
        if not np.isfinite(self.transfer_warp_gain):
            raise ConfigError("transfer_warp_gain must be finite")


def odd_warp(u, gain):
    """Elementwise odd, strictly increasing nonlinearity ``tanh(g u) / tanh(g)``.

    Reduces to the identity at ``gain == 0`` and saturates at +-1 as the gain
    grows, so signals of unit scale keep unit scale.
    """
    g = abs(float(gain))
    if g == 0.0:
        return np.array(u, dtype=np.float64, copy=True)
    return np.tanh(g * u) / np.tanh(g)


@dataclass(frozen=True)
class SyntheticTruth:
    """Ground truth of a synthetic pair: templates and the transfer warp."""

    source_templates: np.ndarray  # (K, N, T)
    mixing: np.ndarray  # (N, N)
    offset: np.ndarray  # (N,)
    gain: float
    class_angles: np.ndarray  # (K,)

    def warp(self, signal):
        """Map an (..., N, T) source-space signal into the destination space."""
        mixed = np.einsum("ij,...jt->...it", self.mixing, signal)
        return odd_warp(mixed, self.gain) + self.offset[:, None]

    @property
    def destination_templates(self):
        return self.warp(self.source_templates)


def _random_mixing(n, rng):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q = q * np.sign(np.diag(r))
    scales = rng.uniform(0.8, 1.25, size=n)
    return q * scales[None, :]


def synthetic_truth(config: SynthConfig) -> SyntheticTruth:
    """Rebuild the ground truth of ``generate_synthetic_pair(config)``."""
    config.validate()
    truth_rng = np.random.default_rng(np.random.SeedSequence(int(config.seed)).spawn(3)[0])
    return _build_truth(config, truth_rng)


def _build_truth(config, rng):
    K, N, T, H = config.n_classes, config.n_channels, config.n_samples, config.template_harmonics
    angles = 2.0 * np.pi * np.arange(K) / K
    t = np.arange(T)
    harmonics = np.exp(2j * np.pi * np.outer(np.arange(1, H + 1), t) / T)  # (H, T)

    def cplx(*shape):
        return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)

    common = 0.5 * cplx(N, H)
    tune_cos = cplx(N, H)
    tune_sin = cplx(N, H)
    coef = (
        common[None]
        + np.cos(angles)[:, None, None] * tune_cos[None]
        + np.sin(angles)[:, None, None] * tune_sin[None]
    )  # (K, N, H)
    templates = np.real(np.einsum("knh,ht->knt", coef, harmonics))

    if config.mixing == "identity":
        mixing = np.eye(N)
        offset = np.zeros(N)
    else:
        mixing = _random_mixing(N, rng)
        offset = config.baseline_offset * rng.choice([-1.0, 1.0], size=N) * rng.uniform(0.5, 1.0, size=N)
    return SyntheticTruth(templates, mixing, offset, float(config.transfer_warp_gain), angles)


def _balanced_labels(n, k, rng):
    labels = np.repeat(np.arange(1, k + 1), n // k)
    extra = rng.choice(k, size=n % k, replace=False) + 1
    return rng.permutation(np.concatenate([labels, extra]))


def _smooth_jitter(n_trials, config, rng):
    N, T, H = config.n_channels, config.n_samples, config.template_harmonics
    t = np.arange(T)
    basis = [np.ones(T)]
    for h in range(1, H + 1):
        basis.append(np.cos(2 * np.pi * h * t / T))
        basis.append(np.sin(2 * np.pi * h * t / T))
    basis = np.asarray(basis)  # (2H+1, T)
    weights = config.jitter_sigma * rng.standard_normal((n_trials, N, basis.shape[0]))
    return weights @ basis


def _draw_subject(templates, config, rng):
    n = config.n_trials_per_subject
    labels = _balanced_labels(n, config.n_classes, rng)
    signals = templates[labels - 1] + _smooth_jitter(n, config, rng)
    if config.noise_sigma > 0:
        signals = signals + config.noise_sigma * rng.standard_normal(signals.shape)
    return TrialSet(labels, signals.astype(np.float32), config.n_classes, config.sample_rate_hz)


def generate_synthetic_pair(config: SynthConfig) -> tuple[TrialSet, TrialSet]:
    """Draw a (source, destination) pair of trial sets.

    Labels are drawn independently per subject, so there is no trial-level
    correspondence between the two sets. Use :func:`synthetic_truth` to query
    the templates and the warp.
    """
    config.validate()
    truth_seq, src_seq, dst_seq = np.random.SeedSequence(int(config.seed)).spawn(3)
    truth = _build_truth(config, np.random.default_rng(truth_seq))
    source = _draw_subject(truth.source_templates, config, np.random.default_rng(src_seq))
    destination = _draw_subject(truth.destination_templates, config, np.random.default_rng(dst_seq))
    return source, destination


@dataclass(frozen=True)
class Split:
    train_indices: np.ndarray
    test_indices: np.ndarray = field(repr=False)

    def is_disjoint(self):
        return np.intersect1d(self.train_indices, self.test_indices).size == 0


def split_trials(ts, n_train: int, n_test: int, seed) -> Split:
    """Uniformly random disjoint train/test index sets of the requested sizes."""
    total = ts.n_trials if isinstance(ts, TrialSet) else int(ts)
    if n_train < 1 or n_test < 1:
        raise SizeError("train and test sizes must both be positive")
    if n_train + n_test > total:
        raise SizeError(f"requested {n_train}+{n_test} trials but only {total} available")
    perm = np.random.default_rng(seed).permutation(total)
    return Split(np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_test]))


def write_trials(path, ts: TrialSet):
    if ts.n_classes > 255:
        raise FormatError("n_classes", "labels are stored in one byte, so K must be at most 255")
    header = _TRIAL_HEADER.pack(
        TRIAL_MAGIC, TRIAL_VERSION, ts.n_channels, ts.n_samples, ts.n_classes,
        float(ts.sample_rate_hz), ts.n_trials,
    )
    per_trial = ts.n_channels * ts.n_samples * 4
    payload = bytearray(ts.n_trials * (1 + per_trial))
    body = ts.signals.astype("<f4", copy=False).reshape(ts.n_trials, -1)
    for i in range(ts.n_trials):
        off = i * (1 + per_trial)
        payload[off] = int(ts.labels[i])
        payload[off + 1:off + 1 + per_trial] = body[i].tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_trials(path) -> TrialSet:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _TRIAL_HEADER.size:
        raise FormatError("header", "file shorter than the fixed header")
    magic, version, n_ch, n_s, k, rate, count = _TRIAL_HEADER.unpack_from(data)
    if magic != TRIAL_MAGIC:
        raise FormatError("magic", f"expected {TRIAL_MAGIC!r}, got {magic!r}")
    if version != TRIAL_VERSION:
        raise FormatError("version", f"unsupported version {version}")
    if n_ch < 1:
        raise FormatError("n_channels", "must be positive")
    if n_s < 2:
        raise FormatError("n_samples", f"must be at least 2, got {n_s}")
    if not 1 <= k <= 255:
        raise FormatError("n_classes", f"must lie in 1..255, got {k}")
    if not rate > 0:
        raise FormatError("sample_rate_hz", "must be positive")
    per_trial = n_ch * n_s * 4
    expected = _TRIAL_HEADER.size + count * (1 + per_trial)
    if len(data) < expected:
        raise FormatError("payload", f"truncated: expected {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise FormatError("payload", "trailing bytes after the last trial")
    records = np.frombuffer(data, dtype=np.uint8, offset=_TRIAL_HEADER.size).reshape(count, 1 + per_trial)
    labels = records[:, 0].astype(np.int64)
    bad = (labels < 1) | (labels > k)
    if bad.any():
        i = int(np.argmax(bad))
        raise FormatError("label", f"trial {i} has label {labels[i]} outside 1..{k}")
    signals = np.ascontiguousarray(records[:, 1:]).view("<f4").reshape(count, n_ch, n_s)
    return TrialSet(labels, signals.astype(np.float32), int(k), float(rate))


def class_conditional_means(fm) -> np.ndarray:
    """K x D matrix whose row k-1 averages the feature rows labelled k."""
    rows, labels, k = fm.rows, fm.labels, fm.n_classes
    means = np.empty((k, rows.shape[1]))
    for c in range(1, k + 1):
        mask = labels == c
        if not mask.any():
            raise DegenerateClassError(f"class {c} has no rows")
        means[c - 1] = rows[mask].mean(axis=0)
    return means
