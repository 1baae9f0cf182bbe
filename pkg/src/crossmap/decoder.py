"""Destination-space classifiers: an MLP decoder and an LDA baseline."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConditioningError, ConfigError, DegenerateClassError, ShapeError

CHECKPOINT_VERSION = 1


@dataclass
class DecoderConfig:
    hidden: int = 350
    epochs: int = 60
    batch_size: int = 75
    lr: float = 0.5
    gamma: float = 0.99
    rho: float = 0.95
    eps: float = 1e-6
    batch_norm: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.hidden < 1 or self.epochs < 0 or self.batch_size < 2 or self.lr < 0:
            raise ConfigError("invalid decoder configuration")


@dataclass
class MlpDecoder:
    mlp: nn.Mlp
    n_classes: int

    @property
    def dim(self):
        return self.mlp.in_dim

    def scores(self, rows):
        out, _ = nn.mlp_forward(self.mlp, rows, "infer")
        return out


@dataclass
class LdaDecoder:
    means: np.ndarray  # K x D
    precision: np.ndarray  # D x D
    priors: np.ndarray  # K

    @property
    def n_classes(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def scores(self, rows):
        rows = np.asarray(rows, dtype=np.float64)
        proj = self.means @ self.precision  # K x D
        bias = -0.5 * np.sum(proj * self.means, axis=1) + np.log(self.priors)
        return rows @ proj.T + bias


def _check_classes(fm):
    if fm.n_classes < 2:
        raise DegenerateClassError("at least two classes are needed")
    counts = np.bincount(fm.labels, minlength=fm.n_classes + 1)[1:]
    if (counts == 0).any():
        raise DegenerateClassError(f"classes {list(np.flatnonzero(counts == 0) + 1)} have no rows")
    return counts


def train_mlp_decoder(fm, config: DecoderConfig | None = None) -> MlpDecoder:
    """Single-hidden-layer softmax classifier trained with Adadelta."""
    config = config or DecoderConfig()
    _check_classes(fm)
    rng = np.random.default_rng(config.seed)
    mlp = nn.init_mlp([fm.dim, config.hidden, fm.n_classes], rng, config.batch_norm)
    state = nn.AdadeltaState.create(mlp.arrays(), lr=config.lr, rho=config.rho,
                                    eps=config.eps, gamma=config.gamma)
    X, y = fm.rows, fm.labels - 1
    n_batches = max(1, int(np.ceil(X.shape[0] / config.batch_size)))
    if config.batch_norm and X.shape[0] // n_batches < 2:
        raise ConfigError("too few rows for batch-norm minibatches")
    for _ in range(config.epochs):
        for idx in np.array_split(rng.permutation(X.shape[0]), n_batches):
            logits, cache = nn.mlp_forward(mlp, X[idx], "train")
            _, dlogits = nn.softmax_cross_entropy(logits, y[idx])
            grads, _ = nn.mlp_backward(cache, dlogits)
            nn.adadelta_step(state, mlp, grads)
        nn.lr_schedule(state)
    return MlpDecoder(mlp, fm.n_classes)


def train_lda(fm, ridge: float = 0.0) -> LdaDecoder:
    """Closed-form LDA with pooled within-class covariance plus ``ridge * I``."""
    if ridge < 0:
        raise ConfigError("ridge must be nonnegative")
    counts = _check_classes(fm)
    K, D = fm.n_classes, fm.dim
    means = np.stack([fm.rows[fm.labels == k].mean(axis=0) for k in range(1, K + 1)])
    centered = fm.rows - means[fm.labels - 1]
    dof = max(fm.n_rows - K, 1)
    cov = centered.T @ centered / dof + ridge * np.eye(D)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError("pooled covariance is singular; increase the ridge") from exc
    if np.linalg.cond(chol) ** 2 > 1e14:
        raise ConditioningError("pooled covariance is numerically singular; increase the ridge")
    inv_chol = np.linalg.inv(chol)
    precision = inv_chol.T @ inv_chol
    precision = 0.5 * (precision + precision.T)
    if np.all(counts == counts[0]):
        priors = np.full(K, 1.0 / K)
    else:
        priors = counts / counts.sum()
    return LdaDecoder(means, precision, priors)


def predict(model, rows) -> np.ndarray:
    """Labels in 1..K; ties go to the smallest class index."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != model.dim:
        raise ShapeError(f"expected rows of width {model.dim}, got shape {rows.shape}")
    return np.argmax(model.scores(rows), axis=1) + 1


def accuracy(model, fm, rows=None) -> float:
    """Fraction of rows of ``fm`` (or of ``rows`` labelled by ``fm``) predicted exactly."""
    rows = fm.rows if rows is None else rows
    return float(np.mean(predict(model, rows) == fm.labels))


def save_decoder(path, model, whitener=None):
    arrays = {}
    doc = {"kind": "decoder", "version": CHECKPOINT_VERSION}
    if isinstance(model, MlpDecoder):
        a, meta = nn.mlp_to_dict(model.mlp, "mlp.")
        arrays.update(a)
        doc.update(variant="mlp", layers=meta, n_classes=model.n_classes)
    else:
        arrays.update({"lda.means": model.means, "lda.precision": model.precision,
                       "lda.priors": model.priors})
        doc["variant"] = "lda"
    if whitener is not None:
        arrays.update({"whiten.mean": whitener.mean, "whiten.matrix": whitener.matrix,
                       "whiten.inverse": whitener.inverse})
    doc["whitened"] = whitener is not None
    np.savez(path, __meta__=np.array(json.dumps(doc)), **arrays)


def load_decoder(path):
    """Returns ``(model, whitener_or_None)``."""
    from .cvae import Whitener

    with np.load(path, allow_pickle=False) as data:
        doc = json.loads(str(data["__meta__"]))
        if doc.get("kind") != "decoder" or doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError("not a decoder checkpoint of a supported version")
        arrays = {k: data[k] for k in data.files}
    if doc["variant"] == "mlp":
        model = MlpDecoder(nn.mlp_from_dict(arrays, doc["layers"], "mlp."), doc["n_classes"])
    else:
        model = LdaDecoder(arrays["lda.means"], arrays["lda.precision"], arrays["lda.priors"])
    whitener = None
    if doc["whitened"]:
        whitener = Whitener(arrays["whiten.mean"], arrays["whiten.matrix"], arrays["whiten.inverse"])
    return model, whitener




