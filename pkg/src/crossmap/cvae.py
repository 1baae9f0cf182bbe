"""Conditional VAE mapping source-subject features into destination space.

Three MLP heads with diagonal-Gaussian outputs (mean, log-variance):

* prior       p(Z | X)      input D   -> 2M
* recognition q(Z | X, Y)   input 2D  -> 2M
* generation  p(Y | X, Z)   input D+M -> 2D

Training maximises the Gaussian ELBO in its doubled form (no 1/2 factors, no
log 2 pi constants), which has the same optimum as the textbook bound.
Destination features are whitened before training; the generator works in
the whitened space.
"""

from __future__ import annotations

import enum
import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import nn
from .dataio import class_conditional_means
from .errors import (
    ConditioningWarning,
    ConfigError,
    DegenerateClassError,
    NumericError,
    ShapeError,
    StateError,
)

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
EIG_FLOOR = 1e-8
CHECKPOINT_VERSION = 1


class CorrespondenceMode(str, enum.Enum):
    RANDOM = "random"
    CLASS_MEAN = "classmean"


@dataclass
class Whitener:
    """Affine transform ``z = (x - mean) @ matrix`` with identity output covariance."""

    mean: np.ndarray
    matrix: np.ndarray
    inverse: np.ndarray

    @classmethod
    def fit(cls, rows, floor=EIG_FLOOR):
        x = np.asarray(rows, dtype=np.float64)
        mean = x.mean(axis=0)
        xc = x - mean
        cov = xc.T @ xc / max(x.shape[0] - 1, 1)
        evals, evecs = np.linalg.eigh(cov)
        top = max(evals.max(), 0.0)
        limit = floor * top if top > 0 else floor
        if (evals < limit).any():
            warnings.warn(
                f"{int((evals < limit).sum())} covariance eigenvalues floored at {limit:.3g}",
                ConditioningWarning, stacklevel=2,
            )
        evals = np.maximum(evals, limit)
        # symmetric (ZCA) whitening: already-white data maps to itself
        matrix = (evecs / np.sqrt(evals)) @ evecs.T
        inverse = (evecs * np.sqrt(evals)) @ evecs.T
        return cls(mean, matrix, inverse)

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.matrix

    def invert(self, z):
        return np.asarray(z, dtype=np.float64) @ self.inverse + self.mean


def whiten_fit(fm):
    return Whitener.fit(fm.rows)


def whiten_apply(w: Whitener, x):
    return w.apply(x)


def whiten_invert(w: Whitener, z):
    return w.invert(z)


def gaussian_kl(mu_r, var_r, mu_p, var_p) -> float:
    """KL(N(mu_r, diag var_r) || N(mu_p, diag var_p)), summed over all entries."""
    var_r = np.asarray(var_r, dtype=np.float64)
    var_p = np.asarray(var_p, dtype=np.float64)
    if (var_r <= 0).any() or (var_p <= 0).any():
        raise NumericError("variances must be positive")
    diff = np.asarray(mu_r, dtype=np.float64) - mu_p
    return float(0.5 * np.sum(np.log(var_p / var_r) + (var_r + diff ** 2) / var_p - 1.0))


def clamp_logvar(logvar):
    return np.clip(logvar, LOGVAR_MIN, LOGVAR_MAX)


def reparam_sample(mu, logvar, eps):
    """``mu + sigma * eps`` with the log-variance clamped to [-10, 10]."""
    mu = np.asarray(mu, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if mu.shape != np.shape(logvar) or mu.shape != eps.shape:
        raise ShapeError("mu, logvar and eps must share a shape")
    return mu + np.exp(0.5 * clamp_logvar(np.asarray(logvar, dtype=np.float64))) * eps


def latent_term(mu_r, logvar_r, mu_p, logvar_p):
    """Per-row latent part of the doubled ELBO; equals -2 KL(q || p)."""
    var_r, var_p = np.exp(logvar_r), np.exp(logvar_p)
    return np.sum(1.0 + logvar_r - logvar_p - (var_r + (mu_r - mu_p) ** 2) / var_p, axis=-1)


def reconstruction_term(y, mu_g, logvar_g):
    """Per-row reconstruction part of the doubled ELBO (without constants)."""
    return -np.sum(logvar_g + (y - mu_g) ** 2 / np.exp(logvar_g), axis=-1)


@dataclass
class CvaeConfig:
    latent_dim: int = 50
    hidden_prior: int = 350
    hidden_recog: int = 350
    hidden_gen: int = 350
    batch_size: int = 75
    epochs: int = 150
    lr: float = 0.125
    gamma: float = 0.99
    rho: float = 0.95
    eps: float = 1e-6
    batch_norm: bool = True
    mode: CorrespondenceMode = CorrespondenceMode.CLASS_MEAN
    seed: int = 0
    track_class_error: bool = True

    def __post_init__(self):
        self.mode = CorrespondenceMode(self.mode)
        if self.latent_dim < 1 or min(self.hidden_prior, self.hidden_recog, self.hidden_gen) < 1:
            raise ConfigError("latent and hidden sizes must be positive")
        if self.batch_size < 2 and self.batch_norm:
            raise ConfigError("batch norm needs a minibatch of at least 2")
        if self.epochs < 0 or self.lr < 0 or not 0 < self.gamma <= 1 or not 0 < self.rho < 1:
            raise ConfigError("invalid optimisation settings")

    def to_dict(self):
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


class MappedFeatures(NamedTuple):
    white: np.ndarray
    raw: np.ndarray


@dataclass
class CvaeModel:
    prior: nn.Mlp
    recog: nn.Mlp
    gen: nn.Mlp
    latent_dim: int
    dim: int
    config: CvaeConfig
    whitener: Whitener | None = None
    history: list = field(default_factory=list)
    trained: bool = False

    @classmethod
    def build(cls, dim, config: CvaeConfig, rng):
        M = config.latent_dim
        if not M < dim:
            raise ConfigError(f"latent dimension M={M} must be smaller than D={dim}")
        bn = config.batch_norm
        prior = nn.init_mlp([dim, config.hidden_prior, 2 * M], rng, bn)
        recog = nn.init_mlp([2 * dim, config.hidden_recog, 2 * M], rng, bn)
        gen = nn.init_mlp([dim + M, config.hidden_gen, 2 * dim], rng, bn)
        return cls(prior, recog, gen, M, dim, config)

    @property
    def nets(self):
        return [self.prior, self.recog, self.gen]

    def arrays(self):
        return [a for net in self.nets for a in net.arrays()]


def _split_head(out):
    half = out.shape[1] // 2
    raw_lv = out[:, half:]
    return out[:, :half], clamp_logvar(raw_lv), (raw_lv >= LOGVAR_MIN) & (raw_lv <= LOGVAR_MAX)


def elbo_loss(model: CvaeModel, X, Y, eps, mode="train"):
    """Negative batch-mean of the doubled Gaussian ELBO and its gradients.

    ``eps`` is the standard-normal reparameterisation noise (B x M), supplied
    by the caller so the loss is a deterministic function of the parameters.
    Gradients are aligned with ``model.arrays()``.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    B = X.shape[0]
    p_out, p_cache = nn.mlp_forward(model.prior, X, mode)
    r_out, r_cache = nn.mlp_forward(model.recog, np.hstack([X, Y]), mode)
    mu_p, lv_p, mask_p = _split_head(p_out)
    mu_r, lv_r, mask_r = _split_head(r_out)
    sd_r = np.exp(0.5 * lv_r)
    Z = mu_r + sd_r * eps
    g_out, g_cache = nn.mlp_forward(model.gen, np.hstack([X, Z]), mode)
    mu_g, lv_g, mask_g = _split_head(g_out)

    lat = latent_term(mu_r, lv_r, mu_p, lv_p)
    rec = reconstruction_term(Y, mu_g, lv_g)
    for name, term in (("prior/recognition", lat), ("generation", rec)):
        if not np.all(np.isfinite(term)):
            raise NumericError(f"non-finite ELBO term from the {name} head")
    loss = -float(np.mean(lat + rec))

    # d loss / d head outputs, loss = mean(-lat - rec)
    var_p, var_r, var_g = np.exp(lv_p), np.exp(lv_r), np.exp(lv_g)
    dmu = mu_r - mu_p
    d_mu_r = 2.0 * dmu / var_p
    d_mu_p = -d_mu_r
    d_lv_r = -1.0 + var_r / var_p
    d_lv_p = 1.0 - (var_r + dmu ** 2) / var_p
    resid = Y - mu_g
    d_mu_g = -2.0 * resid / var_g
    d_lv_g = 1.0 - resid ** 2 / var_g

    d_gen = np.hstack([d_mu_g, d_lv_g * mask_g]) / B
    gen_grads, d_gen_in = nn.mlp_backward(g_cache, d_gen)
    dZ = d_gen_in[:, model.dim:]
    d_mu_r = d_mu_r / B + dZ
    d_lv_r = d_lv_r / B + dZ * eps * 0.5 * sd_r
    rec_grads, _ = nn.mlp_backward(r_cache, np.hstack([d_mu_r, d_lv_r * mask_r]))
    pri_grads, _ = nn.mlp_backward(p_cache, np.hstack([d_mu_p, d_lv_p * mask_p]) / B)
    return loss, pri_grads + rec_grads + gen_grads


def _pair_targets(mode, src_labels, dest_white, dest_labels, class_means, rng):
    if mode is CorrespondenceMode.CLASS_MEAN:
        return class_means[src_labels - 1]
    targets = np.empty((src_labels.size, dest_white.shape[1]))
    for c in np.unique(src_labels):
        pool = np.flatnonzero(dest_labels == c)
        where = np.flatnonzero(src_labels == c)
        targets[where] = dest_white[rng.choice(pool, size=where.size)]
    return targets


def train_cvae(source_fm, dest_fm, config: CvaeConfig | None = None) -> CvaeModel:
    """Fit the whitening transform on ``dest_fm`` and train the CVAE."""
    config = config or CvaeConfig()
    if source_fm.dim != dest_fm.dim:
        raise ShapeError(f"feature dimensions differ: {source_fm.dim} vs {dest_fm.dim}")
    if source_fm.n_classes != dest_fm.n_classes:
        raise DegenerateClassError("subjects have a different number of classes")
    src_means = class_conditional_means(source_fm)
    class_conditional_means(dest_fm)
    rng = np.random.default_rng(config.seed)
    model = CvaeModel.build(source_fm.dim, config, rng)
    model.whitener = Whitener.fit(dest_fm.rows)
    dest_white = model.whitener.apply(dest_fm.rows)
    class_means = class_conditional_means(dest_fm.with_rows(dest_white))

    X_all = source_fm.rows
    n = X_all.shape[0]
    n_batches = max(1, int(np.ceil(n / config.batch_size)))
    if config.batch_norm and n // n_batches < 2:
        raise ConfigError("too few source rows for batch-norm minibatches")
    state = nn.AdadeltaState.create(model.arrays(), lr=config.lr, rho=config.rho,
                                    eps=config.eps, gamma=config.gamma)
    for epoch in range(config.epochs):
        targets = _pair_targets(config.mode, source_fm.labels, dest_white, dest_fm.labels,
                                class_means, rng)
        order = rng.permutation(n)
        losses = []
        for idx in np.array_split(order, n_batches):
            eps = rng.standard_normal((idx.size, config.latent_dim))
            loss, grads = elbo_loss(model, X_all[idx], targets[idx], eps)
            nn.adadelta_step(state, model.nets, grads)
            losses.append(loss * idx.size)
        entry = {"epoch": epoch + 1, "loss": float(np.sum(losses) / n), "lr": state.lr}
        if config.track_class_error:
            mapped = _deterministic_white(model, src_means)
            entry["class_error"] = float(np.mean((mapped - class_means) ** 2))
        model.history.append(entry)
        nn.lr_schedule(state)
    model.trained = True
    return model


def _deterministic_white(model, X):
    p_out, _ = nn.mlp_forward(model.prior, X, "infer")
    mu_p = p_out[:, :model.latent_dim]
    g_out, _ = nn.mlp_forward(model.gen, np.hstack([X, mu_p]), "infer")
    return g_out[:, :model.dim]


def map_features(model: CvaeModel, X, samples: int | None = None, seed=None) -> MappedFeatures:
    """Map source rows into destination feature space.

    Deterministic mode (``samples=None``) uses the prior mean as the latent
    code. Generative mode averages the generator mean over ``samples`` draws
    from the prior.
    """
    if not model.trained or model.whitener is None:
        raise StateError("model has not been trained")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise ShapeError(f"expected rows of width {model.dim}")
    if samples is None:
        white = _deterministic_white(model, X)
    else:
        if samples < 1:
            raise ConfigError("samples must be positive")
        rng = np.random.default_rng(seed)
        p_out, _ = nn.mlp_forward(model.prior, X, "infer")
        mu_p, lv_p, _ = _split_head(p_out)
        sd_p = np.exp(0.5 * lv_p)
        white = np.zeros((X.shape[0], model.dim))
        for _ in range(samples):
            Z = mu_p + sd_p * rng.standard_normal(mu_p.shape)
            g_out, _ = nn.mlp_forward(model.gen, np.hstack([X, Z]), "infer")
            white += g_out[:, :model.dim]
        white /= samples
    return MappedFeatures(white, model.whitener.invert(white))


def save_cvae(path, model: CvaeModel):
    arrays, doc = {}, {"kind": "cvae", "version": CHECKPOINT_VERSION}
    for name, net in zip(("prior", "recog", "gen"), model.nets):
        a, meta = nn.mlp_to_dict(net, f"{name}.")
        arrays.update(a)
        doc[name] = meta
    if model.whitener is not None:
        arrays["whiten.mean"] = model.whitener.mean
        arrays["whiten.matrix"] = model.whitener.matrix
        arrays["whiten.inverse"] = model.whitener.inverse
    doc.update(latent_dim=model.latent_dim, dim=model.dim, config=model.config.to_dict(),
               history=model.history, trained=model.trained,
               whitened=model.whitener is not None)
    np.savez(path, __meta__=np.array(json.dumps(doc)), **arrays)


def load_cvae(path) -> CvaeModel:
    with np.load(path, allow_pickle=False) as data:
        doc = json.loads(str(data["__meta__"]))
        if doc.get("kind") != "cvae" or doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError("not a CVAE checkpoint of a supported version")
        arrays = {k: data[k] for k in data.files}
    nets = [nn.mlp_from_dict(arrays, doc[name], f"{name}.") for name in ("prior", "recog", "gen")]
    whitener = None
    if doc["whitened"]:
        whitener = Whitener(arrays["whiten.mean"], arrays["whiten.matrix"], arrays["whiten.inverse"])
    return CvaeModel(*nets, latent_dim=doc["latent_dim"], dim=doc["dim"],
                     config=CvaeConfig(**doc["config"]), whitener=whitener,
                     history=doc["history"], trained=doc["trained"])
