"""Repeated-split cross-subject experiments and report emission.

One experiment fixes a (source, destination) pair of trial sets and repeats,
for every repetition r, a random train/test split of both subjects followed by:

* destination decoder on whitened destination features (dest_local_*),
* a separate source decoder on whitened source features (src_local_test),
* the destination decoder applied to unmapped source features (direct_test),
* the destination decoder applied to CVAE-mapped source features (mapped_*),
* optionally, an affine map fitted on class-mean pairs (affine_test).
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import cvae as cv
from . import decoder as dec
from .dataio import SynthConfig, class_conditional_means, generate_synthetic_pair, read_trials, split_trials
from .errors import ConfigError, CrossmapError, ExperimentAborted, SizeError
from .pinsker import PinskerConfig, extract_features

BASE_CONDITIONS = ("dest_local_train", "dest_local_test", "src_local_test", "direct_test")
MAPPED_CONDITIONS = ("mapped_train", "mapped_test")
AFFINE_CONDITION = "affine_test"
MAX_FAILED_FRACTION = 0.10


def parse_map_mode(text: str):
    """``"det"`` -> None, ``"gen:S"`` -> S (prior samples averaged per row)."""
    if text == "det":
        return None
    if text.startswith("gen:"):
        try:
            samples = int(text[4:])
        except ValueError:
            samples = 0
        if samples >= 1:
            return samples
    raise ConfigError(f"mapping mode must be 'det' or 'gen:S' with S >= 1, got {text!r}")


@dataclass
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    source_path: str | None = None
    dest_path: str | None = None
    L: int | None = 3
    alpha: float = 1.0
    mu: float | None = None
    reps: int = 100
    n_train: int = 1200
    n_test: int = 200
    cvae: cv.CvaeConfig = field(default_factory=cv.CvaeConfig)
    decoder: str = "mlp"
    decoder_config: dec.DecoderConfig = field(default_factory=dec.DecoderConfig)
    lda_ridge: float = 1e-6
    map_mode: str = "det"
    seed: int = 0
    run_mapping: bool = True
    affine_baseline: bool = False

    def __post_init__(self):
        if isinstance(self.synth, dict):
            self.synth = SynthConfig(**self.synth)
        if isinstance(self.cvae, dict):
            self.cvae = cv.CvaeConfig(**self.cvae)
        if isinstance(self.decoder_config, dict):
            self.decoder_config = dec.DecoderConfig(**self.decoder_config)
        self.validate()

    def validate(self):
        if self.reps < 1:
            raise ConfigError("reps must be at least 1")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("n_train and n_test must be positive")
        if self.decoder not in ("mlp", "lda"):
            raise ConfigError(f"decoder must be 'mlp' or 'lda', got {self.decoder!r}")
        if (self.source_path is None) != (self.dest_path is None):
            raise ConfigError("give both trial files or neither")
        if self.source_path is None:
            self.synth.validate()
            if self.n_train + self.n_test > self.synth.n_trials_per_subject:
                raise ConfigError("n_train + n_test exceeds the synthetic trial count")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        parse_map_mode(self.map_mode)
        self.pinsker()

    def pinsker(self) -> PinskerConfig:
        if self.mu is not None:
            return PinskerConfig(alpha=self.alpha, mu=self.mu)
        return PinskerConfig(alpha=self.alpha, L=self.L)

    @classmethod
    def desk(cls, **overrides):
        """K=8, N=8, T=256, 1400 trials per subject, R=20, L=3 (D=40, so M=20)."""
        base = cls(reps=20, L=3, cvae=cv.CvaeConfig(latent_dim=20))
        return replace(base, **overrides)

    @classmethod
    def full_scale(cls, **overrides):
        """N=32, T=650, R=100, L=3 (D=160, M=50)."""
        base = cls(synth=SynthConfig(n_channels=32, n_samples=650), reps=100, L=3)
        return replace(base, **overrides)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["synth"] = asdict(self.synth)
        d["cvae"] = self.cvae.to_dict()
        d["decoder_config"] = asdict(self.decoder_config)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid config: {exc}") from exc


def _conditions(cfg: ExperimentConfig):
    names = list(BASE_CONDITIONS)
    if cfg.run_mapping:
        names += MAPPED_CONDITIONS
    if cfg.affine_baseline:
        names.append(AFFINE_CONDITION)
    return names


@dataclass
class ExperimentReport:
    config: dict
    conditions: list
    reps: list  # one dict per completed repetition: rep, seed, disjoint, accuracies
    failures: list = field(default_factory=list)

    def values(self, condition):
        return [row["accuracy"][condition] for row in self.reps]

    def mean(self, condition):
        return float(np.mean(self.values(condition)))

    def std(self, condition):
        v = self.values(condition)
        return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0

    def gain(self, reference):
        """Relative gain of mapped_test over ``reference``, in percent of the reference."""
        ref = self.mean(reference)
        if ref == 0:
            return None
        return 100.0 * (self.mean("mapped_test") - ref) / ref

    @property
    def seeds(self):
        return [row["seed"] for row in self.reps]

    @property
    def all_disjoint(self):
        return all(row["disjoint"] for row in self.reps)

    def summary(self):
        out = {c: {"mean": self.mean(c), "std": self.std(c)} for c in self.conditions}
        gains = {}
        if "mapped_test" in self.conditions:
            for name, ref in (("mapped_vs_src_local", "src_local_test"),
                              ("mapped_vs_direct", "direct_test")):
                if ref in self.conditions:
                    gains[name] = self.gain(ref)
        return out, gains

    def to_dict(self):
        summary, gains = self.summary()
        return {"config": self.config, "conditions": list(self.conditions), "reps": self.reps,
                "failures": self.failures, "summary": summary, "gains": gains}

    @classmethod
    def from_dict(cls, d):
        return cls(d["config"], list(d["conditions"]), d["reps"], d.get("failures", []))

    def __eq__(self, other):
        if not isinstance(other, ExperimentReport):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def rep_seed(master: int, r: int) -> int:
    """Counter-based seed of repetition ``r``; independent of execution order."""
    ss = np.random.SeedSequence(int(master), spawn_key=(r,))
    return int(ss.generate_state(1, np.uint64)[0])


def load_subjects(cfg: ExperimentConfig):
    if cfg.source_path is not None:
        return read_trials(cfg.source_path), read_trials(cfg.dest_path)
    return generate_synthetic_pair(cfg.synth)


def affine_class_mean_map(src_train, dest_white_train):
    """Min-norm least-squares affine map from source to whitened destination class means.

    Returns a function applying the map to raw source rows.
    """
    xs = class_conditional_means(src_train)
    ys = class_conditional_means(dest_white_train)
    A = np.hstack([xs, np.ones((xs.shape[0], 1))])
    B, *_ = np.linalg.lstsq(A, ys, rcond=None)
    return lambda rows: np.hstack([rows, np.ones((rows.shape[0], 1))]) @ B


def _train_decoder(cfg, fm, seed):
    if cfg.decoder == "lda":
        return dec.train_lda(fm, cfg.lda_ridge)
    return dec.train_mlp_decoder(fm, replace(cfg.decoder_config, seed=seed))


def run_repetition(cfg: ExperimentConfig, src_fm, dst_fm, r: int):
    """One split-train-evaluate round. Returns the per-repetition record."""
    seed = rep_seed(cfg.seed, r)
    s_split, d_split, s_dec, d_dec, cvae_seed, map_seed = (
        int(x) for x in np.random.SeedSequence(seed).generate_state(6, np.uint64))
    sp_s = split_trials(src_fm.n_rows, cfg.n_train, cfg.n_test, s_split)
    sp_d = split_trials(dst_fm.n_rows, cfg.n_train, cfg.n_test, d_split)
    disjoint = bool(sp_s.is_disjoint() and sp_d.is_disjoint())
    if not disjoint:
        raise ExperimentAborted(f"repetition {r}: train and test indices overlap")
    s_tr, s_te = src_fm.subset(sp_s.train_indices), src_fm.subset(sp_s.test_indices)
    d_tr, d_te = dst_fm.subset(sp_d.train_indices), dst_fm.subset(sp_d.test_indices)

    wd = cv.Whitener.fit(d_tr.rows)
    ws = cv.Whitener.fit(s_tr.rows)
    d_model = _train_decoder(cfg, d_tr.with_rows(wd.apply(d_tr.rows)), d_dec)
    s_model = _train_decoder(cfg, s_tr.with_rows(ws.apply(s_tr.rows)), s_dec)
    acc = {
        "dest_local_train": dec.accuracy(d_model, d_tr, wd.apply(d_tr.rows)),
        "dest_local_test": dec.accuracy(d_model, d_te, wd.apply(d_te.rows)),
        "src_local_test": dec.accuracy(s_model, s_te, ws.apply(s_te.rows)),
        "direct_test": dec.accuracy(d_model, s_te, wd.apply(s_te.rows)),
    }
    if cfg.run_mapping:
        model = cv.train_cvae(s_tr, d_tr, replace(cfg.cvae, seed=cvae_seed))
        samples = parse_map_mode(cfg.map_mode)
        for name, fm in (("mapped_train", s_tr), ("mapped_test", s_te)):
            mapped = cv.map_features(model, fm.rows, samples, map_seed).white
            acc[name] = dec.accuracy(d_model, fm, mapped)
    if cfg.affine_baseline:
        affine = affine_class_mean_map(s_tr, d_tr.with_rows(wd.apply(d_tr.rows)))
        acc[AFFINE_CONDITION] = dec.accuracy(d_model, s_te, affine(s_te.rows))
    return {"rep": r, "seed": seed, "disjoint": disjoint, "accuracy": acc}


def run_experiment(cfg: ExperimentConfig, progress=None) -> ExperimentReport:
    """Run all repetitions in order.

    A repetition that raises a library or numerical error is recorded under
    ``failures`` and left out of the aggregates. More than 10% failed
    repetitions raises :class:`ExperimentAborted`.
    """
    cfg.validate()
    src, dst = load_subjects(cfg)
    if src.n_classes != dst.n_classes:
        raise ConfigError("subjects have a different number of classes")
    if cfg.n_train + cfg.n_test > min(src.n_trials, dst.n_trials):
        raise SizeError("n_train + n_test exceeds the available trials")
    pcfg = cfg.pinsker()
    src_fm, dst_fm = extract_features(src, pcfg), extract_features(dst, pcfg)
    reps, failures = [], []
    allowed = math.floor(MAX_FAILED_FRACTION * cfg.reps)
    for r in range(cfg.reps):
        try:
            reps.append(run_repetition(cfg, src_fm, dst_fm, r))
        except ExperimentAborted:
            raise
        except (CrossmapError, ArithmeticError, np.linalg.LinAlgError) as exc:
            failures.append({"rep": r, "seed": rep_seed(cfg.seed, r),
                             "error": type(exc).__name__, "message": str(exc)})
            if len(failures) > allowed:
                raise ExperimentAborted(
                    f"{len(failures)} of {cfg.reps} repetitions failed; last: {exc}") from exc
        if progress is not None:
            progress(r)
    return ExperimentReport(cfg.to_dict(), _conditions(cfg), reps, failures)


def _pct(x):
    return f"{100.0 * x:.1f}"


def report_json(report: ExperimentReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def emit_report(report: ExperimentReport, out_dir, fmt="csv"):
    """Write the report into ``out_dir``. Returns the written paths.

    ``csv`` gives ``summary.csv`` (condition, mean, std in percent) and the
    long-form ``reps.csv``; ``json`` gives ``report.json`` with full precision.
    """
    if not report.reps:
        raise ConfigError("cannot emit a report without completed repetitions")
    os.makedirs(out_dir, exist_ok=True)
    if fmt == "json":
        path = os.path.join(out_dir, "report.json")
        with open(path, "w", newline="\n") as fh:
            fh.write(report_json(report))
        return [path]
    if fmt != "csv":
        raise ConfigError(f"format must be 'csv' or 'json', got {fmt!r}")
    summary, gains = report.summary()
    s_path = os.path.join(out_dir, "summary.csv")
    with open(s_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["condition", "mean", "std"])
        for c in report.conditions:
            w.writerow([c, _pct(summary[c]["mean"]), _pct(summary[c]["std"])])
        for name, value in gains.items():
            w.writerow([f"gain_{name}", "" if value is None else f"{value:.1f}", ""])
    r_path = os.path.join(out_dir, "reps.csv")
    with open(r_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rep", "seed", "disjoint", "condition", "accuracy"])
        for row in report.reps:
            for c in report.conditions:
                w.writerow([row["rep"], row["seed"], int(row["disjoint"]), c,
                            _pct(row["accuracy"][c])])
    return [s_path, r_path]


def gradient_suite(seed=0, h=1e-5):
    """Finite-difference checks on the shipped differentiable configurations.

    Returns ``{case: worst relative error}`` for a plain two-layer MLP, the
    same MLP with batch norm, and the full CVAE loss with frozen noise.
    """
    from . import nn

    rng = np.random.default_rng(seed)
    results = {}
    x = rng.standard_normal((5, 3))
    target = rng.standard_normal((5, 2))
    for name, bn in (("mlp_plain", False), ("mlp_batchnorm", True)):
        mlp = nn.init_mlp([3, 4, 2], rng, batch_norm=bn)

        def closure(mlp=mlp):
            out, cache = nn.mlp_forward(mlp, x, "train")
            resid = out - target
            grads, _ = nn.mlp_backward(cache, resid)
            return 0.5 * float(np.sum(resid ** 2)), grads

        results[name] = nn.grad_check(closure, mlp, h)

    D, M, B = 4, 2, 5
    config = cv.CvaeConfig(latent_dim=M, hidden_prior=6, hidden_recog=6, hidden_gen=6,
                           batch_norm=False)
    model = cv.CvaeModel.build(D, config, rng)
    X, Y = rng.standard_normal((B, D)), rng.standard_normal((B, D))
    eps = rng.standard_normal((B, M))
    results["elbo"] = nn.grad_check(lambda: cv.elbo_loss(model, X, Y, eps), model.nets, h)
    return results
