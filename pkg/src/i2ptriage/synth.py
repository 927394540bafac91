"""Synthetic flows with class-conditionally independent features and an exact Bayes posterior."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, IOFailure
from .flow_model import NO_ACTIVITY, Activity, ClassLabel, Dataset, FeatureSchema

TAXONOMY = {
    "Normal": (ClassLabel.NORMAL, NO_ACTIVITY),
    "I2P-FTP": (ClassLabel.I2P, Activity.FTP),
    "I2P-P2P": (ClassLabel.I2P, Activity.P2P),
    "I2P-Browsing": (ClassLabel.I2P, Activity.BROWSING),
}
I2P_CLASSES = ("I2P-FTP", "I2P-P2P", "I2P-Browsing")
EXFIL_CLASSES = ("I2P-FTP", "I2P-P2P")

_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True)
class FeatureDist:
    kind: str  # "gaussian" or "lognormal" (mu, sigma of log x)
    mu: float
    sigma: float

    def __post_init__(self):
        if self.kind not in ("gaussian", "lognormal"):
            raise ConfigError(f"unknown distribution kind {self.kind!r}")
        if not self.sigma > 0:
            raise ConfigError("distribution sigma must be > 0")

    def logpdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "gaussian":
            z = (x - self.mu) / self.sigma
            return -0.5 * z * z - math.log(self.sigma) - _LOG_SQRT_2PI
        out = np.full(x.shape, -np.inf)
        pos = x > 0
        lx = np.log(x[pos])
        z = (lx - self.mu) / self.sigma
        out[pos] = -0.5 * z * z - math.log(self.sigma) - _LOG_SQRT_2PI - lx
        return out


@dataclass(frozen=True)
class GeneratorSpec:
    feature_names: tuple
    classes: tuple
    priors: tuple
    dists: tuple  # dists[c][j]: distribution of feature j under class c

    def __post_init__(self):
        f = len(self.feature_names)
        if f < 1:
            raise ConfigError("generator needs at least one feature")
        unknown = [c for c in self.classes if c not in TAXONOMY]
        if unknown:
            raise ConfigError(f"classes outside the taxonomy: {unknown}")
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError("duplicate classes")
        if len(self.priors) != len(self.classes) or len(self.dists) != len(self.classes):
            raise ConfigError("priors/dists must align with classes")
        if any(p < 0 for p in self.priors) or abs(sum(self.priors) - 1.0) > 1e-12:
            raise ConfigError("priors must be non-negative and sum to 1")
        if any(len(row) != f for row in self.dists):
            raise ConfigError("every class needs one distribution per feature")

    @property
    def n_features(self):
        return len(self.feature_names)

    def to_dict(self):
        return {
            "feature_names": list(self.feature_names),
            "classes": {
                c: {"prior": p, "features": [[d.kind, d.mu, d.sigma] for d in row]}
                for c, p, row in zip(self.classes, self.priors, self.dists)
            },
        }

    @classmethod
    def from_dict(cls, d):
        classes = tuple(d["classes"])
        return cls(
            feature_names=tuple(d["feature_names"]),
            classes=classes,
            priors=tuple(float(d["classes"][c]["prior"]) for c in classes),
            dists=tuple(
                tuple(FeatureDist(k, float(m), float(s)) for k, m, s in d["classes"][c]["features"])
                for c in classes
            ),
        )


def save_spec(spec: GeneratorSpec, path):
    try:
        Path(path).write_text(json.dumps(spec.to_dict(), indent=1) + "\n")
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def load_spec(path) -> GeneratorSpec:
    try:
        return GeneratorSpec.from_dict(json.loads(Path(path).read_text()))
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed generator spec {path}: {exc}") from exc


def default_spec() -> GeneratorSpec:
    """CICFlowMeter-named features; flow duration separates Normal from I2P by 4 sigma
    (in log space), byte volumes and packet size separate FTP/P2P from Browsing."""
    G, L = "gaussian", "lognormal"
    names = (
        "Flow Duration", "Total Fwd Packets", "Total Backward Packets",
        "Total Length of Fwd Packets", "Total Length of Bwd Packets",
        "Flow IAT Mean", "Flow IAT Std", "Average Packet Size", "FIN Flag Count", "Idle Std",
    )
    #        dur        fwdpk       bwdpk       fwdbytes     bwdbytes     iatmean   iatstd    pktsize        fin        idle
    normal = ((L, 10, 1), (L, 2.5, .8), (L, 2.5, .8), (L, 8.0, 1.2), (L, 9.0, 1.2),
              (L, 8, 1), (L, 7, 1), (G, 500, 150), (L, 0, .5), (G, 0, 1))
    ftp = ((L, 14, 1), (L, 2.9, .8), (L, 2.5, .8), (L, 10.0, 1.2), (L, 9.0, 1.2),
           (L, 8, 1), (L, 7, 1), (G, 800, 150), (L, 0, .5), (G, 0, 1))
    p2p = ((L, 14, 1), (L, 2.9, .8), (L, 2.5, .8), (L, 9.8, 1.2), (L, 9.0, 1.2),
           (L, 8, 1), (L, 7, 1), (G, 700, 150), (L, 0, .5), (G, 0, 1))
    browsing = ((L, 14, 1), (L, 2.5, .8), (L, 2.5, .8), (L, 8.0, 1.2), (L, 9.8, 1.2),
                (L, 8, 1), (L, 7, 1), (G, 500, 150), (L, 0, .5), (G, 0, 1))
    rows = tuple(tuple(FeatureDist(*d) for d in row) for row in (normal, ftp, p2p, browsing))
    return GeneratorSpec(names, ("Normal", *I2P_CLASSES), (0.876, 0.0432, 0.0410, 0.0398), rows)


def two_class_spec(separation=4.0, n_features=1, informative=1, prior=0.5) -> GeneratorSpec:
    """Normal vs I2P-FTP unit Gaussians, the first ``informative`` features shifted by ``separation``."""
    names = tuple(f"f{j}" for j in range(n_features))
    neg = tuple(FeatureDist("gaussian", 0.0, 1.0) for _ in range(n_features))
    pos = tuple(FeatureDist("gaussian", separation if j < informative else 0.0, 1.0)
                for j in range(n_features))
    return GeneratorSpec(names, ("Normal", "I2P-FTP"), (1.0 - prior, prior), (neg, pos))


def class_log_likelihood(spec: GeneratorSpec, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = np.zeros((X.shape[0], len(spec.classes)))
    for c, row in enumerate(spec.dists):
        for j, dist in enumerate(row):
            out[:, c] += dist.logpdf(X[:, j])
    return out


def bayes_posterior(spec: GeneratorSpec, X, positive=I2P_CLASSES, among: Optional[tuple] = None):
    """Exact P(class in ``positive`` | x, class in ``among``), computed in log space."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    among = spec.classes if among is None else tuple(c for c in spec.classes if c in among)
    idx = [spec.classes.index(c) for c in among]
    with np.errstate(divide="ignore"):
        logp = np.log(np.asarray(spec.priors)[idx])
    joint = class_log_likelihood(spec, X)[:, idx] + logp
    pos = np.array([c in positive for c in among])
    if not pos.any():
        post = np.zeros(joint.shape[0])
    elif pos.all():
        post = np.ones(joint.shape[0])
    else:
        with np.errstate(invalid="ignore"):
            log_pos = logsumexp(joint[:, pos], axis=1)
            log_all = logsumexp(joint, axis=1)
            post = np.exp(log_pos - log_all)
        # Zero density under every class (e.g. x <= 0 for log-normal features): fall back to priors.
        dead = ~np.isfinite(log_all)
        if dead.any():
            pri = np.exp(logp)
            post[dead] = pri[pos].sum() / pri.sum()
    return float(post[0]) if single else post


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    dataset: Dataset
    true_class: np.ndarray  # index into spec.classes
    posterior: np.ndarray  # P(I2P | x)
    posterior_exfil: np.ndarray  # P(FTP or P2P | x, I2P)


def generate(spec: GeneratorSpec, n: int, seed: int = 42) -> SyntheticDataset:
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = np.random.default_rng(seed)
    cls = rng.choice(len(spec.classes), size=n, p=np.asarray(spec.priors))
    z = rng.standard_normal((n, spec.n_features))
    mu = np.array([[d.mu for d in row] for row in spec.dists])
    sigma = np.array([[d.sigma for d in row] for row in spec.dists])
    lognormal = np.array([[d.kind == "lognormal" for d in row] for row in spec.dists])
    X = mu[cls] + sigma[cls] * z
    ln = lognormal[cls]
    X[ln] = np.exp(X[ln])

    class_labels = np.array([int(TAXONOMY[spec.classes[c]][0]) for c in cls], np.int8)
    activities = np.array([int(TAXONOMY[spec.classes[c]][1]) for c in cls], np.int8)
    ids = tuple(f"synth-{seed}-{i:07d}" for i in range(n))
    ds = Dataset(
        FeatureSchema(spec.feature_names, "Label", "Activity"),
        X, np.zeros(X.shape, bool), class_labels, activities, ids=ids,
        provenance=f"synth(n={n}, seed={seed})",
    )
    has_i2p = any(c in I2P_CLASSES for c in spec.classes)
    post = bayes_posterior(spec, X) if has_i2p else np.zeros(n)
    post2 = (bayes_posterior(spec, X, EXFIL_CLASSES, among=I2P_CLASSES)
             if any(c in EXFIL_CLASSES for c in spec.classes) else np.zeros(n))
    return SyntheticDataset(ds, cls, np.atleast_1d(post), np.atleast_1d(post2))
