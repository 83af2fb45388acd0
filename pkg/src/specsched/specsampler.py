"""Conditional sampler for power-law spectrum parameters.

Each spectrum is summarised by the feature ``v = (log Psi(1), log Psi(N_f))``
and, per label, modelled by a diagonal Gaussian mixture. Sampling draws a
component, then ``v``, then maps back to ``(alpha, beta)``.
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, softmax

from .spectral import PowerLawFit

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-3
_LOG_2PI = np.log(2.0 * np.pi)


def feature_from_fit(fit: PowerLawFit) -> np.ndarray:
    v1 = np.log(fit.beta)
    return np.array([v1, v1 + fit.alpha * np.log(fit.nyquist)])


def fit_from_feature(v, nyquist: int) -> PowerLawFit:
    v1, v2 = float(v[0]), float(v[1])
    if nyquist < 2:
        raise ValueError("nyquist must be >= 2")
    return PowerLawFit((v2 - v1) / np.log(nyquist), np.exp(v1), nyquist)


def manipulate_spectrum(fit: PowerLawFit, factor: float) -> PowerLawFit:
    """Scale the power at the Nyquist frequency by ``factor``, keeping ``Psi(1)``."""
    if not factor > 0:
        raise ValueError(f"factor must be positive, got {factor}")
    return PowerLawFit(fit.alpha + np.log(factor) / np.log(fit.nyquist), fit.beta, fit.nyquist)


@dataclass(frozen=True, eq=False)
class Mixture:
    """Diagonal 2-D Gaussian mixture: ``weights (C,)``, ``means (C, 2)``, ``stds (C, 2)``."""

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64).reshape(-1, 2)
        sd = np.asarray(self.stds, dtype=np.float64).reshape(-1, 2)
        if not (w.shape[0] == mu.shape[0] == sd.shape[0] >= 1):
            raise ValueError("weights, means and stds disagree on the number of components")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must lie on the simplex")
        if np.any(sd <= 0):
            raise ValueError("stds must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "stds", sd)

    @property
    def n_components(self) -> int:
        return self.weights.size

    def component_log_density(self, v) -> np.ndarray:
        """``log w_c + log N(v; mu_c, diag(sd_c^2))``, shape ``(n, C)``."""
        v = np.atleast_2d(np.asarray(v, dtype=np.float64))
        z = (v[:, None, :] - self.means[None]) / self.stds[None]
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logw[None] - _LOG_2PI - np.log(self.stds).sum(axis=1)[None] - 0.5 * (z**2).sum(axis=2)

    def nll(self, v) -> np.ndarray:
        return -logsumexp(self.component_log_density(v), axis=1)

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "stds": self.stds.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Mixture":
        return cls(d["weights"], d["means"], d["stds"])


def gmm_nll(mixture: Mixture, v):
    """Negative log-likelihood of feature(s) ``v``; scalar for a single point."""
    out = mixture.nll(v)
    return float(out[0]) if np.ndim(v) == 1 else out


@dataclass(frozen=True, eq=False)
class GmmParams:
    """Per-label mixtures for one image resolution."""

    nyquist: int
    mixtures: dict

    def __getitem__(self, label) -> Mixture:
        try:
            return self.mixtures[str(label)]
        except KeyError:
            raise KeyError(f"unknown label {label!r}") from None

    @property
    def labels(self) -> list:
        return list(self.mixtures)

    def to_dict(self) -> dict:
        return {"nyquist": self.nyquist, "labels": {k: m.to_dict() for k, m in self.mixtures.items()}}

    @classmethod
    def from_dict(cls, d) -> "GmmParams":
        return cls(int(d["nyquist"]), {str(k): Mixture.from_dict(m) for k, m in d["labels"].items()})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "GmmParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class GmmFitConfig:
    components: int = 3
    backend: str = "em"
    max_iter: int = 500
    tol: float = 1e-10
    sigma_floor: float = SIGMA_FLOOR
    seed: int = 0
    # gradient backend only
    learning_rate: float = 0.01
    steps: int = 2000
    batch_size: int = 128


@dataclass
class GmmFitReport:
    initial_nll: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)


def _init_kmeans(x, C, sigma_floor, seed) -> Mixture:
    from sklearn.cluster import KMeans

    labels = KMeans(n_clusters=C, init="k-means++", n_init=1, random_state=seed).fit_predict(x)
    weights = np.bincount(labels, minlength=C) / len(x)
    means = np.stack([x[labels == c].mean(axis=0) for c in range(C)])
    stds = np.stack([x[labels == c].std(axis=0) if np.sum(labels == c) > 1 else x.std(axis=0) for c in range(C)])
    return Mixture(weights, means, np.maximum(stds, sigma_floor))


def _em(x, mix: Mixture, cfg: GmmFitConfig):
    trace = [float(mix.nll(x).mean())]
    for _ in range(cfg.max_iter):
        logp = mix.component_log_density(x)
        resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        nk = resp.sum(axis=0)
        live = nk > 1e-12
        weights = nk / nk.sum()
        means = mix.means.copy()
        stds = mix.stds.copy()
        means[live] = (resp[:, live].T @ x) / nk[live, None]
        var = (resp[:, live].T @ x**2) / nk[live, None] - means[live] ** 2
        stds[live] = np.sqrt(np.maximum(var, cfg.sigma_floor**2))
        mix = Mixture(weights, means, stds)
        trace.append(float(mix.nll(x).mean()))
        if trace[-2] - trace[-1] <= cfg.tol * max(1.0, abs(trace[-1])):
            break
    return mix, trace


# gradient backend -------------------------------------------------------------


def _unpack(theta, C, sigma_floor):
    logits = theta[:C]
    means = theta[C : 3 * C].reshape(C, 2)
    raw = theta[3 * C :].reshape(C, 2)
    return logits, means, sigma_floor + np.exp(raw), raw


def mean_nll_and_grad(theta, x, C, sigma_floor=SIGMA_FLOOR):
    """Mean NLL of ``x`` and its gradient for a flat unconstrained parameter vector.

    ``theta = [logits (C), means (2C), log(std - sigma_floor) (2C)]``.
    """
    logits, means, stds, raw = _unpack(theta, C, sigma_floor)
    logw = logits - logsumexp(logits)
    z = (x[:, None, :] - means[None]) / stds[None]
    logp = logw[None] - _LOG_2PI - np.log(stds).sum(axis=1)[None] - 0.5 * (z**2).sum(axis=2)
    lse = logsumexp(logp, axis=1, keepdims=True)
    r = np.exp(logp - lse)
    n = len(x)
    g_logits = -(r - np.exp(logw)[None]).sum(axis=0) / n
    g_means = -(r[:, :, None] * z / stds[None]).sum(axis=0) / n
    g_stds = -(r[:, :, None] * (z**2 - 1.0) / stds[None]).sum(axis=0) / n
    g_raw = g_stds * np.exp(raw)
    return float(-lse.mean()), np.concatenate([g_logits, g_means.ravel(), g_raw.ravel()])


def _sgd(x, mix: Mixture, cfg: GmmFitConfig, rng):
    C = mix.n_components
    floor = cfg.sigma_floor
    theta = np.concatenate([
        np.log(np.maximum(mix.weights, 1e-12)),
        mix.means.ravel(),
        np.log(np.maximum(mix.stds - floor, 1e-8)).ravel(),
    ])
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    trace = [float(mix.nll(x).mean())]
    best, best_theta = trace[0], theta.copy()
    for step in range(1, cfg.steps + 1):
        batch = x[rng.integers(0, len(x), size=min(cfg.batch_size, len(x)))]
        _, g = mean_nll_and_grad(theta, batch, C, floor)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g**2
        theta -= cfg.learning_rate * (m / (1 - b1**step)) / (np.sqrt(v / (1 - b2**step)) + eps)
        if step % 100 == 0 or step == cfg.steps:
            trace.append(mean_nll_and_grad(theta, x, C, floor)[0])
            if trace[-1] < best:
                best, best_theta = trace[-1], theta.copy()
    # return the best full-data checkpoint so the result never trails its start
    logits, means, stds, _ = _unpack(best_theta, C, floor)
    return Mixture(softmax(logits), means, stds), trace


def fit_gmm(features, components: int | None = None, config: GmmFitConfig | None = None,
            nyquist: int | None = None) -> tuple[GmmParams, GmmFitReport]:
    """Fit one mixture per label.

    ``features`` is an iterable of ``(label, v)`` pairs with ``v`` a 2-vector
    or of ``(label, PowerLawFit)`` pairs (converted with :func:`feature_from_fit`).
    """
    cfg = config or GmmFitConfig()
    C = components if components is not None else cfg.components
    grouped = defaultdict(list)
    for label, item in features:
        if isinstance(item, PowerLawFit):
            if nyquist is None:
                nyquist = item.nyquist
            elif item.nyquist != nyquist:
                raise ValueError("all spectra fed to one sampler must share a resolution")
            item = feature_from_fit(item)
        grouped[str(label)].append(np.asarray(item, dtype=np.float64))
    if not grouped:
        raise ValueError("no features to fit")
    if nyquist is None:
        raise ValueError("nyquist must be given when fitting raw features")
    report = GmmFitReport()
    mixtures = {}
    rng = np.random.default_rng(cfg.seed)
    for label, rows in grouped.items():
        x = np.stack(rows)
        if len(x) < C:
            raise ValueError(f"label {label!r} has {len(x)} points, need at least {C}")
        init = _init_kmeans(x, C, cfg.sigma_floor, cfg.seed)
        report.initial_nll[label] = float(init.nll(x).mean())
        if cfg.backend == "em":
            mix, trace = _em(x, init, cfg)
        elif cfg.backend == "sgd":
            mix, trace = _sgd(x, init, cfg, rng)
        else:
            raise ValueError(f"unknown GMM backend {cfg.backend!r}")
        logger.debug("label %s: NLL %.6g -> %.6g", label, trace[0], trace[-1])
        mixtures[label] = mix
        report.traces[label] = trace
    return GmmParams(int(nyquist), mixtures), report


def sample_features(params: GmmParams, label, rng: np.random.Generator, size: int | None = None):
    """Draw ``(component, v)``; ``v`` has shape ``(2,)`` or ``(size, 2)``."""
    mix = params[label]
    n = 1 if size is None else size
    comp = rng.choice(mix.n_components, size=n, p=mix.weights)
    v = mix.means[comp] + mix.stds[comp] * rng.standard_normal((n, 2))
    if size is None:
        return int(comp[0]), v[0]
    return comp, v


def sample_spectrum(params: GmmParams, label, rng: np.random.Generator) -> PowerLawFit:
    _, v = sample_features(params, label, rng)
    return fit_from_feature(v, params.nyquist)


def degenerate_params(fits: dict, nyquist: int, sigma: float = SIGMA_FLOOR) -> GmmParams:
    """Single-component mixtures pinned at given spectra (``label -> PowerLawFit``)."""
    mixtures = {
        str(label): Mixture([1.0], [feature_from_fit(fit)], [[sigma, sigma]]) for label, fit in fits.items()
    }
    return GmmParams(nyquist, mixtures)
