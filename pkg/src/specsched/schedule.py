"""Spectrum-driven logSNR schedules.

Every schedule maps diffusion time ``t in [0, 1]`` (0 = clean, 1 = noise) to a
logSNR ``lambda(t) = log(alpha_t**2 / sigma_t**2)``. The spectral schedules
place the noise power at a fixed multiple ``kappa_t`` of the signal power at
a frequency ``mu(t)``::

    lambda(t) = -log kappa_t - log Psi(mu(t)),   kappa_t = kmax**t * kmin**(1 - t)

with ``mu`` sweeping from the Nyquist frequency (t=0) down to 1 (t=1) either
linearly (frequency-focused) or by inverse-CDF sampling of ``Psi``
(power-focused). All logarithms are natural.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.special import expit

from .spectral import PowerLawFit

EPS_POLE = 1e-6
T_EPS = 1e-4
MEDIAN_GRID = 1024
KINDS = ("frequency", "power", "mixed", "cosine", "cosine_minmax", "fixed_median")


@dataclass(frozen=True)
class KappaBounds:
    kappa_min: float = 0.2
    kappa_max: float = 200.0

    def __post_init__(self):
        if not (0 < self.kappa_min < self.kappa_max and np.isfinite(self.kappa_max)):
            raise ValueError(
                f"need 0 < kappa_min < kappa_max, got ({self.kappa_min}, {self.kappa_max})"
            )

    @property
    def log_ratio(self) -> float:
        return float(np.log(self.kappa_max) - np.log(self.kappa_min))


DEFAULT_BOUNDS = KappaBounds()


def kappa_at(t, bounds: KappaBounds = DEFAULT_BOUNDS):
    t = np.asarray(t, dtype=np.float64)
    return bounds.kappa_max**t * bounds.kappa_min ** (1.0 - t)


def _log_kappa(t, bounds):
    return t * np.log(bounds.kappa_max) + (1.0 - t) * np.log(bounds.kappa_min)


def mu_freq(t, nyquist: int):
    return nyquist + (1.0 - nyquist) * np.asarray(t, dtype=np.float64)


def log_mu_power(t, alpha: float, nyquist: int):
    """``log F^{-1}(1 - t)`` for the CDF of ``k**alpha`` on ``[1, nyquist]``."""
    t = np.asarray(t, dtype=np.float64)
    d = alpha + 1.0
    ln_nf = np.log(nyquist)
    if abs(d) < EPS_POLE:
        # second-order expansion about alpha = -1
        return (1.0 - t) * ln_nf + d * ln_nf**2 * t * (1.0 - t) / 2.0
    dl = d * ln_nf
    if abs(dl) < 1.0:
        return np.log1p((1.0 - t) * np.expm1(dl)) / d
    # log(t + (1 - t) N_f^d) avoids the cancellation in 1 + (1 - t) * expm1(dl)
    with np.errstate(divide="ignore"):
        return np.logaddexp(np.log(t), np.log1p(-t) + dl) / d


def mu_power(t, alpha: float, nyquist: int):
    return np.exp(log_mu_power(t, alpha, nyquist))


def lambda_freq(t, fit: PowerLawFit, bounds: KappaBounds = DEFAULT_BOUNDS):
    t = np.asarray(t, dtype=np.float64)
    return -_log_kappa(t, bounds) - np.log(fit.beta) - fit.alpha * np.log(mu_freq(t, fit.nyquist))


def lambda_power(t, fit: PowerLawFit, bounds: KappaBounds = DEFAULT_BOUNDS):
    t = np.asarray(t, dtype=np.float64)
    return -_log_kappa(t, bounds) - np.log(fit.beta) - fit.alpha * log_mu_power(t, fit.alpha, fit.nyquist)


def lambda_mixed(t, fit: PowerLawFit, bounds: KappaBounds = DEFAULT_BOUNDS):
    return 0.5 * (lambda_freq(t, fit, bounds) + lambda_power(t, fit, bounds))


def _dlambda_freq(t, fit, bounds):
    nf = fit.nyquist
    return -bounds.log_ratio - fit.alpha * (1.0 - nf) / mu_freq(t, nf)


def _dlambda_power(t, fit, bounds):
    t = np.asarray(t, dtype=np.float64)
    alpha, nf = fit.alpha, fit.nyquist
    d = alpha + 1.0
    ln_nf = np.log(nf)
    if abs(d) < EPS_POLE:
        dlogmu = -ln_nf + d * ln_nf**2 * (1.0 - 2.0 * t) / 2.0
    else:
        a = np.expm1(d * ln_nf)
        dlogmu = -a / (d * (t + (1.0 - t) * np.exp(d * ln_nf)))
    return -bounds.log_ratio - alpha * dlogmu


def lambda_cosine(t, t_eps: float = T_EPS):
    """``2 log cot(pi t / 2)`` with ``t`` clipped to ``[t_eps, 1 - t_eps]``."""
    t = np.clip(np.asarray(t, dtype=np.float64), t_eps, 1.0 - t_eps)
    return -2.0 * np.log(np.tan(0.5 * np.pi * t))


def _dlambda_cosine(t, t_eps=T_EPS):
    # evaluated at the clipped time so the loss weight never vanishes
    t = np.clip(np.asarray(t, dtype=np.float64), t_eps, 1.0 - t_eps)
    return -2.0 * np.pi / np.sin(np.pi * t)


def _raised_cosine(t, lam0, lam1):
    t = np.asarray(t, dtype=np.float64)
    return lam1 + (lam0 - lam1) * 0.5 * (1.0 + np.cos(np.pi * t))


def lambda_cosine_minmax(t, fit: PowerLawFit, bounds: KappaBounds = DEFAULT_BOUNDS):
    """Raised-cosine path between the mixed schedule's endpoint logSNRs."""
    lam0 = float(lambda_mixed(0.0, fit, bounds))
    lam1 = float(lambda_mixed(1.0, fit, bounds))
    return _raised_cosine(t, lam0, lam1)


def alpha_sigma(lam):
    """Variance-preserving ``(alpha_t, sigma_t)`` for a logSNR."""
    lam = np.asarray(lam, dtype=np.float64)
    return np.sqrt(expit(lam)), np.sqrt(expit(-lam))


@dataclass(frozen=True, eq=False)
class ScheduleSpec:
    """An evaluable schedule.

    ``fit`` is required for every kind except ``cosine``. ``fixed_median``
    carries its tabulated values in ``table`` (built by :func:`median_schedule`).
    """

    kind: str
    fit: PowerLawFit | None = None
    bounds: KappaBounds = DEFAULT_BOUNDS
    table: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "fixed_median":
            if self.table is None:
                raise ValueError("fixed_median schedules need a tabulated grid")
            table = np.asarray(self.table, dtype=np.float64)
            if table.ndim != 1 or table.size < 2 or np.any(np.diff(table) >= 0):
                raise ValueError("median table must be strictly decreasing")
            object.__setattr__(self, "table", table)
        elif self.kind != "cosine" and self.fit is None:
            raise ValueError(f"{self.kind} schedule needs a power-law fit")
        if self.kind in ("frequency", "power", "mixed", "cosine_minmax"):
            # lambda' is monotone in t for these kinds, so the endpoints bound it
            slopes = self._lam_prime_core("mixed" if self.kind == "cosine_minmax" else self.kind, np.array([0.0, 1.0]))
            if np.any(slopes >= 0):
                raise ValueError(
                    f"{self.kind} schedule is not strictly decreasing for alpha={self.fit.alpha}"
                )

    # evaluation -------------------------------------------------------------

    def lam(self, t):
        kind = self.kind
        if kind == "frequency":
            return lambda_freq(t, self.fit, self.bounds)
        if kind == "power":
            return lambda_power(t, self.fit, self.bounds)
        if kind == "mixed":
            return lambda_mixed(t, self.fit, self.bounds)
        if kind == "cosine":
            return lambda_cosine(t)
        if kind == "cosine_minmax":
            return lambda_cosine_minmax(t, self.fit, self.bounds)
        grid = np.linspace(0.0, 1.0, self.table.size)
        return np.interp(t, grid, self.table)

    def _lam_prime_core(self, kind, t):
        if kind == "frequency":
            return _dlambda_freq(t, self.fit, self.bounds)
        if kind == "power":
            return _dlambda_power(t, self.fit, self.bounds)
        if kind == "mixed":
            return 0.5 * (_dlambda_freq(t, self.fit, self.bounds) + _dlambda_power(t, self.fit, self.bounds))
        if kind == "cosine":
            return _dlambda_cosine(t)
        if kind == "cosine_minmax":
            lam0, lam1 = self.endpoints
            return -(lam0 - lam1) * 0.5 * np.pi * np.sin(np.pi * np.asarray(t, dtype=np.float64))
        n = self.table.size - 1
        seg = np.clip(np.floor(np.asarray(t, dtype=np.float64) * n).astype(np.int64), 0, n - 1)
        return np.diff(self.table)[seg] * n

    def lam_prime(self, t):
        """Analytic ``d lambda / dt`` (segment slope for tabulated schedules)."""
        return self._lam_prime_core(self.kind, t)

    def alpha_sigma(self, t):
        return alpha_sigma(self.lam(t))

    @property
    def endpoints(self) -> tuple[float, float]:
        """``(lambda(0), lambda(1))``: the largest and smallest logSNR."""
        return float(self.lam(0.0)), float(self.lam(1.0))

    # serialization ------------------------------------------------------------

    def to_dict(self) -> dict:
        lam0, lam1 = self.endpoints
        d = {
            "kind": self.kind,
            "fit": None if self.fit is None else self.fit.to_dict(),
            "bounds": {"kappa_min": self.bounds.kappa_min, "kappa_max": self.bounds.kappa_max},
            "endpoints": {"lambda_0": lam0, "lambda_1": lam1},
        }
        if self.table is not None:
            d["table"] = self.table.tolist()
        return d

    @classmethod
    def from_dict(cls, d) -> "ScheduleSpec":
        fit = None if d.get("fit") is None else PowerLawFit.from_dict(d["fit"])
        bounds = KappaBounds(**d.get("bounds", {}))
        table = None if d.get("table") is None else np.array(d["table"])
        return cls(d["kind"], fit, bounds, table)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "ScheduleSpec":
        return cls.from_dict(json.loads(text))


def make_schedule(kind: str, fit: PowerLawFit | None = None, bounds: KappaBounds = DEFAULT_BOUNDS) -> ScheduleSpec:
    if kind == "fixed_median":
        if fit is None:
            raise ValueError("fixed_median needs at least one fit")
        return median_schedule([fit], bounds)
    return ScheduleSpec(kind, fit, bounds)


def median_schedule(fits: Iterable[PowerLawFit], bounds: KappaBounds = DEFAULT_BOUNDS, grid: int = MEDIAN_GRID) -> ScheduleSpec:
    """Pointwise median of per-instance mixed schedules on a fixed t-grid."""
    fits = list(fits)
    if not fits:
        raise ValueError("median_schedule needs a non-empty set of fits")
    t = np.linspace(0.0, 1.0, grid)
    curves = np.stack([lambda_mixed(t, f, bounds) for f in fits])
    return ScheduleSpec("fixed_median", None, bounds, np.median(curves, axis=0))


@dataclass(frozen=True, eq=False)
class ScheduleTable:
    t: np.ndarray
    lam: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray

    def __len__(self):
        return self.t.size

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("i,t,lambda,alpha_t,sigma_t\n")
        for i, row in enumerate(zip(self.t, self.lam, self.alpha, self.sigma)):
            out.write(f"{i}," + ",".join(repr(float(v)) for v in row) + "\n")
        return out.getvalue()


def discretize(spec: ScheduleSpec, steps: int = 256) -> ScheduleTable:
    """Rows at ``t_i = i / steps`` for ``i = 0..steps``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    t = np.arange(steps + 1) / steps
    lam = np.asarray(spec.lam(t), dtype=np.float64)
    a, s = alpha_sigma(lam)
    return ScheduleTable(t, lam, a, s)
