"""Forward process, training loss, guidance and ancestral sampling.

Arrays are real with the spatial grid on the trailing two axes (``..., N, N``);
leading axes are batch dimensions. Denoisers are callables
``denoiser(x_t, t, spec, cond) -> x0_hat``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .schedule import ScheduleSpec
from .spectral import cell_power, radial_index

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConditioningTuple:
    """``(y, lambda(t), lambda(0), lambda(1))``.

    ``lambda_min`` is the logSNR at t=0 (minimum noise) and ``lambda_max`` the
    logSNR at t=1 (maximum noise), so ``lambda_max <= lambda_t <= lambda_min``.
    """

    label: object
    lambda_t: float
    lambda_min: float
    lambda_max: float
    null: bool = False

    def unconditional(self) -> "ConditioningTuple":
        """The same tuple with the null label used for guidance."""
        return replace(self, label=None, null=True)


def conditioning(t, spec: ScheduleSpec, label=None) -> ConditioningTuple:
    lam0, lam1 = spec.endpoints
    return ConditioningTuple(label, float(spec.lam(t)), lam0, lam1)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 256
    guidance_scale: float = 0.0
    guidance_interval: tuple = (0.10, 0.45)
    gamma: float = 0.0
    bias: float = 0.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.guidance_interval
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError(f"guidance interval must satisfy 0 <= lo < hi <= 1, got {self.guidance_interval}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


def _expand(v, ndim):
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def forward_noise(x0, t, spec: ScheduleSpec, rng: np.random.Generator):
    """Return ``(x_t, eps)`` with ``x_t = alpha_t x0 + sigma_t eps``.

    ``t`` may be a scalar or one time per leading batch entry.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    a, s = spec.alpha_sigma(t)
    eps = rng.standard_normal(x0.shape)
    return _expand(a, x0.ndim) * x0 + _expand(s, x0.ndim) * eps, eps


def loss_weight(t, spec: ScheduleSpec, bias: float = 0.0):
    """``-lambda'(t) * e^b * sigmoid(lambda(t) - b)``."""
    return -np.asarray(spec.lam_prime(t)) * np.exp(bias) * expit(np.asarray(spec.lam(t)) - bias)


def loss_term(x0, t, spec: ScheduleSpec, denoiser, cond, bias: float, rng: np.random.Generator) -> float:
    """Sigmoid-weighted denoising loss for one ``(x0, t)`` draw.

    The squared error is averaged over elements.
    """
    x_t, _ = forward_noise(x0, t, spec, rng)
    x_hat = denoiser(x_t, t, spec, cond)
    return float(loss_weight(t, spec, bias) * np.mean((x_hat - np.asarray(x0)) ** 2))


# Wiener oracle -----------------------------------------------------------------


def wiener_gain(power, alpha, sigma):
    """Posterior-mean gain ``alpha P / (alpha^2 P + sigma^2)``; zero where ``P = 0``."""
    power = np.asarray(power, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    denom = alpha**2 * power + sigma**2
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(power > 0, alpha * power / np.where(denom > 0, denom, 1.0), 0.0)
    return g


def apply_gain(x, gain):
    """Multiply the unitary spectrum of ``x`` by a real, Hermitian-symmetric gain."""
    return np.fft.ifft2(np.fft.fft2(x) * gain).real


def wiener_filter(x_t, alpha, sigma, power):
    """MMSE estimate of a zero-mean stationary Gaussian ``x0`` from ``x_t``.

    ``power`` is the per-cell power grid; ``alpha``/``sigma`` may be per-batch.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    gain = wiener_gain(power, _expand(alpha, x_t.ndim), _expand(sigma, x_t.ndim))
    return apply_gain(x_t, gain)


def wiener_denoise(x_t, t, spec: ScheduleSpec, true_spectrum):
    if true_spectrum is None:
        raise ValueError("wiener_denoise needs the true spectrum")
    x_t = np.asarray(x_t, dtype=np.float64)
    a, s = spec.alpha_sigma(t)
    return wiener_filter(x_t, a, s, cell_power(true_spectrum, x_t.shape[-1]))


@dataclass(frozen=True, eq=False)
class WienerDenoiser:
    """Analytic denoiser for data with a known radial spectrum.

    ``unconditional`` is used for null conditioning (guidance branch).
    """

    spectrum: object
    unconditional: object = None
    _grids: dict = field(default_factory=dict, repr=False)

    def power_grid(self, n: int, conditional: bool = True) -> np.ndarray:
        key = (n, conditional)
        if key not in self._grids:
            source = self.spectrum if conditional or self.unconditional is None else self.unconditional
            self._grids[key] = cell_power(source, n)
        return self._grids[key]

    def __call__(self, x_t, t, spec, cond=None):
        x_t = np.asarray(x_t, dtype=np.float64)
        conditional = cond is None or not cond.null
        a, s = spec.alpha_sigma(t)
        return wiener_filter(x_t, a, s, self.power_grid(x_t.shape[-1], conditional))


# guidance and sampling ----------------------------------------------------------


def cfg_combine(cond_out, uncond_out, w: float, t: float, interval=(0.10, 0.45)):
    """Classifier-free guidance, active only for ``t`` inside ``interval``."""
    cond_out = np.asarray(cond_out)
    uncond_out = np.asarray(uncond_out)
    if cond_out.shape != uncond_out.shape:
        raise ValueError(f"shape mismatch: {cond_out.shape} vs {uncond_out.shape}")
    lo, hi = interval
    if w == 0 or not lo <= t <= hi:
        return cond_out
    return cond_out + w * (cond_out - uncond_out)


def transition_std(lam_t, lam_s, sigma_t, sigma_s, gamma: float):
    """``sigma_s^(1-g) sigma_t^g sqrt(1 - exp(lambda_t - lambda_s))``."""
    return sigma_s ** (1.0 - gamma) * sigma_t**gamma * np.sqrt(-np.expm1(lam_t - lam_s))


def ancestral_step(x_t, t: float, s: float, x_hat, spec: ScheduleSpec, gamma: float, rng: np.random.Generator):
    """One ancestral sampling step from time ``t`` down to ``s``."""
    if s > t:
        raise ValueError(f"ancestral step needs s <= t, got s={s}, t={t}")
    x_t = np.asarray(x_t, dtype=np.float64)
    if s == t:
        return x_t.copy()
    lam_t, lam_s = float(spec.lam(t)), float(spec.lam(s))
    a_t, s_t = spec.alpha_sigma(t)
    a_s, s_s = spec.alpha_sigma(s)
    coef = (a_t * s_s**2) / (a_s * s_t**2)
    std = transition_std(lam_t, lam_s, s_t, s_s, gamma)
    noise = rng.standard_normal(x_t.shape)
    return a_s * x_hat + coef * (x_t - a_t * x_hat) + std * noise


def sample_chain(config: SamplerConfig, spec: ScheduleSpec, denoiser, rng: np.random.Generator,
                 shape, label=None, cond_builder: Callable | None = None):
    """Run the ancestral sampler from pure noise at t=1 to t=0."""
    build = cond_builder or (lambda t, sp: conditioning(t, sp, label))
    n = config.steps
    x = rng.standard_normal(shape)
    for i in range(n, 0, -1):
        t, s = i / n, (i - 1) / n
        cond = build(t, spec)
        x_hat = denoiser(x, t, spec, cond)
        lo, hi = config.guidance_interval
        if config.guidance_scale != 0 and lo <= t <= hi:
            uncond = denoiser(x, t, spec, cond.unconditional())
            x_hat = cfg_combine(x_hat, uncond, config.guidance_scale, t, config.guidance_interval)
        x = ancestral_step(x, t, s, x_hat, spec, config.gamma, rng)
    return x


# trainable spectral denoiser --------------------------------------------------------


def _bin_map(n: int):
    """Index into ``psi`` (bins 1..N_f -> 0..N_f-1) per cell; -1 at DC."""
    nf = n // 2
    return np.minimum(radial_index(n), nf) - 1


@dataclass(frozen=True, eq=False)
class SpectralDenoiser:
    """Wiener-form denoiser with a learned log-power per radial bin ``1..N_f``."""

    log_power: np.ndarray

    def __post_init__(self):
        psi = np.asarray(self.log_power, dtype=np.float64)
        if psi.ndim != 1 or psi.size < 1 or not np.all(np.isfinite(psi)):
            raise ValueError("log_power must be a finite 1-D array")
        object.__setattr__(self, "log_power", psi)

    @property
    def nyquist(self) -> int:
        return self.log_power.size

    def power_grid(self, n: int) -> np.ndarray:
        if n // 2 != self.nyquist:
            raise ValueError(f"denoiser has {self.nyquist} bins, grid side {n} needs {n // 2}")
        bins = _bin_map(n)
        return np.where(bins >= 0, np.exp(self.log_power)[np.maximum(bins, 0)], 0.0)

    def __call__(self, x_t, t, spec, cond=None):
        x_t = np.asarray(x_t, dtype=np.float64)
        a, s = spec.alpha_sigma(t)
        return wiener_filter(x_t, a, s, self.power_grid(x_t.shape[-1]))

    def to_dict(self) -> dict:
        return {"log_power": self.log_power.tolist()}

    @classmethod
    def from_dict(cls, d) -> "SpectralDenoiser":
        return cls(np.array(d["log_power"]))


def _aggregate(cell_values, n):
    """Sum per-cell values (``(n, n)``) into parameter bins, skipping DC."""
    bins = _bin_map(n).ravel()
    keep = bins >= 0
    return np.bincount(bins[keep], weights=cell_values.ravel()[keep], minlength=n // 2)


def denoiser_loss_and_grad(psi, x0, x_t, alpha, sigma, weight):
    """Mean weighted loss over a batch and its gradient w.r.t. ``psi``.

    ``x0``/``x_t`` are ``(B, N, N)``; ``alpha``, ``sigma``, ``weight`` are ``(B,)``.
    Per sample the loss is ``weight * mean((x_hat - x0)^2)``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.shape[-1]
    model = SpectralDenoiser(psi)
    p = model.power_grid(n)
    a = _expand(alpha, 3)
    s = _expand(sigma, 3)
    w = np.asarray(weight, dtype=np.float64)
    z_hat = np.fft.fft2(x_t) / n
    x0_hat = np.fft.fft2(x0) / n
    g = wiener_gain(p, a, s)
    resid = g * z_hat - x0_hat
    per_sample = (resid.real**2 + resid.imag**2).sum(axis=(-2, -1)) / n**2
    loss = float(np.mean(w * per_sample))
    dg_dpsi = np.where(p > 0, p * a * s**2 / (a**2 * p + s**2) ** 2, 0.0)
    cell = 2.0 * (resid * np.conj(z_hat)).real * dg_dpsi
    cell = (w[:, None, None] * cell).sum(axis=0) / (n**2 * len(w))
    return loss, _aggregate(cell, n)


def expected_denoiser_loss_and_grad(psi, true_power, alpha: float, sigma: float, weight: float = 1.0):
    """Population loss (expectation over data and noise) at a single noise level.

    ``true_power`` is the per-cell power grid of the data distribution.
    """
    true_power = np.asarray(true_power, dtype=np.float64)
    n = true_power.shape[-1]
    p = SpectralDenoiser(psi).power_grid(n)
    g = wiener_gain(p, alpha, sigma)
    var_z = alpha**2 * true_power + sigma**2
    cell_loss = g**2 * var_z - 2 * g * alpha * true_power + true_power
    dg_dpsi = np.where(p > 0, p * alpha * sigma**2 / (alpha**2 * p + sigma**2) ** 2, 0.0)
    cell_grad = (2 * g * var_z - 2 * alpha * true_power) * dg_dpsi
    return weight * cell_loss.sum() / n**2, weight * _aggregate(cell_grad, n) / n**2


class Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta, grad, lr=None):
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad**2
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        return theta - (self.lr if lr is None else lr) * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainResult:
    denoiser: SpectralDenoiser
    loss_trace: list = field(default_factory=list)
    lambdas: list = field(default_factory=list)


def train_spectral_denoiser(fields, spec, epochs: int, lr: float, bias: float, rng: np.random.Generator,
                            init=None, batch_size: int = 32, max_steps: int | None = None) -> TrainResult:
    """Fit per-bin log-power by Adam on the weighted denoising loss.

    ``spec`` is one :class:`ScheduleSpec` shared by all fields, or a sequence
    with one schedule per field. The returned parameters are the running
    average over the second half of training.
    """
    fields = np.asarray(fields, dtype=np.float64)
    if fields.ndim != 3 or len(fields) == 0:
        raise ValueError("need a non-empty stack of square fields (M, N, N)")
    m, n = len(fields), fields.shape[-1]
    specs = list(spec) if isinstance(spec, Sequence) else [spec] * m
    if len(specs) != m:
        raise ValueError("need one schedule per field")
    shared = all(sp is specs[0] for sp in specs)
    psi = np.zeros(n // 2) if init is None else np.array(init, dtype=np.float64)
    opt = Adam(lr)
    steps_per_epoch = max(1, -(-m // batch_size))
    total = epochs * steps_per_epoch if max_steps is None else max_steps
    avg, n_avg = np.zeros_like(psi), 0
    result = TrainResult(SpectralDenoiser(psi))
    for step in range(total):
        idx = rng.integers(0, m, size=min(batch_size, m))
        t = rng.uniform(0.0, 1.0, size=len(idx))
        if shared:
            lam = np.asarray(specs[0].lam(t), dtype=np.float64)
            w = np.asarray(loss_weight(t, specs[0], bias), dtype=np.float64)
        else:
            lam = np.array([specs[i].lam(ti) for i, ti in zip(idx, t)], dtype=np.float64)
            w = np.array([loss_weight(ti, specs[i], bias) for i, ti in zip(idx, t)], dtype=np.float64)
        a, s = np.sqrt(expit(lam)), np.sqrt(expit(-lam))
        x0 = fields[idx]
        x_t = _expand(a, 3) * x0 + _expand(s, 3) * rng.standard_normal(x0.shape)
        loss, grad = denoiser_loss_and_grad(psi, x0, x_t, a, s, w)
        # cosine decay keeps the tail of the trajectory close to the optimum
        step_lr = lr * 0.5 * (1.0 + np.cos(np.pi * step / total))
        psi = opt.step(psi, grad, step_lr)
        result.loss_trace.append(loss)
        result.lambdas.extend(lam.tolist())
        if step >= total // 2:
            avg += psi
            n_avg += 1
    result.denoiser = SpectralDenoiser(avg / max(n_avg, 1) if n_avg else psi)
    return result
