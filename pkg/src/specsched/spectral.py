"""Fourier power spectra, radial averages and power-law fits.

The DFT is unitary per sample: for an ``N x N`` grid ``x_hat = fft2(x) / N``, so
i.i.d. unit-variance noise has expected power one in every frequency cell.
Frequencies are signed integers in ``[-N/2, N/2)``; a cell belongs to radial
bin ``round(|u|)`` (round-half-to-even) and bins beyond the Nyquist frequency
``N_f = N // 2`` are discarded.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .tensorio import ImageTensor

EPS_MONO = 1e-3


class DegenerateSpectrumError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SpectrumCurve:
    """Radially averaged power ``power[k]`` for ``k = 0..N_f`` with cell counts."""

    power: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        power = np.asarray(self.power, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.int64)
        if power.ndim != 1 or power.shape != counts.shape or power.size < 2:
            raise ValueError("power and counts must be 1-D arrays of equal length >= 2")
        if np.any(power < 0) or not np.all(np.isfinite(power)):
            raise ValueError("power must be finite and non-negative")
        if np.any(counts[1:] < 1):
            raise ValueError("every bin 1..N_f needs at least one cell")
        object.__setattr__(self, "power", power)
        object.__setattr__(self, "counts", counts)

    @property
    def nyquist(self) -> int:
        return self.power.size - 1

    @property
    def k(self) -> np.ndarray:
        return np.arange(self.power.size)

    def __eq__(self, other):
        if not isinstance(other, SpectrumCurve):
            return NotImplemented
        return np.array_equal(self.power, other.power) and np.array_equal(self.counts, other.counts)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("k,power,count\n")
        for k, (p, c) in enumerate(zip(self.power, self.counts)):
            out.write(f"{k},{float(p)!r},{int(c)}\n")
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SpectrumCurve":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["k", "power", "count"]:
            raise ValueError("spectrum CSV must start with header 'k,power,count'")
        power, counts = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"line {lineno}: expected 3 fields, got {len(row)}")
            try:
                k, p, c = int(row[0]), float(row[1]), int(row[2])
            except ValueError:
                raise ValueError(f"line {lineno}: malformed value in {row!r}") from None
            if k != len(power):
                raise ValueError(f"line {lineno}: expected k={len(power)}, got {k}")
            power.append(p)
            counts.append(c)
        return cls(np.array(power), np.array(counts))

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path) -> "SpectrumCurve":
        return cls.from_csv(Path(path).read_text())


@dataclass(frozen=True)
class PowerLawFit:
    """Continuous spectrum model ``beta * k**alpha`` on ``[1, nyquist]``."""

    alpha: float
    beta: float
    nyquist: int

    def __post_init__(self):
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "nyquist", int(self.nyquist))
        if not (np.isfinite(self.alpha) and np.isfinite(self.beta) and self.beta > 0):
            raise ValueError(f"invalid power law alpha={self.alpha}, beta={self.beta}")
        if self.nyquist < 2:
            raise ValueError(f"nyquist must be >= 2, got {self.nyquist}")

    def __call__(self, k):
        return self.beta * np.power(np.asarray(k, dtype=np.float64), self.alpha)

    def log_power(self, k):
        return np.log(self.beta) + self.alpha * np.log(np.asarray(k, dtype=np.float64))

    def to_curve(self) -> SpectrumCurve:
        """Tabulate on bins ``0..N_f`` of a ``2 N_f`` grid (DC set to zero)."""
        k = np.arange(self.nyquist + 1, dtype=np.float64)
        power = np.zeros_like(k)
        power[1:] = self(k[1:])
        return SpectrumCurve(power, bin_counts(2 * self.nyquist))

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "nyquist": self.nyquist}

    @classmethod
    def from_dict(cls, d) -> "PowerLawFit":
        return cls(d["alpha"], d["beta"], d["nyquist"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "PowerLawFit":
        return cls.from_dict(json.loads(text))


# Frequency lattice ------------------------------------------------------------


def frequencies(n: int) -> np.ndarray:
    """Signed integer frequencies in FFT order."""
    return np.fft.fftfreq(n, d=1.0 / n)


@lru_cache(maxsize=32)
def _radial_index(n: int) -> np.ndarray:
    f = frequencies(n)
    r = np.hypot(f[:, None], f[None, :])
    idx = np.rint(r).astype(np.int64)
    idx.setflags(write=False)
    return idx


def radial_index(n: int) -> np.ndarray:
    """Radial bin ``round(|u|)`` of every cell of an ``n x n`` FFT grid."""
    return _radial_index(n)


def bin_counts(n: int) -> np.ndarray:
    """Cells per radial bin ``0..n//2`` (corner cells beyond Nyquist dropped)."""
    nf = n // 2
    return np.bincount(radial_index(n).ravel(), minlength=nf + 1)[: nf + 1]


def dft2(img, channel: int = 0) -> np.ndarray:
    """Unitary 2-D DFT of one channel (``ImageTensor``) or of a 2-D array."""
    x = img.channel(channel) if isinstance(img, ImageTensor) else np.asarray(img, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ValueError(f"dft2 needs a square 2-D grid, got {x.shape}")
    return np.fft.fft2(x) / x.shape[0]


def power_grid(x) -> np.ndarray:
    """``|x_hat(u)|^2`` over the trailing two (square) axes of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if x.ndim < 2 or x.shape[-2] != n:
        raise ValueError(f"expected square trailing axes, got {x.shape}")
    xh = np.fft.fft2(x) / n
    return xh.real**2 + xh.imag**2


def radial_average(power) -> np.ndarray:
    """Average a power grid (trailing axes ``n x n``) into bins ``0..n//2``."""
    power = np.asarray(power, dtype=np.float64)
    n = power.shape[-1]
    nf = n // 2
    lead = power.shape[:-2]
    flat = power.reshape(-1, n * n)
    idx = radial_index(n).ravel()
    keep = idx <= nf
    batch = flat.shape[0]
    combined = (np.arange(batch)[:, None] * (nf + 1) + idx[keep][None, :]).ravel()
    sums = np.bincount(combined, weights=flat[:, keep].ravel(), minlength=batch * (nf + 1))
    out = sums.reshape(batch, nf + 1) / bin_counts(n)
    return out.reshape(lead + (nf + 1,))


def rapsd_batch(fields) -> np.ndarray:
    """RAPSD of every ``n x n`` field in a stack ``(..., n, n)``."""
    return radial_average(power_grid(fields))


def rapsd(img) -> SpectrumCurve:
    """RAPSD of an image; colour channels are averaged.

    Accepts an :class:`ImageTensor` or a square 2-D array.
    """
    if isinstance(img, ImageTensor):
        fields = np.moveaxis(img.data, -1, 0)
        n = img.side
    else:
        fields = np.asarray(img, dtype=np.float64)
        if fields.ndim != 2:
            raise ValueError("array input to rapsd must be 2-D; use rapsd_batch for stacks")
        n = fields.shape[0]
    curves = rapsd_batch(fields)
    power = curves.mean(axis=0) if curves.ndim == 2 else curves
    return SpectrumCurve(np.maximum(power, 0.0), bin_counts(n))


# Power-law fitting ----------------------------------------------------------------


def fit_power_law(curve: SpectrumCurve, eps_mono: float = EPS_MONO) -> PowerLawFit:
    """Unweighted least squares of ``log power`` on ``log k`` over ``k = 1..N_f``.

    The slope is clamped to ``<= -eps_mono`` (with the intercept refit for the
    clamped slope) so the resulting model is strictly decreasing.
    """
    k = np.arange(1, curve.nyquist + 1, dtype=np.float64)
    p = curve.power[1:]
    usable = p > 0
    if usable.sum() < 2:
        raise DegenerateSpectrumError(
            f"need at least 2 bins with positive power, got {int(usable.sum())}"
        )
    if not usable.all():
        warnings.warn(
            f"excluding {int((~usable).sum())} zero-power bins from power-law fit",
            RuntimeWarning,
            stacklevel=2,
        )
    lk, lp = np.log(k[usable]), np.log(p[usable])
    design = np.column_stack([np.ones_like(lk), lk])
    (log_beta, alpha), *_ = np.linalg.lstsq(design, lp, rcond=None)
    if alpha > -eps_mono:
        alpha = -eps_mono
        log_beta = np.mean(lp - alpha * lk)
    return PowerLawFit(alpha, np.exp(log_beta), curve.nyquist)


def predicted_noised_rapsd(source, alpha_q: float, sigma_q: float) -> SpectrumCurve:
    """Expected RAPSD of ``alpha_q * x + sigma_q * eps`` given the RAPSD of ``x``."""
    if alpha_q < 0 or sigma_q < 0:
        raise ValueError("alpha_q and sigma_q must be non-negative")
    curve = source.to_curve() if isinstance(source, PowerLawFit) else source
    return SpectrumCurve(alpha_q**2 * curve.power + sigma_q**2, curve.counts)


# Stationary Gaussian fields -------------------------------------------------------


def cell_power(source, n: int) -> np.ndarray:
    """Per-cell power on an ``n x n`` FFT grid for a radial spectrum.

    DC is zero; corner cells beyond Nyquist take the Nyquist bin's power so the
    grid is fully described by bins ``1..N_f``.
    """
    nf = n // 2
    if isinstance(source, PowerLawFit):
        table = np.zeros(nf + 1)
        table[1:] = source(np.arange(1, nf + 1))
        if source.nyquist != nf:
            raise ValueError(f"fit has nyquist {source.nyquist}, grid needs {nf}")
    else:
        table = np.asarray(getattr(source, "power", source), dtype=np.float64).copy()
        if table.size != nf + 1:
            raise ValueError(f"spectrum has {table.size} bins, grid needs {nf + 1}")
        table[0] = 0.0
    return table[np.minimum(radial_index(n), nf)]


def synthesize_field(source, n: int, rng: np.random.Generator, count: int | None = None) -> np.ndarray:
    """Zero-mean stationary Gaussian field(s) with the given radial spectrum.

    White noise is coloured in the Fourier domain; the FFT of real white noise
    is Hermitian with unit variance per cell, so the result's expected power in
    every cell is exactly :func:`cell_power`.
    """
    shape = (n, n) if count is None else (count, n, n)
    white = rng.standard_normal(shape)
    amp = np.sqrt(cell_power(source, n))
    return np.fft.ifft2(np.fft.fft2(white) * amp).real
