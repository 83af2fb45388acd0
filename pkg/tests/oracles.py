"""Independent reference computations used by several test modules."""

import numpy as np
from scipy import integrate, optimize

from specsched.spectral import PowerLawFit


def kappa_log(t, kmin, kmax):
    return t * np.log(kmax) + (1 - t) * np.log(kmin)


def numeric_mu_power(t, fit: PowerLawFit):
    """Invert the normalised CDF of beta*k^alpha on [1, N_f] by bisection."""
    nf = fit.nyquist

    def cdf(k):
        return integrate.quad(fit, 1.0, k, epsabs=1e-14, epsrel=1e-13)[0]

    total = cdf(nf)
    target = (1.0 - t) * total
    if target <= 0:
        return 1.0
    if target >= total:
        return float(nf)
    return optimize.bisect(lambda k: cdf(k) - target, 1.0, nf, xtol=1e-10, rtol=1e-15, maxiter=200)


def numeric_lambda_power(t, fit, kmin=0.2, kmax=200.0):
    mu = numeric_mu_power(t, fit)
    return -kappa_log(t, kmin, kmax) - np.log(fit(mu))


def numeric_lambda_freq(t, fit, kmin=0.2, kmax=200.0):
    mu = fit.nyquist + (1 - fit.nyquist) * t
    return -kappa_log(t, kmin, kmax) - np.log(fit(mu))


def central_difference(f, t, h=1e-5, knots=None):
    """Central difference; with ``knots`` the step stays inside one segment."""
    if knots is not None:
        dist = np.min(np.abs(knots - t))
        h = min(h, 0.25 * dist)
    return (f(t + h) - f(t - h)) / (2 * h)


def random_fits(rng, count, nyquists=(8, 16, 32, 64, 128, 256)):
    out = []
    for _ in range(count):
        out.append(PowerLawFit(rng.uniform(-3.5, -0.05), float(np.exp(rng.uniform(-2, 9))),
                               int(rng.choice(nyquists))))
    return out


_GL_X, _GL_W = np.polynomial.legendre.leggauss(64)


def gl_cdf_unnormalised(k, alpha):
    """Integral of k'^alpha over [1, k] by 64-point Gauss-Legendre in u = log k'."""
    k = np.asarray(k, dtype=np.float64)
    L = np.log(k)[..., None]
    u = 0.5 * L * (_GL_X + 1.0)
    return 0.5 * L[..., 0] * np.sum(_GL_W * np.exp((alpha + 1.0) * u), axis=-1)


def bisect_mu_power(t, alpha, nyquist, tol=1e-10):
    """Vectorised bisection for F(mu) = 1 - t with F from Gauss-Legendre quadrature."""
    t = np.asarray(t, dtype=np.float64)
    total = gl_cdf_unnormalised(float(nyquist), alpha)
    target = (1.0 - t) * total
    lo = np.ones_like(t)
    hi = np.full_like(t, float(nyquist))
    while np.max(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        below = gl_cdf_unnormalised(mid, alpha) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)
