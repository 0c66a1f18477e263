"""Fourier representation of real, mean-zero periodic fields on [0, 2*pi).

A spectral state is a complex array whose last axis holds the coefficients
``u_k`` for ``k = 1..nmodes``.  The mean ``u_0`` is never stored and the
negative wavenumbers follow from ``u_{-k} = conj(u_k)``, so every state
synthesises to a real field.  Leading axes are batch axes and are carried
through every operation unchanged.

Normalisation: analysis carries ``1/ngrid``, synthesis carries none::

    u_k = (1/ngrid) * sum_j u(x_j) exp(-i k x_j)
    u(x_j) = sum_{|k| <= nmodes} u_k exp(i k x_j)

so a coefficient of 0.5 at ``k = 1`` is the field ``cos(x)``.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.fft


class SpectralError(ValueError):
    """Invalid spectral state or incompatible grid."""


def wavenumbers(nmodes: int) -> np.ndarray:
    return np.arange(1, nmodes + 1, dtype=float)


def grid(ngrid: int) -> np.ndarray:
    """Collocation points ``x_j = 2*pi*j/ngrid``."""
    return 2.0 * np.pi * np.arange(ngrid) / ngrid


def validate_state(coeffs) -> np.ndarray:
    coeffs = np.asarray(coeffs)
    if coeffs.ndim == 0 or coeffs.shape[-1] < 1:
        raise SpectralError("state needs a trailing mode axis with nmodes >= 1")
    if not np.all(np.isfinite(coeffs)):
        raise SpectralError("state has non-finite coefficients")
    return coeffs.astype(complex, copy=False)


@lru_cache(maxsize=None)
def dealias_size(nmodes: int) -> int:
    """Smallest even, FFT-friendly grid that holds quadratic products exactly.

    Products of modes ``|k| <= nmodes`` reach ``2*nmodes``; on a grid of
    ``m`` points they alias onto ``|k| <= nmodes`` only when ``m <= 3*nmodes``.
    """
    m = 3 * nmodes + 1
    while m % 2 or scipy.fft.next_fast_len(m, real=True) != m:
        m += 1
    return m


def to_physical(coeffs, ngrid: int) -> np.ndarray:
    """Synthesise real samples on ``ngrid`` equispaced points.

    Modes the grid cannot represent (``k > (ngrid - 2)/2``) must be exactly
    zero, e.g. the cleared Nyquist mode of a full-model state on ``2N`` points.
    """
    coeffs = validate_state(coeffs)
    nmodes = coeffs.shape[-1]
    kmax = (ngrid - 2) // 2
    if ngrid % 2 or kmax < 1:
        raise SpectralError(f"ngrid={ngrid} must be even and >= 4")
    if nmodes > kmax:
        if np.any(coeffs[..., kmax:]):
            raise SpectralError(
                f"ngrid={ngrid} aliases a {nmodes}-mode state; need an even ngrid >= {2 * nmodes + 2}"
            )
        coeffs = coeffs[..., :kmax]
    return _synthesise(coeffs, ngrid)


def _synthesise(coeffs: np.ndarray, ngrid: int) -> np.ndarray:
    nmodes = coeffs.shape[-1]
    padded = np.zeros(coeffs.shape[:-1] + (ngrid // 2 + 1,), dtype=complex)
    padded[..., 1 : nmodes + 1] = coeffs
    return scipy.fft.irfft(padded, n=ngrid, norm="forward")


def _analyse(values: np.ndarray, nmodes: int) -> np.ndarray:
    return scipy.fft.rfft(values, norm="forward")[..., 1 : nmodes + 1]


def to_spectral(values, nmodes: int) -> np.ndarray:
    """Coefficients ``k = 1..nmodes`` of real samples; the mean is dropped."""
    values = np.asarray(values, dtype=float)
    ngrid = values.shape[-1]
    if nmodes < 1 or nmodes > (ngrid - 2) // 2:
        raise SpectralError(f"nmodes={nmodes} not resolvable on {ngrid} points")
    return _analyse(values, nmodes)


def spectral_derivative(coeffs) -> np.ndarray:
    coeffs = validate_state(coeffs)
    return 1j * wavenumbers(coeffs.shape[-1]) * coeffs


def burgers_nonlinearity(coeffs) -> np.ndarray:
    """Spectral coefficients of ``-(1/2) d/dx (u^2)``, dealiased, truncated to nmodes.

    Equals ``-(ik/2) * sum_{|l|<=N, |k-l|<=N} u_l u_{k-l}`` exactly (up to
    round-off): the product is formed on a grid of ``dealias_size(N)`` points.
    """
    return nonlinear_term(validate_state(coeffs))


def nonlinear_term(coeffs: np.ndarray) -> np.ndarray:
    # unchecked variant of burgers_nonlinearity for the time steppers
    nmodes = coeffs.shape[-1]
    u = _synthesise(coeffs, dealias_size(nmodes))
    return -0.5j * wavenumbers(nmodes) * _analyse(u * u, nmodes)


def project(coeffs, kcut: int) -> np.ndarray:
    coeffs = validate_state(coeffs)
    if not 1 <= kcut <= coeffs.shape[-1]:
        raise SpectralError(f"kcut={kcut} outside 1..{coeffs.shape[-1]}")
    return coeffs[..., :kcut].copy()


def energy(coeffs) -> np.ndarray:
    """Mean square of the field, ``sum_{k != 0} |u_k|^2 = 2 * sum_{k>0} |u_k|^2``."""
    return 2.0 * np.sum(np.abs(coeffs) ** 2, axis=-1)
