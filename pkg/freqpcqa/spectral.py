"""
Discrete Fourier transforms for patch coordinate signals

The fast path is an iterative radix-2 Cooley-Tukey transform over numpy
arrays; lengths that are not a power of two use the direct O(N^2) DFT.
All transforms act on the last axis, so a (3, N) block of coordinate
signals is transformed in one call. Forward transforms are unnormalized;
the 1/N factor lives in the inverse.
"""

from functools import lru_cache
from typing import Tuple

import numpy as np


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@lru_cache(maxsize=32)
def _radix2_tables(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Bit-reversal permutation and forward twiddles exp(-2*pi*i*k/n), k < n/2"""
    bits = n.bit_length() - 1
    index = np.arange(n)
    reversed_index = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        reversed_index |= ((index >> b) & 1) << (bits - 1 - b)
    twiddles = np.exp(-2j * np.pi * np.arange(n // 2) / n)
    reversed_index.flags.writeable = False
    twiddles.flags.writeable = False
    return reversed_index, twiddles


def _as_signal(signal) -> np.ndarray:
    x = np.asarray(signal)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ValueError("fft of an empty signal")
    return x.astype(np.complex128, copy=False)


def dft(signal) -> np.ndarray:
    """Direct transform X[k] = sum_n x[n] exp(-2*pi*i*k*n/N) along the last axis"""
    x = _as_signal(signal)
    n = x.shape[-1]
    k = np.arange(n)
    # k*n reduced mod N keeps the phase argument small and exact
    basis = np.exp(-2j * np.pi * ((np.outer(k, k) % n) / n))
    return x @ basis.T


def fft(signal) -> np.ndarray:
    """
    Unnormalized forward transform along the last axis.

    Args:
        signal: real or complex array, last-axis length N >= 1

    Returns:
        complex128 array of the same shape

    Raises:
        ValueError: empty input
    """
    x = _as_signal(signal)
    n = x.shape[-1]
    if not is_power_of_two(n):
        return dft(x)
    if n == 1:
        return x.copy()

    reversed_index, twiddles = _radix2_tables(n)
    lead = x.shape[:-1]
    out = x[..., reversed_index]
    size = 2
    while size <= n:
        half = size // 2
        blocks = out.reshape(lead + (n // size, size))
        w = twiddles[:: n // size]
        even = blocks[..., :half]
        odd = blocks[..., half:] * w
        out = np.concatenate((even + odd, even - odd), axis=-1).reshape(lead + (n,))
        size *= 2
    return out


def ifft(spectrum) -> np.ndarray:
    """Inverse of ``fft``: x[n] = (1/N) sum_k X[k] exp(2*pi*i*k*n/N)"""
    X = _as_signal(spectrum)
    return np.conj(fft(np.conj(X))) / X.shape[-1]


def magnitude(spectrum) -> np.ndarray:
    """Element-wise complex modulus"""
    return np.abs(np.asarray(spectrum))


def fftshift(seq) -> np.ndarray:
    """Rotate the last axis by floor(N/2) so index 0 moves to the center"""
    a = np.asarray(seq)
    return np.roll(a, a.shape[-1] // 2, axis=-1)
