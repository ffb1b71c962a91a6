"""Independent oracles and synthetic fixtures shared across the test suite.

The oracles here are deliberately written as plain scalar loops so they stay
independent of the numpy/FFT implementation paths they are checking.
"""

from __future__ import annotations

import math

import numpy as np

from imagebroker.images import GrayImage


# --- brute-force oracles ------------------------------------------------------


def conv2d_same_oracle(img: np.ndarray, ker: np.ndarray) -> np.ndarray:
    """Zero-padded same-size 2-D convolution, quadruple loop."""
    h, w = img.shape
    ks = ker.shape[0]
    c = (ks - 1) // 2
    out = np.zeros((h, w), dtype=np.complex128)
    for i in range(h):
        for j in range(w):
            acc = 0j
            for a in range(ks):
                for b in range(ks):
                    ii = i - a + c
                    jj = j - b + c
                    if 0 <= ii < h and 0 <= jj < w:
                        acc += ker[a, b] * img[ii, jj]
            out[i, j] = acc
    return out


def energy_oracle(img: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """E[m][n] = sum of |conv output|, via the scalar convolution oracle."""
    m_count, n_count = kernels.shape[:2]
    energy = np.zeros((m_count, n_count))
    for m in range(m_count):
        for n in range(n_count):
            filtered = conv2d_same_oracle(img, kernels[m, n])
            total = 0.0
            for i in range(filtered.shape[0]):
                for j in range(filtered.shape[1]):
                    total += abs(filtered[i, j])
            energy[m, n] = total
    return energy


def stats_oracle(img: np.ndarray, kernels: np.ndarray):
    """(means, deviations) per kernel via scalar loops; division outside the root."""
    m_count, n_count = kernels.shape[:2]
    count = img.shape[0] * img.shape[1]
    means = np.zeros((m_count, n_count))
    deviations = np.zeros((m_count, n_count))
    for m in range(m_count):
        for n in range(n_count):
            filtered = conv2d_same_oracle(img, kernels[m, n])
            mags = [abs(filtered[i, j])
                    for i in range(filtered.shape[0])
                    for j in range(filtered.shape[1])]
            mean = sum(mags) / count
            dev = math.sqrt(sum((v - mean) ** 2 for v in mags)) / count
            means[m, n] = mean
            deviations[m, n] = dev
    return means, deviations


def distance_oracle(q_means, q_devs, t_means, t_devs) -> float:
    """Scalar-loop sum of per-cell Euclidean distances on (mean, deviation)."""
    total = 0.0
    for m in range(q_means.shape[0]):
        for n in range(q_means.shape[1]):
            dm = q_means[m, n] - t_means[m, n]
            dd = q_devs[m, n] - t_devs[m, n]
            total += math.sqrt(dm * dm + dd * dd)
    return total


def dominant_oracle(energy: np.ndarray) -> int:
    """Smallest-index argmax of per-orientation totals, scalar loops."""
    best, best_total = 0, None
    for n in range(energy.shape[1]):
        total = 0.0
        for m in range(energy.shape[0]):
            total += energy[m, n]
        if best_total is None or total > best_total:
            best, best_total = n, total
    return best


# --- synthetic imagery ----------------------------------------------------------


def oriented_grating(
    size: int, freq: float, theta: float, phase: float = 0.0, soft: float = 12.0
) -> GrayImage:
    """Sine grating inside a raised-cosine disk on a black background.

    The circular support keeps the image content rotation-symmetric, so
    rotating theta is the only thing that changes between two gratings.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    center = (size - 1) / 2.0
    radius = np.hypot(xx - center, yy - center)
    window = np.clip((size / 2.0 - radius) / soft, 0.0, 1.0)
    window = 0.5 - 0.5 * np.cos(np.pi * window)
    along = (xx - center) * math.cos(theta) + (yy - center) * math.sin(theta)
    wave = 0.5 + 0.5 * np.sin(2.0 * math.pi * freq * along + phase)
    return GrayImage.from_array(np.round(255.0 * window * wave).astype(np.uint8))


from imagebroker.synth import texture_patch  # noqa: F401  (shared fixture recipe)


def random_gray(rng: np.random.Generator, height: int, width: int) -> GrayImage:
    return GrayImage.from_array(
        rng.integers(0, 256, size=(height, width), dtype=np.uint8)
    )
