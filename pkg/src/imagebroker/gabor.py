"""Texture feature extraction and rotation-invariant similarity.

The filter bank is a grid of complex Gabor wavelets: an isotropic Gaussian
envelope modulated by a complex sinusoid at orientation n*pi/N, with center
frequencies spaced geometrically between ``low_freq`` and ``high_freq``
(scale 0 sits at ``high_freq``). Each kernel is made DC-free by subtracting
the envelope scaled with the closed-form DC gain, which keeps the family
exactly rotation-covariant: kernel (m, n) evaluated on a grid rotated by
pi/N reproduces kernel (m, n+1).

An image's texture signature is the per-(scale, orientation) mean and
deviation of the filtered magnitude field; similarity between two images is
the summed Euclidean distance over those (mean, deviation) pairs after both
signatures have been rotation-normalized by circularly shifting orientation
columns so the dominant orientation occupies column 0.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, replace

import numpy as np
from scipy.fft import next_fast_len

from .errors import ComparisonError, ContractError, DecodeError, ParameterError
from .images import GrayImage
from .wire import Reader, Writer

# Envelope sigma is clamped so the Gaussian stays contained in the fixed
# kernel window; an envelope wider than ~radius/2.8 would be truncated so
# hard that its spectral sidelobes leak energy into unrelated orientations.
_SIGMA_WINDOW_FRACTION = 1.0 / 2.8


@dataclass(frozen=True)
class FilterBankParams:
    scales: int = 5
    orientations: int = 6
    low_freq: float = 0.05
    high_freq: float = 0.4
    kernel_size: int = 31

    def __post_init__(self) -> None:
        if self.scales < 1 or self.orientations < 1:
            raise ParameterError("scales and orientations must be >= 1")
        if not (0.0 < self.low_freq < self.high_freq < 0.5):
            raise ParameterError(
                f"need 0 < low_freq < high_freq < 0.5, got {self.low_freq}, {self.high_freq}"
            )
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ParameterError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")

    def center_frequency(self, scale: int) -> float:
        """Geometric spacing from high_freq (scale 0) down to low_freq."""
        if self.scales == 1:
            return self.high_freq
        step = (self.high_freq / self.low_freq) ** (1.0 / (self.scales - 1))
        return self.high_freq * step ** (-scale)

    def envelope_sigma(self, scale: int) -> float:
        """Spatial Gaussian width for a scale, clamped to fit the kernel window."""
        if self.scales == 1:
            step = 2.0
        else:
            step = (self.high_freq / self.low_freq) ** (1.0 / (self.scales - 1))
        freq = self.center_frequency(scale)
        sigma_u = (step - 1.0) * freq / ((step + 1.0) * math.sqrt(2.0 * math.log(2.0)))
        sigma = 1.0 / (2.0 * math.pi * sigma_u)
        radius = self.kernel_size // 2 + 0.5
        return min(sigma, _SIGMA_WINDOW_FRACTION * radius)


def kernel_value(
    params: FilterBankParams, scale: int, orientation: int, x: np.ndarray, y: np.ndarray
) -> np.ndarray:
    """Evaluate kernel (scale, orientation) at arbitrary (x, y) coordinates.

    This is the continuous definition the sampled bank is built from; tests
    use it to resample a kernel on a rotated grid.
    """
    freq = params.center_frequency(scale)
    sigma = params.envelope_sigma(scale)
    theta = orientation * math.pi / params.orientations
    xr = x * math.cos(theta) + y * math.sin(theta)
    envelope = np.exp(-(np.square(x) + np.square(y)) / (2.0 * sigma * sigma))
    envelope = envelope / (2.0 * math.pi * sigma * sigma)
    carrier = np.exp(2j * math.pi * freq * xr)
    dc_gain = math.exp(-2.0 * math.pi ** 2 * sigma ** 2 * freq ** 2)
    return envelope * (carrier - dc_gain)


class FilterBank:
    """Immutable sampled kernel grid plus a per-shape FFT cache."""

    def __init__(self, params: FilterBankParams, kernels: np.ndarray):
        self.params = params
        self.kernels = kernels
        kernels.setflags(write=False)
        self._fft_cache: dict[tuple[int, int], np.ndarray] = {}
        self._lock = threading.Lock()

    @property
    def scales(self) -> int:
        return self.params.scales

    @property
    def orientations(self) -> int:
        return self.params.orientations

    def kernel_ffts(self, shape: tuple[int, int]) -> np.ndarray:
        with self._lock:
            cached = self._fft_cache.get(shape)
            if cached is None:
                m, n, k, _ = self.kernels.shape
                cached = np.fft.fft2(self.kernels.reshape(m * n, k, k), s=shape)
                cached.setflags(write=False)
                self._fft_cache[shape] = cached
            return cached


def build_filter_bank(params: FilterBankParams) -> FilterBank:
    size = params.kernel_size
    half = size // 2
    ys, xs = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    kernels = np.empty((params.scales, params.orientations, size, size), dtype=np.complex128)
    for m in range(params.scales):
        for n in range(params.orientations):
            kernels[m, n] = kernel_value(params, m, n, xs, ys)
    return FilterBank(params, kernels)


def filtered_magnitudes(image: GrayImage, bank: FilterBank) -> np.ndarray:
    """|filtered image| for every kernel: shape (M, N, height, width).

    Zero-padded convolution cropped to the input size (centered, kernel size
    is odd).
    """
    pixels = image.pixels.astype(np.float64)
    k = bank.params.kernel_size
    shape = (next_fast_len(image.height + k - 1), next_fast_len(image.width + k - 1))
    img_fft = np.fft.fft2(pixels, s=shape)
    full = np.fft.ifft2(img_fft[None, :, :] * bank.kernel_ffts(shape), axes=(-2, -1))
    half = (k - 1) // 2
    same = full[:, half:half + image.height, half:half + image.width]
    mags = np.abs(same).reshape(bank.scales, bank.orientations, image.height, image.width)
    return mags


def compute_energy(image: GrayImage, bank: FilterBank) -> np.ndarray:
    """Summed filtered magnitude per (scale, orientation); shape (M, N), all >= 0."""
    return filtered_magnitudes(image, bank).sum(axis=(2, 3))


def dominant_orientation(energy: np.ndarray) -> int:
    """Orientation column with the highest total energy; ties take the smallest index."""
    totals = np.asarray(energy).sum(axis=0)
    return int(np.argmax(totals))


@dataclass(frozen=True)
class TextureFeatureVector:
    """Per-(scale, orientation) magnitude statistics with rotation bookkeeping.

    ``means[m, n]`` is the average filtered magnitude, ``deviations[m, n]``
    the root-sum-of-squares deviation divided by the pixel count. After
    rotation normalization the dominant orientation occupies column 0.
    """

    means: np.ndarray
    deviations: np.ndarray
    dominant: int
    normalized: bool

    def __post_init__(self) -> None:
        if self.means.shape != self.deviations.shape or self.means.ndim != 2:
            raise ContractError(f"feature grids must share a 2-D shape, got "
                                f"{self.means.shape} vs {self.deviations.shape}")
        if not (0 <= self.dominant < self.means.shape[1]):
            raise ContractError(f"dominant orientation {self.dominant} out of range")
        if self.normalized and self.dominant != 0:
            raise ContractError("normalized feature must have dominant orientation 0")
        if np.any(self.means < 0) or np.any(self.deviations < 0):
            raise ContractError("feature statistics must be non-negative")
        self.means.setflags(write=False)
        self.deviations.setflags(write=False)

    @property
    def scales(self) -> int:
        return self.means.shape[0]

    @property
    def orientations(self) -> int:
        return self.means.shape[1]

    def components(self) -> np.ndarray:
        """Flat [mean, deviation, mean, deviation, ...] with orientation varying fastest."""
        out = np.empty(self.scales * self.orientations * 2, dtype=np.float64)
        out[0::2] = self.means.ravel()
        out[1::2] = self.deviations.ravel()
        return out

    def to_bytes(self) -> bytes:
        w = Writer()
        w.u32(self.scales).u32(self.orientations)
        w.u32(self.dominant).u32(1 if self.normalized else 0)
        for value in self.components():
            w.f64(value)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "TextureFeatureVector":
        r = Reader(data)
        feature = cls.read_from(r)
        r.expect_end()
        return feature

    @classmethod
    def read_from(cls, r: Reader) -> "TextureFeatureVector":
        scales, orientations = r.u32(), r.u32()
        dominant, normalized = r.u32(), r.u32()
        if scales < 1 or orientations < 1 or scales * orientations > 1_000_000:
            raise DecodeError(f"implausible feature grid {scales}x{orientations}")
        if normalized not in (0, 1):
            raise DecodeError(f"normalized flag must be 0 or 1, got {normalized}")
        flat = np.array([r.f64() for _ in range(scales * orientations * 2)])
        means = flat[0::2].reshape(scales, orientations)
        deviations = flat[1::2].reshape(scales, orientations)
        if dominant >= orientations:
            raise DecodeError(f"dominant orientation {dominant} out of range")
        return cls(means=means, deviations=deviations, dominant=int(dominant),
                   normalized=bool(normalized))

    def write_to(self, w: Writer) -> None:
        w.raw(self.to_bytes())


def stats_of_magnitudes(magnitudes: np.ndarray, pixel_count: int) -> TextureFeatureVector:
    """Statistics of precomputed |filtered| fields, shape (M, N, h, w).

    The deviation follows the engine's defining formula literally:
    sqrt(sum((|G| - mean)^2)) / (P*Q), with the division outside the root.
    """
    energy = magnitudes.sum(axis=(2, 3))
    means = energy / pixel_count
    centered = magnitudes - means[:, :, None, None]
    deviations = np.sqrt(np.square(centered).sum(axis=(2, 3))) / pixel_count
    return TextureFeatureVector(
        means=means,
        deviations=deviations,
        dominant=dominant_orientation(energy),
        normalized=False,
    )


def compute_stats(image: GrayImage, bank: FilterBank) -> TextureFeatureVector:
    """Unnormalized feature: means, deviations and the dominant orientation."""
    return stats_of_magnitudes(
        filtered_magnitudes(image, bank), image.width * image.height
    )


def normalize_rotation(feature: TextureFeatureVector) -> TextureFeatureVector:
    """Circularly shift orientation columns so the dominant column is index 0."""
    shift = feature.dominant
    if shift == 0:
        return replace(feature, normalized=True)
    return TextureFeatureVector(
        means=np.roll(feature.means, -shift, axis=1),
        deviations=np.roll(feature.deviations, -shift, axis=1),
        dominant=0,
        normalized=True,
    )


def extract_feature(image: GrayImage, bank: FilterBank) -> TextureFeatureVector:
    return normalize_rotation(compute_stats(image, bank))


def feature_distance(query: TextureFeatureVector, target: TextureFeatureVector) -> float:
    """Sum over (scale, orientation) of Euclidean distances on (mean, deviation) pairs."""
    if not query.normalized or not target.normalized:
        raise ContractError("feature_distance requires rotation-normalized features")
    if query.means.shape != target.means.shape:
        raise ComparisonError(
            f"feature grids differ: {query.means.shape} vs {target.means.shape}"
        )
    return float(
        np.sqrt(
            np.square(query.means - target.means)
            + np.square(query.deviations - target.deviations)
        ).sum()
    )
