"""Fixed sinc band-pass filterbank and the raw-waveform front-end.

Band edges are spaced uniformly on one of three warped axes (Mel, inverse
Mel, linear). Each filter is a Hamming-windowed difference of two ideal
low-pass sincs, so every impulse response is even about its centre tap and
the filters are linear-phase.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .autograd import BatchNormState, ShapeError, Tensor, batch_norm, conv1d, leaky_relu, maxpool1d

SAMPLE_RATE = 16000


class ScaleKind(str, enum.Enum):
    MEL = "mel"
    INVERSE_MEL = "inverse_mel"
    LINEAR = "linear"


def mel_from_hz(f):
    """HTK Mel warp, ``2595 * log10(1 + f / 700)``."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("frequency must be non-negative")
    out = 2595.0 * np.log10(1.0 + f / 700.0)
    return float(out) if out.ndim == 0 else out


def hz_from_mel(m):
    m = np.asarray(m, dtype=np.float64)
    if np.any(m < 0):
        raise ValueError("mel value must be non-negative")
    out = 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    return float(out) if out.ndim == 0 else out


def band_edge_points(scale: ScaleKind | str, n_filters: int, f_min: float, f_max: float) -> np.ndarray:
    """``n_filters + 2`` strictly increasing edge frequencies in Hz.

    Inverse Mel reflects the Mel points about the centre of ``[f_min, f_max]``:
    point ``i`` is ``f_min + f_max - mel_point[n + 1 - i]``, which puts the
    fine resolution at the top of the band.
    """
    scale = ScaleKind(scale)
    if n_filters < 1:
        raise ValueError("n_filters must be >= 1")
    if not (0 < f_min < f_max):
        raise ValueError(f"need 0 < f_min < f_max, got f_min={f_min}, f_max={f_max}")
    n_points = n_filters + 2
    if scale is ScaleKind.LINEAR:
        pts = np.linspace(f_min, f_max, n_points)
    else:
        mel = hz_from_mel(np.linspace(mel_from_hz(f_min), mel_from_hz(f_max), n_points))
        mel[0], mel[-1] = f_min, f_max
        pts = mel if scale is ScaleKind.MEL else (f_min + f_max) - mel[::-1]
    if np.any(np.diff(pts) <= 0):
        raise ValueError("band edges are not strictly increasing; too many filters for the range")
    return pts


def make_band_edges(scale: ScaleKind | str, n_filters: int, f_min: float, f_max: float) -> np.ndarray:
    """(n_filters, 2) array of (f_low, f_high); filter i spans edge points i and i+2."""
    pts = band_edge_points(scale, n_filters, f_min, f_max)
    return np.stack([pts[:-2], pts[2:]], axis=1)


def sinc_kernel(f_low: float, f_high: float, kernel_len: int = 129,
                sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Windowed band-pass impulse response for ``[f_low, f_high]`` Hz.

    A zero-DC correction (subtracting the matching multiple of the window)
    is applied so that bands narrower than the kernel's frequency resolution
    still reject DC. Values are computed from ``|n - centre|`` so the
    response is exactly symmetric.
    """
    if kernel_len < 3 or kernel_len % 2 == 0:
        raise ValueError("kernel_len must be odd and >= 3")
    if not (0 <= f_low < f_high <= sample_rate / 2):
        raise ValueError(f"invalid band ({f_low}, {f_high}) for sample rate {sample_rate}")
    half = kernel_len // 2
    offset = np.abs(np.arange(kernel_len) - half).astype(np.float64)
    lo = 2.0 * f_low / sample_rate
    hi = 2.0 * f_high / sample_rate
    ideal = hi * np.sinc(hi * offset) - lo * np.sinc(lo * offset)
    window = 0.54 + 0.46 * np.cos(np.pi * offset / half)
    h = ideal * window
    return h - (h.sum() / window.sum()) * window


@dataclass(frozen=True)
class SincFilterbank:
    """Immutable bank of fixed sinc kernels, shape (n_filters, 1, kernel_len)."""

    scale: ScaleKind
    sample_rate: int
    cutoffs: np.ndarray
    kernels: np.ndarray

    @property
    def n_filters(self) -> int:
        return self.kernels.shape[0]

    @property
    def kernel_len(self) -> int:
        return self.kernels.shape[2]

    def as_tensor(self, dtype=np.float32) -> Tensor:
        # never trainable
        return Tensor(self.kernels.astype(dtype), requires_grad=False, name="sinc")

    def checksum(self) -> str:
        import hashlib

        return hashlib.sha256(self.kernels.tobytes() + self.cutoffs.tobytes()).hexdigest()


def build_filterbank(scale: ScaleKind | str = ScaleKind.MEL, n_filters: int = 128,
                     kernel_len: int = 129, sample_rate: int = SAMPLE_RATE,
                     f_min: float = 30.0, f_max: float | None = None) -> SincFilterbank:
    scale = ScaleKind(scale)
    nyquist = sample_rate / 2
    if f_max is None:
        f_max = nyquist - 100.0
    if f_max > nyquist:
        raise ValueError(f"f_max {f_max} above Nyquist {nyquist}")
    cutoffs = make_band_edges(scale, n_filters, f_min, f_max)
    kernels = np.stack([sinc_kernel(lo, hi, kernel_len, sample_rate) for lo, hi in cutoffs])[:, None, :]
    cutoffs.setflags(write=False)
    kernels.setflags(write=False)
    return SincFilterbank(scale, sample_rate, cutoffs, kernels)


def magnitude_response(kernels: np.ndarray, n_fft: int = 4096) -> np.ndarray:
    """|H| on ``n_fft // 2 + 1`` bins from DC to Nyquist, one row per filter."""
    k = np.asarray(kernels).reshape(-1, kernels.shape[-1])
    return np.abs(np.fft.rfft(k, n=n_fft, axis=1))


def frontend_forward(waveform: Tensor, bank: SincFilterbank, gamma: Tensor, beta: Tensor,
                     bn_state: BatchNormState, training: bool = False,
                     slope: float = 0.3, expected_len: int | None = None) -> Tensor:
    """Sinc conv -> maxpool(3) -> BN -> LeakyReLU on (B, 1, T) raw audio.

    No layer normalization is applied to the input.
    """
    x = waveform
    if x.data.ndim != 3 or x.shape[1] != 1:
        raise ShapeError(f"front-end expects (batch, 1, samples), got {x.shape}")
    if expected_len is not None and x.shape[2] != expected_len:
        raise ShapeError(f"front-end expects {expected_len} samples, got {x.shape[2]}")
    y = conv1d(x, bank.as_tensor(x.dtype))
    y = maxpool1d(y, 3)
    y = batch_norm(y, gamma, beta, bn_state, training)
    return leaky_relu(y, slope)
