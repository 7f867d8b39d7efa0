"""Region-level principal band power from segmented multichannel recordings.

Pipeline per subject and region: FFT of each segment, rank-1 periodogram
matrices, Daniell smoothing across frequency with a GCV-chosen span,
normalized leading eigenvalue ("principal power"), then integration over
a frequency band.  Band powers are returned on both the raw and log scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DegenerateSegmentError, InputError

DEFAULT_BANDS = {
    "delta": (0.0, 4.0),
    "theta": (4.0, 8.0),
    "alpha": (8.0, 15.0),
    "beta": (15.0, 32.0),
    "gamma": (32.0, 50.0),
}

DEFAULT_SPANS = (1, 3, 5, 7, 9, 11, 13, 15)


@dataclass(frozen=True)
class SegmentedRecording:
    """Samples of one subject/region, shape ``(channels, segment_length, segments)``."""

    subject: str
    region: int
    samples: np.ndarray
    sampling_rate: float

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=float)
        if x.ndim == 2:
            x = x[np.newaxis]
        if x.ndim != 3:
            raise InputError("samples must have shape (channels, segment_length, segments)")
        if x.shape[0] < 1 or x.shape[2] < 1:
            raise InputError("need at least one channel and one segment")
        if not np.all(np.isfinite(x)):
            raise InputError(f"non-finite samples for subject {self.subject}, region {self.region}")
        object.__setattr__(self, "samples", x)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def segment_length(self) -> int:
        return self.samples.shape[1]

    @property
    def n_segments(self) -> int:
        return self.samples.shape[2]

    @classmethod
    def from_continuous(cls, subject, region, data, sampling_rate, segment_length):
        """Split ``(n_samples, channels)`` data into non-overlapping segments.

        Trailing samples that do not fill a segment are dropped.
        """
        data = np.asarray(data, dtype=float)
        if data.ndim == 1:
            data = data[:, None]
        m = data.shape[0] // segment_length
        if m < 1:
            raise InputError(f"recording for subject {subject} shorter than one segment")
        x = data[: m * segment_length].reshape(m, segment_length, -1)
        return cls(subject, region, np.transpose(x, (2, 1, 0)), sampling_rate)


@dataclass(frozen=True)
class SpectralMatrixSeries:
    """Hermitian matrices on a frequency grid: ``matrices[f, t]`` is ``q x q``."""

    frequencies: np.ndarray
    matrices: np.ndarray
    span: int = 1


@dataclass(frozen=True)
class PrincipalPowerSurface:
    frequencies: np.ndarray
    values: np.ndarray  # (n_freq, n_segments)
    normalizer: np.ndarray  # (n_segments,)


@dataclass(frozen=True)
class BandDefinition:
    name: str
    lower: float
    upper: float

    def __post_init__(self):
        if not (0.0 <= self.lower < self.upper):
            raise ConfigurationError(f"band {self.name}: need 0 <= lower < upper")


@dataclass
class BandPowerSeries:
    band: str
    gamma: np.ndarray
    log_gamma: np.ndarray
    floored: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def segment_fft(rec: SegmentedRecording, center: bool = True):
    """Orthonormal DFT of each segment and channel.

    Returns ``(d, freqs)`` with ``d`` of shape ``(n_freq, channels, segments)``
    on the full FFT grid and ``freqs`` in Hz (``numpy.fft.fftfreq`` order).
    """
    x = rec.samples
    if rec.segment_length < 2:
        raise ConfigurationError("segment length must be at least 2")
    if center:
        x = x - x.mean(axis=1, keepdims=True)
    d = np.fft.fft(x, axis=1, norm="ortho")
    freqs = np.fft.fftfreq(rec.segment_length, d=1.0 / rec.sampling_rate)
    return np.transpose(d, (1, 0, 2)), freqs


def one_sided(d, freqs):
    """Restrict full-grid coefficients to frequencies in ``[0, fs/2]``."""
    n = len(freqs)
    keep = np.arange(n // 2 + 1)
    f = np.abs(freqs[keep])
    return d[keep], f


def periodogram(d, freqs) -> SpectralMatrixSeries:
    """Raw periodogram matrices ``d conj(d)'`` on the one-sided grid."""
    d1, f = one_sided(d, freqs)
    # (f, c, t) -> (f, t, c, c)
    dd = np.transpose(d1, (0, 2, 1))
    mats = dd[..., :, None] * np.conj(dd[..., None, :])
    return SpectralMatrixSeries(f, mats, span=1)


def daniell_matrix(n: int, span: int) -> np.ndarray:
    """Linear Daniell smoother on ``n`` points with reflection at both ends.

    Reflection excludes the edge point itself (``x[-1] -> x[1]``), which is
    the symmetry of a spectrum about 0 and about the Nyquist frequency.
    """
    if span < 1 or span % 2 == 0:
        raise ConfigurationError(f"Daniell span must be a positive odd integer, got {span}")
    half = (span - 1) // 2
    if half > n - 1:
        raise ConfigurationError(f"span {span} exceeds frequency grid of length {n}")
    H = np.zeros((n, n))
    for i in range(n):
        for off in range(-half, half + 1):
            j = i + off
            if j < 0:
                j = -j
            elif j > n - 1:
                j = 2 * (n - 1) - j
            H[i, j] += 1.0 / span
    return H


def _smooth(mats: np.ndarray, span: int) -> np.ndarray:
    n = mats.shape[0]
    half = (span - 1) // 2
    if half == 0:
        return mats.copy()
    if half > n - 1:
        raise ConfigurationError(f"span {span} exceeds frequency grid of length {n}")
    # reflected copies of a Hermitian spectrum are conjugates
    head = np.conj(mats[1 : half + 1][::-1])
    tail = np.conj(mats[n - 1 - half : n - 1][::-1])
    padded = np.concatenate([head, mats, tail], axis=0)
    csum = np.cumsum(padded, axis=0)
    csum = np.concatenate([np.zeros_like(csum[:1]), csum], axis=0)
    return (csum[span:] - csum[:-span]) / span


def gcv_score(raw: SpectralMatrixSeries, span: int, floor: float = 1e-300) -> float:
    """GCV of the Daniell smoother applied to the log diagonal entries.

    The zero-frequency bin is excluded (segments are mean-centered, so it
    is identically zero).
    """
    diag = np.real(np.diagonal(raw.matrices, axis1=-2, axis2=-1))[1:]  # (f, t, c)
    n = diag.shape[0]
    logd = np.log(np.maximum(diag, floor)).reshape(n, -1)
    H = daniell_matrix(n, span)
    fitted = H @ logd
    rss = np.sum((logd - fitted) ** 2)
    nu = np.trace(H)
    denom = (1.0 - nu / n) ** 2
    if denom <= 0:
        return np.inf
    return rss / n / denom


def select_span(raw: SpectralMatrixSeries, span_grid=DEFAULT_SPANS) -> int:
    """GCV-optimal span; ties go to the smaller span."""
    spans = sorted(set(int(s) for s in span_grid))
    if not spans:
        raise ConfigurationError("span grid is empty")
    n = raw.matrices.shape[0] - 1
    for s in spans:
        if s < 1 or s % 2 == 0:
            raise ConfigurationError(f"Daniell span must be a positive odd integer, got {s}")
        if (s - 1) // 2 > raw.matrices.shape[0] - 1:
            raise ConfigurationError(f"span {s} exceeds frequency grid of length {raw.matrices.shape[0]}")
    best, best_score = spans[0], np.inf
    for s in spans:
        if (s - 1) // 2 > n - 1:
            continue
        score = gcv_score(raw, s)
        tol = 1e-12 * max(1.0, abs(best_score)) if np.isfinite(best_score) else 0.0
        if score < best_score - tol:
            best, best_score = s, score
    return best


def smooth_periodogram(raw: SpectralMatrixSeries, span_grid=DEFAULT_SPANS, span: int | None = None):
    """Daniell-smooth every matrix entry across frequency.

    If ``span`` is None it is chosen by GCV from ``span_grid``.  The same span
    is applied to all segments and channel pairs.
    """
    if span is None:
        span = select_span(raw, span_grid)
    mats = _smooth(raw.matrices, span)
    return SpectralMatrixSeries(raw.frequencies, mats, span=span)


def principal_power(smoothed: SpectralMatrixSeries) -> PrincipalPowerSurface:
    """Leading eigenvalue per (frequency, segment), normalized to integrate to 1."""
    mats = smoothed.matrices
    if mats.shape[-1] == 1:
        lead = np.real(mats[..., 0, 0])
    else:
        lead = np.linalg.eigvalsh(mats)[..., -1]
    lead = np.maximum(lead, 0.0)
    c = np.trapezoid(lead, smoothed.frequencies, axis=0)
    bad = ~(c > 0)
    if np.any(bad):
        raise DegenerateSegmentError(f"all-zero spectrum at segment(s) {np.flatnonzero(bad).tolist()}")
    return PrincipalPowerSurface(smoothed.frequencies, lead / c, c)


def integrate_between(x, y, a, b, axis=0):
    """Exact integral over ``[a, b]`` of the piecewise-linear interpolant of ``y``."""
    x = np.asarray(x, dtype=float)
    y = np.moveaxis(np.asarray(y, dtype=float), axis, 0)
    a = max(a, x[0])
    b = min(b, x[-1])
    if b <= a:
        return np.zeros(y.shape[1:])
    inner = (x > a) & (x < b)
    xs = np.concatenate([[a], x[inner], [b]])
    flat = y.reshape(len(x), -1)
    ya = np.array([np.interp(a, x, col) for col in flat.T])
    yb = np.array([np.interp(b, x, col) for col in flat.T])
    ys = np.concatenate([ya[None], flat[inner], yb[None]], axis=0)
    return np.trapezoid(ys, xs, axis=0).reshape(y.shape[1:])


def band_power(surface: PrincipalPowerSurface, band: BandDefinition, floor: float = 1e-12) -> BandPowerSeries:
    f = surface.frequencies
    if band.upper > f[-1] + 1e-9 or band.lower < f[0]:
        raise ConfigurationError(f"band {band.name} [{band.lower}, {band.upper}] outside [0, {f[-1]}] Hz")
    gamma = integrate_between(f, surface.values, band.lower, band.upper)
    floored = gamma <= floor
    g = np.where(floored, floor, gamma)
    return BandPowerSeries(band.name, gamma, np.log(g), floored)


def region_band_powers(rec: SegmentedRecording, bands, span_grid=DEFAULT_SPANS, floor: float = 1e-12):
    """Full pipeline for one subject/region.  Returns ``(span, [BandPowerSeries])``."""
    d, freqs = segment_fft(rec)
    raw = periodogram(d, freqs)
    smoothed = smooth_periodogram(raw, span_grid)
    surface = principal_power(smoothed)
    return smoothed.span, [band_power(surface, b, floor) for b in bands]
