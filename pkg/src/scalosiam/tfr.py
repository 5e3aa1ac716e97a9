"""Time-frequency representations: Morse-wavelet scalograms and STFT spectrograms.

Images fed to the Siamese networks are produced by :func:`render_image`:

1. divide by the matrix peak, then ``log(1 + m / 1e-8)``;
2. min-max normalize to ``[0, 1]`` (a constant matrix maps to zeros);
3. bilinear resize with half-pixel centers: output pixel ``i`` samples the
   source at ``(i + 0.5) * in / out - 0.5``, clamped to ``[0, in - 1]``,
   interpolating rows first, then columns;
4. replicate the grayscale plane into three identical channels.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

IMAGE_SIZE = 224
IMAGE_EPS = 1e-8
MAX_FREQ_FRACTION = 0.45
SUPPORT_SIGMAS = 3.0


class TfrError(ValueError):
    pass


@dataclass(frozen=True)
class MorseParams:
    beta: float = 20.0
    gamma: float = 3.0
    voices_per_octave: int = 10

    def __post_init__(self):
        if self.beta <= 0 or self.gamma <= 0:
            raise TfrError("Morse beta and gamma must be positive")
        if self.beta * self.gamma < 1:
            raise TfrError("Morse beta*gamma must be at least 1")
        if self.voices_per_octave < 4:
            raise TfrError("need at least 4 voices per octave")

    @property
    def peak_frequency(self):
        """Radian peak frequency ``(beta/gamma)**(1/gamma)`` of the unit-scale wavelet."""
        return (self.beta / self.gamma) ** (1.0 / self.gamma)

    def time_spread(self, freq_hz):
        """Envelope standard deviation (s) of the wavelet centred on ``freq_hz``."""
        return np.sqrt(self.beta * self.gamma) / (2 * np.pi * freq_hz)


@dataclass
class MorseFilterBank:
    responses: np.ndarray  # [n_scales, n_samples], FFT bin order
    frequencies: np.ndarray  # centre frequency (Hz) per scale, ascending
    scales: np.ndarray  # dimensionless scale per row (samples)
    params: MorseParams
    rate: int

    def __len__(self):
        return len(self.frequencies)


@dataclass
class TfrMatrix:
    magnitudes: np.ndarray  # [rows, frames]
    scale_axis: np.ndarray  # Hz per row
    time_axis: np.ndarray  # s per column
    kind: str

    @property
    def shape(self):
        return self.magnitudes.shape


@dataclass
class TfrImage:
    pixels: np.ndarray  # [size, size, 3] float32 in [0, 1]
    source_id: str = ""
    kind: str = ""
    digest: str = ""

    @property
    def gray(self):
        return self.pixels[..., 0]

    @property
    def provenance(self):
        return (self.source_id, self.kind, self.digest)

    @classmethod
    def from_gray(cls, gray, source_id="", kind="", digest=""):
        gray = np.asarray(gray, dtype=np.float32)
        return cls(np.repeat(gray[..., None], 3, axis=-1), source_id, kind, digest)


# ------------------------------------------------------------------ wavelets

def morse_response(omega, params, scale=1.0):
    """Unit-peak generalized Morse response at radian frequencies ``omega``."""
    omega = np.asarray(omega, dtype=np.float64)
    wp = params.peak_frequency
    out = np.zeros_like(omega)
    pos = omega > 0
    so = scale * omega[pos]
    out[pos] = np.exp(params.beta * np.log(so / wp) - so ** params.gamma + wp ** params.gamma)
    return out


def frequency_limits(params, n_samples, rate):
    duration = n_samples / rate
    # lowest centre frequency whose +-3 sigma envelope still fits in the clip
    f_support = SUPPORT_SIGMAS * np.sqrt(params.beta * params.gamma) / (np.pi * duration)
    return max(4.0 / duration, f_support), MAX_FREQ_FRACTION * rate


def morse_filter_bank(params, n_samples, rate):
    """Frequency-domain Morse wavelets on a geometric grid, ascending in frequency."""
    if n_samples < 64:
        raise TfrError(f"need at least 64 samples, got {n_samples}")
    f_lo, f_hi = frequency_limits(params, n_samples, rate)
    octaves = np.log2(f_hi / f_lo) if f_lo > 0 else 0
    if octaves < 1:
        raise TfrError(f"{n_samples} samples at {rate} Hz cannot fit one octave of scales")
    n_scales = int(np.floor(params.voices_per_octave * octaves)) + 1
    freqs = f_hi * 2.0 ** (-np.arange(n_scales) / params.voices_per_octave)
    freqs = freqs[::-1].copy()
    scales = params.peak_frequency * rate / (2 * np.pi * freqs)
    k = np.arange(n_samples)
    omega = 2 * np.pi * k / n_samples
    # bins at or above Nyquist represent non-positive frequencies
    omega[k >= n_samples / 2] = -1.0
    responses = np.stack([morse_response(omega, params, s) for s in scales])
    return MorseFilterBank(responses, freqs, scales, params, int(rate))


def cwt_scalogram(clip, params=None, bank=None):
    """``|CWT|`` via FFT: multiply by each conjugated response and invert."""
    params = params or MorseParams()
    x = np.asarray(clip.samples, dtype=np.float64)
    if bank is None:
        bank = morse_filter_bank(params, x.size, clip.sample_rate)
    spectrum = np.fft.fft(x - x.mean())
    coeffs = np.fft.ifft(spectrum[None, :] * np.conj(bank.responses), axis=1)
    return TfrMatrix(
        np.abs(coeffs),
        bank.frequencies,
        np.arange(x.size) / clip.sample_rate,
        "scalogram",
    )


def sampled_wavelet(params, scale, n_samples):
    """Time-domain wavelet (circular, length ``n_samples``) for a given scale."""
    k = np.arange(n_samples)
    omega = 2 * np.pi * k / n_samples
    omega[k >= n_samples / 2] = -1.0
    return np.fft.ifft(morse_response(omega, params, scale))


# ---------------------------------------------------------------------- STFT

def hann(n):
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft_frame_count(length, window_len, hop):
    return (length - window_len) // hop + 1


def stft_spectrogram(clip, window_len=256, hop=64):
    x = np.asarray(clip.samples, dtype=np.float64)
    if window_len <= 0 or hop <= 0 or hop > window_len:
        raise TfrError(f"need 0 < hop <= window_len, got hop={hop}, window={window_len}")
    if window_len > x.size:
        raise TfrError(f"window {window_len} longer than clip ({x.size} samples)")
    n_frames = stft_frame_count(x.size, window_len, hop)
    starts = np.arange(n_frames) * hop
    frames = x[starts[:, None] + np.arange(window_len)[None, :]] * hann(window_len)
    mags = np.abs(np.fft.rfft(frames, axis=1)).T
    rate = clip.sample_rate
    return TfrMatrix(
        mags,
        np.fft.rfftfreq(window_len, 1.0 / rate),
        (starts + window_len / 2) / rate,
        "spectrogram",
    )


# -------------------------------------------------------------------- images

def _resize_axis(a, out_len, axis):
    n = a.shape[axis]
    src = (np.arange(out_len) + 0.5) * (n / out_len) - 0.5
    src = np.clip(src, 0, n - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i1, axis=axis)
    shape = [1] * a.ndim
    shape[axis] = out_len
    frac = frac.reshape(shape)
    return lo * (1 - frac) + hi * frac


def bilinear_resize(a, out_h, out_w):
    return _resize_axis(_resize_axis(np.asarray(a, dtype=np.float64), out_h, 0), out_w, 1)


def normalized_plane(magnitudes):
    m = np.asarray(magnitudes, dtype=np.float64)
    if m.ndim != 2 or 0 in m.shape:
        raise TfrError(f"cannot render matrix of shape {m.shape}")
    if np.any(m < 0) or not np.all(np.isfinite(m)):
        raise TfrError("magnitudes must be finite and non-negative")
    peak = m.max()
    if peak == 0:
        return np.zeros_like(m)
    logm = np.log1p((m / peak) / IMAGE_EPS)
    lo, hi = logm.min(), logm.max()
    if hi == lo:
        return np.zeros_like(m)
    return (logm - lo) / (hi - lo)


def render_image(matrix, size=IMAGE_SIZE, source_id="", digest=""):
    """Log-compress, normalize and resize a TFR matrix to a ``size x size x 3`` image."""
    mags = matrix.magnitudes if isinstance(matrix, TfrMatrix) else matrix
    kind = matrix.kind if isinstance(matrix, TfrMatrix) else ""
    plane = bilinear_resize(normalized_plane(mags), size, size)
    return TfrImage.from_gray(np.clip(plane, 0.0, 1.0), source_id, kind, digest)


# ------------------------------------------------------------ configuration

@dataclass(frozen=True)
class TfrConfig:
    kind: str = "scalogram"
    beta: float = 20.0
    gamma: float = 3.0
    voices: int = 10
    window: int = 256
    hop: int = 64
    image_size: int = IMAGE_SIZE

    def __post_init__(self):
        if self.kind not in ("scalogram", "spectrogram"):
            raise TfrError(f"unknown representation {self.kind!r}")

    @property
    def morse(self):
        return MorseParams(self.beta, self.gamma, self.voices)

    def digest(self):
        d = asdict(self)
        if self.kind == "scalogram":
            d.pop("window"), d.pop("hop")
        else:
            d.pop("beta"), d.pop("gamma"), d.pop("voices")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def clip_to_image(clip, config, bank=None):
    if config.kind == "scalogram":
        matrix = cwt_scalogram(clip, config.morse, bank)
    else:
        matrix = stft_spectrogram(clip, config.window, config.hop)
    return render_image(matrix, config.image_size, clip.source_id, config.digest())
