"""Signal processing: STFT, 80-band mel analysis, Griffin-Lim phase
reconstruction, and resampling."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
import scipy.optimize
import scipy.signal


@dataclass(frozen=True)
class DspConfig:
    """Analysis parameters.

    The hop of 269 samples at 22050 Hz puts the mel frame rate at
    22050/269 = 81.97 Hz, one frame per ultrasound video frame.
    """

    sample_rate: int = 22050
    win_length: int = 1024
    fft_size: int = 1024
    hop: int = 269
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10
    griffin_lim_iters: int = 60

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("waveform must be one-dimensional")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform samples must be finite")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    """Time-major log-mel frames plus normalization bookkeeping."""

    frames: np.ndarray
    frame_rate: float
    normalization: str = "raw"

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise ValueError("mel frames must be a T x n_mels matrix")
        if not np.all(np.isfinite(frames)):
            raise ValueError("mel frames must be finite")
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")
        if self.normalization not in ("raw", "standardized"):
            raise ValueError(f"unknown normalization state {self.normalization!r}")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]


def hann_window(length: int) -> np.ndarray:
    """Periodic Hann window."""
    n = np.arange(length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)


def frame_count(n_samples: int, hop: int) -> int:
    return -(-n_samples // hop)


def _frame_centered(samples: np.ndarray, win_length: int, hop: int) -> np.ndarray:
    """Frames of the reflect-padded signal, one per hop, T = ceil(len/hop)."""
    pad = win_length // 2
    padded = np.pad(samples, pad, mode="reflect")
    n_frames = frame_count(samples.size, hop)
    idx = np.arange(win_length)[None, :] + hop * np.arange(n_frames)[:, None]
    return padded[idx]


def stft(
    samples: np.ndarray | Waveform,
    win_length: int = 1024,
    hop: int = 269,
    fft_size: int = 1024,
) -> np.ndarray:
    """Hann-windowed, centered STFT; returns [T, fft_size//2 + 1] complex."""
    if isinstance(samples, Waveform):
        samples = samples.samples
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("cannot analyze an empty signal")
    if not (0 < hop <= win_length <= fft_size):
        raise ValueError(
            f"need 0 < hop <= win_length <= fft_size, got {hop}, {win_length}, {fft_size}"
        )
    frames = _frame_centered(samples, win_length, hop)
    return np.fft.rfft(frames * hann_window(win_length), n=fft_size, axis=1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(
    n_mels: int = 80,
    sample_rate: int = 22050,
    fft_size: int = 1024,
    fmin: float = 0.0,
    fmax: float = 8000.0,
) -> np.ndarray:
    """Triangular filters uniform on the mel scale; [n_mels, fft_size//2+1]."""
    if not (0 <= fmin < fmax <= sample_rate / 2):
        raise ValueError(f"need 0 <= fmin < fmax <= Nyquist, got {fmin}, {fmax}")
    bin_freqs = np.arange(fft_size // 2 + 1) * (sample_rate / fft_size)
    mel_points = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    fb = np.zeros((n_mels, bin_freqs.size))
    for i in range(n_mels):
        left, center, right = hz_points[i], hz_points[i + 1], hz_points[i + 2]
        up = (bin_freqs - left) / (center - left)
        down = (right - bin_freqs) / (right - center)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def filter_center_freqs(cfg: DspConfig) -> np.ndarray:
    mel_points = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return mel_to_hz(mel_points[1:-1])


def mel_spectrogram(wav: Waveform, cfg: DspConfig = DspConfig()) -> MelSpectrogram:
    """Log mel-power frames, floored at cfg.log_floor before the log."""
    if wav.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"waveform rate {wav.sample_rate} differs from analysis rate {cfg.sample_rate}"
        )
    spec = stft(wav.samples, cfg.win_length, cfg.hop, cfg.fft_size)
    power = np.abs(spec) ** 2
    fb = mel_filterbank(cfg.n_mels, cfg.sample_rate, cfg.fft_size, cfg.fmin, cfg.fmax)
    mel_power = power @ fb.T
    frames = np.log(np.maximum(mel_power, cfg.log_floor))
    return MelSpectrogram(frames, cfg.frame_rate, "raw")


def invert_mel(mel: MelSpectrogram, cfg: DspConfig = DspConfig()) -> np.ndarray:
    """Linear magnitude spectrogram from log-mel frames.

    Solves a nonnegative least-squares inversion of the filterbank per
    frame, so mel vectors that came from a real power spectrum are
    reproduced essentially exactly; bins outside the filterbank's range
    stay zero.
    """
    if mel.normalization != "raw":
        raise ValueError("invert_mel expects raw (destandardized) log-mel frames")
    if mel.n_mels != cfg.n_mels:
        raise ValueError(f"expected {cfg.n_mels} mel channels, got {mel.n_mels}")
    fb = mel_filterbank(cfg.n_mels, cfg.sample_rate, cfg.fft_size, cfg.fmin, cfg.fmax)
    covered = fb.sum(axis=0) > 0
    basis = fb[:, covered]
    mel_power = np.exp(mel.frames)
    power = np.zeros((mel.n_frames, fb.shape[1]))
    for t in range(mel.n_frames):
        sol, _ = scipy.optimize.nnls(basis, mel_power[t])
        power[t, covered] = sol
    return np.sqrt(power)


def _ls_istft(spec: np.ndarray, window: np.ndarray, hop: int, fft_size: int) -> np.ndarray:
    """Least-squares inverse of the plain (uncentered) framed transform."""
    n_frames = spec.shape[0]
    win_length = window.size
    total = win_length + (n_frames - 1) * hop
    segs = np.fft.irfft(spec, n=fft_size, axis=1)[:, :win_length]
    num = np.zeros(total)
    den = np.zeros(total)
    wsq = window * window
    for t in range(n_frames):
        start = t * hop
        num[start : start + win_length] += window * segs[t]
        den[start : start + win_length] += wsq
    covered = den > 1e-12
    out = np.zeros(total)
    out[covered] = num[covered] / den[covered]
    return out


def griffin_lim(
    mag: np.ndarray,
    cfg: DspConfig = DspConfig(),
    n_iter: int | None = None,
    return_errors: bool = False,
):
    """Iterative phase reconstruction from a magnitude spectrogram [T, F].

    Each iteration inverts the current spectrogram with the least-squares
    overlap-add ISTFT, re-analyzes, and restores the target magnitude; the
    magnitude-consistency error is non-increasing by construction.  Returns
    a waveform of exactly T * hop samples.
    """
    mag = np.asarray(mag, dtype=np.float64)
    if mag.ndim != 2 or mag.shape[1] != cfg.fft_size // 2 + 1:
        raise ValueError(f"magnitude must be [T, {cfg.fft_size // 2 + 1}], got {mag.shape}")
    if np.any(mag < 0):
        raise ValueError("magnitudes must be nonnegative")
    if n_iter is None:
        n_iter = cfg.griffin_lim_iters
    window = hann_window(cfg.win_length)
    spec = mag.astype(np.complex128)
    errors = []
    y = np.zeros(cfg.win_length + (mag.shape[0] - 1) * cfg.hop)
    for _ in range(n_iter):
        y = _ls_istft(spec, window, cfg.hop, cfg.fft_size)
        frames = y[np.arange(cfg.win_length)[None, :] + cfg.hop * np.arange(mag.shape[0])[:, None]]
        consistent = np.fft.rfft(frames * window, n=cfg.fft_size, axis=1)
        errors.append(float(np.linalg.norm(np.abs(consistent) - mag)))
        spec = mag * np.exp(1j * np.angle(consistent))
    # Crop to the sample range the centered analysis would cover.
    pad = cfg.win_length // 2
    out = np.zeros(mag.shape[0] * cfg.hop)
    avail = y[pad : pad + out.size]
    out[: avail.size] = avail
    peak = np.max(np.abs(out)) if out.size else 0.0
    if peak > 1.0:
        out = out / peak
    wav = Waveform(out, cfg.sample_rate)
    return (wav, errors) if return_errors else wav


def resample(wav: Waveform, target_rate: int) -> Waveform:
    """Polyphase resampling; output length is round(len * target / source)."""
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == wav.sample_rate:
        return Waveform(wav.samples.copy(), wav.sample_rate)
    ratio = Fraction(target_rate, wav.sample_rate)
    # Kaiser beta 14: per-phase gain error below 1e-8, so DC passes exactly
    # enough for the metric front-ends.
    out = scipy.signal.resample_poly(
        wav.samples, ratio.numerator, ratio.denominator, padtype="line", window=("kaiser", 14.0)
    )
    n_target = round(wav.samples.size * target_rate / wav.sample_rate)
    if out.size > n_target:
        out = out[:n_target]
    elif out.size < n_target:
        out = np.pad(out, (0, n_target - out.size))
    return Waveform(out, target_rate)
