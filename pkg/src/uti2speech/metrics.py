"""Objective evaluation: spectral MSE and mean R^2 on mel frames, and
STOI/ESTOI, SDR, SI-SDR, MCD on synthesized waveforms."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from .dataio import Corpus, MelNormStats, destandardize_mel, load_mel, load_uti, load_wav, preprocess_clip, standardize_mel
from .dsp import DspConfig, MelSpectrogram, Waveform, griffin_lim, hann_window, invert_mel, mel_spectrogram, resample
from .models import Generator, predict_mel

SDR_CAP_DB = 100.0

# STOI front-end constants (published parameterization at 10 kHz).
_STOI_RATE = 10000
_SIL_FRAME = 512
_SIL_HOP = 256
_TF_FRAME = 256
_TF_HOP = 128
_TF_NFFT = 512
_N_BANDS = 15
_MIN_FREQ = 150.0
_SEGMENT = 30
_BETA_DB = -15.0
_DYN_RANGE_DB = 40.0
_EPS = 1e-15


class TooShortError(ValueError):
    """Signal too short for one intelligibility analysis segment."""


# ---------------------------------------------------------------------------
# Spectral metrics


def spectral_mse(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def channel_r2(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-channel R^2 over all frames; NaN marks zero-variance channels."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    ss_res = ((target - pred) ** 2).sum(axis=0)
    centered = target - target.mean(axis=0)
    ss_tot = (centered**2).sum(axis=0)
    out = np.full(pred.shape[1], np.nan)
    ok = ss_tot > 0
    out[ok] = 1.0 - ss_res[ok] / ss_tot[ok]
    return out


def mean_r2(pred: np.ndarray, target: np.ndarray) -> float:
    r2 = channel_r2(pred, target)
    if np.all(np.isnan(r2)):
        raise ValueError("every channel has zero target variance")
    return float(np.nanmean(r2))


# ---------------------------------------------------------------------------
# Energy-ratio metrics


def _common_length(ref: Waveform, est: Waveform) -> tuple[np.ndarray, np.ndarray]:
    if ref.sample_rate != est.sample_rate:
        raise ValueError("sample rates differ")
    n = min(len(ref), len(est))
    return ref.samples[:n], est.samples[:n]


def sdr(ref: Waveform, est: Waveform, cap_db: float = SDR_CAP_DB) -> float:
    """10 log10(||s||^2 / ||s - s_hat||^2), capped for identical signals."""
    s, sh = _common_length(ref, est)
    sig = float(s @ s)
    if sig == 0.0:
        raise ValueError("reference signal is silent")
    err = float((s - sh) @ (s - sh))
    if err == 0.0:
        return cap_db
    return float(min(10.0 * np.log10(sig / err), cap_db))


def si_sdr(ref: Waveform, est: Waveform, cap_db: float = SDR_CAP_DB) -> float:
    """Scale-invariant SDR: project the estimate onto the reference first."""
    s, sh = _common_length(ref, est)
    sig = float(s @ s)
    if sig == 0.0:
        raise ValueError("reference signal is silent")
    alpha = float(sh @ s) / sig
    proj = alpha * s
    err = float((proj - sh) @ (proj - sh))
    num = float(proj @ proj)
    if err == 0.0:
        return cap_db
    if num == 0.0:
        return -cap_db
    return float(min(10.0 * np.log10(num / err), cap_db))


# ---------------------------------------------------------------------------
# Mel-cepstral distortion


def mcd(
    ref: Waveform,
    est: Waveform,
    cfg: DspConfig = DspConfig(),
    n_coeffs: int = 12,
) -> float:
    """Mean mel-cepstral distortion over frame-aligned signals.

    Cepstra are the orthonormal DCT-II of the log-mel frames; coefficient 0
    carries overall gain and is excluded, so the metric is invariant to a
    global gain on either signal.
    """
    s, sh = _common_length(ref, est)
    mel_ref = mel_spectrogram(Waveform(s, ref.sample_rate), cfg).frames
    mel_est = mel_spectrogram(Waveform(sh, est.sample_rate), cfg).frames
    cep_ref = scipy.fft.dct(mel_ref, type=2, norm="ortho", axis=1)
    cep_est = scipy.fft.dct(mel_est, type=2, norm="ortho", axis=1)
    diff = cep_ref[:, 1 : n_coeffs + 1] - cep_est[:, 1 : n_coeffs + 1]
    per_frame = (10.0 / np.log(10.0)) * np.sqrt(2.0 * np.sum(diff**2, axis=1))
    return float(per_frame.mean())


# ---------------------------------------------------------------------------
# STOI / ESTOI


def _frame_rows(x: np.ndarray, frame: int, hop: int) -> np.ndarray:
    n = 1 + (x.size - frame) // hop if x.size >= frame else 0
    if n <= 0:
        return np.empty((0, frame))
    idx = np.arange(frame)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def _remove_silent_frames(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Drop frames quieter than 40 dB below the reference's loudest frame,
    then rebuild both signals by overlap-add of the kept windowed frames."""
    w = hann_window(_SIL_FRAME)
    xf = _frame_rows(x, _SIL_FRAME, _SIL_HOP) * w
    yf = _frame_rows(y, _SIL_FRAME, _SIL_HOP) * w
    if xf.shape[0] == 0:
        raise TooShortError("signal shorter than one silence-analysis frame")
    energy = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = energy > energy.max() - _DYN_RANGE_DB
    xk, yk = xf[keep], yf[keep]
    n_out = _SIL_FRAME + (xk.shape[0] - 1) * _SIL_HOP
    xs = np.zeros(n_out)
    ys = np.zeros(n_out)
    for i in range(xk.shape[0]):
        start = i * _SIL_HOP
        xs[start : start + _SIL_FRAME] += xk[i]
        ys[start : start + _SIL_FRAME] += yk[i]
    return xs, ys


def _third_octave_bands() -> np.ndarray:
    freqs = np.arange(_TF_NFFT // 2 + 1) * (_STOI_RATE / _TF_NFFT)
    centers = _MIN_FREQ * 2.0 ** (np.arange(_N_BANDS) / 3.0)
    bands = np.zeros((_N_BANDS, freqs.size))
    for k, cf in enumerate(centers):
        lo, hi = cf / 2 ** (1 / 6), cf * 2 ** (1 / 6)
        bands[k] = (freqs >= lo) & (freqs < hi)
    return bands


def _band_envelopes(x: np.ndarray) -> np.ndarray:
    """One-third-octave magnitude envelopes, one row per analysis frame."""
    frames = _frame_rows(x, _TF_FRAME, _TF_HOP) * hann_window(_TF_FRAME)
    spec = np.fft.rfft(frames, n=_TF_NFFT, axis=1)
    power = np.abs(spec) ** 2
    return np.sqrt(power @ _third_octave_bands().T)


def _stoi_envelopes(ref: Waveform, est: Waveform) -> tuple[np.ndarray, np.ndarray]:
    s, sh = _common_length(ref, est)
    if ref.sample_rate != _STOI_RATE:
        s = resample(Waveform(s, ref.sample_rate), _STOI_RATE).samples
        sh = resample(Waveform(sh, ref.sample_rate), _STOI_RATE).samples
    s, sh = _remove_silent_frames(s, sh)
    ex, ey = _band_envelopes(s), _band_envelopes(sh)
    if ex.shape[0] < _SEGMENT:
        raise TooShortError(
            f"only {ex.shape[0]} frames after silence removal; need {_SEGMENT}"
        )
    return ex, ey


def stoi(ref: Waveform, est: Waveform) -> float:
    """Short-time objective intelligibility of est against the reference."""
    ex, ey = _stoi_envelopes(ref, est)
    clip_gain = 1.0 + 10.0 ** (-_BETA_DB / 20.0)
    total, count = 0.0, 0
    for m in range(ex.shape[0] - _SEGMENT + 1):
        x = ex[m : m + _SEGMENT].T
        y = ey[m : m + _SEGMENT].T
        alpha = np.linalg.norm(x, axis=1, keepdims=True) / (
            np.linalg.norm(y, axis=1, keepdims=True) + _EPS
        )
        y_clipped = np.minimum(alpha * y, clip_gain * x)
        xc = x - x.mean(axis=1, keepdims=True)
        yc = y_clipped - y_clipped.mean(axis=1, keepdims=True)
        denom = np.linalg.norm(xc, axis=1) * np.linalg.norm(yc, axis=1)
        total += float(np.sum((xc * yc).sum(axis=1) / (denom + _EPS)))
        count += _N_BANDS
    return total / count


def estoi(ref: Waveform, est: Waveform) -> float:
    """Extended STOI: row- then column-normalized spectral correlation."""
    ex, ey = _stoi_envelopes(ref, est)

    def normalize(seg: np.ndarray) -> np.ndarray:
        seg = seg - seg.mean(axis=1, keepdims=True)
        seg = seg / (np.linalg.norm(seg, axis=1, keepdims=True) + _EPS)
        seg = seg - seg.mean(axis=0, keepdims=True)
        return seg / (np.linalg.norm(seg, axis=0, keepdims=True) + _EPS)

    total = 0.0
    n_segments = ex.shape[0] - _SEGMENT + 1
    for m in range(n_segments):
        x = normalize(ex[m : m + _SEGMENT].T)
        y = normalize(ey[m : m + _SEGMENT].T)
        total += float(np.sum(x * y)) / _SEGMENT
    return total / n_segments


# ---------------------------------------------------------------------------
# Corpus evaluation


@dataclass
class MetricReport:
    """Per-utterance and corpus-mean objective scores."""

    corpus_id: str
    method: str
    split: str
    utterances: list[dict] = field(default_factory=list)
    means: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    METRICS = ("mse", "mean_r2", "stoi", "estoi", "si_sdr_db", "sdr_db", "mcd")
    CSV_COLUMNS = ("STOI", "ESTOI", "PESQ", "SISDR", "SDR", "PMSQE", "MCD")
    _CSV_KEYS = ("stoi", "estoi", None, "si_sdr_db", "sdr_db", None, "mcd")

    def finalize(self) -> None:
        """Corpus means in utterance order; absent metrics stay None."""
        self.means = {
            key: float(np.mean([u[key] for u in self.utterances])) for key in self.METRICS
        }
        self.means["pesq"] = None
        self.means["pmsqe"] = None
        self.diagnostics["skipped_r2_channels"] = int(
            sum(u.get("skipped_r2_channels", 0) for u in self.utterances)
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "corpus_id": self.corpus_id,
                "method": self.method,
                "split": self.split,
                "utterances": self.utterances,
                "means": self.means,
                "diagnostics": self.diagnostics,
            },
            indent=1,
        )

    def to_csv(self) -> str:
        lines = ["utterance," + ",".join(self.CSV_COLUMNS)]
        for utt in self.utterances + [dict(self.means, id="mean")]:
            cells = [utt["id"] if "id" in utt else "mean"]
            for key in self._CSV_KEYS:
                cells.append("" if key is None else repr(float(utt[key])))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def evaluate_utterance(
    gen: Generator,
    clip_frames: np.ndarray,
    target_mel: MelSpectrogram,
    ref_wav: Waveform,
    stats: MelNormStats,
    cfg: DspConfig,
    batch_size: int = 32,
    mcd_coeffs: int = 12,
) -> dict:
    """All objective scores for one utterance.

    The generator's overlapping 5-frame outputs are averaged per frame
    position, destandardized, inverted to a waveform, and compared with the
    reference audio over the same sample range.
    """
    target_std = standardize_mel(target_mel, stats)
    pred_std = predict_mel(gen, clip_frames, batch_size=batch_size)
    r2 = channel_r2(pred_std, target_std.frames)
    pred_raw = destandardize_mel(
        MelSpectrogram(pred_std, cfg.frame_rate, "standardized"), stats
    )
    magnitude = invert_mel(pred_raw, cfg)
    est_wav = griffin_lim(magnitude, cfg)
    return {
        "mse": spectral_mse(pred_std, target_std.frames),
        "mean_r2": float(np.nanmean(r2)),
        "skipped_r2_channels": int(np.isnan(r2).sum()),
        "stoi": stoi(ref_wav, est_wav),
        "estoi": estoi(ref_wav, est_wav),
        "si_sdr_db": si_sdr(ref_wav, est_wav),
        "sdr_db": sdr(ref_wav, est_wav),
        "mcd": mcd(ref_wav, est_wav, cfg, n_coeffs=mcd_coeffs),
    }


def evaluate_corpus(
    gen: Generator,
    corpus: Corpus,
    split: str,
    stats: MelNormStats,
    cfg: DspConfig = DspConfig(),
    method: str = "",
    batch_size: int = 32,
    mcd_coeffs: int = 12,
) -> MetricReport:
    report = MetricReport(corpus_id=corpus.corpus_id, method=method, split=split)
    records = corpus.split(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    for rec in records:
        clip = preprocess_clip(load_uti(corpus.path(rec, "uti")))
        target_mel = load_mel(corpus.path(rec, "mel"))
        ref_wav = load_wav(corpus.path(rec, "wav"))
        row = evaluate_utterance(
            gen, clip.frames, target_mel, ref_wav, stats, cfg, batch_size, mcd_coeffs
        )
        row["id"] = rec["id"]
        report.utterances.append(row)
    report.finalize()
    return report
