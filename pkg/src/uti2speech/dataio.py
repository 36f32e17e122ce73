"""Corpus file formats, preprocessing, training-example windowing, and the
seeded synthetic paired corpus.

File formats (all little-endian):
  UTI1  magic "UTI1" | u32 frame_count | u32 height | u32 width | f32 fps
        | frames as u8 grayscale, frame-major, row-major
  MEL1  magic "MEL1" | u32 frame_count | u32 n_mels | f32 frame_rate
        | f64 values, row-major
  WAV   mono 16-bit PCM
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io.wavfile

from .dsp import DspConfig, MelSpectrogram, Waveform, filter_center_freqs, mel_spectrogram
from .rng import stream

RAW_HEIGHT = 64
RAW_WIDTH = 946
PROC_WIDTH = 128
VIDEO_FPS = 82.0
AUDIO_RATE = 22050
INPUT_FRAMES = 25
TARGET_FRAMES = 5
N_MELS = 80

_UTI_HEADER = struct.Struct("<4sIIIf")
_MEL_HEADER = struct.Struct("<4sIIf")


class FormatError(ValueError):
    """A corpus file violates its declared binary layout."""


@dataclass
class UltrasoundClip:
    """Grayscale tongue-video frames [T, H, W] with their frame rate.

    Raw clips carry uint8 intensities; preprocessed clips carry float64
    values in [-1, 1].
    """

    frames: np.ndarray
    fps: float
    utterance_id: str = ""

    def __post_init__(self):
        if self.frames.ndim != 3:
            raise ValueError("clip frames must be [T, H, W]")
        if self.frames.shape[0] < 1:
            raise ValueError("clip must contain at least one frame")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class TrainingExample:
    """One 25-frame video block paired with its 5 centered mel targets."""

    input: np.ndarray
    target: np.ndarray


@dataclass(frozen=True)
class CorpusSplit:
    train: tuple[str, ...]
    dev: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self):
        groups = [set(self.train), set(self.dev), set(self.test)]
        total = sum(len(g) for g in groups)
        union = set().union(*groups)
        if total != len(union):
            raise ValueError("splits must be pairwise disjoint")

    def of(self, name: str) -> tuple[str, ...]:
        if name not in ("train", "dev", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


# ---------------------------------------------------------------------------
# File formats


def save_uti(clip: UltrasoundClip, path) -> None:
    frames = clip.frames
    if frames.dtype != np.uint8:
        if frames.min() < 0 or frames.max() > 255:
            raise ValueError("raw clip intensities must lie in [0, 255]")
        frames = np.round(frames).astype(np.uint8)
    t, h, w = frames.shape
    with open(path, "wb") as f:
        f.write(_UTI_HEADER.pack(b"UTI1", t, h, w, clip.fps))
        f.write(frames.tobytes())


def load_uti(path) -> UltrasoundClip:
    raw = Path(path).read_bytes()
    if len(raw) < _UTI_HEADER.size:
        raise FormatError(f"{path}: truncated header at offset {len(raw)}")
    magic, t, h, w, fps = _UTI_HEADER.unpack_from(raw)
    if magic != b"UTI1":
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if t == 0 or h == 0 or w == 0:
        raise FormatError(f"{path}: zero extent in header at offset 4")
    expected = t * h * w
    payload = raw[_UTI_HEADER.size :]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload at offset {_UTI_HEADER.size} has {len(payload)} bytes, "
            f"expected {expected}"
        )
    frames = np.frombuffer(payload, dtype=np.uint8).reshape(t, h, w)
    return UltrasoundClip(frames.copy(), float(fps), Path(path).stem)


def save_mel(mel: MelSpectrogram, path) -> None:
    with open(path, "wb") as f:
        f.write(_MEL_HEADER.pack(b"MEL1", mel.n_frames, mel.n_mels, mel.frame_rate))
        f.write(np.ascontiguousarray(mel.frames, dtype="<f8").tobytes())


def load_mel(path) -> MelSpectrogram:
    raw = Path(path).read_bytes()
    if len(raw) < _MEL_HEADER.size:
        raise FormatError(f"{path}: truncated header at offset {len(raw)}")
    magic, t, n_mels, frame_rate = _MEL_HEADER.unpack_from(raw)
    if magic != b"MEL1":
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if t == 0 or n_mels == 0:
        raise FormatError(f"{path}: zero extent in header at offset 4")
    payload = raw[_MEL_HEADER.size :]
    if len(payload) != t * n_mels * 8:
        raise FormatError(
            f"{path}: payload at offset {_MEL_HEADER.size} has {len(payload)} bytes, "
            f"expected {t * n_mels * 8}"
        )
    frames = np.frombuffer(payload, dtype="<f8").reshape(t, n_mels)
    return MelSpectrogram(frames.copy(), float(frame_rate), "raw")


def save_wav(wav: Waveform, path) -> None:
    pcm = np.round(np.clip(wav.samples, -1.0, 1.0) * 32767.0).astype(np.int16)
    scipy.io.wavfile.write(path, wav.sample_rate, pcm)


def load_wav(path) -> Waveform:
    rate, data = scipy.io.wavfile.read(path)
    if data.ndim != 1 or data.dtype != np.int16:
        raise FormatError(f"{path}: expected mono 16-bit PCM")
    return Waveform(data.astype(np.float64) / 32767.0, int(rate))


# ---------------------------------------------------------------------------
# Preprocessing


def _cubic_kernel(t: np.ndarray) -> np.ndarray:
    """Catmull-Rom cubic (a = -0.5)."""
    at = np.abs(t)
    inner = 1.5 * at**3 - 2.5 * at**2 + 1.0
    outer = -0.5 * at**3 + 2.5 * at**2 - 4.0 * at + 2.0
    return np.where(at <= 1.0, inner, np.where(at < 2.0, outer, 0.0))


def _resize_weights(n_src: int, n_dst: int) -> np.ndarray:
    """Row-stochastic resampling matrix, edge-clamped, align-corners-false."""
    weights = np.zeros((n_dst, n_src))
    scale = n_src / n_dst
    for j in range(n_dst):
        center = (j + 0.5) * scale - 0.5
        base = int(np.floor(center))
        for m in range(base - 1, base + 3):
            w = float(_cubic_kernel(np.asarray(center - m)))
            weights[j, min(max(m, 0), n_src - 1)] += w
    return weights


def bicubic_resize(frames: np.ndarray, out_height: int = RAW_HEIGHT, out_width: int = PROC_WIDTH) -> np.ndarray:
    """Bicubic resize of [H, W] or [T, H, W] image data."""
    single = frames.ndim == 2
    if single:
        frames = frames[None]
    _, h, w = frames.shape
    col_w = _resize_weights(w, out_width)
    row_w = _resize_weights(h, out_height)
    out = frames.astype(np.float64) @ col_w.T
    out = np.matmul(row_w[None], out)
    return out[0] if single else out


def minmax_scale(frames: np.ndarray, vmin: float | None = None, vmax: float | None = None) -> np.ndarray:
    """Scale intensities to [-1, 1]; a constant clip maps to zeros."""
    frames = frames.astype(np.float64)
    lo = frames.min() if vmin is None else vmin
    hi = frames.max() if vmax is None else vmax
    if hi <= lo:
        warnings.warn("constant clip: min-max scaling collapses to zeros", stacklevel=2)
        return np.zeros_like(frames)
    return 2.0 * (frames - lo) / (hi - lo) - 1.0


def preprocess_clip(clip: UltrasoundClip) -> UltrasoundClip:
    """Raw 64x946 intensities to 64x128 frames min-max scaled to [-1, 1]."""
    resized = bicubic_resize(clip.frames.astype(np.float64))
    return UltrasoundClip(minmax_scale(resized), clip.fps, clip.utterance_id)


# ---------------------------------------------------------------------------
# Target normalization


@dataclass(frozen=True)
class MelNormStats:
    """Per-channel mean and standard deviation of the training split."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean and std must be equal-length vectors")
        if np.any(self.std <= 0):
            raise ValueError("every channel std must be positive")

    @classmethod
    def from_frames(cls, frame_blocks: list[np.ndarray]) -> "MelNormStats":
        stacked = np.concatenate(frame_blocks, axis=0)
        return cls(stacked.mean(axis=0), stacked.std(axis=0))

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps({"mean": self.mean.tolist(), "std": self.std.tolist()}, indent=1)
        )

    @classmethod
    def load(cls, path) -> "MelNormStats":
        blob = json.loads(Path(path).read_text())
        return cls(np.asarray(blob["mean"]), np.asarray(blob["std"]))


def standardize_mel(mel: MelSpectrogram, stats: MelNormStats) -> MelSpectrogram:
    if mel.normalization != "raw":
        raise ValueError("mel is already standardized")
    frames = (mel.frames - stats.mean) / stats.std
    return MelSpectrogram(frames, mel.frame_rate, "standardized")


def destandardize_mel(mel: MelSpectrogram, stats: MelNormStats) -> MelSpectrogram:
    if mel.normalization != "standardized":
        raise ValueError("mel is not standardized")
    frames = mel.frames * stats.std + stats.mean
    return MelSpectrogram(frames, mel.frame_rate, "raw")


# ---------------------------------------------------------------------------
# Windowing


def make_examples(clip: UltrasoundClip, mel: MelSpectrogram) -> list[TrainingExample]:
    """Stride-1 windows: 25 video frames in, the 5 mel frames centered on
    the same video frame out.  Inputs and targets are views into the
    originals."""
    if clip.n_frames != mel.n_frames:
        raise ValueError(
            f"clip has {clip.n_frames} frames but mel has {mel.n_frames}; "
            "expected one mel frame per video frame"
        )
    half_in = INPUT_FRAMES // 2
    half_out = TARGET_FRAMES // 2
    examples = []
    for center in range(half_in, clip.n_frames - half_in):
        examples.append(
            TrainingExample(
                input=clip.frames[center - half_in : center + half_in + 1],
                target=mel.frames[center - half_out : center + half_out + 1],
            )
        )
    return examples


# ---------------------------------------------------------------------------
# Synthetic paired corpus


def _latent_params(rng: np.random.Generator, dims: int = 4, components: int = 3):
    # Gesture-rate components: each utterance sweeps its latent range
    # within a fraction of a second, so train/dev utterances cover
    # overlapping regions of the latent space.
    freqs = rng.uniform(1.0, 3.0, size=(dims, components))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(dims, components))
    amps = rng.uniform(0.5, 1.0, size=(dims, components))
    amps /= amps.sum(axis=1, keepdims=True)
    return freqs, phases, amps


def _latent(t: np.ndarray, freqs, phases, amps) -> np.ndarray:
    """Smooth articulator-like trajectory in [-1, 1]^dims, one row per time."""
    z = np.zeros((t.size, freqs.shape[0]))
    for d in range(freqs.shape[0]):
        z[:, d] = np.sum(
            amps[d][None, :] * np.sin(2 * np.pi * freqs[d][None, :] * t[:, None] + phases[d]),
            axis=1,
        )
    return z


def _comb_lines(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Frequencies, gains, and phases of the broadband bed, matched to the
    default mel analysis: one line midway between every second pair of
    band centers, starting above the voiced harmonics (max 4 x 165 Hz)."""
    centers = filter_center_freqs(DspConfig())
    mids = (centers[:-1] + centers[1:]) / 2.0
    line_hz = np.array([mids[j] for j in range(22, len(mids), 2)])
    return line_hz, rng.uniform(0.7, 1.0, size=line_hz.size), rng.uniform(
        0.0, 2.0 * np.pi, size=line_hz.size
    )


def synth_utterance(seed: int, index: int, n_frames: int) -> tuple[UltrasoundClip, Waveform]:
    """Deterministic paired (video, audio) utterance driven by one latent
    trajectory."""
    rng = stream(seed, "corpus", index)
    freqs, phases, amps = _latent_params(rng)
    utt_id = f"utt{index:04d}"

    rows = np.arange(RAW_HEIGHT)
    cols = np.arange(RAW_WIDTH)
    t_video = np.arange(n_frames) / VIDEO_FPS
    z_video = _latent(t_video, freqs, phases, amps)
    frames = np.zeros((n_frames, RAW_HEIGHT, RAW_WIDTH))
    for j in range(4):
        row_c = 32.0 + 18.0 * z_video[:, j]
        col_c = (j + 0.5) * RAW_WIDTH / 4.0 + 90.0 * z_video[:, (j + 1) % 4]
        amp = 0.55 + 0.35 * z_video[:, (j + 2) % 4]
        row_g = np.exp(-0.5 * ((rows[None, :] - row_c[:, None]) / 7.0) ** 2)
        col_g = np.exp(-0.5 * ((cols[None, :] - col_c[:, None]) / 55.0) ** 2)
        frames += amp[:, None, None] * row_g[:, :, None] * col_g[:, None, :]
    frames += rng.uniform(0.0, 0.06, size=frames.shape)
    frames = np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)
    clip = UltrasoundClip(frames, VIDEO_FPS, utt_id)

    n_samples = n_frames * 269  # one mel hop per video frame
    t_audio = np.arange(n_samples) / AUDIO_RATE
    z_audio = _latent(t_audio, freqs, phases, amps)
    f0 = 145.0 + 20.0 * z_audio[:, 0]
    base_phase = 2.0 * np.pi * np.cumsum(f0) / AUDIO_RATE
    x = np.zeros(n_samples)
    for h in range(1, 5):
        amp_h = 0.25 * (1.0 + 0.8 * z_audio[:, (h - 1) % 4]) / h
        x += amp_h * np.sin(h * base_phase)
    # Aspiration-like bed above the harmonic range: one sinusoid per pair
    # of mel bands, placed midway between band centers, with its level
    # following the latent trajectory.  All lines sit several DFT bins
    # apart (and clear of the harmonics), so every band's energy is a
    # deterministic function of the latent state: the acoustics carry no
    # unpredictable frame-to-frame texture for a generator to chase.
    for line_hz, line_gain, line_phase in zip(*_comb_lines(rng)):
        x += (0.016 * line_gain) * (1.0 + 0.7 * z_audio[:, 3]) * np.sin(
            2.0 * np.pi * line_hz * t_audio + line_phase
        )
    x *= 0.8 / np.max(np.abs(x))
    return clip, Waveform(x, AUDIO_RATE)


def split_counts(n_utts: int) -> tuple[int, int, int]:
    """70/10/20 by utterance, with every split non-empty."""
    if n_utts < 3:
        raise ValueError("need at least 3 utterances to split")
    dev = max(1, n_utts // 10)
    test = max(1, n_utts // 5)
    return n_utts - dev - test, dev, test


def synth_corpus(
    seed: int, n_utts: int, frames_per_utt: int
) -> tuple[list[tuple[UltrasoundClip, Waveform]], CorpusSplit]:
    if n_utts <= 0:
        raise ValueError("n_utts must be positive")
    if frames_per_utt < 1:
        raise ValueError("frames_per_utt must be positive")
    pairs = [synth_utterance(seed, i, frames_per_utt) for i in range(n_utts)]
    n_train, n_dev, _ = split_counts(n_utts)
    ids = [clip.utterance_id for clip, _ in pairs]
    split = CorpusSplit(
        train=tuple(ids[:n_train]),
        dev=tuple(ids[n_train : n_train + n_dev]),
        test=tuple(ids[n_train + n_dev :]),
    )
    return pairs, split


# ---------------------------------------------------------------------------
# On-disk corpus layout


@dataclass
class Corpus:
    """Manifest-backed corpus directory."""

    root: Path
    seed: int
    corpus_id: str = ""
    utterances: list[dict] = field(default_factory=list)

    MANIFEST = "manifest.json"

    @classmethod
    def load(cls, root) -> "Corpus":
        root = Path(root)
        manifest_path = root / cls.MANIFEST
        if not manifest_path.exists():
            raise FormatError(f"missing corpus manifest {manifest_path}")
        blob = json.loads(manifest_path.read_text())
        if blob.get("schema_version") != 1:
            raise FormatError(f"{manifest_path}: unsupported schema_version")
        return cls(
            root=root,
            seed=int(blob["seed"]),
            corpus_id=blob.get("corpus_id", ""),
            utterances=blob["utterances"],
        )

    def save(self) -> None:
        blob = {
            "schema_version": 1,
            "seed": self.seed,
            "corpus_id": self.corpus_id,
            "utterances": self.utterances,
        }
        (self.root / self.MANIFEST).write_text(json.dumps(blob, indent=1))

    def split(self, name: str) -> list[dict]:
        if name not in ("train", "dev", "test"):
            raise ValueError(f"unknown split {name!r}")
        return [u for u in self.utterances if u["split"] == name]

    def path(self, record: dict, kind: str) -> Path:
        return self.root / record[kind]

    def mel_stats_path(self) -> Path:
        return self.root / "mel_stats.json"


def uti_frame_count(path) -> int:
    """Frame count from a UTI1 header without loading the payload."""
    with open(path, "rb") as f:
        header = f.read(_UTI_HEADER.size)
    if len(header) < _UTI_HEADER.size:
        raise FormatError(f"{path}: truncated header at offset {len(header)}")
    magic, t, _, _, _ = _UTI_HEADER.unpack(header)
    if magic != b"UTI1":
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    return t


def extract_features(corpus: Corpus, cfg: DspConfig = DspConfig()) -> MelNormStats:
    """Write one MEL1 file per utterance and the training-split statistics.

    One mel frame per video frame: the corpus synthesizes audio at exactly
    one analysis hop per frame, which this function asserts.
    """
    (corpus.root / "mel").mkdir(exist_ok=True)
    train_frames = []
    for rec in corpus.utterances:
        wav = load_wav(corpus.path(rec, "wav"))
        mel = mel_spectrogram(wav, cfg)
        n_video = uti_frame_count(corpus.path(rec, "uti"))
        if mel.n_frames != n_video:
            raise ValueError(
                f"{rec['id']}: {mel.n_frames} mel frames for {n_video} video frames"
            )
        rel = f"mel/{rec['id']}.mel1"
        save_mel(mel, corpus.root / rel)
        rec["mel"] = rel
        if rec["split"] == "train":
            train_frames.append(mel.frames)
    stats = MelNormStats.from_frames(train_frames)
    stats.save(corpus.mel_stats_path())
    corpus.save()
    return stats


def write_corpus(root, seed: int, n_utts: int, frames_per_utt: int) -> Corpus:
    """Generate and persist a synthetic corpus, one utterance at a time."""
    root = Path(root)
    (root / "uti").mkdir(parents=True, exist_ok=True)
    (root / "wav").mkdir(exist_ok=True)
    n_train, n_dev, _ = split_counts(n_utts)
    records = []
    for i in range(n_utts):
        clip, wav = synth_utterance(seed, i, frames_per_utt)
        utt_id = clip.utterance_id
        uti_rel = f"uti/{utt_id}.uti1"
        wav_rel = f"wav/{utt_id}.wav"
        save_uti(clip, root / uti_rel)
        save_wav(wav, root / wav_rel)
        split = "train" if i < n_train else ("dev" if i < n_train + n_dev else "test")
        records.append({"id": utt_id, "uti": uti_rel, "wav": wav_rel, "split": split})
    corpus = Corpus(
        root=root,
        seed=seed,
        corpus_id=f"synth-seed{seed}-{n_utts}x{frames_per_utt}",
        utterances=records,
    )
    corpus.save()
    return corpus
