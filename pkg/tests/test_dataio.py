import numpy as np
import numpy.testing as npt
import pytest

from uti2speech.dataio import (
    AUDIO_RATE,
    Corpus,
    CorpusSplit,
    FormatError,
    MelNormStats,
    TrainingExample,
    UltrasoundClip,
    bicubic_resize,
    destandardize_mel,
    load_mel,
    load_uti,
    load_wav,
    make_examples,
    minmax_scale,
    preprocess_clip,
    save_mel,
    save_uti,
    save_wav,
    split_counts,
    standardize_mel,
    synth_corpus,
    synth_utterance,
    write_corpus,
)
from uti2speech.dsp import DspConfig, MelSpectrogram, mel_spectrogram

from oracles import ridge_regression_r2


def cubic_oracle(t: float) -> float:
    """Catmull-Rom weight, scalar form."""
    a = -0.5
    at = abs(t)
    if at <= 1.0:
        return (a + 2.0) * at**3 - (a + 3.0) * at**2 + 1.0
    if at < 2.0:
        return a * at**3 - 5.0 * a * at**2 + 8.0 * a * at - 4.0 * a
    return 0.0


def bicubic_oracle(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Per-pixel 4x4 loop implementation of the same resampling."""
    h, w = img.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        sy = (i + 0.5) * (h / out_h) - 0.5
        by = int(np.floor(sy))
        for j in range(out_w):
            sx = (j + 0.5) * (w / out_w) - 0.5
            bx = int(np.floor(sx))
            acc = 0.0
            for m in range(by - 1, by + 3):
                wy = cubic_oracle(sy - m)
                row = min(max(m, 0), h - 1)
                for n in range(bx - 1, bx + 3):
                    wx = cubic_oracle(sx - n)
                    col = min(max(n, 0), w - 1)
                    acc += wy * wx * img[row, col]
            out[i, j] = acc
    return out


class TestUtiFormat:
    def test_roundtrip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        frames = rng.integers(0, 256, size=(3, 64, 946), dtype=np.uint8)
        clip = UltrasoundClip(frames, 82.0, "utt0000")
        path = tmp_path / "clip.uti1"
        save_uti(clip, path)
        loaded = load_uti(path)
        npt.assert_array_equal(loaded.frames, frames)
        assert loaded.fps == 82.0
        save_uti(loaded, tmp_path / "again.uti1")
        assert (tmp_path / "again.uti1").read_bytes() == path.read_bytes()

    def test_file_size_arithmetic(self, tmp_path):
        frames = np.zeros((2, 64, 946), dtype=np.uint8)
        path = tmp_path / "c.uti1"
        save_uti(UltrasoundClip(frames, 82.0), path)
        assert path.stat().st_size == 20 + 2 * 64 * 946

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.uti1"
        save_uti(UltrasoundClip(np.zeros((1, 2, 2), dtype=np.uint8), 82.0), path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="magic"):
            load_uti(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "trunc.uti1"
        save_uti(UltrasoundClip(np.zeros((2, 4, 4), dtype=np.uint8), 82.0), path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(FormatError, match="payload"):
            load_uti(path)

    def test_zero_extent(self, tmp_path):
        import struct

        path = tmp_path / "zero.uti1"
        path.write_bytes(struct.pack("<4sIIIf", b"UTI1", 0, 64, 946, 82.0))
        with pytest.raises(FormatError, match="zero extent"):
            load_uti(path)


class TestMelWavFormats:
    def test_mel_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        mel = MelSpectrogram(rng.normal(size=(7, 80)), 81.97, "raw")
        path = tmp_path / "m.mel1"
        save_mel(mel, path)
        loaded = load_mel(path)
        npt.assert_array_equal(loaded.frames, mel.frames)
        assert loaded.frames.dtype == np.float64

    def test_mel_bad_magic(self, tmp_path):
        path = tmp_path / "m.mel1"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(FormatError):
            load_mel(path)

    def test_wav_roundtrip_int16_quantized(self, tmp_path):
        rng = np.random.default_rng(2)
        wav_in = rng.uniform(-0.9, 0.9, size=2000)
        path = tmp_path / "w.wav"
        from uti2speech.dsp import Waveform

        save_wav(Waveform(wav_in, AUDIO_RATE), path)
        out = load_wav(path)
        assert out.sample_rate == AUDIO_RATE
        npt.assert_allclose(out.samples, wav_in, atol=1.0 / 32767)


class TestBicubicResize:
    def test_constant_preserved(self):
        img = np.full((64, 946), 37.5)
        out = bicubic_resize(img)
        assert out.shape == (64, 128)
        npt.assert_allclose(out, 37.5, atol=1e-9)

    def test_linear_ramp_preserved_interior(self):
        w = 946
        img = np.tile(np.linspace(0.0, 1.0, w), (64, 1))
        out = bicubic_resize(img)
        # Cubic interpolation reproduces linear functions except where the
        # stencil is edge-clamped.
        expected = (np.arange(128) + 0.5) * (w / 128) - 0.5
        expected = expected / (w - 1)
        npt.assert_allclose(out[:, 2:-2], np.tile(expected[2:-2], (64, 1)), atol=1e-6)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(0, 255, size=(16, 40))
        out = bicubic_resize(img, 16, 12)
        npt.assert_allclose(out, bicubic_oracle(img, 16, 12), atol=1e-9)

    def test_frame_count_preserved(self):
        frames = np.random.default_rng(4).uniform(0, 255, size=(5, 64, 946))
        assert bicubic_resize(frames).shape == (5, 64, 128)


class TestMinMaxScale:
    def test_endpoints(self):
        out = minmax_scale(np.array([[0.0, 255.0]]))
        npt.assert_array_equal(out, [[-1.0, 1.0]])

    def test_constant_clip_is_zeros_with_warning(self):
        with pytest.warns(UserWarning, match="constant"):
            out = minmax_scale(np.full((3, 4), 9.0))
        npt.assert_array_equal(out, 0.0)

    def test_exact_range_for_nonconstant(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            frames = rng.uniform(0, 255, size=(4, 6, 6))
            out = minmax_scale(frames)
            assert out.min() == -1.0
            assert out.max() == 1.0


class TestMelNormalization:
    def _mels(self, seed, n=3, t=40):
        rng = np.random.default_rng(seed)
        return [rng.normal(loc=-5.0, scale=2.0, size=(t, 80)) for _ in range(n)]

    def test_train_split_standardizes_to_unit(self):
        blocks = self._mels(6)
        stats = MelNormStats.from_frames(blocks)
        stacked = np.concatenate([(b - stats.mean) / stats.std for b in blocks])
        npt.assert_allclose(stacked.mean(axis=0), 0.0, atol=1e-9)
        npt.assert_allclose(stacked.std(axis=0), 1.0, atol=1e-9)

    def test_roundtrip_identity(self):
        blocks = self._mels(7)
        stats = MelNormStats.from_frames(blocks)
        mel = MelSpectrogram(blocks[0], 82.0, "raw")
        back = destandardize_mel(standardize_mel(mel, stats), stats)
        npt.assert_allclose(back.frames, mel.frames, atol=1e-9)
        assert back.normalization == "raw"

    def test_disjoint_split_stats_differ(self):
        train_stats = MelNormStats.from_frames(self._mels(8))
        dev = np.concatenate(self._mels(9))
        standardized = (dev - train_stats.mean) / train_stats.std
        assert np.abs(standardized.mean(axis=0)).max() > 1e-3

    def test_stats_roundtrip_file(self, tmp_path):
        stats = MelNormStats.from_frames(self._mels(10))
        stats.save(tmp_path / "stats.json")
        loaded = MelNormStats.load(tmp_path / "stats.json")
        npt.assert_array_equal(loaded.mean, stats.mean)
        npt.assert_array_equal(loaded.std, stats.std)

    def test_zero_std_rejected(self):
        with pytest.raises(ValueError):
            MelNormStats(np.zeros(80), np.zeros(80))


class TestMakeExamples:
    def _pair(self, t, seed=11):
        rng = np.random.default_rng(seed)
        clip = UltrasoundClip(rng.uniform(-1, 1, size=(t, 8, 8)), 82.0, "u")
        mel = MelSpectrogram(rng.normal(size=(t, 80)), 82.0)
        return clip, mel

    def test_exact_length_gives_one(self):
        clip, mel = self._pair(25)
        assert len(make_examples(clip, mel)) == 1

    def test_thirty_frames_give_six(self):
        clip, mel = self._pair(30)
        assert len(make_examples(clip, mel)) == 6

    def test_short_clip_gives_none(self):
        clip, mel = self._pair(24)
        assert make_examples(clip, mel) == []

    def test_center_alignment_values(self):
        clip, mel = self._pair(40)
        examples = make_examples(clip, mel)
        first = examples[0]  # center frame index 12
        npt.assert_array_equal(first.input, clip.frames[0:25])
        npt.assert_array_equal(first.target, mel.frames[10:15])
        assert first.target.shape == (5, 80)

    def test_mismatched_counts_raise(self):
        clip, _ = self._pair(30)
        _, mel = self._pair(31)
        with pytest.raises(ValueError):
            make_examples(clip, mel)

    def test_windows_in_bounds_random_lengths(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            t = int(rng.integers(1, 80))
            clip, mel = self._pair(t)
            examples = make_examples(clip, mel)
            assert len(examples) == max(0, t - 24)
            for ex in examples:
                assert ex.input.shape == (25, 8, 8)
                assert ex.target.shape == (5, 80)
                assert np.all(np.abs(ex.input) <= 1.0)


class TestSynthCorpus:
    def test_same_seed_bit_identical(self):
        a_clip, a_wav = synth_utterance(123, 0, 30)
        b_clip, b_wav = synth_utterance(123, 0, 30)
        npt.assert_array_equal(a_clip.frames, b_clip.frames)
        npt.assert_array_equal(a_wav.samples, b_wav.samples)

    def test_different_seeds_differ(self):
        a_clip, _ = synth_utterance(1, 0, 10)
        b_clip, _ = synth_utterance(2, 0, 10)
        assert not np.array_equal(a_clip.frames[0], b_clip.frames[0])

    def test_raw_shape_and_range(self):
        clip, wav = synth_utterance(9, 3, 12)
        assert clip.frames.shape == (12, 64, 946)
        assert clip.frames.dtype == np.uint8
        assert len(wav) == 12 * 269
        assert np.max(np.abs(wav.samples)) == pytest.approx(0.8, abs=1e-12)

    def test_split_disjoint_and_covering(self):
        pairs, split = synth_corpus(5, 12, 8)
        assert len(pairs) == 12
        all_ids = {c.utterance_id for c, _ in pairs}
        assert set(split.train) | set(split.dev) | set(split.test) == all_ids
        assert split_counts(100) == (70, 10, 20)

    def test_mapping_is_linearly_learnable(self):
        # Ridge regression from downsampled frames to concurrent mel
        # vectors; threshold frozen from one oracle run (measured 0.44-0.68
        # across seeds at this corpus size).
        cfg = DspConfig()
        pairs, split = synth_corpus(7, 20, 60)
        x_train, y_train, x_dev, y_dev = [], [], [], []
        mels = {}
        feats = {}
        for clip, wav in pairs:
            proc = preprocess_clip(clip)
            feats[clip.utterance_id] = proc.frames[:, ::8, ::8].reshape(proc.n_frames, -1)
            mels[clip.utterance_id] = mel_spectrogram(wav, cfg).frames
        for uid in split.train:
            x_train.append(feats[uid])
            y_train.append(mels[uid])
        for uid in split.dev:
            x_dev.append(feats[uid])
            y_dev.append(mels[uid])
        r2 = ridge_regression_r2(
            np.concatenate(x_train),
            np.concatenate(y_train),
            np.concatenate(x_dev),
            np.concatenate(y_dev),
        )
        assert r2 > 0.3


class TestCorpusOnDisk:
    def test_write_load_roundtrip(self, tmp_path):
        corpus = write_corpus(tmp_path / "c", seed=21, n_utts=4, frames_per_utt=6)
        loaded = Corpus.load(tmp_path / "c")
        assert loaded.seed == 21
        assert [u["id"] for u in loaded.utterances] == [u["id"] for u in corpus.utterances]
        rec = loaded.utterances[0]
        clip = load_uti(loaded.path(rec, "uti"))
        assert clip.n_frames == 6
        wav = load_wav(loaded.path(rec, "wav"))
        assert len(wav) == 6 * 269

    def test_missing_manifest_raises(self, tmp_path):
        with pytest.raises(FormatError):
            Corpus.load(tmp_path)

    def test_split_query(self, tmp_path):
        corpus = write_corpus(tmp_path / "c", seed=3, n_utts=10, frames_per_utt=4)
        assert len(corpus.split("train")) == 7
        assert len(corpus.split("dev")) == 1
        assert len(corpus.split("test")) == 2
        with pytest.raises(ValueError):
            corpus.split("validation")


class TestCorpusSplitType:
    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            CorpusSplit(train=("a", "b"), dev=("b",), test=("c",))
