import wave
from pathlib import Path

import numpy as np
import pytest

from yvec import audio


# ---------------------------------------------------------------------------
# WAV reading


def test_read_zero_file(tmp_path):
    path = tmp_path / "z.wav"
    audio.write_wav_pcm16(path, np.zeros(62400))
    u = audio.read_wav_pcm16(path)
    assert u.samples.size == 62400
    assert np.array_equal(u.samples, np.zeros(62400, dtype=np.float32))


def test_read_scaling_rule(tmp_path):
    path = tmp_path / "one.wav"
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(16000)
        w.writeframes(np.array([32767, -32768], dtype="<i2").tobytes())
    u = audio.read_wav_pcm16(path)
    assert u.samples[0] == pytest.approx(32767 / 32768)
    assert u.samples[1] == pytest.approx(-1.0)


def test_read_rejects_stereo(tmp_path):
    path = tmp_path / "st.wav"
    with wave.open(str(path), "wb") as w:
        w.setnchannels(2)
        w.setsampwidth(2)
        w.setframerate(16000)
        w.writeframes(np.zeros(64, dtype="<i2").tobytes())
    with pytest.raises(audio.AudioFormatError, match="channels"):
        audio.read_wav_pcm16(path)


def test_read_rejects_wrong_rate(tmp_path):
    path = tmp_path / "rate.wav"
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(8000)
        w.writeframes(np.zeros(32, dtype="<i2").tobytes())
    with pytest.raises(audio.AudioFormatError, match="rate"):
        audio.read_wav_pcm16(path)


def test_read_rejects_wrong_width(tmp_path):
    path = tmp_path / "w8.wav"
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(1)
        w.setframerate(16000)
        w.writeframes(bytes(32))
    with pytest.raises(audio.AudioFormatError, match="width"):
        audio.read_wav_pcm16(path)


def test_read_rejects_garbage(tmp_path):
    path = tmp_path / "junk.wav"
    path.write_bytes(b"not a riff file at all")
    with pytest.raises(audio.AudioFormatError):
        audio.read_wav_pcm16(path)


# ---------------------------------------------------------------------------
# normalization


def _utt(samples):
    return audio.WaveformUtterance(samples=np.asarray(samples, dtype=np.float32),
                                   speaker_id="s", utterance_id="s/u.wav")


def test_normalize_already_peaked():
    u = audio.normalize_by_max(_utt([0.5, -1.0]))
    assert np.array_equal(u.samples, np.array([0.5, -1.0], dtype=np.float32))
    assert not u.degenerate


def test_normalize_scales_by_abs_peak():
    u = audio.normalize_by_max(_utt([0.25, -0.5]))
    assert np.allclose(u.samples, [0.5, -1.0])


def test_normalize_all_zero_flagged():
    u = audio.normalize_by_max(_utt(np.zeros(10)))
    assert u.degenerate
    assert np.array_equal(u.samples, np.zeros(10, dtype=np.float32))


def test_normalize_idempotent_exact():
    rng = np.random.default_rng(2)
    for _ in range(25):
        raw = _utt(rng.uniform(-0.7, 0.7, size=rng.integers(1, 500)))
        once = audio.normalize_by_max(raw)
        twice = audio.normalize_by_max(once)
        assert np.array_equal(once.samples, twice.samples)
        peak = np.max(np.abs(once.samples))
        assert peak == np.float32(1.0)


# ---------------------------------------------------------------------------
# cropping


def test_crop_exact_length_is_identity():
    u = _utt(np.arange(62400) / 62400)
    out = audio.random_crop(u, 62400, np.random.default_rng(0))
    assert np.array_equal(out, u.samples)


def test_crop_one_extra_sample_two_offsets():
    u = _utt(np.arange(62401, dtype=np.float32))
    starts = set()
    rng = np.random.default_rng(0)
    for _ in range(64):
        out = audio.random_crop(u, 62400, rng)
        starts.add(int(out[0]))
    assert starts == {0, 1}


def test_crop_tiles_short_utterance():
    u = _utt(np.arange(1000, dtype=np.float32))
    out = audio.random_crop(u, 62400, np.random.default_rng(0))
    assert out.size == 62400
    assert np.array_equal(out[:1000], u.samples)
    assert np.array_equal(out[1000:2000], u.samples)
    assert np.array_equal(out, np.tile(u.samples, 63)[:62400])


def test_crop_zero_length_errors():
    with pytest.raises(ValueError):
        audio.random_crop(_utt(np.zeros(0)), 100, np.random.default_rng(0))


def test_crop_length_always_exact():
    rng = np.random.default_rng(9)
    for n in [1, 2, 5, 99, 100, 101, 500]:
        u = _utt(rng.uniform(-1, 1, size=n))
        assert audio.random_crop(u, 100, rng).size == 100


def test_center_crop():
    samples = np.arange(10, dtype=np.float32)
    assert np.array_equal(audio.center_crop(samples, 4), np.array([3, 4, 5, 6], dtype=np.float32))
    tiled = audio.center_crop(np.array([1.0, 2.0]), 5)
    assert np.array_equal(tiled, np.array([1, 2, 1, 2, 1], dtype=np.float32))


# ---------------------------------------------------------------------------
# synthetic corpus


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    manifest = audio.synth_corpus_generate(root, n_speakers=3, utts_per_speaker=2,
                                           duration_s=0.6, seed=11)
    return root, manifest


def test_synth_deterministic(tmp_path, tiny_corpus):
    root, _ = tiny_corpus
    again = tmp_path / "again"
    audio.synth_corpus_generate(again, n_speakers=3, utts_per_speaker=2,
                                duration_s=0.6, seed=11)
    for rel in ["spk000/utt000.wav", "spk002/utt001.wav", "manifest.json"]:
        assert (root / rel).read_bytes() == (again / rel).read_bytes()


def test_synth_counts_and_classes(tiny_corpus):
    _, manifest = tiny_corpus
    assert len(manifest.records) == 6
    assert sorted(manifest.class_map().values()) == [0, 1, 2]


def test_synth_rejects_single_speaker(tmp_path):
    with pytest.raises(ValueError):
        audio.synth_corpus_generate(tmp_path, n_speakers=1, utts_per_speaker=2)


def test_synth_dominant_peak_at_harmonic(tiny_corpus):
    root, manifest = tiny_corpus
    for s in range(3):
        voice = audio._speaker_voice(11, s)
        u = audio.read_wav_pcm16(root / f"spk{s:03d}/utt000.wav")
        segment = u.samples[:4096]
        mags = np.abs(np.fft.rfft(segment))
        mags[0] = 0.0
        peak_hz = np.argmax(mags) * audio.SAMPLE_RATE / 4096
        k = max(1, round(peak_hz / voice.f0_hz))
        bin_hz = audio.SAMPLE_RATE / 4096
        assert abs(peak_hz - k * voice.f0_hz) <= 2 * bin_hz


def test_manifest_round_trip(tiny_corpus):
    root, manifest = tiny_corpus
    loaded = audio.CorpusManifest.load(root / "manifest.json")
    assert [r.utterance_id for r in loaded.records] == [r.utterance_id for r in manifest.records]


def test_manifest_missing_file(tmp_path, tiny_corpus):
    root, manifest = tiny_corpus
    broken = tmp_path / "manifest.json"
    rows = (root / "manifest.json").read_text().replace("utt000", "missing000")
    broken.write_text(rows)
    with pytest.raises(FileNotFoundError):
        audio.CorpusManifest.load(broken)


def test_load_corpus_normalized(tiny_corpus):
    root, manifest = tiny_corpus
    corpus = audio.load_corpus(manifest)
    assert len(corpus) == 6
    assert corpus.n_classes == 3
    for u in corpus.utterances:
        assert np.max(np.abs(u.samples)) == np.float32(1.0)


# ---------------------------------------------------------------------------
# trial lists


def test_parse_trial_list(tmp_path):
    path = tmp_path / "trials.txt"
    path.write_text("1 a/u1.wav a/u2.wav\n0 a/u1.wav b/u1.wav\n")
    trials = audio.parse_trial_list(path)
    assert trials[0] == audio.Trial(True, "a/u1.wav", "a/u2.wav")
    assert trials[1] == audio.Trial(False, "a/u1.wav", "b/u1.wav")


def test_parse_trial_bad_label(tmp_path):
    path = tmp_path / "trials.txt"
    path.write_text("1 a b\n2 x y\n")
    with pytest.raises(audio.TrialParseError, match="line 2"):
        audio.parse_trial_list(path)


def test_parse_trial_bad_field_count(tmp_path):
    path = tmp_path / "trials.txt"
    path.write_text("1 only_two\n")
    with pytest.raises(audio.TrialParseError, match="line 1"):
        audio.parse_trial_list(path)


def test_make_trial_list_balanced(tiny_corpus):
    _, manifest = tiny_corpus
    trials = audio.make_trial_list(manifest, 40, seed=3)
    n_target = sum(t.target for t in trials)
    assert len(trials) == 40
    assert n_target == 20
    for t in trials:
        assert t.enroll_id != t.test_id or not t.target


def test_trial_list_round_trip(tmp_path, tiny_corpus):
    _, manifest = tiny_corpus
    trials = audio.make_trial_list(manifest, 10, seed=5)
    path = tmp_path / "t.txt"
    audio.write_trial_list(path, trials)
    assert audio.parse_trial_list(path) == trials
