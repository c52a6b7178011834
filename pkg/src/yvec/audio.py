"""Waveform ingestion, normalization, cropping, synthetic corpus, trial lists.

All audio is mono 16 kHz PCM. Utterances are normalized by their maximum
absolute sample before any cropping. The synthetic corpus generator builds
source-filter voices (fixed per-speaker fundamental plus three formant
resonances) so that speakers are genuinely separable by spectrum, which
keeps end-to-end overfit runs meaningful at desk scale.
"""

from __future__ import annotations

import json
import struct
import wave
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SAMPLE_RATE = 16000
DEFAULT_CROP_SAMPLES = 62400  # 3.9 s at 16 kHz


class AudioFormatError(ValueError):
    """A WAV file violates the PCM s16le / mono / 16 kHz read contract."""


class TrialParseError(ValueError):
    """A trial-list line could not be parsed."""


@dataclass
class WaveformUtterance:
    samples: np.ndarray  # float32 in [-1, 1]
    speaker_id: str
    utterance_id: str
    sample_rate: int = SAMPLE_RATE
    degenerate: bool = False  # all-zero input survived normalization unchanged

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise AudioFormatError(
                f"{self.utterance_id}: sample rate {self.sample_rate} != {SAMPLE_RATE}")
        self.samples = np.asarray(self.samples, dtype=np.float32)


@dataclass(frozen=True)
class Trial:
    target: bool
    enroll_id: str
    test_id: str


@dataclass(frozen=True)
class ManifestRecord:
    utterance_id: str
    speaker_id: str
    path: str
    num_samples: int


@dataclass
class CorpusManifest:
    records: list[ManifestRecord]
    root: Optional[Path] = None

    def class_map(self) -> dict[str, int]:
        """Dense speaker -> class index mapping, stable under sorting."""
        speakers = sorted({r.speaker_id for r in self.records})
        return {s: i for i, s in enumerate(speakers)}

    @property
    def n_speakers(self) -> int:
        return len({r.speaker_id for r in self.records})

    def save(self, path) -> None:
        rows = [
            {"utterance_id": r.utterance_id, "speaker_id": r.speaker_id,
             "path": r.path, "num_samples": r.num_samples}
            for r in self.records
        ]
        Path(path).write_text(json.dumps(rows, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        path = Path(path)
        rows = json.loads(path.read_text())
        records = [ManifestRecord(r["utterance_id"], r["speaker_id"],
                                  r["path"], int(r["num_samples"])) for r in rows]
        manifest = cls(records=records, root=path.parent)
        for r in records:
            if not (manifest.root / r.path).exists():
                raise FileNotFoundError(f"manifest entry missing on disk: {r.path}")
        return manifest


# ---------------------------------------------------------------------------
# WAV I/O


def read_wav_pcm16(path) -> WaveformUtterance:
    """Read a RIFF/WAVE PCM 16-bit mono 16 kHz file, scaled to [-1, 1]."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            comp = w.getcomptype()
            frames = w.readframes(w.getnframes())
    except wave.Error as exc:
        raise AudioFormatError(f"{path}: not a readable RIFF/WAVE file ({exc})") from exc
    if comp != "NONE":
        raise AudioFormatError(f"{path}: compression type {comp!r}, expected uncompressed PCM")
    if channels != 1:
        raise AudioFormatError(f"{path}: {channels} channels, expected mono")
    if width != 2:
        raise AudioFormatError(f"{path}: sample width {width} bytes, expected 2 (PCM 16-bit)")
    if rate != SAMPLE_RATE:
        raise AudioFormatError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE}")
    raw = np.frombuffer(frames, dtype="<i2")
    samples = raw.astype(np.float32) / 32768.0
    return WaveformUtterance(samples=samples, speaker_id=path.parent.name,
                             utterance_id=str(path.name))


def write_wav_pcm16(path, samples: np.ndarray) -> None:
    """Write float samples in [-1, 1] as PCM s16le mono 16 kHz."""
    quantized = np.clip(np.rint(np.asarray(samples, dtype=np.float64) * 32767.0),
                        -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(quantized.tobytes())


# ---------------------------------------------------------------------------
# normalization / cropping


def normalize_by_max(u: WaveformUtterance) -> WaveformUtterance:
    """Divide by the maximum absolute sample; all-zero input is flagged instead."""
    peak = float(np.max(np.abs(u.samples))) if u.samples.size else 0.0
    if peak == 0.0:
        return replace(u, degenerate=True)
    return replace(u, samples=u.samples / np.float32(peak), degenerate=False)


def random_crop(u: WaveformUtterance, length: int = DEFAULT_CROP_SAMPLES,
                rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Contiguous window of exactly ``length`` samples; short inputs are tiled."""
    n = u.samples.size
    if n == 0:
        raise ValueError(f"{u.utterance_id}: cannot crop a zero-length utterance")
    if n < length:
        reps = -(-length // n)
        return np.tile(u.samples, reps)[:length]
    if n == length:
        return u.samples
    if rng is None:
        raise ValueError("random_crop of a longer utterance requires an rng")
    start = int(rng.integers(0, n - length + 1))
    return u.samples[start:start + length]


def center_crop(samples: np.ndarray, length: int = DEFAULT_CROP_SAMPLES) -> np.ndarray:
    """Deterministic center window (tiled when too short); used at evaluation."""
    samples = np.asarray(samples)
    n = samples.size
    if n == 0:
        raise ValueError("cannot crop a zero-length utterance")
    if n < length:
        reps = -(-length // n)
        return np.tile(samples, reps)[:length]
    start = (n - length) // 2
    return samples[start:start + length]


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class VoiceSpec:
    """Source-filter description of one synthetic speaker."""
    f0_hz: float
    formants_hz: tuple[float, float, float]
    bandwidths_hz: tuple[float, float, float]
    formant_gains: tuple[float, float, float] = (1.0, 0.5, 0.25)


def _speaker_voice(seed: int, speaker_idx: int) -> VoiceSpec:
    rng = np.random.default_rng([seed, speaker_idx])
    f0 = float(rng.uniform(80.0, 300.0))
    formants = (float(rng.uniform(300.0, 900.0)),
                float(rng.uniform(900.0, 2200.0)),
                float(rng.uniform(2200.0, 3500.0)))
    bandwidths = (float(rng.uniform(60.0, 140.0)),
                  float(rng.uniform(80.0, 180.0)),
                  float(rng.uniform(100.0, 220.0)))
    return VoiceSpec(f0_hz=f0, formants_hz=formants, bandwidths_hz=bandwidths)


def _resonance_envelope(freqs: np.ndarray, voice: VoiceSpec) -> np.ndarray:
    env = np.zeros_like(freqs)
    for center, bw, gain in zip(voice.formants_hz, voice.bandwidths_hz, voice.formant_gains):
        env += gain / (1.0 + ((freqs - center) / bw) ** 2)
    return env


def synth_utterance(voice: VoiceSpec, duration_s: float,
                    rng: np.random.Generator) -> np.ndarray:
    """One voiced utterance: harmonics of a jittered fundamental shaped by the
    speaker's formant envelope, plus low-level noise, peak-scaled to 0.9."""
    n = int(round(duration_s * SAMPLE_RATE))
    f0 = voice.f0_hz * (1.0 + rng.uniform(-0.003, 0.003))
    k_max = int(7600.0 // f0)
    k = np.arange(1, k_max + 1)
    amps = _resonance_envelope(k * f0, voice)
    keep = amps > 0.01 * amps.max()
    k, amps = k[keep], amps[keep]
    phases = rng.uniform(0.0, 2.0 * np.pi, size=k.size)
    t = np.arange(n) / SAMPLE_RATE
    signal = (amps[:, None] * np.sin(2.0 * np.pi * (k * f0)[:, None] * t[None, :]
                                     + phases[:, None])).sum(axis=0)
    signal += rng.uniform(0.002, 0.01) * rng.standard_normal(n)
    signal *= 0.9 / np.max(np.abs(signal))
    return signal.astype(np.float32)


def synth_corpus_generate(out_dir, n_speakers: int, utts_per_speaker: int,
                          duration_s: float = 5.0, seed: int = 0) -> CorpusManifest:
    """Write a deterministic synthetic corpus of WAVs under ``out_dir``.

    Layout: spk###/utt###.wav plus manifest.json; identical seeds produce
    byte-identical files.
    """
    if n_speakers < 2:
        raise ValueError("a corpus needs at least 2 speakers")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for s in range(n_speakers):
        voice = _speaker_voice(seed, s)
        speaker_id = f"spk{s:03d}"
        (out_dir / speaker_id).mkdir(exist_ok=True)
        for u in range(utts_per_speaker):
            rng = np.random.default_rng([seed, s, u])
            samples = synth_utterance(voice, duration_s, rng)
            rel = f"{speaker_id}/utt{u:03d}.wav"
            write_wav_pcm16(out_dir / rel, samples)
            records.append(ManifestRecord(utterance_id=rel, speaker_id=speaker_id,
                                          path=rel, num_samples=samples.size))
    manifest = CorpusManifest(records=records, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# trial lists


def parse_trial_list(path) -> list[Trial]:
    """Parse lines of ``<label 0|1> <enroll-id> <test-id>``."""
    trials = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise TrialParseError(f"line {lineno}: expected 3 fields, got {len(parts)}")
        label, enroll, test = parts
        if label not in ("0", "1"):
            raise TrialParseError(f"line {lineno}: unknown label token {label!r}")
        trials.append(Trial(target=label == "1", enroll_id=enroll, test_id=test))
    return trials


def write_trial_list(path, trials: Sequence[Trial]) -> None:
    lines = [f"{int(t.target)} {t.enroll_id} {t.test_id}" for t in trials]
    Path(path).write_text("\n".join(lines) + "\n")


def make_trial_list(manifest: CorpusManifest, n_trials: int,
                    seed: int = 0, utterance_ids: Optional[Sequence[str]] = None) -> list[Trial]:
    """Balanced target/nontarget pairs drawn from the manifest.

    ``utterance_ids`` restricts the pool (e.g. to held-out utterances).
    """
    by_speaker: dict[str, list[str]] = {}
    pool = set(utterance_ids) if utterance_ids is not None else None
    for r in manifest.records:
        if pool is not None and r.utterance_id not in pool:
            continue
        by_speaker.setdefault(r.speaker_id, []).append(r.utterance_id)
    speakers = sorted(s for s, utts in by_speaker.items() if len(utts) >= 1)
    if len(speakers) < 2 or not any(len(by_speaker[s]) >= 2 for s in speakers):
        raise ValueError("need >= 2 speakers and >= 2 utterances for one speaker "
                         "to form both trial kinds")
    rng = np.random.default_rng([seed, len(speakers)])
    trials = []
    n_target = n_trials // 2
    multi = [s for s in speakers if len(by_speaker[s]) >= 2]
    for _ in range(n_target):
        s = multi[int(rng.integers(0, len(multi)))]
        a, b = rng.choice(len(by_speaker[s]), size=2, replace=False)
        trials.append(Trial(True, by_speaker[s][int(a)], by_speaker[s][int(b)]))
    for _ in range(n_trials - n_target):
        i, j = rng.choice(len(speakers), size=2, replace=False)
        sa, sb = speakers[int(i)], speakers[int(j)]
        ua = by_speaker[sa][int(rng.integers(0, len(by_speaker[sa])))]
        ub = by_speaker[sb][int(rng.integers(0, len(by_speaker[sb])))]
        trials.append(Trial(False, ua, ub))
    return trials


# ---------------------------------------------------------------------------
# in-memory corpus for training


@dataclass
class LoadedCorpus:
    """Normalized utterances with dense integer speaker classes."""
    utterances: list[WaveformUtterance]
    labels: np.ndarray
    n_classes: int
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.utterances) != len(self.labels):
            raise ValueError("utterances and labels disagree in length")
        if not self.ids:
            self.ids = [u.utterance_id for u in self.utterances]

    def __len__(self) -> int:
        return len(self.utterances)


def load_corpus(manifest: CorpusManifest,
                utterance_ids: Optional[Sequence[str]] = None) -> LoadedCorpus:
    """Read and normalize every manifest utterance (optionally a subset)."""
    class_map = manifest.class_map()
    keep = set(utterance_ids) if utterance_ids is not None else None
    utts, labels = [], []
    for r in manifest.records:
        if keep is not None and r.utterance_id not in keep:
            continue
        u = read_wav_pcm16(manifest.root / r.path)
        u = replace(u, speaker_id=r.speaker_id, utterance_id=r.utterance_id)
        utts.append(normalize_by_max(u))
        labels.append(class_map[r.speaker_id])
    return LoadedCorpus(utterances=utts, labels=np.asarray(labels, dtype=np.int64),
                        n_classes=len(class_map))


def corpus_from_arrays(waves: Sequence[np.ndarray], labels: Sequence[int],
                       n_classes: Optional[int] = None,
                       ids: Optional[Sequence[str]] = None) -> LoadedCorpus:
    """Wrap already-loaded waveforms (one array per utterance) as a corpus."""
    ids = list(ids) if ids is not None else [f"mem/{i:06d}" for i in range(len(waves))]
    labels = np.asarray(labels, dtype=np.int64)
    utts = [
        normalize_by_max(WaveformUtterance(samples=np.asarray(w, dtype=np.float32),
                                           speaker_id=f"class{labels[i]}",
                                           utterance_id=ids[i]))
        for i, w in enumerate(waves)
    ]
    return LoadedCorpus(utterances=utts, labels=labels,
                        n_classes=int(n_classes if n_classes is not None else labels.max() + 1))
