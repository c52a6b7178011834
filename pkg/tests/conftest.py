import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from yvec import aggregator, audio, encoder
from yvec.model import SpeakerNet
from yvec.trainer import TrainConfig


def tiny_encoder_cfg(dropout_rate: float = 0.1) -> encoder.EncoderConfig:
    """Table geometry at ~1/20 width: fast but structurally faithful."""
    import dataclasses
    cfg = encoder.scale_widths(encoder.get_preset("yvector-5"), 0.05)
    return dataclasses.replace(cfg, dropout_rate=dropout_rate)


def tiny_tdnn_cfg(n_classes: int) -> aggregator.TdnnConfig:
    import dataclasses
    cfg = aggregator.TdnnConfig(n_classes=n_classes).scaled(0.04)
    return dataclasses.replace(cfg, n_classes=n_classes)


def tiny_model(n_classes: int, seed: int = 0) -> SpeakerNet:
    return SpeakerNet(tiny_encoder_cfg(), tiny_tdnn_cfg(n_classes), seed=seed)


def toy_corpus(n_speakers: int = 4, utts_per_speaker: int = 3,
               duration_s: float = 0.25, seed: int = 0) -> audio.LoadedCorpus:
    """In-memory corpus of short synthetic voiced utterances."""
    waves, labels, ids = [], [], []
    for s in range(n_speakers):
        voice = audio._speaker_voice(seed, s)
        for u in range(utts_per_speaker):
            rng = np.random.default_rng([seed, s, u])
            waves.append(audio.synth_utterance(voice, duration_s, rng))
            labels.append(s)
            ids.append(f"spk{s:03d}/utt{u:03d}.wav")
    return audio.corpus_from_arrays(waves, labels, n_classes=n_speakers, ids=ids)


def tiny_train_cfg(**overrides) -> TrainConfig:
    base = dict(lr0=0.01, momentum=0.9, decay_factor=0.5, decay_every_epochs=60,
                epochs=1, batch_size=4, crop_seconds=0.16, utterances_per_epoch=8,
                l2_lambda=1e-4, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def session_toy_corpus() -> audio.LoadedCorpus:
    return toy_corpus(n_speakers=4, utts_per_speaker=3, seed=7)
