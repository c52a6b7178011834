"""Scikit-learn style estimator over the embedding pipeline.

``SpeakerEmbedder`` behaves like any sklearn transformer: construct with
hyperparameters, ``fit(X, y)`` on labeled waveforms, ``transform(X)`` to
fixed-size embeddings, ``predict(X)`` for closed-set speaker decisions.
``X`` is a sequence of 1-d float arrays (16 kHz mono samples); lengths may
vary per utterance. Embedding vectors compose with any downstream sklearn
tooling (clustering, PLDA-free cosine scoring, visualization).
"""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import aggregator, audio, encoder, trainer
from .model import SpeakerNet
from .validation import check_labels, check_waveform_list


class SpeakerEmbedder(BaseEstimator, TransformerMixin):
    """Raw-waveform speaker embedding model with a cosine-similarity backend.

    Parameters mirror the training recipe: an encoder preset name, a width
    multiplier for desk-scale runs, and the optimizer schedule. ``fit``
    trains a speaker classifier; ``transform`` returns the embedding layer's
    pre-activation output per utterance.
    """

    def __init__(self, preset: str = "yvector-5", width_scale: float = 1.0,
                 epochs: int = 2, utterances_per_epoch: int | None = None,
                 batch_size: int = 32, crop_seconds: float = 3.9,
                 lr0: float = 0.01, momentum: float = 0.9,
                 decay_factor: float = 0.5, decay_every_epochs: int = 60,
                 l2_lambda: float = 1e-4, am_scale: float = 30.0,
                 am_margin: float = 0.35, dropout_rate: float = 0.1,
                 embed_samples: int = audio.DEFAULT_CROP_SAMPLES, seed: int = 0):
        self.preset = preset
        self.width_scale = width_scale
        self.epochs = epochs
        self.utterances_per_epoch = utterances_per_epoch
        self.batch_size = batch_size
        self.crop_seconds = crop_seconds
        self.lr0 = lr0
        self.momentum = momentum
        self.decay_factor = decay_factor
        self.decay_every_epochs = decay_every_epochs
        self.l2_lambda = l2_lambda
        self.am_scale = am_scale
        self.am_margin = am_margin
        self.dropout_rate = dropout_rate
        self.embed_samples = embed_samples
        self.seed = seed

    # -- configuration ------------------------------------------------------

    def _encoder_config(self) -> encoder.EncoderConfig:
        cfg = encoder.get_preset(self.preset)
        if self.width_scale != 1.0:
            cfg = encoder.scale_widths(cfg, self.width_scale)
        return dataclasses.replace(cfg, dropout_rate=self.dropout_rate)

    def _tdnn_config(self, n_classes: int) -> aggregator.TdnnConfig:
        cfg = aggregator.TdnnConfig(n_classes=n_classes)
        if self.width_scale != 1.0:
            cfg = cfg.scaled(self.width_scale)
        return dataclasses.replace(cfg, n_classes=n_classes)

    def _train_config(self, n_utterances: int) -> trainer.TrainConfig:
        per_epoch = self.utterances_per_epoch
        if per_epoch is None:
            per_epoch = n_utterances
        return trainer.TrainConfig(
            lr0=self.lr0, momentum=self.momentum, decay_factor=self.decay_factor,
            decay_every_epochs=self.decay_every_epochs, epochs=self.epochs,
            batch_size=self.batch_size, crop_seconds=self.crop_seconds,
            utterances_per_epoch=per_epoch, l2_lambda=self.l2_lambda,
            am_scale=self.am_scale, am_margin=self.am_margin, seed=self.seed)

    # -- sklearn API ----------------------------------------------------------

    def fit(self, X, y):
        waves = check_waveform_list(X)
        y = check_labels(y, len(waves))
        classes, encoded = np.unique(y, return_inverse=True)
        if classes.size < 2:
            raise ValueError("fitting requires at least 2 distinct speakers")
        corpus = audio.corpus_from_arrays(waves, encoded, n_classes=classes.size)
        cfg = self._train_config(len(waves))
        net = SpeakerNet(self._encoder_config(), self._tdnn_config(classes.size),
                         seed=self.seed)
        needed = net.min_input_samples()
        if cfg.crop_samples < needed:
            raise ValueError(
                f"crop_seconds={self.crop_seconds} gives {cfg.crop_samples} samples, "
                f"below the model's receptive field of {needed}")
        history = trainer.train_run(net, corpus, cfg)
        self.model_ = net
        self.classes_ = classes
        self.n_classes_ = int(classes.size)
        self.embedding_size_ = net.embed_dim
        self.history_ = history
        return self

    def transform(self, X) -> np.ndarray:
        """Embed each utterance from its deterministic center window."""
        check_is_fitted(self, "model_")
        waves = check_waveform_list(X)
        out = np.empty((len(waves), self.embedding_size_), dtype=np.float32)
        for start in range(0, len(waves), self.batch_size):
            chunk = waves[start:start + self.batch_size]
            batch = np.stack([
                audio.center_crop(
                    audio.normalize_by_max(audio.WaveformUtterance(
                        samples=w, speaker_id="", utterance_id=f"x{start + j}")).samples,
                    self.embed_samples)
                for j, w in enumerate(chunk)])
            out[start:start + len(chunk)] = self.model_.embed_batch(batch)
        return out

    def predict(self, X) -> np.ndarray:
        """Closed-set speaker decision: nearest class weight by cosine."""
        check_is_fitted(self, "model_")
        waves = check_waveform_list(X)
        labels = np.empty(len(waves), dtype=self.classes_.dtype)
        for start in range(0, len(waves), self.batch_size):
            chunk = waves[start:start + self.batch_size]
            batch = np.stack([
                audio.center_crop(
                    audio.normalize_by_max(audio.WaveformUtterance(
                        samples=w, speaker_id="", utterance_id=f"x{start + j}")).samples,
                    self.embed_samples)
                for j, w in enumerate(chunk)])
            _, features = self.model_.forward_batch(batch, training=False)
            cos = aggregator.cosine_logits(features.data, self.model_.class_weights.data)
            labels[start:start + len(chunk)] = self.classes_[cos.argmax(axis=1)]
        return labels

    def score_pairs(self, X_enroll, X_test) -> np.ndarray:
        """Cosine verification scores for aligned utterance pairs."""
        a = self.transform(X_enroll)
        b = self.transform(X_test)
        if a.shape != b.shape:
            raise ValueError("enroll and test sides must align one-to-one")
        a = a / np.linalg.norm(a, axis=1, keepdims=True)
        b = b / np.linalg.norm(b, axis=1, keepdims=True)
        return np.sum(a * b, axis=1)
