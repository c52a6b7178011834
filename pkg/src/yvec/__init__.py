"""Multi-scale raw-waveform speaker embeddings.

Train a speaker classifier on raw 16 kHz audio, extract fixed-size
embeddings, score verification trials with a cosine backend, and analyze
the learned filterbank's frequency response. ``SpeakerEmbedder`` is the
high-level estimator; the ``yvec`` command line drives full runs.
"""

import os

if os.environ.get("YVEC_STRICT_DETERMINISM") == "1":
    # single-lane bit-exact mode: pin BLAS worker counts before numpy loads
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, "1")

from .estimator import SpeakerEmbedder  # noqa: E402

__all__ = ["SpeakerEmbedder"]
__version__ = "0.1.0"
