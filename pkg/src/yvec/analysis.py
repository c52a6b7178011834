"""Learned-filter spectral analysis.

The cumulative frequency response of a filterbank is the sum over filters
of each filter's magnitude response normalized by its own L2 norm, so
every filter contributes unit energy regardless of its scale. Responses
use a 256-point transform reported on the one-sided 129-bin grid
(62.5 Hz per bin at 16 kHz). A flat, broadband cumulative response means
the bank covers the spectrum evenly; per-band statistics quantify that.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import encoder as enc
from .numerics import Tensor

N_DFT = 256
N_BINS = N_DFT // 2 + 1
SAMPLE_RATE = 16000
BIN_HZ = SAMPLE_RATE / N_DFT
DB_FLOOR = -120.0
_LINEAR_FLOOR = 10.0 ** (DB_FLOOR / 20.0)


@dataclass
class CfrResult:
    freqs_hz: np.ndarray
    cfr_linear: np.ndarray
    cfr_db: np.ndarray
    source: str = ""


@dataclass(frozen=True)
class FlatnessStats:
    peak_minus_mean_db: float
    stddev_db: float
    argmax_hz: float


def dft_magnitude_256(filt) -> np.ndarray:
    """|DFT_256| of a filter at bins 0..128; zero-padded, never truncated."""
    filt = np.asarray(filt, dtype=np.float64)
    if filt.ndim != 1 or filt.size < 1:
        raise ValueError("filter must be a nonempty 1-d array")
    if filt.size > N_DFT:
        raise ValueError(f"filter of {filt.size} taps exceeds the {N_DFT}-point transform")
    return np.abs(np.fft.rfft(filt, n=N_DFT))


def cfr(filters: Sequence[np.ndarray] | np.ndarray, source: str = "") -> CfrResult:
    """Sum of per-filter L2-normalized magnitude responses.

    All-zero filters carry no spectral information and are skipped with a
    warning; a bank of only zero filters is an error.
    """
    filters = [np.asarray(f, dtype=np.float64) for f in filters]
    if not filters:
        raise ValueError("empty filter bank")
    total = np.zeros(N_BINS)
    used = 0
    for i, f in enumerate(filters):
        mags = dft_magnitude_256(f)
        norm = np.linalg.norm(mags)
        if norm == 0.0:
            warnings.warn(f"{source or 'cfr'}: skipping all-zero filter {i}", stacklevel=2)
            continue
        total += mags / norm
        used += 1
    if used == 0:
        raise ValueError(f"{source or 'cfr'}: every filter is all-zero")
    db = 20.0 * np.log10(np.maximum(total, _LINEAR_FLOOR))
    return CfrResult(freqs_hz=np.arange(N_BINS) * BIN_HZ, cfr_linear=total,
                     cfr_db=db, source=source)


def flatness_stats(c: CfrResult, band_lo_hz: float = 0.0,
                   band_hi_hz: float = SAMPLE_RATE / 2) -> FlatnessStats:
    """Peak-over-mean, spread, and peak location of cfr_db inside a band."""
    if not 0.0 <= band_lo_hz <= band_hi_hz <= SAMPLE_RATE / 2:
        raise ValueError(f"band [{band_lo_hz}, {band_hi_hz}] outside [0, {SAMPLE_RATE / 2}]")
    mask = (c.freqs_hz >= band_lo_hz) & (c.freqs_hz <= band_hi_hz)
    if not mask.any():
        raise ValueError(f"band [{band_lo_hz}, {band_hi_hz}] contains no bins")
    vals = c.cfr_db[mask]
    freqs = c.freqs_hz[mask]
    return FlatnessStats(peak_minus_mean_db=float(vals.max() - vals.mean()),
                         stddev_db=float(vals.std()),
                         argmax_hz=float(freqs[int(np.argmax(vals))]))


# ---------------------------------------------------------------------------
# encoder integration


def encoder_cfrs(cfg: enc.EncoderConfig, params: dict[str, Tensor]) -> list[CfrResult]:
    """Per-branch CFRs of the primary filtering kernels plus the pooled bank."""
    results = []
    pooled: list[np.ndarray] = []
    for i in range(len(cfg.branches)):
        kernels = enc.branch_filter_kernels(params, i)
        results.append(cfr(list(kernels), source=f"branch{i}"))
        pooled.extend(list(kernels))
    results.append(cfr(pooled, source="pooled"))
    return results


def save_cfr_csv(path, results: Sequence[CfrResult]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["freq_hz", "cfr_linear", "cfr_db", "source"])
        for r in results:
            for f, lin, db in zip(r.freqs_hz, r.cfr_linear, r.cfr_db):
                writer.writerow([f"{f:.1f}", f"{lin:.9e}", f"{db:.6f}", r.source])


def flatness_report(results: Sequence[CfrResult], band_lo_hz: float = 0.0,
                    band_hi_hz: float = SAMPLE_RATE / 2) -> dict:
    report = {}
    for r in results:
        stats = flatness_stats(r, band_lo_hz, band_hi_hz)
        report[r.source] = {"peak_minus_mean_db": stats.peak_minus_mean_db,
                            "stddev_db": stats.stddev_db,
                            "argmax_hz": stats.argmax_hz}
    return report


def save_flatness_json(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
