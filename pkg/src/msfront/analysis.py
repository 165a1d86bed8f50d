"""Spectral centroids of learned filters and CSV exports for plotting."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .audio import SAMPLE_RATE

DFT_SIZE = 1024


class UndefinedCentroidError(ValueError):
    pass


@dataclass
class SpectralSummary:
    bank_name: str
    centroids: np.ndarray  # Hz, ascending
    bank_mean: float

    @property
    def n_filters(self) -> int:
        return self.centroids.size


def spectral_centroid(taps, dft_size: int = DFT_SIZE) -> float:
    """Magnitude-weighted mean frequency of the zero-padded DFT over bins 0..N/2."""
    h = np.asarray(taps, dtype=np.float64).reshape(-1)
    if not 1 <= h.size <= dft_size:
        raise ValueError(f"filter has {h.size} taps; need 1..{dft_size}")
    peak = np.abs(h).max()
    if peak == 0.0:
        raise UndefinedCentroidError("centroid of an all-zero filter is undefined")
    # dividing by the peak first makes the result depend on tap ratios only
    mag = np.abs(np.fft.rfft(h / peak, n=dft_size))
    total = mag.sum()
    freqs = np.arange(mag.size) * (SAMPLE_RATE / dft_size)
    return float(freqs @ mag / total)


def summarize_bank(filters, bank_name: str, dft_size: int = DFT_SIZE) -> SpectralSummary:
    """``filters`` is ``[n_filters, taps]`` or a front-end weight ``[taps, 1, n_filters]``."""
    bank = _as_rows(filters)
    if bank.shape[0] < 1:
        raise ValueError("bank has no filters")
    centroids = np.sort([spectral_centroid(f, dft_size) for f in bank])
    return SpectralSummary(bank_name, centroids, float(np.mean(centroids)))


def _as_rows(filters) -> np.ndarray:
    arr = np.asarray(getattr(filters, "data", filters), dtype=np.float64)
    if arr.ndim == 3:
        return arr[:, 0, :].T
    return np.atleast_2d(arr)


def summarize_frontend(frontend) -> list[SpectralSummary]:
    return [summarize_bank(f, s.name) for s, f in zip(frontend.scales, frontend.filters) if f is not None]


def export_filters(frontend, path: Union[str, Path]) -> Path:
    """One row per filter: ``bank,filter_index,tap_0..tap_{K-1}`` (K = longest bank)."""
    banks = [(s, _as_rows(f)) for s, f in zip(frontend.scales, frontend.filters) if f is not None]
    width = max(b.shape[1] for _, b in banks)
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bank", "filter_index"] + [f"tap_{k}" for k in range(width)])
            for s, bank in banks:
                for i, taps in enumerate(bank):
                    w.writerow([s.name, i] + [repr(float(t)) for t in taps] + [""] * (width - taps.size))
    except OSError as exc:
        raise OSError(f"cannot write filter export {path}: {exc.strerror}") from exc
    return path


def read_filters(path: Union[str, Path]) -> dict[str, np.ndarray]:
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for rec in reader:
            taps = [float(x) for x in rec[2:] if x != ""]
            rows.setdefault(rec[0], []).append(taps)
    return {k: np.array(v) for k, v in rows.items()}


def export_centroids(summaries: Sequence[SpectralSummary], path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bank", "filter_index_sorted", "centroid_hz"])
            for s in summaries:
                for i, c in enumerate(s.centroids):
                    w.writerow([s.bank_name, i, repr(float(c))])
                w.writerow([s.bank_name, "MEAN", repr(s.bank_mean)])
    except OSError as exc:
        raise OSError(f"cannot write centroid export {path}: {exc.strerror}") from exc
    return path
