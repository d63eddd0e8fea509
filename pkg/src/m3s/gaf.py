"""Gramian Angular Summation Field encoding of 1-D spectra."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .spectra import paa, rescale

CLAMP_TOL = 1e-12


@dataclass(frozen=True)
class PolarSequence:
    phi: np.ndarray
    radius: np.ndarray
    span: float


@dataclass(frozen=True)
class GafImage:
    scale: int
    pixels: np.ndarray


def to_polar(norm_seq) -> PolarSequence:
    """Angles ``arccos(x)`` and radii ``t/B`` with 1-based ``t`` and ``B = len``.

    Values that overshoot [-1, 1] by at most ``CLAMP_TOL`` are clamped.
    """
    x = np.asarray(norm_seq, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise DomainError("expected a non-empty 1-D sequence")
    if not np.all(np.isfinite(x)) or np.any(np.abs(x) > 1.0 + CLAMP_TOL):
        raise DomainError("values must lie within [-1, 1]")
    x = np.clip(x, -1.0, 1.0)
    span = float(x.size)
    return PolarSequence(np.arccos(x), np.arange(1, x.size + 1) / span, span)


def gasf(polar: PolarSequence) -> GafImage:
    phi = polar.phi
    return GafImage(phi.size, np.cos(phi[:, None] + phi[None, :]))


def encode(spec, scale: int) -> GafImage:
    """rescale -> PAA(scale) -> polar -> GASF for one spectrum (or raw array)."""
    values = getattr(spec, "values", spec)
    return gasf(to_polar(paa(rescale(values), scale)))


def _threads():
    try:
        return max(1, int(os.environ.get("M3S_THREADS", "1")))
    except ValueError:
        return 1


def encode_many(spectra, scale: int, threads: int | None = None) -> np.ndarray:
    """Stack GASF images of every spectrum into an ``(N, scale, scale)`` array.

    ``threads`` defaults to the ``M3S_THREADS`` environment variable (1).
    """
    spectra = list(spectra)
    threads = threads or _threads()
    job = lambda s: encode(s, scale).pixels
    if threads > 1 and len(spectra) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            images = list(pool.map(job, spectra))
    else:
        images = [job(s) for s in spectra]
    return np.stack(images)


def to_gray(image: GafImage) -> np.ndarray:
    """Affine map [-1, 1] -> [0, 255] as uint8, for visual inspection only."""
    return np.round((np.clip(image.pixels, -1, 1) + 1.0) * 127.5).astype(np.uint8)


def write_pgm(image: GafImage, path):
    """Write a binary (P5) portable graymap."""
    gray = to_gray(image)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())
