"""Optic disc biometrics from 0/1/2-encoded segmentation masks.

Mask encoding: 0 = background, 1 = neuroretinal rim (disc minus cup), 2 = cup.
The disc is every pixel with class >= 1, so the cup can never leave the disc.

RDR is taken as rim area over disc area. This is an area definition; a
width-based variant would only need a different ``rdr`` function.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

BACKGROUND, RIM, CUP = 0, 1, 2


class EmptyDisc(ValueError):
    """The mask has no disc pixels."""


@dataclass(frozen=True)
class Biometrics:
    vcdr: float
    rdr: float


def _row_extent(region):
    rows = np.flatnonzero(region.any(axis=1))
    if rows.size == 0:
        return 0
    return int(rows[-1] - rows[0] + 1)


def _check_mask(mask):
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    if m.size and (m.min() < BACKGROUND or m.max() > CUP):
        raise ValueError("mask values must be 0 (background), 1 (rim) or 2 (cup)")
    return m


def vertical_cdr(mask):
    """Cup row extent over disc row extent; 0.0 when there is no cup."""
    m = _check_mask(mask)
    disc = m >= RIM
    d = _row_extent(disc)
    if d == 0:
        raise EmptyDisc("mask contains no disc pixels")
    return _row_extent(m == CUP) / d


def rdr(mask):
    m = _check_mask(mask)
    disc_area = int(np.count_nonzero(m >= RIM))
    if disc_area == 0:
        raise EmptyDisc("mask contains no disc pixels")
    return int(np.count_nonzero(m == RIM)) / disc_area


def measure(mask):
    return Biometrics(vcdr=vertical_cdr(mask), rdr=rdr(mask))


def merge_masks(disc, cup):
    """Combine separate binary disc/cup masks into the 0/1/2 encoding.

    Cup pixels outside the disc are relabeled as disc (rim) pixels, with a warning.
    """
    disc = np.asarray(disc).astype(bool)
    cup = np.asarray(cup).astype(bool)
    if disc.shape != cup.shape:
        raise ValueError(f"disc and cup masks differ in shape: {disc.shape} vs {cup.shape}")
    stray = int(np.count_nonzero(cup & ~disc))
    if stray:
        log.warning("%d cup pixels outside the disc were reassigned to the disc", stray)
    out = np.zeros(disc.shape, dtype=np.uint8)
    out[disc | cup] = RIM
    out[cup & disc] = CUP
    return out


def cdr_mae(predicted, reference):
    p = np.asarray(predicted, dtype=float).ravel()
    r = np.asarray(reference, dtype=float).ravel()
    if p.size != r.size:
        raise ValueError(f"length mismatch: {p.size} predicted vs {r.size} reference")
    if p.size == 0:
        raise ValueError("need at least one value")
    return float(np.mean(np.abs(p - r)))


def baseline_score(bio, which):
    """Score oriented so that higher means more glaucoma-like.

    ``which`` is ``"CDR"`` (score = vcdr) or ``"RDR"`` (score = 1 - rdr).
    """
    which = which.upper()
    if which == "CDR":
        return float(bio.vcdr)
    if which == "RDR":
        return float(1.0 - bio.rdr)
    raise ValueError(f"unknown baseline {which!r}; expected 'CDR' or 'RDR'")


def ellipse_mask(shape, center, disc_axes, cup_axes=None):
    """Rasterize concentric disc/cup ellipses; pixel (i, j) sits at (row=i, col=j).

    ``center`` is (row, col); axes are (vertical, horizontal) semi-axes in pixels.
    """
    h, w = shape
    rr, cc = np.mgrid[0:h, 0:w]
    cy, cx = center

    def inside(axes):
        b, a = axes
        return ((rr - cy) / b) ** 2 + ((cc - cx) / a) ** 2 <= 1.0

    out = np.zeros(shape, dtype=np.uint8)
    out[inside(disc_axes)] = RIM
    if cup_axes is not None and min(cup_axes) > 0:
        out[inside(cup_axes)] = CUP
    return out
