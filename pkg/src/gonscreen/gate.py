"""Exclusion gating: image quality grade and optic disc completeness.

Any callable ``image -> grade`` can act as the quality scorer; grades live on
the 1.0-10.0 lattice with 0.5 steps. :class:`HeuristicQualityScorer` is a
reference scorer built from Laplacian sharpness and RMS contrast, with min-max
bounds fitted on the synthetic corpus (see :func:`calibrate_quality`).
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve

from . import imaging

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 5.0
WORK_SIDE = 256
_LAPLACE = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
_LUMA = np.array([0.299, 0.587, 0.114])


def to_grade(value):
    """Round onto the 0.5 lattice and clip to [1, 10]."""
    g = math.floor(2.0 * float(value) + 0.5) / 2.0
    return min(10.0, max(1.0, g))


def is_grade(value):
    return 1.0 <= value <= 10.0 and float(2 * value).is_integer()


@dataclass(frozen=True)
class GateResult:
    image_id: str
    quality: float
    od_complete: bool
    passed: bool

    @property
    def reason(self):
        """Exclusion reason, MissingOD taking precedence over LowQuality."""
        if self.passed:
            return None
        return "MissingOD" if not self.od_complete else "LowQuality"


@dataclass(frozen=True)
class QualityCalibration:
    log_lap_min: float
    log_lap_max: float
    contrast_min: float
    contrast_max: float


# calibrate_quality over all generate_benchmark(seed=0) images, blurred ones included
DEFAULT_CALIBRATION = QualityCalibration(-4.97, -2.04, 0.0, 0.222)


def _content_span(n, s):
    """Working-copy indices whose bilinear taps fall inside the unpadded content."""
    lo = (s - n) // 2
    i0, i1, _ = imaging._axis_taps(s, WORK_SIDE)
    inside = np.flatnonzero((i0 >= lo) & (i1 <= lo + n - 1))
    return (inside[0], inside[-1] + 1) if inside.size else (0, 1)


def _working_gray(img):
    """Grayscale 256x256 working copy, cropped back to the original (unpadded) content."""
    h, w = np.asarray(img).shape[:2]
    s = max(h, w)
    sq = imaging.resize_bilinear(imaging.pad_to_square(img), WORK_SIDE)
    g = sq.astype(np.float64) @ _LUMA / 255.0
    r0, r1 = _content_span(h, s)
    c0, c1 = _content_span(w, s)
    return g[r0:r1, c0:c1]


def quality_features(img):
    """(log10 variance of the 3x3 Laplacian, RMS contrast) on the content of a 256x256 grayscale copy."""
    g = _working_gray(img)
    lap = convolve(g, _LAPLACE, mode="reflect")
    var = float(lap.var())
    log_lap = math.log10(var) if var > 0 else -math.inf
    return log_lap, float(g.std())


def calibrate_quality(images):
    """Min-max bounds over a corpus; a constant image is always added as the contrast floor."""
    feats = np.array([quality_features(im) for im in images])
    finite = feats[np.isfinite(feats[:, 0])]
    return QualityCalibration(
        float(finite[:, 0].min()), float(finite[:, 0].max()),
        0.0, float(feats[:, 1].max()),
    )


def _unit(x, lo, hi):
    if not math.isfinite(x):
        return 0.0
    if hi <= lo:
        return float(x > lo)
    return min(1.0, max(0.0, (x - lo) / (hi - lo)))


class HeuristicQualityScorer:
    """Grade = 1 + 9 * sqrt(sharpness * contrast), both min-max scaled to [0, 1]."""

    def __init__(self, calibration=DEFAULT_CALIBRATION):
        self.calibration = calibration

    def __call__(self, img):
        c = self.calibration
        log_lap, rms = quality_features(img)
        s = _unit(log_lap, c.log_lap_min, c.log_lap_max)
        k = _unit(rms, c.contrast_min, c.contrast_max)
        return to_grade(1.0 + 9.0 * math.sqrt(s * k))


def score_quality(img, scorer=None):
    return (scorer or HeuristicQualityScorer())(img)


def has_complete_od(mask):
    """True iff the mask has disc pixels and their bounding box stays off every border."""
    m = np.asarray(mask)
    disc = m >= 1
    rows = np.flatnonzero(disc.any(axis=1))
    if rows.size == 0:
        return False
    cols = np.flatnonzero(disc.any(axis=0))
    h, w = m.shape
    return bool(rows[0] > 0 and cols[0] > 0 and rows[-1] < h - 1 and cols[-1] < w - 1)


def gate_one(image_id, quality, od_complete, threshold=DEFAULT_THRESHOLD):
    return GateResult(image_id, float(quality), bool(od_complete),
                      bool(quality >= threshold and od_complete))


def run_gate(records, threshold=DEFAULT_THRESHOLD, scorer=None, load_image=None, load_mask=None,
             check_od=True):
    """Gate every record.

    ``load_image(record)`` and ``load_mask(record)`` default to reading
    ``record.image_path`` / ``record.mask_path``; ``load_mask`` may return None
    for a record without a mask, which marks the OD as incomplete.

    Returns
    -------
    results : dict image_id -> GateResult
    counts : dict with ``passed``, ``LowQuality`` and ``MissingOD`` totals
    """
    if not is_grade(threshold):
        raise ValueError(f"threshold {threshold} is not on the 0.5 grade lattice")
    scorer = scorer or HeuristicQualityScorer()
    load_image = load_image or (lambda r: imaging.read_image(r.image_path))
    load_mask = load_mask or (lambda r: imaging.read_mask(r.mask_path) if r.mask_path else None)
    results = {}
    counts = {"passed": 0, "LowQuality": 0, "MissingOD": 0}
    for rec in records:
        q = scorer(load_image(rec))
        od = True
        if check_od:
            mask = load_mask(rec)
            if mask is None:
                log.info("%s: no mask available, treating OD as incomplete", rec.image_id)
                od = False
            else:
                od = has_complete_od(mask)
        res = gate_one(rec.image_id, q, od, threshold)
        results[rec.image_id] = res
        counts[res.reason or "passed"] += 1
    return results, counts


def write_gate_csv(path, results):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["image_id", "quality", "od_complete", "passed"])
        for r in results.values():
            w.writerow([r.image_id, f"{r.quality:.1f}", int(r.od_complete), int(r.passed)])


def read_gate_csv(path):
    out = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out[row["image_id"]] = GateResult(row["image_id"], float(row["quality"]),
                                              row["od_complete"] == "1", row["passed"] == "1")
    return out
