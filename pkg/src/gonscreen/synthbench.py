"""Synthetic multi-domain fundus-like corpora with masks, labels and manifests.

Each image shows a circular fundus field with low-frequency texture and dark
vessel strokes, an elliptical optic disc and a concentric cup whose axes are
``cdr`` times the disc axes. Two label cues are planted:

* the cup-to-disc ratio itself, drawn per class from overlapping normals;
* rim pallor: positive eyes get a paler neuroretinal rim.

Domains differ in tint, brightness, resolution, field-of-view size and in an
acquisition marker (a bright square near the field edge) whose association
with the label is set per domain by ``shortcut_corr``. A model that leans on
the marker in one domain is penalized wherever the association differs.

Texture and vessels are cosmetic. Images are rendered lazily from per-image
seeds derived from (corpus seed, domain, index), so the corpus object itself
is small and rendering is deterministic.
"""
from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import biometrics, imaging
from .registry import (DEFAULT_CODE_MAP, DiagnosisEvent, DomainDescriptor, ImageRecord,
                       categorize_code, event_to_row, record_to_row)
from .seeding import derive_seed

CDR_CLIP = (0.05, 0.98)
_BASE = np.array([0.78, 0.36, 0.16])
_RIM = np.array([0.90, 0.58, 0.32])
_CUP = np.array([0.97, 0.86, 0.66])
_PALLOR = np.array([0.07, 0.11, 0.13])
_NEG_CODES = ("cataract", "routine_exam", "refraction", "amd", "diabetic_retinopathy")
_POS_CODES = ("glaucoma_poag", "glaucoma_ntg", "glaucoma_pacg", "glaucoma_surgery")


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    n_images: int = 300
    prevalence: float = 0.5
    cdr_mean_neg: float = 0.47
    cdr_mean_pos: float = 0.60
    cdr_sd: float = 0.08
    tint: tuple = (1.0, 1.0, 1.0)
    brightness: float = 1.0
    resolution: tuple = (240, 240)  # (width, height)
    fov_circle_frac: float = 0.95
    blur_frac: float = 0.0
    missing_od_frac: float = 0.0
    pallor: float = 0.8
    shortcut_corr: float = 0.0
    child_frac: float = 0.0
    suspect_frac: float = 0.0
    camera: str = ""
    fov_degrees: float | None = None

    def __post_init__(self):
        if not 0 < self.cdr_mean_neg < self.cdr_mean_pos < 1:
            raise ValueError("need 0 < cdr_mean_neg < cdr_mean_pos < 1")
        for name in ("prevalence", "fov_circle_frac", "blur_frac", "missing_od_frac",
                     "child_frac", "suspect_frac"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if not -1.0 <= self.shortcut_corr <= 1.0:
            raise ValueError("shortcut_corr must be in [-1, 1]")
        if self.n_images < 1:
            raise ValueError("n_images must be positive")

    def descriptor(self):
        return DomainDescriptor(self.domain_id, self.domain_id, self.camera, self.fov_degrees)


@dataclass(frozen=True)
class Sample:
    """Ground truth and render parameters for one synthetic image."""

    index: int
    image_id: str
    patient_id: str
    eye: str
    label: int
    cdr: float
    disc_center: tuple  # (row, col), integers
    disc_axes: tuple  # (vertical, horizontal) semi-axes
    blurred: bool
    missing_od: bool
    marker: bool
    suspect: bool
    age_years: int
    sex: str
    acquired_at: dt.date


@dataclass
class SyntheticCorpus:
    spec: DomainSpec
    seed: int
    samples: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def _image_seed(self, s):
        return derive_seed(self.seed, "render", self.spec.domain_id, s.index)

    def mask(self, i):
        """0/1/2 mask for sample ``i``; None for an image without an optic disc."""
        s = self.samples[i]
        if s.missing_od:
            return None
        w, h = self.spec.resolution
        b, a = s.disc_axes
        return biometrics.ellipse_mask((h, w), s.disc_center, (b, a), (s.cdr * b, s.cdr * a))

    def image(self, i):
        return render(self.spec, self.samples[i], self._image_seed(self.samples[i]))

    def render(self, i):
        return self.image(i), self.mask(i)

    def records(self, root=None):
        out = []
        for s in self.samples:
            img = f"images/{s.image_id}.png"
            msk = None if s.missing_od else f"masks/{s.image_id}.png"
            if root is not None:
                img = str(Path(root) / img)
                msk = None if msk is None else str(Path(root) / msk)
            out.append(ImageRecord(s.image_id, s.patient_id, s.eye, s.acquired_at, self.spec.domain_id,
                                   img, msk, s.age_years, s.sex))
        return out

    def manifest_rows(self):
        return [record_to_row(r) for r in self.records()]

    def by_id(self):
        return {s.image_id: i for i, s in enumerate(self.samples)}

    def ground_truth(self):
        return [{"image_id": s.image_id, "domain": self.spec.domain_id, "label": s.label,
                 "true_cdr": round(s.cdr, 6), "blurred": int(s.blurred), "missing_od": int(s.missing_od),
                 "marker": int(s.marker)} for s in self.samples]


def _exact_flags(rng, n, frac):
    k = int(round(frac * n))
    flags = np.zeros(n, dtype=bool)
    flags[rng.permutation(n)[:k]] = True
    return flags


def generate_domain(spec, seed=0):
    """Sample the ground truth for one domain (images are rendered on demand)."""
    rng = np.random.default_rng(derive_seed(seed, "domain", spec.domain_id))
    w, h = spec.resolution
    r = spec.fov_circle_frac * min(w, h) / 2.0
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0

    # patients get one or two eyes; images are indexed in patient order
    eyes = []
    p = 0
    while len(eyes) < spec.n_images:
        pid = f"{spec.domain_id}-P{p:05d}"
        both = rng.random() < 0.5 and len(eyes) + 2 <= spec.n_images
        for eye in (("L", "R") if both else (("L", "R")[int(rng.integers(2))],)):
            eyes.append((pid, eye))
        p += 1
    n = len(eyes)
    labels = _exact_flags(rng, n, spec.prevalence).astype(int)
    blurred = _exact_flags(rng, n, spec.blur_frac)
    missing = _exact_flags(rng, n, spec.missing_od_frac)
    suspect = _exact_flags(rng, n, spec.suspect_frac) & (labels == 0)

    patients = sorted({pid for pid, _ in eyes})
    child = set(np.array(patients)[_exact_flags(rng, len(patients), spec.child_frac)])
    demo = {}
    for pid in patients:
        age = int(rng.integers(5, 18)) if pid in child else int(rng.integers(18, 91))
        demo[pid] = (age, "MF"[int(rng.integers(2))])

    samples, events = [], []
    base_day = dt.date(2012, 1, 1).toordinal()
    for i, (pid, eye) in enumerate(eyes):
        y = int(labels[i])
        cdr = float(np.clip(rng.normal(spec.cdr_mean_pos if y else spec.cdr_mean_neg, spec.cdr_sd), *CDR_CLIP))
        side = 1.0 if eye == "R" else -1.0
        dcy = int(round(cy + rng.uniform(-0.05, 0.05) * r))
        dcx = int(round(cx + side * rng.uniform(0.38, 0.46) * r))
        b = r * rng.uniform(0.14, 0.17)
        a = b * rng.uniform(0.88, 0.98)
        p_marker = 0.5 + (spec.shortcut_corr / 2.0) * (1 if y else -1)
        marker = bool(rng.random() < p_marker)
        acquired = dt.date.fromordinal(base_day + int(rng.integers(0, 8 * 365)))
        age, sex = demo[pid]
        samples.append(Sample(i, f"{spec.domain_id}-{i:05d}", pid, eye, y, cdr, (dcy, dcx), (b, a),
                              bool(blurred[i]), bool(missing[i]), marker, bool(suspect[i]), age, sex, acquired))
        lag = dt.timedelta(days=int(rng.integers(30, 1500)))
        if y:
            code = _POS_CODES[int(rng.integers(len(_POS_CODES)))]
            events.append(DiagnosisEvent(pid, eye, acquired - lag, code, categorize_code(code, DEFAULT_CODE_MAP)))
        elif suspect[i]:
            events.append(DiagnosisEvent(pid, eye, acquired - lag, "glaucoma_suspect", "SuspectOrOHT"))
        else:
            code = _NEG_CODES[int(rng.integers(len(_NEG_CODES)))]
            events.append(DiagnosisEvent(pid, eye, acquired + lag * int(rng.choice([-1, 1])), code, "GonNegative"))
    return SyntheticCorpus(spec, int(seed), samples, events)


def _interp_matrix(n, cells):
    """Linear interpolation weights from a (cells + 1)-knot lattice onto n samples."""
    pos = np.linspace(0.0, cells, n)
    lo = np.minimum(np.floor(pos).astype(int), cells - 1)
    t = pos - lo
    m = np.zeros((n, cells + 1))
    m[np.arange(n), lo] = 1.0 - t
    m[np.arange(n), lo + 1] = t
    return m


def _value_noise(rng, shape, cells):
    h, w = shape
    grid = rng.random((cells + 1, cells + 1))
    return _interp_matrix(h, cells) @ grid @ _interp_matrix(w, cells).T


def _draw_vessels(rng, shade, center, r, fov):
    h, w = shade.shape
    rr, cc = np.mgrid[0:h, 0:w]
    for k in range(int(rng.integers(4, 7))):
        theta = rng.uniform(0, 2 * math.pi)
        bend = rng.uniform(-1.2, 1.2)
        width = rng.uniform(0.012, 0.022) * r
        t = np.linspace(0.0, 1.0, 90)
        ang = theta + bend * t
        py = center[0] + np.sin(ang) * t * 1.1 * r
        px = center[1] + np.cos(ang) * t * 1.1 * r
        for y0, x0 in zip(py, px):
            y_lo, y_hi = int(max(0, y0 - width - 1)), int(min(h, y0 + width + 2))
            x_lo, x_hi = int(max(0, x0 - width - 1)), int(min(w, x0 + width + 2))
            if y_lo >= y_hi or x_lo >= x_hi:
                continue
            sub = (rr[y_lo:y_hi, x_lo:x_hi] - y0) ** 2 + (cc[y_lo:y_hi, x_lo:x_hi] - x0) ** 2 <= width**2
            shade[y_lo:y_hi, x_lo:x_hi][sub] = 0.72
    shade[~fov] = 1.0


def render(spec, s, seed):
    """Render one sample to an RGB ``uint8`` image."""
    rng = np.random.default_rng(seed)
    w, h = spec.resolution
    r = spec.fov_circle_frac * min(w, h) / 2.0
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.mgrid[0:h, 0:w]
    dist2 = ((rr - cy) ** 2 + (cc - cx) ** 2) / r**2
    fov = dist2 <= 1.0

    tex = 0.8 + 0.4 * _value_noise(rng, (h, w), 6)
    vignette = 1.0 - 0.35 * dist2
    img = _BASE[None, None, :] * (tex * vignette)[..., None]
    shade = np.ones((h, w))
    _draw_vessels(rng, shade, s.disc_center, r, fov)
    img *= shade[..., None]

    if not s.missing_od:
        m = biometrics.ellipse_mask((h, w), s.disc_center, s.disc_axes,
                                    (s.cdr * s.disc_axes[0], s.cdr * s.disc_axes[1]))
        rim = _RIM + spec.pallor * s.label * _PALLOR + rng.normal(0, 0.02, 3)
        img[m == biometrics.RIM] = rim * (0.95 + 0.1 * tex[m == biometrics.RIM])[:, None]
        img[m == biometrics.CUP] = _CUP + rng.normal(0, 0.02, 3)
        # vessels cross the rim
        img[m == biometrics.RIM] *= shade[m == biometrics.RIM][:, None]

    if s.marker:
        half = 0.06 * r
        my, mx = cy + 0.6 * r, cx - 0.6 * r
        box = (np.abs(rr - my) <= half) & (np.abs(cc - mx) <= half)
        img[box] = 0.92

    img = img * np.asarray(spec.tint)[None, None, :] * spec.brightness
    img += rng.normal(0.0, 0.012, img.shape)
    img[~fov] = 0.0
    if s.blurred:
        sigma = 0.02 * min(w, h)
        img = gaussian_filter(img, sigma=(sigma, sigma, 0), mode="constant")
    return np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)


ANCHOR_ID = "D1"

_BENCHMARK_TEMPLATES = (
    DomainSpec("D1", 3000, 0.70, tint=(1.0, 1.0, 1.0), brightness=1.0, resolution=(240, 240),
               fov_circle_frac=0.95, blur_frac=0.04, missing_od_frac=0.02, shortcut_corr=0.8,
               child_frac=0.02, suspect_frac=0.03, camera="synthetic-A", fov_degrees=30),
    DomainSpec("D2", 650, 0.74, tint=(1.06, 0.94, 0.88), brightness=0.92, resolution=(320, 240),
               fov_circle_frac=0.95, blur_frac=0.05, missing_od_frac=0.03, shortcut_corr=-0.5,
               camera="synthetic-B", fov_degrees=45),
    DomainSpec("D3", 390, 0.18, tint=(0.92, 1.0, 1.08), brightness=1.08, resolution=(300, 226),
               fov_circle_frac=0.9, blur_frac=0.03, missing_od_frac=0.02, shortcut_corr=-0.4,
               camera="synthetic-C", fov_degrees=30),
    DomainSpec("D4", 150, 0.69, tint=(1.1, 0.92, 0.86), brightness=0.96, resolution=(256, 220),
               fov_circle_frac=0.92, shortcut_corr=0.0, camera="synthetic-D", fov_degrees=30),
    DomainSpec("D5", 600, 0.10, tint=(0.96, 1.04, 1.0), brightness=1.04, resolution=(256, 248),
               fov_circle_frac=0.97, shortcut_corr=-0.6, camera="synthetic-E"),
    DomainSpec("D6", 400, 0.20, tint=(1.0, 0.92, 1.06), brightness=1.0, resolution=(248, 248),
               fov_circle_frac=0.93, shortcut_corr=0.0, camera="synthetic-F", fov_degrees=45),
    DomainSpec("D7", 300, 0.50, tint=(0.94, 0.98, 1.1), brightness=0.94, resolution=(240, 300),
               fov_circle_frac=0.9, shortcut_corr=-0.3, camera="synthetic-G", fov_degrees=45),
)


def benchmark_specs(n_domains=7, seed=0, scale=1.0):
    if n_domains < 2:
        raise ValueError("a benchmark needs at least two domains")
    specs = list(_BENCHMARK_TEMPLATES[:n_domains])
    rng = np.random.default_rng(derive_seed(seed, "benchmark-extra"))
    for k in range(len(specs), n_domains):
        specs.append(replace(
            _BENCHMARK_TEMPLATES[1 + k % 6], domain_id=f"D{k + 1}",
            prevalence=float(np.round(rng.uniform(0.10, 0.74), 2)),
            tint=tuple(float(np.round(t, 2)) for t in rng.uniform(0.88, 1.12, 3)),
            shortcut_corr=float(np.round(rng.uniform(-0.6, 0.0), 2)),
        ))
    if scale != 1.0:
        specs = [replace(s, n_images=max(20, int(round(s.n_images * scale)))) for s in specs]
    return specs


def generate_benchmark(n_domains=7, seed=0, scale=1.0):
    """Anchor domain (large, high prevalence) plus smaller shifted domains."""
    return [generate_domain(spec, seed) for spec in benchmark_specs(n_domains, seed, scale)]


def write_corpus(corpus, root):
    root = Path(root)
    for i, s in enumerate(corpus.samples):
        img, mask = corpus.render(i)
        imaging.write_png(root / "images" / f"{s.image_id}.png", img)
        if mask is not None:
            imaging.write_png(root / "masks" / f"{s.image_id}.png", mask)


def _write_jsonl(path, rows):
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def write_benchmark(corpora, root):
    """Write images, masks, per-domain and combined manifests, diagnoses, code map and ground truth."""
    root = Path(root)
    (root / "manifests").mkdir(parents=True, exist_ok=True)
    manifest, diagnoses, truth, domains = [], [], [], []
    for c in corpora:
        write_corpus(c, root)
        rows = c.manifest_rows()
        _write_jsonl(root / "manifests" / f"{c.spec.domain_id}.jsonl", rows)
        manifest.extend(rows)
        diagnoses.extend(event_to_row(e) for e in c.events)
        truth.extend(c.ground_truth())
        domains.append(asdict(c.spec))
    _write_jsonl(root / "manifest.jsonl", manifest)
    _write_jsonl(root / "diagnoses.jsonl", diagnoses)
    with open(root / "code_map.json", "w") as f:
        json.dump(DEFAULT_CODE_MAP, f, indent=2, sort_keys=True)
    with open(root / "domains.json", "w") as f:
        json.dump(domains, f, indent=2, sort_keys=True)
    with open(root / "ground_truth.csv", "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=list(truth[0]), lineterminator="\n")
        wr.writeheader()
        wr.writerows(truth)
    return root
