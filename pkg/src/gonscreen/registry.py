"""Dataset registry: manifest ingestion, per-eye GON labeling, exclusions and partitions.

Labeling works per (patient, eye). Once an eye has a GON-positive diagnosis,
that image and every later one is positive, and earlier images are excluded
because the disease may already have been present. Suspect/OHT eyes are
excluded. Eyes with only unrelated diagnoses are negative.
"""
from __future__ import annotations

import datetime as dt
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .seeding import derive_seed

log = logging.getLogger(__name__)

EYES = ("L", "R")
SPLITS = ("Train", "Val", "Test")

GON_POSITIVE = "GonPositive"
GON_NEGATIVE = "GonNegative"
SUSPECT_OHT = "SuspectOrOHT"
UNKNOWN = "Unknown"
CATEGORY_CODES = {"pos": GON_POSITIVE, "neg": GON_NEGATIVE, "suspect_oht": SUSPECT_OHT, "unknown": UNKNOWN}

# first applicable reason wins
EXCLUSION_ORDER = (
    "Child",
    "Suspect",
    "OcularHypertension",
    "PreDiagnosis",
    "UnknownCode",
    "NoDiagnosis",
    "MissingOD",
    "LowQuality",
)

DEFAULT_CODE_MAP = {
    "glaucoma_poag": "pos",
    "glaucoma_ntg": "pos",
    "glaucoma_pacg": "pos",
    "glaucoma_surgery": "pos",
    "trabeculectomy": "pos",
    "glaucoma_suspect": "suspect_oht",
    "ocular_hypertension": "suspect_oht",
    "cataract": "neg",
    "routine_exam": "neg",
    "refraction": "neg",
    "amd": "neg",
    "diabetic_retinopathy": "neg",
    "optic_disc_drusen": "unknown",
    "other": "unknown",
}


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class GonLabel:
    kind: str  # "Positive" | "Negative" | "Excluded"
    reason: str | None = None

    def __post_init__(self):
        if self.kind not in ("Positive", "Negative", "Excluded"):
            raise ValueError(f"bad label kind {self.kind!r}")
        if (self.kind == "Excluded") != (self.reason is not None):
            raise ValueError("Excluded labels carry exactly one reason; others carry none")
        if self.reason is not None and self.reason not in EXCLUSION_ORDER:
            raise ValueError(f"unknown exclusion reason {self.reason!r}")

    @property
    def eligible(self):
        return self.kind != "Excluded"

    def __str__(self):
        return self.kind if self.reason is None else f"Excluded({self.reason})"


POSITIVE = GonLabel("Positive")
NEGATIVE = GonLabel("Negative")


def excluded(reason):
    return GonLabel("Excluded", reason)


@dataclass(frozen=True)
class DomainDescriptor:
    domain_id: str
    display_name: str = ""
    camera: str = ""
    fov_degrees: float | None = None


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    patient_id: str
    eye: str
    acquired_at: dt.date
    domain_id: str
    image_path: str
    mask_path: str | None = None
    age_years: int | None = None
    sex: str | None = None
    label_state: GonLabel | None = None

    @property
    def label(self):
        """1 for Positive, 0 for Negative, None otherwise."""
        if self.label_state is None or not self.label_state.eligible:
            return None
        return int(self.label_state.kind == "Positive")


@dataclass(frozen=True)
class DiagnosisEvent:
    patient_id: str
    laterality: str  # "L" | "R" | "B"
    occurred_at: dt.date
    code: str
    category: str


def _require(obj, key, line, types=str, optional=False):
    if key not in obj or obj[key] is None:
        if optional:
            return None
        raise ManifestError(f"missing {key} at line {line}")
    val = obj[key]
    if not isinstance(val, types) or isinstance(val, bool) or (isinstance(val, str) and not val):
        raise ManifestError(f"invalid {key} at line {line}")
    return val


def _date(obj, key, line):
    raw = _require(obj, key, line)
    try:
        return dt.date.fromisoformat(raw)
    except ValueError:
        raise ManifestError(f"invalid {key} at line {line}") from None


def record_from_row(obj, line=0, base_dir=None):
    if not isinstance(obj, dict):
        raise ManifestError(f"line {line} is not a JSON object")
    eye = _require(obj, "eye", line)
    if eye not in EYES:
        raise ManifestError(f"invalid eye at line {line}")
    age = _require(obj, "age_years", line, int, optional=True)
    if age is not None and age < 0:
        raise ManifestError(f"invalid age_years at line {line}")
    sex = _require(obj, "sex", line, optional=True)
    if sex is not None and sex not in ("M", "F"):
        raise ManifestError(f"invalid sex at line {line}")

    def path(key, optional=False):
        p = _require(obj, key, line, optional=optional)
        if p is None or base_dir is None:
            return p
        return str(Path(base_dir) / p)

    return ImageRecord(
        image_id=_require(obj, "image_id", line),
        patient_id=_require(obj, "patient_id", line),
        eye=eye,
        acquired_at=_date(obj, "acquired_at", line),
        domain_id=_require(obj, "domain", line),
        image_path=path("image_path"),
        mask_path=path("mask_path", optional=True),
        age_years=age,
        sex=sex,
    )


def record_to_row(rec, base_dir=None):
    def rel(p):
        if p is None or base_dir is None:
            return p
        return str(Path(p).relative_to(base_dir))

    row = {
        "image_id": rec.image_id,
        "patient_id": rec.patient_id,
        "eye": rec.eye,
        "acquired_at": rec.acquired_at.isoformat(),
        "domain": rec.domain_id,
        "image_path": rel(rec.image_path),
    }
    if rec.mask_path is not None:
        row["mask_path"] = rel(rec.mask_path)
    if rec.age_years is not None:
        row["age_years"] = rec.age_years
    if rec.sex is not None:
        row["sex"] = rec.sex
    return row


def _read_jsonl(path):
    with open(path) as f:
        for line_no, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            try:
                yield line_no, json.loads(raw)
            except json.JSONDecodeError as e:
                raise ManifestError(f"malformed JSON at line {line_no}: {e.msg}") from None


def records_from_rows(rows, base_dir=None):
    records, seen = [], {}
    for line_no, obj in rows:
        rec = record_from_row(obj, line_no, base_dir)
        if rec.image_id in seen:
            raise ManifestError(
                f"duplicate image_id {rec.image_id!r} at lines {seen[rec.image_id]} and {line_no}")
        seen[rec.image_id] = line_no
        records.append(rec)
    return records


def ingest_manifest(path):
    """Read an image manifest (JSON-Lines); relative paths resolve against its directory."""
    path = Path(path)
    return records_from_rows(_read_jsonl(path), base_dir=path.parent)


def load_code_map(path=None):
    if path is None:
        return dict(DEFAULT_CODE_MAP)
    with open(path) as f:
        cmap = json.load(f)
    bad = {k: v for k, v in cmap.items() if v not in CATEGORY_CODES}
    if bad:
        raise ManifestError(f"code map has invalid categories: {bad}")
    return cmap


def categorize_code(code, code_map):
    return CATEGORY_CODES.get(code_map.get(code, "unknown"), UNKNOWN)


def event_from_row(obj, code_map, line=0):
    lat = _require(obj, "laterality", line)
    if lat not in ("L", "R", "B"):
        raise ManifestError(f"invalid laterality at line {line}")
    code = _require(obj, "code", line)
    return DiagnosisEvent(
        patient_id=_require(obj, "patient_id", line),
        laterality=lat,
        occurred_at=_date(obj, "occurred_at", line),
        code=code,
        category=categorize_code(code, code_map),
    )


def ingest_diagnoses(path, code_map=None):
    code_map = DEFAULT_CODE_MAP if code_map is None else code_map
    return [event_from_row(obj, code_map, line) for line, obj in _read_jsonl(path)]


def event_to_row(ev):
    return {"patient_id": ev.patient_id, "laterality": ev.laterality,
            "occurred_at": ev.occurred_at.isoformat(), "code": ev.code}


def _suspect_reason(code):
    c = code.lower()
    return "OcularHypertension" if ("hypertens" in c or "oht" in c) else "Suspect"


def derive_eye_labels(records, events):
    """Set ``label_state`` on every record from the per-eye diagnosis history."""
    by_eye = defaultdict(list)
    for ev in events:
        eyes = EYES if ev.laterality == "B" else (ev.laterality,)
        for eye in eyes:
            by_eye[(ev.patient_id, eye)].append(ev)

    out = []
    for rec in records:
        evs = sorted(by_eye.get((rec.patient_id, rec.eye), ()), key=lambda e: (e.occurred_at, e.code))
        cats = {e.category for e in evs}
        if GON_POSITIVE in cats:
            t0 = min(e.occurred_at for e in evs if e.category == GON_POSITIVE)
            label = POSITIVE if rec.acquired_at >= t0 else excluded("PreDiagnosis")
        elif SUSPECT_OHT in cats:
            first = next(e for e in evs if e.category == SUSPECT_OHT)
            label = excluded(_suspect_reason(first.code))
        elif GON_NEGATIVE in cats:
            label = NEGATIVE
        elif UNKNOWN in cats:
            label = excluded("UnknownCode")
        else:
            label = excluded("NoDiagnosis")
        out.append(replace(rec, label_state=label))
    return out


def apply_exclusions(records, min_age=18, gate_results=None):
    """Apply age and gate exclusions on top of the labeling outcome."""
    gate_results = gate_results or {}
    rank = {r: i for i, r in enumerate(EXCLUSION_ORDER)}
    out = []
    for rec in records:
        reasons = []
        if rec.age_years is not None and rec.age_years < min_age:
            reasons.append("Child")
        if rec.label_state is not None and not rec.label_state.eligible:
            reasons.append(rec.label_state.reason)
        g = gate_results.get(rec.image_id)
        if g is not None and not g.passed:
            # the gate already applied its threshold; MissingOD outranks LowQuality
            reasons.append("MissingOD" if not g.od_complete else "LowQuality")
        if reasons:
            out.append(replace(rec, label_state=excluded(min(reasons, key=rank.__getitem__))))
        else:
            out.append(rec)
    return out


def flow_report(records):
    """Counts per exclusion reason; ingested == kept + sum(excluded)."""
    excl = {r: 0 for r in EXCLUSION_ORDER}
    pos = neg = 0
    for rec in records:
        lab = rec.label_state
        if lab is None:
            raise ValueError(f"{rec.image_id} has no label; run derive_eye_labels first")
        if lab.kind == "Positive":
            pos += 1
        elif lab.kind == "Negative":
            neg += 1
        else:
            excl[lab.reason] += 1
    return {
        "ingested": len(records),
        "kept": pos + neg,
        "positive": pos,
        "negative": neg,
        "excluded": excl,
        "excluded_total": sum(excl.values()),
    }


def age_band(age):
    if age is None:
        return "unknown"
    if age < 18:
        return "<18"
    if age >= 80:
        return "80+"
    if age < 30:
        return "18-29"
    lo = (age // 10) * 10
    return f"{lo}-{lo + 9}"


_BAND_ORDER = ["<18", "18-29", "30-39", "40-49", "50-59", "60-69", "70-79", "80+", "unknown"]


def _largest_remainder(n, ratios):
    quotas = [n * r for r in ratios]
    alloc = [math.floor(q + 1e-9) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in order[: n - sum(alloc)]:
        alloc[i] += 1
    return alloc


def _apportion(sizes, targets):
    """Integer matrix with given row sums (sizes) and column sums (targets).

    Each cell is the floor or ceiling of its proportional quota whenever the
    greedy pass finds such a rounding.
    """
    total = sum(sizes)
    if total != sum(targets):
        raise ValueError("row and column totals disagree")
    if total == 0:
        return [[0] * len(targets) for _ in sizes]
    quota = [[s * t / total for t in targets] for s in sizes]
    alloc = [[math.floor(q + 1e-9) for q in row] for row in quota]
    row_rem = [s - sum(a) for s, a in zip(sizes, alloc)]
    col_rem = [t - sum(alloc[r][c] for r in range(len(sizes))) for c, t in enumerate(targets)]
    cells = sorted(
        ((quota[r][c] - alloc[r][c], r, c) for r in range(len(sizes)) for c in range(len(targets))),
        key=lambda x: (-x[0], x[1], x[2]),
    )
    for frac, r, c in cells:
        if frac > 1e-9 and row_rem[r] > 0 and col_rem[c] > 0:
            alloc[r][c] += 1
            row_rem[r] -= 1
            col_rem[c] -= 1
    for r in range(len(sizes)):
        while row_rem[r] > 0:
            c = max((c for c in range(len(targets)) if col_rem[c] > 0), key=lambda c: quota[r][c])
            alloc[r][c] += 1
            row_rem[r] -= 1
            col_rem[c] -= 1
    return alloc


def _check_ratios(ratios):
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios}")


def _merge_small_strata(strata, min_size):
    """Fold (band, sex) strata smaller than ``min_size`` into the nearest age band."""
    strata = dict(strata)
    changed = True
    while changed:
        changed = False
        for key in sorted(strata, key=lambda k: (len(strata[k]), k)):
            if len(strata[key]) >= min_size or len(strata) == 1:
                continue
            band, sex = key
            bi = _BAND_ORDER.index(band)
            candidates = [k for k in strata if k != key and k[1] == sex] or [k for k in strata if k != key]
            target = min(candidates, key=lambda k: (abs(_BAND_ORDER.index(k[0]) - bi), k))
            log.warning("stratum %s has %d patients; merging into %s", key, len(strata[key]), target)
            strata[target] = strata[target] + strata.pop(key)
            changed = True
            break
    return strata


def stratified_split(records, ratios=(0.85, 0.05, 0.10), seed=0):
    """Patient-disjoint train/val/test split stratified by label, age band and sex.

    A patient's label stratum is the composition of their images' labels
    (e.g. one positive and one negative eye). Counts are apportioned top-down
    (all patients, then per composition, then per age-band x sex stratum) so totals and each level stay within rounding of
    the ratios.

    Returns
    -------
    dict image_id -> "Train" | "Val" | "Test"
    """
    _check_ratios(ratios)
    by_patient = defaultdict(list)
    for rec in records:
        if rec.label_state is None or not rec.label_state.eligible:
            raise ValueError(f"{rec.image_id} is excluded or unlabeled; split eligible records only")
        by_patient[rec.patient_id].append(rec)

    strata_by_label = defaultdict(lambda: defaultdict(list))
    for pid in sorted(by_patient):
        recs = sorted(by_patient[pid], key=lambda r: (r.acquired_at, r.image_id))
        # label composition of the patient's images, so mixed-eye patients form their own stratum
        n_pos = sum(r.label for r in recs)
        label = f"{n_pos}+/{len(recs) - n_pos}-"
        first_age = next((r.age_years for r in recs if r.age_years is not None), None)
        sex = next((r.sex for r in recs if r.sex is not None), "U")
        strata_by_label[label][(age_band(first_age), sex)].append(pid)

    n_active = sum(1 for r in ratios if r > 0)
    labels = sorted(strata_by_label)
    label_sizes = [sum(len(v) for v in strata_by_label[lab].values()) for lab in labels]
    root = _largest_remainder(sum(label_sizes), ratios)
    per_label = _apportion(label_sizes, root)

    assignment = {}
    for lab, targets in zip(labels, per_label):
        strata = _merge_small_strata(strata_by_label[lab], n_active)
        keys = sorted(strata)
        counts = _apportion([len(strata[k]) for k in keys], targets)
        for key, row in zip(keys, counts):
            pids = sorted(strata[key])
            rng = np.random.default_rng(derive_seed(seed, "stratified_split", lab, *key))
            pids = [pids[i] for i in rng.permutation(len(pids))]
            bounds = np.cumsum([0] + row)
            for split, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:]):
                for pid in pids[lo:hi]:
                    for rec in by_patient[pid]:
                        assignment[rec.image_id] = split
    return dict(sorted(assignment.items()))


@dataclass(frozen=True)
class DomainPartition:
    target_domain_id: str
    train: tuple
    val: tuple
    target: tuple

    def to_dict(self):
        return {"target_domain_id": self.target_domain_id, "train": list(self.train),
                "val": list(self.val), "target": list(self.target)}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def lodo_partition(records, domains, target_domain_id, val_frac=0.10, seed=0, exclude_ids=(),
                   target_ids=None):
    """Leave-one-domain-out partition.

    Every eligible record of the target domain is reserved as the target;
    each source domain is split 90/10 (label-stratified) into joint train and
    joint validation sets. ``exclude_ids`` keeps records (e.g. a held-out test
    split) out of train and val; with ``target_ids`` the target set is that
    explicit list and the rest of the target domain may act as source.
    """
    domain_ids = sorted({d.domain_id if isinstance(d, DomainDescriptor) else d for d in domains})
    if len(domain_ids) < 2:
        raise ValueError("leave-one-domain-out needs at least two domains")
    if target_domain_id not in domain_ids:
        raise ValueError(f"unknown target domain {target_domain_id!r}")
    exclude = set(exclude_ids)
    eligible = [r for r in records if r.label is not None and r.domain_id in domain_ids]
    if target_ids is None:
        target = sorted(r.image_id for r in eligible if r.domain_id == target_domain_id)
        sources = [r for r in eligible if r.domain_id != target_domain_id and r.image_id not in exclude]
    else:
        target = sorted(target_ids)
        tset = set(target)
        sources = [r for r in eligible if r.image_id not in tset and r.image_id not in exclude]
    if not target:
        raise ValueError(f"target domain {target_domain_id!r} has no eligible records")

    train, val = [], []
    by_domain = defaultdict(lambda: defaultdict(list))
    for r in sources:
        by_domain[r.domain_id][r.label].append(r.image_id)
    for dom in sorted(by_domain):
        labs = sorted(by_domain[dom])
        sizes = [len(by_domain[dom][lab]) for lab in labs]
        targets = _largest_remainder(sum(sizes), (1.0 - val_frac, val_frac))
        for lab, (n_tr, _) in zip(labs, _apportion(sizes, targets)):
            ids = sorted(by_domain[dom][lab])
            rng = np.random.default_rng(derive_seed(seed, "lodo", target_domain_id, dom, lab))
            ids = [ids[i] for i in rng.permutation(len(ids))]
            train.extend(ids[:n_tr])
            val.extend(ids[n_tr:])
    return DomainPartition(target_domain_id, tuple(sorted(train)), tuple(sorted(val)), tuple(target))


@dataclass
class Registry:
    """Labeled records plus domain metadata; read-only once built."""

    records: list
    domains: dict = field(default_factory=dict)
    splits: dict = field(default_factory=dict)  # domain_id -> SplitAssignment

    def __post_init__(self):
        self._by_id = {r.image_id: r for r in self.records}
        for r in self.records:
            self.domains.setdefault(r.domain_id, DomainDescriptor(r.domain_id, r.domain_id))

    def __getitem__(self, image_id):
        return self._by_id[image_id]

    def __len__(self):
        return len(self.records)

    def eligible(self, domain_id=None):
        return [r for r in self.records if r.label is not None
                and (domain_id is None or r.domain_id == domain_id)]

    def labels(self, ids):
        return np.array([self._by_id[i].label for i in ids], dtype=int)

    def flow_report(self):
        return flow_report(self.records)


def build_registry(records, events, gate_results=None, min_age=18, domains=None):
    labeled = derive_eye_labels(records, events)
    labeled = apply_exclusions(labeled, min_age=min_age, gate_results=gate_results)
    return Registry(labeled, dict(domains or {}))


def split_domain(registry, domain_id, ratios=(0.85, 0.05, 0.10), seed=0):
    """Stratified split of one domain, stored on the registry and returned."""
    split = stratified_split(registry.eligible(domain_id), ratios, seed)
    registry.splits[domain_id] = split
    return split
