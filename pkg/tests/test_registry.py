import datetime as dt
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gonscreen import gate, registry as reg, synthbench

D = dt.date


def rec(image_id, patient="p1", eye="L", when=D(2016, 1, 1), domain="D1", age=50, sex="F"):
    return reg.ImageRecord(image_id, patient, eye, when, domain, f"{image_id}.png", None, age, sex)


def ev(patient, lat, when, code, cmap=reg.DEFAULT_CODE_MAP):
    return reg.DiagnosisEvent(patient, lat, when, code, reg.categorize_code(code, cmap))


def labeled(rid, label, patient=None, domain="D1", age=50, sex="F"):
    state = reg.POSITIVE if label else reg.NEGATIVE
    return reg.ImageRecord(rid, patient or rid, "L", D(2016, 1, 1), domain, "x.png", None, age, sex, state)


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


ROW = {"image_id": "a", "patient_id": "p", "eye": "L", "acquired_at": "2016-01-01",
       "domain": "D1", "image_path": "img/a.png", "age_years": 40, "sex": "M"}


# --- ingestion

def test_ingest_three_lines(tmp_path):
    write_jsonl(tmp_path / "m.jsonl", [dict(ROW, image_id=i) for i in "abc"])
    recs = reg.ingest_manifest(tmp_path / "m.jsonl")
    assert [r.image_id for r in recs] == ["a", "b", "c"]
    assert recs[0].image_path == str(tmp_path / "img/a.png")


def test_invalid_eye_names_line(tmp_path):
    write_jsonl(tmp_path / "m.jsonl", [ROW, dict(ROW, image_id="b", eye="X")])
    with pytest.raises(reg.ManifestError, match="invalid eye at line 2"):
        reg.ingest_manifest(tmp_path / "m.jsonl")


def test_duplicate_image_id_listed(tmp_path):
    write_jsonl(tmp_path / "m.jsonl", [ROW, ROW])
    with pytest.raises(reg.ManifestError, match="'a'"):
        reg.ingest_manifest(tmp_path / "m.jsonl")


@pytest.mark.parametrize("field,value", [("acquired_at", "2016-13-01"), ("age_years", "old"),
                                         ("patient_id", ""), ("sex", "Q")])
def test_malformed_fields_name_field_and_line(tmp_path, field, value):
    write_jsonl(tmp_path / "m.jsonl", [dict(ROW, **{field: value})])
    with pytest.raises(reg.ManifestError, match=f"{field} at line 1"):
        reg.ingest_manifest(tmp_path / "m.jsonl")


def test_malformed_json_line(tmp_path):
    (tmp_path / "m.jsonl").write_text(json.dumps(ROW) + "\n{oops\n")
    with pytest.raises(reg.ManifestError, match="line 2"):
        reg.ingest_manifest(tmp_path / "m.jsonl")


def test_record_row_round_trip():
    r = rec("z", age=None, sex=None)
    assert reg.record_from_row(reg.record_to_row(r)) == r


def test_code_categories():
    cmap = {"glaucoma_surgery": "pos", "cataract": "neg"}
    assert reg.categorize_code("glaucoma_surgery", cmap) == reg.GON_POSITIVE
    assert reg.categorize_code("cataract", cmap) == reg.GON_NEGATIVE
    assert reg.categorize_code("zzz_unlisted", cmap) == reg.UNKNOWN


def test_code_map_validation(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"x": "maybe"}))
    with pytest.raises(reg.ManifestError):
        reg.load_code_map(tmp_path / "c.json")


# --- labeling

def label_of(records, events):
    return {r.image_id: str(r.label_state) for r in reg.derive_eye_labels(records, events)}


def test_positive_propagates_forward_only():
    out = label_of([rec("late", when=D(2016, 1, 1)), rec("early", when=D(2014, 1, 1)),
                    rec("same", when=D(2015, 3, 1))],
                   [ev("p1", "L", D(2015, 3, 1), "glaucoma_poag")])
    assert out == {"late": "Positive", "early": "Excluded(PreDiagnosis)", "same": "Positive"}


def test_negative_only_eye():
    out = label_of([rec("a"), rec("b", when=D(2019, 5, 5))], [ev("p1", "L", D(2010, 1, 1), "cataract")])
    assert set(out.values()) == {"Negative"}


def test_eyes_are_independent():
    out = label_of([rec("l", eye="L"), rec("r", eye="R")],
                   [ev("p1", "L", D(2015, 1, 1), "glaucoma_ntg"), ev("p1", "R", D(2015, 1, 1), "routine_exam")])
    assert out == {"l": "Positive", "r": "Negative"}


def test_bilateral_event_applies_to_both_eyes():
    out = label_of([rec("l", eye="L"), rec("r", eye="R")], [ev("p1", "B", D(2015, 1, 1), "glaucoma_pacg")])
    assert out == {"l": "Positive", "r": "Positive"}


def test_borderline_and_missing_codes():
    out = label_of([rec("s", patient="a"), rec("o", patient="b"), rec("u", patient="c"), rec("n", patient="d")],
                   [ev("a", "L", D(2015, 1, 1), "glaucoma_suspect"), ev("a", "L", D(2015, 2, 1), "cataract"),
                    ev("b", "L", D(2015, 1, 1), "ocular_hypertension"), ev("c", "L", D(2015, 1, 1), "other")])
    assert out == {"s": "Excluded(Suspect)", "o": "Excluded(OcularHypertension)",
                   "u": "Excluded(UnknownCode)", "n": "Excluded(NoDiagnosis)"}


# --- exclusions

def _excl(age=50, quality=9.0, od=True, label=reg.POSITIVE):
    r = reg.ImageRecord("x", "p", "L", D(2016, 1, 1), "D", "x.png", None, age, "F", label)
    g = {"x": gate.gate_one("x", quality, od)}
    return str(reg.apply_exclusions([r], 18, g)[0].label_state)


def test_age_threshold_is_strict():
    assert _excl(age=17) == "Excluded(Child)"
    assert _excl(age=18) == "Positive"


def test_quality_threshold():
    assert _excl(quality=4.5) == "Excluded(LowQuality)"
    assert _excl(quality=5.0) == "Positive"


def test_exclusion_precedence():
    assert _excl(age=10, quality=1.0, od=False, label=reg.excluded("Suspect")) == "Excluded(Child)"
    assert _excl(quality=1.0, od=False, label=reg.excluded("PreDiagnosis")) == "Excluded(PreDiagnosis)"
    assert _excl(quality=1.0, od=False) == "Excluded(MissingOD)"


def test_flow_report_conserves_records():
    corpora = synthbench.generate_benchmark(3, seed=2, scale=0.05)
    recs = [r for c in corpora for r in c.records()]
    evs = [e for c in corpora for e in c.events]
    g = {r.image_id: gate.gate_one(r.image_id, 9.0 if i % 7 else 3.0, i % 11 != 0) for i, r in enumerate(recs)}
    flow = reg.build_registry(recs, evs, g).flow_report()
    assert flow["ingested"] == len(recs)
    assert flow["kept"] + flow["excluded_total"] == flow["ingested"]
    assert flow["excluded_total"] == sum(flow["excluded"].values())
    assert flow["positive"] + flow["negative"] == flow["kept"]


# --- stratified split

def test_split_counts_for_single_image_patients():
    rng = np.random.default_rng(0)
    recs = [labeled(f"i{k:04d}", int(rng.random() < 0.6), age=int(rng.integers(18, 95)), sex="MF"[k % 2])
            for k in range(1000)]
    split = reg.stratified_split(recs, seed=3)
    counts = {s: list(split.values()).count(s) for s in reg.SPLITS}
    assert abs(counts["Train"] - 850) <= 1 and abs(counts["Val"] - 50) <= 1 and abs(counts["Test"] - 100) <= 1


def test_split_single_stratum_patient_disjoint():
    recs = [reg.ImageRecord(f"i{k}", f"p{k // 2}", "LR"[k % 2], D(2016, 1, 1), "D", "x", None, 40, "F",
                            reg.NEGATIVE) for k in range(400)]
    split = reg.stratified_split(recs, seed=1)
    by_patient = {}
    for r in recs:
        by_patient.setdefault(r.patient_id, set()).add(split[r.image_id])
    assert all(len(v) == 1 for v in by_patient.values())
    counts = [sum(1 for s in split.values() if s == name) for name in reg.SPLITS]
    assert counts == [340, 20, 40]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_split_prevalence_close_to_global(seed):
    corpus = synthbench.generate_domain(synthbench.DomainSpec("S", n_images=1500, prevalence=0.4), seed)
    r = reg.build_registry(corpus.records(), corpus.events)
    elig = r.eligible()
    split = reg.stratified_split(elig, seed=seed)
    glob = np.mean([x.label for x in elig])
    for name in reg.SPLITS:
        part = [x.label for x in elig if split[x.image_id] == name]
        assert abs(np.mean(part) - glob) <= 0.02


def test_small_strata_merge_with_warning(caplog):
    recs = [labeled(f"a{k}", 0, age=45, sex="F") for k in range(40)] + [labeled("lone", 0, age=85, sex="F")]
    split = reg.stratified_split(recs, seed=0)
    assert "lone" in split and "merging" in caplog.text


def test_split_rejects_excluded_records():
    r = reg.ImageRecord("x", "p", "L", D(2016, 1, 1), "D", "x", None, 40, "F", reg.excluded("Child"))
    with pytest.raises(ValueError):
        reg.stratified_split([r])


@settings(max_examples=25, deadline=None)
@given(st.integers(30, 300), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_property_disjoint_and_complete(n, prev, seed):
    rng = np.random.default_rng(seed)
    recs = [reg.ImageRecord(f"i{k}", f"p{k // 3}", "LR"[k % 2], D(2016, 1, 1), "D", "x", None,
                            int(rng.integers(18, 95)), "MF"[int(rng.integers(2))],
                            reg.POSITIVE if rng.random() < prev else reg.NEGATIVE) for k in range(n)]
    split = reg.stratified_split(recs, seed=seed)
    assert set(split) == {r.image_id for r in recs}
    seen = {}
    for r in recs:
        assert seen.setdefault(r.patient_id, split[r.image_id]) == split[r.image_id]
    assert split == reg.stratified_split(recs, seed=seed)


# --- LODO

def _domains(n_dom, per, prev=0.5):
    out = []
    for d in range(1, n_dom + 1):
        for k in range(per):
            out.append(labeled(f"D{d}-{k:03d}", int(k < prev * per), domain=f"D{d}"))
    return out


def test_lodo_two_domains_arithmetic():
    part = reg.lodo_partition(_domains(2, 100), ["D1", "D2"], "D2", seed=0)
    assert (len(part.train), len(part.val), len(part.target)) == (90, 10, 100)
    assert all(i.startswith("D2") for i in part.target)


def test_lodo_covers_sources_only():
    recs = _domains(7, 30)
    part = reg.lodo_partition(recs, [f"D{k}" for k in range(1, 8)], "D7", seed=1)
    src = {i.split("-")[0] for i in part.train + part.val}
    assert src == {f"D{k}" for k in range(1, 7)}
    assert not set(part.target) & set(part.train + part.val)
    assert part.to_json() == reg.lodo_partition(recs, [f"D{k}" for k in range(1, 8)], "D7", seed=1).to_json()


def test_lodo_val_is_label_stratified():
    part = reg.lodo_partition(_domains(2, 200, prev=0.3), ["D1", "D2"], "D1", seed=0)
    val_pos = sum(1 for i in part.val if int(i.split("-")[1]) < 60)
    assert val_pos == 6 and len(part.val) == 20


def test_lodo_errors():
    with pytest.raises(ValueError):
        reg.lodo_partition(_domains(2, 10), ["D1", "D2", "D3"], "D3")
    with pytest.raises(ValueError):
        reg.lodo_partition(_domains(2, 10), ["D1", "D2"], "D9")


def test_lodo_exclusion_and_explicit_target():
    recs = _domains(3, 40)
    held = [f"D1-{k:03d}" for k in range(5)]
    part = reg.lodo_partition(recs, ["D1", "D2", "D3"], "D2", exclude_ids=held)
    assert not set(held) & set(part.train + part.val)
    part = reg.lodo_partition(recs, ["D1", "D2", "D3"], "D1", target_ids=held)
    assert list(part.target) == held
    assert {i.split("-")[0] for i in part.train} == {"D1", "D2", "D3"}
