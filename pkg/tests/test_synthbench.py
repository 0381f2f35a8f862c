import hashlib
import json

import numpy as np
import pytest

from gonscreen import biometrics, gate, registry, statlab, synthbench


@pytest.fixture(scope="module")
def corpus():
    spec = synthbench.DomainSpec("T", n_images=200, cdr_mean_neg=0.45, cdr_mean_pos=0.60, prevalence=0.5)
    return synthbench.generate_domain(spec, seed=1)


def test_measured_vcdr_tracks_class_means(corpus):
    by_class = {0: [], 1: []}
    for i, s in enumerate(corpus.samples):
        by_class[s.label].append(biometrics.vertical_cdr(corpus.mask(i)))
    assert abs(np.median(by_class[0]) - 0.45) <= 0.03
    assert abs(np.median(by_class[1]) - 0.60) <= 0.03


def test_vcdr_matches_true_cdr_within_raster_tolerance(corpus):
    for i, s in enumerate(corpus.samples[:50]):
        m = corpus.mask(i)
        extent = int(np.ptp(np.flatnonzero((m >= 1).any(axis=1)))) + 1
        assert abs(biometrics.vertical_cdr(m) - s.cdr) <= 2 / extent


def test_no_missing_od_means_every_disc_complete(corpus):
    assert all(gate.has_complete_od(corpus.mask(i)) for i in range(len(corpus)))


def test_cdr_baseline_is_informative(corpus):
    scores = [biometrics.vertical_cdr(corpus.mask(i)) for i in range(len(corpus))]
    labels = [s.label for s in corpus.samples]
    assert statlab.auc(scores, labels) > 0.5


def test_exact_flag_counts():
    spec = synthbench.DomainSpec("F", n_images=100, prevalence=0.3, blur_frac=0.1, missing_od_frac=0.05)
    c = synthbench.generate_domain(spec, seed=0)
    assert sum(s.label for s in c.samples) == 30
    assert sum(s.blurred for s in c.samples) == 10
    assert sum(s.missing_od for s in c.samples) == 5
    assert all(c.mask(i) is None for i, s in enumerate(c.samples) if s.missing_od)


def test_rendering_is_deterministic_and_shaped():
    spec = synthbench.DomainSpec("R", n_images=3, resolution=(320, 240))
    a = synthbench.generate_domain(spec, seed=5)
    b = synthbench.generate_domain(spec, seed=5)
    assert a.samples == b.samples and a.events == b.events
    img = a.image(0)
    assert img.shape == (240, 320, 3) and img.dtype == np.uint8
    assert np.array_equal(img, b.image(0))
    assert not np.array_equal(img, synthbench.generate_domain(spec, seed=6).image(0))


def test_labels_flow_through_registry(corpus):
    reg = registry.build_registry(corpus.records(), corpus.events)
    truth = {s.image_id: s.label for s in corpus.samples}
    assert all(r.label == truth[r.image_id] for r in reg.records)


def test_benchmark_domains_and_anchor():
    specs = synthbench.benchmark_specs()
    assert [s.domain_id for s in specs] == [f"D{k}" for k in range(1, 8)]
    anchor = specs[0]
    assert anchor.domain_id == synthbench.ANCHOR_ID and anchor.n_images == 3000 and anchor.prevalence == 0.70
    assert all(0.10 <= s.prevalence <= 0.74 for s in specs)
    assert len({s.resolution for s in specs}) > 3
    assert len(synthbench.benchmark_specs(9)) == 9


def test_write_benchmark_layout(tmp_path):
    corpora = synthbench.generate_benchmark(3, seed=0, scale=0.01)
    root = synthbench.write_benchmark(corpora, tmp_path / "b")
    manifests = sorted(p.name for p in (root / "manifests").iterdir())
    assert manifests == ["D1.jsonl", "D2.jsonl", "D3.jsonl"]
    recs = registry.ingest_manifest(root / "manifest.jsonl")
    assert len(recs) == sum(map(len, corpora))
    events = registry.ingest_diagnoses(root / "diagnoses.jsonl", registry.load_code_map(root / "code_map.json"))
    assert len(events) == sum(len(c.events) for c in corpora)
    assert all((root / "images" / f"{r.image_id}.png").exists() for r in recs)
    again = synthbench.write_benchmark(synthbench.generate_benchmark(3, seed=0, scale=0.01), tmp_path / "c")
    digest = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()
    for name in ("manifest.jsonl", "diagnoses.jsonl", "ground_truth.csv"):
        assert digest(root / name) == digest(again / name)
    assert json.loads((root / "domains.json").read_text())[0]["domain_id"] == "D1"
