"""Stage orchestration behind the command line.

Each stage reads the artifacts of earlier stages from the run directory and
writes its own; every stage gets a named sub-seed of the run seed. Layout::

    synth/     images, masks, manifest.jsonl, diagnoses.jsonl, code_map.json
    gate/      gate_results.csv, gate_counts.json
    split/     split.json, partitions/<domain>.json, flow_report.json
    features/  features.npz (pooled image features and mask biometrics)
    models/    <model_id>.json snapshots and <model_id>.run.json records
    eval/      reports/, predictions/, plots/
    compare/   comparisons.json
    report/    table.json, table.md, flow_report.json
    run_manifest.json
"""
from __future__ import annotations

import copy
import csv
import datetime as dt
import hashlib
import json
import logging
import platform
from pathlib import Path

import numpy as np
import scipy

from . import __version__, biometrics, gate, imaging, learner, registry, statlab, synthbench
from .plots import density_svg, roc_svg
from .seeding import derive_seed

log = logging.getLogger(__name__)

BASELINES = ("CDR", "RDR")
ROWS = ("CDR", "RDR", "SSD", "MSD")

DEFAULT_CONFIG = {
    "seed": 0,
    "synth": {"n_domains": 7, "scale": 1.0},
    "data": {"manifest": None, "diagnoses": None, "code_map": None},
    "gate": {"threshold": gate.DEFAULT_THRESHOLD},
    "split": {"anchor": synthbench.ANCHOR_ID, "ratios": [0.85, 0.05, 0.10], "val_frac": 0.10,
              "min_age": 18},
    "train": {"epochs": 100, "batch_size": 32, "learning_rate": 0.05, "early_stop_patience": 10,
              "augment_policy": None, "use_biometrics": False},
    "eval": {"iterations": 1000, "subsample_frac": 0.95},
}


class ConfigError(ValueError):
    """Invalid run configuration or command arguments."""


class MissingArtifact(RuntimeError):
    """An upstream stage has not been run yet."""


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and base[k] and not isinstance(v, dict):
            raise ConfigError(f"config key {path + k!r} must be an object")
        if isinstance(base[k], dict) and base[k]:
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg):
    """Hash of the canonical JSON form; insensitive to key order."""
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def load_config(path=None, seed=None):
    """Defaults, overlaid with a JSON file and then with an explicit seed."""
    user = {}
    if path is not None:
        try:
            with open(path) as f:
                user = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULT_CONFIG, user)
    if seed is not None:
        cfg["seed"] = seed
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    if not gate.is_grade(float(cfg["gate"]["threshold"])):
        raise ConfigError("gate.threshold must be on the 1-10 grade lattice with 0.5 steps")
    r = cfg["split"]["ratios"]
    if len(r) != 3 or any(x < 0 for x in r) or abs(sum(r) - 1.0) > 1e-9:
        raise ConfigError("split.ratios must be three non-negative numbers summing to 1")
    if not 0 < cfg["split"]["val_frac"] < 1:
        raise ConfigError("split.val_frac must lie in (0, 1)")
    if cfg["synth"]["n_domains"] < 2 or cfg["synth"]["scale"] <= 0:
        raise ConfigError("synth needs n_domains >= 2 and scale > 0")
    if cfg["eval"]["iterations"] < 1 or not 0 < cfg["eval"]["subsample_frac"] <= 1:
        raise ConfigError("eval needs iterations >= 1 and subsample_frac in (0, 1]")
    try:
        train_config(cfg)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid train config: {e}") from e


def train_config(cfg):
    t = {k: v for k, v in cfg["train"].items() if k != "use_biometrics"}
    return learner.TrainConfig.from_dict({**t, "seed": derive_seed(cfg["seed"], "train")})


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_json(path):
    with open(path) as f:
        return json.load(f)


def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


class Run:
    """A run directory plus its configuration."""

    def __init__(self, out, cfg):
        self.out = Path(out)
        self.cfg = cfg
        self.seed = cfg["seed"]

    def path(self, *parts):
        return self.out.joinpath(*parts)

    def require(self, rel, what, command):
        p = self.path(rel)
        if not p.exists():
            raise MissingArtifact(f"{what} not found at {p}; run `{command}` first")
        return p

    def data_path(self, key, default):
        given = self.cfg["data"][key]
        if given is not None:
            return Path(given)
        return self.require(Path("synth") / default, f"{key.replace('_', ' ')}", "synth")

    def record_stage(self, stage, started, artifacts):
        mpath = self.path("run_manifest.json")
        manifest = read_json(mpath) if mpath.exists() else {}
        manifest["config"] = self.cfg
        manifest["config_hash"] = config_hash(self.cfg)
        manifest["versions"] = {"gonscreen": __version__, "python": platform.python_version(),
                                "numpy": np.__version__, "scipy": scipy.__version__}
        stages = manifest.setdefault("stages", {})
        stages[stage] = {
            "started": started,
            "finished": _now(),
            "seed": derive_seed(self.seed, stage),
            "artifacts": {str(Path(a).relative_to(self.out)): sha256_file(a) for a in sorted(map(str, artifacts))},
        }
        write_json(mpath, manifest)


# ------------------------------------------------------------------ helpers

def load_records(run):
    manifest = run.data_path("manifest", "manifest.jsonl")
    return registry.ingest_manifest(manifest)


def load_registry(run):
    records = load_records(run)
    code_map_path = run.cfg["data"]["code_map"]
    if code_map_path is None and run.path("synth", "code_map.json").exists():
        code_map_path = run.path("synth", "code_map.json")
    events = registry.ingest_diagnoses(run.data_path("diagnoses", "diagnoses.jsonl"),
                                       registry.load_code_map(code_map_path))
    gate_results = gate.read_gate_csv(run.require("gate/gate_results.csv", "gate results", "gate"))
    return registry.build_registry(records, events, gate_results, min_age=run.cfg["split"]["min_age"])


def load_splits(run, reg):
    split = read_json(run.require("split/split.json", "split assignment", "split"))
    reg.splits[split["domain_id"]] = split["assignment"]
    return split["domain_id"]


def datasets(run, reg, anchor):
    """dataset_id -> sorted record ids: anchor Test split plus every other domain."""
    out = {f"{anchor}-Test": sorted(i for i, s in reg.splits[anchor].items() if s == "Test")}
    for d in sorted({r.domain_id for r in reg.records}):
        if d != anchor:
            out[d] = sorted(r.image_id for r in reg.eligible(d))
    return out


def dataset_for_target(target, anchor):
    return f"{anchor}-Test" if target == anchor else target


def featurize_record(img, mask):
    return learner.image_features(img), learner.biometric_features(mask)


def load_features(run, reg):
    """(image features, biometrics) dicts for every eligible record, cached on disk."""
    cache = run.path("features", "features.npz")
    img_f, bio_f = {}, {}
    if cache.exists():
        z = np.load(cache)
        for rid, a, b in zip(z["ids"], z["image"], z["bio"]):
            img_f[str(rid)], bio_f[str(rid)] = a, b
    todo = [r for r in reg.eligible() if r.image_id not in img_f]
    for rec in todo:
        img = imaging.read_image(rec.image_path)
        mask = imaging.read_mask(rec.mask_path) if rec.mask_path else None
        img_f[rec.image_id], bio_f[rec.image_id] = featurize_record(img, mask)
    if todo:
        ids = sorted(img_f)
        cache.parent.mkdir(parents=True, exist_ok=True)
        with open(cache, "wb") as f:
            np.savez(f, ids=np.array(ids), image=np.stack([img_f[i] for i in ids]),
                     bio=np.stack([bio_f[i] for i in ids]))
        log.info("featurized %d records", len(todo))
    return img_f, bio_f


def feature_store(img_f, bio_f, use_biometrics=False):
    store = learner.FeatureStore(None, None)
    for rid, f in img_f.items():
        store.put(rid, np.concatenate([f, bio_f[rid]]) if use_biometrics else f)
    return store


def _write_predictions(path, model_id, ids, labels, scores):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["record_id", "model_id", "label", "score"])
        for rid, y, s in zip(ids, labels, scores):
            w.writerow([rid, model_id, int(y), repr(float(s))])


def read_predictions(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return ({r["record_id"]: float(r["score"]) for r in rows},
            {r["record_id"]: int(r["label"]) for r in rows})


# ------------------------------------------------------------------ stages

def cmd_synth(run):
    started = _now()
    c = run.cfg["synth"]
    corpora = synthbench.generate_benchmark(c["n_domains"], derive_seed(run.seed, "synth"), c["scale"])
    root = synthbench.write_benchmark(corpora, run.path("synth"))
    artifacts = [root / n for n in ("manifest.jsonl", "diagnoses.jsonl", "code_map.json", "domains.json",
                                    "ground_truth.csv")]
    run.record_stage("synth", started, artifacts)
    return {"domains": {c.spec.domain_id: len(c) for c in corpora}, "images": sum(map(len, corpora))}


def cmd_gate(run):
    started = _now()
    records = load_records(run)
    results, counts = gate.run_gate(records, threshold=float(run.cfg["gate"]["threshold"]))
    out = run.path("gate", "gate_results.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    gate.write_gate_csv(out, results)
    cpath = write_json(run.path("gate", "gate_counts.json"), counts)
    run.record_stage("gate", started, [out, cpath])
    return counts


def cmd_split(run):
    started = _now()
    reg = load_registry(run)
    c = run.cfg["split"]
    anchor = c["anchor"]
    domains = sorted({r.domain_id for r in reg.records})
    if anchor not in domains:
        raise ConfigError(f"anchor domain {anchor!r} not among {domains}")
    assignment = registry.split_domain(reg, anchor, tuple(c["ratios"]), derive_seed(run.seed, "split"))
    counts = {s: sum(1 for v in assignment.values() if v == s) for s in registry.SPLITS}
    artifacts = [write_json(run.path("split", "split.json"),
                            {"domain_id": anchor, "ratios": c["ratios"], "counts": counts,
                             "assignment": assignment})]
    lodo_seed = derive_seed(run.seed, "lodo")
    for target in domains:
        part = learner.msd_partition(reg, target, lodo_seed)
        artifacts.append(write_json(run.path("split", "partitions", f"{target}.json"), part.to_dict()))
    flow = reg.flow_report()
    check_flow(flow)
    artifacts.append(write_json(run.path("split", "flow_report.json"), flow))
    run.record_stage("split", started, artifacts)
    return {"anchor": anchor, "counts": counts, "flow": flow}


def check_flow(flow):
    """Every ingested record is either kept or excluded for exactly one reason."""
    if flow["kept"] + sum(flow["excluded"].values()) != flow["ingested"]:
        raise AssertionError(f"flow report does not conserve records: {flow}")
    if flow["positive"] + flow["negative"] != flow["kept"]:
        raise AssertionError(f"kept records are not all labeled: {flow}")


def cmd_train(run, mode, target=None):
    started = _now()
    if mode not in ("ssd", "msd"):
        raise ConfigError(f"unknown mode {mode!r}; expected 'ssd' or 'msd'")
    reg = load_registry(run)
    anchor = load_splits(run, reg)
    domains = sorted({r.domain_id for r in reg.records})
    img_f, bio_f = load_features(run, reg)
    use_bio = bool(run.cfg["train"]["use_biometrics"])
    store = feature_store(img_f, bio_f, use_bio)
    cfg = train_config(run.cfg)

    jobs = []
    if mode == "ssd":
        src = target or anchor
        if src != anchor:
            raise ConfigError(f"SSD trains on the anchor domain {anchor!r}, not {src!r}")
        jobs.append(("ssd", src))
    else:
        targets = [target] if target else domains
        for t in targets:
            if t not in domains:
                raise ConfigError(f"unknown target domain {t!r}; expected one of {domains}")
        jobs.extend(("msd", t) for t in targets)

    artifacts, summary = [], {}
    for kind, dom in jobs:
        model = learner.ReferenceModel(f"{kind}-{dom}", use_biometrics=use_bio)
        if kind == "ssd":
            run_ = learner.train_ssd(reg, dom, cfg, store, model=model, split=reg.splits[anchor])
        else:
            ppath = run.require(f"split/partitions/{dom}.json", "LODO partition", "split")
            p = read_json(ppath)
            part = registry.DomainPartition(p["target_domain_id"], tuple(p["train"]), tuple(p["val"]),
                                            tuple(p["target"]))
            run_ = learner.train_msd(reg, dom, cfg, store, model=model, partition=part)
        rec = run_.record()
        rec["dataset_id"] = dataset_for_target(dom, anchor) if kind == "msd" else f"{anchor}-Test"
        artifacts.append(write_json(run.path("models", f"{model.model_id}.json"), run_.model.to_dict()))
        artifacts.append(write_json(run.path("models", f"{model.model_id}.run.json"), rec))
        summary[model.model_id] = {"best_epoch": run_.best_epoch, "best_val_auc": run_.best_val_auc,
                                   "n_train": len(run_.train_ids), "n_val": len(run_.val_ids)}
    run.record_stage(f"train-{mode}" + (f"-{target}" if target else ""), started, artifacts)
    return summary


def _model_snapshots(run):
    d = run.path("models")
    snaps = sorted(p for p in d.glob("*.json") if not p.name.endswith(".run.json")) if d.exists() else []
    if not snaps:
        raise MissingArtifact(f"model snapshot not found in {d}; run `train` first")
    return snaps


def _eval_one(run, model_id, dataset_id, ids, labels, scores):
    name = f"{model_id}__{dataset_id}"
    files = []
    ppath = run.path("eval", "predictions", f"{name}.csv")
    _write_predictions(ppath, model_id, ids, labels, scores)
    files.append(ppath)
    c = run.cfg["eval"]
    try:
        rep = statlab.evaluate(scores, labels, model_id, dataset_id, iterations=c["iterations"],
                               subsample_frac=c["subsample_frac"],
                               seed=derive_seed(run.seed, "eval", model_id, dataset_id))
    except ValueError as e:
        log.warning("skipping %s on %s: %s", model_id, dataset_id, e)
        return None, files
    files.append(write_json(run.path("eval", "reports", f"{name}.json"), rep.to_dict()))
    fpr, tpr = statlab.roc_curve(scores, labels)
    plots = run.path("eval", "plots")
    plots.mkdir(parents=True, exist_ok=True)
    roc = plots / f"roc_{name}.svg"
    roc.write_text(roc_svg(fpr, tpr, f"{model_id} on {dataset_id}", rep.auc))
    files.append(roc)
    s, y = np.asarray(scores), np.asarray(labels)
    grid, d_pos = statlab.kde(s[y == 1])
    _, d_neg = statlab.kde(s[y == 0])
    kde_svg = plots / f"kde_{name}.svg"
    kde_svg.write_text(density_svg(grid, d_pos, d_neg, f"{model_id} on {dataset_id}", rep.brier))
    kde_csv = plots / f"kde_{name}.csv"
    with open(kde_csv, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["class", "x", "density"])
        for cls, dens in (("GON+", d_pos), ("GON-", d_neg)):
            for x, v in zip(grid, dens):
                w.writerow([cls, f"{x:.6f}", f"{v:.8f}"])
    files += [kde_svg, kde_csv]
    return rep, files


def cmd_eval(run):
    started = _now()
    snaps = _model_snapshots(run)
    reg = load_registry(run)
    anchor = load_splits(run, reg)
    img_f, bio_f = load_features(run, reg)
    sets = datasets(run, reg, anchor)
    reports, artifacts = {}, []

    def add(model_id, dataset_id, scores):
        ids = sets[dataset_id]
        rep, files = _eval_one(run, model_id, dataset_id, ids, reg.labels(ids), scores)
        artifacts.extend(files)
        if rep is not None:
            reports[f"{model_id}__{dataset_id}"] = rep.to_dict()

    for which in BASELINES:
        for dataset_id, ids in sets.items():
            scores = [biometrics.baseline_score(biometrics.Biometrics(*bio_f[i]), which) for i in ids]
            add(which, dataset_id, scores)
    for snap in snaps:
        model = learner.ReferenceModel.from_dict(read_json(snap))
        record = read_json(snap.with_name(f"{model.model_id}.run.json"))
        store = feature_store(img_f, bio_f, model.use_biometrics)
        targets = sets if record["mode"] == "ssd" else {record["dataset_id"]: None}
        for dataset_id in targets:
            add(model.model_id, dataset_id, learner.predict_store(model, sets[dataset_id], store))
    artifacts.append(write_json(run.path("eval", "summary.json"), reports))
    run.record_stage("eval", started, artifacts)
    return reports


def _row_of(model_id):
    return model_id.split("-", 1)[0].upper() if "-" in model_id else model_id


def _load_predictions(run):
    d = run.path("eval", "predictions")
    files = sorted(d.glob("*.csv")) if d.exists() else []
    if not files:
        raise MissingArtifact(f"evaluation predictions not found in {d}; run `eval` first")
    out = {}
    for p in files:
        model_id, dataset_id = p.stem.split("__")
        out[(model_id, dataset_id)] = read_predictions(p)
    return out


def cmd_compare(run):
    """MSD against every other scorer on each dataset where both have predictions."""
    started = _now()
    preds = _load_predictions(run)
    c = run.cfg["eval"]
    results = []
    by_dataset = {}
    for (model_id, dataset_id) in preds:
        by_dataset.setdefault(dataset_id, []).append(model_id)
    for dataset_id in sorted(by_dataset):
        models = sorted(by_dataset[dataset_id])
        msd = [m for m in models if _row_of(m) == "MSD"]
        for a in msd:
            for b in models:
                if b == a:
                    continue
                sa, labels = preds[(a, dataset_id)]
                sb, _ = preds[(b, dataset_id)]
                try:
                    res = statlab.compare_models(sa, sb, labels, iterations=c["iterations"],
                                                 subsample_frac=c["subsample_frac"],
                                                 seed=derive_seed(run.seed, "compare", dataset_id),
                                                 model_a=a, model_b=b, dataset_id=dataset_id)
                except ValueError as e:
                    log.warning("skipping %s vs %s on %s: %s", a, b, dataset_id, e)
                    continue
                results.append(res.to_dict(include_differences=False))
    path = write_json(run.path("compare", "comparisons.json"), results)
    run.record_stage("compare", started, [path])
    return results


def build_table(reports, anchor):
    """Rows CDR/RDR/SSD/MSD by dataset columns (anchor Test first), ``X.XX (X.XX-X.XX)`` cells."""
    columns = sorted({r["dataset_id"] for r in reports.values()},
                     key=lambda d: (d != f"{anchor}-Test", d))
    cells = {row: {col: None for col in columns} for row in ROWS}
    values = {row: {col: None for col in columns} for row in ROWS}
    for rep in reports.values():
        row = _row_of(rep["model_id"])
        if row not in cells:
            continue
        er = statlab.EvalReport(**rep)
        cells[row][rep["dataset_id"]] = er.cell()
        values[row][rep["dataset_id"]] = {"auc": er.auc, "ci_low": er.ci_low, "ci_high": er.ci_high,
                                          "brier": er.brier, "n": er.n, "model_id": er.model_id}
    return {"rows": list(ROWS), "columns": columns, "cells": cells, "values": values}


def table_markdown(table):
    cols = table["columns"]
    lines = ["| Model | " + " | ".join(cols) + " |", "|---" * (len(cols) + 1) + "|"]
    for row in table["rows"]:
        lines.append(f"| {row} | " + " | ".join(table["cells"][row][c] or "n/a" for c in cols) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(run):
    started = _now()
    summary_path = run.require("eval/summary.json", "evaluation reports", "eval")
    reports = read_json(summary_path)
    split = read_json(run.require("split/split.json", "split assignment", "split"))
    flow = read_json(run.require("split/flow_report.json", "flow report", "split"))
    check_flow(flow)
    table = build_table(reports, split["domain_id"])
    cpath = run.path("compare", "comparisons.json")
    if cpath.exists():
        table["comparisons"] = read_json(cpath)
    artifacts = [write_json(run.path("report", "table.json"), table),
                 write_json(run.path("report", "flow_report.json"), flow)]
    md = run.path("report", "table.md")
    md.write_text(table_markdown(table))
    artifacts.append(md)
    run.record_stage("report", started, artifacts)
    return table


# ------------------------------------------------------------ in-memory path

def prepare_corpora(corpora, threshold=gate.DEFAULT_THRESHOLD, scorer=None, min_age=18):
    """Render every synthetic image once; gate, featurize and build the registry.

    Returns ``(registry, image_features, biometrics)`` with feature dicts keyed
    by image id, the same quantities the file-based stages compute.
    """
    scorer = scorer or gate.HeuristicQualityScorer()
    records, events, gate_results, img_f, bio_f = [], [], {}, {}, {}
    for c in corpora:
        records.extend(c.records())
        events.extend(c.events)
        for i, s in enumerate(c.samples):
            img, mask = c.render(i)
            od = mask is not None and gate.has_complete_od(mask)
            gate_results[s.image_id] = gate.gate_one(s.image_id, scorer(img), od, threshold)
            img_f[s.image_id], bio_f[s.image_id] = featurize_record(img, mask)
    reg = registry.build_registry(records, events, gate_results, min_age=min_age)
    return reg, img_f, bio_f
