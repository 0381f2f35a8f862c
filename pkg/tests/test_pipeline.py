import csv
import json
import re

import pytest

from gonscreen import cli, pipeline, statlab

CELL = re.compile(r"\d\.\d\d \(\d\.\d\d-\d\.\d\d\)")


def read(path):
    return json.loads(path.read_text())


def test_config_defaults_and_override(tmp_path):
    cfg = pipeline.load_config(seed=11)
    assert cfg["seed"] == 11 and cfg["split"]["ratios"] == [0.85, 0.05, 0.10]
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 3, "eval": {"iterations": 50}}))
    cfg = pipeline.load_config(p)
    assert cfg["seed"] == 3 and cfg["eval"] == {"iterations": 50, "subsample_frac": 0.95}


@pytest.mark.parametrize("bad", [{"nope": 1}, {"seed": -1}, {"seed": "x"}, {"gate": {"threshold": 5.2}},
                                 {"split": {"ratios": [0.5, 0.5, 0.5]}}, {"train": {"epochs": -1}},
                                 {"eval": "fast"}])
def test_invalid_configs_rejected(tmp_path, bad):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(bad))
    with pytest.raises(pipeline.ConfigError):
        pipeline.load_config(p)


def test_config_hash_ignores_key_order():
    a = {"seed": 1, "train": {"epochs": 3, "batch_size": 8}}
    b = {"train": {"batch_size": 8, "epochs": 3}, "seed": 1}
    assert pipeline.config_hash(a) == pipeline.config_hash(b)
    assert pipeline.config_hash(a) != pipeline.config_hash({**a, "seed": 2})


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["gate", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert cli.main(["frobnicate"]) == 2
    assert cli.main(["train", "--out", str(tmp_path)]) == 2  # --mode is required
    assert cli.main(["eval", "--out", str(tmp_path / "empty")]) == 1
    assert "model snapshot not found" in capsys.readouterr().err


def test_missing_upstream_names_the_command(tmp_path, capsys):
    assert cli.main(["gate", "--out", str(tmp_path)]) == 1
    assert "run `synth` first" in capsys.readouterr().err
    assert cli.main(["report", "--out", str(tmp_path)]) == 1
    assert "run `eval` first" in capsys.readouterr().err


def test_malformed_manifest_is_a_validation_error(tmp_path):
    (tmp_path / "m.jsonl").write_text('{"image_id": "a", "eye": "X"}\n')
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": {"manifest": str(tmp_path / "m.jsonl")}}))
    assert cli.main(["gate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_build_table_shape():
    reps = {}
    for m in ("CDR", "msd-D2"):
        for d in ("A-Test", "B", "C"):
            reps[f"{m}__{d}"] = statlab.EvalReport(m, d, 0.8, 0.75, 0.85, 0.1, 100, 40).to_dict()
    table = pipeline.build_table(reps, "A")
    assert table["columns"] == ["A-Test", "B", "C"]
    filled = {r: [c for c in table["columns"] if table["cells"][r][c]] for r in table["rows"]}
    assert filled == {"CDR": ["A-Test", "B", "C"], "RDR": [], "SSD": [], "MSD": ["A-Test", "B", "C"]}
    assert table["cells"]["CDR"]["B"] == "0.80 (0.75-0.85)"


# --- artifacts of a full small run

def test_run_layout(pipeline_run):
    for rel in ("synth/manifest.jsonl", "gate/gate_results.csv", "split/split.json", "split/flow_report.json",
                "features/features.npz", "models/ssd-D1.json", "models/msd-D4.run.json",
                "eval/summary.json", "compare/comparisons.json", "report/table.json", "report/table.md",
                "run_manifest.json"):
        assert (pipeline_run / rel).exists(), rel


def test_gate_csv_matches_counts(pipeline_run):
    counts = read(pipeline_run / "gate" / "gate_counts.json")
    with open(pipeline_run / "gate" / "gate_results.csv") as f:
        rows = list(csv.DictReader(f))
    assert sum(counts.values()) == len(rows)
    assert counts["passed"] == sum(r["passed"] == "1" for r in rows)


def test_split_is_patient_disjoint_and_anchor_test_reserved(pipeline_run):
    split = read(pipeline_run / "split" / "split.json")
    test_ids = {i for i, s in split["assignment"].items() if s == "Test"}
    for part_file in (pipeline_run / "split" / "partitions").glob("*.json"):
        part = read(part_file)
        used = set(part["train"]) | set(part["val"])
        assert not used & set(part["target"])
        assert not used & test_ids
    assert set(read(pipeline_run / "split" / "partitions" / "D1.json")["target"]) == test_ids


def test_eval_outputs(pipeline_run):
    summary = read(pipeline_run / "eval" / "summary.json")
    assert {"CDR__D1-Test", "RDR__D2", "ssd-D1__D5", "msd-D3__D3", "msd-D1__D1-Test"} <= set(summary)
    plots = pipeline_run / "eval" / "plots"
    svg = (plots / "kde_msd-D3__D3.svg").read_text()
    assert svg.startswith("<svg") and "Brier = " in svg
    assert (plots / "roc_ssd-D1__D1-Test.svg").read_text().count("<polyline") == 2
    with open(plots / "kde_CDR__D2.csv") as f:
        rows = list(csv.DictReader(f))
    assert set(rows[0]) == {"class", "x", "density"} and len(rows) == 2 * 512


def test_run_record_has_curves_and_histogram(pipeline_run):
    rec = read(pipeline_run / "models" / "msd-D2.run.json")
    assert rec["mode"] == "msd" and "D2" not in rec["domain_histogram"]
    assert rec["best_epoch"] == max(range(len(rec["val_auc"])), key=rec["val_auc"].__getitem__)


def test_report_table(pipeline_run):
    table = read(pipeline_run / "report" / "table.json")
    assert table["rows"] == ["CDR", "RDR", "SSD", "MSD"]
    assert table["columns"][0] == "D1-Test" and len(table["columns"]) == 7
    for row in table["rows"]:
        for col in table["columns"]:
            assert CELL.fullmatch(table["cells"][row][col]), (row, col)
    assert all(c["model_a"].startswith("msd-") for c in table["comparisons"])


def test_manifest_hashes_artifacts(pipeline_run):
    m = read(pipeline_run / "run_manifest.json")
    assert m["config_hash"] == pipeline.config_hash(m["config"])
    assert set(m["stages"]) >= {"synth", "gate", "split", "train-ssd", "train-msd", "eval", "compare", "report"}
    rel = "report/table.json"
    assert m["stages"]["report"]["artifacts"][rel] == pipeline.sha256_file(pipeline_run / rel)
    assert {"numpy", "scipy", "python", "gonscreen"} <= set(m["versions"])


def test_stage_rerun_is_idempotent(pipeline_run, small_config):
    before = (pipeline_run / "report" / "table.json").read_bytes()
    assert cli.main(["report", "--config", str(small_config), "--out", str(pipeline_run)]) == 0
    assert (pipeline_run / "report" / "table.json").read_bytes() == before


def test_single_target_training(pipeline_run, small_config, tmp_path):
    assert cli.main(["train", "--mode", "msd", "--target", "D9", "--config", str(small_config),
                     "--out", str(pipeline_run)]) == 2
    assert cli.main(["train", "--mode", "ssd", "--target", "D3", "--config", str(small_config),
                     "--out", str(pipeline_run)]) == 2
