import csv
import hashlib
import json
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from necroquant.cli import main
from necroquant.slide_store import load_manifest, load_mask
from necroquant.synth import mask_ratio

SPEC = {
    "seed": 123,
    "n_cases": 4,
    "slides_per_case": [1, 2],
    "slide_width": 512,
    "slide_height": 512,
    "granularity": 32,
    "ratio_distribution": {"kind": "uniform", "low": 0.1, "high": 1.0},
}


def run(*argv):
    return main(list(argv))


def tree_digest(root):
    h = hashlib.sha256()
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            h.update(str(path.relative_to(root)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    base = tmp_path_factory.mktemp("pipe")
    spec = base / "spec.json"
    spec.write_text(json.dumps(SPEC))
    ds = base / "ds"
    masks = base / "masks"
    quant = base / "quant"
    assert run("synth", "--spec", str(spec), "--out", str(ds)) == 0
    assert run("segment", "--dataset", str(ds), "--backend", "oracle",
               "--out", str(masks)) == 0
    assert run("quantify", "--dataset", str(ds), "--masks", str(masks),
               "--out", str(quant)) == 0
    return base, spec, ds, masks, quant


def test_synth_is_idempotent(pipeline, tmp_path):
    base, spec, ds, _, _ = pipeline
    again = tmp_path / "ds2"
    assert run("synth", "--spec", str(spec), "--out", str(again)) == 0
    assert tree_digest(ds) == tree_digest(again)


def test_oracle_masks_equal_ground_truth(pipeline):
    _, _, ds, masks, _ = pipeline
    dataset = load_manifest(ds)
    for sid, slide in dataset.slides.items():
        pred = load_mask(Path(masks) / f"{sid}.png")
        assert np.array_equal(pred, slide.load_mask())


def test_quantify_csv_ratios_are_exact(pipeline):
    _, _, ds, _, quant = pipeline
    dataset = load_manifest(ds)
    with open(Path(quant) / "cases.csv", newline="") as fh:
        rows = {r["case_id"]: r for r in csv.DictReader(fh)}
    for case in dataset.cases:
        truth = mask_ratio(np.concatenate(
            [dataset.slides[s].load_mask().ravel() for s in case.slide_ids]))
        row = rows[case.case_id]
        got = Fraction(int(row["p_nt"]), int(row["p_vt"]) + int(row["p_nt"]))
        assert got == truth


def test_worker_count_does_not_change_masks(pipeline, tmp_path):
    _, _, ds, masks, _ = pipeline
    out8 = tmp_path / "m8"
    assert run("segment", "--dataset", str(ds), "--backend", "chromatic",
               "--workers", "8", "--out", str(out8)) == 0
    for png in Path(masks).glob("*.png"):
        assert (out8 / png.name).read_bytes() == png.read_bytes()


def test_run_log_written(pipeline):
    _, _, _, masks, _ = pipeline
    log = json.loads((Path(masks) / "run_log.json").read_text())
    for entry in log.values():
        assert entry["tiles"] == 4  # 512x512 slides
        assert entry["seconds"] >= 0


def test_provenance_written(pipeline):
    _, _, ds, masks, quant = pipeline
    for out in (ds, masks, quant):
        cfg = json.loads((Path(out) / "run_config.json").read_text())
        assert "command" in cfg


def test_evaluate_and_plots(pipeline, tmp_path):
    _, _, ds, _, quant = pipeline
    out = tmp_path / "eval"
    assert run("evaluate", "--dataset", str(ds), "--quant",
               str(Path(quant) / "cases.csv"), "--out", str(out)) == 0
    with open(out / "grade_stats.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["grade"] for r in rows] == ["IV", "III", "II", "I", "All"]
    assert (out / "scatter.svg").exists()
    assert (out / "scatter.csv").exists()


def test_survival_and_sweep_outputs(pipeline, tmp_path):
    _, _, ds, _, quant = pipeline
    out = tmp_path / "surv"
    code = run("survival", "--dataset", str(ds), "--quant",
               str(Path(quant) / "cases.csv"), "--endpoint", "os",
               "--cutoff", "0.5", "--out", str(out))
    assert code == 0
    doc = json.loads((out / "stratification.json").read_text())
    assert doc["cutoff"] == 0.5
    sweep_out = tmp_path / "sweep"
    assert run("sweep", "--dataset", str(ds), "--quant",
               str(Path(quant) / "cases.csv"), "--out", str(sweep_out)) == 0
    with open(sweep_out / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["cutoff"] for r in rows] == ["0.5", "0.6", "0.7", "0.8", "0.9"]
    assert set(rows[0]) == {"cutoff", "os_p", "pfs_p"}


def test_overlay_renders(pipeline, tmp_path):
    _, _, ds, masks, _ = pipeline
    out = tmp_path / "ov"
    assert run("overlay", "--dataset", str(ds), "--masks", str(masks),
               "--alpha", "0.5", "--out", str(out)) == 0
    dataset = load_manifest(ds)
    for sid in dataset.slides:
        assert (out / f"{sid}_overlay.png").exists()


def test_config_file_supplies_flags(pipeline, tmp_path):
    _, _, ds, masks, _ = pipeline
    cfg = tmp_path / "cfg.json"
    out = tmp_path / "q"
    cfg.write_text(json.dumps({"dataset": str(ds), "masks": str(masks),
                               "out": str(out)}))
    assert run("quantify", "--config", str(cfg)) == 0
    assert (out / "cases.csv").exists()
    # flags override the file
    out2 = tmp_path / "q2"
    assert run("quantify", "--config", str(cfg), "--out", str(out2)) == 0
    assert (out2 / "cases.csv").exists()


def test_validation_errors_exit_2(tmp_path):
    assert run("quantify", "--dataset", str(tmp_path / "nope"),
               "--masks", str(tmp_path), "--out", str(tmp_path / "o")) == 2
    assert run("segment") == 2  # missing required options
    bad_spec = tmp_path / "bad.json"
    bad_spec.write_text(json.dumps({"seed": 1}))
    assert run("synth", "--spec", str(bad_spec), "--out", str(tmp_path / "d")) == 2


def test_backend_failure_exits_3(pipeline, tmp_path):
    _, _, ds, _, _ = pipeline
    stub = tmp_path / "fail.py"
    stub.write_text("import sys; sys.exit(1)")
    assert run("segment", "--dataset", str(ds), "--backend", "external",
               "--external-cmd", f"python3 {stub}",
               "--out", str(tmp_path / "m")) == 3


def test_segment_does_not_mutate_dataset(pipeline, tmp_path):
    _, _, ds, _, _ = pipeline
    before = tree_digest(ds)
    assert run("segment", "--dataset", str(ds), "--backend", "chromatic",
               "--out", str(tmp_path / "m")) == 0
    assert tree_digest(ds) == before
