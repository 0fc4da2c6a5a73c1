"""Command-line entry point wiring the pipeline stages together.

Machine-readable results go to files only; progress goes to stderr.
Exit codes: 0 success, 2 validation error, 3 backend error.
"""

import csv
import json
import sys
import time
from fractions import Fraction
from pathlib import Path

import click

from . import quantify as qt
from . import segmenter, slide_store, survival, synth
from .errors import BackendError, ValidationError


def _load_config(path):
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot read config file {path}: {e}") from e
    if not isinstance(doc, dict):
        raise ValidationError(f"config file {path} must hold a JSON object")
    return doc


def _resolve(cfg, flag, value, default=None, required=False):
    if value is not None:
        return value
    if flag in cfg:
        return cfg[flag]
    if required and default is None:
        raise ValidationError(f"missing required option --{flag.replace('_', '-')}")
    return default


def _write_provenance(out_dir, resolved: dict):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def _progress(msg):
    click.echo(msg, err=True)


def _parse_thresholds(text):
    try:
        values = [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError as e:
        raise ValidationError(f"bad threshold list {text!r}") from e
    if not values:
        raise ValidationError("threshold list is empty")
    return values


def _load_quant_csv(path):
    """Read a cmd_quantify CSV back into exact per-case ratios.

    Returns (ratios: case_id -> Fraction, no_tumor: set of case ids).
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"quantification CSV not found: {path}")
    ratios, no_tumor = {}, set()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if "no_tumor" in (row.get("flags") or ""):
                no_tumor.add(row["case_id"])
                continue
            vt, nt = int(row["p_vt"]), int(row["p_nt"])
            ratios[row["case_id"]] = Fraction(nt, vt + nt)
    return ratios, no_tumor


@click.group()
def cli():
    """Necrosis-ratio quantification and survival stratification pipeline."""


@cli.command("synth")
@click.option("--spec", "spec_path", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None, help="Override the spec seed.")
@click.option("--config", "config_path", type=click.Path(), default=None)
def cmd_synth(spec_path, out_dir, seed, config_path):
    """Generate a synthetic dataset (slides, masks, manifest) on disk."""
    cfg = _load_config(config_path)
    spec_path = _resolve(cfg, "spec", spec_path, required=True)
    out_dir = _resolve(cfg, "out", out_dir, required=True)
    doc = _load_config(spec_path)
    spec = synth.cohort_spec_from_json(doc)
    if seed is not None:
        spec.seed = seed
    _progress(f"synthesizing {spec.n_cases} cases into {out_dir}")
    cohort = synth.generate_cohort(spec)
    synth.write_cohort(cohort, out_dir)
    _write_provenance(out_dir, {"command": "synth", "spec": doc, "seed": spec.seed})
    _progress(f"wrote {len(cohort.slides)} slides, {len(cohort.cases)} cases")


@cli.command("segment")
@click.option("--dataset", type=click.Path(), default=None)
@click.option("--backend", type=click.Choice(["oracle", "chromatic", "external"]), default=None)
@click.option("--external-cmd", default=None)
@click.option("--mislabel-rate", type=float, default=None)
@click.option("--workers", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--config", "config_path", type=click.Path(), default=None)
def cmd_segment(dataset, backend, external_cmd, mislabel_rate, workers, seed,
                out_dir, config_path):
    """Segment every slide of a dataset into predicted label masks."""
    cfg = _load_config(config_path)
    dataset = _resolve(cfg, "dataset", dataset, required=True)
    backend = _resolve(cfg, "backend", backend, default="chromatic")
    external_cmd = _resolve(cfg, "external_cmd", external_cmd, default="")
    mislabel_rate = float(_resolve(cfg, "mislabel_rate", mislabel_rate, default=0.0))
    workers = int(_resolve(cfg, "workers", workers, default=1))
    seed = int(_resolve(cfg, "seed", seed, default=0))
    out_dir = _resolve(cfg, "out", out_dir, required=True)

    ds = slide_store.load_manifest(dataset)
    bconfig = segmenter.BackendConfig(
        kind=backend, mislabel_rate=mislabel_rate, seed=seed, command=external_cmd)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_provenance(out, {
        "command": "segment", "dataset": str(dataset), "backend": backend,
        "external_cmd": external_cmd, "mislabel_rate": mislabel_rate,
        "workers": workers, "seed": seed,
    })
    run_log = {}
    for sid, slide in sorted(ds.slides.items()):
        gt = slide.load_mask() if backend == "oracle" else None
        if backend == "oracle" and gt is None:
            raise ValidationError(f"oracle backend: slide {sid!r} has no ground-truth mask")
        t0 = time.monotonic()
        mask = segmenter.run_slide(slide, bconfig, mask=gt, workers=workers)
        slide_store.save_mask(out / f"{sid}.png", mask)
        run_log[sid] = {
            "tiles": len(tiler_schedule(slide)),
            "seconds": round(time.monotonic() - t0, 3),
        }
        _progress(f"segmented {sid} ({run_log[sid]['tiles']} tiles, "
                  f"{run_log[sid]['seconds']}s)")
    (out / "run_log.json").write_text(json.dumps(run_log, indent=2, sort_keys=True) + "\n")


def tiler_schedule(slide):
    from .tiler import schedule
    return schedule(slide.width, slide.height)


def _load_pred_masks(ds, masks_dir):
    masks = {}
    for sid, slide in ds.slides.items():
        path = Path(masks_dir) / f"{sid}.png"
        masks[sid] = slide_store.load_mask(
            path, expect_size=(slide.width, slide.height), slide_id=sid)
    return masks


@cli.command("quantify")
@click.option("--dataset", type=click.Path(), default=None)
@click.option("--masks", "masks_dir", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--config", "config_path", type=click.Path(), default=None)
def cmd_quantify(dataset, masks_dir, out_dir, config_path):
    """Aggregate per-slide masks into per-case necrosis ratios and grades."""
    cfg = _load_config(config_path)
    dataset = _resolve(cfg, "dataset", dataset, required=True)
    masks_dir = _resolve(cfg, "masks", masks_dir, required=True)
    out_dir = _resolve(cfg, "out", out_dir, required=True)

    ds = slide_store.load_manifest(dataset)
    masks = _load_pred_masks(ds, masks_dir)
    quants = [qt.aggregate_case(c, masks) for c in ds.cases]
    out = Path(out_dir)
    _write_provenance(out, {"command": "quantify", "dataset": str(dataset),
                            "masks": str(masks_dir)})
    qt.write_case_csv(out / "cases.csv", quants)
    _progress(f"quantified {len(quants)} cases -> {out / 'cases.csv'}")


@cli.command("evaluate")
@click.option("--dataset", type=click.Path(), default=None)
@click.option("--quant", "quant_path", type=click.Path(), default=None,
              help="cases.csv from the quantify step.")
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--config", "config_path", type=click.Path(), default=None)
def cmd_evaluate(dataset, quant_path, out_dir, config_path):
    """Compare model ratios against reported ratios, per grade."""
    cfg = _load_config(config_path)
    dataset = _resolve(cfg, "dataset", dataset, required=True)
    quant_path = _resolve(cfg, "quant", quant_path, required=True)
    out_dir = _resolve(cfg, "out", out_dir, required=True)

    ds = slide_store.load_manifest(dataset)
    ratios, _ = _load_quant_csv(quant_path)
    quants = []
    for case in survival.ratio_evaluable(ds.cases):
        if case.case_id not in ratios:
            continue
        r = ratios[case.case_id]
        quants.append(qt.CaseQuantification(
            case_id=case.case_id, slide_counts={}, counts=qt.ClassCounts.zero(),
            r_dl=r, grade=qt.grade_of(r), r_pr=case.r_pr))
    rows, scatter = qt.report_comparison(quants)
    out = Path(out_dir)
    _write_provenance(out, {"command": "evaluate", "dataset": str(dataset),
                            "quant": str(quant_path)})
    qt.write_report_tables(out, rows, scatter)
    from .plots import scatter_svg
    scatter_svg(out / "scatter.svg", scatter)
    _progress(f"evaluated {len(quants)} cases -> {out / 'grade_stats.csv'}")


@cli.command("survival")
@click.option("--dataset", type=click.Path(), default=None)
@click.option("--quant", "quant_path", type=click.Path(), default=None)
@click.option("--endpoint", type=click.Choice(["os", "pfs"]), default=None)
@click.option("--cutoff", type=float, default=None)
@click.option("--by", type=click.Choice(["dl", "pr"]), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--config", "config_path", type=click.Path(), default=None)
def cmd_survival(dataset, quant_path, endpoint, cutoff, by, out_dir, config_path):
    """Stratify the cohort at one cutoff and run the log-rank test."""
    cfg = _load_config(config_path)
    dataset = _resolve(cfg, "dataset", dataset, required=True)
    quant_path = _resolve(cfg, "quant", quant_path, required=True)
    endpoint = _resolve(cfg, "endpoint", endpoint, default="os")
    cutoff = float(_resolve(cfg, "cutoff", cutoff, default=0.9))
    by = _resolve(cfg, "by", by, default="dl")
    out_dir = _resolve(cfg, "out", out_dir, required=True)

    ds = slide_store.load_manifest(dataset)
    ratios, _ = _load_quant_csv(quant_path)
    res = survival.stratify(ds.cases, ratios, endpoint, cutoff, by=by)
    out = Path(out_dir)
    _write_provenance(out, {"command": "survival", "dataset": str(dataset),
                            "quant": str(quant_path), "endpoint": endpoint,
                            "cutoff": cutoff, "by": by})
    doc = {
        "endpoint": endpoint, "cutoff": cutoff, "by": by,
        "evaluable": res.evaluable, "reason": res.reason or None,
        "statistic": res.statistic, "p_value": res.p_value,
        "p_display": survival.format_p(res.p_value) if res.evaluable else None,
        "responders": res.responders, "nonresponders": res.nonresponders,
    }
    (out / "stratification.json").write_text(json.dumps(doc, indent=2) + "\n")
    if res.evaluable:
        survival.write_km_csv(out / "km_responder.csv", res.responder_curve)
        survival.write_km_csv(out / "km_nonresponder.csv", res.nonresponder_curve)
        from .plots import km_svg
        km_svg(out / "km.svg",
               {"responder": res.responder_curve, "nonresponder": res.nonresponder_curve},
               title=f"{endpoint.upper()} at cutoff {cutoff:g} "
                     f"(p = {survival.format_p(res.p_value)})")
        _progress(f"{endpoint} cutoff {cutoff:g}: p = {survival.format_p(res.p_value)}")
    else:
        _progress(f"{endpoint} cutoff {cutoff:g}: unevaluable ({res.reason})")


@cli.command("sweep")
@click.option("--dataset", type=click.Path(), default=None)
@click.option("--quant", "quant_path", type=click.Path(), default=None)
@click.option("--thresholds", default=None, help="Comma-separated cutoffs.")
@click.option("--by", type=click.Choice(["dl", "pr"]), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--config", "config_path", type=click.Path(), default=None)
def cmd_sweep(dataset, quant_path, thresholds, by, out_dir, config_path):
    """Sweep cutoff thresholds for both endpoints and mark the argmin."""
    cfg = _load_config(config_path)
    dataset = _resolve(cfg, "dataset", dataset, required=True)
    quant_path = _resolve(cfg, "quant", quant_path, required=True)
    thresholds = _resolve(cfg, "thresholds", thresholds,
                          default=",".join(str(t) for t in survival.DEFAULT_THRESHOLDS))
    by = _resolve(cfg, "by", by, default="dl")
    out_dir = _resolve(cfg, "out", out_dir, required=True)
    cutoffs = _parse_thresholds(thresholds)

    ds = slide_store.load_manifest(dataset)
    ratios, _ = _load_quant_csv(quant_path)
    by_endpoint = {}
    for endpoint in ("os", "pfs"):
        try:
            by_endpoint[endpoint] = survival.sweep(ds.cases, ratios, endpoint,
                                                   cutoffs, by=by)
        except ValidationError:
            results = [survival.stratify(ds.cases, ratios, endpoint, t, by=by)
                       for t in cutoffs]
            by_endpoint[endpoint] = (results, None)
    out = Path(out_dir)
    _write_provenance(out, {"command": "sweep", "dataset": str(dataset),
                            "quant": str(quant_path), "thresholds": cutoffs, "by": by})
    survival.write_sweep_table(out, cutoffs, by_endpoint)
    for endpoint, (_, best) in by_endpoint.items():
        _progress(f"{endpoint}: best cutoff {best}")


@cli.command("overlay")
@click.option("--dataset", type=click.Path(), default=None)
@click.option("--masks", "masks_dir", type=click.Path(), default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--level", type=int, default=None, help="Pyramid factor to render at.")
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--config", "config_path", type=click.Path(), default=None)
def cmd_overlay(dataset, masks_dir, alpha, level, out_dir, config_path):
    """Render alpha-blended class overlays for every slide."""
    from PIL import Image

    cfg = _load_config(config_path)
    dataset = _resolve(cfg, "dataset", dataset, required=True)
    masks_dir = _resolve(cfg, "masks", masks_dir, required=True)
    alpha = float(_resolve(cfg, "alpha", alpha, default=0.5))
    level = int(_resolve(cfg, "level", level, default=1))
    out_dir = _resolve(cfg, "out", out_dir, required=True)

    ds = slide_store.load_manifest(dataset)
    masks = _load_pred_masks(ds, masks_dir)
    out = Path(out_dir)
    _write_provenance(out, {"command": "overlay", "dataset": str(dataset),
                            "masks": str(masks_dir), "alpha": alpha, "level": level})
    for sid, slide in sorted(ds.slides.items()):
        lw, lh = slide.level_size(level)
        rgb = slide.read_region(level, 0, 0, lw, lh)
        mask = masks[sid][::level, ::level]
        img = qt.render_overlay(rgb, mask, alpha)
        Image.fromarray(img).save(out / f"{sid}_overlay.png")
        _progress(f"rendered {sid}_overlay.png")


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.UsageError as e:
        click.echo(f"error: {e.format_message()}", err=True)
        return 2
    except click.ClickException as e:
        e.show()
        return 2
    except click.Abort:
        return 2
    except ValidationError as e:
        click.echo(f"error: {e}", err=True)
        return 2
    except BackendError as e:
        click.echo(f"backend error: {e}", err=True)
        return 3


if __name__ == "__main__":
    sys.exit(main())
