"""Pixel aggregation, necrosis ratio, grading, report comparison, overlays.

The case-level ratio is necrotic-tumor pixels over (viable + necrotic)
tumor pixels, computed in exact integer arithmetic; classes outside
{viable, necrosis-with-bone, necrosis-without-bone} never contribute.
"""

import csv
import json
import statistics
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import NoTumorError, ValidationError
from .slide_store import CaseRecord
from .tissue import NECROTIC_CLASSES, NUM_CLASSES, OVERLAY_COLORS, TissueClass

GRADES = ("IV", "III", "II", "I")


@dataclass(frozen=True)
class ClassCounts:
    """Per-class pixel tallies; merge is associative and commutative."""

    counts: tuple  # length NUM_CLASSES

    @classmethod
    def zero(cls):
        return cls(counts=(0,) * NUM_CLASSES)

    @classmethod
    def from_mask(cls, mask: np.ndarray):
        return cls(counts=tuple(
            int(n) for n in np.bincount(mask.ravel(), minlength=NUM_CLASSES)))

    def merge(self, other: "ClassCounts") -> "ClassCounts":
        return ClassCounts(counts=tuple(a + b for a, b in zip(self.counts, other.counts)))

    def __getitem__(self, cls):
        return self.counts[int(cls)]

    @property
    def total(self):
        return sum(self.counts)

    @property
    def viable(self):
        return self[TissueClass.VIABLE_TUMOR]

    @property
    def necrotic(self):
        return sum(self[c] for c in NECROTIC_CLASSES)


def count_pixels(mask: np.ndarray) -> ClassCounts:
    return ClassCounts.from_mask(mask)


def necrosis_ratio(counts: ClassCounts, case_id: str = "?") -> Fraction:
    """Exact necrotic/(viable+necrotic) ratio; raises NoTumorError at 0/0."""
    vt, nt = counts.viable, counts.necrotic
    if vt + nt == 0:
        raise NoTumorError(case_id)
    return Fraction(nt, vt + nt)


def grade_of(r) -> str:
    """Four-tier response grade: IV=100%, III>=90%, II>=50%, I<50%."""
    if not 0 <= r <= 1:
        raise ValidationError(f"necrosis ratio {r} outside [0,1]")
    if isinstance(r, float):
        # snap float representation error so 0.9 grades as the 90% boundary
        r = Fraction(r).limit_denominator(10 ** 9)
    if r == 1:
        return "IV"
    if r >= Fraction(9, 10):
        return "III"
    if r >= Fraction(1, 2):
        return "II"
    return "I"


@dataclass
class CaseQuantification:
    case_id: str
    slide_counts: dict  # slide_id -> ClassCounts
    counts: ClassCounts
    r_dl: Optional[Fraction]  # None when the case has no tumor
    grade: Optional[str]
    r_pr: Optional[float] = None
    no_tumor: bool = False

    @property
    def abs_diff(self) -> Optional[float]:
        """|r_PR - r_DL| in percentage points."""
        if self.r_pr is None or self.r_dl is None:
            return None
        return abs(self.r_pr - float(self.r_dl)) * 100.0


def aggregate_case(case: CaseRecord, masks: dict) -> CaseQuantification:
    """Merge pixel counts over all of a case's slides and score the case."""
    slide_counts = {}
    for sid in case.slide_ids:
        if sid not in masks:
            raise ValidationError(f"case {case.case_id!r}: no mask for slide {sid!r}")
        m = masks[sid]
        slide_counts[sid] = m if isinstance(m, ClassCounts) else count_pixels(m)
    total = ClassCounts.zero()
    for c in slide_counts.values():
        total = total.merge(c)
    try:
        r_dl = necrosis_ratio(total, case.case_id)
    except NoTumorError:
        return CaseQuantification(case.case_id, slide_counts, total,
                                  r_dl=None, grade=None, r_pr=case.r_pr, no_tumor=True)
    return CaseQuantification(case.case_id, slide_counts, total,
                              r_dl=r_dl, grade=grade_of(r_dl), r_pr=case.r_pr)


@dataclass
class GradeStats:
    grade: str  # IV/III/II/I/All
    n: int
    mean: Optional[float]  # percentage points
    median: Optional[float]
    std: Optional[float]  # population standard deviation


def report_comparison(quants):
    """Per-grade absolute-difference stats, grouped by the reported grade.

    Returns (rows, scatter) where rows covers IV/III/II/I plus an All row
    and scatter is the (r_pr, r_dl, grade) triple list for plotting.
    """
    evaluable = [q for q in quants if q.r_pr is not None and q.r_dl is not None]
    if not evaluable:
        raise ValidationError("no cases with both a reported and a computed ratio")
    groups = {g: [] for g in GRADES}
    for q in evaluable:
        groups[grade_of(Fraction(q.r_pr).limit_denominator(10 ** 9))].append(q.abs_diff)

    def stats_row(grade, diffs):
        if not diffs:
            return GradeStats(grade, 0, None, None, None)
        return GradeStats(grade, len(diffs),
                          mean=statistics.fmean(diffs),
                          median=statistics.median(diffs),
                          std=statistics.pstdev(diffs))

    rows = [stats_row(g, groups[g]) for g in GRADES]
    rows.append(stats_row("All", [q.abs_diff for q in evaluable]))
    scatter = [(q.r_pr, float(q.r_dl),
                grade_of(Fraction(q.r_pr).limit_denominator(10 ** 9)))
               for q in evaluable]
    return rows, scatter


def mean_iou(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean IoU over classes present in either mask."""
    if pred.shape != truth.shape:
        raise ValidationError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    ious = []
    for cls in range(NUM_CLASSES):
        p = pred == cls
        t = truth == cls
        union = int(np.count_nonzero(p | t))
        if union == 0:
            continue
        ious.append(int(np.count_nonzero(p & t)) / union)
    return float(np.mean(ious)) if ious else 1.0


def render_overlay(slide_rgb: np.ndarray, mask: np.ndarray, alpha: float) -> np.ndarray:
    """Alpha-blend the legend colors over the slide; unlabeled stays bare."""
    if slide_rgb.shape[:2] != mask.shape:
        raise ValidationError(
            f"overlay dimensions differ: slide {slide_rgb.shape[:2]} vs mask {mask.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha {alpha} outside [0,1]")
    lut = np.zeros((NUM_CLASSES, 3), dtype=np.float64)
    for cls, rgb in OVERLAY_COLORS.items():
        lut[int(cls)] = rgb
    blended = np.rint((1.0 - alpha) * slide_rgb.astype(np.float64) + alpha * lut[mask])
    out = np.clip(blended, 0, 255).astype(np.uint8)
    bare = mask == int(TissueClass.UNLABELED)
    out[bare] = slide_rgb[bare]
    return out


def _fmt_ratio(r) -> str:
    return "" if r is None else f"{float(r):.4f}"


def write_case_csv(path, quants):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "p_vt", "p_nt", "r_dl", "grade", "r_pr", "abs_diff", "flags"])
        for q in quants:
            diff = q.abs_diff
            w.writerow([
                q.case_id, q.counts.viable, q.counts.necrotic,
                _fmt_ratio(q.r_dl), q.grade or "",
                _fmt_ratio(q.r_pr), "" if diff is None else f"{diff:.2f}",
                "no_tumor" if q.no_tumor else "",
            ])


def write_report_tables(out_dir, rows, scatter):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "grade_stats.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["grade", "n", "mean_pp", "median_pp", "std_pp"])
        for r in rows:
            w.writerow([r.grade, r.n,
                        "" if r.mean is None else f"{r.mean:.2f}",
                        "" if r.median is None else f"{r.median:.2f}",
                        "" if r.std is None else f"{r.std:.2f}"])
    (out / "grade_stats.json").write_text(json.dumps({
        "std_convention": "population",
        "rows": [{"grade": r.grade, "n": r.n, "mean_pp": r.mean,
                  "median_pp": r.median, "std_pp": r.std} for r in rows],
    }, indent=2) + "\n")
    with open(out / "scatter.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r_pr", "r_dl", "grade"])
        for r_pr, r_dl, grade in scatter:
            w.writerow([f"{r_pr:.4f}", f"{r_dl:.4f}", grade])
