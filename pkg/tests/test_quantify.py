from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from necroquant.errors import NoTumorError, ValidationError
from necroquant.quantify import (
    ClassCounts, CaseQuantification, aggregate_case, count_pixels, grade_of,
    mean_iou, necrosis_ratio, render_overlay, report_comparison,
)
from necroquant.slide_store import CaseRecord
from necroquant.tissue import OVERLAY_COLORS, TissueClass as T

counts_strategy = st.tuples(*[st.integers(0, 10 ** 6)] * 8).map(
    lambda t: ClassCounts(counts=t))


def test_count_pixels_all_viable():
    mask = np.ones((100, 100), dtype=np.uint8)
    c = count_pixels(mask)
    assert c[T.VIABLE_TUMOR] == 10000
    assert all(c.counts[i] == 0 for i in range(8) if i != 1)
    assert c.total == 10000  # empty classes report 0, not absent


@given(counts_strategy, counts_strategy, counts_strategy)
def test_merge_associative_commutative(a, b, c):
    assert a.merge(b) == b.merge(a)
    assert a.merge(b).merge(c) == a.merge(b.merge(c))
    assert a.merge(ClassCounts.zero()) == a


@pytest.mark.parametrize("vt,nt,expected", [
    (0, 500, Fraction(1)),
    (500, 0, Fraction(0)),
    (250, 750, Fraction(3, 4)),
])
def test_necrosis_ratio(vt, nt, expected):
    counts = ClassCounts(counts=(0, vt, nt, 0, 0, 0, 0, 0))
    assert necrosis_ratio(counts) == expected


def test_necrosis_ratio_no_tumor_flagged():
    counts = ClassCounts(counts=(5, 0, 0, 0, 100, 200, 300, 400))
    with pytest.raises(NoTumorError):
        necrosis_ratio(counts, "c9")


@given(st.integers(0, 10 ** 6), st.integers(0, 10 ** 6),
       st.tuples(*[st.integers(0, 10 ** 6)] * 5))
def test_other_classes_never_contribute(vt, nt, others):
    if vt + nt == 0:
        return
    o = others
    a = ClassCounts(counts=(o[0], vt, nt, 0, o[1], o[2], o[3], o[4]))
    b = ClassCounts(counts=(0, vt, nt, 0, 0, 0, 0, 0))
    assert necrosis_ratio(a) == necrosis_ratio(b)


@pytest.mark.parametrize("r,grade", [
    (Fraction(1), "IV"), (1.0, "IV"),
    (0.999, "III"), (0.9, "III"), (Fraction(9, 10), "III"),
    (0.899, "II"), (0.5, "II"),
    (0.4999, "I"), (0.0, "I"),
])
def test_grade_breakpoints(r, grade):
    assert grade_of(r) == grade


def test_grade_out_of_range():
    with pytest.raises(ValidationError):
        grade_of(1.2)


def _case(case_id, slide_ids, **kw):
    return CaseRecord(case_id=case_id, slide_ids=slide_ids, **kw)


def test_aggregate_two_slides():
    masks = {
        "a": np.repeat([1], 100).astype(np.uint8).reshape(10, 10),
        "b": np.repeat([2], 100).astype(np.uint8).reshape(10, 10),
    }
    q = aggregate_case(_case("c", ["a", "b"]), masks)
    assert q.r_dl == Fraction(1, 2)
    assert q.counts.total == 200


def test_aggregate_single_slide_identity():
    mask = np.array([[1, 2], [3, 7]], dtype=np.uint8)
    q = aggregate_case(_case("c", ["only"]), {"only": mask})
    assert q.counts == count_pixels(mask)
    assert q.r_dl == Fraction(2, 3)


def test_aggregate_missing_mask_names_slide():
    with pytest.raises(ValidationError, match="missing"):
        aggregate_case(_case("c", ["missing"]), {})


def test_aggregate_no_tumor_is_flagged_not_scored():
    mask = np.full((4, 4), int(T.NORMAL_BONE), dtype=np.uint8)
    q = aggregate_case(_case("c", ["s"]), {"s": mask})
    assert q.no_tumor and q.r_dl is None and q.grade is None


def test_partition_invariance():
    rng = np.random.default_rng(0)
    mask = rng.integers(0, 8, size=(64, 64), dtype=np.uint8)
    whole = aggregate_case(_case("c", ["w"]), {"w": mask})
    split = aggregate_case(_case("c", ["t", "b"]),
                           {"t": mask[:20], "b": mask[20:]})
    assert whole.r_dl == split.r_dl
    assert whole.counts == split.counts


def test_monotonic_in_necrosis():
    rng = np.random.default_rng(1)
    mask = rng.integers(0, 8, size=(32, 32), dtype=np.uint8)
    if not (mask == 1).any():
        mask[0, 0] = 1
    before = aggregate_case(_case("c", ["s"]), {"s": mask}).r_dl
    y, x = np.argwhere(mask == 1)[0]
    mask2 = mask.copy()
    mask2[y, x] = int(T.NECROSIS_WITHOUT_BONE)
    after = aggregate_case(_case("c", ["s"]), {"s": mask2}).r_dl
    assert after >= before


def _quant(case_id, r_pr, r_dl):
    return CaseQuantification(case_id=case_id, slide_counts={},
                              counts=ClassCounts.zero(),
                              r_dl=Fraction(r_dl).limit_denominator(10 ** 6),
                              grade=grade_of(r_dl), r_pr=r_pr)


def test_report_stats_forced_arithmetic():
    # abs diffs 10, 20, 30 percentage points within Grade I
    quants = [_quant("a", 0.10, 0.20), _quant("b", 0.20, 0.40),
              _quant("c", 0.30, 0.00)]
    rows, scatter = report_comparison(quants)
    by_grade = {r.grade: r for r in rows}
    assert by_grade["I"].n == 3
    assert by_grade["I"].mean == pytest.approx(20.0)
    assert by_grade["I"].median == pytest.approx(20.0)
    assert [r.grade for r in rows] == ["IV", "III", "II", "I", "All"]
    assert len(scatter) == 3


def test_report_single_case_zero_std():
    rows, _ = report_comparison([_quant("a", 1.0, 0.95)])
    by_grade = {r.grade: r for r in rows}
    assert by_grade["IV"].n == 1
    assert by_grade["IV"].std == pytest.approx(0.0)
    assert by_grade["All"].n == 1


def test_report_groups_by_reported_grade():
    # r_pr in grade III, r_dl in grade II: the row is grade III
    rows, _ = report_comparison([_quant("a", 0.9, 0.7)])
    by_grade = {r.grade: r for r in rows}
    assert by_grade["III"].n == 1
    assert by_grade["II"].n == 0


def test_report_empty_input():
    with pytest.raises(ValidationError):
        report_comparison([])


def test_mean_iou_identity_and_disjoint():
    rng = np.random.default_rng(2)
    a = rng.integers(0, 8, size=(16, 16), dtype=np.uint8)
    assert mean_iou(a, a) == 1.0
    assert mean_iou(np.full((8, 8), 1, np.uint8), np.full((8, 8), 2, np.uint8)) == 0.0


def test_mean_iou_half_flipped_fixture():
    truth = np.array([[1, 1], [2, 2]], dtype=np.uint8)
    pred = np.array([[1, 2], [1, 2]], dtype=np.uint8)
    assert mean_iou(pred, truth) == pytest.approx(1 / 3)
    assert mean_iou(truth, pred) == pytest.approx(1 / 3)  # symmetric


def test_mean_iou_dimension_mismatch():
    with pytest.raises(ValidationError):
        mean_iou(np.zeros((2, 2), np.uint8), np.zeros((3, 3), np.uint8))


def test_overlay_alpha_extremes():
    rng = np.random.default_rng(3)
    slide = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
    mask = rng.integers(1, 8, size=(8, 8), dtype=np.uint8)
    lut = np.zeros((8, 3), dtype=np.uint8)
    for cls, rgb in OVERLAY_COLORS.items():
        lut[int(cls)] = rgb
    assert np.array_equal(render_overlay(slide, mask, 1.0), lut[mask])
    assert np.array_equal(render_overlay(slide, mask, 0.0), slide)


def test_overlay_blend_arithmetic():
    slide = np.full((4, 4, 3), 255, dtype=np.uint8)
    mask = np.ones((4, 4), dtype=np.uint8)  # viable tumor, red
    out = render_overlay(slide, mask, 0.5)
    # per-channel: 0.5*255 + 0.5*(255,0,0) = (255, 128, 128) after rounding
    assert (out == (255, 128, 128)).all()


def test_overlay_unlabeled_keeps_slide():
    slide = np.full((2, 2, 3), 40, dtype=np.uint8)
    mask = np.zeros((2, 2), dtype=np.uint8)
    assert np.array_equal(render_overlay(slide, mask, 0.8), slide)


def test_overlay_dimension_mismatch():
    with pytest.raises(ValidationError):
        render_overlay(np.zeros((2, 2, 3), np.uint8), np.zeros((3, 3), np.uint8), 0.5)
