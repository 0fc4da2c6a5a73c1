"""Deterministic synthetic slides and cohorts with exact ground truth.

Slides are blob-textured label maps painted with the canonical class colors;
the mask is the exact ground truth for every downstream number.  Cohorts add
clinical records whose survival times are drawn with a hazard separation
planted at a chosen necrosis-ratio cutoff, plus CONSORT-style exclusion
flags.
"""

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import SpecError
from .slide_store import ArraySlide, CaseRecord, write_manifest, write_slide
from .tissue import CANONICAL_COLORS, NECROTIC_CLASSES, NUM_CLASSES, TissueClass


@dataclass
class SynthSpec:
    seed: int
    width: int
    height: int
    fractions: dict  # TissueClass -> target area fraction, summing to 1
    granularity: int = 64
    noise_epsilon: float = 0.0
    colors: dict = field(default_factory=lambda: dict(CANONICAL_COLORS))


def _quotas(fractions, n_blocks):
    """Integer block quotas by largest remainder; ties favor lower codes."""
    items = sorted((int(c), f) for c, f in fractions.items() if f > 0)
    floors = {c: int(f * n_blocks) for c, f in items}
    short = n_blocks - sum(floors.values())
    by_rem = sorted(items, key=lambda cf: (-(cf[1] * n_blocks - floors[cf[0]]), cf[0]))
    for c, _ in by_rem[:short]:
        floors[c] += 1
    return floors


def generate_slide(spec: SynthSpec):
    """Generate (pyramid, mask); a pure function of the spec."""
    if spec.width <= 0 or spec.height <= 0:
        raise SpecError(f"zero-area slide {spec.width}x{spec.height}")
    total = sum(spec.fractions.values())
    if abs(total - 1.0) > 1e-9:
        raise SpecError(f"class fractions sum to {total}, expected 1")

    from scipy.ndimage import gaussian_filter  # deferred: keeps inference lean

    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed) & 0x7FFFFFFF]))
    g = max(1, spec.granularity)
    gw, gh = math.ceil(spec.width / g), math.ceil(spec.height / g)

    # smooth noise field; thresholding its order statistics yields contiguous
    # blobs while hitting class quotas exactly at block resolution
    noise = gaussian_filter(rng.standard_normal((gh, gw)), sigma=2.0, mode="wrap")
    order = np.argsort(noise, axis=None, kind="stable")
    quotas = _quotas(spec.fractions, gw * gh)
    blocks = np.empty(gw * gh, dtype=np.uint8)
    pos = 0
    for cls in sorted(quotas):
        blocks[order[pos:pos + quotas[cls]]] = cls
        pos += quotas[cls]
    mask = np.repeat(np.repeat(blocks.reshape(gh, gw), g, axis=0), g, axis=1)
    mask = np.ascontiguousarray(mask[:spec.height, :spec.width])

    lut = np.zeros((NUM_CLASSES, 3), dtype=np.uint8)
    for cls, rgb in spec.colors.items():
        lut[int(cls)] = rgb
    rgb = lut[mask]

    if spec.noise_epsilon > 0:
        jitter_at = rng.random(mask.shape) < spec.noise_epsilon
        jitter = rng.integers(-20, 21, size=(*mask.shape, 3))
        noisy = np.clip(rgb.astype(np.int16) + jitter, 0, 255).astype(np.uint8)
        rgb = np.where(jitter_at[..., None], noisy, rgb)

    return ArraySlide(f"synth_{spec.seed}", rgb), mask


def mask_ratio(mask: np.ndarray) -> Optional[Fraction]:
    """Exact necrosis ratio of a mask; None when it contains no tumor."""
    counts = np.bincount(mask.ravel(), minlength=NUM_CLASSES)
    nt = int(sum(counts[int(c)] for c in NECROTIC_CLASSES))
    vt = int(counts[int(TissueClass.VIABLE_TUMOR)])
    if vt + nt == 0:
        return None
    return Fraction(nt, vt + nt)


@dataclass
class CohortSpec:
    seed: int
    n_cases: int
    slides_per_case: tuple = (2, 5)
    slide_width: int = 1024
    slide_height: int = 1024
    granularity: int = 64
    noise_epsilon: float = 0.0
    ratio_distribution: dict = field(default_factory=lambda: {"kind": "uniform", "low": 0.0, "high": 1.0})
    planted_cutoff: float = 0.8
    responder_hazard: float = 0.01   # events per month when ratio >= cutoff
    nonresponder_hazard: float = 0.15
    censor_hazard: float = 0.01
    horizon_months: float = 120.0
    r_pr_noise: float = 0.02
    train_cases: int = 0
    missing_r_pr: int = 0
    missing_os: int = 0
    missing_metastasis: int = 0
    metastatic_cases: int = 0
    render_slides: bool = True


@dataclass
class Cohort:
    cases: list
    slides: dict  # slide_id -> ArraySlide
    masks: dict   # slide_id -> ndarray
    true_ratios: dict  # case_id -> Fraction


def cohort_spec_from_json(doc: dict) -> CohortSpec:
    known = set(CohortSpec.__dataclass_fields__)
    unknown = doc.keys() - known
    if unknown:
        raise SpecError(f"unknown cohort spec keys {sorted(unknown)}")
    if "seed" not in doc or "n_cases" not in doc:
        raise SpecError("cohort spec requires 'seed' and 'n_cases'")
    spec = CohortSpec(**{k: doc[k] for k in doc})
    if isinstance(spec.slides_per_case, list):
        spec.slides_per_case = tuple(spec.slides_per_case)
    return spec


def _target_ratio(dist, rng):
    kind = dist.get("kind", "uniform")
    if kind == "uniform":
        return float(rng.uniform(dist.get("low", 0.0), dist.get("high", 1.0)))
    if kind == "values":
        values = dist["values"]
        return float(values[int(rng.integers(len(values)))])
    raise SpecError(f"unknown ratio distribution kind {kind!r}")


def _slide_fractions(ratio: float) -> dict:
    tumor = 0.5
    fr = {
        TissueClass.VIABLE_TUMOR: tumor * (1.0 - ratio),
        TissueClass.NECROSIS_WITH_BONE: tumor * ratio / 2,
        TissueClass.NECROSIS_WITHOUT_BONE: tumor * ratio / 2,
        TissueClass.NORMAL_BONE: 0.15,
        TissueClass.NORMAL_TISSUE: 0.15,
        TissueClass.CARTILAGE: 0.05,
    }
    fr[TissueClass.BLANK] = 1.0 - sum(fr.values())
    return fr


def _draw_survival(rng, hazard, censor_hazard, horizon):
    t_event = rng.exponential(1.0 / hazard) if hazard > 0 else math.inf
    t_cens = rng.exponential(1.0 / censor_hazard) if censor_hazard > 0 else math.inf
    t_cens = min(t_cens, horizon)
    time = max(0.1, round(min(t_event, t_cens), 2))
    return time, bool(t_event <= t_cens)


def generate_cohort(spec: CohortSpec) -> Cohort:
    """Generate a full cohort; deterministic per case."""
    if spec.n_cases <= 0:
        raise SpecError("cohort must contain at least one case")
    excl = spec.missing_r_pr + spec.missing_os + spec.missing_metastasis + spec.metastatic_cases
    n_test = spec.n_cases - spec.train_cases
    if excl > n_test:
        raise SpecError("more exclusions than test cases")

    cohort = Cohort(cases=[], slides={}, masks={}, true_ratios={})
    test_idx = 0
    for i in range(spec.n_cases):
        rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed) & 0x7FFFFFFF, i]))
        case_id = f"case_{i:03d}"
        target = _target_ratio(spec.ratio_distribution, rng)
        lo, hi = spec.slides_per_case
        n_slides = int(rng.integers(lo, hi + 1))
        slide_ids = []
        vt_total = nt_total = 0
        for j in range(n_slides):
            sid = f"{case_id}_s{j}"
            slide_ids.append(sid)
            if spec.render_slides:
                sspec = SynthSpec(
                    seed=int(rng.integers(2 ** 31)),
                    width=spec.slide_width, height=spec.slide_height,
                    fractions=_slide_fractions(target),
                    granularity=spec.granularity,
                    noise_epsilon=spec.noise_epsilon,
                )
                slide, mask = generate_slide(sspec)
                slide.slide_id = sid
                cohort.slides[sid] = slide
                cohort.masks[sid] = mask
                counts = np.bincount(mask.ravel(), minlength=NUM_CLASSES)
                vt_total += int(counts[int(TissueClass.VIABLE_TUMOR)])
                nt_total += int(sum(counts[int(c)] for c in NECROTIC_CLASSES))
        if spec.render_slides:
            if vt_total + nt_total == 0:
                r_true = None
            else:
                r_true = Fraction(nt_total, vt_total + nt_total)
        else:
            r_true = Fraction(target).limit_denominator(10 ** 6)
        if r_true is not None:
            cohort.true_ratios[case_id] = r_true

        is_train = i < spec.train_cases
        responder = r_true is not None and float(r_true) >= spec.planted_cutoff
        hazard = spec.responder_hazard if responder else spec.nonresponder_hazard
        os_months, os_event = _draw_survival(rng, hazard, spec.censor_hazard, spec.horizon_months)
        pfs_months, pfs_event = _draw_survival(rng, hazard * 1.5, spec.censor_hazard, spec.horizon_months)
        r_pr = None if r_true is None else float(
            np.clip(round(float(r_true) + rng.normal(0.0, spec.r_pr_noise), 4), 0.0, 1.0))
        metastasis: Optional[bool] = False

        if not is_train:
            k = test_idx
            if k < spec.missing_r_pr:
                r_pr = None
            elif k < spec.missing_r_pr + spec.missing_os:
                os_months = None
            elif k < spec.missing_r_pr + spec.missing_os + spec.missing_metastasis:
                metastasis = None
            elif k < excl:
                metastasis = True
            test_idx += 1

        cohort.cases.append(CaseRecord(
            case_id=case_id, slide_ids=slide_ids, r_pr=r_pr,
            os_months=os_months, os_event=os_event if os_months is not None else False,
            pfs_months=pfs_months, pfs_event=pfs_event,
            metastasis_at_diagnosis=metastasis,
            split="train" if is_train else "test",
        ))
    return cohort


def write_cohort(cohort: Cohort, out_dir):
    out = Path(out_dir)
    write_manifest(out, [cohort.slides[s] for c in cohort.cases for s in c.slide_ids],
                   cohort.cases)
    for sid, slide in cohort.slides.items():
        write_slide(out, slide, cohort.masks.get(sid))
    return out
