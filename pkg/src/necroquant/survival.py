"""Kaplan-Meier estimation, two-group log-rank test, and cutoff tuning.

Censored observations tied with an event time remain at risk for that
event (censoring is processed after events at the same time).  The
log-rank p-value comes from the chi-square(1) upper tail,
p = erfc(sqrt(statistic / 2)).
"""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import DegenerateTestError, ValidationError

DEFAULT_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass(frozen=True)
class Observation:
    case_id: str
    time: float  # months
    event: bool  # True = death/progression, False = censored

    def __post_init__(self):
        if not (self.time > 0 and math.isfinite(self.time)):
            raise ValidationError(f"case {self.case_id!r}: non-positive time {self.time}")


@dataclass
class KMCurve:
    """Product-limit estimate: one row per distinct event time."""

    times: list  # distinct event times, ascending
    n_risk: list
    deaths: list
    survival: list  # S(t) just after each event time
    censor_times: list = field(default_factory=list)

    def at(self, t: float) -> float:
        s = 1.0
        for tj, sj in zip(self.times, self.survival):
            if tj <= t:
                s = sj
            else:
                break
        return s


def km_estimate(obs) -> KMCurve:
    obs = list(obs)
    if not obs:
        raise ValidationError("cannot estimate a survival curve from zero observations")
    event_times = sorted({o.time for o in obs if o.event})
    curve = KMCurve(times=[], n_risk=[], deaths=[], survival=[],
                    censor_times=sorted(o.time for o in obs if not o.event))
    s = 1.0
    for t in event_times:
        n = sum(1 for o in obs if o.time >= t)
        d = sum(1 for o in obs if o.event and o.time == t)
        s *= 1.0 - d / n
        curve.times.append(t)
        curve.n_risk.append(n)
        curve.deaths.append(d)
        curve.survival.append(s)
    return curve


def logrank(arm_a, arm_b):
    """Two-group log-rank test; returns (chi-square statistic, p-value)."""
    arm_a, arm_b = list(arm_a), list(arm_b)
    if not arm_a or not arm_b:
        raise ValidationError("log-rank test requires two non-empty arms")
    if not any(o.event for o in arm_a + arm_b):
        raise DegenerateTestError("no events in either arm")

    event_times = sorted({o.time for o in arm_a + arm_b if o.event})
    observed_minus_expected = 0.0
    variance = 0.0
    for t in event_times:
        n_a = sum(1 for o in arm_a if o.time >= t)
        n_b = sum(1 for o in arm_b if o.time >= t)
        n = n_a + n_b
        d_a = sum(1 for o in arm_a if o.event and o.time == t)
        d_b = sum(1 for o in arm_b if o.event and o.time == t)
        d = d_a + d_b
        observed_minus_expected += d_a - d * n_a / n
        if n > 1:
            variance += d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1)
    if variance == 0.0:
        raise DegenerateTestError("log-rank variance is zero; arms are untestable")
    statistic = observed_minus_expected ** 2 / variance
    return statistic, chi2_sf1(statistic)


def chi2_sf1(statistic: float) -> float:
    """Upper tail of chi-square with 1 degree of freedom."""
    return math.erfc(math.sqrt(statistic / 2.0))


# --- CONSORT-style staged filtering (ratio -> OS -> PFS) ------------------

def ratio_evaluable(cases):
    return [c for c in cases if c.split == "test" and c.r_pr is not None]


def os_evaluable(cases):
    return [c for c in ratio_evaluable(cases) if c.os_months is not None]


def pfs_evaluable(cases):
    return [c for c in os_evaluable(cases)
            if c.metastasis_at_diagnosis is False and c.pfs_months is not None]


def _endpoint_obs(case, endpoint) -> Observation:
    if endpoint == "os":
        return Observation(case.case_id, case.os_months, case.os_event)
    if endpoint == "pfs":
        return Observation(case.case_id, case.pfs_months, case.pfs_event)
    raise ValidationError(f"unknown endpoint {endpoint!r}; expected 'os' or 'pfs'")


@dataclass
class StratificationResult:
    cutoff: float
    endpoint: str
    evaluable: bool
    reason: str = ""
    responders: list = field(default_factory=list)  # case ids, ratio >= cutoff
    nonresponders: list = field(default_factory=list)
    responder_curve: Optional[KMCurve] = None
    nonresponder_curve: Optional[KMCurve] = None
    statistic: Optional[float] = None
    p_value: Optional[float] = None


def stratify(cases, ratios: dict, endpoint: str, cutoff: float,
             by: str = "dl") -> StratificationResult:
    """Split the evaluable cohort at a ratio cutoff and run the log-rank test.

    `ratios` maps case_id to the model ratio r_DL; cases absent from it
    (e.g. flagged no-tumor) are excluded.  `by="pr"` stratifies on the
    reported ratio instead, for the manual-vs-model comparison.
    """
    pool = os_evaluable(cases) if endpoint == "os" else pfs_evaluable(cases)
    arm_a, arm_b, ids_a, ids_b = [], [], [], []
    for case in pool:
        if by == "pr":
            r = case.r_pr
        else:
            if case.case_id not in ratios:
                continue
            r = float(ratios[case.case_id])
        obs = _endpoint_obs(case, endpoint)
        if r >= cutoff:
            arm_a.append(obs)
            ids_a.append(case.case_id)
        else:
            arm_b.append(obs)
            ids_b.append(case.case_id)
    result = StratificationResult(cutoff=cutoff, endpoint=endpoint, evaluable=False,
                                  responders=ids_a, nonresponders=ids_b)
    if not arm_a or not arm_b:
        result.reason = f"empty {'responder' if not arm_a else 'non-responder'} arm at cutoff {cutoff}"
        return result
    try:
        stat, p = logrank(arm_a, arm_b)
    except DegenerateTestError as e:
        result.reason = str(e)
        return result
    result.evaluable = True
    result.responder_curve = km_estimate(arm_a)
    result.nonresponder_curve = km_estimate(arm_b)
    result.statistic = stat
    result.p_value = p
    return result


def sweep(cases, ratios, endpoint, thresholds=DEFAULT_THRESHOLDS, by="dl"):
    """Evaluate every cutoff; returns (results, best_cutoff).

    Unevaluable cutoffs are kept in the table but excluded from the argmin;
    p ties break toward the higher cutoff.
    """
    if not thresholds:
        raise ValidationError("threshold list is empty")
    results = [stratify(cases, ratios, endpoint, t, by=by) for t in thresholds]
    best = None
    for r in results:
        if not r.evaluable:
            continue
        if best is None or (r.p_value, -r.cutoff) <= (best.p_value, -best.cutoff):
            best = r
    if best is None:
        raise ValidationError(f"no evaluable cutoff for endpoint {endpoint!r}")
    return results, best.cutoff


def format_p(p: Optional[float]) -> str:
    """Two significant digits, scientific notation below 0.001."""
    if p is None:
        return ""
    return f"{p:.1e}" if p < 1e-3 else f"{p:.2g}"


def write_km_csv(path, curve: KMCurve):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "n_risk", "deaths", "survival"])
        for t, n, d, s in zip(curve.times, curve.n_risk, curve.deaths, curve.survival):
            w.writerow([t, n, d, f"{s:.6f}"])


def write_sweep_table(out_dir, thresholds, by_endpoint: dict):
    """Sweep table shaped rows=cutoffs, columns=endpoints, as CSV and JSON."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    endpoints = list(by_endpoint)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cutoff"] + [f"{e}_p" for e in endpoints])
        for i, t in enumerate(thresholds):
            row = [f"{t:g}"]
            for e in endpoints:
                res = by_endpoint[e][0][i]
                row.append(format_p(res.p_value) if res.evaluable else "unevaluable")
            w.writerow(row)
    doc = {
        "note": "no multiple-testing correction applied across cutoffs (exploratory)",
        "cutoffs": list(thresholds),
        "endpoints": {
            e: {
                "best_cutoff": by_endpoint[e][1],
                "results": [{
                    "cutoff": r.cutoff,
                    "evaluable": r.evaluable,
                    "reason": r.reason or None,
                    "statistic": r.statistic,
                    "p_value": r.p_value,
                    "p_display": format_p(r.p_value) if r.evaluable else None,
                    "n_responders": len(r.responders),
                    "n_nonresponders": len(r.nonresponders),
                } for r in by_endpoint[e][0]],
            } for e in endpoints
        },
    }
    (out / "sweep.json").write_text(json.dumps(doc, indent=2) + "\n")
