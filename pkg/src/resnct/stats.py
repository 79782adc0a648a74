"""Reader-study statistics: Wilcoxon rank-sum, ICC(2,1), Cohen's kappa on
dichotomized scores, and odds ratio with a chi-square test."""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import stats as sps

from .errors import ConfigError, NumericalError

LIKERT_LEVELS = (1, 2, 3, 4)
# Scores 1-2 count as low quality, 3-4 as high (diagnostic) quality.
DICHOTOMY_CUT = 3


class TruthLabel(str, Enum):
    REAL = "real"
    SYNTHESIZED = "synthesized"


@dataclass(frozen=True)
class StudyRecord:
    image_id: str
    truth_label: TruthLabel
    reader_id: str
    likert: int
    timestamp: str  # ISO-8601

    def __post_init__(self):
        if self.likert not in LIKERT_LEVELS:
            raise ConfigError(f"likert score must be in {LIKERT_LEVELS}, got {self.likert}")


def write_records_csv(records, fp) -> None:
    writer = csv.writer(fp)
    writer.writerow(["image_id", "truth_label", "reader_id", "likert", "timestamp"])
    for r in records:
        writer.writerow([r.image_id, r.truth_label.value, r.reader_id, r.likert, r.timestamp])


def read_records_csv(fp) -> list[StudyRecord]:
    reader = csv.DictReader(fp)
    records = []
    seen = set()
    for row in reader:
        key = (row["image_id"], row["reader_id"])
        if key in seen:
            raise ConfigError(f"duplicate record for image {key[0]}, reader {key[1]}")
        seen.add(key)
        records.append(
            StudyRecord(
                image_id=row["image_id"],
                truth_label=TruthLabel(row["truth_label"]),
                reader_id=row["reader_id"],
                likert=int(row["likert"]),
                timestamp=row["timestamp"],
            )
        )
    return records


EXACT_WILCOXON_MAX_N = 12


def wilcoxon_rank_sum(x, y) -> tuple[float, float]:
    """Two-sided rank-sum test with mid-ranks for ties. Small samples
    (combined n <= 12) use the exact permutation distribution; larger samples
    use the normal approximation with tie correction and continuity
    correction. Returns (rank-sum of x, p)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size == 0 or y.size == 0:
        raise NumericalError("empty sample")
    n1, n2 = x.size, y.size
    n = n1 + n2
    combined = np.concatenate([x, y])
    ranks = sps.rankdata(combined)
    w = float(ranks[:n1].sum())
    mean_w = n1 * (n + 1) / 2.0
    if n <= EXACT_WILCOXON_MAX_N:
        total = 0
        extreme = 0
        for idx in itertools.combinations(range(n), n1):
            w_perm = float(ranks[list(idx)].sum())
            total += 1
            if abs(w_perm - mean_w) >= abs(w - mean_w) - 1e-12:
                extreme += 1
        return w, extreme / total
    _, tie_counts = np.unique(combined, return_counts=True)
    tie_term = float(np.sum(tie_counts**3 - tie_counts)) / (n * (n - 1))
    var_w = n1 * n2 / 12.0 * (n + 1 - tie_term)
    if var_w <= 0:
        return w, 1.0
    z = (abs(w - mean_w) - 0.5) / math.sqrt(var_w)
    z = max(z, 0.0)
    p = 2.0 * sps.norm.sf(z)
    return w, float(min(p, 1.0))


def likert_summary(records) -> dict:
    """Counts, row percentages, mean and population SD of Likert scores per
    (reader, truth label)."""
    groups: dict[tuple[str, str], list[int]] = {}
    for r in records:
        groups.setdefault((r.reader_id, r.truth_label.value), []).append(r.likert)
    out = {}
    for (reader_id, label), scores in sorted(groups.items()):
        arr = np.asarray(scores)
        counts = {level: int((arr == level).sum()) for level in LIKERT_LEVELS}
        out[(reader_id, label)] = {
            "counts": counts,
            "percentages": {k: 100.0 * v / len(arr) for k, v in counts.items()},
            "mean": float(arr.mean()),
            "sd": float(arr.std()),
            "n": len(arr),
        }
    return out


def icc(scores: np.ndarray) -> dict:
    """ICC(2,1): two-way random effects, absolute agreement, single rater,
    from the mean squares of subjects x raters scores. Returns the estimate,
    the F-test p-value, and a 95% confidence interval. Degenerate variance
    (all scores identical) is flagged undefined."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 3 or scores.shape[1] < 2:
        raise ConfigError("icc needs a subjects x raters matrix, >=3 subjects, >=2 raters")
    n, k = scores.shape
    if np.ptp(scores) == 0:
        return {"icc": None, "undefined": True, "p": None, "ci95": (None, None)}
    grand = scores.mean()
    row_means = scores.mean(axis=1)
    col_means = scores.mean(axis=0)
    ss_rows = k * np.sum((row_means - grand) ** 2)
    ss_cols = n * np.sum((col_means - grand) ** 2)
    ss_total = np.sum((scores - grand) ** 2)
    ss_err = ss_total - ss_rows - ss_cols
    msr = ss_rows / (n - 1)          # between subjects
    msc = ss_cols / (k - 1)          # between raters
    mse = ss_err / ((n - 1) * (k - 1))
    denom = msr + (k - 1) * mse + k * (msc - mse) / n
    if denom == 0:
        return {"icc": None, "undefined": True, "p": None, "ci95": (None, None)}
    value = (msr - mse) / denom

    # F-test of H0: ICC = 0.
    if mse == 0:
        p = 0.0
    else:
        f_obs = msr / mse
        p = float(sps.f.sf(f_obs, n - 1, (n - 1) * (k - 1)))

    # Shrout & Fleiss confidence interval for ICC(2,1).
    if mse == 0:
        ci = (value, value)
    else:
        fj = msc / mse
        alpha = 0.05
        vn = (k - 1) * (n - 1) * (k * value * fj + n * (1 + (k - 1) * value) - k * value) ** 2
        vd = (n - 1) * (k * value * fj) ** 2 + (n * (1 + (k - 1) * value) - k * value) ** 2
        v = vn / vd if vd > 0 else 1.0
        f_lo = sps.f.ppf(1 - alpha / 2, n - 1, v)
        f_hi = sps.f.ppf(1 - alpha / 2, v, n - 1)
        f_obs = msr / mse
        lo = n * (f_obs - f_lo) / (f_lo * (k * fj + k * value * (n - 1) / n - k * value) + n * f_obs) \
            if f_lo > 0 else -1.0
        hi = n * (f_hi * f_obs - 1) / (f_hi * f_obs * n + k * fj + k * value * (n - 1) / n - k * value)
        ci = (float(np.clip(lo, -1.0, 1.0)), float(np.clip(hi, -1.0, 1.0)))
    return {"icc": float(value), "undefined": False, "p": p, "ci95": ci}


def dichotomize(score: int) -> int:
    return 1 if score >= DICHOTOMY_CUT else 0


def cohens_kappa(a, b) -> float:
    """Chance-corrected agreement (p_obs - p_exp)/(1 - p_exp) of two paired
    label vectors over their contingency table."""
    a = list(a)
    b = list(b)
    if len(a) != len(b):
        raise ConfigError(f"paired label vectors differ in length: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise NumericalError("empty label vectors")
    categories = sorted(set(a) | set(b))
    if len(categories) < 2:
        raise NumericalError("need at least 2 categories for kappa")
    index = {c: i for i, c in enumerate(categories)}
    table = np.zeros((len(categories), len(categories)))
    for ai, bi in zip(a, b):
        table[index[ai], index[bi]] += 1
    n = table.sum()
    p_obs = np.trace(table) / n
    p_exp = float(np.sum(table.sum(axis=1) * table.sum(axis=0)) / n**2)
    if p_exp == 1.0:
        raise NumericalError("expected agreement is 1; kappa undefined")
    return float((p_obs - p_exp) / (1.0 - p_exp))


def odds_ratio_chi2(real_scores, syn_scores) -> tuple[float, float, float]:
    """Odds ratio of high (3-4) vs low (1-2) scores between real and
    synthesized groups, with a Pearson chi-square test on the 2x2 table.
    Zero cells get the Haldane 0.5 correction for the OR only."""
    real_scores = list(real_scores)
    syn_scores = list(syn_scores)
    if not real_scores or not syn_scores:
        raise NumericalError("empty score group")
    high_real = sum(dichotomize(s) for s in real_scores)
    low_real = len(real_scores) - high_real
    high_syn = sum(dichotomize(s) for s in syn_scores)
    low_syn = len(syn_scores) - high_syn
    cells = [high_real, low_real, high_syn, low_syn]
    if 0 in cells:
        hr, lr, hs, ls = (c + 0.5 for c in cells)
    else:
        hr, lr, hs, ls = cells
    odds = (hr / lr) / (hs / ls)
    table = np.array([[high_real, low_real], [high_syn, low_syn]], dtype=np.float64)
    row = table.sum(axis=1, keepdims=True)
    col = table.sum(axis=0, keepdims=True)
    expected = row * col / table.sum()
    if (expected == 0).any():
        return float(odds), 0.0, 1.0
    chi2 = float(np.sum((table - expected) ** 2 / expected))
    p = float(sps.chi2.sf(chi2, df=1))
    return float(odds), chi2, p


def scores_from_counts(counts: dict[int, int]) -> list[int]:
    """Expand a {likert: count} table into a flat score list."""
    out = []
    for level in LIKERT_LEVELS:
        out.extend([level] * counts.get(level, 0))
    return out


def study_report(records) -> dict:
    """Full reader-study report: per-reader distributions and means, Wilcoxon
    p per reader, ICC and kappa per truth label and overall, per-reader odds
    ratio with chi-square."""
    summary = likert_summary(records)
    readers = sorted({r.reader_id for r in records})
    by_reader_label: dict[tuple[str, str], dict[str, int]] = {}
    for r in records:
        by_reader_label.setdefault((r.reader_id, r.truth_label.value), {})[r.image_id] = r.likert

    report = {"readers": {}, "agreement": {}}
    for reader_id in readers:
        real = list(by_reader_label.get((reader_id, "real"), {}).values())
        syn = list(by_reader_label.get((reader_id, "synthesized"), {}).values())
        entry = {
            "real": summary.get((reader_id, "real")),
            "synthesized": summary.get((reader_id, "synthesized")),
        }
        if real and syn:
            _, p = wilcoxon_rank_sum(real, syn)
            odds, chi2, chi2_p = odds_ratio_chi2(real, syn)
            entry["wilcoxon_p"] = p
            entry["odds_ratio"] = odds
            entry["chi2"] = chi2
            entry["chi2_p"] = chi2_p
        report["readers"][reader_id] = entry

    if len(readers) == 2:
        r1, r2 = readers
        for label in ("real", "synthesized", "overall"):
            labels = ("real", "synthesized") if label == "overall" else (label,)
            s1 = {}
            s2 = {}
            for lb in labels:
                s1.update(by_reader_label.get((r1, lb), {}))
                s2.update(by_reader_label.get((r2, lb), {}))
            shared = sorted(set(s1) & set(s2))
            if len(shared) < 3:
                continue
            matrix = np.array([[s1[i], s2[i]] for i in shared], dtype=np.float64)
            a = [dichotomize(s1[i]) for i in shared]
            b = [dichotomize(s2[i]) for i in shared]
            try:
                kappa = cohens_kappa(a, b)
            except NumericalError:
                kappa = None
            report["agreement"][label] = {"icc": icc(matrix), "kappa": kappa}
    return report


def format_study_report(report: dict) -> str:
    """Human-readable count table with percentages, one block per reader."""
    out = io.StringIO()
    for reader_id, entry in report["readers"].items():
        out.write(f"Reader {reader_id}\n")
        out.write("  group         1        2        3        4      mean   sd\n")
        for label in ("real", "synthesized"):
            s = entry.get(label)
            if s is None:
                continue
            cells = "  ".join(
                f"{s['counts'][lv]:3d} ({s['percentages'][lv]:4.1f}%)".ljust(7)
                for lv in LIKERT_LEVELS
            )
            out.write(f"  {label:<12}{cells}  {s['mean']:.2f}  {s['sd']:.2f}\n")
        if "wilcoxon_p" in entry:
            out.write(f"  wilcoxon p = {entry['wilcoxon_p']:.4g}   "
                      f"OR = {entry['odds_ratio']:.3f}   chi2 p = {entry['chi2_p']:.4g}\n")
        out.write("\n")
    for label, agree in report.get("agreement", {}).items():
        icc_val = agree["icc"]["icc"]
        icc_txt = "undefined" if icc_val is None else f"{icc_val:.3f}"
        kappa = agree["kappa"]
        kappa_txt = "undefined" if kappa is None else f"{kappa:.3f}"
        out.write(f"Agreement ({label}): ICC = {icc_txt}, kappa = {kappa_txt}\n")
    return out.getvalue()
