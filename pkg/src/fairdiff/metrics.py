"""Segmentation fairness metrics and synthesis-quality metrics."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .codec import CUP, DISC

log = logging.getLogger(__name__)

RIM = "rim"
CLASSES = ("cup", "rim")


def _region(mask, cls):
    mask = np.asarray(mask)
    if cls in ("cup", CUP):
        return mask == CUP
    if cls in ("rim", RIM):
        return mask == DISC
    if cls in ("disc", DISC):
        return mask >= DISC
    raise ValueError(f"unknown class {cls!r}")


def _pair(pred, gt, cls):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return _region(pred, cls), _region(gt, cls)


def dice(pred, gt, cls="cup"):
    """``2|A & B| / (|A| + |B|)``; 1.0 when both regions are empty.

    ``cls`` is ``"cup"``, ``"rim"`` (disc minus cup) or ``"disc"`` (disc or cup).
    """
    a, b = _pair(pred, gt, cls)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def iou(pred, gt, cls="cup"):
    a, b = _pair(pred, gt, cls)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


@dataclass
class SegScore:
    dice: dict
    iou: dict

    @classmethod
    def of(cls, pred, gt, classes=CLASSES):
        return cls({c: dice(pred, gt, c) for c in classes}, {c: iou(pred, gt, c) for c in classes})

    def mean_dice(self):
        return float(np.mean(list(self.dice.values())))

    def mean_iou(self):
        return float(np.mean(list(self.iou.values())))


@dataclass
class GroupStats:
    group_means: dict
    overall: float
    stdev: float
    variance: float
    counts: dict = field(default_factory=dict)


def group_stats(values, groups):
    """Unweighted per-group means, pooled overall mean and population spread of the group means."""
    values = np.asarray(values, dtype=np.float64)
    groups = list(groups)
    if len(values) != len(groups):
        raise ValueError("values and groups must align")
    if len(values) == 0:
        raise ValueError("no samples")
    means, counts = {}, {}
    for g in sorted(set(groups), key=str):
        sel = np.array([x == g for x in groups])
        means[g] = float(values[sel].mean())
        counts[g] = int(sel.sum())
    gm = np.array(list(means.values()))
    var = float(np.var(gm)) if len(gm) > 1 else 0.0
    return GroupStats(means, float(values.mean()), float(np.sqrt(var)), var, counts)


def essp(overall, stdev):
    """Equity-scaled performance ``L / (1 + stdev)``."""
    if stdev < 0:
        raise ValueError("stdev must be non-negative")
    return overall / (1.0 + stdev)


def fairness(variances):
    """Negated sum of per-attribute group variances (0 is perfectly fair)."""
    if isinstance(variances, dict):
        variances = list(variances.values())
    variances = list(variances)
    if not variances:
        raise ValueError("need at least one attribute")
    return -float(sum(variances))


@dataclass
class GroupReport:
    attribute: str
    rows: list  # one dict per group
    overall: dict  # overall metric per key (dice_cup, ..., dice, iou)
    dice_stats: GroupStats
    iou_stats: GroupStats
    es_dice: float
    es_iou: float
    es_per_class: dict
    fairness: float
    excluded: dict = field(default_factory=dict)


def build_group_report(attribute, scores, groups, excluded=None):
    """Aggregate per-sample :class:`SegScore` values into a report for one attribute.

    The headline Dice/IoU of a sample is the mean over its classes (cup, rim).
    """
    if not scores:
        raise ValueError(f"no scored samples for attribute {attribute!r}")
    d = [s.mean_dice() for s in scores]
    j = [s.mean_iou() for s in scores]
    ds, js = group_stats(d, groups), group_stats(j, groups)
    rows = []
    for g in ds.group_means:
        idx = [i for i, x in enumerate(groups) if x == g]
        row = {"group": g, "n": len(idx)}
        for c in CLASSES:
            row[f"dice_{c}"] = float(np.mean([scores[i].dice[c] for i in idx]))
            row[f"iou_{c}"] = float(np.mean([scores[i].iou[c] for i in idx]))
        rows.append(row)
    overall = {"n": len(scores), "dice": ds.overall, "iou": js.overall}
    es_per_class = {}
    for c in CLASSES:
        for name, key in (("dice", "dice"), ("iou", "iou")):
            vals = [getattr(s, key)[c] for s in scores]
            st = group_stats(vals, groups)
            overall[f"{name}_{c}"] = st.overall
            es_per_class[f"es_{name}_{c}"] = essp(st.overall, st.stdev)
    return GroupReport(attribute, rows, overall, ds, js, essp(ds.overall, ds.stdev),
                       essp(js.overall, js.stdev), es_per_class, fairness([ds.variance]),
                       dict(excluded or {}))


REPORT_COLUMNS = ["attribute", "group", "n", "dice_cup", "dice_rim", "iou_cup", "iou_rim",
                  "es_dice", "es_iou", "fairness",
                  "es_dice_cup", "es_dice_rim", "es_iou_cup", "es_iou_rim"]


def report_rows(report):
    """CSV rows: one per group, then an ``ALL`` row carrying the aggregate columns."""
    out = []
    for r in report.rows:
        row = {k: "" for k in REPORT_COLUMNS}
        row.update(attribute=report.attribute, group=r["group"], n=r["n"])
        for k in ("dice_cup", "dice_rim", "iou_cup", "iou_rim"):
            row[k] = f"{r[k]:.10f}"
        out.append(row)
    mean_dice = report.overall["dice"]
    if report.es_dice > mean_dice + 1e-12:
        raise AssertionError(f"ES-Dice {report.es_dice} exceeds Dice {mean_dice}")
    row = {"attribute": report.attribute, "group": "ALL", "n": report.overall["n"]}
    for k in ("dice_cup", "dice_rim", "iou_cup", "iou_rim"):
        row[k] = f"{report.overall[k]:.10f}"
    row["es_dice"] = f"{report.es_dice:.10f}"
    row["es_iou"] = f"{report.es_iou:.10f}"
    row["fairness"] = f"{report.fairness:.10f}"
    for k, v in report.es_per_class.items():
        row[k] = f"{v:.10f}"
    out.append(row)
    return out


def write_report_csv(path, reports):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for rep in reports:
            w.writerows(report_rows(rep))


# synthesis quality

@dataclass
class FeatureSet:
    vectors: np.ndarray
    provenance: str = "real"
    extractor: str = "pixels"

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("feature vectors must be finite")


def _vectors(x):
    return x.vectors if isinstance(x, FeatureSet) else np.atleast_2d(np.asarray(x, dtype=np.float64))


def cosine_distance_matrix(gen, real):
    """``D = (1 - cos) / 2`` between every generated and real vector."""
    g, r = _vectors(gen), _vectors(real)
    if len(g) == 0 or len(r) == 0:
        raise ValueError("feature sets must be non-empty")
    gn = np.linalg.norm(g, axis=1)
    rn = np.linalg.norm(r, axis=1)
    if np.any(gn == 0) or np.any(rn == 0):
        raise ValueError("zero-norm feature vector: cosine similarity undefined")
    cos = np.clip((g / gn[:, None]) @ (r / rn[:, None]).T, -1.0, 1.0)
    return (1.0 - cos) / 2.0


def mmd(generated, real):
    """Mean over generated samples of the distance to their nearest real sample."""
    d = cosine_distance_matrix(generated, real)
    return float(d.min(axis=1).mean())


def cov(generated, real):
    """Fraction of real samples that are the nearest neighbour of some generated sample."""
    d = cosine_distance_matrix(generated, real)
    matched = np.unique(np.argmin(d, axis=1))
    return len(matched) / d.shape[1]


def frechet_distance(mu1, sigma1, mu2, sigma2, eps=1e-6):
    """Frechet distance between two Gaussians.

    The cross term uses ``Tr((S1 S2)^{1/2}) = sum sqrt(eig(S1^{1/2} S2 S1^{1/2}))``
    with symmetric eigendecompositions throughout.
    """
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    s1, s2 = np.atleast_2d(sigma1), np.atleast_2d(sigma2)
    w1, v1 = np.linalg.eigh(s1)
    if w1.min() < -1e-10 * max(1.0, abs(w1).max()) or np.linalg.cond(s1) > 1e12:
        warnings.warn("ill-conditioned covariance; adding eps*I", RuntimeWarning, stacklevel=2)
        s1 = s1 + eps * np.eye(len(s1))
        s2 = s2 + eps * np.eye(len(s2))
        w1, v1 = np.linalg.eigh(s1)
    root1 = (v1 * np.sqrt(np.clip(w1, 0.0, None))) @ v1.T
    inner = root1 @ s2 @ root1
    inner = 0.5 * (inner + inner.T)
    lam = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.sqrt(lam).sum())


def fid(real, synthetic):
    r, s = _vectors(real), _vectors(synthetic)
    if r.shape[1] != s.shape[1]:
        raise ValueError(f"feature widths differ: {r.shape[1]} vs {s.shape[1]}")
    if len(r) <= r.shape[1] or len(s) <= s.shape[1]:
        log.warning("fewer samples than feature dimensions; covariance is rank-deficient")
    sr = np.atleast_2d(np.cov(r, rowvar=False))
    ss = np.atleast_2d(np.cov(s, rowvar=False))
    return max(0.0, frechet_distance(r.mean(axis=0), sr, s.mean(axis=0), ss))


def pixel_features(images):
    """Flattened raw pixels."""
    imgs = np.asarray(images, dtype=np.float64)
    return FeatureSet(imgs.reshape(len(imgs), -1), extractor="pixels")


def projected_features(images, dim=32, grid=16, seed=0):
    """Block-average to ``grid x grid`` then apply a fixed seeded Gaussian projection."""
    imgs = np.asarray(images, dtype=np.float64)
    n, h, w = imgs.shape
    if h % grid or w % grid:
        raise ValueError(f"image size {h}x{w} not divisible by grid {grid}")
    small = imgs.reshape(n, grid, h // grid, grid, w // grid).mean(axis=(2, 4)).reshape(n, -1)
    proj = np.random.default_rng(seed).standard_normal((grid * grid, dim)) / np.sqrt(grid * grid)
    return FeatureSet(small @ proj, extractor=f"proj{dim}-grid{grid}-seed{seed}")
