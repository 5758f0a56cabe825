"""Manifests, toy datasets and equal-scale group rebalancing."""

from __future__ import annotations

import csv
import io
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import codec, control
from .diffusion import MissingModelError

log = logging.getLogger(__name__)

SPLITS = ("train", "test")
PROVENANCE = ("real", "synthetic")
UNSPECIFIED = "synthetic-unspecified"
AUTO = "auto"
BASE_COLUMNS = ["id", "image", "mask", "split", "provenance"]
LAYOUT = ("masks", "images", "pointclouds", "manifests", "models")


class ManifestError(ValueError):
    def __init__(self, path, problems):
        self.problems = list(problems)
        shown = "\n  ".join(self.problems[:20])
        more = f"\n  ... {len(self.problems) - 20} more" if len(self.problems) > 20 else ""
        super().__init__(f"{path}: {len(self.problems)} problem(s)\n  {shown}{more}")


class SynthesisError(RuntimeError):
    pass


@dataclass
class ManifestRow:
    id: str
    image: Path
    mask: Path
    split: str
    provenance: str
    attributes: dict

    def group(self, attribute):
        return self.attributes[attribute]


def make_layout(root):
    root = Path(root)
    for sub in LAYOUT:
        (root / sub).mkdir(parents=True, exist_ok=True)
    return root


def load_manifest(path, check_files=True):
    """Parse and validate a manifest CSV; every problem is reported at once."""
    path = Path(path)
    base = path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in BASE_COLUMNS if c not in header]
        if missing:
            raise ManifestError(path, [f"missing column(s): {', '.join(missing)}"])
        attrs = [c for c in header if c.startswith("attr:")]
        if not attrs:
            raise ManifestError(path, ["no attribute columns (expected attr:<name>)"])
        raw = list(reader)
    problems, rows, seen = [], [], {}
    for lineno, rec in enumerate(raw, start=2):
        rid = (rec.get("id") or "").strip()
        where = f"line {lineno} (id {rid!r})"
        if not rid:
            problems.append(f"line {lineno}: empty id")
        elif rid in seen:
            problems.append(f"{where}: duplicate id {rid!r} (first on line {seen[rid]})")
        else:
            seen[rid] = lineno
        if rec["split"] not in SPLITS:
            problems.append(f"{where}: unknown split {rec['split']!r}")
        if rec["provenance"] not in PROVENANCE:
            problems.append(f"{where}: unknown provenance {rec['provenance']!r}")
        attributes = {c[5:]: (rec.get(c) or "").strip() for c in attrs}
        empty = [k for k, v in attributes.items() if not v]
        if empty:
            problems.append(f"{where}: empty attribute(s) {', '.join(empty)}")
        image, mask = base / rec["image"], base / rec["mask"]
        if check_files:
            for kind, p in (("image", image), ("mask", mask)):
                if not p.is_file():
                    problems.append(f"{where}: {kind} file not found: {rec[kind]}")
        rows.append(ManifestRow(rid, image, mask, rec["split"], rec["provenance"], attributes))
    if problems:
        raise ManifestError(path, problems)
    return rows


def _rel(p, base):
    return Path(os.path.relpath(Path(p).resolve(), Path(base).resolve())).as_posix()


def manifest_text(rows, base):
    attrs = sorted({k for r in rows for k in r.attributes})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BASE_COLUMNS + [f"attr:{a}" for a in attrs])
    for r in rows:
        w.writerow([r.id, _rel(r.image, base), _rel(r.mask, base), r.split, r.provenance]
                   + [r.attributes.get(a, UNSPECIFIED) for a in attrs])
    return buf.getvalue()


def write_manifest(path, rows):
    """Write rows with paths relative to the manifest's directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(manifest_text(rows, path.parent), encoding="utf-8")
    tmp.replace(path)


def group_counts(rows, attribute, split="train"):
    counts = {}
    for r in rows:
        if split is not None and r.split != split:
            continue
        g = r.attributes.get(attribute)
        counts[g] = counts.get(g, 0) + 1
    return dict(sorted(counts.items(), key=lambda kv: str(kv[0])))


# equal-scale combination

@dataclass
class GroupAction:
    kind: str  # "keep" | "subsample" | "synthesize"
    count: int  # rows kept, or synthetic rows to create
    keep_ids: list = field(default_factory=list)


@dataclass
class CombinePlan:
    attribute: str
    real_counts: dict
    target: int
    actions: dict
    seed: int

    def totals(self):
        out = {}
        for g, a in self.actions.items():
            n = self.real_counts[g]
            out[g] = a.count if a.kind == "subsample" else n + (a.count if a.kind == "synthesize" else 0)
        return out

    def synth_groups(self):
        return [g for g, a in self.actions.items() if a.kind == "synthesize" and a.count > 0]


def plan_equal_scale(rows, attribute, target=AUTO, seed=0):
    """Per-group keep / subsample / synthesize so every group ends with ``target`` train rows.

    ``target`` is an int or ``"auto"`` (largest group). Only train rows are planned.
    """
    train = [r for r in rows if r.split == "train"]
    if not train:
        raise ValueError("no train rows to plan over")
    missing = [r.id for r in train if attribute not in r.attributes]
    if missing:
        raise KeyError(f"attribute {attribute!r} missing on {len(missing)} row(s), e.g. {missing[0]}")
    by_group = {}
    for r in train:
        by_group.setdefault(r.attributes[attribute], []).append(r.id)
    by_group = dict(sorted(by_group.items(), key=lambda kv: str(kv[0])))
    counts = {g: len(ids) for g, ids in by_group.items()}
    if isinstance(target, str):
        if target.lower() != AUTO:
            raise ValueError(f"target must be an integer or 'auto', got {target!r}")
        n_target = max(counts.values())
    else:
        n_target = int(target)
        if n_target < 1:
            raise ValueError(f"target must be positive, got {n_target}")
    rng = np.random.default_rng(seed)
    actions = {}
    for g, ids in by_group.items():
        n = len(ids)
        if n > n_target:
            pick = np.sort(rng.choice(n, size=n_target, replace=False))
            actions[g] = GroupAction("subsample", n_target, [ids[i] for i in pick])
        elif n < n_target:
            actions[g] = GroupAction("synthesize", n_target - n, list(ids))
        else:
            actions[g] = GroupAction("keep", n, list(ids))
    return CombinePlan(attribute, counts, n_target, actions, seed)


def plan_table(plan):
    """Before/after counts as printable lines."""
    lines = [f"{'group':<16}{'real':>8}{'action':>14}{'after':>8}"]
    totals = plan.totals()
    for g, a in plan.actions.items():
        act = a.kind if a.kind == "keep" else f"{a.kind[:5]} {a.count}"
        lines.append(f"{str(g):<16}{plan.real_counts[g]:>8}{act:>14}{totals[g]:>8}")
    return lines


def _synth_masks(model, count, rng, size, max_retries):
    """Sample clouds and decode them; clouds that do not decode to a nested cup/disc are redrawn."""
    h, w = size
    masks, clouds, failures = [], [], 0
    for _ in range(max_retries + 1):
        need = count - len(masks)
        if need == 0:
            break
        for cloud in model.sample(need, rng):
            try:
                m = codec.decode_point_cloud(cloud, w, h)
            except codec.DecodeError:
                failures += 1
                continue
            if not (m == codec.CUP).any():
                failures += 1
                continue
            masks.append(m)
            clouds.append(cloud)
    return masks, clouds, failures


def execute_plan(plan, rows, registry, block, out_dir, rng=None, max_retries=5):
    """Realise a plan: keep/subsample real rows, synthesise the shortfall, pass test rows through.

    Synthetic files are staged in a temporary directory and moved into
    ``out_dir`` only once every group has succeeded.
    """
    rng = rng if rng is not None else np.random.default_rng(plan.seed)
    out_dir = make_layout(out_dir)
    need = plan.synth_groups()
    for g in need:
        if (plan.attribute, g) not in registry:
            raise MissingModelError(f"no diffusion model for {plan.attribute}={g}; nothing was written")
    attrs = sorted({k for r in rows for k in r.attributes})
    keep = {i for a in plan.actions.values() for i in a.keep_ids}
    train = [r for r in rows if r.split == "train" and r.id in keep]
    test = [r for r in rows if r.split == "test"]
    if not need:
        return train + test
    size = codec.read_mask_png(train[0].mask).shape if train else (64, 64)
    if block is None:
        raise ValueError("a control block is required to render synthetic images")
    stage = Path(tempfile.mkdtemp(prefix=".stage-", dir=out_dir))
    try:
        made, report = [], {}
        for g in need:
            n = plan.actions[g].count
            masks, clouds, failures = _synth_masks(registry.get(plan.attribute, g), n, rng, size,
                                                   max_retries)
            report[g] = (len(masks), failures)
            if len(masks) < n:
                summary = ", ".join(f"{k}: {ok}/{plan.actions[k].count} ok, {bad} failed"
                                    for k, (ok, bad) in report.items())
                raise SynthesisError(f"decode failures exceeded the retry cap ({summary})")
            images = control.synth_images(np.stack(masks), block)
            for i, (m, cloud, img) in enumerate(zip(masks, clouds, images)):
                rid = f"syn-{plan.attribute}-{g}-{i:05d}"
                codec.write_mask_png(stage / f"{rid}.png", m)
                control.write_image_png(stage / f"{rid}.img.png", img)
                codec.write_fpc(stage / f"{rid}.fpc", cloud)
                attributes = {a: UNSPECIFIED for a in attrs}
                attributes[plan.attribute] = g
                made.append(ManifestRow(rid, out_dir / "images" / f"{rid}.png",
                                        out_dir / "masks" / f"{rid}.png", "train", "synthetic",
                                        attributes))
        for r in made:
            shutil.move(stage / f"{r.id}.png", r.mask)
            shutil.move(stage / f"{r.id}.img.png", r.image)
            shutil.move(stage / f"{r.id}.fpc", out_dir / "pointclouds" / f"{r.id}.fpc")
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    for g, (ok, bad) in report.items():
        log.info("synthesised %s=%s: %d samples, %d redrawn", plan.attribute, g, ok, bad)
    return train + made + test


# toy datasets

@dataclass
class GroupFamily:
    """Ellipse-pair shape family for one group."""

    train: int
    test: int = 0
    ratio_mean: float = 0.3  # cup/disc area ratio
    ratio_sd: float = 0.04
    radius: tuple = (16.0, 22.0)
    eccentricity: tuple = (0.9, 1.1)


@dataclass
class ToyDatasetSpec:
    groups: dict  # name -> GroupFamily
    attribute: str = "group"
    size: int = 64
    noise: float = 0.05
    blur: float = 0.0

    def validate(self):
        if len(self.groups) < 2:
            raise ValueError("a toy dataset needs at least two groups")
        for name, fam in self.groups.items():
            if not 0.0 < fam.ratio_mean < 1.0:
                raise ValueError(f"group {name}: cup/disc area ratio {fam.ratio_mean} must lie in (0, 1)"
                                 " (cup radius must be smaller than disc radius)")
            if fam.train < 0 or fam.test < 0:
                raise ValueError(f"group {name}: counts must be non-negative")
            if fam.radius[1] >= self.size / 2 - 2:
                raise ValueError(f"group {name}: disc radius {fam.radius[1]} does not fit a {self.size}px image")


def family_mask(fam, rng, size=64):
    r = rng.uniform(*fam.radius)
    e = rng.uniform(*fam.eccentricity)
    ratio = float(np.clip(rng.normal(fam.ratio_mean, fam.ratio_sd), 0.05, 0.9))
    k = np.sqrt(ratio)
    c = (size / 2 + rng.uniform(-2, 2), size / 2 + rng.uniform(-2, 2))
    off = rng.uniform(-0.05, 0.05, size=2) * r
    angle = rng.uniform(0, np.pi)
    return codec.ellipse_pair_mask(size, size, c, (r * e, r / e), (c[0] + off[0], c[1] + off[1]),
                                   (r * e * k, r / e * k), angle)


def make_toy_dataset(out_dir, spec, rng, name="toy"):
    """Write masks, rendered images and ``manifests/<name>.csv``; returns the rows."""
    spec.validate()
    out_dir = make_layout(out_dir)
    rows = []
    for g, fam in spec.groups.items():
        for split, n in (("train", fam.train), ("test", fam.test)):
            for i in range(n):
                rid = f"{g}-{split}-{i:04d}"
                m = family_mask(fam, rng, spec.size)
                (_, img), = control.make_toy_pairs([m], rng, spec.noise, spec.blur)
                mpath, ipath = out_dir / "masks" / f"{rid}.png", out_dir / "images" / f"{rid}.png"
                codec.write_mask_png(mpath, m)
                control.write_image_png(ipath, img)
                rows.append(ManifestRow(rid, ipath, mpath, split, "real", {spec.attribute: g}))
    write_manifest(out_dir / "manifests" / f"{name}.csv", rows)
    return rows


def area_ratio(mask):
    disc = int((np.asarray(mask) >= codec.DISC).sum())
    return int((np.asarray(mask) == codec.CUP).sum()) / disc if disc else float("nan")
