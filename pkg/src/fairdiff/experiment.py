"""Pipeline stages and the real-only vs equal-scale fairness comparison."""

from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import codec, control, data, diffusion, metrics, segmenter

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {exc}")


@dataclass
class RunConfig:
    """Flat settings shared by every command; any field can be set from a key=value file."""

    seed: int = 0
    attribute: str = "group"
    # toy data: comma-separated name:train:test:ratio[:rmin:rmax]
    groups: str = "A:90:50:0.3:16:22,B:10:50:0.6:10:14"
    size: int = 64
    noise: float = 0.3
    blur: float = 2.0
    target: str = "auto"
    n_points: int = codec.DEFAULT_POINTS
    z0: float = codec.DEFAULT_Z0
    # diffusion
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    diffusion_steps: int = 1200
    diffusion_batch: int = 8
    diffusion_lr: float = 1e-3
    diffusion_hidden: int = 128
    latent_mode: str = "zero"
    min_group_size: int = 5
    # control
    control_channels: int = control.CHANNELS
    control_ae_steps: int = 300
    control_steps: int = 600
    control_lr: float = 2e-3
    # segmenter
    seg_width: int = 16
    seg_steps: int = 450
    seg_lr: float = 3e-3
    seg_batch: int = 8
    seg_synth_noise: float = -1.0  # negative: use ``noise``
    # experiment
    n_seeds: int = 5

    def diffusion_config(self, seed=None):
        return diffusion.DiffusionConfig(
            T=self.T, beta_start=self.beta_start, beta_end=self.beta_end,
            steps=self.diffusion_steps, batch_size=self.diffusion_batch, lr=self.diffusion_lr,
            hidden=self.diffusion_hidden, latent_mode=self.latent_mode, n_points=self.n_points,
            z0=self.z0, min_group_size=self.min_group_size,
            seed=self.seed if seed is None else seed)

    def control_config(self, seed=None):
        return control.ControlConfig(
            channels=self.control_channels, ae_steps=self.control_ae_steps,
            steps=self.control_steps, lr=self.control_lr, seed=self.seed if seed is None else seed)

    def seg_config(self, seed=None):
        noise = self.noise if self.seg_synth_noise < 0 else self.seg_synth_noise
        return segmenter.SegConfig(width=self.seg_width, steps=self.seg_steps, lr=self.seg_lr,
                                   batch_size=self.seg_batch, synth_noise=noise,
                                   seed=self.seed if seed is None else seed)

    def toy_spec(self):
        return data.ToyDatasetSpec(parse_groups(self.groups), self.attribute, self.size, self.noise,
                                    self.blur)

    def target_value(self):
        return data.AUTO if str(self.target).lower() == data.AUTO else int(self.target)

    def to_text(self):
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


def parse_groups(text):
    out = {}
    for item in text.split(","):
        parts = item.strip().split(":")
        if len(parts) not in (4, 6):
            raise ValueError(f"group spec {item!r}: expected name:train:test:ratio[:rmin:rmax]")
        fam = data.GroupFamily(int(parts[1]), int(parts[2]), float(parts[3]))
        if len(parts) == 6:
            fam.radius = (float(parts[4]), float(parts[5]))
        if parts[0] in out:
            raise ValueError(f"group {parts[0]!r} listed twice")
        out[parts[0]] = fam
    return out


def parse_config_text(text, base=None):
    """Apply ``key=value`` lines (``#`` comments allowed) onto a :class:`RunConfig`."""
    cfg = base or RunConfig()
    types = {f.name: f.type for f in fields(RunConfig)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _coerce(key, value, types[key]))
    return cfg


def _coerce(key, value, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError:
        raise ValueError(f"config key {key!r}: {value!r} is not a valid {typ}") from None
    return value


# shared stage helpers

def load_pairs(rows):
    masks = np.stack([codec.read_mask_png(r.mask) for r in rows])
    images = np.stack([control.read_image_png(r.image) for r in rows])
    if masks.shape != images.shape:
        raise ValueError(f"image/mask size mismatch: {images.shape} vs {masks.shape}")
    return images, masks


def write_losses(path, curves):
    """``curves`` maps a name to a loss list; rows are (name, step, loss)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["curve", "step", "loss"])
        for name, values in curves.items():
            for i, v in enumerate(values):
                w.writerow([name, i, repr(float(v))])


def train_seg_on_rows(rows, config, rng):
    train = [r for r in rows if r.split == "train"]
    if not train:
        raise ValueError("manifest has no train rows")
    images, masks = load_pairs(train)
    synthetic = np.array([r.provenance == "synthetic" for r in train])
    return segmenter.train_segmenter(images, masks, config, rng, synthetic)


def score_rows(model, rows):
    if not rows:
        return []
    images, masks = load_pairs(rows)
    preds = segmenter.predict(model, images)
    return [metrics.SegScore.of(p, m) for p, m in zip(preds, masks)]


def evaluate_rows(model_or_scores, rows, attributes, expected_groups=None):
    """GroupReports over real test rows; synthetic or unlabelled rows are itemised as exclusions."""
    test = [r for r in rows if r.split == "test"]
    real = [r for r in test if r.provenance == "real"]
    scores = (model_or_scores if isinstance(model_or_scores, list)
              else score_rows(model_or_scores, real))
    reports = []
    for attr in attributes:
        keep, excluded = [], {}
        n_syn = len(test) - len(real)
        if n_syn:
            excluded["synthetic"] = n_syn
        for i, r in enumerate(real):
            g = r.attributes.get(attr)
            if g is None or g == data.UNSPECIFIED:
                excluded["unlabelled"] = excluded.get("unlabelled", 0) + 1
            else:
                keep.append(i)
        present = {real[i].attributes[attr] for i in keep}
        for g in (expected_groups or {}).get(attr, []):
            if g not in present:
                warnings.warn(f"attribute {attr}: group {g} has no test rows; excluded", stacklevel=2)
                excluded[f"empty:{g}"] = 0
        reports.append(metrics.build_group_report(
            attr, [scores[i] for i in keep], [real[i].attributes[attr] for i in keep], excluded))
    return reports


def save_bar_chart(path, title, groups, series):
    """Grouped bars: ``series`` maps a label to per-group values."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=100)
    width = 0.8 / max(len(series), 1)
    x = np.arange(len(groups))
    for k, (label, vals) in enumerate(series.items()):
        ax.bar(x + k * width - 0.4 + width / 2, vals, width, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels([str(g) for g in groups])
    ax.set_title(title)
    lo = min(min(v) for v in series.values())
    ax.set_ylim(max(0.0, lo - 0.05), 1.0)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def report_chart(path, report):
    groups = [r["group"] for r in report.rows]
    save_bar_chart(path, f"Dice by {report.attribute}", groups,
                   {"cup": [r["dice_cup"] for r in report.rows],
                    "rim": [r["dice_rim"] for r in report.rows]})


# fairness experiment

SUMMARY_COLUMNS = ["seed", "run", "dice", "iou", "es_dice", "es_iou", "dice_variance", "fairness",
                   "n_train", "n_synthetic"]


def _stage(name, fn, *args, **kwargs):
    t0 = time.perf_counter()
    try:
        out = fn(*args, **kwargs)
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
        raise StageError(name, exc) from exc
    log.info("stage %s done in %.1fs", name, time.perf_counter() - t0)
    return out


def _summary_row(seed, run, rep, n_train, n_syn):
    return {"seed": seed, "run": run, "dice": rep.overall["dice"], "iou": rep.overall["iou"],
            "es_dice": rep.es_dice, "es_iou": rep.es_iou, "dice_variance": rep.dice_stats.variance,
            "fairness": rep.fairness, "n_train": n_train, "n_synthetic": n_syn}


def run_fairness_seed(cfg, seed, out_dir):
    """Both arms of the comparison for one seed; returns ``(real_report, combined_report, info)``."""
    out_dir = Path(out_dir)
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(6)]
    data_rng, diff_rng, ctrl_rng, plan_rng, synth_rng, seg_rng = streams
    seg_seed = int(seg_rng.integers(2**63))
    attr = cfg.attribute

    rows = _stage("make-toy-data", data.make_toy_dataset, out_dir / "data", cfg.toy_spec(), data_rng)
    test = [r for r in rows if r.split == "test"]
    expected = {attr: sorted(cfg.toy_spec().groups)}

    seg_cfg = cfg.seg_config(seg_seed)
    model_r, loss_r = _stage("train-seg-real", train_seg_on_rows, rows, seg_cfg,
                             np.random.default_rng(seg_seed))
    (rep_r,) = _stage("evaluate-real", evaluate_rows, model_r, rows, [attr], expected)

    plan = _stage("plan", data.plan_equal_scale, rows, attr, cfg.target_value(),
                  int(plan_rng.integers(2**31)))
    need = plan.synth_groups()
    registry, block, curves = diffusion.GroupModelRegistry(), None, {}
    if need:
        dcfg = cfg.diffusion_config(int(diff_rng.integers(2**31)))
        registry = _stage("train-diffusion", diffusion.train_group_models, rows, attr, dcfg, need)
        curves.update({f"diffusion:{g}": registry.get(attr, g).losses for g in registry.groups(attr)})
        real_train = [r for r in rows if r.split == "train"]
        images, masks = load_pairs(real_train)
        pairs = list(zip(masks, images))
        ccfg = cfg.control_config()
        block = _stage("build-control", control.build_control, pairs, ccfg, ctrl_rng)
        curves["control"] = _stage("train-control", control.train_control, pairs, block, ccfg, ctrl_rng)
    combined = _stage("combine", data.execute_plan, plan, rows, registry, block, out_dir / "combined",
                      synth_rng)
    if any(r.provenance != "real" for r in combined if r.split == "test"):
        raise StageError("combine", AssertionError("synthetic rows leaked into the test split"))
    if [r.id for r in combined if r.split == "test"] != [r.id for r in test]:
        raise StageError("combine", AssertionError("combined test split differs from the real one"))
    data.write_manifest(out_dir / "combined" / "manifests" / "combined.csv", combined)

    model_c, loss_c = _stage("train-seg-combined", train_seg_on_rows, combined, seg_cfg,
                             np.random.default_rng(seg_seed))
    (rep_c,) = _stage("evaluate-combined", evaluate_rows, model_c, combined, [attr], expected)

    curves.update({"seg:real": loss_r, "seg:combined": loss_c})
    write_losses(out_dir / "losses.csv", curves)
    metrics.write_report_csv(out_dir / "report_real.csv", [rep_r])
    metrics.write_report_csv(out_dir / "report_combined.csv", [rep_c])
    info = {"n_train_real": sum(r.split == "train" for r in rows),
            "n_train_combined": sum(r.split == "train" for r in combined),
            "n_synthetic": sum(r.provenance == "synthetic" for r in combined)}
    return rep_r, rep_c, info


@dataclass
class ExperimentResult:
    rows: list
    variance_reduced: int
    fairness_increased: int
    n_seeds: int
    seconds: float


def run_fairness_experiment(cfg, out_dir, seeds=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.to_text())
    seeds = list(seeds) if seeds is not None else [cfg.seed + k for k in range(cfg.n_seeds)]
    t0 = time.perf_counter()
    summary, reduced, increased = [], 0, 0
    per_group = {"real": {}, "combined": {}}
    for s in seeds:
        rep_r, rep_c, info = run_fairness_seed(cfg, s, out_dir / f"seed-{s}")
        summary.append(_summary_row(s, "real", rep_r, info["n_train_real"], 0))
        summary.append(_summary_row(s, "combined", rep_c, info["n_train_combined"], info["n_synthetic"]))
        reduced += rep_c.dice_stats.variance < rep_r.dice_stats.variance
        increased += rep_c.fairness > rep_r.fairness
        for run, rep in (("real", rep_r), ("combined", rep_c)):
            for g, v in rep.dice_stats.group_means.items():
                per_group[run].setdefault(g, []).append(v)
        log.info("seed %d: variance %.3g -> %.3g", s, rep_r.dice_stats.variance,
                 rep_c.dice_stats.variance)
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in summary:
            w.writerow({k: (f"{v:.10f}" if isinstance(v, float) else v) for k, v in row.items()})
    with open(out_dir / "deltas.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "delta_es_dice", "delta_es_iou", "delta_dice_variance", "delta_fairness"])
        for real, comb in zip(summary[0::2], summary[1::2]):
            w.writerow([real["seed"]] + [f"{comb[k] - real[k]:.10f}"
                                         for k in ("es_dice", "es_iou", "dice_variance", "fairness")])
    groups = sorted(per_group["real"])
    save_bar_chart(out_dir / "group_dice.png", "mean Dice per group over seeds", groups,
                   {run: [float(np.mean(per_group[run][g])) for g in groups] for run in per_group})
    return ExperimentResult(summary, int(reduced), int(increased), len(seeds), time.perf_counter() - t0)
