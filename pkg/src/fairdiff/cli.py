"""Command-line entry point: ``fairdiff <verb> [options]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import codec, control, data, diffusion, experiment, metrics, segmenter
from .experiment import RunConfig

log = logging.getLogger("fairdiff")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class CommandFailed(Exception):
    def __init__(self, message, code=EXIT_RUNTIME):
        super().__init__(message)
        self.code = code


def _globals(parser, suppress):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=d, help="master seed (overrides the config file)")
    parser.add_argument("--config", type=Path, default=d, help="key=value settings file")
    parser.add_argument("--out", type=Path, default=d, help="output directory")
    parser.add_argument("--threads", type=int, default=d, help="BLAS thread limit")
    parser.add_argument("-v", "--verbose", action="store_true", default=d or False)


def build_parser():
    p = argparse.ArgumentParser(prog="fairdiff", description=__doc__.splitlines()[0])
    _globals(p, suppress=False)
    sub = p.add_subparsers(dest="verb", required=True, metavar="verb")

    def verb(name, help_):
        sp = sub.add_parser(name, help=help_)
        _globals(sp, suppress=True)
        return sp

    sp = verb("make-toy-data", "write a synthetic two-group dataset")
    sp.add_argument("--name", default="toy")

    sp = verb("encode", "masks directory -> boundary point clouds")
    sp.add_argument("masks", type=Path)
    sp.add_argument("--points", type=int, default=None)

    sp = verb("decode", "point clouds directory -> masks")
    sp.add_argument("clouds", type=Path)
    sp.add_argument("--width", type=int, default=None)
    sp.add_argument("--height", type=int, default=None)
    sp.add_argument("--reference", type=Path, help="directory of original masks for Dice reporting")

    sp = verb("train-diffusion", "train one point-cloud diffusion model per group")
    sp.add_argument("manifest", type=Path)
    sp.add_argument("--attribute")
    sp.add_argument("--groups", help="comma-separated subset of groups")

    sp = verb("sample-masks", "draw masks from a trained group model")
    sp.add_argument("models", type=Path)
    sp.add_argument("--attribute")
    sp.add_argument("--group", required=True)
    sp.add_argument("--count", type=int, default=10)

    sp = verb("train-control", "train the mask-conditioned image synthesiser")
    sp.add_argument("manifest", type=Path)

    sp = verb("combine", "equal-scale combination of real and synthetic data")
    sp.add_argument("manifest", type=Path)
    sp.add_argument("--attribute")
    sp.add_argument("--target", help="'auto' or a group size")
    sp.add_argument("--models", type=Path, help="diffusion model directory")
    sp.add_argument("--control", type=Path, help="control block checkpoint")

    sp = verb("train-seg", "train the toy segmenter")
    sp.add_argument("manifest", type=Path)

    sp = verb("evaluate", "per-group segmentation report")
    sp.add_argument("segmenter", type=Path)
    sp.add_argument("manifest", type=Path)
    sp.add_argument("--attributes", help="comma-separated; default: all attributes")

    verb("fairness-experiment", "real-only vs equal-scale comparison over several seeds")
    return p


def load_config(args):
    cfg = RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CommandFailed(f"config file not found: {path}", EXIT_INVALID)
        cfg = experiment.parse_config_text(path.read_text())
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _out(args, default):
    out = Path(args.out) if getattr(args, "out", None) else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _files(directory, pattern):
    directory = Path(directory)
    if not directory.is_dir():
        raise CommandFailed(f"not a directory: {directory}", EXIT_INVALID)
    return sorted(directory.glob(pattern))


def _print_failures(ok, failures):
    print(f"{ok} ok, {len(failures)} failed")
    for name, err in failures:
        print(f"  FAILED {name}: {err}")
    if failures:
        raise CommandFailed(f"{len(failures)} file(s) failed", EXIT_INVALID)


def cmd_make_toy_data(args, cfg):
    out = _out(args, "toy-data")
    rows = data.make_toy_dataset(out, cfg.toy_spec(), np.random.default_rng(cfg.seed), args.name)
    for split in data.SPLITS:
        counts = data.group_counts(rows, cfg.attribute, split)
        print(f"{split}: " + ", ".join(f"{g}={n}" for g, n in counts.items()))
    print(f"manifest: {out / 'manifests' / (args.name + '.csv')}")


def cmd_encode(args, cfg):
    out = _out(args, "pointclouds")
    n = args.points or cfg.n_points
    ok, failures = 0, []
    for path in _files(args.masks, "*.png"):
        try:
            cloud = codec.encode_mask(codec.read_mask_png(path), n, cfg.z0)
        except (ValueError, OSError) as exc:
            failures.append((path.name, exc))
            continue
        codec.write_fpc(out / f"{path.stem}.fpc", cloud)
        ok += 1
    _print_failures(ok, failures)


def cmd_decode(args, cfg):
    out = _out(args, "decoded")
    width, height = args.width or cfg.size, args.height or cfg.size
    ok, failures, dice_lines = 0, [], []
    for path in _files(args.clouds, "*.fpc"):
        try:
            mask = codec.decode_point_cloud(codec.read_fpc(path), width, height)
        except (ValueError, OSError) as exc:
            failures.append((path.name, exc))
            continue
        codec.write_mask_png(out / f"{path.stem}.png", mask)
        ok += 1
        if args.reference:
            ref = Path(args.reference) / f"{path.stem}.png"
            if ref.is_file():
                gt = codec.read_mask_png(ref)
                dice_lines.append(f"{path.stem}: dice cup {metrics.dice(mask, gt, 'cup'):.4f} "
                                  f"disc {metrics.dice(mask, gt, 'disc'):.4f}")
    for line in dice_lines:
        print(line)
    _print_failures(ok, failures)


def _attribute(args, cfg):
    return getattr(args, "attribute", None) or cfg.attribute


def cmd_train_diffusion(args, cfg):
    out = _out(args, "models")
    rows = data.load_manifest(args.manifest)
    attr = _attribute(args, cfg)
    groups = args.groups.split(",") if args.groups else None
    reg = diffusion.train_group_models(rows, attr, cfg.diffusion_config(), groups)
    if not len(reg):
        raise CommandFailed("no group had enough training rows", EXIT_INVALID)
    reg.save(out)
    experiment.write_losses(out / "diffusion_losses.csv",
                            {g: reg.get(attr, g).losses for g in reg.groups(attr)})
    for g in reg.groups(attr):
        losses = reg.get(attr, g).losses
        k = max(1, len(losses) // 10)
        print(f"{attr}={g}: loss {np.mean(losses[:k]):.4f} -> {np.mean(losses[-k:]):.4f}")


def cmd_sample_masks(args, cfg):
    out = _out(args, "samples")
    reg = diffusion.GroupModelRegistry.load(args.models)
    model = reg.get(_attribute(args, cfg), args.group)
    rng = np.random.default_rng(cfg.seed)
    (out / "masks").mkdir(exist_ok=True)
    (out / "pointclouds").mkdir(exist_ok=True)
    failed = 0
    for i, cloud in enumerate(model.sample(args.count, rng)):
        stem = f"{args.group}-{i:05d}"
        codec.write_fpc(out / "pointclouds" / f"{stem}.fpc", cloud)
        try:
            mask = codec.decode_point_cloud(cloud, cfg.size, cfg.size)
        except codec.DecodeError:
            failed += 1
            continue
        codec.write_mask_png(out / "masks" / f"{stem}.png", mask)
    print(f"{args.count - failed} masks written, {failed} undecodable")


def cmd_train_control(args, cfg):
    out = _out(args, "control")
    rows = [r for r in data.load_manifest(args.manifest)
            if r.split == "train" and r.provenance == "real"]
    if not rows:
        raise CommandFailed("manifest has no real train rows", EXIT_INVALID)
    images, masks = experiment.load_pairs(rows)
    pairs = list(zip(masks, images))
    rng = np.random.default_rng(cfg.seed)
    ccfg = cfg.control_config()
    ae_losses = []
    block = control.build_control(pairs, ccfg, rng, callback=lambda s, v: ae_losses.append(v))
    losses = control.train_control(pairs, block, ccfg, rng)
    block.save(out / "control.fdnn")
    experiment.write_losses(out / "control_losses.csv", {"autoencoder": ae_losses, "control": losses})
    print(f"control loss {losses[0]:.4f} -> {np.mean(losses[-50:]):.4f}; saved {out / 'control.fdnn'}")


def cmd_combine(args, cfg):
    out = _out(args, "combined")
    rows = data.load_manifest(args.manifest)
    attr = _attribute(args, cfg)
    target = args.target if args.target is not None else cfg.target
    target = data.AUTO if str(target).lower() == data.AUTO else int(target)
    plan = data.plan_equal_scale(rows, attr, target, cfg.seed)
    need = plan.synth_groups()
    reg = diffusion.GroupModelRegistry.load(args.models) if args.models else diffusion.GroupModelRegistry()
    missing = [g for g in need if (attr, g) not in reg]
    if missing:
        raise CommandFailed(f"no diffusion model for {attr}={','.join(map(str, missing))}; "
                            "nothing was written", EXIT_INVALID)
    block = None
    if need:
        if not args.control:
            raise CommandFailed("--control is required when synthesis is needed", EXIT_INVALID)
        block = control.ControlBlock.load(args.control)
    for line in data.plan_table(plan):
        print(line)
    combined = data.execute_plan(plan, rows, reg, block, out, np.random.default_rng(cfg.seed))
    path = out / "manifests" / "combined.csv"
    data.write_manifest(path, combined)
    after = data.group_counts(combined, attr)
    print("after: " + ", ".join(f"{g}={n}" for g, n in after.items()))
    print(f"manifest: {path}")


def cmd_train_seg(args, cfg):
    out = _out(args, "segmenter")
    rows = data.load_manifest(args.manifest)
    model, losses = experiment.train_seg_on_rows(rows, cfg.seg_config(), np.random.default_rng(cfg.seed))
    segmenter.save_segmenter(out / "segmenter.fdnn", model)
    experiment.write_losses(out / "seg_losses.csv", {"segmenter": losses})
    print(f"segmenter loss {losses[0]:.4f} -> {np.mean(losses[-50:]):.4f}; saved {out / 'segmenter.fdnn'}")


def cmd_evaluate(args, cfg):
    out = _out(args, "evaluation")
    rows = data.load_manifest(args.manifest)
    attrs = (args.attributes.split(",") if args.attributes
             else sorted({k for r in rows for k in r.attributes}))
    if not any(r.split == "test" for r in rows):
        raise CommandFailed("manifest has no test rows", EXIT_INVALID)
    model = segmenter.load_segmenter(args.segmenter)
    reports = experiment.evaluate_rows(model, rows, attrs)
    metrics.write_report_csv(out / "report.csv", reports)
    for rep in reports:
        experiment.report_chart(out / f"dice_{rep.attribute}.png", rep)
        print(f"{rep.attribute}: dice {rep.overall['dice']:.4f} es-dice {rep.es_dice:.4f} "
              f"es-iou {rep.es_iou:.4f} fairness {rep.fairness:.3g}"
              + (f" excluded {rep.excluded}" if rep.excluded else ""))
    print(f"report: {out / 'report.csv'}")


def cmd_fairness_experiment(args, cfg):
    out = _out(args, "fairness-run")
    res = experiment.run_fairness_experiment(cfg, out)
    for real, comb in zip(res.rows[0::2], res.rows[1::2]):
        print(f"seed {real['seed']}: dice variance {real['dice_variance']:.3g} -> "
              f"{comb['dice_variance']:.3g}; es-dice {real['es_dice']:.4f} -> {comb['es_dice']:.4f}")
    print(f"variance reduced in {res.variance_reduced}/{res.n_seeds} seeds; "
          f"fairness increased in {res.fairness_increased}/{res.n_seeds}; {res.seconds:.0f}s")
    print(f"summary: {out / 'summary.csv'}")


COMMANDS = {
    "make-toy-data": cmd_make_toy_data,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "train-diffusion": cmd_train_diffusion,
    "sample-masks": cmd_sample_masks,
    "train-control": cmd_train_control,
    "combine": cmd_combine,
    "train-seg": cmd_train_seg,
    "evaluate": cmd_evaluate,
    "fairness-experiment": cmd_fairness_experiment,
}

INVALID = (ValueError, KeyError, FileNotFoundError, NotADirectoryError)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                COMMANDS[args.verb](args, cfg)
        else:
            COMMANDS[args.verb](args, cfg)
    except CommandFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except INVALID as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
