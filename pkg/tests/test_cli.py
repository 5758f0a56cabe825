import csv

import numpy as np
import pytest
from PIL import Image

from fairdiff import cli, codec, data, metrics, segmenter
from fairdiff.experiment import RunConfig, evaluate_rows, parse_config_text, score_rows

SMALL = """\
size=32
groups=A:8:4:0.3:8:11,B:5:4:0.6:6:9
noise=0.1
blur=1.0
n_points=64
diffusion_steps=20
diffusion_hidden=16
min_group_size=3
control_channels=4
control_ae_steps=5
control_steps=5
seg_width=4
seg_steps=5
n_seeds=1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.cfg"
    cfg.write_text(SMALL)
    assert run(cfg, root / "toy", "make-toy-data") == 0
    return root, cfg


def run(cfg, out, *argv, seed=0):
    return cli.main(["--config", str(cfg), "--seed", str(seed), "--out", str(out), *argv])


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_config_parsing():
    cfg = parse_config_text("# comment\nseed = 4\nnoise=0.2  # trailing\ntarget=25\n")
    assert (cfg.seed, cfg.noise, cfg.target_value()) == (4, 0.2, 25)
    with pytest.raises(ValueError, match="unknown key"):
        parse_config_text("colour=blue")
    with pytest.raises(ValueError, match="not a valid int"):
        parse_config_text("seed=x")
    with pytest.raises(ValueError, match="key=value"):
        parse_config_text("seed")
    assert parse_config_text(RunConfig().to_text()) == RunConfig()


def test_exit_codes(tmp_path, capsys):
    assert cli.main(["no-such-verb"]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour=blue\n")
    assert cli.main(["--config", str(bad), "make-toy-data"]) == 1
    assert cli.main(["--config", str(tmp_path / "missing.cfg"), "make-toy-data"]) == 1
    assert cli.main(["--out", str(tmp_path), "encode", str(tmp_path / "nowhere")]) == 1
    assert cli.main(["--help"]) == 0


def test_toy_data_layout_and_determinism(workspace, tmp_path):
    root, cfg = workspace
    rows = data.load_manifest(root / "toy" / "manifests" / "toy.csv")
    assert data.group_counts(rows, "group") == {"A": 8, "B": 5}
    assert run(cfg, tmp_path / "again", "make-toy-data") == 0
    assert tree_bytes(root / "toy") == tree_bytes(tmp_path / "again")


def test_encode_decode_directories(workspace, tmp_path, capsys):
    root, cfg = workspace
    masks = tmp_path / "masks"
    masks.mkdir()
    for p in sorted((root / "toy" / "masks").glob("*.png"))[:10]:
        (masks / p.name).write_bytes(p.read_bytes())
    assert run(cfg, tmp_path / "pc", "encode", str(masks), "--points", "512") == 0
    assert "10 ok, 0 failed" in capsys.readouterr().out
    assert len(list((tmp_path / "pc").glob("*.fpc"))) == 10
    assert run(cfg, tmp_path / "dec", "decode", str(tmp_path / "pc"), "--reference", str(masks)) == 0
    out = capsys.readouterr().out
    dice = [float(t) for line in out.splitlines() if "dice cup" in line for t in line.split()[3::2]]
    assert len(dice) == 20 and min(dice) >= 0.95

    (masks / "corrupt.png").write_bytes(b"not a png")
    Image.fromarray(np.full((8, 8), 7, np.uint8)).save(masks / "badvalues.png")
    assert run(cfg, tmp_path / "pc2", "encode", str(masks)) == 1
    out = capsys.readouterr().out
    assert "10 ok, 2 failed" in out and "corrupt.png" in out and "badvalues.png" in out


@pytest.fixture(scope="module")
def trained(workspace):
    root, cfg = workspace
    manifest = root / "toy" / "manifests" / "toy.csv"
    assert run(cfg, root / "models", "train-diffusion", str(manifest)) == 0
    assert run(cfg, root / "control", "train-control", str(manifest)) == 0
    return root, cfg, manifest


def test_train_diffusion_outputs(trained, tmp_path):
    root, cfg, manifest = trained
    names = sorted(p.name for p in (root / "models").iterdir())
    assert names == ["diffusion_losses.csv", "group__A.fdnn", "group__A.sched", "group__B.fdnn",
                     "group__B.sched"]
    with open(root / "models" / "diffusion_losses.csv") as fh:
        curves = {r["curve"] for r in csv.DictReader(fh)}
    assert curves == {"A", "B"}
    assert run(cfg, tmp_path / "m2", "train-diffusion", str(manifest)) == 0
    assert tree_bytes(root / "models") == tree_bytes(tmp_path / "m2")


def test_sample_masks(trained, tmp_path, capsys):
    root, cfg, _ = trained
    assert run(cfg, tmp_path / "s", "sample-masks", str(root / "models"), "--group", "B", "--count", "3") == 0
    assert len(list((tmp_path / "s" / "pointclouds").glob("*.fpc"))) == 3
    assert run(cfg, tmp_path / "s2", "sample-masks", str(root / "models"), "--group", "C") == 1


def test_combine(trained, tmp_path, capsys):
    root, cfg, manifest = trained
    assert run(cfg, tmp_path / "nomodel", "combine", str(manifest)) == 1
    assert not [p for p in (tmp_path / "nomodel").rglob("*") if p.is_file()]
    args = ["combine", str(manifest), "--models", str(root / "models"),
            "--control", str(root / "control" / "control.fdnn")]
    assert run(cfg, tmp_path / "c", *args) == 0
    out = capsys.readouterr().out
    assert "after: A=8, B=8" in out
    rows = data.load_manifest(tmp_path / "c" / "manifests" / "combined.csv")
    assert sum(r.provenance == "synthetic" for r in rows) == 3
    assert run(cfg, tmp_path / "c6", *args, "--target", "6") == 0
    assert "after: A=6, B=6" in capsys.readouterr().out
    assert run(cfg, tmp_path / "c2", *args) == 0
    assert tree_bytes(tmp_path / "c") == tree_bytes(tmp_path / "c2")


def test_train_seg_and_evaluate(trained, tmp_path, capsys):
    root, cfg, manifest = trained
    assert run(cfg, tmp_path / "seg", "train-seg", str(manifest)) == 0
    assert run(cfg, tmp_path / "seg2", "train-seg", str(manifest)) == 0
    assert tree_bytes(tmp_path / "seg") == tree_bytes(tmp_path / "seg2")
    ckpt = tmp_path / "seg" / "segmenter.fdnn"
    assert run(cfg, tmp_path / "ev", "evaluate", str(ckpt), str(manifest)) == 0
    assert (tmp_path / "ev" / "dice_group.png").is_file()
    with open(tmp_path / "ev" / "report.csv") as fh:
        table = list(csv.DictReader(fh))
    assert [r["group"] for r in table] == ["A", "B", "ALL"]
    assert sum(int(r["n"]) for r in table[:-1]) == int(table[-1]["n"]) == 8

    # independent recomputation from raw per-sample scores
    rows = data.load_manifest(manifest)
    test = [r for r in rows if r.split == "test"]
    scores = score_rows(segmenter.load_segmenter(ckpt), test)
    per = {}
    for r, s in zip(test, scores):
        per.setdefault(r.attributes["group"], []).append(np.mean([s.dice["cup"], s.dice["rim"]]))
    means = [np.mean(v) for v in per.values()]
    overall = np.mean([x for v in per.values() for x in v])
    es = overall / (1 + np.std(means))
    assert float(table[-1]["es_dice"]) == pytest.approx(es, abs=1e-9)
    assert float(table[-1]["fairness"]) == pytest.approx(-np.var(means), abs=1e-9)
    for r in table[:-1]:
        cup = np.mean([s.dice["cup"] for t, s in zip(test, scores) if t.attributes["group"] == r["group"]])
        assert float(r["dice_cup"]) == pytest.approx(cup, abs=1e-9)
    assert float(table[-1]["es_dice"]) <= overall + 1e-12


def test_evaluate_perfect_stub_and_exclusions():
    class Row:
        def __init__(self, i, g, prov="real"):
            self.id, self.split, self.provenance, self.attributes = str(i), "test", prov, {"g": g}

    rows = [Row(0, "A"), Row(1, "B"), Row(2, data.UNSPECIFIED), Row(3, "A", "synthetic")]
    m = codec.random_ellipse_pair(np.random.default_rng(0))
    perfect = [metrics.SegScore.of(m, m) for _ in range(3)]
    with pytest.warns(UserWarning, match="group C has no test rows"):
        (rep,) = evaluate_rows(perfect, rows, ["g"], {"g": ["A", "B", "C"]})
    assert rep.es_dice == 1.0 and rep.fairness == 0.0
    assert rep.excluded == {"synthetic": 1, "unlabelled": 1, "empty:C": 0}
    assert sum(r["n"] for r in rep.rows) == 2


def test_fairness_experiment_balanced(tmp_path, capsys):
    cfg = tmp_path / "bal.cfg"
    cfg.write_text(SMALL.replace("groups=A:8:4:0.3:8:11,B:5:4:0.6:6:9", "groups=A:4:3:0.3:8:11,B:4:3:0.6:6:9"))
    assert run(cfg, tmp_path / "run", "fairness-experiment") == 0
    with open(tmp_path / "run" / "summary.csv") as fh:
        table = list(csv.DictReader(fh))
    assert [r["run"] for r in table] == ["real", "combined"]
    assert table[1]["n_synthetic"] == "0"
    # no synthesis, same seed stream: identical segmenters and identical reports
    assert table[0]["dice_variance"] == table[1]["dice_variance"]
    seed_dir = tmp_path / "run" / "seed-0"
    assert (seed_dir / "report_real.csv").read_bytes() == (seed_dir / "report_combined.csv").read_bytes()
    assert (tmp_path / "run" / "group_dice.png").is_file()


def test_fairness_experiment_imbalanced_is_deterministic(tmp_path, capsys):
    cfg = tmp_path / "imb.cfg"
    cfg.write_text(SMALL)
    assert run(cfg, tmp_path / "r1", "fairness-experiment") == 0
    assert run(cfg, tmp_path / "r2", "fairness-experiment") == 0
    a, b = tree_bytes(tmp_path / "r1"), tree_bytes(tmp_path / "r2")
    assert a.keys() == b.keys()
    assert a == b
    with open(tmp_path / "r1" / "summary.csv") as fh:
        table = list(csv.DictReader(fh))
    assert table[1]["n_synthetic"] == "3"
    rows = data.load_manifest(tmp_path / "r1" / "seed-0" / "combined" / "manifests" / "combined.csv")
    assert all(r.provenance == "real" for r in rows if r.split == "test")
