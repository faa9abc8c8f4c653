import csv
import json
import shutil

import pytest
import yaml

from sourcefree.cli import main
from sourcefree.config import parse_config
from sourcefree.errors import ConfigError

TINY = {
    "source": "synth",
    "target": "synth-color_tint",
    "synthetic": {"seed": 0, "n_per_class": 10, "test_per_class": 10},
    "classifier": {"widths": [4, 4, 4]},
    "generator": {"width": 2, "n_blocks": 0},
    "source_train": {"epochs": 1, "batch_size": 32},
    "train": {"epochs": 1, "batch_size": 32, "lr": 1e-3},
    "finetune": {"epochs": 1, "batch_size": 32, "threshold": 0.1},
}


def write_cfg(tmp_path, **extra):
    doc = {**TINY, "output_dir": str(tmp_path / "runs"), **extra}
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


def run_dirs(root, command):
    return sorted(p for p in root.iterdir() if p.name.startswith(command) and not p.name.endswith("summary"))


def test_digit_defaults():
    cfg = parse_config(overrides={"command": "adapt", "source": "svhn", "target": "mnist"})
    t = cfg.train
    assert (t.lr, t.epochs, t.batch_size, t.optimizer) == (1e-4, 30, 128, "adam")
    assert t.weights.as_tuple() == (1.0, 10.0, 0.1)
    assert cfg.threshold == 0.95 and cfg.finetune.lr == 1e-3 and cfg.finetune.epochs == 5
    assert cfg.domain_pair == ("svhn", "mnist")


def test_flag_overrides_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("command: adapt\nsource: svhn\ntarget: mnist\ntrain:\n  lr: 0.0001\n")
    assert parse_config(path).train.lr == 1e-4
    assert parse_config(path, {"train.lr": 0.01}).train.lr == 0.01


def test_negative_epochs_rejected():
    with pytest.raises(ConfigError, match="epochs"):
        parse_config(overrides={"command": "adapt", "source": "svhn", "target": "mnist", "train.epochs": -1})


def test_problems_reported_together(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("command: adapt\nsource: svhn\ntarget: mnist\nbogus: 1\n"
                    "train:\n  lr: fast\n  colour: red\nclassifier_ckpt: /nope/c.pt\n")
    with pytest.raises(ConfigError) as info:
        parse_config(path)
    text = str(info.value)
    assert "bogus" in text and "train.colour" in text and "train.lr" in text
    assert len(info.value.problems) >= 3


def test_missing_checkpoint_listed(tmp_path):
    with pytest.raises(ConfigError) as info:
        parse_config(overrides={"command": "evaluate", "source": "svhn", "target": "mnist",
                                "classifier_ckpt": str(tmp_path / "missing.pt"), "train.epochs": 0})
    probs = info.value.problems
    assert any("missing.pt" in p for p in probs) and any("epochs" in p for p in probs)


@pytest.mark.parametrize("overrides", [
    {"source": "svhn", "target": "synth-color_tint"},
    {"source": "svhn", "target": "cifar"},
    {"source": "svhn"},
])
def test_domain_validation(overrides):
    with pytest.raises(ConfigError):
        parse_config(overrides={"command": "adapt", **overrides})


def test_run_id_depends_on_seed_and_config():
    a = parse_config(overrides={"command": "adapt", "source": "svhn", "target": "mnist"})
    b = parse_config(overrides={"command": "adapt", "source": "svhn", "target": "mnist", "train.lr": 0.01})
    assert a.run_id(0) != a.run_id(1)
    assert a.run_id(0) != b.run_id(0)
    assert a.run_id(0) == parse_config(overrides={"command": "adapt", "source": "svhn",
                                                  "target": "mnist"}).run_id(0)


def test_bad_config_exits_2(tmp_path, capsys):
    code = main(["--command", "adapt", "--source", "svhn", "--target", "mnist", "--epochs", "-2",
                 "--output-dir", str(tmp_path)])
    assert code == 2
    assert "train: epochs" in capsys.readouterr().err
    assert not any(tmp_path.iterdir())


def test_adapt_end_to_end(tmp_path):
    path = write_cfg(tmp_path)
    assert main(["--config", str(path), "--command", "adapt", "--seeds", "0", "1"]) == 0
    root = tmp_path / "runs"
    dirs = run_dirs(root, "adapt")
    assert len(dirs) == 2
    for d in dirs:
        man = json.loads((d / "manifest.json").read_text())
        assert man["state"] == "done" and man["config"]["train"]["lr"] == 1e-3
        assert {"torch", "python", "sourcefree"} <= set(man["versions"])
        # every file on disk is listed in the manifest
        listed = {a["path"] for a in man["artifacts"].values()}
        on_disk = {str(p.relative_to(d)) for p in d.rglob("*") if p.is_file() and p.name != "manifest.json"}
        assert on_disk == listed
        rows = list(csv.DictReader(open(d / "results.csv")))
        assert [r["pipeline"] for r in rows] == ["no_da", "translate", "adabn", "finetune", "translate_finetune"]
        assert (d / "loss_curves.png").exists() and (d / "accuracy.png").exists()
    summary = next(root.glob("adapt-*-summary"))
    assert len(list(csv.DictReader(open(summary / "results.csv")))) == 10
    sig = json.loads((summary / "significance.json").read_text())
    assert set(sig) == {"translate_vs_no_da", "adabn_vs_no_da", "finetune_vs_no_da", "translate_finetune_vs_no_da"}
    assert (summary / "accuracy.png").exists() and (summary / "results.txt").exists()


def test_rerun_reproduces_metrics(tmp_path):
    path = write_cfg(tmp_path)
    assert main(["--config", str(path), "--command", "train-source", "--seeds", "3"]) == 0
    ckpt = next((tmp_path / "runs").glob("train-source-*")) / "classifier.pt"
    args = ["--config", str(path), "--command", "train-generator", "--seeds", "3", "--classifier-ckpt", str(ckpt)]
    assert main(args) == 0
    d = run_dirs(tmp_path / "runs", "train-generator")[0]
    first = (d / "metrics.csv").read_bytes()
    shutil.rmtree(d)
    assert main(args) == 0
    assert (d / "metrics.csv").read_bytes() == first


def test_ablate_emits_five_rows_per_seed(tmp_path):
    path = write_cfg(tmp_path)
    assert main(["--config", str(path), "--command", "ablate", "--seeds", "0"]) == 0
    d = run_dirs(tmp_path / "runs", "ablate")[0]
    rows = list(csv.DictReader(open(d / "results.csv")))
    assert [r["pipeline"] for r in rows] == ["no_da", "no_content", "no_style", "no_entropy", "full"]
    assert (d / "metrics_full.csv").exists()


def test_export_grid_command(tmp_path):
    from sourcefree.models import Generator, save_checkpoint
    from sourcefree.plotting import read_grid

    gpath = tmp_path / "g.pt"
    save_checkpoint(Generator(width=2, n_blocks=0), gpath)
    path = write_cfg(tmp_path)
    assert main(["--config", str(path), "--command", "export-grid", "--generator-ckpt", str(gpath)]) == 0
    d = run_dirs(tmp_path / "runs", "export-grid")[0]
    assert read_grid(d / "grid.png").shape == (3 * 32, 8 * 32, 3)


def test_runtime_failure_marks_manifest(tmp_path, capsys):
    path = write_cfg(tmp_path)
    # svhn files do not exist under this data root
    code = main(["--config", str(path), "--command", "adapt", "--source", "svhn", "--target", "mnist",
                 "--data-root", str(tmp_path / "empty")])
    assert code == 1
    d = run_dirs(tmp_path / "runs", "adapt")[0]
    man = json.loads((d / "manifest.json").read_text())
    assert man["state"] == "failed" and "train_32x32.mat" in man["error"]
    assert "error:" in capsys.readouterr().err


def test_no_grad_clip_flag(tmp_path):
    path = write_cfg(tmp_path)
    assert main(["--config", str(path), "--command", "train-source", "--no-grad-clip"]) == 0
    man = json.loads((run_dirs(tmp_path / "runs", "train-source")[0] / "manifest.json").read_text())
    assert man["config"]["train"]["grad_clip"] is None
