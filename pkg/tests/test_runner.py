import json
import statistics

import numpy as np
import pytest
import torch
import yaml

from scadcl.runner import (
    ConfigError, ExperimentConfig, config_from_dict, evaluate_checkpoint, load_config, pretrain_teacher, report,
    run_experiment,
)
from scadcl.benchmark import build_stream
from scadcl.vit import load_checkpoint, clone_into_teacher


def tiny(tmp_path, **method):
    return {
        "stream": {"num_tasks": 3, "train_per_subclass": 4, "test_per_subclass": 2, "image_size": 16,
                   "pretext_classes": 3, "pretext_train_per_class": 8, "pretext_test_per_class": 4},
        "backbone": {"image_size": 16, "patch_size": 8, "embed_dim": 16, "num_blocks": 2, "num_heads": 2},
        "optimizer": {"lr": 0.05},
        "method": {"kind": "scad", "buffer_size": 20, "epochs": 1, "batch_size": 8, "replay_batch_size": 8,
                   **method},
        "pretrain": {"epochs": 40, "batch_size": 8, "cache_dir": str(tmp_path / "cache")},
    }


def test_defaults_and_round_trip():
    c = config_from_dict({})
    assert c == ExperimentConfig(backbone=c.backbone)
    assert c.backbone.total_classes == c.stream.num_labels
    assert config_from_dict(c.to_dict()) == c
    assert c.method.lr == c.to_dict()["optimizer"]["lr"] and "lr" not in c.to_dict()["method"]


def test_config_errors_name_every_bad_field():
    with pytest.raises(ConfigError) as info:
        config_from_dict({
            "stream": {"num_tasks": "six", "bogus": 1},
            "method": {"lr": 0.1, "epochs": 2.5},
            "optimizer": {"clip_norm": -1},
            "extra": {},
        })
    text = "\n".join(info.value.problems)
    for needle in ("stream.num_tasks", "stream.bogus", "method.lr: unknown", "method.epochs", "optimizer",
                   "unknown section 'extra'"):
        assert needle in text


def test_config_cross_section_check():
    with pytest.raises(ConfigError, match="image_size"):
        config_from_dict({"backbone": {"image_size": 16}})
    with pytest.raises(ConfigError, match="buffer_size"):
        config_from_dict({"method": {"kind": "finetune"}})


def test_yaml_loading(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(tiny(tmp_path)))
    c = load_config(p)
    assert c.method.lr == 0.05 and c.backbone.embed_dim == 16 and c.stream.num_tasks == 3


@pytest.fixture(scope="module")
def cfg_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("runner")


def test_pretraining_beats_untrained_and_is_cached(cfg_dir):
    c = config_from_dict(tiny(cfg_dir))
    path, rep = pretrain_teacher(c)
    assert rep["pretext_pwjs"] > rep["pretext_pwjs_untrained"]
    again, rep2 = pretrain_teacher(c)
    assert again == path and rep2 == rep
    student = load_checkpoint(path)
    teacher = clone_into_teacher(student)
    x = torch.rand(10, 3, 16, 16)
    assert torch.equal(student.eval()(x), teacher(x))


def test_run_writes_results_and_is_deterministic(cfg_dir):
    c = config_from_dict(tiny(cfg_dir))
    a = run_experiment(c, seed=0, out_dir=cfg_dir / "a")
    b = run_experiment(c, seed=0, out_dir=cfg_dir / "b")
    assert (cfg_dir / "a" / "results_matrix.csv").read_bytes() == (cfg_dir / "b" / "results_matrix.csv").read_bytes()
    s = json.loads((cfg_dir / "a" / "summary.json").read_text())
    assert s["ar_f"] == a.ar_f and s["method"] == "scad" and len(s["task_seconds"]) == 3
    assert a.teacher_checksum_start == a.teacher_checksum_end == b.teacher_checksum_end
    assert np.isnan(a.matrix.values[0, 1])


def test_resume_matches_uninterrupted(cfg_dir):
    c = config_from_dict(tiny(cfg_dir))
    full = run_experiment(c, seed=0, out_dir=cfg_dir / "full")
    resumed = run_experiment(c, seed=0, out_dir=cfg_dir / "resumed",
                             resume_from=cfg_dir / "full" / "snapshots" / "task_01")
    assert (cfg_dir / "full" / "results_matrix.csv").read_bytes() == \
        (cfg_dir / "resumed" / "results_matrix.csv").read_bytes()
    assert resumed.teacher_checksum_start == full.teacher_checksum_start


def test_evaluate_checkpoint(cfg_dir):
    c = config_from_dict(tiny(cfg_dir))
    run_experiment(c, seed=1, out_dir=cfg_dir / "ev", snapshots=False)
    out = evaluate_checkpoint(cfg_dir / "ev" / "student.npz", build_stream(c.stream))
    assert len(out["per_task_pwjs"]) == 3 and 0 <= out["mean_pwjs"] <= 100


def test_joint_is_single_row(cfg_dir):
    c = config_from_dict(tiny(cfg_dir, kind="joint", buffer_size=0))
    r = run_experiment(c, seed=0)
    assert r.matrix.num_tasks == 1 and r.fg_f is None and r.teacher_checksum_start is None


def test_report_mean_and_sample_std(tmp_path):
    vals = {"scad": [10.0, 14.0, 18.0], "er": [5.0]}
    for m, ars in vals.items():
        for i, ar in enumerate(ars):
            d = tmp_path / f"{m}{i}"
            d.mkdir()
            (d / "summary.json").write_text(json.dumps({"method": m, "ar_f": ar, "fg_f": ar / 2}))
    rows = {r["method"]: r for r in report([tmp_path], tmp_path / "r.csv")}
    assert rows["scad"]["ar_f_mean"] == 14.0 and rows["scad"]["ar_f_std"] == statistics.stdev([10, 14, 18]) == 4.0
    assert rows["er"]["runs"] == 1 and rows["er"]["ar_f_std"] == 0.0
    assert (tmp_path / "r.csv").read_text().splitlines()[0].startswith("method,runs")
