import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from hfshield import cli
from hfshield import pipeline as pl
from hfshield.image import decode_png, load_mask_png
from hfshield.tensor import load_tensor

TINY = {
    "dataset": {"n_identities": 2, "size": 16, "n_base_identities": 2},
    "base_train": {"steps": 20, "batch_size": 4},
    "personalize": {"steps": 4, "batch_size": 4},
    "attacks": {"uniform": {"eta": 0.02, "eta_mask": 0.02, "mask_mode": "full", "steps": 3},
                "hf": {"steps": 3}},
    "n_prior_images": 4,
    "n_samples": 3,
}


def write_config(path, out_dir, **overrides):
    raw = json.loads(json.dumps(TINY))
    raw.update(overrides)
    raw["out_dir"] = str(out_dir)
    path.write_text(json.dumps(raw))
    return path


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg_path = write_config(root / "cfg.json", root / "run")
    assert cli.main(["run_all", "--config", str(cfg_path)]) == 0
    return cfg_path, root / "run"


def manifests(run_dir):
    return {p.name: p.read_bytes() for p in sorted((run_dir / "manifests").glob("*.json"))}


# ---- config ----------------------------------------------------------------

def test_default_config_file_matches_code_defaults():
    cfg = pl.load_config(Path(__file__).parents[1] / "configs" / "default.json")
    assert cfg.to_dict() == pl.PipelineConfig().to_dict()
    assert cfg.arms == ("none", "uniform", "hf")
    assert cfg.attacks["uniform"].eta == 0.02
    hf = cfg.attacks["hf"]
    assert (hf.eta, hf.eta_mask, hf.ratio) == (0.01, 0.5, 0.03)
    assert [p.label for p in cfg.purifiers] == ["identity", "bilateral", "diffpure"]
    assert cfg.purifier("diffpure").t_star == 10


def test_config_errors_are_enumerated_together():
    with pytest.raises(pl.ConfigError) as exc:
        pl.config_from_dict({"arms": [], "n_samples": 0, "bogus": 1, "purifiers": [{"kind": "jpeg"}],
                             "attacks": {"hf": {"steps": 0}}, "handoff": "tiff"})
    text = "\n".join(exc.value.errors)
    for fragment in ("arms", "n_samples", "bogus", "jpeg", "steps", "handoff"):
        assert fragment in text
    assert len(exc.value.errors) >= 6


def test_config_rejects_duplicate_purifier_labels():
    with pytest.raises(pl.ConfigError, match="unique"):
        pl.config_from_dict({"purifiers": [{"kind": "bilateral"}, {"kind": "bilateral"}]})


def test_derive_seed_stable_and_label_sensitive():
    assert pl.derive_seed(0, "attack", 1) == pl.derive_seed(0, "attack", 1)
    assert pl.derive_seed(0, "attack", 1) != pl.derive_seed(0, "attack", 2)
    assert pl.derive_seed(0, "attack", 1) != pl.derive_seed(1, "attack", 1)
    assert 0 <= pl.derive_seed(5, "x") < 2 ** 32


# ---- CLI exit codes ----------------------------------------------------------

def test_cli_invalid_config_exit_3(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"arms": ["bogus"], "seed": -2, "dataset": {"size": 2}}))
    assert cli.main(["gen_data", "--config", str(p)]) == 3
    err = capsys.readouterr().err
    assert "bogus" in err and "seed" in err and "size" in err


def test_cli_unreadable_config_exit_3(tmp_path):
    assert cli.main(["gen_data", "--config", str(tmp_path / "missing.json")]) == 3
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    assert cli.main(["gen_data", "--config", str(p)]) == 3


def test_cli_negative_seed_override_exit_3(tmp_path):
    p = write_config(tmp_path / "c.json", tmp_path / "run")
    assert cli.main(["gen_data", "--config", str(p), "--seed", "-1"]) == 3


def test_evaluate_without_generated_images_exit_2(tiny_run, tmp_path, capsys):
    cfg_path, run_dir = tiny_run
    copy = tmp_path / "run"
    shutil.copytree(run_dir, copy)
    (copy / "manifests" / "generate.json").unlink()
    (copy / "manifests" / "evaluate.json").unlink()
    assert cli.main(["evaluate", "--config", str(cfg_path), "--out", str(copy)]) == 2
    assert "generate" in capsys.readouterr().err


def test_missing_upstream_stage_exit_2(tmp_path, capsys):
    p = write_config(tmp_path / "c.json", tmp_path / "run")
    assert cli.main(["attack", "--config", str(p)]) == 2
    assert "train_base" in capsys.readouterr().err


def test_corrupt_artifact_exit_2(tiny_run, tmp_path, capsys):
    cfg_path, run_dir = tiny_run
    copy = tmp_path / "run"
    shutil.copytree(run_dir, copy)
    target = copy / "attacks" / "hf" / "id000" / "adv_0.png"
    target.write_bytes(target.read_bytes() + b"!")
    assert cli.main(["purify", "--config", str(cfg_path), "--out", str(copy)]) == 2
    assert "adv_0.png" in capsys.readouterr().err


def test_unknown_arm_filter_exit_2(tiny_run, tmp_path):
    cfg_path, run_dir = tiny_run
    copy = tmp_path / "run"
    shutil.copytree(run_dir, copy)
    assert cli.main(["attack", "--config", str(cfg_path), "--out", str(copy), "--arm", "jpeg"]) == 2


def test_internal_error_exit_1(tmp_path, monkeypatch):
    p = write_config(tmp_path / "c.json", tmp_path / "run")

    def boom(ws, **_):
        raise RuntimeError("simulated failure")

    monkeypatch.setitem(pl.STAGE_FUNCS, "gen_data", boom)
    assert cli.main(["gen_data", "--config", str(p)]) == 1


# ---- artifacts, manifests, determinism --------------------------------------

def test_rerun_is_noop(tiny_run, capsys):
    cfg_path, run_dir = tiny_run
    before = manifests(run_dir)
    capsys.readouterr()
    assert cli.main(["run_all", "--config", str(cfg_path)]) == 0
    assert "0 item(s) built" in capsys.readouterr().out
    assert manifests(run_dir) == before


def test_manifest_hashes_match_files(tiny_run):
    _, run_dir = tiny_run
    for name, raw in manifests(run_dir).items():
        m = json.loads(raw)
        assert m["stage"] == name[:-5]
        for entry in m["items"].values():
            assert len(entry["input_hash"]) == 64
            for rel, h in entry["outputs"].items():
                assert pl.sha256((run_dir / rel).read_bytes()) == h


def test_edited_output_is_rebuilt(tiny_run, tmp_path):
    cfg_path, run_dir = tiny_run
    copy = tmp_path / "run"
    shutil.copytree(run_dir, copy)
    csv_path = copy / "reports" / "report.csv"
    original = csv_path.read_bytes()
    csv_path.write_text("tampered")
    assert cli.main(["report", "--config", str(cfg_path), "--out", str(copy)]) == 0
    assert csv_path.read_bytes() == original


def test_artifact_formats(tiny_run):
    _, run_dir = tiny_run
    d = run_dir / "attacks" / "hf" / "id000"
    adv = load_tensor(d / "adv.hft")
    delta = load_tensor(d / "delta.hft")
    assert adv.shape == delta.shape == (4, 16, 16, 3)
    png = decode_png((d / "adv_0.png").read_bytes())
    assert np.max(np.abs(png - adv[0])) <= 0.5 / 255 + 1e-12
    assert load_mask_png(d / "mask_0.png").sum() == 8  # ceil(0.03 * 256)
    meta = json.loads((d / "attack.json").read_text())
    assert meta["arm"] == "hf" and len(meta["trace"]) == 3
    assert meta["config"]["eta_mask"] == 0.5
    assert (d / "adv_0__bilateral.png").exists()
    assert load_tensor(run_dir / "generated" / "hf" / "diffpure" / "id001" / "samples.hft").shape == (3, 16, 16, 3)
    dataset = json.loads((run_dir / "data" / "dataset.json").read_text())
    assert len(dataset["identities"]) == 2


def test_budgets_respected_on_disk(tiny_run):
    _, run_dir = tiny_run
    for arm, cap in (("uniform", 0.02), ("hf", 0.5)):
        for i in range(2):
            delta = load_tensor(run_dir / "attacks" / arm / f"id{i:03d}" / "delta.hft")
            assert np.abs(delta).max() <= cap + 1e-12
    assert np.all(load_tensor(run_dir / "attacks" / "none" / "id000" / "delta.hft") == 0.0)


def test_report_outputs(tiny_run):
    _, run_dir = tiny_run
    rep = run_dir / "reports"
    lines = (rep / "report.csv").read_text().splitlines()
    assert lines[0].split(",")[:3] == ["method", "purifier", "n"]
    assert len(lines) == 1 + 1 + 3 * 3  # header, pretrained, arms x purifiers
    for name in ("retention.png", "generation.png", "attack_trace.png", "id000_panel.png"):
        assert (rep / "figures" / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert (rep / "grids" / "id001.png").exists()
    assert "retention" in (rep / "report.txt").read_text()


def test_run_all_twice_bit_identical_csv(tiny_run, tmp_path):
    cfg_path, run_dir = tiny_run
    assert cli.main(["run_all", "--config", str(cfg_path), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "reports" / "report.csv").read_bytes() == \
        (run_dir / "reports" / "report.csv").read_bytes()


def test_seed_override_changes_results(tiny_run, tmp_path):
    cfg_path, run_dir = tiny_run
    out = tmp_path / "seeded"
    assert cli.main(["gen_data", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert cli.main(["train_base", "--config", str(cfg_path), "--out", str(out), "--seed", "9"]) == 0
    assert (out / "models" / "base.ckpt").read_bytes() != (run_dir / "models" / "base.ckpt").read_bytes()


def test_single_arm_filter(tiny_run, tmp_path):
    cfg_path, run_dir = tiny_run
    out = tmp_path / "filtered"
    for stage in ("gen_data", "train_base"):
        assert cli.main([stage, "--config", str(cfg_path), "--out", str(out)]) == 0
    assert cli.main(["attack", "--config", str(cfg_path), "--out", str(out), "--arm", "uniform"]) == 0
    items = json.loads((out / "manifests" / "attack.json").read_text())["items"]
    assert sorted(items) == ["uniform/id000", "uniform/id001"]
    assert (out / "attacks" / "uniform" / "id000" / "delta.hft").read_bytes() == \
        (run_dir / "attacks" / "uniform" / "id000" / "delta.hft").read_bytes()


def test_attack_baseline_reduction_through_pipeline(tmp_path):
    attacks = {"uniform": {"eta": 0.02, "eta_mask": 0.02, "mask_mode": "full", "steps": 3},
               "hf": {"eta": 0.02, "eta_mask": 0.02, "mask_mode": "edge", "ratio": 0.9999, "steps": 3}}
    p = write_config(tmp_path / "c.json", tmp_path / "run", attacks=attacks, arms=["uniform", "hf"])
    for stage in ("gen_data", "train_base", "attack"):
        assert cli.main([stage, "--config", str(p)]) == 0
    for i in range(2):
        u = (tmp_path / "run" / "attacks" / "uniform" / f"id{i:03d}" / "delta.hft").read_bytes()
        h = (tmp_path / "run" / "attacks" / "hf" / f"id{i:03d}" / "delta.hft").read_bytes()
        assert u == h


def test_float_handoff_mode(tmp_path):
    p = write_config(tmp_path / "c.json", tmp_path / "run", handoff="float", arms=["hf"],
                     purifiers=[{"kind": "bilateral"}])
    assert cli.main(["run_all", "--config", str(p)]) == 0
    lines = (tmp_path / "run" / "reports" / "report.csv").read_text().splitlines()
    assert len(lines) == 3
