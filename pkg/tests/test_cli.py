from __future__ import annotations

import json

import numpy as np
import pytest

from depthseq.cli import EXIT_DIVERGED, EXIT_INVALID, EXIT_OK, main
from depthseq.volume_io import load_label_mask, load_mask

TINY_TRAIN = {
    "model": {"encoder_channels": [4, 8], "d_model": 8, "n_heads": 2, "n_layers": 1, "d_max": 24},
    "max_epochs": 1,
    "batch_size": 4,
}


def run(capsys, *argv) -> tuple[int, dict | None]:
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["phantom", "--count", "12", "--seed", "7", "--out", str(root / "data")]) == EXIT_OK
    cfg = root / "train.json"
    cfg.write_text(json.dumps(TINY_TRAIN))
    assert main(["train", "--config", str(cfg), "--manifest", str(root / "data" / "manifest.json"),
                 "--out", str(root / "run")]) == EXIT_OK
    return root


def test_phantom_defaults_to_data_dir_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("DEPTHSEQ_DATA_DIR", str(tmp_path / "env_data"))
    code, out = run(capsys, "phantom", "--count", 3)
    assert code == EXIT_OK and out["count"] == 3
    man = json.loads((tmp_path / "env_data" / "manifest.json").read_text())
    assert len(man["cases"]) == 3


def test_train_writes_checkpoint_and_report(workspace):
    run_dir = workspace / "run"
    assert (run_dir / "best.ckpt").exists()
    report = json.loads((run_dir / "train_report.json").read_text())
    assert report["epochs"] == 1
    assert json.loads((run_dir / "train_config.json").read_text())["max_epochs"] == 1


def test_seed_override_changes_run(workspace, capsys):
    args = ("train", "--config", workspace / "train.json", "--manifest", workspace / "data" / "manifest.json")
    _, a = run(capsys, *args, "--out", workspace / "s1", "--seed", 1)
    _, b = run(capsys, *args, "--out", workspace / "s2", "--seed", 2)
    assert a["train_loss"] != b["train_loss"]


def test_eval_infer_assign(workspace, capsys):
    manifest = workspace / "data" / "manifest.json"
    code, metrics = run(capsys, "eval", "--config", workspace / "train.json", "--manifest", manifest,
                        "--checkpoint", workspace / "run" / "best.ckpt", "--out", workspace / "eval")
    assert code == EXIT_OK and "mae" in metrics["aggregate"]
    assert (workspace / "eval" / "cases.csv").read_text().startswith("case_id,landmark,z_true")

    vol = workspace / "data" / "case0000.dstvol"
    code, _ = run(capsys, "infer", "--checkpoint", workspace / "run" / "best.ckpt", vol,
                  "--out", workspace / "pred.json")
    pred = json.loads((workspace / "pred.json").read_text())
    assert code == EXIT_OK and len(pred["landmarks"]) == 6
    assert np.allclose(np.asarray(pred["probabilities"]).sum(axis=1), 1.0)

    # an undertrained model may predict non-monotone landmarks, so assign from the manifest truth
    truth = json.loads((workspace / "data" / "manifest.json").read_text())["cases"]["case0000"]["landmarks"]
    (workspace / "truth.json").write_text(json.dumps({"landmarks": truth}))
    code, out = run(capsys, "assign-segments", "--volume", vol, "--calc", workspace / "data" / "case0000_calc.dstvol",
                    "--landmarks-json", workspace / "truth.json", "--out", workspace / "labels.dstvol")
    assert code == EXIT_OK
    labels = load_label_mask(workspace / "labels.dstvol")
    calc = load_mask(workspace / "data" / "case0000_calc.dstvol")
    assert np.count_nonzero(labels.labels) == calc.count()
    assert len(out["volume_mm3"]) == 8


def test_split_hemispheres(workspace, capsys, tmp_path):
    code, out = run(capsys, "split-hemispheres", "--in", workspace / "data" / "case0001.dstvol",
                    "--out-left", tmp_path / "l.dstvol", "--out-right", tmp_path / "r.dstvol")
    assert code == EXIT_OK
    left, right = load_mask(tmp_path / "l.dstvol"), load_mask(tmp_path / "r.dstvol")
    assert not (left.bits & right.bits).any()
    assert out["left_voxels"] + out["right_voxels"] == left.bits.size


def test_flops_and_gradcheck(capsys, tmp_path):
    code, est = run(capsys, "flops", "--dims", "32,32,24", "--d-max", 64)
    assert code == EXIT_OK and est["total"] == pytest.approx(
        est["encoder_flops"] + est["attention_flops"] + est["block_flops"] + est["head_flops"])
    assert est["voxel_attention_flops"] > 100 * est["attention_flops"]
    code, rep = run(capsys, "gradcheck", "--ops", "add", "gelu", "--shapes", 2)
    assert code == EXIT_OK and set(rep["max_rel_error"]) == {"add", "gelu"}
    code, _ = run(capsys, "gradcheck", "--ops", "gelu", "--shapes", 2, "--tol", 0)
    assert code == EXIT_INVALID


def test_ablate(workspace, capsys):
    code, out = run(capsys, "ablate", "--config", workspace / "train.json",
                    "--manifest", workspace / "data" / "manifest.json",
                    "--axis", "right_padding", "--seeds", "0", "--out", workspace / "abl")
    assert code == EXIT_OK and set(out["summary"]) == {"left_padding", "right_padding"}
    assert (workspace / "abl" / "ablation_right_padding.csv").exists()


def test_invalid_inputs_exit_2(workspace, capsys, tmp_path):
    assert main(["infer", "--checkpoint", str(tmp_path / "missing.ckpt"), "x.dstvol"]) == EXIT_INVALID
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"learning_rate": 1}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_INVALID
    assert main(["gradcheck", "--ops", "nope"]) == EXIT_INVALID
    assert main(["assign-segments", "--volume", str(workspace / "data" / "case0000.dstvol"),
                 "--calc", str(workspace / "data" / "case0000_calc.dstvol"),
                 "--landmarks", "9,3,1,1,2,3", "--out", str(tmp_path / "l.dstvol")]) == EXIT_INVALID
    with pytest.raises(SystemExit) as exc:
        main(["split-hemispheres"])
    assert exc.value.code == 2
    capsys.readouterr()


def test_divergence_exits_3(workspace, tmp_path, capsys):
    cfg = dict(TINY_TRAIN, lr=1e12, max_epochs=3)
    path = tmp_path / "hot.json"
    path.write_text(json.dumps(cfg))
    with np.errstate(all="ignore"):
        code = main(["train", "--config", str(path), "--manifest", str(workspace / "data" / "manifest.json"),
                     "--out", str(tmp_path / "o")])
    assert code == EXIT_DIVERGED
    assert "lower the learning rate" in capsys.readouterr().err
