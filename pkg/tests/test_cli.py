import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from mvexplain.arch import load_checkpoint, predict_proba_batch
from mvexplain.cli import build_parser, main
from mvexplain.core import default_schema, load_dataset
from mvexplain.metrics import evaluate_predictions

CONFIG = {
    "data": {"synthetic": {"n_samples": 12, "schema": default_schema(32, 32).to_dict()}},
    "model": {"backbone": {"feature_dim": 16, "channels": [4, 8, 16]}},
    "train": {"epochs": 2, "learning_rate": 1e-3},
    "explain": {"head_epochs": 2, "params": {"n_segments": 9, "lime_samples": 100, "shap_samples": 64}},
    "eval": {"max_localization": 2},
}


def tree_hash(root: Path, exclude=()) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in exclude:
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.json").write_text(json.dumps(CONFIG))
    assert main(["generate", "--config", str(d / "cfg.json"), "--out", str(d / "data"), "--seed", "3"]) == 0
    assert main(["train", "--config", str(d / "cfg.json"), "--arch", "cdv", "--data", str(d / "data"),
                 "--out", str(d / "run")]) == 0
    return d


def test_generate_round_trip_and_determinism(workdir, tmp_path):
    ds = load_dataset(workdir / "data", default_schema(32, 32))
    assert len(ds) == 12
    assert main(["generate", "--config", str(workdir / "cfg.json"), "--out", str(tmp_path / "again"),
                 "--seed", "3"]) == 0
    assert tree_hash(workdir / "data", {"run_config.json"}) == tree_hash(tmp_path / "again", {"run_config.json"})
    resolved = json.loads((workdir / "data" / "run_config.json").read_text())
    assert resolved["data"]["synthetic"]["seed"] == 3


def test_generate_rejects_bad_field(workdir, tmp_path, capsys):
    bad = json.loads(json.dumps(CONFIG))
    bad["data"]["synthetic"]["style_gap"] = 1.5
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    assert main(["generate", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) != 0
    assert "style_gap" in capsys.readouterr().err


def test_generate_unwritable_out(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["generate", "--out", str(blocker / "sub")]) != 0
    assert "error" in capsys.readouterr().err


def test_train_outputs(workdir):
    run = workdir / "run"
    for name in ("train_curves.csv", "train_summary.json", "train_curves.png", "run_config.json",
                 "checkpoint/manifest.json", "checkpoint/split.json"):
        assert (run / name).exists(), name
    assert json.loads((run / "run_config.json").read_text())["model"]["kind"] == "CDV"


def test_stored_accuracy_reproduced_from_checkpoint(workdir):
    run = workdir / "run"
    model = load_checkpoint(run / "checkpoint")
    ds = load_dataset(workdir / "data", default_schema(32, 32))
    test_ids = json.loads((run / "checkpoint" / "split.json").read_text())["test"]
    test = [ds.get(i) for i in test_ids]
    probs = predict_proba_batch(model, np.stack([np.stack(s.views) for s in test]))
    acc = float(np.mean(probs.argmax(1) == [s.label for s in test]))
    assert acc == json.loads((run / "train_summary.json").read_text())["final_test_acc"]


def test_arch_choices():
    parser = build_parser()
    action = next(a for a in parser._subparsers._group_actions[0].choices["train"]._actions
                  if a.dest == "arch")
    assert set(action.choices) == {"csv", "ssg", "psg", "cdv"}
    with pytest.raises(SystemExit):
        parser.parse_args(["train", "--arch", "mvcnn"])


def test_explain_all_views_and_determinism(workdir):
    ckpt = workdir / "run" / "checkpoint"
    before = tree_hash(ckpt)
    args = ["explain", "--config", str(workdir / "cfg.json"), "--ckpt", str(ckpt), "--data", str(workdir / "data"),
            "--sample", "s0001", "--view", "all", "--method", "kernel_shap"]
    assert main(args + ["--out", str(workdir / "ex1")]) == 0
    assert main(args + ["--out", str(workdir / "ex2")]) == 0
    out = workdir / "ex1" / "s0001"
    assert len(list(out.glob("*_overlay.png"))) == 5
    assert len(list(out.glob("*.npy"))) == 5
    for k in range(5):
        assert np.array_equal(np.load(out / f"view_{k}_kernel_shap.npy"),
                              np.load(workdir / "ex2" / "s0001" / f"view_{k}_kernel_shap.npy"))
    assert tree_hash(ckpt) == before


def test_explain_exact_guard(workdir, capsys):
    rc = main(["explain", "--config", str(workdir / "cfg.json"), "--ckpt", str(workdir / "run" / "checkpoint"),
               "--out", str(workdir / "ex3"), "--method", "exact_shapley", "--n-segments", "50", "--view", "0"])
    assert rc != 0
    assert "kernel_shap" in capsys.readouterr().err


def test_explain_missing_checkpoint(workdir, capsys):
    rc = main(["explain", "--ckpt", str(workdir / "nope"), "--data", str(workdir / "data"),
               "--out", str(workdir / "ex4")])
    assert rc != 0
    assert "checkpoint" in capsys.readouterr().err


def test_eval_report_matches_saved_scores(workdir):
    out = workdir / "ev"
    assert main(["eval", "--config", str(workdir / "cfg.json"), "--ckpt", str(workdir / "run" / "checkpoint"),
                 "--out", str(out)]) == 0
    report = json.loads((out / "eval_report.json").read_text())
    rows = [ln.split(",") for ln in (out / "scores.csv").read_text().splitlines()[1:]]
    labels = np.array([int(r[1]) for r in rows])
    probs = np.array([[float(x) for x in r[2:]] for r in rows])
    again = evaluate_predictions(probs, labels, ["Normal", "Defective"])
    assert report["accuracy"] == again.accuracy and report["auc"] == again.auc
    assert report["explanation"]["n"] >= 1
    assert 0 <= report["explanation"]["pointing_game"] <= 1


def test_eval_missing_labels(workdir, tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    rc = main(["eval", "--ckpt", str(workdir / "run" / "checkpoint"), "--data", str(tmp_path / "empty"),
               "--out", str(tmp_path / "o")])
    assert rc != 0
    assert "labels" in capsys.readouterr().err


def test_cli_does_not_touch_dataset(workdir):
    before = tree_hash(workdir / "data")
    main(["eval", "--ckpt", str(workdir / "run" / "checkpoint"), "--data", str(workdir / "data"),
          "--out", str(workdir / "ev2")])
    assert tree_hash(workdir / "data") == before
