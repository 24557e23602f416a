import json
from pathlib import Path

import pytest

from dermimit.checkpoint import checkpoint_hash
from dermimit.cli import env_overrides, main, resolve_run_config
from dermimit.config import ConfigurationError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL = {
    "model": {"preset": "desk", "image_height": 16, "image_width": 16, "patch_size": 4, "embed_dim": 16,
              "fusion_dim": 16, "backbone_layers": 1, "num_heads": 2, "select_k": 3},
    "train": {"batch_size": 4, "epochs": 1, "cutmix_prob": 0.5},
}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    assert main(["--out-dir", str(root), "make-synthetic", "--n", "12", "--size", "16"], environ={}) == 0
    return root


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


def test_override_precedence(small_config):
    env = {"DERMIMIT_TRAIN__LR": "0.5", "DERMIMIT_MODEL__ENABLED_HEADS": '["disease"]', "OTHER": "x"}
    assert env_overrides(env) == {"model": {"enabled_heads": ["disease"]}, "train": {"lr": 0.5}}
    run = resolve_run_config(str(small_config), env, {"train": {"lr": 0.25, "epochs": None}})
    assert run.train.lr == 0.25
    assert run.train.epochs == 1
    assert run.model.enabled_heads == ("disease",)
    assert run.model.embed_dim == 16


def test_unknown_config_key_is_rejected(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"embed_dims": 3}}))
    with pytest.raises(ConfigurationError, match="embed_dims"):
        resolve_run_config(str(bad), {})


def test_validate_data(dataset, capsys):
    assert main(["validate-data", "--manifest", str(dataset / "manifest.jsonl")], environ={}) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["records"] == 12 and report["disease_counts"] == [4, 4, 4]


def test_validate_data_reports_bad_manifest(tmp_path, capsys):
    (tmp_path / "m.jsonl").write_text('{"image_path": "x.png"}\n')
    assert main(["validate-data", "--manifest", str(tmp_path / "m.jsonl")], environ={}) == 2
    assert "m.jsonl:1" in capsys.readouterr().err


def test_train_eval_attend_predict(dataset, small_config, tmp_path, capsys):
    manifest = str(dataset / "manifest.jsonl")
    run = tmp_path / "run"
    env = {"DERMIMIT_SEED": "3", "DERMIMIT_OUT_DIR": str(run)}
    assert main(["--config", str(small_config), "train", "--manifest", manifest, "--val-manifest", manifest,
                 "--epochs", "2"], environ=env) == 0
    for name in ("train_log.jsonl", "metrics.json", "config.json", "last/meta.json", "best/meta.json"):
        assert (run / name).exists(), name
    assert len((run / "train_log.jsonl").read_text().splitlines()) == 2
    assert json.loads((run / "last" / "meta.json").read_text())["extra"]["seed"] == 3

    ev = tmp_path / "eval"
    assert main(["--out-dir", str(ev), "eval", "--checkpoint", str(run / "last"), "--manifest", manifest,
                 "--predictions"], environ={}) == 0
    metrics = json.loads((ev / "metrics.json").read_text())
    assert set(metrics) == {"disease", "body_part", "attribute"}
    preds = json.loads((ev / "predictions.json").read_text())
    assert len(preds) == 12
    assert {d["name"] for d in preds[0]["diseases"]} == {"scaly erythema", "smooth erythema", "pigmented lesion"}
    assert len(preds[0]["selected_tokens_disease"]) == 3

    att = tmp_path / "att"
    img = str(dataset / "images" / "00000.png")
    assert main(["--out-dir", str(att), "attend", "--checkpoint", str(run / "last"), "--image", img,
                 "--csv", "--head", "attribute"], environ={}) == 0
    assert (att / "00000_attribute_layer-1.png").exists()
    assert len((att / "00000_attribute_layer-1.csv").read_text().splitlines()) == 1 + 16
    assert main(["--out-dir", str(att), "attend", "--checkpoint", str(run / "last"), "--image", img,
                 "--layer", "7"], environ={}) == 2

    capsys.readouterr()
    assert main(["--out-dir", str(tmp_path / "pred"), "predict", "--checkpoint", str(run / "last"), "--image", img,
                 "--vocab", str(dataset / "vocab.json")], environ={}) == 0
    out = json.loads(capsys.readouterr().out)
    assert out[0]["image_path"] == img and out[0]["diseases"][0]["name"]


def test_eval_rejects_vocab_mismatch(dataset, small_config, tmp_path):
    run = tmp_path / "run"
    assert main(["--config", str(small_config), "--out-dir", str(run), "train", "--manifest",
                 str(dataset / "manifest.jsonl")], environ={}) == 0
    vocab = json.loads((dataset / "vocab.json").read_text())
    vocab["disease"]["3"] = "extra"
    (tmp_path / "vocab.json").write_text(json.dumps(vocab))
    code = main(["--out-dir", str(tmp_path / "ev"), "eval", "--checkpoint", str(run / "last"), "--manifest",
                 str(dataset / "manifest.jsonl"), "--vocab", str(tmp_path / "vocab.json")], environ={})
    assert code == 2


def test_crossval_command(dataset, small_config, tmp_path, capsys):
    out = tmp_path / "cv"
    assert main(["--config", str(small_config), "--out-dir", str(out), "crossval", "--manifest",
                 str(dataset / "manifest.jsonl"), "--folds", "2"], environ={}) == 0
    printed = json.loads(capsys.readouterr().out)
    assert "±" in printed["aggregate"]["disease"]["f1"]
    saved = json.loads((out / "crossval.json").read_text())
    assert len(saved["folds"]) == 2


def test_cli_training_is_deterministic(dataset, small_config, tmp_path):
    for name in ("a", "b"):
        assert main(["--config", str(small_config), "--seed", "9", "--out-dir", str(tmp_path / name), "train",
                     "--manifest", str(dataset / "manifest.jsonl")], environ={}) == 0
    assert checkpoint_hash(tmp_path / "a" / "last") == checkpoint_hash(tmp_path / "b" / "last")


@pytest.mark.parametrize("name", ["d_only", "d_lsm", "d_body", "d_attr", "d_body_attr_concat", "d_body_attr_cim"])
def test_ablation_configs_run(name, dataset, tmp_path):
    env = {"DERMIMIT_TRAIN__EPOCHS": "1", "DERMIMIT_TRAIN__BATCH_SIZE": "4"}
    for key, value in SMALL["model"].items():
        if key != "preset":
            env[f"DERMIMIT_MODEL__{key.upper()}"] = json.dumps(value)
    cfg = json.loads((CONFIGS / f"{name}.json").read_text())
    out = tmp_path / name
    assert main(["--config", str(CONFIGS / f"{name}.json"), "--out-dir", str(out), "train", "--manifest",
                 str(dataset / "manifest.jsonl")], environ=env) == 0
    saved = json.loads((out / "config.json").read_text())["model"]
    for key in ("enabled_heads", "lsm_enabled"):
        assert saved[key] == cfg["model"][key]
