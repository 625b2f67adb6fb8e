import json

import numpy as np
import pytest
import yaml
from PIL import Image

from instance_i2i import cli
from instance_i2i.config import ConfigError, resolve_config
from instance_i2i.datasets import SyntheticSceneSpec, generate_synthetic, load_manifest, merge_manifests, split
from instance_i2i.losses import LossWeights, NonFiniteLossError
from instance_i2i.training import Trainer

TINY = ["--set", "network.base_channels=4", "--set", "network.n_residual_blocks=1", "--set", "network.mlp_dim=8",
        "--set", "train.image_size=16", "--set", "train.instance_size=8", "--set", "data.synthetic_images=6"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    lines = [ln for ln in out.splitlines() if ln.strip()]
    payload = json.loads(lines[-1]) if code == 0 else None
    return code, lines, payload, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--synthetic", "--iterations", "3", "--seed", "7", "--out", str(out), *TINY]) == 0
    return out


def _read_log(path):
    return [json.loads(line) for line in open(path)]


def _png_dir(tmp_path, n=2, size=16):
    d = tmp_path / "inputs"
    d.mkdir()
    rng = np.random.default_rng(0)
    for i in range(n):
        Image.fromarray(rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)).save(d / f"im{i}.png")
    return d


# -- train ----------------------------------------------------------------------------


def test_train_twice_identical(tmp_path, capsys):
    results = []
    for name in ("a", "b"):
        code, lines, payload, _ = run(capsys, "train", "--synthetic", "--iterations", "4", "--seed", "7",
                                      "--out", str(tmp_path / name), *TINY)
        assert code == 0
        results.append((lines[-2], _read_log(payload["log"])))
        assert set(payload) >= {"config", "log", "checkpoint"}
    (fa, la), (fb, lb) = results
    assert fa == fb and fa.startswith("final iteration 4")
    strip = lambda log: [{k: v for k, v in e.items() if k != "wall_time"} for e in log]  # noqa: E731
    assert strip(la) == strip(lb) and len(la) == 4


def test_train_writes_resolved_config(trained):
    cfg = yaml.safe_load((trained / "config.yaml").read_text())
    assert cfg["train"]["seed"] == 7 and cfg["train"]["iterations"] == 3
    assert cfg["data"]["domains"] == ["sunny", "night"] and cfg["network"]["base_channels"] == 4
    meta = json.loads((trained / "checkpoints" / "final" / "meta.json").read_text())
    assert meta["run_config"]["train"]["seed"] == 7


def test_train_without_dataset_is_config_error(tmp_path, capsys):
    code, _, _, err = run(capsys, "train", "--iterations", "1", "--out", str(tmp_path))
    assert code == 1 and "dataset" in err


def test_train_with_missing_manifest_is_data_error(tmp_path, capsys):
    code, _, _, err = run(capsys, "train", "--manifest", str(tmp_path / "nope.json"), "--out", str(tmp_path))
    assert code == 2 and "nope.json" in err


def test_zero_lambda_g_excluded_from_total(tmp_path, capsys):
    code, _, payload, _ = run(capsys, "train", "--synthetic", "--iterations", "2", "--out", str(tmp_path),
                              "--set", "loss.lambda_g=0", *TINY)
    assert code == 0
    w = LossWeights(lambda_g=0.0)
    for entry in _read_log(payload["log"]):
        terms = {k[5:]: v for k, v in entry.items() if k.startswith("term.")}
        assert entry["global_recon"] > 0
        expected = sum(w.for_term(n) * v for n, v in terms.items())
        assert entry["total"] == pytest.approx(expected, rel=1e-6)
        with_g = expected + 10 * (terms["image_g_X"] + terms["image_g_Y"])
        assert entry["total"] < with_g


def test_checkpoint_every(tmp_path, capsys):
    code, _, payload, _ = run(capsys, "train", "--synthetic", "--iterations", "4", "--out", str(tmp_path),
                              "--set", "train.checkpoint_every=2", *TINY)
    assert code == 0 and [p[-11:] for p in payload["checkpoints"]] == ["iter_000002", "iter_000004"]


def test_numeric_failure_exit_code(tmp_path, capsys, monkeypatch):
    def boom(self, *a, **k):
        raise NonFiniteLossError("image_g_X", float("nan"), 0)

    monkeypatch.setattr(Trainer, "fit", boom)
    code, _, _, err = run(capsys, "train", "--synthetic", "--iterations", "1", "--out", str(tmp_path), *TINY)
    assert code == 3 and "image_g_X" in err


def test_train_from_manifest_on_disk(tmp_path, capsys):
    code, _, payload, _ = run(capsys, "generate-synthetic", "--out", str(tmp_path / "corpus"), "--n-images", "4",
                              "--image-size", "24")
    assert code == 0
    code, _, _, _ = run(capsys, "train", "--manifest", payload["manifest"], "--iterations", "1",
                        "--out", str(tmp_path / "run"), *TINY)
    assert code == 0


# -- translate ----------------------------------------------------------------------------


def test_translate_outputs_and_determinism(tmp_path, trained, capsys):
    inputs = _png_dir(tmp_path)
    ck = str(trained / "checkpoints" / "final")
    code, _, p1, _ = run(capsys, "translate", "--checkpoint", ck, "--input-dir", str(inputs),
                         "--target-domain", "night", "--n-styles", "3", "--seed", "1", "--out-dir", str(tmp_path / "a"))
    assert code == 0 and len(p1["outputs"]) == 6 and len(p1["grids"]) == 2
    assert Image.open(p1["grids"][0]).size == (16 * 4, 16)
    code, _, p2, _ = run(capsys, "translate", "--checkpoint", ck, "--input-dir", str(inputs),
                         "--target-domain", "1", "--n-styles", "3", "--seed", "1", "--out-dir", str(tmp_path / "b"))
    assert code == 0
    for a, b in zip(p1["outputs"] + p1["grids"], p2["outputs"] + p2["grids"]):
        assert open(a, "rb").read() == open(b, "rb").read()


def test_translate_errors(tmp_path, trained, capsys):
    inputs = _png_dir(tmp_path)
    code, *_ = run(capsys, "translate", "--checkpoint", str(tmp_path / "none"), "--input-dir", str(inputs),
                   "--target-domain", "1", "--out-dir", str(tmp_path / "o"))
    assert code == 2
    code, *_ = run(capsys, "translate", "--checkpoint", str(trained / "checkpoints" / "final"),
                   "--input-dir", str(inputs), "--target-domain", "rainy", "--out-dir", str(tmp_path / "o"))
    assert code == 1


def test_translate_rejects_tampered_version(tmp_path, trained, capsys):
    import shutil

    ck = tmp_path / "ck"
    shutil.copytree(trained / "checkpoints" / "final", ck)
    meta = json.loads((ck / "meta.json").read_text())
    meta["format_version"] = 0
    (ck / "meta.json").write_text(json.dumps(meta))
    code, _, _, err = run(capsys, "translate", "--checkpoint", str(ck), "--input-dir", str(_png_dir(tmp_path)),
                          "--target-domain", "1", "--out-dir", str(tmp_path / "o"))
    assert code == 2 and "version" in err


# -- evaluate -------------------------------------------------------------------------------


def test_evaluate_is_from_probabilities(tmp_path, capsys):
    probs = np.repeat(np.eye(4), 3, axis=0)
    np.save(tmp_path / "p.npy", probs)
    code, _, payload, _ = run(capsys, "evaluate", "--metrics", "is", "--probs", str(tmp_path / "p.npy"),
                              "--out-dir", str(tmp_path / "ev"))
    assert code == 0
    report = json.loads(open(payload["reports"]["is"]).read())
    assert report["value"] == pytest.approx(4.0, abs=1e-6) and report["metric"] == "is"


def test_evaluate_diversity_repeatable(tmp_path, trained, capsys):
    values = []
    for name in ("a", "b"):
        code, _, payload, _ = run(capsys, "evaluate", "--checkpoint", str(trained / "checkpoints" / "final"),
                                  "--synthetic", "--metrics", "diversity", "--n-inputs", "1", "--pairs", "2",
                                  "--seed", "3", "--out-dir", str(tmp_path / name))
        assert code == 0
        values.append(json.loads(open(payload["reports"]["diversity"]).read()))
    assert values[0] == values[1] and values[0]["extractor_id"]


def test_evaluate_all_metrics_from_data(tmp_path, trained, capsys):
    code, _, payload, _ = run(capsys, "evaluate", "--checkpoint", str(trained / "checkpoints" / "final"),
                              "--synthetic", "--metrics", "is,cis,hue_shift", "--n-inputs", "1",
                              "--out-dir", str(tmp_path))
    assert code == 0 and set(payload["reports"]) == {"is", "cis", "hue_shift"}


def test_evaluate_unknown_metric(tmp_path, capsys):
    code, _, _, err = run(capsys, "evaluate", "--metrics", "fid", "--out-dir", str(tmp_path))
    assert code == 1 and "fid" in err


def test_evaluate_too_few_inputs(tmp_path, trained, capsys):
    code, *_ = run(capsys, "evaluate", "--checkpoint", str(trained / "checkpoints" / "final"), "--synthetic",
                   "--metrics", "diversity", "--n-inputs", "500", "--out-dir", str(tmp_path))
    assert code == 2


def test_evaluate_malformed_probabilities(tmp_path, capsys):
    np.save(tmp_path / "p.npy", np.full((3, 2), 0.3))
    code, *_ = run(capsys, "evaluate", "--metrics", "is", "--probs", str(tmp_path / "p.npy"),
                   "--out-dir", str(tmp_path))
    assert code == 2


# -- dataset utilities --------------------------------------------------------------------------


def test_dataset_stats_synthetic(capsys):
    code, lines, payload, _ = run(capsys, "dataset-stats", "--synthetic", "--seed", "7")
    assert code == 0
    x, y = generate_synthetic(SyntheticSceneSpec(seed=7))
    train, test = split(merge_manifests(x, y))
    assert payload["domains"]["sunny"]["images"] == 64 and payload["domains"]["night"]["images"] == 64
    assert payload["domains"]["sunny"]["boxes"] == sum(len(r.boxes) for r in x.records)
    assert payload["total"]["train"] == len(train) == 109 and payload["total"]["test"] == len(test) == 19
    assert any(ln.startswith("total") for ln in lines)


def test_dataset_stats_manifest_matches_split(tmp_path, capsys):
    run(capsys, "generate-synthetic", "--out", str(tmp_path / "c"), "--n-images", "10", "--image-size", "16")
    code, _, payload, _ = run(capsys, "dataset-stats", str(tmp_path / "c"))
    train, test = split(load_manifest(tmp_path / "c"))
    assert code == 0 and (payload["total"]["train"], payload["total"]["test"]) == (len(train), len(test)) == (17, 3)


def test_dataset_stats_empty_manifest(tmp_path, capsys):
    (tmp_path / "annotations.json").write_text(json.dumps({"domains": ["a", "b"], "images": []}))
    code, _, payload, _ = run(capsys, "dataset-stats", str(tmp_path))
    assert code == 0 and payload["total"] == {"images": 0, "boxes": 0, "train": 0, "test": 0}


def test_export_styles_and_ablation(tmp_path, trained, capsys):
    code, _, payload, _ = run(capsys, "export-styles", "--checkpoint", str(trained / "checkpoints" / "final"),
                              "--synthetic", "--limit", "2", "--out", str(tmp_path / "s.csv"))
    assert code == 0 and open(payload["styles"]).readline().startswith("domain,granularity,source_id,s0")
    code, _, payload, _ = run(capsys, "ablation", "--synthetic", "--iterations", "1", "--n-inputs", "2",
                              "--pairs", "2", "--out", str(tmp_path / "ab.json"), *TINY)
    assert code == 0 and len(json.loads(open(payload["report"]).read())["settings"]) == 2


def test_usage_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--bogus"])
    assert e.value.code == 1
    code, *_ = run(capsys, "train", "--synthetic", "--set", "train.nope=1")
    assert code == 1


# -- config layering ------------------------------------------------------------------------------


def test_config_precedence(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("train:\n  seed: 3\n  iterations: 20\nloss:\n  lambda_g: 5\n")
    cfg = resolve_config(path, ["train.iterations=30"], {"train.seed": 9, "train.lr_gen": None})
    assert cfg.train.seed == 9  # flag beats file
    assert cfg.train.iterations == 30  # --set beats file
    assert cfg.loss.lambda_g == 5  # file beats default
    assert cfg.loss.lambda_o == 10 and cfg.train.lr_gen == 1e-4  # defaults survive


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        resolve_config(None, ["network.weight_sharing=sometimes"])
    with pytest.raises(ConfigError):
        resolve_config(None, ["loss"])
    (tmp_path / "bad.yaml").write_text("- a\n- b\n")
    with pytest.raises(ConfigError):
        resolve_config(tmp_path / "bad.yaml")
