import csv
import io
import json

import numpy as np
import pytest

from conflictdecode import cli, pipeline
from conflictdecode.checkpoint import file_sha256
from conflictdecode.config import RunConfig
from conflictdecode.model import init_params, load_params, params_checksum
from conflictdecode.predictor import MLPConflictPredictor

TINY = {
    "model": {"vocab_size": 64, "d_model": 32, "n_layers": 2, "n_heads": 2, "d_ff": 64, "max_seq": 96,
              "steps": 20, "batch_size": 8},
    "forge": {"n_types": 2, "entities_per_type": 8, "n_relations": 2, "n_facts": 10, "n_instances": 12,
              "n_distractors": 2, "predictor_instances": 40, "reading_variants": 1, "open_book_per_fact": 1},
    "predictor": {"epochs": 20, "hidden_dim": 8},
    "decode": {"max_new": 4},
    "eval": {"strategies": ["greedy", "cad", "dcrd"], "sweep_instances": 6, "timing_instances": 4},
    "seeds": {"master": 7},
}


def run(argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli.main(argv, out=out, err=err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(dict(TINY, paths={"artifacts": str(root / "art")})))
    base = ["--config", str(cfg_path)]
    for cmd in ("forge", "train-model", "train-predictor"):
        code, out, err = run([cmd] + base)
        assert code == 0, err
    return root, base


def test_forge_outputs(world):
    root, base = world
    lines = (root / "art" / pipeline.DATASET_FILE).read_text().splitlines()
    assert len(lines) == 12
    assert sum(json.loads(l)["conflict"] for l in lines) == 6
    for name in (pipeline.KB_FILE, pipeline.CORPUS_FILE, pipeline.PREDICTOR_DATA_FILE):
        assert (root / "art" / name).exists()


def test_forge_rerun_is_byte_identical_and_ratio_flag(world, tmp_path):
    root, base = world
    code, out, _ = run(["forge"] + base + ["--artifacts", str(tmp_path)])
    assert code == 0 and "acceptance rate" in out
    assert file_sha256(tmp_path / pipeline.DATASET_FILE) == file_sha256(root / "art" / pipeline.DATASET_FILE)
    code, _, _ = run(["forge"] + base + ["--artifacts", str(tmp_path), "--conflict-ratio", "0"])
    assert code == 0
    lines = (tmp_path / pipeline.DATASET_FILE).read_text().splitlines()
    assert not any(json.loads(l)["conflict"] for l in lines)


def test_train_model_zero_steps_and_rerun(world, tmp_path):
    root, base = world
    art = ["--artifacts", str(tmp_path)]
    assert run(["forge"] + base + art)[0] == 0
    assert run(["train-model"] + base + art + ["--steps", "0"])[0] == 0
    cfg = RunConfig.from_dict(TINY)
    assert params_checksum(load_params(tmp_path / pipeline.MODEL_FILE)) == params_checksum(
        init_params(cfg.model_config()))
    code, out, _ = run(["train-model"] + base + art)
    assert code == 0 and "loss" in out
    assert file_sha256(tmp_path / pipeline.MODEL_FILE) == file_sha256(root / "art" / pipeline.MODEL_FILE)


def test_train_predictor_outputs(world):
    root, base = world
    rows = [json.loads(l) for l in (root / "art" / pipeline.FEATURES_FILE).read_text().splitlines()]
    assert len(rows) == 40 and len(rows[0]["features"]) == 4
    assert set(rows[0]) == {"features", "label", "instance_id"}
    assert MLPConflictPredictor.load(root / "art" / pipeline.PREDICTOR_FILE).n_features_in_ == 4


def test_train_predictor_rerun_and_ablation(world, tmp_path):
    root, base = world
    art = ["--artifacts", str(tmp_path)]
    for cmd in ("forge", "train-model", "train-predictor"):
        assert run([cmd] + base + art)[0] == 0
    assert file_sha256(tmp_path / pipeline.PREDICTOR_FILE) == file_sha256(root / "art" / pipeline.PREDICTOR_FILE)
    code, out, _ = run(["train-predictor"] + base + art + ["--constant-features"])
    assert code == 0
    acc = float(out.split("held-out accuracy ")[1].split()[0])
    majority = float(out.split("majority fraction ")[1].split()[0])
    assert acc == pytest.approx(majority, abs=1e-9) or acc == pytest.approx(1 - majority, abs=1e-9)


def _decode(base, *extra):
    code, out, err = run(["decode"] + base + list(extra))
    assert code == 0, err
    return out.strip()


def test_decode_reductions(world, tmp_path):
    root, base = world
    q = "what is the " + json.loads((root / "art" / pipeline.KB_FILE).read_text())["relations"][0]["name"] + " of " + \
        json.loads((root / "art" / pipeline.KB_FILE).read_text())["entities"][0]["name"] + " ?"
    assert _decode(base, "--question", q, "--strategy", "greedy") == \
        _decode(base, "--question", q, "--strategy", "cad", "--alpha", "0")
    ctx = (root / "art" / pipeline.DATASET_FILE).read_text().splitlines()[0]
    ctx = json.loads(ctx)["context"]
    # a predictor whose output layer is zeroed always predicts conflict (p = 0.5 at threshold 0.5)
    art = tmp_path / "art"
    art.mkdir()
    for name in (pipeline.MODEL_FILE,):
        (art / name).write_bytes((root / "art" / name).read_bytes())
    pred = MLPConflictPredictor.load(root / "art" / pipeline.PREDICTOR_FILE)
    pred.weights_["w2"][:] = 0.0
    pred.weights_["b2"][:] = 0.0
    pred.save(art / pipeline.PREDICTOR_FILE)
    over = base + ["--artifacts", str(art)]
    trace = tmp_path / "trace.json"
    routed = _decode(over, "--question", q, "--context", ctx, "--strategy", "dcrd", "--lambda", "0",
                     "--trace", str(trace))
    assert routed == _decode(over, "--question", q, "--context", ctx, "--strategy", "cad")
    data = json.loads(trace.read_text())
    assert data["route"] == "DCD" and data["steps"]
    _decode(over, "--question", q, "--context", ctx, "--strategy", "dcrd", "--alpha", "1.5", "--lambda", "2",
            "--trace", str(trace))
    for step in json.loads(trace.read_text())["steps"]:
        assert 1.5 / 3 - 1e-12 <= step["alpha_adj"] <= 1.5 + 1e-12
        assert 0.0 <= step["s_hat"] <= 1.0
        assert len(step["p3"]) == 64


def test_eval_and_determinism(world):
    root, base = world
    code, out, err = run(["eval"] + base)
    assert code == 0, err
    assert "greedy" in out and "dcrd routing" in out
    first = (root / "art" / pipeline.REPORT_FILE).read_bytes()
    assert run(["eval"] + base)[0] == 0
    assert (root / "art" / pipeline.REPORT_FILE).read_bytes() == first
    report = json.loads(first)
    meta = report["meta"]
    assert meta["dataset_sha256"] == file_sha256(root / "art" / pipeline.DATASET_FILE)
    assert meta["model_sha256"] == file_sha256(root / "art" / pipeline.MODEL_FILE)
    assert set(report["strategies"]) == {"greedy", "cad", "dcrd"}


def test_eval_timing_sidecar(world):
    root, base = world
    assert run(["eval"] + base + ["--strategies", "greedy", "--timing"])[0] == 0
    assert set(json.loads((root / "art" / pipeline.TIMING_FILE).read_text())) == {"greedy"}


def test_sweep_csv(world):
    root, base = world
    code, out, err = run(["sweep"] + base + ["--axis", "alpha", "--values", "0.5,1.0", "--strategies", "greedy,cad"])
    assert code == 0, err
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0][:3] == ["axis", "value", "strategy"] and len(rows) == 5
    assert (root / "art" / "sweep_alpha.csv").read_text() == out


def test_usage_and_config_errors(world, tmp_path):
    root, base = world
    assert run(["sweep"] + base + ["--axis", "temperature"])[0] == 1
    assert run(["bogus"])[0] == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"forge": {"nope": 1}, "paths": {"artifacts": str(tmp_path / "never")}}))
    code, _, err = run(["forge", "--config", str(bad)])
    assert code == 1 and "forge.nope" in err
    assert not (tmp_path / "never").exists()
    code, _, err = run(["forge", "--config", str(bad.with_name("missing.json"))])
    assert code == 1


def test_runtime_errors_exit_2(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(dict(TINY, paths={"artifacts": str(tmp_path / "empty")})))
    code, _, err = run(["train-model", "--config", str(cfg)])
    assert code == 2 and "forge" in err
