"""Reproducible end-to-end stages: forge, train model, train predictor, eval, sweep.

Each stage reads its inputs from and writes its outputs to the artifact
directory named in the run configuration, so stages can be rerun in
isolation. File names are fixed (see the ``*_FILE`` constants).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from . import checkpoint
from .config import RunConfig
from .decoding import DecodeConfig, greedy_draft
from .evaluation import evaluate, sweep, timing_report
from .exceptions import ConfigurationError, InputError
from .forge import build_kb, build_training_corpus, inject_noise, read_jsonl, synthesize_dataset, write_jsonl
from .model import init_params, load_params, save_params, train
from .predictor import MLPConflictPredictor, evaluate_predictor
from .text import build_prompt

KB_FILE = "kb.json"
DATASET_FILE = "dataset.jsonl"
PREDICTOR_DATA_FILE = "predictor_train.jsonl"
CORPUS_FILE = "corpus.jsonl"
MODEL_FILE = "model.ckpt"
PREDICTOR_FILE = "predictor.ckpt"
FEATURES_FILE = "predictor_features.jsonl"
REPORT_FILE = "report.json"
TIMING_FILE = "timing.json"


def artifact(config, name):
    return os.path.join(config.paths.artifacts, name)


def _ensure_dir(config):
    os.makedirs(config.paths.artifacts, exist_ok=True)


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _require(path, stage):
    if not os.path.exists(path):
        raise InputError(f"missing {path}; run '{stage}' first")
    return path


def decode_config(config, **overrides):
    d, p = config.decode, config.predictor
    base = DecodeConfig(d.strategy, d.alpha, d.lambda_, d.max_new, d.draft_len,
                        seed_first_fidelity=d.seed_first_fidelity, feature_source=p.feature_source,
                        hidden_layer=p.hidden_layer)
    return replace(base, **overrides)


def load_world(config):
    """Knowledge base and vocabulary; both are pure functions of the config."""
    kb = build_kb(config.kb_spec())
    vocab = kb.vocabulary()
    if len(vocab) > config.model.vocab_size:
        raise ConfigurationError(f"vocabulary has {len(vocab)} words but model.vocab_size={config.model.vocab_size}")
    return kb, vocab


def training_corpus(config, kb):
    f = config.forge
    return build_training_corpus(kb, seed=config.seed("corpus"), n_distractors=f.n_distractors,
                                 open_book_per_fact=f.open_book_per_fact, reading_variants=f.reading_variants,
                                 update_fraction=f.update_fraction)


def eval_dataset(config, kb, stats=None):
    f = config.forge
    data = synthesize_dataset(kb, f.n_instances, f.conflict_ratio, f.n_distractors,
                              seed=config.seed("dataset"), stats=stats)
    if f.noise_ratio > 0:
        data = inject_noise(data, f.noise_ratio, kb, seed=config.seed("noise"))
    return data


def predictor_dataset(config, kb):
    f = config.forge
    return synthesize_dataset(kb, f.predictor_instances, f.conflict_ratio, f.n_distractors,
                              seed=config.seed("predictor-dataset"))


@dataclass
class ForgeOutput:
    kb: object
    dataset: list
    predictor_dataset: list
    corpus: list
    stats: dict


def run_forge(config):
    config.validate()
    kb, _ = load_world(config)
    stats = {}
    dataset = eval_dataset(config, kb, stats)
    pdata = predictor_dataset(config, kb)
    corpus = training_corpus(config, kb)
    _ensure_dir(config)
    _write_text(artifact(config, KB_FILE), json.dumps(kb.to_dict(), sort_keys=True) + "\n")
    write_jsonl(artifact(config, DATASET_FILE), dataset)
    write_jsonl(artifact(config, PREDICTOR_DATA_FILE), pdata)
    # one JSON string per line: training lines contain newline tokens
    _write_text(artifact(config, CORPUS_FILE), "".join(json.dumps(line) + "\n" for line in corpus))
    stats.update({"corpus_lines": len(corpus), "conflict_lines": sum(i.conflict for i in dataset),
                  "noisy_lines": sum(i.noise for i in dataset), "predictor_instances": len(pdata)})
    return ForgeOutput(kb, dataset, pdata, corpus, stats)


def _read_corpus(config):
    with open(_require(artifact(config, CORPUS_FILE), "forge"), encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def run_train_model(config, log_every=0):
    config.validate()
    _, vocab = load_world(config)
    corpus = [vocab.encode(line) for line in _read_corpus(config)]
    longest = max(len(seq) for seq in corpus)
    if longest > config.model.max_seq:
        raise ConfigurationError(f"corpus line of {longest} tokens exceeds model.max_seq={config.model.max_seq}")
    params = init_params(config.model_config())
    result = train(params, corpus, config.train_config(), pad_id=vocab.pad_id, log_every=log_every)
    _ensure_dir(config)
    digest = save_params(artifact(config, MODEL_FILE), result.params)
    return result, digest


def load_model(config):
    return load_params(_require(artifact(config, MODEL_FILE), "train-model"))


def load_predictor(config):
    return MLPConflictPredictor.load(_require(artifact(config, PREDICTOR_FILE), "train-predictor"))


def draft_feature_matrix(params, vocab, dataset, config):
    """One feature row per instance from its greedy draft."""
    rows = []
    for inst in dataset:
        prompt = build_prompt(vocab, inst.question, inst.context)
        _, _, features, _ = greedy_draft(params, prompt, replace(config, end_id=vocab.end_id))
        rows.append(features)
    return np.stack(rows)


def split_indices(n, holdout, seed):
    order = np.random.default_rng(seed).permutation(n)
    n_test = max(1, int(round(n * holdout)))
    if n_test >= n:
        raise InputError("holdout leaves no training examples")
    return np.sort(order[n_test:]), np.sort(order[:n_test])


@dataclass
class PredictorOutput:
    predictor: object
    report: object
    train_size: int
    test_size: int
    majority_fraction: float
    digest: str


def run_train_predictor(config):
    config.validate()
    kb, vocab = load_world(config)
    params = load_model(config)
    path = _require(artifact(config, PREDICTOR_DATA_FILE), "forge")
    data = read_jsonl(path, kb)
    p = config.predictor
    X = draft_feature_matrix(params, vocab, data, decode_config(config))
    y = np.array([inst.conflict for inst in data])
    if p.constant_features:
        X = np.full_like(X, 0.5)
    with open(artifact(config, FEATURES_FILE), "w", encoding="utf-8", newline="\n") as fh:
        for inst, row in zip(data, X):
            fh.write(json.dumps({"instance_id": inst.id, "label": bool(inst.conflict),
                                 "features": [float(v) for v in row]}) + "\n")
    train_idx, test_idx = split_indices(len(data), p.holdout, config.seed("predictor-split"))
    if len(np.unique(y[train_idx])) < 2:
        raise InputError("predictor training split contains a single class")
    model = MLPConflictPredictor(p.hidden_dim, p.epochs, p.batch_size, p.learning_rate,
                                 seed=config.seed("predictor-init"), threshold=p.threshold)
    model.fit(X[train_idx], y[train_idx])
    report = evaluate_predictor(model, X[test_idx], y[test_idx])
    majority = max(y[test_idx].mean(), 1 - y[test_idx].mean())
    digest = model.save(artifact(config, PREDICTOR_FILE))
    return PredictorOutput(model, report, len(train_idx), len(test_idx), float(majority), digest)


def _strategy_needs_predictor(strategies):
    return any(s == "dcrd" for s in strategies)


def run_meta(config, dataset_path):
    meta = {
        "config_hash": config.hash(),
        "master_seed": config.seeds.master,
        "dataset_sha256": checkpoint.file_sha256(dataset_path),
        "model_sha256": checkpoint.file_sha256(artifact(config, MODEL_FILE)),
    }
    pred = artifact(config, PREDICTOR_FILE)
    if os.path.exists(pred):
        meta["predictor_sha256"] = checkpoint.file_sha256(pred)
    return meta


def run_eval(config, strategies=None, dataset_path=None, timing=False):
    """Evaluate strategies; writes the report and, optionally, a timing sidecar."""
    config.validate()
    strategies = list(strategies or config.eval.strategies)
    kb, vocab = load_world(config)
    dataset_path = dataset_path or artifact(config, DATASET_FILE)
    data = read_jsonl(_require(dataset_path, "forge"), kb)
    params = load_model(config)
    predictor = load_predictor(config) if _strategy_needs_predictor(strategies) else None
    cfg = decode_config(config)
    report = evaluate(data, strategies, params, vocab, predictor, cfg, meta=run_meta(config, dataset_path))
    _write_text(artifact(config, REPORT_FILE), report.to_json() + "\n")
    if timing:
        subset = data[:config.eval.timing_instances]
        seconds = timing_report(subset, strategies, params, vocab, predictor, cfg)
        _write_text(artifact(config, TIMING_FILE), json.dumps(seconds, sort_keys=True, indent=1) + "\n")
    return report


def run_sweep(config, axis, values=None, strategies=None):
    config.validate()
    values = list(values if values is not None else config.eval.sweeps.get(axis, []))
    if not values:
        raise ConfigurationError(f"no values given for sweep axis {axis!r}")
    strategies = list(strategies or config.eval.strategies)
    kb, vocab = load_world(config)
    params = load_model(config)
    predictor = load_predictor(config) if _strategy_needs_predictor(strategies) else None
    f = config.forge
    result = sweep(axis, values, strategies, params, vocab, predictor, decode_config(config), kb=kb,
                   n_instances=config.eval.sweep_instances, n_distractors=f.n_distractors,
                   seed=config.seed("sweep"), base_conflict_ratio=f.conflict_ratio)
    _write_text(artifact(config, f"sweep_{axis}.csv"), result.to_csv())
    return result


def run_all(config, timing=False):
    """forge -> train-model -> train-predictor -> eval under one configuration."""
    forge_out = run_forge(config)
    train_out, model_digest = run_train_model(config)
    pred_out = run_train_predictor(config)
    report = run_eval(config, timing=timing)
    return {"forge": forge_out, "train": train_out, "model_sha256": model_digest,
            "predictor": pred_out, "report": report}


__all__ = ["RunConfig", "run_forge", "run_train_model", "run_train_predictor", "run_eval", "run_sweep", "run_all"]
