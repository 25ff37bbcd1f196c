"""Accuracy, routing and timing evaluation of decoding strategies."""
from __future__ import annotations

import csv
import io
import json
import re
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .decoding import ROUTE_DYNAMIC, DecodeConfig, decode
from .exceptions import ConfigurationError, ConflictDecodeError
from .forge import inject_noise, synthesize_dataset
from .predictor import ConstantConflictPredictor
from .seeding import derive_seed
from .text import build_prompt

SWEEP_AXES = ("conflict_ratio", "alpha", "lambda", "noise_ratio")
SWEEP_HEADER = ("axis", "value", "strategy", "accuracy", "conflict_acc", "nonconflict_acc")
ORACLE = "oracle"

_PUNCT = re.compile(r"[^\w\s]")
_ARTICLE = re.compile(r"^(?:(?:a|an|the)\s+)+")


def normalize_answer(text):
    text = _PUNCT.sub(" ", text.lower())
    text = " ".join(text.split())
    return _ARTICLE.sub("", text)


def match_answer(generated, gold):
    """Normalized containment: lowercase, no punctuation, collapsed spaces, no leading articles."""
    return normalize_answer(gold) in normalize_answer(generated)


@dataclass
class InstanceRecord:
    id: str
    conflict: bool
    noise: bool
    answer: str
    correct: bool
    route: str | None = None
    predicted_conflict: bool | None = None
    error: str | None = None
    seconds: float = 0.0


@dataclass
class StrategyResult:
    strategy: str
    n: int
    n_conflict: int
    n_nonconflict: int
    correct_conflict: int
    correct_nonconflict: int
    failures: int
    mean_seconds: float
    routing_confusion: dict | None = None
    delta_vs_greedy: float | None = None
    records: list = field(default_factory=list)

    @property
    def accuracy(self):
        return (self.correct_conflict + self.correct_nonconflict) / self.n if self.n else 0.0

    @property
    def conflict_acc(self):
        return self.correct_conflict / self.n_conflict if self.n_conflict else float("nan")

    @property
    def nonconflict_acc(self):
        return self.correct_nonconflict / self.n_nonconflict if self.n_nonconflict else float("nan")

    def to_dict(self, timing=False, records=True):
        out = {
            "strategy": self.strategy,
            "n": self.n,
            "accuracy": self.accuracy,
            "conflict_acc": _nan_to_none(self.conflict_acc),
            "nonconflict_acc": _nan_to_none(self.nonconflict_acc),
            "n_conflict": self.n_conflict,
            "n_nonconflict": self.n_nonconflict,
            "delta_vs_greedy": self.delta_vs_greedy,
            "routing_confusion": self.routing_confusion,
            "failures": self.failures,
        }
        if timing:
            out["mean_seconds"] = self.mean_seconds
        if records:
            rows = []
            for r in self.records:
                row = asdict(r)
                if not timing:
                    row.pop("seconds")
                rows.append(row)
            out["records"] = rows
        return out


@dataclass
class EvalReport:
    results: dict
    meta: dict = field(default_factory=dict)

    def __getitem__(self, strategy):
        return self.results[strategy]

    def to_dict(self, timing=False, records=True):
        return {"meta": self.meta,
                "strategies": {k: v.to_dict(timing, records) for k, v in self.results.items()}}

    def to_json(self, timing=False, records=True):
        return json.dumps(self.to_dict(timing, records), sort_keys=True, indent=1)

    def summary_table(self):
        lines = [f"{'strategy':<10} {'conflict':>9} {'non-conf':>9} {'overall':>9} {'vs greedy':>10}"]
        for name, r in self.results.items():
            delta = "" if r.delta_vs_greedy is None else f"{100 * r.delta_vs_greedy:+.1f}"
            lines.append(f"{name:<10} {100 * r.conflict_acc:9.1f} {100 * r.nonconflict_acc:9.1f} "
                         f"{100 * r.accuracy:9.1f} {delta:>10}")
        return "\n".join(lines)


def _nan_to_none(x):
    return None if x != x else x


def _strategy_name(strategy):
    return strategy if isinstance(strategy, str) else getattr(strategy, "__name__", "custom")


def _predictor_for(predictor, instance):
    if isinstance(predictor, str) and predictor == ORACLE:
        return ConstantConflictPredictor(instance.conflict)
    return predictor


def _run_one(strategy, instance, params, vocab, predictor, config):
    if callable(strategy):
        return strategy(instance), None, None
    prompt = build_prompt(vocab, instance.question, instance.context)
    result = decode(params, prompt, replace(config, strategy=strategy, end_id=vocab.end_id),
                    _predictor_for(predictor, instance))
    predicted = None if result.conflict_prediction is None else bool(result.conflict_prediction.label)
    return vocab.decode(result.tokens), result.route, predicted


def evaluate_strategy(dataset, strategy, params, vocab, predictor=None, config=DecodeConfig()):
    """Decode and score every instance; failures are recorded, not raised."""
    name = _strategy_name(strategy)
    if name == "dcrd" and predictor is None:
        raise ConfigurationError("strategy 'dcrd' needs a predictor")
    records = []
    for inst in dataset:
        start = time.perf_counter()
        error = None
        try:
            answer, route, predicted = _run_one(strategy, inst, params, vocab, predictor, config)
        except ConflictDecodeError as exc:
            answer, route, predicted, error = "", None, None, f"{type(exc).__name__}: {exc}"
        seconds = time.perf_counter() - start
        ok = error is None and match_answer(answer, inst.answer)
        records.append(InstanceRecord(inst.id, inst.conflict, inst.noise, answer, ok, route, predicted, error, seconds))

    conf = [r for r in records if r.conflict]
    non = [r for r in records if not r.conflict]
    confusion = None
    if name == "dcrd":
        routed = [r for r in records if r.error is None]
        confusion = {
            "tp": sum(r.conflict and r.route == ROUTE_DYNAMIC for r in routed),
            "fp": sum(not r.conflict and r.route == ROUTE_DYNAMIC for r in routed),
            "tn": sum(not r.conflict and r.route != ROUTE_DYNAMIC for r in routed),
            "fn": sum(r.conflict and r.route != ROUTE_DYNAMIC for r in routed),
            "failed": len(records) - len(routed),
        }
    return StrategyResult(
        name, len(records), len(conf), len(non),
        sum(r.correct for r in conf), sum(r.correct for r in non),
        sum(r.error is not None for r in records),
        float(np.mean([r.seconds for r in records])) if records else 0.0,
        confusion, None, records)


def evaluate(dataset, strategies, params, vocab, predictor=None, config=DecodeConfig(), meta=None):
    """Evaluate one or several strategies and fill in deltas against greedy."""
    if isinstance(strategies, str) or callable(strategies):
        strategies = [strategies]
    results = {}
    for strategy in strategies:
        res = evaluate_strategy(dataset, strategy, params, vocab, predictor, config)
        results[res.strategy] = res
    if "greedy" in results:
        base = results["greedy"].accuracy
        for res in results.values():
            res.delta_vs_greedy = res.accuracy - base
    return EvalReport(results, dict(meta or {}))


def timing_report(dataset, strategies, params, vocab, predictor=None, config=DecodeConfig(), warmup=3):
    """Mean wall-clock seconds per instance, excluding the first ``warmup`` instances."""
    out = {}
    for strategy in strategies:
        times = []
        for i, inst in enumerate(dataset):
            start = time.perf_counter()
            _run_one(strategy, inst, params, vocab, predictor, config)
            if i >= warmup:
                times.append(time.perf_counter() - start)
        out[_strategy_name(strategy)] = float(np.mean(times)) if times else float("nan")
    return out


@dataclass
class SweepResult:
    axis: str
    values: list
    series: dict
    conflict_series: dict
    nonconflict_series: dict

    def rows(self):
        for strategy, accs in self.series.items():
            for value, acc, c_acc, n_acc in zip(self.values, accs, self.conflict_series[strategy],
                                               self.nonconflict_series[strategy]):
                yield (self.axis, value, strategy, acc, c_acc, n_acc)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        for row in self.rows():
            writer.writerow([row[0], row[1], row[2]] + [_fmt(x) for x in row[3:]])
        return buf.getvalue()

    def range_of(self, strategy):
        accs = self.series[strategy]
        return max(accs) - min(accs)


def _fmt(x):
    return "" if x != x else f"{x:.6f}"


def sweep(axis, values, strategies, params, vocab, predictor=None, config=DecodeConfig(), dataset=None,
          kb=None, n_instances=300, n_distractors=3, seed=0, base_conflict_ratio=0.5):
    """Re-evaluate strategies along one axis.

    ``conflict_ratio`` regenerates the dataset from ``kb`` under a derived
    seed per value; ``noise_ratio`` injects noise into ``dataset`` (or a
    freshly synthesized one); ``alpha`` and ``lambda`` reuse ``dataset``.
    """
    if axis not in SWEEP_AXES:
        raise ConfigurationError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    values = list(values)
    if dataset is None and axis != "conflict_ratio":
        if kb is None:
            raise ConfigurationError("sweep needs a dataset or a knowledge base")
        dataset = synthesize_dataset(kb, n_instances, base_conflict_ratio, n_distractors,
                                     seed=derive_seed(seed, "sweep:dataset"))
    if axis == "conflict_ratio" and kb is None:
        raise ConfigurationError("a conflict_ratio sweep regenerates data and needs a knowledge base")
    names = [_strategy_name(s) for s in strategies]
    series = {n: [] for n in names}
    c_series = {n: [] for n in names}
    n_series = {n: [] for n in names}
    for value in values:
        data, cfg = dataset, config
        if axis == "conflict_ratio":
            data = synthesize_dataset(kb, n_instances, float(value), n_distractors,
                                      seed=derive_seed(seed, f"sweep:conflict_ratio:{value}"))
        elif axis == "noise_ratio":
            data = inject_noise(dataset, float(value), kb, seed=derive_seed(seed, f"sweep:noise:{value}"))
        elif axis == "alpha":
            cfg = replace(config, alpha=float(value))
        else:
            cfg = replace(config, lambda_=float(value))
        report = evaluate(data, strategies, params, vocab, predictor, cfg)
        for n in names:
            res = report[n]
            series[n].append(res.accuracy)
            c_series[n].append(res.conflict_acc)
            n_series[n].append(res.nonconflict_acc)
    return SweepResult(axis, values, series, c_series, n_series)
