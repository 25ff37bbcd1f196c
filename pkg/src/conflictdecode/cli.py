"""``conflictdecode`` command line.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys

from . import pipeline
from .config import RunConfig
from .decoding import STRATEGIES, decode
from .evaluation import SWEEP_AXES
from .exceptions import ConfigurationError, ConflictDecodeError
from .text import build_prompt

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _str_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser():
    parser = _Parser(prog="conflictdecode", description="Conflict-aware decoding on a toy knowledge world.")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--artifacts", help="artifact directory (paths.artifacts)")
    common.add_argument("--seed", type=int, help="master seed (seeds.master)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("forge", parents=[common], help="build the KB, datasets and training corpus")
    p.add_argument("--n-instances", type=int, dest="forge.n_instances")
    p.add_argument("--conflict-ratio", type=float, dest="forge.conflict_ratio")
    p.add_argument("--noise-ratio", type=float, dest="forge.noise_ratio")

    p = sub.add_parser("train-model", parents=[common], help="pretrain the toy transformer")
    p.add_argument("--steps", type=int, dest="model.steps")
    p.add_argument("--log-every", type=int, default=0, dest="log_every")

    p = sub.add_parser("train-predictor", parents=[common], help="train the conflict predictor on draft features")
    p.add_argument("--constant-features", action="store_const", const=True, dest="predictor.constant_features",
                   help="replace features by a constant vector (no-signal ablation)")
    p.add_argument("--feature-source", choices=("fidelity", "hidden"), dest="predictor.feature_source")

    for name, help_text in (("decode", "decode a single question"), ("eval", "evaluate strategies"),
                            ("sweep", "sweep one axis")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--alpha", type=float, dest="decode.alpha")
        p.add_argument("--lambda", type=float, dest="decode.lambda")
        p.add_argument("--max-new", type=int, dest="decode.max_new")
        p.add_argument("--draft-len", type=int, dest="decode.draft_len")
        if name == "decode":
            p.add_argument("--question", required=True)
            p.add_argument("--context", default="")
            p.add_argument("--strategy", choices=STRATEGIES, dest="decode.strategy")
            p.add_argument("--trace", help="write per-step trace JSON here")
        else:
            p.add_argument("--strategies", type=_str_list, dest="eval.strategies")
        if name == "eval":
            p.add_argument("--dataset", help="dataset JSONL (default: artifact dataset)")
            p.add_argument("--timing", action="store_true", help="also write a timing sidecar")
        if name == "sweep":
            p.add_argument("--axis", required=True, choices=SWEEP_AXES)
            p.add_argument("--values", type=_float_list)
    return parser


def _set_dotted(data, dotted, value):
    section, key = dotted.split(".", 1)
    data.setdefault(section, {})[key] = value


def resolve_config(args):
    """Config file, then flag overrides; validated before anything is written."""
    data = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError("config root must be an object")
    if args.artifacts is not None:
        _set_dotted(data, "paths.artifacts", args.artifacts)
    if args.seed is not None:
        _set_dotted(data, "seeds.master", args.seed)
    for dest, value in vars(args).items():
        if "." in dest and value is not None:
            _set_dotted(data, dest, value)
    return RunConfig.from_dict(data).validate()


def _cmd_forge(config, args, out):
    result = pipeline.run_forge(config)
    s = result.stats
    print(f"dataset: {s['instances']} instances ({s['conflict_lines']} conflict, {s['noisy_lines']} noisy) "
          f"-> {pipeline.artifact(config, pipeline.DATASET_FILE)}", file=out)
    n_rejected = sum(s["rejects"].values())
    rate = s["instances"] / (s["instances"] + n_rejected)
    print(f"quality filter acceptance rate: {rate:.4f}; rejects: {json.dumps(s['rejects'], sort_keys=True)}",
          file=out)
    print(f"predictor training instances: {s['predictor_instances']}; corpus lines: {s['corpus_lines']}", file=out)


def _cmd_train_model(config, args, out):
    result, digest = pipeline.run_train_model(config, log_every=args.log_every)
    print(f"steps: {len(result.losses)}; loss {result.initial_loss:.4f} -> {result.final_loss:.4f}", file=out)
    print(f"checkpoint {pipeline.artifact(config, pipeline.MODEL_FILE)} sha256={digest}", file=out)


def _cmd_train_predictor(config, args, out):
    res = pipeline.run_train_predictor(config)
    r = res.report
    print(f"train/held-out: {res.train_size}/{res.test_size}; majority fraction {res.majority_fraction:.3f}",
          file=out)
    print(f"held-out accuracy {r.accuracy:.3f} precision {r.precision:.3f} recall {r.recall:.3f} f1 {r.f1:.3f}",
          file=out)
    print(f"checkpoint {pipeline.artifact(config, pipeline.PREDICTOR_FILE)} sha256={res.digest}", file=out)


def _cmd_decode(config, args, out):
    _, vocab = pipeline.load_world(config)
    params = pipeline.load_model(config)
    cfg = pipeline.decode_config(config, end_id=vocab.end_id)
    predictor = pipeline.load_predictor(config) if cfg.strategy == "dcrd" else None
    prompt = build_prompt(vocab, args.question, args.context)
    result = decode(params, prompt, cfg, predictor)
    print(vocab.decode(result.tokens), file=out)
    if args.trace:
        trace = {
            "strategy": result.strategy,
            "route": result.route,
            "conflict_prediction": None if result.conflict_prediction is None else result.conflict_prediction.to_dict(),
            "draft": result.draft,
            "tokens": result.tokens,
            "alpha": cfg.alpha,
            "lambda": cfg.lambda_,
            "steps": [t.to_dict(full=True) for t in result.traces],
        }
        with open(args.trace, "w", encoding="utf-8") as fh:
            json.dump(trace, fh, sort_keys=True)


def _cmd_eval(config, args, out):
    report = pipeline.run_eval(config, dataset_path=args.dataset, timing=args.timing)
    print(report.summary_table(), file=out)
    res = report.results.get("dcrd")
    if res is not None and res.routing_confusion:
        print(f"dcrd routing: {json.dumps(res.routing_confusion, sort_keys=True)}", file=out)
    print(f"report -> {pipeline.artifact(config, pipeline.REPORT_FILE)}", file=out)


def _cmd_sweep(config, args, out):
    result = pipeline.run_sweep(config, args.axis, args.values)
    out.write(result.to_csv())


COMMANDS = {"forge": _cmd_forge, "train-model": _cmd_train_model, "train-predictor": _cmd_train_predictor,
            "decode": _cmd_decode, "eval": _cmd_eval, "sweep": _cmd_sweep}


def main(argv=None, out=None, err=None):
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        config = resolve_config(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=err)
        return EXIT_CONFIG
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=err)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command](config, args, out)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=err)
        return EXIT_CONFIG
    except (ConflictDecodeError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=err)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
