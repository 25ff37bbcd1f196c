"""Greedy and contrastive decoding strategies with per-step traces.

Every contrastive strategy scores the next token as
``(1 + a) * logits_with - a * logits_without`` and picks its argmax; they
differ only in how the coefficient ``a`` is chosen per step:

* ``cad``    -- fixed ``alpha``;
* ``adacad`` -- Jensen-Shannon divergence (bits) of the two distributions;
* ``dcd``    -- ``alpha / (1 + lambda * s_hat)`` where ``s_hat`` is the mean
  fidelity of the tokens generated so far;
* ``dcrd``   -- a greedy draft is classified by a conflict predictor, then
  either returned as is or replaced by a ``dcd`` decode.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import ConfigurationError, InputError, NumericError
from .fidelity import (NEUTRAL_FIDELITY, fidelity_from_attention, fidelity_scalar, flatten_features,
                       hidden_state_features)
from .model import DEFAULT_MAX_NEW, forward
from .text import build_prompt

STRATEGIES = ("greedy", "cad", "adacad", "dcd", "dcrd")
ROUTE_GREEDY = "GD"
ROUTE_DYNAMIC = "DCD"
END_ID = 2


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "dcrd"
    alpha: float = 1.0
    lambda_: float = 1.0
    max_new: int = DEFAULT_MAX_NEW
    draft_len: int | None = None
    end_id: int | None = END_ID
    seed_first_fidelity: bool = False
    feature_source: str = "fidelity"
    hidden_layer: int = -1

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if not (self.alpha >= 0 and np.isfinite(self.alpha)):
            raise ConfigurationError("alpha must be a finite value >= 0")
        if not (self.lambda_ >= 0 and np.isfinite(self.lambda_)):
            raise ConfigurationError("lambda must be a finite value >= 0")
        if self.max_new < 0:
            raise ConfigurationError("max_new must be >= 0")
        if self.draft_len is not None and self.draft_len < 1:
            raise ConfigurationError("draft_len must be >= 1")
        if self.feature_source not in ("fidelity", "hidden"):
            raise ConfigurationError("feature_source must be 'fidelity' or 'hidden'")


@dataclass
class StepTrace:
    step: int
    chosen: int
    logits_with: np.ndarray
    logits_without: np.ndarray | None = None
    s_hat: float | None = None
    alpha_adj: float | None = None
    p3: np.ndarray | None = None

    @property
    def contrastive(self):
        return self.p3 is not None

    def to_dict(self, full=False):
        out = {"step": self.step, "chosen": self.chosen, "s_hat": self.s_hat, "alpha_adj": self.alpha_adj}
        if full:
            out["logits_with"] = self.logits_with.tolist()
            out["logits_without"] = None if self.logits_without is None else self.logits_without.tolist()
            out["p3"] = None if self.p3 is None else self.p3.tolist()
        return out


@dataclass
class DecodeResult:
    tokens: list
    strategy: str
    route: str | None = None
    conflict_prediction: object = None
    traces: list = field(default_factory=list)
    draft: list | None = None
    draft_features: np.ndarray | None = None
    timing: float = 0.0

    def answer_tokens(self, end_id=END_ID):
        out = []
        for tok in self.tokens:
            if tok == end_id:
                break
            out.append(tok)
        return out


def _check_capacity(params, prompt_len, max_new):
    if prompt_len + max_new > params.config.max_seq:
        raise InputError(f"prompt length {prompt_len} + max_new {max_new} exceeds max_seq={params.config.max_seq}")


def logits_pair(params, prompt, generated, capture_attention=True):
    """Next-token logits without and with the context, plus with-context attention."""
    generated = tuple(int(t) for t in generated)
    with_seq = tuple(prompt.with_context) + generated
    without_seq = tuple(prompt.without_context) + generated
    if len(with_seq) > params.config.max_seq:
        raise InputError(f"sequence length {len(with_seq)} exceeds max_seq={params.config.max_seq}")
    out_with = forward(params, with_seq, capture_attention=capture_attention)
    out_without = forward(params, without_seq, capture_attention=False)
    return out_without.logits[-1], out_with.logits[-1], out_with.attention


def alpha_adjusted(alpha, lambda_, s_hat):
    """Fidelity-scaled contrast coefficient ``alpha / (1 + lambda * s_hat)``."""
    return alpha / (1.0 + lambda_ * s_hat)


def _combined_scores(logits_with, logits_without, alpha_adj):
    lw = np.asarray(logits_with, dtype=np.float64)
    lwo = np.asarray(logits_without, dtype=np.float64)
    if lw.shape != lwo.shape:
        raise InputError("logit vectors differ in size")
    if not (np.all(np.isfinite(lw)) and np.all(np.isfinite(lwo)) and np.isfinite(alpha_adj)):
        raise NumericError("non-finite logits or coefficient")
    return (1.0 + alpha_adj) * lw - alpha_adj * lwo


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def contrastive_step(logits_with, logits_without, alpha_adj):
    """Distribution ``softmax((1 + a) * logits_with - a * logits_without)``."""
    return softmax(_combined_scores(logits_with, logits_without, alpha_adj))


def jensen_shannon(p, q):
    """Jensen-Shannon divergence in bits; lies in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def kl(a):
        mask = a > 0
        return float(np.sum(a[mask] * np.log2(a[mask] / m[mask])))

    return float(min(1.0, max(0.0, 0.5 * kl(p) + 0.5 * kl(q))))


def _greedy_loop(params, seq, max_new, end_id, capture_hidden=False):
    """Greedy generation that keeps the attention of its last forward pass."""
    seq = list(seq)
    generated, traces = [], []
    last = None
    for t in range(max_new):
        last = forward(params, seq + generated, capture_attention=True, capture_hidden=capture_hidden)
        logits = last.logits[-1]
        tok = int(np.argmax(logits))
        traces.append(StepTrace(t, tok, logits))
        generated.append(tok)
        if end_id is not None and tok == end_id:
            break
    return generated, traces, last


def decode_greedy(params, prompt, config=DecodeConfig(strategy="greedy")):
    """Greedy decoding on the with-context prompt."""
    start = time.perf_counter()
    _check_capacity(params, prompt.prompt_length, config.max_new)
    generated, traces, _ = _greedy_loop(params, prompt.with_context, config.max_new, config.end_id)
    return DecodeResult(generated, "greedy", None, None, traces, timing=time.perf_counter() - start)


def _contrastive_loop(params, prompt, config, coefficient, needs_attention):
    _check_capacity(params, prompt.prompt_length, config.max_new)
    generated, traces = [], []
    for t in range(config.max_new):
        lwo, lw, attention = logits_pair(params, prompt, generated, capture_attention=needs_attention)
        coef, s_hat = coefficient(t, lw, lwo, attention, generated)
        scores = _combined_scores(lw, lwo, coef)
        tok = int(np.argmax(scores))
        traces.append(StepTrace(t, tok, lw, lwo, s_hat, float(coef), softmax(scores)))
        generated.append(tok)
        if config.end_id is not None and tok == config.end_id:
            break
    return generated, traces


def decode_cad(params, prompt, config=DecodeConfig(strategy="cad")):
    start = time.perf_counter()
    generated, traces = _contrastive_loop(
        params, prompt, config, lambda t, lw, lwo, att, gen: (config.alpha, None), False)
    return DecodeResult(generated, "cad", None, None, traces, timing=time.perf_counter() - start)


def decode_adacad(params, prompt, config=DecodeConfig(strategy="adacad")):
    def coefficient(t, lw, lwo, att, gen):
        return jensen_shannon(softmax(lw), softmax(lwo)), None

    start = time.perf_counter()
    generated, traces = _contrastive_loop(params, prompt, config, coefficient, False)
    return DecodeResult(generated, "adacad", None, None, traces, timing=time.perf_counter() - start)


def decode_dcd(params, prompt, config=DecodeConfig(strategy="dcd"), first_s_hat=None):
    """Contrastive decoding whose coefficient shrinks as output fidelity grows.

    ``s_hat`` is recomputed each step over all tokens generated so far; the
    first step has no output span and uses ``first_s_hat`` (0.5 by default).
    """
    initial = NEUTRAL_FIDELITY if first_s_hat is None else float(first_s_hat)

    def coefficient(t, lw, lwo, attention, gen):
        if gen:
            layout = prompt.layout.with_output(len(gen))
            s_hat = fidelity_scalar(fidelity_from_attention(attention, layout))
        else:
            s_hat = initial
        return alpha_adjusted(config.alpha, config.lambda_, s_hat), s_hat

    start = time.perf_counter()
    generated, traces = _contrastive_loop(params, prompt, config, coefficient, True)
    return DecodeResult(generated, "dcd", None, None, traces, timing=time.perf_counter() - start)


def draft_features(params, prompt, draft, last_output, config):
    """Classifier features for a greedy draft.

    The output span covers the draft tokens that were fed back as input,
    i.e. all but the last one, so the attention of the final draft step can
    be reused. A one-token draft needs one extra forward pass.
    """
    n_out = len(draft) - 1
    output = last_output
    if n_out < 1:
        n_out = len(draft)
        output = forward(params, tuple(prompt.with_context) + tuple(draft), capture_attention=True,
                         capture_hidden=config.feature_source == "hidden")
    layout = prompt.layout.with_output(n_out)
    if config.feature_source == "hidden":
        idx = config.hidden_layer % params.config.n_layers
        return hidden_state_features(output, layout, idx), None
    matrix = fidelity_from_attention(output.attention, layout)
    return flatten_features(matrix), matrix


def greedy_draft(params, prompt, config=DecodeConfig()):
    """Greedy draft of up to ``draft_len`` tokens and its classifier features.

    Returns ``(draft, traces, features, fidelity_matrix)``; the matrix is
    ``None`` when hidden-state features are requested.
    """
    _check_capacity(params, prompt.prompt_length, config.max_new)
    draft_len = min(config.draft_len or config.max_new, config.max_new)
    if draft_len < 1:
        raise InputError("a draft needs at least one token")
    draft, traces, last = _greedy_loop(params, prompt.with_context, draft_len, config.end_id,
                                       capture_hidden=config.feature_source == "hidden")
    features, matrix = draft_features(params, prompt, draft, last, config)
    return draft, traces, features, matrix


def route_and_decode(params, prompt, predictor, config=DecodeConfig()):
    """Draft greedily, classify the draft, then keep it or re-decode with ``dcd``."""
    if predictor is None:
        raise ConfigurationError("routed decoding needs a conflict predictor")
    start = time.perf_counter()
    _check_capacity(params, prompt.prompt_length, config.max_new)
    if config.max_new == 0:
        return DecodeResult([], "dcrd", ROUTE_GREEDY, None, [], [], timing=time.perf_counter() - start)
    draft, traces, features, matrix = greedy_draft(params, prompt, config)
    prediction = predictor.predict_one(features)
    if not prediction.label:
        tokens = list(draft)
        finished = config.end_id is not None and tokens and tokens[-1] == config.end_id
        if len(tokens) < config.max_new and not finished:
            more, more_traces, _ = _greedy_loop(params, tuple(prompt.with_context) + tuple(tokens),
                                                config.max_new - len(tokens), config.end_id)
            for tr in more_traces:
                tr.step += len(tokens)
            tokens += more
            traces = traces + more_traces
        return DecodeResult(tokens, "dcrd", ROUTE_GREEDY, prediction, traces, list(draft), features,
                            timing=time.perf_counter() - start)
    first = fidelity_scalar(matrix) if (config.seed_first_fidelity and matrix is not None) else None
    result = decode_dcd(params, prompt, config, first_s_hat=first)
    return DecodeResult(result.tokens, "dcrd", ROUTE_DYNAMIC, prediction, result.traces, list(draft), features,
                        timing=time.perf_counter() - start)


def decode(params, prompt, config, predictor=None):
    """Dispatch on ``config.strategy``."""
    if config.strategy == "greedy":
        return decode_greedy(params, prompt, config)
    if config.strategy == "cad":
        return decode_cad(params, prompt, config)
    if config.strategy == "adacad":
        return decode_adacad(params, prompt, config)
    if config.strategy == "dcd":
        return decode_dcd(params, prompt, config)
    return route_and_decode(params, prompt, predictor, config)


class ConflictAwareDecoder(BaseEstimator):
    """Estimator facade over the decoding strategies.

    ``predict`` takes ``(question, context)`` text pairs and returns answer
    strings; ``decode_one`` returns the full :class:`DecodeResult`.
    """

    def __init__(self, model=None, vocab=None, predictor=None, strategy="dcrd", alpha=1.0, lambda_=1.0,
                 max_new=DEFAULT_MAX_NEW, draft_len=None, seed_first_fidelity=False):
        self.model = model
        self.vocab = vocab
        self.predictor = predictor
        self.strategy = strategy
        self.alpha = alpha
        self.lambda_ = lambda_
        self.max_new = max_new
        self.draft_len = draft_len
        self.seed_first_fidelity = seed_first_fidelity

    @property
    def decode_config(self):
        end = self.vocab.end_id if self.vocab is not None else END_ID
        return DecodeConfig(self.strategy, self.alpha, self.lambda_, self.max_new, self.draft_len, end,
                            self.seed_first_fidelity)

    def fit(self, X=None, y=None):
        if self.model is None or self.vocab is None:
            raise ConfigurationError("decoder needs a model and a vocabulary")
        if self.strategy == "dcrd" and self.predictor is None:
            raise ConfigurationError("strategy 'dcrd' needs a predictor")
        self.config_ = self.decode_config
        return self

    def decode_one(self, question, context):
        if not hasattr(self, "config_"):
            self.fit()
        prompt = build_prompt(self.vocab, question, context)
        return decode(self.model, prompt, self.config_, self.predictor)

    def predict(self, X):
        return [self.vocab.decode(self.decode_one(q, c).tokens) for q, c in X]

    def with_strategy(self, strategy, **overrides):
        return replace(self.decode_config, strategy=strategy, **overrides)
