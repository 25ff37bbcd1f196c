"""Contextual-fidelity features from captured attention maps.

For each layer and head, the generated (output) tokens' attention is
averaged separately over context keys and over output keys. The fidelity
score ``S = a_out / (a_ctx + a_out)`` is the share of that mass that stays
on the model's own output; high values mean the generation drifted away
from the supplied context.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import InputError

NEUTRAL_FIDELITY = 0.5


@dataclass
class SpanAttentionSummary:
    alpha_c: np.ndarray
    alpha_o: np.ndarray


@dataclass
class FidelityMatrix:
    values: np.ndarray
    degenerate: np.ndarray | None = None

    @property
    def n_degenerate(self):
        return 0 if self.degenerate is None else int(self.degenerate.sum())

    @property
    def shape(self):
        return self.values.shape


def span_attention_summary(attention, layout):
    """Average attention of output-span queries onto context and output keys.

    ``attention`` is ``[layers, heads, seq, seq]``. Every output position is
    used as a query row; each row's mass on a span is divided by the full
    span length and the rows are then averaged. An empty context yields a
    zero context average.
    """
    attention = np.asarray(attention)
    if attention.ndim != 4 or attention.shape[-1] != attention.shape[-2]:
        raise InputError("attention must have shape [layers, heads, seq, seq]")
    o_lo, o_hi = layout.output
    c_lo, c_hi = layout.context
    if o_hi <= o_lo:
        raise InputError("output span is empty; run a draft pass first")
    if o_hi > attention.shape[-1]:
        raise InputError("layout extends past the attention tensor")
    rows = attention[:, :, o_lo:o_hi, :].astype(np.float64)
    n_ctx, n_out = c_hi - c_lo, o_hi - o_lo
    if n_ctx:
        alpha_c = (rows[..., c_lo:c_hi].sum(-1) / n_ctx).mean(-1)
    else:
        alpha_c = np.zeros(attention.shape[:2])
    alpha_o = (rows[..., o_lo:o_hi].sum(-1) / n_out).mean(-1)
    return SpanAttentionSummary(alpha_c, alpha_o)


def fidelity_matrix(summary):
    """Entrywise ``alpha_o / (alpha_c + alpha_o)``; zero-mass entries become 0.5 and are flagged."""
    alpha_c = np.asarray(summary.alpha_c, dtype=np.float64)
    alpha_o = np.asarray(summary.alpha_o, dtype=np.float64)
    total = alpha_c + alpha_o
    degenerate = total <= 0
    safe = np.where(degenerate, 1.0, total)
    values = np.where(degenerate, NEUTRAL_FIDELITY, alpha_o / safe)
    return FidelityMatrix(values, degenerate)


def fidelity_scalar(matrix):
    values = matrix.values if isinstance(matrix, FidelityMatrix) else np.asarray(matrix)
    if values.size == 0:
        raise InputError("fidelity matrix is empty")
    return float(values.mean())


def flatten_features(matrix):
    values = matrix.values if isinstance(matrix, FidelityMatrix) else np.asarray(matrix)
    if values.size == 0:
        raise InputError("fidelity matrix is empty")
    return np.ascontiguousarray(values, dtype=np.float64).reshape(-1)


def fidelity_from_attention(attention, layout):
    return fidelity_matrix(span_attention_summary(attention, layout))


def hidden_state_features(output, layout, layer_index):
    """Mean hidden vector of one layer over the output span."""
    hidden = output.hidden_states
    if hidden is None:
        raise InputError("forward output carries no hidden states")
    if not 0 <= layer_index < len(hidden):
        raise InputError(f"layer_index {layer_index} out of range for {len(hidden)} layers")
    o_lo, o_hi = layout.output
    if o_hi <= o_lo:
        raise InputError("output span is empty")
    return np.asarray(hidden[layer_index][o_lo:o_hi], dtype=np.float64).mean(0)


class FidelityFeaturizer(TransformerMixin, BaseEstimator):
    """Stateless transformer: ``(attention, layout)`` pairs -> flattened fidelity rows."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return np.stack([flatten_features(fidelity_from_attention(att, layout)) for att, layout in X])


class HiddenStateFeaturizer(TransformerMixin, BaseEstimator):
    """Stateless transformer: ``(forward_output, layout)`` pairs -> mean hidden vectors."""

    def __init__(self, layer_index=-1):
        self.layer_index = layer_index

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        rows = []
        for output, layout in X:
            idx = self.layer_index % len(output.hidden_states) if self.layer_index < 0 else self.layer_index
            rows.append(hidden_state_features(output, layout, idx))
        return np.stack(rows)
