import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conflictdecode.exceptions import InputError
from conflictdecode.fidelity import (FidelityFeaturizer, FidelityMatrix, HiddenStateFeaturizer, SpanAttentionSummary,
                                     fidelity_from_attention, fidelity_matrix, fidelity_scalar, flatten_features,
                                     hidden_state_features, span_attention_summary)
from conflictdecode.model import ForwardOutput
from conflictdecode.text import SpanLayout


def causal_uniform(L, H, T):
    att = np.tril(np.ones((T, T)))
    att /= att.sum(-1, keepdims=True)
    return np.broadcast_to(att, (L, H, T, T)).copy()


def random_causal(rng, L, H, T):
    att = np.tril(rng.random((L, H, T, T)) + 1e-3)
    return att / att.sum(-1, keepdims=True)


def loop_oracle(att, layout):
    L, H = att.shape[:2]
    (c_lo, c_hi), (o_lo, o_hi) = layout.context, layout.output
    ac, ao = np.zeros((L, H)), np.zeros((L, H))
    for l in range(L):
        for h in range(H):
            sc = so = 0.0
            for q in range(o_lo, o_hi):
                row_c = row_o = 0.0
                for k in range(att.shape[-1]):
                    if c_lo <= k < c_hi:
                        row_c += att[l, h, q, k]
                    if o_lo <= k < o_hi:
                        row_o += att[l, h, q, k]
                sc += row_c / (c_hi - c_lo)
                so += row_o / (o_hi - o_lo)
            ac[l, h] = sc / (o_hi - o_lo)
            ao[l, h] = so / (o_hi - o_lo)
    return ac, ao


def test_uniform_attention_last_query_equal_spans():
    # context 4 tokens, output 4 tokens, only the last output row is a query and it sees those 8 keys
    layout = SpanLayout(8, (0, 4), (4, 4), (7, 8))
    att = np.zeros((1, 1, 8, 8))
    att[0, 0, 7, :] = 0.125
    s = span_attention_summary(att, layout)
    assert s.alpha_c[0, 0] == pytest.approx(0.125 * 4 / 4)
    # output span here is 1 token wide: its single key carries 0.125
    assert s.alpha_o[0, 0] == pytest.approx(0.125)


def test_uniform_attention_four_output_queries():
    layout = SpanLayout(8, (0, 4), (4, 4), (4, 8))
    att = np.zeros((1, 1, 8, 8))
    att[0, 0, 4:, :] = 0.125
    s = span_attention_summary(att, layout)
    assert s.alpha_c[0, 0] == pytest.approx(0.125)
    assert s.alpha_o[0, 0] == pytest.approx(0.125)
    assert fidelity_matrix(s).values[0, 0] == 0.5


def test_all_mass_on_context_gives_zero_output_average():
    layout = SpanLayout(6, (0, 2), (2, 3), (4, 6))
    att = np.zeros((2, 3, 6, 6))
    att[..., 0] = 1.0
    s = span_attention_summary(att, layout)
    assert np.all(s.alpha_o == 0.0)
    assert np.all(fidelity_matrix(s).values == 0.0)


def test_summary_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(5):
        T = 12
        layout = SpanLayout(T, (1, 5), (6, 8), (9, 12))
        att = random_causal(rng, 2, 3, T)
        s = span_attention_summary(att, layout)
        ac, ao = loop_oracle(att, layout)
        np.testing.assert_allclose(s.alpha_c, ac, atol=1e-12)
        np.testing.assert_allclose(s.alpha_o, ao, atol=1e-12)


def test_empty_output_rejected():
    with pytest.raises(InputError):
        span_attention_summary(np.ones((1, 1, 4, 4)), SpanLayout(4, (0, 2), (2, 4), (4, 4)))


def test_empty_context_gives_zero_context_average():
    layout = SpanLayout(5, (1, 1), (1, 3), (3, 5))
    s = span_attention_summary(causal_uniform(1, 1, 5), layout)
    assert s.alpha_c[0, 0] == 0.0
    assert fidelity_matrix(s).values[0, 0] == 1.0


def test_fidelity_matrix_cases():
    m = fidelity_matrix(SpanAttentionSummary(np.array([[0.125]]), np.array([[0.375]])))
    assert m.values[0, 0] == 0.75
    m = fidelity_matrix(SpanAttentionSummary(np.array([[0.2, 0.1]]), np.array([[0.0, 0.1]])))
    np.testing.assert_array_equal(m.values, [[0.0, 0.5]])
    m = fidelity_matrix(SpanAttentionSummary(np.zeros((1, 2)), np.array([[0.0, 0.3]])))
    np.testing.assert_array_equal(m.values, [[0.5, 1.0]])
    assert m.n_degenerate == 1


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (3, 2), elements=st.floats(0, 1)), arrays(np.float64, (3, 2), elements=st.floats(0, 1)))
def test_fidelity_bounded(ac, ao):
    values = fidelity_matrix(SpanAttentionSummary(ac, ao)).values
    assert np.all((values >= 0) & (values <= 1))


def test_fidelity_scalar_cases():
    assert fidelity_scalar(np.full((4, 4), 0.5)) == 0.5
    assert fidelity_scalar(np.array([[0.0, 0.0], [1.0, 1.0]])) == 0.5
    rng = np.random.default_rng(3)
    m = rng.random((4, 4))
    total = 0.0
    for v in m.ravel():
        total += v
    assert fidelity_scalar(m) == pytest.approx(total / 16, abs=1e-9)
    with pytest.raises(InputError):
        fidelity_scalar(np.zeros((0, 0)))


def test_flatten_is_row_major():
    assert flatten_features(np.array([[1.0, 2.0], [3.0, 4.0]])).tolist() == [1.0, 2.0, 3.0, 4.0]
    assert flatten_features(FidelityMatrix(np.array([[0.7]]))).tolist() == [0.7]
    assert flatten_features(np.zeros((4, 4))).shape == (16,)


def test_hidden_state_features():
    rng = np.random.default_rng(1)
    hidden = [rng.normal(size=(6, 8)) for _ in range(2)]
    out = ForwardOutput(np.zeros((6, 4)), None, hidden)
    layout = SpanLayout(6, (1, 2), (2, 3), (5, 6))
    np.testing.assert_array_equal(hidden_state_features(out, layout, 1), hidden[1][5])
    layout = SpanLayout(6, (1, 2), (2, 3), (3, 6))
    np.testing.assert_allclose(hidden_state_features(out, layout, 0), hidden[0][3:6].sum(0) / 3, atol=1e-6)
    same = ForwardOutput(np.zeros((2, 4)), None, [np.ones((2, 3))])
    np.testing.assert_array_equal(hidden_state_features(same, SpanLayout(2, (0, 0), (0, 0), (0, 2)), 0), np.ones(3))
    with pytest.raises(InputError):
        hidden_state_features(out, layout, 2)


def test_featurizers():
    rng = np.random.default_rng(2)
    layout = SpanLayout(8, (1, 4), (4, 5), (6, 8))
    pairs = [(random_causal(rng, 2, 2, 8), layout) for _ in range(3)]
    X = FidelityFeaturizer().fit_transform(pairs)
    assert X.shape == (3, 4)
    np.testing.assert_array_equal(X[0], flatten_features(fidelity_from_attention(*pairs[0])))
    out = ForwardOutput(np.zeros((8, 4)), None, [rng.normal(size=(8, 5)) for _ in range(2)])
    H = HiddenStateFeaturizer(layer_index=-1).fit_transform([(out, layout)])
    np.testing.assert_allclose(H[0], out.hidden_states[1][6:8].mean(0))
