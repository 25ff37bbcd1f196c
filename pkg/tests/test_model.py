import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conflictdecode import checkpoint
from conflictdecode.exceptions import ConfigurationError, InputError
from conflictdecode.model import (ModelConfig, ModelParams, ToyLanguageModel, TrainConfig, forward,
                                  generate_greedy, init_params, load_params, n_parameters, param_shapes,
                                  params_checksum, save_params, torch_logits, train)

SMALL = ModelConfig(vocab_size=32, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq=24, seed=0)


def closed_form_count(V, d, L, f, T):
    # embeddings + per block (2 layer norms, 4 projections with bias, 2-layer mlp) + final norm + head
    per_block = 2 * 2 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d)
    return V * d + T * d + L * per_block + 2 * d + d * V


def test_parameter_count_matches_closed_form():
    params = init_params(ModelConfig())
    assert n_parameters(params) == closed_form_count(512, 64, 4, 256, 128)
    assert sum(math.prod(s) for s in param_shapes(ModelConfig()).values()) == n_parameters(params)


def test_init_is_deterministic_and_seed_sensitive():
    assert params_checksum(init_params(SMALL)) == params_checksum(init_params(SMALL))
    a = init_params(ModelConfig(seed=1))
    b = init_params(ModelConfig(seed=2))
    assert params_checksum(a) != params_checksum(b)


def test_init_dtypes_and_norm_gains():
    params = init_params(SMALL)
    assert all(v.dtype == np.float32 for v in params.tensors.values())
    assert np.all(params["h0.ln1.g"] == 1.0) and np.all(params["h0.attn.bq"] == 0.0)


def test_bad_configs_rejected():
    with pytest.raises(ConfigurationError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ConfigurationError):
        ModelConfig(n_layers=0)


def test_single_token_attention_is_one():
    out = forward(init_params(SMALL), [5])
    assert out.attention.shape == (2, 2, 1, 1)
    assert np.all(out.attention == 1.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 31), min_size=1, max_size=24))
def test_attention_rows_normalized_and_causal(tokens):
    att = forward(init_params(SMALL), tokens).attention
    np.testing.assert_allclose(att.sum(-1), 1.0, atol=1e-5)
    T = len(tokens)
    assert np.all(att[..., np.triu_indices(T, 1)[0], np.triu_indices(T, 1)[1]] == 0.0)


def test_forward_golden():
    out = forward(init_params(ModelConfig(seed=0)), list(range(10, 26)))
    logits = out.logits.astype(np.float64)
    assert logits.shape == (16, 512)
    assert logits.sum() == pytest.approx(10.27230725568188, abs=1e-3)
    np.testing.assert_allclose(logits[-1, :4], [0.0627988874912262, -0.3632141053676605,
                                                -0.08795064687728882, 0.27992936968803406], atol=1e-5)
    assert int(logits[-1].argmax()) == 300


def test_numpy_forward_matches_torch_mirror():
    params = init_params(SMALL)
    tokens = [3, 1, 4, 1, 5, 9, 2, 6]
    np.testing.assert_allclose(forward(params, tokens).logits, torch_logits(params, tokens), atol=1e-4)


def test_forward_input_errors():
    params = init_params(SMALL)
    with pytest.raises(InputError):
        forward(params, [])
    with pytest.raises(InputError):
        forward(params, [32])
    with pytest.raises(InputError):
        forward(params, [1] * 25)


def test_hidden_states_captured_per_layer():
    out = forward(init_params(SMALL), [1, 2, 3], capture_attention=False, capture_hidden=True)
    assert out.attention is None
    assert len(out.hidden_states) == 2 and out.hidden_states[0].shape == (3, 16)


def test_generate_max_new_zero_returns_prompt():
    assert generate_greedy(init_params(SMALL), [1, 2, 3], max_new=0) == [1, 2, 3]


def test_generate_with_forced_token():
    # a head whose column A dominates after the final layer norm: only A can win
    params = init_params(SMALL).copy()
    params.tensors["head"][:] = 0.0
    params.tensors["lnf.g"][:] = 0.0
    params.tensors["lnf.b"][:] = 1.0
    params.tensors["head"][:, 7] = 1.0
    logits = forward(params, [1, 2]).logits
    assert np.all(logits.argmax(-1) == 7)
    assert generate_greedy(params, [1, 2], max_new=5) == [1, 2, 7, 7, 7, 7, 7]


def test_generate_stops_at_end_and_checks_capacity():
    params = init_params(SMALL).copy()
    params.tensors["head"][:] = 0.0
    params.tensors["lnf.g"][:] = 0.0
    params.tensors["lnf.b"][:] = 1.0
    params.tensors["head"][:, 2] = 1.0
    assert generate_greedy(params, [1], max_new=5, end_id=2) == [1, 2]
    with pytest.raises(InputError):
        generate_greedy(params, [1] * 20, max_new=5)


def _memory_corpus(n_facts=50, seed=0):
    rng = np.random.default_rng(seed)
    subjects = rng.choice(np.arange(4, 32), size=n_facts)
    return [[1, int(s), int(r), int(o), 2] for s, r, o in
            zip(subjects, rng.integers(4, 32, n_facts), rng.integers(4, 32, n_facts))]


def test_train_zero_steps_is_noop():
    params = init_params(SMALL)
    result = train(params, _memory_corpus(), TrainConfig(steps=0))
    assert params_checksum(result.params) == params_checksum(params)


def test_train_halves_loss_and_is_deterministic():
    corpus = _memory_corpus()
    cfg = TrainConfig(steps=500, batch_size=16, learning_rate=3e-3, seed=4)
    a = train(init_params(SMALL), corpus, cfg)
    b = train(init_params(SMALL), corpus, cfg)
    assert a.final_loss < 0.5 * a.initial_loss
    assert a.final_loss == b.final_loss
    assert params_checksum(a.params) == params_checksum(b.params)


def test_train_beats_unigram_baseline():
    # the model must at least learn what an order-0 predictor knows
    corpus = _memory_corpus()
    targets = np.concatenate([seq[1:] for seq in corpus])
    freq = np.bincount(targets, minlength=32) / len(targets)
    unigram = -np.mean(np.log(freq[targets]))
    result = train(init_params(SMALL), corpus, TrainConfig(steps=500, batch_size=16, seed=4))
    assert result.final_loss < unigram


def test_train_rejects_long_sequences():
    with pytest.raises(InputError):
        train(init_params(SMALL), [[1] * 30], TrainConfig(steps=1))


def test_checkpoint_round_trip(tmp_path):
    params = init_params(SMALL)
    digest = save_params(tmp_path / "m.ckpt", params)
    assert digest == checkpoint.file_sha256(tmp_path / "m.ckpt")
    loaded = load_params(tmp_path / "m.ckpt")
    assert loaded.config == SMALL
    assert params_checksum(loaded) == params_checksum(params)
    assert list(loaded.tensors) == list(params.tensors)


def test_checkpoint_layout(tmp_path):
    data = checkpoint.dumps({"a": np.arange(3, dtype=np.float32)}, meta={"x": 1})
    n = int.from_bytes(data[:8], "little")
    assert data[8 + n:] == np.arange(3, dtype="<f4").tobytes()
    tensors, meta = checkpoint.loads(data)
    assert meta == {"x": 1} and tensors["a"].tolist() == [0.0, 1.0, 2.0]


def test_load_rejects_corrupt_checkpoint(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"\x05\x00")
    with pytest.raises(InputError):
        load_params(path)
    checkpoint.save(path, {"a": np.zeros(2)}, meta={"kind": "predictor"})
    with pytest.raises(InputError):
        load_params(path)


def test_estimator_wrapper():
    est = ToyLanguageModel(vocab_size=32, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq=24, steps=5)
    assert est.get_params()["steps"] == 5
    est.fit(_memory_corpus(10))
    assert len(est.loss_history_) == 5
    assert len(est.generate([1, 5], max_new=3)) == 5
    assert isinstance(est.params_, ModelParams)
