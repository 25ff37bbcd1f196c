"""Small decoder-only transformer with attention capture.

Parameters live in a plain ``dict[str, np.ndarray]`` of float32 arrays so
that inference is a pure numpy function. Training builds a torch mirror of
the same computation, optimizes it with Adam and exports the weights back.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import checkpoint
from .exceptions import ConfigurationError, DivergenceError, InputError

logger = logging.getLogger(__name__)

_GELU_C = math.sqrt(2.0 / math.pi)
_LN_EPS = 1e-5
DEFAULT_MAX_NEW = 32


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_seq: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.max_seq < 2:
            raise ConfigurationError("max_seq must be at least 2")
        if self.d_model % self.n_heads:
            raise ConfigurationError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def d_k(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    learning_rate: float = 3e-3
    seed: int = 0
    warmup: int = 100
    min_lr_ratio: float = 0.1
    weight_decay: float = 0.0


@dataclass
class ModelParams:
    """Model config plus named float32 tensors."""

    config: ModelConfig
    tensors: dict

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


@dataclass
class ForwardOutput:
    logits: np.ndarray
    attention: np.ndarray | None = None
    hidden_states: list | None = None


@dataclass
class TrainResult:
    params: dict
    losses: list = field(default_factory=list)

    @property
    def initial_loss(self):
        return self.losses[0] if self.losses else float("nan")

    @property
    def final_loss(self):
        return self.losses[-1] if self.losses else float("nan")


def param_shapes(config):
    """Ordered ``name -> shape`` map; the order is also the init order."""
    d, f = config.d_model, config.d_ff
    shapes = {"wte": (config.vocab_size, d), "wpe": (config.max_seq, d)}
    for i in range(config.n_layers):
        p = f"h{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.bq": (d,),
            p + "attn.wk": (d, d), p + "attn.bk": (d,),
            p + "attn.wv": (d, d), p + "attn.bv": (d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, f), p + "mlp.b1": (f,),
            p + "mlp.w2": (f, d), p + "mlp.b2": (d,),
        })
    shapes.update({"lnf.g": (d,), "lnf.b": (d,), "head": (d, config.vocab_size)})
    return shapes


def init_params(config):
    """Seeded init: N(0, 0.02) weights, unit layer-norm gains, zero offsets."""
    if not isinstance(config, ModelConfig):
        raise ConfigurationError("init_params expects a ModelConfig")
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif leaf.startswith("b"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = rng.normal(0.0, 0.02, size=shape).astype(np.float32)
    return ModelParams(config, tensors)


def n_parameters(params):
    return int(sum(v.size for v in params.tensors.values()))


def params_checksum(params):
    h = hashlib.sha256()
    for name in sorted(params.tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params.tensors[name], dtype="<f4").tobytes())
    return h.hexdigest()


def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + np.float32(_LN_EPS)) * g + b


def _gelu(x):
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(np.float32(_GELU_C) * (x + np.float32(0.044715) * x * x * x)))


def _check_tokens(tokens, vocab_size, max_seq):
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim != 1 or arr.size == 0:
        raise InputError("tokens must be a nonempty 1-d sequence")
    if arr.size > max_seq:
        raise InputError(f"sequence length {arr.size} exceeds max_seq={max_seq}")
    if arr.min() < 0 or arr.max() >= vocab_size:
        raise InputError(f"token id out of range [0, {vocab_size})")
    return arr


def forward(params, tokens, capture_attention=True, capture_hidden=False):
    """Run the model on one token sequence.

    Returns logits for every position, the ``[layers, heads, q, k]``
    attention tensor when requested and the residual stream after each
    block when ``capture_hidden`` is set.
    """
    cfg = params.config
    n_layers, n_heads, d_model, d_k = cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_k
    ids = _check_tokens(tokens, cfg.vocab_size, cfg.max_seq)
    params = params.tensors
    T = ids.size
    scale = np.float32(1.0 / math.sqrt(d_k))
    visible = np.tril(np.ones((T, T), dtype=bool))

    x = params["wte"][ids] + params["wpe"][:T]
    attn_maps = np.zeros((n_layers, n_heads, T, T), dtype=np.float32) if capture_attention else None
    hidden = [] if capture_hidden else None
    for i in range(n_layers):
        p = f"h{i}."
        h = _layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        q = (h @ params[p + "attn.wq"] + params[p + "attn.bq"]).reshape(T, n_heads, d_k).transpose(1, 0, 2)
        k = (h @ params[p + "attn.wk"] + params[p + "attn.bk"]).reshape(T, n_heads, d_k).transpose(1, 0, 2)
        v = (h @ params[p + "attn.wv"] + params[p + "attn.bv"]).reshape(T, n_heads, d_k).transpose(1, 0, 2)
        scores = (q @ k.transpose(0, 2, 1)) * scale
        scores = np.where(visible, scores, -np.inf)
        scores = scores - scores.max(-1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(-1, keepdims=True)
        if capture_attention:
            attn_maps[i] = weights
        ctx = (weights @ v).transpose(1, 0, 2).reshape(T, d_model)
        x = x + ctx @ params[p + "attn.wo"] + params[p + "attn.bo"]
        h = _layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        x = x + _gelu(h @ params[p + "mlp.w1"] + params[p + "mlp.b1"]) @ params[p + "mlp.w2"] + params[p + "mlp.b2"]
        if capture_hidden:
            hidden.append(x.copy())
    logits = _layer_norm(x, params["lnf.g"], params["lnf.b"]) @ params["head"]
    return ForwardOutput(logits=logits, attention=attn_maps, hidden_states=hidden)


def next_token_logits(params, tokens):
    return forward(params, tokens, capture_attention=False).logits[-1]


def argmax_lowest(values):
    """Index of the maximum; ``np.argmax`` already returns the first (lowest) one."""
    return int(np.argmax(values))


def generate_greedy(params, prompt, max_new=DEFAULT_MAX_NEW, end_id=None):
    """Greedy continuation of ``prompt``; returns prompt plus new tokens."""
    seq = [int(t) for t in prompt]
    if not seq:
        raise InputError("prompt must be nonempty")
    max_seq = params.config.max_seq
    if len(seq) + max_new > max_seq:
        raise InputError(f"prompt length {len(seq)} + max_new {max_new} exceeds max_seq={max_seq}")
    for _ in range(max_new):
        tok = argmax_lowest(next_token_logits(params, seq))
        seq.append(tok)
        if end_id is not None and tok == end_id:
            break
    return seq


# --- training -------------------------------------------------------------

def _torch_forward(tp, ids, n_layers, n_heads):
    import torch
    import torch.nn.functional as F

    B, T = ids.shape
    d_model = tp["wte"].shape[1]
    d_k = d_model // n_heads
    x = tp["wte"][ids] + tp["wpe"][:T]
    mask = torch.ones(T, T, dtype=torch.bool).tril()
    for i in range(n_layers):
        p = f"h{i}."
        h = F.layer_norm(x, (d_model,), tp[p + "ln1.g"], tp[p + "ln1.b"], eps=_LN_EPS)
        q = (h @ tp[p + "attn.wq"] + tp[p + "attn.bq"]).view(B, T, n_heads, d_k).transpose(1, 2)
        k = (h @ tp[p + "attn.wk"] + tp[p + "attn.bk"]).view(B, T, n_heads, d_k).transpose(1, 2)
        v = (h @ tp[p + "attn.wv"] + tp[p + "attn.bv"]).view(B, T, n_heads, d_k).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(d_k)
        scores = scores.masked_fill(~mask, float("-inf"))
        ctx = (scores.softmax(-1) @ v).transpose(1, 2).reshape(B, T, d_model)
        x = x + ctx @ tp[p + "attn.wo"] + tp[p + "attn.bo"]
        h = F.layer_norm(x, (d_model,), tp[p + "ln2.g"], tp[p + "ln2.b"], eps=_LN_EPS)
        x = x + F.gelu(h @ tp[p + "mlp.w1"] + tp[p + "mlp.b1"], approximate="tanh") @ tp[p + "mlp.w2"] + tp[p + "mlp.b2"]
    x = F.layer_norm(x, (d_model,), tp["lnf.g"], tp["lnf.b"], eps=_LN_EPS)
    return x @ tp["head"]


def torch_logits(params, tokens):
    """Logits from the torch training graph; an independent check on ``forward``."""
    import torch

    cfg = params.config
    with torch.no_grad():
        tp = {k: torch.from_numpy(np.array(v)) for k, v in params.tensors.items()}
        ids = torch.as_tensor(np.asarray(tokens, dtype=np.int64))[None]
        return _torch_forward(tp, ids, cfg.n_layers, cfg.n_heads)[0].numpy()


def _lr_at(step, cfg):
    if cfg.warmup and step < cfg.warmup:
        return cfg.learning_rate * (step + 1) / cfg.warmup
    span = max(1, cfg.steps - cfg.warmup)
    progress = min(1.0, (step - cfg.warmup) / span)
    floor = cfg.min_lr_ratio
    return cfg.learning_rate * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * progress)))


def train(params, corpus, train_config, pad_id=0, log_every=0, loss_starts=None):
    """Next-token cross-entropy training with Adam.

    ``corpus`` is a list of token-id sequences; padding positions are
    excluded from the loss. ``loss_starts[i]``, when given, is the index of
    the first token of sequence ``i`` that counts as a target (e.g. the
    answer of a QA prompt). Returns a :class:`TrainResult` holding fresh
    parameters and the per-step loss history; the input dict is untouched.
    """
    import torch
    import torch.nn.functional as F

    if not corpus:
        raise InputError("training corpus is empty")
    mcfg = params.config
    vocab_size, n_layers, n_heads = mcfg.vocab_size, mcfg.n_layers, mcfg.n_heads
    seqs = [_check_tokens(s, vocab_size, mcfg.max_seq) for s in corpus]
    if any(s.size < 2 for s in seqs):
        raise InputError("every training sequence needs at least 2 tokens")
    if loss_starts is None:
        starts = np.ones(len(seqs), dtype=np.int64)
    else:
        starts = np.asarray(loss_starts, dtype=np.int64)
        if starts.shape != (len(seqs),):
            raise InputError("loss_starts needs one entry per sequence")
        if np.any(starts < 1) or np.any(starts >= [s.size for s in seqs]):
            raise InputError("each loss start must leave at least one target token")
    cfg = train_config
    if cfg.steps == 0:
        return TrainResult(params=params.copy(), losses=[])

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    tp = {k: torch.nn.Parameter(torch.from_numpy(np.array(v, dtype=np.float32))) for k, v in params.tensors.items()}
    decay = [p for k, p in tp.items() if p.ndim == 2]
    no_decay = [p for k, p in tp.items() if p.ndim != 2]
    opt = torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.learning_rate, betas=(0.9, 0.98))

    losses = []
    for step in range(cfg.steps):
        idx = rng.integers(0, len(seqs), size=cfg.batch_size)
        batch = [seqs[i] for i in idx]
        width = max(s.size for s in batch)
        ids = np.full((len(batch), width), pad_id, dtype=np.int64)
        for row, s in enumerate(batch):
            ids[row, :s.size] = s
        ids_t = torch.from_numpy(ids)
        targets = ids_t[:, 1:].clone()
        lengths = torch.tensor([s.size for s in batch])
        first = torch.from_numpy(starts[idx] - 1)
        pos = torch.arange(width - 1)[None, :]
        valid = (pos < (lengths[:, None] - 1)) & (pos >= first[:, None])
        targets[~valid] = -100
        logits = _torch_forward(tp, ids_t[:, :-1], n_layers, n_heads)
        loss = F.cross_entropy(logits.reshape(-1, vocab_size), targets.reshape(-1), ignore_index=-100)
        value = float(loss.item())
        if not math.isfinite(value):
            raise DivergenceError(step, value)
        losses.append(value)
        for group in opt.param_groups:
            group["lr"] = _lr_at(step, cfg)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(list(tp.values()), 1.0)
        opt.step()
        if log_every and step % log_every == 0:
            logger.info("step %d loss %.4f", step, value)

    out = {k: v.detach().numpy().astype(np.float32).copy() for k, v in tp.items()}
    return TrainResult(params=ModelParams(mcfg, out), losses=losses)


def save_params(path, params):
    return checkpoint.save(path, params.tensors, meta={"kind": "model", "config": params.config.to_dict()})


def load_params(path):
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "model":
        raise InputError(f"{path} is not a model checkpoint")
    config = ModelConfig(**meta["config"])
    expected = param_shapes(config)
    if set(expected) != set(tensors):
        raise InputError("checkpoint tensor names do not match its config")
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != shape:
            raise InputError(f"tensor {name} has shape {tensors[name].shape}, expected {shape}")
    return ModelParams(config, tensors)


class ToyLanguageModel(BaseEstimator):
    """Estimator wrapper: ``fit`` pretrains on a token corpus, ``generate`` decodes greedily."""

    def __init__(self, vocab_size=512, d_model=64, n_layers=4, n_heads=4, d_ff=256, max_seq=128,
                 seed=0, steps=3000, batch_size=32, learning_rate=3e-3, train_seed=0, pad_id=0):
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.max_seq = max_seq
        self.seed = seed
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.train_seed = train_seed
        self.pad_id = pad_id

    @property
    def model_config(self):
        return ModelConfig(self.vocab_size, self.d_model, self.n_layers, self.n_heads,
                           self.d_ff, self.max_seq, self.seed)

    def fit(self, corpus, y=None):
        params = init_params(self.model_config)
        result = train(params, corpus,
                       TrainConfig(self.steps, self.batch_size, self.learning_rate, self.train_seed),
                       pad_id=self.pad_id)
        self.params_ = result.params
        self.loss_history_ = result.losses
        return self

    def forward(self, tokens, capture_attention=True, capture_hidden=False):
        check_is_fitted(self, "params_")
        return forward(self.params_, tokens, capture_attention, capture_hidden)

    def generate(self, prompt, max_new=DEFAULT_MAX_NEW, end_id=None):
        check_is_fitted(self, "params_")
        return generate_greedy(self.params_, prompt, max_new, end_id)
