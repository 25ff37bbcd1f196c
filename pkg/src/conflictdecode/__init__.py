"""Conflict-aware decoding for retrieval-augmented QA on a toy transformer.

A greedy draft's attention tells how much the generated tokens lean on the
supplied context versus on themselves. A small classifier on those fidelity
features decides whether the context contradicts the model's memory; if so
the answer is re-decoded contrastively with a per-token coefficient.
"""
from .checkpoint import file_sha256
from .config import RunConfig
from .decoding import (ConflictAwareDecoder, DecodeConfig, DecodeResult, StepTrace, alpha_adjusted,
                       contrastive_step, decode, decode_adacad, decode_cad, decode_dcd, decode_greedy,
                       jensen_shannon, route_and_decode)
from .evaluation import EvalReport, StrategyResult, SweepResult, evaluate, match_answer, sweep, timing_report
from .exceptions import (ConfigurationError, ConflictDecodeError, DivergenceError, GenerationError, InjectionError,
                         InputError, NumericError)
from .fidelity import (FidelityFeaturizer, FidelityMatrix, HiddenStateFeaturizer, SpanAttentionSummary,
                       fidelity_from_attention, fidelity_matrix, fidelity_scalar, flatten_features,
                       span_attention_summary)
from .forge import (KBSpec, KnowledgeBase, QAInstance, Triple, build_kb, build_training_corpus, inject_conflict,
                    inject_noise, quality_filter, synthesize_dataset)
from .model import (ModelConfig, ModelParams, ToyLanguageModel, TrainConfig, forward, generate_greedy,
                    init_params, load_params, save_params, train)
from .predictor import (ConstantConflictPredictor, MLPConflictPredictor, RandomConflictPredictor,
                        evaluate_predictor)
from .seeding import derive_seed
from .text import Vocabulary, build_prompt

__version__ = "0.1.0"
