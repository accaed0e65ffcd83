"""Residual-stream instrumentation, neuron attribution and neuron editing for
decoder-only transformers, with gender-bias and capability metrics."""

from .attribution import (
    NeuronReport,
    aggregate_importance,
    attn_value_importance,
    cases_from_pairs,
    dominant_position,
    ffn_value_importance,
    head_causal_score,
    head_logit_score,
    neuron_frequency,
    query_neuron_scores,
    top_value_neurons,
)
from .config import ModelConfig, NeuronId
from .datasets import PairedCase, StereoCase, TaskCase, generate_commonwords
from .editing import CnaRow, cna_compare, mask_head, mask_neurons
from .engine import InferenceTrace, char_normalized_entropy, forward
from .ine import EditPlan, IneParams, apply_plan, ine_select
from .lens import unembed_project
from .metrics import (
    BiasMetrics,
    entropy_difference_eval,
    icat,
    stereoset_eval,
    task_accuracy,
    winogender_eval,
)
from .tokenizer import Tokenizer, train_bpe
from .weights import TransformerWeights, export_weights, load_weights, random_model

__version__ = "0.1.0"

__all__ = [
    "BiasMetrics", "CnaRow", "EditPlan", "IneParams", "InferenceTrace", "ModelConfig", "NeuronId",
    "NeuronReport", "PairedCase", "StereoCase", "TaskCase", "Tokenizer", "TransformerWeights",
    "aggregate_importance", "apply_plan", "attn_value_importance", "cases_from_pairs",
    "char_normalized_entropy", "cna_compare", "dominant_position", "entropy_difference_eval",
    "export_weights", "ffn_value_importance", "forward", "generate_commonwords", "head_causal_score",
    "head_logit_score", "icat", "ine_select", "load_weights", "mask_head", "mask_neurons",
    "neuron_frequency", "query_neuron_scores", "random_model", "stereoset_eval", "task_accuracy",
    "top_value_neurons", "train_bpe", "unembed_project", "winogender_eval",
]
