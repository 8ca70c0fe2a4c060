"""Abductive learning for handwritten binary equations.

A small perception network reads glyph sequences, an abductive reasoner
(exact enumeration over operation tables, or a chat model in a
self-feedback loop) repairs them and identifies the hidden operation, and
the repaired labels retrain perception.
"""

from .knowledge import Exemplar, KnowledgeBase, check_structural, default_kb, select_exemplars
from .llm import (
    CDP_QUERY,
    PENALTY,
    RDP_QUERY,
    LiveBackend,
    MockBackend,
    RecordingBackend,
    ReplayBackend,
    build_cdp,
    build_rdp,
    parse_reply,
    self_feedback_loop,
)
from .loop import LoopConfig, build_judgement_set, judge, run_abl, train_judge, train_perception_only
from .metrics import Metrics, auc, compute_metrics
from .oracle import HypothesisState, RevisionResult, abduce_batch, check_consistency, filter_hypotheses, revise
from .perception import PerceptionModel, PseudoLabel, classify_sequence, embed, grad_check, init_model, train_step
from .task import (
    STANDARD_CODE,
    XOR_CODE,
    Dataset,
    EquationSample,
    GenConfig,
    OperationTable,
    Symbol,
    eval_equation,
    generate_dataset,
    make_standard_table,
    make_xor_table,
    parse_expression,
    render_glyph,
)

__version__ = "0.1.0"
