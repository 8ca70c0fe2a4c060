"""Abductive learning loop: perceive, revise, retrain, then judge veracity."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .knowledge import Exemplar, KnowledgeBase
from .llm import LiveBackend, MockBackend, self_feedback_loop
from .oracle import (
    HypothesisState,
    RevisionResult,
    abduce_batch,
    confidence_order,
    default_budget,
    filter_hypotheses,
    revision_cost,
    state_from_facts,
)
from .perception import (
    Embedding,
    PerceptionModel,
    PseudoLabel,
    as_targets,
    hidden_activations,
    init_model,
    predict_proba,
    train_step_arrays,
)
from .task import Dataset, EquationSample, ParseError, consistent_codes, parse_expression, to_indices

log = logging.getLogger(__name__)

REASONERS = ("oracle", "mock", "live")


@dataclass(frozen=True)
class LoopConfig:
    rounds: int = 3
    lambda_unlabel: float = 1.0
    reasoner: str = "oracle"
    edit_budget: int | None = None
    label_steps: int = 100
    retrain_steps: int = 100
    lr: float = 0.1
    hidden: int = 64
    seed: int = 0
    max_iterations: int = 5
    gated: bool = True
    max_revision_cost: float | None = 1.5
    n_exemplars: int = 3
    judge_steps: int = 5000
    judge_lr: float = 1.0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if self.lambda_unlabel < 0:
            raise ValueError("lambda_unlabel must be non-negative")
        if self.reasoner not in REASONERS:
            raise ValueError(f"reasoner must be one of {REASONERS}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LoopConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class RoundStats:
    round: int
    glyph_acc: float
    eqn_acc: float
    surviving_count: int
    mean_edits: float
    abstained: int = 0


@dataclass
class JudgementModel:
    weights: np.ndarray
    bias: float
    threshold: float = 0.5

    def score(self, vector: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-(np.asarray(vector) @ self.weights + self.bias)))


@dataclass
class AblRun:
    model: PerceptionModel
    state: HypothesisState
    stats: list[RoundStats]
    revisions: list[RevisionResult | None] = field(default_factory=list)
    judge: JudgementModel | None = None
    transcripts: list[dict] = field(default_factory=list)


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _stack(samples: Sequence[EquationSample]) -> tuple[np.ndarray, np.ndarray]:
    if not samples:
        return np.zeros((0, 784)), np.zeros(0, dtype=int)
    X = np.concatenate([s.glyphs.reshape(s.length, -1) for s in samples]) / 255.0
    bounds = np.cumsum([0] + [s.length for s in samples])
    return X, bounds


def classify_all(model: PerceptionModel, samples: Sequence[EquationSample]) -> list[PseudoLabel]:
    """Batched :func:`classify_sequence` over many equations."""
    X, bounds = _stack(samples)
    if len(X) == 0:
        return []
    P = predict_proba(model, X)
    return [PseudoLabel(P[bounds[i] : bounds[i + 1]]) for i in range(len(samples))]


def embed_all(model: PerceptionModel, samples: Sequence[EquationSample]) -> np.ndarray:
    X, bounds = _stack(samples)
    H = hidden_activations(model, X)
    return np.stack([H[bounds[i] : bounds[i + 1]].mean(axis=0) for i in range(len(samples))])


def recognition_stats(pseudos: Sequence[PseudoLabel], truths: Sequence[str]) -> tuple[float, float]:
    """(glyph accuracy, whole-equation accuracy) of the argmax sequences."""
    hits = total = exact = 0
    for p, t in zip(pseudos, truths):
        pred = p.argmax_symbols
        hits += sum(a == b for a, b in zip(pred, t))
        total += len(t)
        exact += pred == t
    return hits / max(total, 1), exact / max(len(truths), 1)


def _eval_pairs(dataset: Dataset, eval_samples) -> tuple[list[EquationSample], list[str]]:
    if eval_samples is not None:
        return list(eval_samples), [s.truth for s in eval_samples]
    if dataset.unlabeled_truth is not None and dataset.unlabeled:
        return dataset.unlabeled, [t for t, _ in dataset.unlabeled_truth]
    return dataset.labeled, [s.truth for s in dataset.labeled]


def _check_classes(dataset: Dataset) -> None:
    seen = {c for s in dataset.labeled for c in s.truth}
    missing = [c for c in "01+=" if c not in seen]
    if missing:
        raise ValueError(f"labeled data lacks symbol classes {missing}")


def labeled_arrays(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    X, _ = _stack(dataset.labeled)
    y = [i for s in dataset.labeled for i in to_indices(s.truth)]
    return X, as_targets(y)


def labeled_facts(dataset: Dataset) -> list[tuple[str, bool]]:
    return [(s.truth, bool(s.veracity)) for s in dataset.labeled]


def exemplars_from(dataset: Dataset, n: int = 8) -> list[Exemplar]:
    """Up to ``n`` labeled equations as prompt exemplars, both verdicts mixed."""
    pos = [s for s in dataset.labeled if s.veracity]
    neg = [s for s in dataset.labeled if not s.veracity]
    out = []
    for i in range(n):
        pool = pos if i % 2 == 0 else neg
        j = i // 2
        if j < len(pool):
            out.append(Exemplar(pool[j].truth, bool(pool[j].veracity)))
    return out


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------


def _revise_with_llm(pseudos, kb, state, config: LoopConfig, backend, transcripts):
    results: list[RevisionResult | None] = [None] * len(pseudos)
    mock = backend if isinstance(backend, MockBackend) else None
    for i in confidence_order(pseudos):
        p = pseudos[i]
        budget = config.edit_budget if config.edit_budget is not None else default_budget(len(p))
        bk = MockBackend(state, budget).bind(p) if mock is not None or backend is None else backend
        loop = self_feedback_loop(
            p.argmax_symbols,
            kb,
            bk,
            config.max_iterations,
            state=state,
            pseudo=p,
            gated=config.gated,
            k=config.n_exemplars,
        )
        transcripts.append({"index": i, "status": loop.status, "exchanges": loop.transcript()})
        if loop.status != "accepted":
            continue
        res = loop.result
        if config.max_revision_cost is not None and revision_cost(p, res) > config.max_revision_cost:
            continue
        try:
            parse_expression(res.revised_symbols)
        except ParseError:
            continue  # faithful mode may accept ungrammatical text; never train on it
        if len(res.revised_symbols) != len(p):
            continue
        new_state = filter_hypotheses(state, (res.revised_symbols, True))
        if new_state.count == 0:
            continue
        state = new_state
        results[i] = res
    return state, results


def run_abl(
    dataset: Dataset,
    kb: KnowledgeBase,
    config: LoopConfig = LoopConfig(),
    backend=None,
    eval_samples: Sequence[EquationSample] | None = None,
    progress: Callable[[RoundStats], None] | None = None,
) -> AblRun:
    """Alternate perception training and abductive revision of unlabeled data.

    Each round trains on the labeled glyphs, classifies the unlabeled
    equations, revises them with the configured reasoner, then retrains on
    ``CE(labeled) + lambda_unlabel * CE(revised)``.  Stats row 0 is the
    perception-only model after the first labeled phase.
    """
    _check_classes(dataset)
    X_l, T_l = labeled_arrays(dataset)
    facts = labeled_facts(dataset)
    state = state_from_facts(facts, kb)
    if config.reasoner == "live" and backend is None:
        backend = LiveBackend()
    model = init_model(config.hidden, config.seed)
    ev_samples, ev_truth = _eval_pairs(dataset, eval_samples)
    stats: list[RoundStats] = []
    revisions: list[RevisionResult | None] = []
    transcripts: list[dict] = []

    def record(r: int, edits: float, abstained: int) -> None:
        g, e = recognition_stats(classify_all(model, ev_samples), ev_truth)
        row = RoundStats(r, g, e, state.count, edits, abstained)
        stats.append(row)
        log.info("round %d: glyph_acc=%.4f eqn_acc=%.4f surviving=%d", r, g, e, state.count)
        if progress:
            progress(row)

    for r in range(1, config.rounds + 1):
        for _ in range(config.label_steps):
            train_step_arrays(model, X_l, T_l, config.lr)
        if r == 1:
            record(0, 0.0, 0)

        pseudos = classify_all(model, dataset.unlabeled)
        if config.reasoner == "oracle":
            state, revisions = abduce_batch(
                pseudos, kb, facts, config.edit_budget, state=state, max_cost=config.max_revision_cost
            )
        else:
            state, revisions = _revise_with_llm(pseudos, kb, state, config, backend, transcripts)

        accepted = [(s, res) for s, res in zip(dataset.unlabeled, revisions) if res is not None]
        if config.lambda_unlabel > 0 and accepted:
            X_u, _ = _stack([s for s, _ in accepted])
            T_u = as_targets([i for _, res in accepted for i in to_indices(res.revised_symbols)])
            X = np.concatenate([X_l, X_u])
            T = np.concatenate([T_l, T_u])
            w = np.concatenate([np.full(len(X_l), 1.0 / len(X_l)), np.full(len(X_u), config.lambda_unlabel / len(X_u))])
            for _ in range(config.retrain_steps):
                train_step_arrays(model, X, T, config.lr, w)
        else:
            for _ in range(config.retrain_steps):
                train_step_arrays(model, X_l, T_l, config.lr)

        edits = float(np.mean([res.edits for _, res in accepted])) if accepted else 0.0
        record(r, edits, len(revisions) - len(accepted))

    pairs = build_judgement_set(model, state, dataset.unlabeled)
    pairs += list(zip(embed_all(model, dataset.labeled), [bool(s.veracity) for s in dataset.labeled]))
    judge = train_judge(pairs, config.judge_steps, config.judge_lr, config.seed)
    return AblRun(model, state, stats, revisions, judge, transcripts)


def train_perception_only(dataset: Dataset, config: LoopConfig = LoopConfig()) -> AblRun:
    """Labeled-only baseline with the same step schedule as :func:`run_abl`."""
    _check_classes(dataset)
    X_l, T_l = labeled_arrays(dataset)
    model = init_model(config.hidden, config.seed)
    for _ in range(config.rounds * (config.label_steps + config.retrain_steps)):
        train_step_arrays(model, X_l, T_l, config.lr)
    pairs = list(zip(embed_all(model, dataset.labeled), [bool(s.veracity) for s in dataset.labeled]))
    judge = train_judge(pairs, config.judge_steps, config.judge_lr, config.seed)
    return AblRun(model, HypothesisState.full(), [], [], judge)


# --------------------------------------------------------------------------
# judgement
# --------------------------------------------------------------------------


def consistent_with_all(symbols: str, state: HypothesisState) -> bool:
    try:
        eq = parse_expression(symbols)
    except ParseError:
        return False
    return bool(np.all(consistent_codes(eq.x, eq.y, eq.z, state.codes)))


def build_judgement_set(
    model: PerceptionModel,
    state: HypothesisState,
    samples: Sequence[EquationSample],
    revisions: Sequence[RevisionResult | None] | None = None,
) -> list[tuple[np.ndarray, bool]]:
    """(embedding, level) pairs; level is consistency with every surviving table.

    With ``revisions`` the revised sequence is judged and abstentions
    (``None``) are dropped; otherwise the model's argmax sequence is used.
    """
    if state.count == 0:
        raise ValueError("no surviving hypotheses")
    if not samples:
        return []
    if revisions is not None:
        keep = [(s, r.revised_symbols) for s, r in zip(samples, revisions) if r is not None]
    else:
        keep = [(s, p.argmax_symbols) for s, p in zip(samples, classify_all(model, samples))]
    if not keep:
        return []
    vectors = embed_all(model, [s for s, _ in keep])
    return [(v, consistent_with_all(text, state)) for v, (_, text) in zip(vectors, keep)]


def train_judge(pairs, steps: int = 5000, lr: float = 1.0, seed: int = 0) -> JudgementModel:
    """Logistic regression by full-batch gradient descent on standardised features."""
    if not pairs:
        raise ValueError("no judgement pairs")
    X = np.stack([np.asarray(v.vector if isinstance(v, Embedding) else v, dtype=np.float64) for v, _ in pairs])
    y = np.array([float(bool(level)) for _, level in pairs])
    if y.min() == y.max():
        raise ValueError("judgement training needs both levels")
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd < 1e-12] = 1.0
    Z = (X - mu) / sd
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 1e-3, X.shape[1])
    b = 0.0
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(Z @ w + b)))
        g = p - y
        w -= lr * (Z.T @ g) / len(y)
        b -= lr * g.mean()
    w_raw = w / sd
    return JudgementModel(w_raw, float(b - w_raw @ mu))


def judge(model: JudgementModel, embedding) -> tuple[bool, float]:
    vec = embedding.vector if isinstance(embedding, Embedding) else embedding
    score = float(model.score(vec))
    return score >= model.threshold, score
