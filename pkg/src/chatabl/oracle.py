"""Exact symbolic abduction over the 65,536 operation-table hypotheses."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .knowledge import KnowledgeBase
from .perception import PseudoLabel
from .task import (
    ALL_CODES,
    ALPHABET,
    N_CODES,
    OperationTable,
    ParseError,
    consistent_codes,
    eval_equation,
    parse_expression,
    to_string,
)


def check_consistency(symbols, table: OperationTable) -> bool:
    try:
        eq = parse_expression(symbols)
    except ParseError:
        return False
    return eval_equation(eq.x, eq.y, table) == eq.z


@dataclass(frozen=True, eq=False)
class HypothesisState:
    surviving: np.ndarray  # bool mask over all table codes
    facts_applied: int = 0

    def __post_init__(self):
        if self.surviving.shape != (N_CODES,) or self.surviving.dtype != bool:
            raise ValueError("surviving must be a boolean mask over all 65,536 codes")
        self.surviving.setflags(write=False)

    @classmethod
    def full(cls) -> "HypothesisState":
        return cls(np.ones(N_CODES, dtype=bool))

    @classmethod
    def only(cls, codes: Iterable[int]) -> "HypothesisState":
        mask = np.zeros(N_CODES, dtype=bool)
        mask[list(codes)] = True
        return cls(mask)

    @property
    def count(self) -> int:
        return int(self.surviving.sum())

    @property
    def codes(self) -> np.ndarray:
        return np.flatnonzero(self.surviving).astype(np.uint32)

    def __contains__(self, code: int) -> bool:
        return bool(self.surviving[int(code)])

    def __eq__(self, other) -> bool:
        return isinstance(other, HypothesisState) and np.array_equal(self.surviving, other.surviving)

    __hash__ = None


class UnparseableFact(ValueError):
    pass


def filter_hypotheses(state: HypothesisState, fact: tuple[str, bool]) -> HypothesisState:
    """Keep the codes whose verdict on ``fact`` matches its stated veracity."""
    symbols, veracity = fact
    try:
        eq = parse_expression(symbols)
    except ParseError as exc:
        raise UnparseableFact(f"fact {to_string(symbols)!r} does not parse: {exc}") from None
    idx = state.codes
    keep = consistent_codes(eq.x, eq.y, eq.z, idx) == bool(veracity)
    mask = np.zeros(N_CODES, dtype=bool)
    mask[idx[keep]] = True
    return HypothesisState(mask, state.facts_applied + 1)


def apply_table_constraints(state: HypothesisState, constraints: Iterable[tuple[int, int, int, int, int]]) -> HypothesisState:
    mask = state.surviving.copy()
    for a, b, c, s, c_out in constraints:
        i = (a << 2) | (b << 1) | c
        mask &= ((ALL_CODES >> (2 * i)) & 1) == s
        mask &= ((ALL_CODES >> (2 * i + 1)) & 1) == c_out
    return HypothesisState(mask, state.facts_applied)


class ConsistencyCache:
    """Memoised ``symbols -> tuple of surviving codes that accept them``."""

    # below this many surviving codes a per-table python loop beats numpy
    SMALL = 24

    def __init__(self, state: HypothesisState):
        self.codes = state.codes
        self.tables = [OperationTable.from_code(int(c)) for c in self.codes] if len(self.codes) <= self.SMALL else None
        self._memo: dict[str, tuple[int, ...]] = {}

    def __call__(self, text: str) -> tuple[int, ...]:
        hit = self._memo.get(text)
        if hit is not None:
            return hit
        try:
            eq = parse_expression(text)
        except ParseError:
            out: tuple[int, ...] = ()
        else:
            if self.tables is not None:
                out = tuple(int(c) for c, t in zip(self.codes, self.tables) if eval_equation(eq.x, eq.y, t) == eq.z)
            else:
                out = tuple(int(c) for c in self.codes[consistent_codes(eq.x, eq.y, eq.z, self.codes)])
        self._memo[text] = out
        return out


@dataclass
class RevisionResult:
    revised_symbols: str
    supporting_tables: frozenset[int]
    log_score: float
    edits: int
    trace: list[str] = field(default_factory=list)


def default_budget(length: int) -> int:
    return math.ceil(length / 4)


def sequence_log_score(logp: np.ndarray, indices: Sequence[int]) -> float:
    """Sum of log-probabilities, accumulated left to right."""
    total = 0.0
    for i, s in enumerate(indices):
        total += float(logp[i, s])
    return total


def revision_cost(pseudo: PseudoLabel, result: RevisionResult) -> float:
    """Log-probability given up by the revision relative to the argmax."""
    argmax_score = sequence_log_score(_log_probs(pseudo.probs), pseudo.argmax_indices)
    return argmax_score - result.log_score


def _log_probs(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(probs)


def _sort_key(log_score: float, edits: int, indices: Sequence[int]):
    return (-log_score, edits, tuple(indices))


EXHAUSTIVE_BUDGET = 3
TIE_WINDOW = 1e-9


def revise(
    pseudo: PseudoLabel,
    state: HypothesisState,
    budget: int | None = None,
    cache: ConsistencyCache | None = None,
) -> RevisionResult | None:
    """Most probable sequence within ``budget`` edits that some surviving table accepts.

    Candidates are enumerated best-first by the log-probability they give up
    relative to the argmax.  For budgets above 3 an edited position may only
    take its second most probable symbol.  Ties go to fewer edits, then to
    the lexicographically smaller symbol-index sequence.  Returns ``None``
    when nothing within the budget is consistent.
    """
    if len(pseudo) == 0:
        raise ValueError("empty pseudo-label")
    if state.count == 0:
        raise ValueError("no surviving hypotheses")
    n = len(pseudo)
    budget = default_budget(n) if budget is None else int(budget)
    if budget < 0:
        raise ValueError("budget must be non-negative")
    cache = cache or ConsistencyCache(state)
    logp = _log_probs(pseudo.probs)
    base = pseudo.argmax_indices

    # (cost, position, symbol) for every admissible single edit, cheapest first
    items = []
    for pos in range(n):
        ranked = sorted(range(len(ALPHABET)), key=lambda s: (-pseudo.probs[pos, s], s))
        alts = [s for s in ranked if s != base[pos]]
        if budget > EXHAUSTIVE_BUDGET:
            alts = alts[:1]
        for s in alts:
            items.append((float(logp[pos, base[pos]] - logp[pos, s]), pos, s))
    items.sort()

    found: list[tuple] = []
    best_cost = None

    def consider(subset: tuple[int, ...], cost: float) -> None:
        nonlocal best_cost
        seq = list(base)
        for k in subset:
            seq[items[k][1]] = items[k][2]
        text = to_string(seq)
        codes = cache(text)
        if codes:
            if best_cost is None:
                best_cost = cost
            found.append((_sort_key(sequence_log_score(logp, seq), len(subset), seq), text, codes, subset))

    consider((), 0.0)
    heap: list[tuple[float, tuple[int, ...]]] = []
    if items and budget > 0:
        heap.append((items[0][0], (0,)))
    while heap:
        cost, subset = heapq.heappop(heap)
        if best_cost is not None and not cost <= best_cost + TIE_WINDOW:
            break
        last = subset[-1]
        if last + 1 < len(items):
            nxt = items[last + 1][0]
            if len(subset) < budget:
                heapq.heappush(heap, (cost + nxt, subset + (last + 1,)))
            heapq.heappush(heap, (cost - items[last][0] + nxt, subset[:-1] + (last + 1,)))
        positions = [items[k][1] for k in subset]
        if len(set(positions)) == len(positions):
            consider(subset, cost)

    if not found:
        return None
    key, text, codes, subset = min(found, key=lambda f: f[0])
    log_score = -key[0]
    trace = [f"perceived {pseudo.argmax_symbols}"]
    for k in sorted(subset, key=lambda k: items[k][1]):
        _, pos, sym = items[k]
        trace.append(
            f"position {pos}: {ALPHABET[base[pos]]} -> {ALPHABET[sym]} (p={pseudo.probs[pos, sym]:.4g})"
        )
    trace.append(f"{text} is accepted by {len(codes)} surviving table(s)")
    return RevisionResult(text, frozenset(codes), log_score, len(subset), trace)


# --------------------------------------------------------------------------
# Batch abduction
# --------------------------------------------------------------------------


class InconsistentFacts(ValueError):
    def __init__(self, message: str, prefix: list):
        super().__init__(message)
        self.prefix = prefix


def state_from_facts(facts: Sequence[tuple[str, bool]], kb: KnowledgeBase | None = None) -> HypothesisState:
    """Filter the full space by table constraints and facts, in order."""
    state = HypothesisState.full()
    if kb is not None and kb.table_constraints:
        state = apply_table_constraints(state, kb.table_constraints)
        if state.count == 0:
            raise InconsistentFacts("table constraints of the knowledge base are contradictory", [])
    for i, fact in enumerate(facts):
        state = filter_hypotheses(state, fact)
        if state.count == 0:
            raise InconsistentFacts(
                f"facts are mutually inconsistent; the first {i + 1} already admit no table",
                list(facts[: i + 1]),
            )
    return state


def confidence_order(pseudos: Sequence[PseudoLabel]) -> list[int]:
    """Indices by descending mean confidence (stable on ties)."""
    return sorted(range(len(pseudos)), key=lambda i: -pseudos[i].mean_confidence)


def abduce_batch(
    pseudos: Sequence[PseudoLabel],
    kb: KnowledgeBase,
    labeled_facts: Sequence[tuple[str, bool]],
    budget: int | None = None,
    state: HypothesisState | None = None,
    max_cost: float | None = None,
) -> tuple[HypothesisState, list[RevisionResult | None]]:
    """Revise pseudo-labels greedily, most confident first.

    Every accepted revision becomes a positive fact that further filters the
    hypothesis state.  ``None`` entries mark abstentions: no solution, or
    (with ``max_cost``) a revision giving up more than ``max_cost`` nats of
    log-probability relative to the argmax sequence.
    """
    if not labeled_facts and state is None:
        raise ValueError("abduction needs at least one labeled fact")
    if state is None:
        state = state_from_facts(labeled_facts, kb)
    results: list[RevisionResult | None] = [None] * len(pseudos)
    cache = ConsistencyCache(state)
    for i in confidence_order(pseudos):
        res = revise(pseudos[i], state, budget, cache)
        if res is None or (max_cost is not None and revision_cost(pseudos[i], res) > max_cost):
            continue
        results[i] = res
        new_state = filter_hypotheses(state, (res.revised_symbols, True))
        if new_state.count != state.count:
            cache = ConsistencyCache(new_state)
        state = new_state
    return state, results


# --------------------------------------------------------------------------
# Hypothesis dumps
# --------------------------------------------------------------------------


def dump_state(state: HypothesisState, path: str | Path | None = None) -> str:
    text = "".join(f"{int(c):04x}\n" for c in state.codes)
    if path is not None:
        Path(path).write_text(text, encoding="ascii")
    return text


def load_state(path: str | Path) -> HypothesisState:
    lines = Path(path).read_text(encoding="ascii").split()
    return HypothesisState.only(int(line, 16) for line in lines)


def describe_table(code: int) -> str:
    from .task import STANDARD_CODE, XOR_CODE

    if code == STANDARD_CODE:
        return "binary addition with carry"
    if code == XOR_CODE:
        return "binary addition without carry (bitwise xor)"
    return f"bitwise operation with truth-table code {code:#06x}"
