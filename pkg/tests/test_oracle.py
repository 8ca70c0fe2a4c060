import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chatabl.knowledge import default_kb
from chatabl.oracle import (
    ConsistencyCache,
    HypothesisState,
    InconsistentFacts,
    UnparseableFact,
    abduce_batch,
    apply_table_constraints,
    check_consistency,
    default_budget,
    describe_table,
    dump_state,
    filter_hypotheses,
    load_state,
    revise,
    revision_cost,
    state_from_facts,
)
from chatabl.perception import PseudoLabel
from chatabl.task import (
    STANDARD_CODE,
    XOR_CODE,
    OperationTable,
    all_equations,
    make_standard_table,
    to_indices,
)
from oracles import brute_revise, consistent_sequences, evaluate, legal_sequences, random_pseudo, table_entry

ZERO_CODE = 0  # every entry maps to (0, 0)


def one_hot_pseudo(text, confidence=0.9, low=None):
    """Peaked pseudo-label for ``text``; ``low`` positions get a flatter row."""
    rows = []
    for i, s in enumerate(to_indices(text)):
        c = 0.55 if low is not None and i in low else confidence
        row = np.full(4, (1 - c) / 3)
        row[s] = c
        rows.append(row)
    return PseudoLabel(np.array(rows))


# -- consistency ----------------------------------------------------------------


def test_check_consistency_examples():
    assert check_consistency("1+1=10", make_standard_table())
    assert not check_consistency("1+1=10", OperationTable.from_code(ZERO_CODE))
    for code in (0, STANDARD_CODE, 0xFFFF):
        assert not check_consistency("11+=1", OperationTable.from_code(code))


def test_reference_evaluator_agrees_on_random_tables(rng):
    from chatabl.task import eval_equation

    for _ in range(300):
        code = int(rng.integers(1 << 16))
        x = format(int(rng.integers(1, 512)), "b")
        y = format(int(rng.integers(0, 512)), "b")
        assert eval_equation(x, y, OperationTable.from_code(code)) == evaluate(x, y, code)


# -- filtering -----------------------------------------------------------------


def _brute_filter(text, veracity):
    x, rest = text.split("+")
    y, z = rest.split("=")
    return {c for c in range(1 << 16) if (evaluate(x, y, c) == z) == veracity}


def test_filter_one_plus_one():
    state = filter_hypotheses(HypothesisState.full(), ("1+1=10", True))
    expected = {c for c in range(1 << 16) if table_entry(c, 1, 1, 0) == (0, 1)}
    assert state.count == 16384 == len(expected)
    assert set(state.codes.tolist()) == expected
    assert state.facts_applied == 1


def test_filter_zero_plus_zero():
    state = filter_hypotheses(HypothesisState.full(), ("0+0=0", True))
    assert set(state.codes.tolist()) == _brute_filter("0+0=0", True)
    # a sum bit or a carry out of (0,0,0) makes the result nonzero
    assert all(table_entry(c, 0, 0, 0) == (0, 0) for c in state.codes)


@settings(max_examples=15, deadline=None)
@given(st.sampled_from(legal_sequences(6) + legal_sequences(7)), st.booleans())
def test_filter_matches_brute_force(xyz, veracity):
    text = "{}+{}={}".format(*xyz)
    state = filter_hypotheses(HypothesisState.full(), (text, veracity))
    assert set(state.codes.tolist()) == _brute_filter(text, veracity)


def test_filter_is_idempotent_and_monotone():
    s1 = filter_hypotheses(HypothesisState.full(), ("10+1=11", True))
    s2 = filter_hypotheses(s1, ("10+1=11", True))
    assert s2 == s1 and s2.facts_applied == 2
    s3 = filter_hypotheses(s2, ("11+1=100", True))
    assert s3.count <= s2.count and set(s3.codes) <= set(s2.codes)


def test_filter_rejects_unparseable():
    with pytest.raises(UnparseableFact):
        filter_hypotheses(HypothesisState.full(), ("1++1=0", True))


def test_state_is_read_only_and_validated():
    state = HypothesisState.full()
    with pytest.raises(ValueError):
        state.surviving[0] = False
    with pytest.raises(ValueError):
        HypothesisState(np.ones(10, dtype=bool))
    assert STANDARD_CODE in state and state.count == 65536


def test_table_constraints():
    state = apply_table_constraints(HypothesisState.full(), [(1, 1, 0, 0, 1), (0, 0, 0, 0, 0)])
    assert state.count == 4096
    assert all(table_entry(c, 1, 1, 0) == (0, 1) and table_entry(c, 0, 0, 0) == (0, 0) for c in state.codes)


def test_dump_and_load_state(tmp_path):
    state = HypothesisState.only([STANDARD_CODE, XOR_CODE, 7])
    text = dump_state(state, tmp_path / "h.txt")
    assert text == "0007\n4114\ne994\n"
    assert load_state(tmp_path / "h.txt") == state


def test_describe_table():
    assert "carry" in describe_table(STANDARD_CODE)
    assert "xor" in describe_table(XOR_CODE)
    assert "0x0007" in describe_table(7)


# -- revision -------------------------------------------------------------------


def test_revise_consistent_argmax_needs_no_edit():
    res = revise(one_hot_pseudo("10+1=11"), HypothesisState.only([STANDARD_CODE]))
    assert res.edits == 0 and res.revised_symbols == "10+1=11"
    assert res.log_score <= 0


def test_revise_fixes_last_digit():
    p = one_hot_pseudo("1+1=11", low={5})
    res = revise(p, HypothesisState.only([STANDARD_CODE]), budget=1)
    assert res.revised_symbols == "1+1=10" and res.edits == 1
    assert res.supporting_tables == frozenset({STANDARD_CODE})
    assert any("position 5" in line for line in res.trace)
    assert revision_cost(p, res) == pytest.approx(np.log(0.55) - np.log(0.15))


def test_revise_budget_zero_no_solution():
    assert revise(one_hot_pseudo("1+1=11"), HypothesisState.only([STANDARD_CODE]), budget=0) is None


def test_revise_preconditions():
    with pytest.raises(ValueError):
        revise(one_hot_pseudo("1+1=10"), HypothesisState(np.zeros(1 << 16, dtype=bool)))
    with pytest.raises(ValueError):
        revise(one_hot_pseudo("1+1=10"), HypothesisState.full(), budget=-1)


def test_default_budget():
    assert [default_budget(n) for n in (5, 8, 9, 26)] == [2, 2, 3, 7]


def test_revise_soundness_and_budget(rng):
    states = [HypothesisState.only([STANDARD_CODE]), HypothesisState.only([XOR_CODE, STANDARD_CODE])]
    for _ in range(60):
        n = int(rng.integers(5, 12))
        x, y, z = legal_sequences(n)[int(rng.integers(len(legal_sequences(n))))]
        p = random_pseudo(rng, to_indices(f"{x}+{y}={z}"), flips=int(rng.integers(0, 3)))
        state = states[int(rng.integers(2))]
        res = revise(p, state)
        if res is None:
            continue
        assert res.edits <= default_budget(n)
        assert res.edits == sum(a != b for a, b in zip(res.revised_symbols, p.argmax_symbols))
        assert res.supporting_tables
        for code in res.supporting_tables:
            assert check_consistency(res.revised_symbols, OperationTable.from_code(code))
        for code in set(state.codes.tolist()) - res.supporting_tables:
            assert not check_consistency(res.revised_symbols, OperationTable.from_code(code))


def test_revise_matches_brute_force(rng):
    states = {
        "standard": (STANDARD_CODE,),
        "xor": (XOR_CODE,),
        "mixed": tuple(int(c) for c in rng.choice(1 << 16, 40, replace=False)) + (STANDARD_CODE,),
    }
    for name, codes in states.items():
        state = HypothesisState.only(codes)
        cache = ConsistencyCache(state)
        for n in (5, 6, 7):
            cands = consistent_sequences(n, codes)
            for _ in range(25):
                if len(cands) and rng.random() < 0.7:
                    seq = cands[int(rng.integers(len(cands)))]
                else:
                    seq = rng.integers(0, 4, n)
                p = random_pseudo(rng, seq, flips=int(rng.integers(0, 3)))
                budget = int(rng.integers(0, 3))
                got = revise(p, state, budget, cache)
                want = brute_revise(p, cands, budget)
                if want is None:
                    assert got is None, name
                else:
                    assert (got.revised_symbols, got.edits) == (want[0], want[2]), name
                    assert got.log_score == pytest.approx(want[1], abs=1e-12)


def _rows(*rows):
    return PseudoLabel(np.array(rows, dtype=float))


ONE, PLUS, EQ, HALF = [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1], [0.5, 0.5, 0, 0]


def test_revise_ties_go_to_lexicographically_smaller():
    # argmax "0+0=1" is wrong; "1+0=1" and "0+1=1" cost the same single edit
    res = revise(_rows(HALF, PLUS, HALF, EQ, ONE), HypothesisState.only([STANDARD_CODE]), budget=1)
    assert res.revised_symbols == "0+1=1" and res.edits == 1


def test_revise_ties_prefer_fewer_edits():
    # "1+0=1" (no edit) and "1+1=1" (one edit) score the same; both fit some table
    res = revise(_rows(ONE, PLUS, HALF, EQ, ONE), HypothesisState.full(), budget=2)
    assert res.revised_symbols == "1+0=1" and res.edits == 0


def _peaked(text, last_row):
    rows = []
    for ch in text:
        row = np.full(4, 0.1)
        row["01+=".index(ch)] = 0.7
        rows.append(row)
    rows[-1] = np.array(last_row)
    return PseudoLabel(np.array(rows))


def test_revise_large_budget_uses_runner_up_symbols_only():
    text = "1011+110=10001"  # 14 symbols, so the default budget is 4
    state = HypothesisState.only([STANDARD_CODE])
    res = revise(_peaked(text, [0.6, 0.3, 0.05, 0.05]), state)
    assert res.revised_symbols == text and res.edits == 1
    # the true digit is now only the third choice at the last position
    p = _peaked(text, [0.6, 0.05, 0.3, 0.05])
    res = revise(p, state)
    if res is not None:
        runner_up = [int(np.argsort(-row, kind="stable")[1]) for row in p.probs]
        for i, (a, b) in enumerate(zip(p.argmax_symbols, res.revised_symbols)):
            if a != b:
                assert "01+=".index(b) == runner_up[i]


# -- batch abduction --------------------------------------------------------------


def test_abduce_empty_pseudos_keeps_fact_state():
    facts = [(e, True) for e in all_equations(5, make_standard_table())]
    state, results = abduce_batch([], default_kb(), facts)
    assert results == [] and STANDARD_CODE in state
    assert state == state_from_facts(facts)


def test_abduce_needs_facts():
    with pytest.raises(ValueError):
        abduce_batch([], default_kb(), [])


def test_inconsistent_facts_report_prefix():
    facts = [("1+1=10", True), ("0+0=0", True), ("1+1=10", False), ("1+0=1", True)]
    with pytest.raises(InconsistentFacts) as info:
        state_from_facts(facts)
    assert info.value.prefix == facts[:3]


def test_abduce_noiseless_pseudos_need_no_edits():
    table = make_standard_table()
    eqs = all_equations(6, table) + all_equations(7, table)
    pseudos = [one_hot_pseudo(e, 0.97) for e in eqs]
    state, results = abduce_batch(pseudos, default_kb(), [("1+1=10", True), ("1+0=1", True)])
    assert all(r is not None and r.edits == 0 for r in results)
    assert STANDARD_CODE in state


def test_abduce_is_monotone_and_sound(rng):
    table = make_standard_table()
    eqs = all_equations(7, table)
    pseudos = [random_pseudo(rng, to_indices(e), flips=int(rng.integers(0, 2))) for e in eqs[:40]]
    facts = [("1+1=10", True), ("1+0=1", True), ("0+0=0", True)]
    prev = state_from_facts(facts).count
    for k in range(0, 41, 10):
        state, results = abduce_batch(pseudos[:k], default_kb(), facts)
        for r in results:
            if r is not None:
                assert any(check_consistency(r.revised_symbols, OperationTable.from_code(int(c))) for c in state.codes)
        assert state.count <= prev or k == 0
        prev = min(prev, state.count)


def test_abduce_cost_cap_abstains():
    p = one_hot_pseudo("1+1=11", 0.97)
    state, results = abduce_batch([p], default_kb(), [("1+1=10", True)], max_cost=0.5, state=HypothesisState.only([STANDARD_CODE]))
    assert results == [None]
    _, results = abduce_batch([p], default_kb(), [], max_cost=None, state=HypothesisState.only([STANDARD_CODE]))
    assert results[0].revised_symbols == "1+1=10"


def test_abduce_respects_kb_table_constraints():
    kb = default_kb().with_table_constraints(make_standard_table(), [(1, 1, 0)])
    state, _ = abduce_batch([], kb, [("0+0=0", True)])
    assert all(table_entry(c, 1, 1, 0) == (0, 1) for c in state.codes)
