"""Acceptance criteria, one test each.  Every test prints a single PASS/FAIL line."""

import contextlib
import subprocess
import sys
import time

import numpy as np
import pytest

from chatabl.knowledge import default_kb
from chatabl.llm import CDP_QUERY, PENALTY, RDP_QUERY, MockBackend, build_cdp, build_rdp, self_feedback_loop
from chatabl.metrics import auc, compute_metrics, confusion
from chatabl.oracle import ConsistencyCache, HypothesisState, abduce_batch, default_budget, filter_hypotheses, revise
from chatabl.perception import PseudoLabel, as_targets, grad_check, init_model
from chatabl.task import STANDARD_CODE, XOR_CODE, all_equations, eval_equation, make_standard_table, to_indices
from oracles import (
    auc_oracle,
    brute_revise,
    confusion_oracle,
    consistent_sequences,
    evaluate,
    random_pseudo,
    table_entry,
)

# Reference run of the desk-scale benchmark (seed 0): ABL equation accuracy
# 0.943182, perception-only 0.925000.  Pinned with a 2-point band.
BENCHMARK_EQN_ACC = 0.943182
BENCHMARK_BAND = 0.02


@pytest.fixture
def report(capsys):
    @contextlib.contextmanager
    def _report(number, title, limit=None):
        info = {}
        start = time.perf_counter()
        ok = False
        try:
            yield info
            elapsed = time.perf_counter() - start
            info["time"] = f"{elapsed:.1f}s"
            if limit is not None:
                assert elapsed < limit, f"took {elapsed:.1f}s, limit {limit}s"
            ok = True
        finally:
            info.setdefault("time", f"{time.perf_counter() - start:.1f}s")
            detail = ", ".join(f"{k}={v}" for k, v in info.items())
            with capsys.disabled():
                print(f"\n[acceptance {number:>2}] {'PASS' if ok else 'FAIL'} {title} ({detail})")

    return _report


def test_01_gradient_fidelity(report):
    with report(1, "gradient fidelity", limit=10) as info:
        rng = np.random.default_rng(2024)
        worst = 0.0
        for k in range(20):
            model = init_model(int(rng.integers(4, 65)), seed=k)
            n = int(rng.integers(2, 12))
            X = rng.random((n, 784))
            T = rng.dirichlet(np.ones(4), n) if k % 2 else as_targets(rng.integers(0, 4, n))
            w = rng.random(n) if k % 3 == 0 else None
            worst = max(worst, grad_check(model, X, T, weights=w, seed=k))
        info["max_rel_err"] = f"{worst:.2e}"
        assert worst < 1e-4


def test_02_evaluator_matches_integers(report):
    with report(2, "evaluator vs integer addition", limit=5) as info:
        rng = np.random.default_rng(7)
        table = make_standard_table()
        pairs = rng.integers(0, 1 << 16, size=(10_000, 2))
        mismatches = sum(
            eval_equation(format(int(a), "b"), format(int(b), "b"), table) != format(int(a) + int(b), "b")
            for a, b in pairs
        )
        info["mismatches"] = mismatches
        assert mismatches == 0


def test_03_hypothesis_filtering(report):
    with report(3, "hypothesis filtering", limit=5) as info:
        state = filter_hypotheses(HypothesisState.full(), ("1+1=10", True))
        expected = {c for c in range(1 << 16) if table_entry(c, 1, 1, 0) == (0, 1)}
        # independent re-derivation: the reference evaluator on every code
        by_eval = {c for c in range(1 << 16) if evaluate("1", "1", c) == "10"}
        info["surviving"] = state.count
        assert set(state.codes.tolist()) == expected == by_eval
        assert state.count == 16384


def test_04_revision_optimality(report):
    with report(4, "revision optimality vs brute force", limit=60) as info:
        rng = np.random.default_rng(99)
        code_sets = [
            (STANDARD_CODE,),
            (XOR_CODE,),
            (STANDARD_CODE, XOR_CODE),
            tuple(int(c) for c in rng.choice(1 << 16, 24, replace=False)),
            tuple(int(c) for c in rng.choice(1 << 16, 200, replace=False)),
        ]
        states = [(HypothesisState.only(cs), cs) for cs in code_sets]
        caches = [ConsistencyCache(s) for s, _ in states]
        candidates = {}
        mismatches = solved = 0
        for trial in range(1000):
            si = trial % len(states)
            state, codes = states[si]
            n = int(rng.integers(5, 9))
            key = (si, n)
            if key not in candidates:
                candidates[key] = consistent_sequences(n, codes)
            cands = candidates[key]
            if len(cands) and rng.random() < 0.75:
                seq = cands[int(rng.integers(len(cands)))]
            else:
                seq = rng.integers(0, 4, n)
            pseudo = random_pseudo(rng, seq, flips=int(rng.integers(0, 3)), sharp=float(rng.uniform(0.5, 8)))
            budget = int(rng.integers(0, 3))
            got = revise(pseudo, state, budget, caches[si])
            want = brute_revise(pseudo, cands, budget)
            if want is None:
                mismatches += got is not None
            else:
                solved += 1
                mismatches += got is None or got.revised_symbols != want[0] or got.edits != want[2]
        info.update(cases=1000, solved=solved, mismatches=mismatches)
        assert mismatches == 0


def test_05_rule_identification(report):
    with report(5, "rule identification on noiseless data", limit=60) as info:
        table = make_standard_table()
        eqs = [e for n in range(5, 10) for e in all_equations(n, table)]

        def peaked(text):
            probs = np.full((len(text), 4), 0.01)
            probs[np.arange(len(text)), to_indices(text)] = 0.97
            return PseudoLabel(probs)

        pseudos = [peaked(e) for e in eqs]
        facts = [(eqs[0], True)]
        kb = default_kb()
        final, results = abduce_batch(pseudos, kb, facts)
        # replay the greedy order one fact at a time to watch the count
        state = filter_hypotheses(HypothesisState.full(), facts[0])
        counts = [state.count]
        for p in pseudos:  # equal confidences, so the greedy order is list order
            state, _ = abduce_batch([p], kb, facts, state=state)
            counts.append(state.count)
        info.update(equations=len(eqs), surviving=final.count, singleton=final.count == 1)
        assert state == final
        assert STANDARD_CODE in final
        assert all(b <= a for a, b in zip(counts, counts[1:]))
        assert all(r is not None and r.edits == 0 for r in results)


def test_06_loop_termination_and_mock_equivalence(report):
    with report(6, "self-feedback loop termination and mock equivalence", limit=60) as info:
        rng = np.random.default_rng(5)
        table = make_standard_table()
        pool = {n: all_equations(n, table) for n in range(5, 11)}
        states = [HypothesisState.only([STANDARD_CODE]), HypothesisState.only([STANDARD_CODE, XOR_CODE])]
        kb = default_kb()
        within = mismatches = over = 0
        for trial in range(500):
            state = states[trial % 2]
            n = int(rng.integers(5, 11))
            if rng.random() < 0.85:
                seq = to_indices(pool[n][int(rng.integers(len(pool[n])))])
            else:
                seq = rng.integers(0, 4, n)
            pseudo = random_pseudo(rng, seq, flips=int(rng.integers(0, 4)))
            max_it = int(rng.integers(1, 6))
            want = revise(pseudo, state, default_budget(n))
            loop = self_feedback_loop(
                pseudo.argmax_symbols, kb, MockBackend(state, pseudo=pseudo), max_it, state=state, pseudo=pseudo
            )
            over += loop.iteration > max_it or loop.cdp_calls > max_it or loop.rdp_calls > max_it - 1
            # a correction needs one RDP and a second CDP, so one iteration only covers edit-free inputs
            reachable = want is not None and (max_it >= 2 or want.edits == 0)
            if reachable:
                within += 1
                mismatches += loop.status != "accepted" or loop.result.revised_symbols != want.revised_symbols
        info.update(inputs=500, within_budget=within, mismatches=mismatches, over_budget=over)
        assert over == 0 and mismatches == 0


def test_07_end_to_end_improvement(report, tmp_path):
    from chatabl.experiment import benchmark_config, run_experiment

    with report(7, "end-to-end improvement over perception-only", limit=600) as info:
        res = run_experiment(benchmark_config(), tmp_path, write_data=False)
        abl = res.row("abl-oracle")["eqn_acc"]
        base = res.row("perception-only")["eqn_acc"]
        info.update(abl=f"{abl:.4f}", baseline=f"{base:.4f}", pinned=f"{BENCHMARK_EQN_ACC}+-{BENCHMARK_BAND}")
        assert abl > base
        assert abl >= 0.90
        assert abs(abl - BENCHMARK_EQN_ACC) <= BENCHMARK_BAND


def test_08_metrics_correctness(report):
    with report(8, "metrics vs independent oracle", limit=120) as info:
        rng = np.random.default_rng(8)
        worst = 0.0
        for _ in range(10_000):
            n = int(rng.integers(2, 30))
            truth = rng.random(n) < rng.uniform(0.1, 0.9)
            if truth.all() or not truth.any():
                truth[0] = not truth[0]
            pred = rng.random(n) < 0.5
            scores = rng.integers(0, 5, n) / 4.0 if rng.random() < 0.5 else rng.random(n)
            tp, fp, fn, tn = confusion_oracle(pred, truth)
            assert confusion(pred, truth) == (tp, fp, fn, tn)
            m = compute_metrics(pred, truth)
            p = tp / (tp + fp) if tp + fp else 0.0
            r = tp / (tp + fn) if tp + fn else 0.0
            f = 2 * p * r / (p + r) if p + r else 0.0
            for got, want in ((m.accuracy, (tp + tn) / n), (m.precision, p), (m.recall, r), (m.f1, f)):
                worst = max(worst, abs(got - want))
            worst = max(worst, abs(auc(scores, truth) - auc_oracle(scores, truth)))
        info.update(cases=10_000, max_abs_diff=f"{worst:.1e}")
        assert worst <= 1e-12


def test_09_determinism(report, tmp_path):
    import json

    from chatabl.experiment import ExperimentConfig
    from chatabl.loop import LoopConfig

    cfg = ExperimentConfig(
        train_lengths=(5, 8), test_lengths=(5, 12), per_length=40, test_per_length=20,
        loop=LoopConfig(rounds=2, label_steps=50, retrain_steps=50, judge_steps=500),
    )
    (tmp_path / "cfg.json").write_text(json.dumps(cfg.to_dict()))
    with report(9, "byte-identical metrics.csv across runs", limit=300) as info:
        outputs = []
        for name in ("a", "b"):
            subprocess.run(
                [sys.executable, "-m", "chatabl", "experiment", "--config", str(tmp_path / "cfg.json"),
                 "--reasoner", "oracle", "--seed", "11", "--out", str(tmp_path / name)],
                check=True, capture_output=True,
            )
            outputs.append((tmp_path / name / "metrics.csv").read_bytes())
        info["bytes"] = len(outputs[0])
        assert outputs[0] == outputs[1]


def test_10_prompt_fidelity(report):
    with report(10, "verbatim CDP/RDP queries and penalty") as info:
        kb = default_kb()
        cdp = build_cdp(kb, "1+1=11").messages[-1].content
        rdp = build_rdp(kb, "1+1=11").messages[-1].content
        cdp_sentence = "Please determine whether the given expression is consistent with the rules base and the exemplar prompts ?"
        rdp_sentence = (
            "Could you please correct the given expression and provide reasoning for your solution ? "
            "And what type of addition operation is likely being performed in this expression?"
        )
        penalty = "No, please continue reasoning"
        assert CDP_QUERY == cdp_sentence and RDP_QUERY == rdp_sentence and PENALTY == penalty
        assert cdp_sentence in cdp
        assert rdp_sentence in rdp and penalty in rdp
        assert rdp.index(penalty) < rdp.index(rdp_sentence)
        info["checked"] = 3
