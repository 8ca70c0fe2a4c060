"""Knowledge base: structural rules, their natural-language texts, exemplars."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .task import ALPHABET, OperationTable, ParseError, parse_expression, to_string

Predicate = Callable[[str], bool]


def _operators_ok(s: str) -> bool:
    return s.count("+") == 1 and s.count("=") == 1 and s.index("+") < s.index("=")


def _segments(s: str) -> list[str] | None:
    if not _operators_ok(s):
        return None
    p, e = s.index("+"), s.index("=")
    return [s[:p], s[p + 1 : e], s[e + 1 :]]


def _rule_nonempty(s: str) -> bool:
    segs = _segments(s)
    return segs is None or all(segs)


def _rule_no_leading_zero(s: str) -> bool:
    segs = _segments(s)
    return segs is None or all(not (g.startswith("0") and len(g) > 1) for g in segs)


def _always(_: str) -> bool:
    return True


# id -> (predicate, default text).  Rules without a structural check carry a
# vacuous predicate; they only contribute text to the prompts.
RULE_REGISTRY: dict[str, tuple[Predicate, str]] = {
    "alphabet": (
        lambda s: all(c in ALPHABET for c in s),
        "Equations use only the symbols 0, 1, + and =.",
    ),
    "one-plus": (lambda s: s.count("+") == 1, "Every equation contains exactly one '+' symbol."),
    "one-equals": (lambda s: s.count("=") == 1, "Every equation contains exactly one '=' symbol."),
    "order": (
        lambda s: s.count("+") != 1 or s.count("=") != 1 or s.index("+") < s.index("="),
        "The '+' symbol comes before the '=' symbol, so every equation has the form X+Y=Z.",
    ),
    "nonempty": (_rule_nonempty, "X, Y and Z are nonempty sequences of the digits 0 and 1."),
    "no-leading-zero": (
        _rule_no_leading_zero,
        "A digit group never starts with 0 unless the whole group is the single digit 0.",
    ),
    "digitwise": (
        _always,
        "The result Z is computed digit by digit starting from the rightmost digits of X and Y, "
        "and each step may pass a carry digit on to the next position.",
    ),
    "fixed-operation": (
        _always,
        "The operation is unknown, but the same operation is used in all equations.",
    ),
}

DEFAULT_RULE_IDS = tuple(RULE_REGISTRY)


@dataclass(frozen=True)
class Exemplar:
    expr: str
    veracity: bool
    explanation: str | None = None


@dataclass(frozen=True)
class KnowledgeBase:
    rule_ids: tuple[str, ...]
    rule_texts: tuple[str, ...]
    exemplars: tuple[Exemplar, ...] = ()
    table_constraints: tuple[tuple[int, int, int, int, int], ...] = ()

    def __post_init__(self):
        if len(self.rule_ids) != len(self.rule_texts):
            raise ValueError("rule ids and rule texts must be index-aligned")
        for ex in self.exemplars:
            try:
                parse_expression(ex.expr)
            except ParseError as exc:
                raise ValueError(f"exemplar {ex.expr!r} does not parse: {exc}") from None
        for entry in self.table_constraints:
            if len(entry) != 5 or any(v not in (0, 1) for v in entry):
                raise ValueError(f"bad table constraint {entry!r}")

    @property
    def structural_rules(self) -> tuple[Predicate, ...]:
        return tuple(RULE_REGISTRY.get(rid, (_always, ""))[0] for rid in self.rule_ids)

    def with_exemplars(self, exemplars: Iterable[Exemplar]) -> "KnowledgeBase":
        return replace(self, exemplars=tuple(self.exemplars) + tuple(exemplars))

    def with_table_constraints(self, table: OperationTable, inputs: Iterable[tuple[int, int, int]]) -> "KnowledgeBase":
        extra = tuple((a, b, c) + table(a, b, c) for a, b, c in inputs)
        return replace(self, table_constraints=self.table_constraints + extra)


def default_kb(exemplars: Sequence[Exemplar] = ()) -> KnowledgeBase:
    return KnowledgeBase(
        rule_ids=DEFAULT_RULE_IDS,
        rule_texts=tuple(RULE_REGISTRY[r][1] for r in DEFAULT_RULE_IDS),
        exemplars=tuple(exemplars),
    )


def render_rules_text(kb: KnowledgeBase) -> str:
    return "\n".join(f"{i}. {text}" for i, text in enumerate(kb.rule_texts, 1))


def levenshtein(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def select_exemplars(kb: KnowledgeBase, query_symbols, k: int) -> list[Exemplar]:
    """The ``k`` exemplars closest to the query in edit distance (stable)."""
    if k > len(kb.exemplars):
        raise ValueError(f"asked for {k} exemplars, the knowledge base holds {len(kb.exemplars)}")
    query = to_string(query_symbols)
    ranked = sorted(enumerate(kb.exemplars), key=lambda p: (levenshtein(query, p[1].expr), p[0]))
    return [ex for _, ex in ranked[:k]]


def check_structural(kb: KnowledgeBase, symbols) -> list[int]:
    """Indices (0-based) of violated rules; an empty list means pass."""
    text = symbols if isinstance(symbols, str) else to_string(symbols)
    return [i for i, rule in enumerate(kb.structural_rules) if not rule(text)]


# --------------------------------------------------------------------------
# JSON file format
# --------------------------------------------------------------------------


def kb_to_dict(kb: KnowledgeBase) -> dict:
    exemplars = []
    for ex in kb.exemplars:
        d = {"expr": ex.expr, "veracity": ex.veracity}
        if ex.explanation is not None:
            d["explanation"] = ex.explanation
        exemplars.append(d)
    return {
        "rules": [{"id": rid, "text": text} for rid, text in zip(kb.rule_ids, kb.rule_texts)],
        "exemplars": exemplars,
        "table_constraints": [dict(zip(("a", "b", "c_in", "s", "c_out"), e)) for e in kb.table_constraints],
    }


def kb_from_dict(d: dict) -> KnowledgeBase:
    try:
        rules = d["rules"]
        return KnowledgeBase(
            rule_ids=tuple(str(r["id"]) for r in rules),
            rule_texts=tuple(str(r["text"]) for r in rules),
            exemplars=tuple(
                Exemplar(str(e["expr"]), bool(e["veracity"]), e.get("explanation")) for e in d.get("exemplars", [])
            ),
            table_constraints=tuple(
                tuple(int(c[k]) for k in ("a", "b", "c_in", "s", "c_out")) for c in d.get("table_constraints", [])
            ),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed knowledge base: {exc}") from None


def save_kb(kb: KnowledgeBase, path: str | Path) -> None:
    Path(path).write_text(json.dumps(kb_to_dict(kb), indent=2) + "\n", encoding="utf-8")


def load_kb(path: str | Path) -> KnowledgeBase:
    return kb_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
