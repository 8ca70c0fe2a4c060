"""Penalty-driven prompting and the self-feedback correction loop.

Two prompts drive the loop.  The consistency prompt (CDP) asks whether an
expression agrees with the rules and exemplars; when it does not, the
re-reasoning prompt (RDP) carries a penalty sentence and asks for a
corrected expression, which is fed back into the CDP.

Replies follow a line protocol requested in the system message::

    VERDICT: CONSISTENT | VERDICT: INCONSISTENT
    CORRECTED: <expression>          (optional)
    OPERATION: <free text>           (optional)
    REASONING: <free text>           (optional)
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .knowledge import KnowledgeBase, check_structural, levenshtein, render_rules_text, select_exemplars
from .oracle import ConsistencyCache, HypothesisState, RevisionResult, describe_table, revise, sequence_log_score
from .perception import PseudoLabel
from .task import ALPHABET, N_SYMBOLS, to_indices

log = logging.getLogger(__name__)

CDP_QUERY = "Please determine whether the given expression is consistent with the rules base and the exemplar prompts ?"
RDP_QUERY = (
    "Could you please correct the given expression and provide reasoning for your solution ? "
    "And what type of addition operation is likely being performed in this expression?"
)
PENALTY = "No, please continue reasoning"

ROLE = "You are a reasoning expert."
ROLES = ("system", "user", "assistant")

CDP_FORMAT = (
    'Answer with a first line that is exactly "VERDICT: CONSISTENT" or "VERDICT: INCONSISTENT". '
    'You may add a line "REASONING: <short explanation>".'
)
RDP_FORMAT = (
    'Answer with a first line that is exactly "VERDICT: INCONSISTENT" (or "VERDICT: CONSISTENT" if no '
    'correction is needed), then a line "CORRECTED: <the corrected expression>", then a line '
    '"OPERATION: <the type of operation>", then a line "REASONING: <your reasoning>".'
)


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")

    def to_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class Prompt:
    messages: tuple[ChatMessage, ...]
    kind: str
    expression: str
    penalty: str | None = None

    def __post_init__(self):
        if not self.messages or self.messages[0].role != "system":
            raise ValueError("a prompt starts with its system message")
        if sum(m.role == "system" for m in self.messages) != 1:
            raise ValueError("a prompt has exactly one system message")
        if self.kind not in ("CDP", "RDP"):
            raise ValueError(f"unknown prompt kind {self.kind!r}")
        if (self.kind == "RDP") != (self.penalty is not None):
            raise ValueError("RDP prompts carry a penalty, CDP prompts do not")

    def wire_messages(self) -> list[dict]:
        return [m.to_dict() for m in self.messages]


def _exemplar_block(kb: KnowledgeBase, expression: str, k: int) -> str:
    chosen = select_exemplars(kb, expression, min(k, len(kb.exemplars)))
    if not chosen:
        return "(none)"
    lines = []
    for ex in chosen:
        line = f"- {ex.expr} : {'consistent' if ex.veracity else 'inconsistent'}"
        if ex.explanation:
            line += f" ({ex.explanation})"
        lines.append(line)
    return "\n".join(lines)


def _system_message(kb: KnowledgeBase, expression: str, k: int, task: str, fmt: str) -> ChatMessage:
    content = (
        f"{ROLE} {task}\n\n"
        f"Rules:\n{render_rules_text(kb)}\n\n"
        f"Exemplar prompts:\n{_exemplar_block(kb, expression, k)}\n\n"
        f"Output format:\n{fmt}"
    )
    return ChatMessage("system", content)


def build_cdp(kb: KnowledgeBase, expression: str, k: int = 3) -> Prompt:
    if not expression:
        raise ValueError("empty expression")
    system = _system_message(
        kb,
        expression,
        k,
        "Your task is to decide whether an expression written with the symbols 0, 1, + and = "
        "is consistent with the rules and the exemplar prompts below.",
        CDP_FORMAT,
    )
    user = ChatMessage("user", f"{CDP_QUERY}\nExpression: {expression}")
    return Prompt((system, user), "CDP", expression)


def build_rdp(kb: KnowledgeBase, expression: str, penalty: str = PENALTY, k: int = 3) -> Prompt:
    if not penalty:
        raise ValueError("the RDP needs a penalty text")
    system = _system_message(
        kb,
        expression,
        k,
        "Your task is to correct an expression written with the symbols 0, 1, + and = so that it "
        "becomes consistent with the rules and the exemplar prompts below, and to explain your reasoning.",
        RDP_FORMAT,
    )
    user = ChatMessage("user", f"{penalty}\n{RDP_QUERY}\nExpression: {expression}")
    return Prompt((system, user), "RDP", expression, penalty)


# --------------------------------------------------------------------------
# Reply grammar
# --------------------------------------------------------------------------


class ReplyParseError(ValueError):
    pass


@dataclass(frozen=True)
class Verdict:
    consistent: bool
    reason: str = ""
    corrected_expression: str | None = None
    operation_guess: str | None = None


def parse_reply(text: str, kind: str = "CDP") -> Verdict:
    lines = text.strip().splitlines()
    if not lines:
        raise ReplyParseError("empty reply")
    head = lines[0].rstrip()
    if head == "VERDICT: CONSISTENT":
        consistent = True
    elif head == "VERDICT: INCONSISTENT":
        consistent = False
    else:
        raise ReplyParseError(f"reply does not start with a verdict line: {head[:60]!r}")
    corrected = operation = None
    reason = []
    for line in lines[1:]:
        line = line.strip()
        if kind == "RDP" and line.startswith("CORRECTED:"):
            corrected = line[len("CORRECTED:") :].strip().replace(" ", "")
            if not corrected or any(c not in ALPHABET for c in corrected):
                raise ReplyParseError(f"corrected expression has foreign symbols: {corrected!r}")
        elif kind == "RDP" and line.startswith("OPERATION:"):
            operation = line[len("OPERATION:") :].strip()
        elif line.startswith("REASONING:"):
            reason.append(line[len("REASONING:") :].strip())
        elif line:
            reason.append(line)
    return Verdict(consistent, "\n".join(reason), corrected, operation)


# --------------------------------------------------------------------------
# Backends
# --------------------------------------------------------------------------


class BackendError(RuntimeError):
    pass


class ReplayMiss(KeyError):
    pass


class ChatBackend(Protocol):
    def complete(self, prompt: Prompt) -> str: ...


def chat(backend: ChatBackend, prompt: Prompt) -> str:
    return backend.complete(prompt)


def prompt_digest(messages: Sequence[dict], model: str) -> str:
    """sha256 of the canonical JSON of ``{"messages", "model"}``."""
    canon = json.dumps({"messages": list(messages), "model": model}, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


DEFAULT_URL = "https://api.openai.com/v1/chat/completions"


class LiveBackend:
    """Chat-completions endpoint over HTTP (temperature 0, bounded retries)."""

    def __init__(
        self,
        url: str | None = None,
        model: str = "gpt-3.5-turbo",
        api_key: str | None = None,
        timeout: float = 60.0,
        retries: int = 3,
        backoff: float = 1.0,
        max_tokens: int = 512,
        transport=None,
        sleep=time.sleep,
    ):
        import httpx

        self.url = url or os.environ.get("CHATABL_API_URL", DEFAULT_URL)
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get("CHATABL_API_KEY")
        self.retries = retries
        self.backoff = backoff
        self.max_tokens = max_tokens
        self._sleep = sleep
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def request_body(self, prompt: Prompt) -> dict:
        return {
            "model": self.model,
            "temperature": 0,
            "max_tokens": self.max_tokens,
            "messages": prompt.wire_messages(),
        }

    def complete(self, prompt: Prompt) -> str:
        import httpx

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = self.request_body(prompt)
        last: Exception | None = None
        for attempt in range(self.retries):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(self.url, json=body, headers=headers)
            except httpx.HTTPError as exc:
                last = exc
                log.warning("chat request failed (%s), attempt %d", exc, attempt + 1)
                continue
            if resp.status_code >= 500 or resp.status_code == 429:
                last = BackendError(f"HTTP {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BackendError(f"malformed chat response: {exc}") from None
        raise BackendError(f"chat request failed after {self.retries} attempts: {last}")


class ReplayBackend:
    """Serves recorded replies keyed by prompt digest; misses are errors."""

    def __init__(self, cassette: str | Path, model: str = "gpt-3.5-turbo"):
        self.model = model
        self._replies: dict[str, str] = {}
        with open(cassette, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    self._replies[rec["prompt_digest"]] = rec["reply"]

    def complete(self, prompt: Prompt) -> str:
        digest = prompt_digest(prompt.wire_messages(), self.model)
        try:
            return self._replies[digest]
        except KeyError:
            raise ReplayMiss(f"no recorded reply for prompt digest {digest}") from None


class RecordingBackend:
    """Wraps a backend and appends every exchange to a JSONL cassette."""

    def __init__(self, inner: ChatBackend, cassette: str | Path, model: str = "gpt-3.5-turbo", clock=time.time):
        self.inner = inner
        self.cassette = Path(cassette)
        self.model = model
        self._clock = clock

    def complete(self, prompt: Prompt) -> str:
        reply = self.inner.complete(prompt)
        messages = prompt.wire_messages()
        rec = {
            "prompt_digest": prompt_digest(messages, self.model),
            "request": {"model": self.model, "temperature": 0, "messages": messages},
            "reply": reply,
            "timestamp": self._clock(),
        }
        with open(self.cassette, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")
        return reply


def synthetic_pseudo(expression: str, confidence: float = 0.7) -> PseudoLabel:
    """Pseudo-label peaked on ``expression`` with the rest spread evenly."""
    probs = np.full((len(expression), N_SYMBOLS), (1.0 - confidence) / (N_SYMBOLS - 1))
    probs[np.arange(len(expression)), to_indices(expression)] = confidence
    return PseudoLabel(probs)


class MockBackend:
    """Deterministic stand-in for an LLM that answers with the exact oracle.

    Bound to a pseudo-label, its corrections equal ``revise(pseudo, state,
    budget)``; unbound, it revises a pseudo-label peaked on the expression.
    """

    def __init__(self, state: HypothesisState, budget: int | None = None, pseudo: PseudoLabel | None = None, cache=None):
        self.state = state
        self.budget = budget
        self.pseudo = pseudo
        self._cache = cache or ConsistencyCache(state)

    def bind(self, pseudo: PseudoLabel) -> "MockBackend":
        return MockBackend(self.state, self.budget, pseudo, self._cache)

    def complete(self, prompt: Prompt) -> str:
        expr = prompt.expression
        if prompt.kind == "CDP":
            codes = self._cache(expr)
            if codes:
                return "VERDICT: CONSISTENT\nREASONING: " + _support_text(codes)
            return "VERDICT: INCONSISTENT\nREASONING: no surviving operation accepts the expression"
        pseudo = self.pseudo
        if pseudo is None:
            try:
                pseudo = synthetic_pseudo(expr)
            except ValueError:
                return "VERDICT: INCONSISTENT\nOPERATION: unknown\nREASONING: the expression has foreign symbols"
        res = revise(pseudo, self.state, self.budget, self._cache)
        if res is None:
            return "VERDICT: INCONSISTENT\nOPERATION: unknown\nREASONING: no correction within the edit budget"
        return (
            "VERDICT: INCONSISTENT\n"
            f"CORRECTED: {res.revised_symbols}\n"
            f"OPERATION: {_support_text(res.supporting_tables)}\n"
            f"REASONING: {'; '.join(res.trace)}"
        )


def _support_text(codes) -> str:
    codes = sorted(codes)
    if len(codes) == 1:
        return describe_table(codes[0])
    return f"one of {len(codes)} candidate bitwise operations"


# --------------------------------------------------------------------------
# Self-feedback loop
# --------------------------------------------------------------------------


@dataclass
class Exchange:
    prompt: Prompt
    reply: str
    verdict: Verdict


@dataclass
class LoopState:
    iteration: int = 0
    history: list[Exchange] = field(default_factory=list)
    status: str = "running"
    result: RevisionResult | None = None

    @property
    def cdp_calls(self) -> int:
        return sum(e.prompt.kind == "CDP" for e in self.history)

    @property
    def rdp_calls(self) -> int:
        return sum(e.prompt.kind == "RDP" for e in self.history)

    def transcript(self) -> list[dict]:
        return [
            {"kind": e.prompt.kind, "expression": e.prompt.expression, "messages": e.prompt.wire_messages(), "reply": e.reply}
            for e in self.history
        ]


def _ask(backend: ChatBackend, prompt: Prompt, parse_retries: int) -> tuple[str, Verdict]:
    for attempt in range(parse_retries + 1):
        reply = chat(backend, prompt)
        try:
            return reply, parse_reply(reply, prompt.kind)
        except ReplyParseError as exc:
            log.info("unparseable %s reply (attempt %d): %s", prompt.kind, attempt + 1, exc)
            error = exc
    raise ReplyParseError(f"persistent parse failure on {prompt.kind}: {error}")


def self_feedback_loop(
    expression: str,
    kb: KnowledgeBase,
    backend: ChatBackend,
    max_iterations: int = 5,
    *,
    state: HypothesisState | None = None,
    pseudo: PseudoLabel | None = None,
    gated: bool = True,
    penalty: str = PENALTY,
    k: int = 3,
    parse_retries: int = 1,
) -> LoopState:
    """Alternate CDP and penalised RDP until the expression is accepted.

    Each iteration asks the CDP once; an inconsistent verdict triggers one
    RDP whose correction becomes the next expression.  In gated mode an
    accepted expression must also pass the structural rules and, when a
    hypothesis state is given, be accepted by a surviving table.
    """
    if max_iterations < 1:
        raise ValueError("max_iterations must be at least 1")
    cache = ConsistencyCache(state) if state is not None else None
    loop = LoopState()
    current = expression
    trace: list[str] = []
    while loop.iteration < max_iterations:
        loop.iteration += 1
        cdp = build_cdp(kb, current, k)
        reply, verdict = _ask(backend, cdp, parse_retries)
        loop.history.append(Exchange(cdp, reply, verdict))
        accepted = verdict.consistent
        note = "consistent" if accepted else "inconsistent"
        if accepted and gated:
            if check_structural(kb, current):
                accepted, note = False, "claimed consistent but breaks a structural rule"
            elif cache is not None and not cache(current):
                accepted, note = False, "claimed consistent but no surviving table accepts it"
        trace.append(f"iteration {loop.iteration}: CDP on {current}: {note}")
        if accepted:
            loop.status = "accepted"
            loop.result = _loop_result(current, expression, pseudo, cache, trace)
            return loop
        if loop.iteration == max_iterations:
            break
        rdp = build_rdp(kb, current, penalty, k)
        reply, verdict = _ask(backend, rdp, parse_retries)
        loop.history.append(Exchange(rdp, reply, verdict))
        if verdict.corrected_expression:
            trace.append(f"iteration {loop.iteration}: RDP corrected {current} -> {verdict.corrected_expression}"
                         + (f" ({verdict.operation_guess})" if verdict.operation_guess else ""))
            current = verdict.corrected_expression
        else:
            trace.append(f"iteration {loop.iteration}: RDP gave no correction")
    loop.status = "exhausted"
    return loop


def _loop_result(text: str, original: str, pseudo, cache, trace) -> RevisionResult:
    supporting = frozenset(cache(text)) if cache is not None else frozenset()
    reference = pseudo.argmax_symbols if pseudo is not None else original
    if len(reference) == len(text):
        edits = sum(a != b for a, b in zip(reference, text))
    else:
        edits = levenshtein(reference, text)
    if pseudo is not None and len(pseudo) == len(text):
        with np.errstate(divide="ignore"):
            score = sequence_log_score(np.log(pseudo.probs), to_indices(text))
    else:
        score = 0.0
    return RevisionResult(text, supporting, score, edits, list(trace))
