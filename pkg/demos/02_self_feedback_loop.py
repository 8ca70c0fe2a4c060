# %% [markdown]
# # Prompted correction loop
#
# A consistency prompt asks whether an expression follows the rules.  If
# not, a re-reasoning prompt carrying a penalty sentence asks for a fix,
# and the fix goes back through the consistency prompt.  The mock backend
# answers with the exact oracle, so this runs offline.  Set
# `CHATABL_API_KEY` (and optionally `CHATABL_API_URL`) and swap in
# `LiveBackend()` to talk to a real chat endpoint.

# %%
import tempfile
from pathlib import Path

from chatabl.knowledge import Exemplar, default_kb
from chatabl.llm import MockBackend, RecordingBackend, ReplayBackend, build_rdp, self_feedback_loop
from chatabl.oracle import HypothesisState
from chatabl.task import STANDARD_CODE

kb = default_kb([Exemplar("1+1=10", True), Exemplar("10+1=11", True), Exemplar("1+1=11", False)])
print(build_rdp(kb, "10+1=10").messages[1].content)

# %%
state = HypothesisState.only([STANDARD_CODE])
loop = self_feedback_loop("10+1=10", kb, MockBackend(state), state=state)
print("status:", loop.status, "after", loop.iteration, "iteration(s)")
for exchange in loop.history:
    print(f"--- {exchange.prompt.kind} on {exchange.prompt.expression}")
    print(exchange.reply)
print("result:", loop.result.revised_symbols)

# %% [markdown]
# Exchanges can be recorded to a cassette and replayed byte for byte,
# which keeps runs against paid endpoints reproducible.

# %%
tape = Path(tempfile.mkdtemp()) / "tape.jsonl"
self_feedback_loop("10+1=10", kb, RecordingBackend(MockBackend(state), tape), state=state)
again = self_feedback_loop("10+1=10", kb, ReplayBackend(tape), state=state)
print(len(tape.read_text().splitlines()), "exchanges recorded; replay result:", again.result.revised_symbols)
