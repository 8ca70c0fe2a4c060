# %% [markdown]
# # Operation tables and abduction
#
# The hidden operation behind every equation is a full-adder style truth
# table: `(a, b, carry_in) -> (sum, carry_out)`.  Packing the 16 output
# bits gives 65,536 candidate tables.  This walk-through filters that
# space with a few facts and repairs a misread equation.

# %%
import numpy as np

from chatabl.oracle import HypothesisState, describe_table, filter_hypotheses, revise
from chatabl.perception import PseudoLabel
from chatabl.task import STANDARD_CODE, eval_equation, make_standard_table, make_xor_table, to_indices

std, xor = make_standard_table(), make_xor_table()
print(f"standard code {std.code:#06x}, xor code {xor.code:#06x}")
for x, y in [("1", "1"), ("11", "1"), ("101", "11")]:
    print(f"{x}+{y}: standard -> {eval_equation(x, y, std)}, xor -> {eval_equation(x, y, xor)}")

# %% [markdown]
# Each true equation removes every table that disagrees with it.  A
# single fact already cuts the space to a quarter.

# %%
state = HypothesisState.full()
for fact in ["1+1=10", "0+0=0", "10+1=11", "11+1=100", "101+11=1000", "111+111=1110"]:
    state = filter_hypotheses(state, (fact, True))
    print(f"after {fact:>14}: {state.count:6d} tables remain")
print("standard addition survives:", STANDARD_CODE in state)
for code in state.codes[:3]:
    print(f"  {int(code):04x} {describe_table(int(code))}")

# %% [markdown]
# Revision: perception reads `1+1=11` but is unsure about the last digit.
# The oracle looks for the most probable sequence within the edit budget
# that some surviving table accepts.

# %%
probs = np.full((6, 4), 0.02)
probs[np.arange(6), to_indices("1+1=11")] = 0.94
probs[5] = [0.40, 0.56, 0.02, 0.02]
pseudo = PseudoLabel(probs)
res = revise(pseudo, HypothesisState.only([STANDARD_CODE]))
print("perceived:", pseudo.argmax_symbols, "-> revised:", res.revised_symbols, f"({res.edits} edit)")
print("\n".join(res.trace))
