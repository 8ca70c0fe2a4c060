# %% [markdown]
# # Abductive learning vs perception only
#
# 20% of the training equations carry labels.  The loop trains on them,
# reads the rest, repairs what it read with the oracle, and retrains on
# both.  The baseline spends the same number of gradient steps on the
# labeled equations alone.  Takes about half a minute on one core.

# %%
import tempfile

from chatabl.experiment import benchmark_config, run_experiment

out = tempfile.mkdtemp()
res = run_experiment(benchmark_config(), out, write_data=False)

# %%
print("round  glyph_acc  eqn_acc  tables  mean_edits")
for s in res.abl.stats:
    print(f"{s.round:5d}  {s.glyph_acc:9.4f}  {s.eqn_acc:7.4f}  {s.surviving_count:6d}  {s.mean_edits:10.3f}")

# %% [markdown]
# Test-set summary.  The `-symbolic` row judges veracity by running the
# perceived equation through the surviving tables; the other rows use the
# logistic judge on mean-pooled embeddings, which cannot see symbol order.

# %%
for row in res.metrics:
    print(f"{row['method']:>20}: eqn_acc={row['eqn_acc']:.4f} veracity_acc={row['accuracy']:.4f} auc={row['auc']:.4f}")
print("reports in", out)
