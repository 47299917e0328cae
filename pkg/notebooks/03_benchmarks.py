# %% [markdown]
# # The two seeded desk-scale experiments
#
# Both setups live in `jacseg.benchmarks`; the acceptance suite runs them
# for seeds 0, 1 and 2. One seed of each takes a few minutes on one core.

# %%
from jacseg import benchmarks

res = benchmarks.threshold_stability(0)
for loss in benchmarks.STABILITY_LOSSES:
    curve = [round(r.dsc.mean, 3) for _, r in res.curve(loss)]
    print(f"{loss:24s} spread {res.spread(loss):.3f}  t=0.05 {curve[0]}  t=0.5 {curve[9]}  t=0.95 {curve[-1]}")

# %% [markdown]
# The Jaccard-trained maps are close to binary, so moving the threshold
# barely changes the mask. The cross-entropy maps have a broad band of
# intermediate probabilities around the organ boundary.

# %%
ctx = benchmarks.contextual_learning(0)
print(f"corrupted slices: CNN {ctx.cnn_corrupted:.3f} -> RNN {ctx.rnn_corrupted:.3f}")
print(f"intact slices:    CNN {ctx.cnn_intact:.3f} -> RNN {ctx.rnn_intact:.3f}")
