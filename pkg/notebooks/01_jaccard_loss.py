# %% [markdown]
# # The relaxed Jaccard loss
#
# The loss is one minus a soft intersection-over-union, where the soft
# intersection sums predicted probabilities on foreground pixels and the
# soft union adds the foreground count to the probability mass leaking
# onto background. This walk-through checks its value and gradient on a
# tiny example, then looks at how gradients split between the classes.

# %%
import numpy as np

from jacseg.losses import balanced_cross_entropy_loss, cross_entropy_loss, jaccard_loss
from jacseg.metrics import dsc, jaccard_index

pred = np.array([[0.8, 0.1], [0.1, 0.1]])
target = np.array([[1, 0], [0, 0]])
res = jaccard_loss(pred, target)
print("loss", round(res.value, 6))
print(res.grad_map.round(6))

# %% [markdown]
# With S the soft intersection and D the soft union, the foreground
# derivative is -1/D and the background derivative is S/D^2. Since S never
# exceeds D, a foreground pixel always pulls harder than a background one,
# however small the organ is.

# %%
S, D = 0.8, 1 + 0.3
print(-1 / D, S / D**2)

# %% [markdown]
# Compare with cross-entropy on a map that is 2% foreground. Under plain CE
# the summed background gradient swamps the foreground's, while the Jaccard
# loss and balanced CE keep the two classes on an equal footing.

# %%
rng = np.random.default_rng(0)
t = (rng.random((64, 64)) < 0.02).astype(int)
p = rng.uniform(0.05, 0.95, (64, 64))
for name, fn in [("jaccard", jaccard_loss), ("ce", cross_entropy_loss), ("balanced ce", balanced_cross_entropy_loss)]:
    g = fn(p, t).grad_map
    print(f"{name:12s} fg mass {np.abs(g[t == 1]).sum():.4f}  bg mass {np.abs(g[t == 0]).sum():.4f}")

# %% [markdown]
# On binary predictions the loss is exactly one minus the Jaccard index,
# and DSC follows from JI.

# %%
a = (rng.random((32, 32)) < 0.3).astype(float)
b = (rng.random((32, 32)) < 0.3).astype(int)
ji = jaccard_index(a, b)
print(jaccard_loss(a, b).value + ji, dsc(a, b), 2 * ji / (1 + ji))
