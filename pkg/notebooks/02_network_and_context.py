# %% [markdown]
# # Network size, deep supervision and the recurrent refinement
#
# Parameter counts of the two reference configurations follow from a closed
# form over the block layout. The recurrent variant starts out as an exact
# copy of the CNN's behaviour because its readout ignores the hidden state
# until training moves those weights.

# %%
import numpy as np

from jacseg.clstm import attach_clstm, run_sequence
from jacseg.data import SynthParams, synth_generate
from jacseg.network import SegNetConfig, build_network, count_parameters, jac64_config, jac128_config, parameter_tally

for name, cfg in [("JAC-64", jac64_config()), ("JAC-128", jac128_config())]:
    print(name, sum(n for _, n in parameter_tally(cfg)))

# %%
small = SegNetConfig.uniform(3, 1, 4)
net = build_network(small, seed=0)
print("toy net", count_parameters(net))
vol = synth_generate(SynthParams(dims=(6, 32, 32), foreground_fraction=0.04, seed=1))
x = (vol.intensities - vol.intensities.mean()) / vol.intensities.std()
cnn = net.predict(x)

# %%
rnn = attach_clstm(net, hidden_channels=8, seed=0)
refined = np.stack(run_sequence(rnn, x, window=3))
print("max change after attaching", np.abs(refined - cnn).max())
print("extra parameters", count_parameters(rnn) - count_parameters(net))

# %% [markdown]
# Nudging the readout weights on the hidden state makes slice t depend on
# the three slices before it, and on nothing after it.

# %%
rnn.readout_kernel.data[0, -rnn.cell.hidden_channels:] = 0.5
a = np.stack(run_sequence(rnn, x, window=3))
bumped = x.copy()
bumped[4] += 2.0
b = np.stack(run_sequence(rnn, bumped, window=3))
print("per-slice change:", np.abs(a - b).reshape(6, -1).max(axis=1).round(4))
