# %% [markdown]
# # GRN and first-stage activations
#
# With zero gamma and beta the response normalisation is an identity, so a
# freshly built network behaves exactly like its GRN-free twin. We look at
# channel statistics and dump a slice grid as a PGM image.

# %%
from pathlib import Path

import numpy as np

from voxelnext import activation_stats, build_network, export_activation_grid, tiny_config
from voxelnext.ops import GrnParams, grn3d, grn_ratios
from voxelnext.tensor import Tensor, precision

rng = np.random.default_rng(0)
x = rng.normal(size=(1, 4, 6, 6, 6))
zero = Tensor(np.zeros(4))
with precision(np.float64):
    print(np.array_equal(grn3d(Tensor(x), GrnParams(zero, zero)).data, x))

# %% [markdown]
# The per-channel ratios ignore a global rescaling of the input.

# %%
print(np.abs(grn_ratios(10 * x, 1e-6, "sum") - grn_ratios(x, 1e-6, "sum")).max())

# %%
patch = rng.normal(size=(2, 1, 32, 32, 32)).astype(np.float32)
net = build_network(tiny_config(), seed=1)
for layer in ("enc0.block0.act", "enc0.block0", "enc2.block0"):
    s = activation_stats(net, patch, layer)
    print(layer, s.channels, round(s.dead_fraction, 3), round(s.mean_cosine, 3))

# %%
out = export_activation_grid(net, patch, "enc0.block0.act", Path("grid_enc0.pgm"))
print(out, out.stat().st_size, "bytes")
