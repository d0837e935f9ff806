# %% [markdown]
# # Sliding-window inference
#
# Windows are placed so every voxel is covered, then blended with a
# Gaussian weight map whose floor keeps the edges from vanishing.

# %%
import numpy as np

from voxelnext import build_network, gaussian_weight_map, plan_windows, sliding_window_predict, tiny_config

w = gaussian_weight_map((16, 16, 16))
print(w.min(), w.max(), w[8, 8, 8])

# %%
plan = plan_windows((40, 23, 70), (32, 16, 32), 0.5)
print(plan.padded_extents, len(plan.origins))
cov = plan.coverage()
print("coverage min/max", cov.min(), cov.max())

# %% [markdown]
# Predict on a volume smaller than the patch along one axis; it is padded
# and cropped back.

# %%
net = build_network(tiny_config(num_classes=3), seed=2)
vol = np.random.default_rng(3).normal(size=(40, 23, 70)).astype(np.float32)
labels, probs = sliding_window_predict(net, vol, (32, 32, 32))
print(labels.shape, probs.shape, np.bincount(labels.ravel(), minlength=3))
print(np.allclose(probs.sum(0), 1, atol=1e-5))
