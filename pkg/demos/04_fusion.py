# %% [markdown]
# # Cross-modality fusion
#
# An appearance map and a shape map attend to each other. Queries, keys and
# values come from a latent convolutional projection: a frozen linear
# encoder summarises the map into one vector that is added to every token
# before a 3x3 convolution.

# %%
import numpy as np

from surfcorr import fusion

rng = np.random.default_rng(0)
shape = (4, 4, 8)
maps = [rng.standard_normal(shape) for _ in range(10)]
encoder = fusion.train_autoencoder(maps, latent_dim=8, steps=2000)
print(f"autoencoder MSE {encoder.training_mse[0]:.3f} -> {encoder.training_mse[-1]:.3f}")

# %%
params = fusion.init_fusion_params(shape, heads=4, seed=1, encoders=(encoder, encoder))
Fg, Fs = maps[0], maps[1]
out = fusion.cross_fuse(Fg, Fs, params)
print("output shapes", out.Fg.shape, out.Fs.shape)
print("change in the appearance map", float(np.abs(out.Fg - Fg).mean()))

# %% [markdown]
# With zero output projections the block is the identity, so it can be
# inserted into a trained network without changing its output.

# %%
zero = fusion.init_fusion_params(shape, heads=4, seed=1, zero_output=True)
same = fusion.cross_fuse(Fg, Fs, zero)
print("identity:", np.array_equal(same.Fg, Fg) and np.array_equal(same.Fs, Fs))
