# %% [markdown]
# # Pseudo-correspondences from a rendered mesh
#
# Vertices are projected into the image and a z-buffer keeps the nearest
# one per pixel. A random subset of the surviving pixels becomes the
# annotated pixel-to-vertex pairs for that view.

# %%
import numpy as np

from surfcorr import correspondence as corr
from surfcorr.mesh import icosphere

# %%
mesh = icosphere(3)
camera = corr.Camera.orthographic(9.5, 24.0, 24.0, rotation=corr.rotation_y(0.4))
mask = corr.rasterize_mask(mesh, camera, (48, 48))
cs = corr.generate_pseudo_correspondences(mesh, camera, mask, seed=0, image="front")
print(f"{mask.sum()} foreground pixels, {len(cs)} correspondences")
print("first entries:", cs.entries[:3])

# %% [markdown]
# A second view of the same sphere shares some vertices with the first.
# Pixels that land on the same vertex in both views become cross-view links.

# %%
side = corr.Camera.orthographic(9.5, 24.0, 24.0, rotation=corr.rotation_y(1.1))
cs2 = corr.generate_pseudo_correspondences(
    mesh, side, corr.rasterize_mask(mesh, side, (48, 48)), seed=1, image="side")
a, b, n = corr.link_cross_view(cs, cs2, 10)
print(f"{n} links; first: {a.cross_view[0] if n else None}")

# %% [markdown]
# Annotation pixels for a part map: uniform samples plus k-means centroids
# per part, with more centroids for larger parts.

# %%
parts = np.zeros((30, 30), dtype=int)
parts[2:12, 2:28] = 1
parts[14:28, 10:18] = 2
px = corr.sample_annotation_pixels(parts, uniform_n=20, seed=0)
print(len(px), "annotation pixels; per part:", np.bincount(parts[px[:, 0], px[:, 1]]))
