# %% [markdown]
# # Learning a continuous embedding on a toy scene
#
# Two orthographic views of a sphere carry about 200 annotated pixels. Free
# per-pixel embeddings and a vertex table are fitted by gradient descent on
# the geodesic loss plus the consistency loss. Afterwards each pixel's
# nearest vertex embedding is its predicted vertex, scored with GPS.

# %%
import time

import numpy as np

from surfcorr.embedding import cosine_distance, predict_vertices
from surfcorr.losses import optimize_embeddings
from surfcorr.metrics import gps_ap_ar
from surfcorr.scene import synth_scene

scene = synth_scene("sphere", seed=7)
print([len(cs) for cs in scene.corrsets], "annotated pixels per view")


def report(res, label):
    data = [(cs, predict_vertices(f, res.table)) for cs, f in zip(scene.corrsets, res.fields)]
    table = gps_ap_ar(data, scene.cache)
    a = scene.corrsets[0]
    link = np.mean([cosine_distance(res.fields[0].data[l.row, l.col],
                                    res.fields[1].data[l.row2, l.col2]) for l in a.cross_view])
    print(f"{label}: AP@0.50 {table.ap[0]:.2f}, mean AP {table.mean_ap:.2f}, "
          f"linked cosine distance {link:.3f}")


# %%
report(optimize_embeddings(scene, seed=7, steps=0), "random init")
t0 = time.perf_counter()
res = optimize_embeddings(scene, seed=7, steps=500)
elapsed = time.perf_counter() - t0
print(f"500 steps in {elapsed:.1f} s, loss {res.trace[0]:.3f} -> {res.trace[-1]:.3f}")
report(res, "trained")
