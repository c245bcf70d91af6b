"""Synthetic multi-view scenes: a mesh, cameras, silhouettes and correspondences.

A scene directory holds::

    scene.json      kind, seed, image size, image ids
    mesh.obj
    cameras.json    one camera dict per view
    mask_<i>.pgm    silhouettes (0 / 255)
    corrs.jsonl     one correspondence set per view, cross-view links included
    geodesics.bin   geodesic rows of every annotated vertex
"""

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import correspondence as corr
from . import fileio
from ._util import atomic_write, stage_rng
from .geodesics import build_cache, load_or_build_cache
from .mesh import TriangleMesh, build_edge_graph, grid, icosphere, load_mesh, write_mesh

SCENE_KINDS = ("sphere", "twoview-grid")


@dataclass
class Scene:
    kind: str
    seed: int
    mesh: object
    cameras: list
    masks: list
    corrsets: list
    cache: object

    @property
    def size(self):
        return self.masks[0].shape


def _views(kind):
    if kind == "sphere":
        mesh = icosphere(3)
        size = (48, 48)
        cams = [corr.Camera.orthographic(9.5, 24.0, 24.0, rotation=corr.rotation_y(a))
                for a in (0.0, math.radians(40.0))]
    elif kind == "twoview-grid":
        flat = grid(20)
        mesh = TriangleMesh(flat.vertices - [0.5, 0.5, 0.0], flat.faces, name="grid20")
        size = (40, 40)
        cams = [corr.Camera.orthographic(30.0, 20.0, 20.0, rotation=corr.rotation_y(a))
                for a in (0.0, math.radians(30.0))]
    else:
        raise ValueError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")
    return mesh, size, cams


def synth_scene(kind="sphere", seed=0, out_dir=None, count=(80, 125), n_links=10):
    """Build a self-consistent two-view scene and optionally write it to ``out_dir``."""
    mesh, size, cams = _views(kind)
    masks, sets = [], []
    for i, cam in enumerate(cams):
        mask = corr.rasterize_mask(mesh, cam, size)
        cs = corr.generate_pseudo_correspondences(
            mesh, cam, mask, count=count, seed=stage_rng(seed, f"view-{i}"),
            image=f"{kind}_view{i}", pid=0, cam=i, clothes=0)
        masks.append(mask)
        sets.append(cs)
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            sets[i], sets[j], _ = corr.link_cross_view(sets[i], sets[j], n_links)
    sources = sorted({v for cs in sets for v in cs.vertices.tolist()})
    cache = build_cache(build_edge_graph(mesh), sources, mesh_hash=mesh.content_hash())
    scene = Scene(kind, seed, mesh, cams, masks, sets, cache)
    if out_dir is not None:
        write_scene(scene, out_dir)
    return scene


def write_scene(scene, out_dir):
    from .geodesics import save_cache

    os.makedirs(out_dir, exist_ok=True)
    meta = {"kind": scene.kind, "seed": scene.seed, "h": scene.size[0], "w": scene.size[1],
            "images": [cs.image for cs in scene.corrsets]}
    with atomic_write(os.path.join(out_dir, "scene.json"), "w") as fh:
        json.dump(meta, fh, indent=1)
        fh.write("\n")
    write_mesh(scene.mesh, os.path.join(out_dir, "mesh.obj"))
    with atomic_write(os.path.join(out_dir, "cameras.json"), "w") as fh:
        json.dump([c.to_dict() for c in scene.cameras], fh, indent=1)
        fh.write("\n")
    for i, m in enumerate(scene.masks):
        fileio.write_pgm(os.path.join(out_dir, f"mask_{i}.pgm"), m.astype(np.uint8) * 255)
    corr.write_corrs(os.path.join(out_dir, "corrs.jsonl"), scene.corrsets)
    save_cache(scene.cache, os.path.join(out_dir, "geodesics.bin"))


def load_scene(path):
    """Load a scene directory, or build a named scene kind in memory.

    The geodesic cache is rebuilt if missing or stale for the mesh.
    """
    if not os.path.isdir(path) and path in SCENE_KINDS:
        return synth_scene(path)
    with open(os.path.join(path, "scene.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    mesh = load_mesh(os.path.join(path, "mesh.obj"))
    with open(os.path.join(path, "cameras.json"), encoding="utf-8") as fh:
        cams = [corr.Camera.from_dict(d) for d in json.load(fh)]
    masks = [fileio.read_pnm(os.path.join(path, f"mask_{i}.pgm")) > 0 for i in range(len(cams))]
    sets = corr.read_corrs(os.path.join(path, "corrs.jsonl"))
    sources = sorted({v for cs in sets for v in cs.vertices.tolist()})
    cache = load_or_build_cache(os.path.join(path, "geodesics.bin"), mesh, sources)
    return Scene(meta["kind"], meta["seed"], mesh, cams, masks, sets, cache)
