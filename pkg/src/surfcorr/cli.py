"""Command-line entry point: ``surfcorr <command> [<subcommand>] [options]``.

Every command is deterministic given its inputs and ``--seed`` (default 0).
Options can also come from a ``--config`` file of ``key = value`` lines, keyed
by the long option name (``steps``, ``lr``, ``count-min`` ...); flags given on
the command line win over the file, which wins over built-in defaults.

Exit status: 0 on success, 1 on a domain error (message on stderr), 2 on a
usage error.
"""

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import correspondence as corr
from . import fileio
from ._util import atomic_write, stage_rng
from .embedding import EmbeddingField, VertexEmbeddingTable, export_pca_ppm, predict_vertices
from .geodesics import CacheMiss, build_cache, load_cache, save_cache
from .losses import check_gradient, optimize_embeddings
from .mesh import MeshError, build_edge_graph, load_mesh
from .metrics import DEFAULT_SIGMA, PROTOCOLS, GpsConfig, RetrievalInstance, gps_ap_ar, reid_eval
from .scene import SCENE_KINDS, load_scene, synth_scene

logger = logging.getLogger("surfcorr")


class UsageError(Exception):
    pass


class DomainError(Exception):
    pass


# --- helpers ------------------------------------------------------------------

def _require_file(*paths):
    for p in paths:
        if not os.path.isfile(p):
            raise DomainError(f"no such file: {p}")


def _require_out_dir(path):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise DomainError(f"output directory does not exist: {parent}")


def _write_text(path, text):
    with atomic_write(path, "w") as fh:
        fh.write(text)


def read_config(path):
    """Parse a ``key = value`` file; blank lines and ``#`` comments are skipped."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def read_sources(path):
    if path == "all":
        return "all"
    _require_file(path)
    with open(path, encoding="utf-8") as fh:
        text = fh.read().replace(",", " ").split()
    try:
        return [int(t) for t in text]
    except ValueError:
        raise DomainError(f"{path}: sources must be integers") from None


def read_labels(path):
    """Labels CSV with columns ``split,index,pid,cam,clothes``."""
    rows = {"query": [], "gallery": []}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"split", "index", "pid", "cam", "clothes"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise DomainError(f"{path}: header must contain {sorted(need)}")
        for rec in reader:
            split = rec["split"].strip()
            if split not in rows:
                raise DomainError(f"{path}:{reader.line_num}: split must be query or gallery")
            rows[split].append(tuple(int(rec[k]) for k in ("index", "pid", "cam", "clothes")))
    out = {}
    for split, recs in rows.items():
        recs.sort()
        if [r[0] for r in recs] != list(range(len(recs))):
            raise DomainError(f"{path}: {split} indices must be 0..n-1 without gaps")
        arr = np.array(recs, dtype=np.int64).reshape(-1, 4)
        out[split] = arr[:, 1], arr[:, 2], arr[:, 3]
    return out


def _load_camera(path, view):
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, list):
        if not 0 <= view < len(data):
            raise DomainError(f"{path}: no camera for view {view}")
        data = data[view]
    return corr.Camera.from_dict(data)


# --- commands -----------------------------------------------------------------

def cmd_mesh_validate(args):
    _require_file(args.path)
    mesh = load_mesh(args.path)
    print(f"{mesh.n_vertices} vertices, {mesh.n_faces} faces, {len(mesh.edges())} edges, OK")


def cmd_geodesic_precompute(args):
    _require_file(args.mesh)
    sources = read_sources(args.sources)
    _require_out_dir(args.out)
    mesh = load_mesh(args.mesh)
    cache = build_cache(build_edge_graph(mesh), sources, mesh_hash=mesh.content_hash(),
                        workers=args.workers)
    save_cache(cache, args.out)
    print(f"{len(cache.sources)} sources x {cache.n_vertices} vertices, g_max {cache.g_max:.6g}")


def cmd_corr_generate(args):
    _require_file(args.mesh, args.camera, args.mask)
    _require_out_dir(args.out)
    mesh = load_mesh(args.mesh)
    camera = _load_camera(args.camera, args.view)
    mask = fileio.read_pnm(args.mask)
    if mask.ndim != 2:
        raise DomainError(f"{args.mask}: mask must be a greyscale image")
    image = args.image or os.path.splitext(os.path.basename(args.mask))[0]
    cs = corr.generate_pseudo_correspondences(
        mesh, camera, mask > 0, count=(args.count_min, args.count_max),
        seed=stage_rng(args.seed, f"corr-generate-{image}"), image=image,
        pid=args.pid, cam=args.cam, clothes=args.clothes)
    corr.write_corrs(args.out, [cs])
    print(f"{image}: {len(cs.entries)} correspondences")


def cmd_corr_sample_annot(args):
    _require_file(args.parts)
    _require_out_dir(args.out)
    parts = fileio.read_pnm(args.parts)
    if parts.ndim != 2:
        raise DomainError(f"{args.parts}: part map must be a greyscale image")
    px = corr.sample_annotation_pixels(parts, uniform_n=args.uniform,
                                       centroids_per_part=(args.kmin, args.kmax),
                                       seed=stage_rng(args.seed, "corr-sample-annot"))
    buf = io.StringIO()
    buf.write("row,col\n")
    for r, c in px:
        buf.write(f"{r},{c}\n")
    _write_text(args.out, buf.getvalue())
    print(f"{len(px)} pixels")


def cmd_corr_link(args):
    _require_file(args.input)
    _require_out_dir(args.out)
    sets = [replace(cs, cross_view=()) for cs in corr.read_corrs(args.input)]
    total = 0
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            if sets[i].pid == sets[j].pid:
                sets[i], sets[j], n = corr.link_cross_view(sets[i], sets[j], args.n)
                total += n
    corr.write_corrs(args.out, sets)
    print(f"{total} cross-view links")


def _grad_problem(which, seed):
    """Build ``(fn, inputs)`` for a random instance of one loss."""
    from . import losses
    from .mesh import icosphere

    rng = stage_rng(seed, f"check-grad-{which}")
    if which == "sil":
        gt = (rng.random((6, 7)) < 0.5).astype(float)
        return (lambda pred: losses.loss_silhouette(pred, gt),
                {"pred": rng.uniform(0.05, 0.95, (6, 7))})
    if which == "id":
        labels = rng.integers(0, 5, 12)
        return (lambda logits: losses.loss_id(logits, labels),
                {"logits": rng.standard_normal((12, 5))})
    if which == "tri":
        labels = np.repeat(np.arange(4), 3)
        return (lambda features: losses.loss_triplet(features, labels, 0.3),
                {"features": rng.standard_normal((12, 8))})
    mesh = icosphere(1)
    cache = build_cache(build_edge_graph(mesh), "all")
    mask = np.ones((5, 5), dtype=bool)
    d = 6

    def random_set(image):
        pix = rng.choice(25, 8, replace=False)
        verts = rng.choice(mesh.n_vertices, 8, replace=False)
        entries = tuple(corr.Correspondence(int(p // 5), int(p % 5), int(v))
                        for p, v in zip(sorted(pix), verts))
        return corr.CorrespondenceSet(image=image, size=(5, 5), entries=entries)

    if which == "geo":
        cs = random_set("a")

        def fn(field, table):
            return losses.loss_geodesic(EmbeddingField(field, mask), VertexEmbeddingTable(table),
                                        1.0, cs, cache, mode="expected")
        return fn, {"field": rng.standard_normal((5, 5, d)),
                    "table": rng.standard_normal((mesh.n_vertices, d))}
    if which == "cst":
        a, b = random_set("a"), random_set("b")
        cross = [((e.row, e.col), (f.row, f.col)) for e, f in zip(a.entries[:4], b.entries[:4])]
        same = [(0, (e.row, e.col), (f.row, f.col), e.vertex, f.vertex)
                for e, f in zip(a.entries[:4], a.entries[4:])]

        def fn(f0, f1):
            rep = losses.loss_consistency([EmbeddingField(f0, mask), EmbeddingField(f1, mask)],
                                          cross, same, cache)
            return rep.value, {"f0": rep.grads["fields"][0], "f1": rep.grads["fields"][1]}
        return fn, {"f0": rng.standard_normal((5, 5, d)), "f1": rng.standard_normal((5, 5, d))}
    raise UsageError(f"unknown loss {which!r}")


def cmd_loss_check_grad(args):
    fn, inputs = _grad_problem(args.which, args.seed)
    err = check_gradient(fn, inputs, seed=args.seed, n_coords=args.coords)
    print(f"max relative error: {err:.3e}")


def cmd_train_toy(args):
    if not (os.path.isdir(args.scene) or args.scene in SCENE_KINDS):
        raise DomainError(f"scene {args.scene!r} is neither a directory nor one of {SCENE_KINDS}")
    scene = (load_scene(args.scene) if os.path.isdir(args.scene)
             else synth_scene(args.scene, seed=args.seed))
    os.makedirs(args.out, exist_ok=True)
    result = optimize_embeddings(scene, seed=args.seed, steps=args.steps, lr=args.lr,
                                 lr_table=args.lr_table, temperature=args.temperature,
                                 dim=args.dim)
    preds = {}
    for i, (f, cs) in enumerate(zip(result.fields, scene.corrsets)):
        f.save(os.path.join(args.out, f"field_{i}.bin"))
        preds[cs.image] = predict_vertices(f, result.table)
    fileio.write_tensors(os.path.join(args.out, "table.bin"), {"table": result.table.table})
    fileio.write_tensors(os.path.join(args.out, "pred.bin"), preds)
    lines = ["step,loss"] + [f"{k},{v:.10g}" for k, v in enumerate(result.trace)]
    _write_text(os.path.join(args.out, "trace.csv"), "\n".join(lines) + "\n")
    corr.write_corrs(os.path.join(args.out, "gt.jsonl"), scene.corrsets)
    save_cache(scene.cache, os.path.join(args.out, "geodesics.bin"))
    print(f"loss {result.trace[0]:.6f} -> {result.trace[-1]:.6f} after {args.steps} steps")


def read_pred_maps(path):
    """Per-image (H, W) vertex maps from a named-tensor file; negatives mean none."""
    return {name: np.rint(arr).astype(np.int64) for name, arr in fileio.read_tensors(path).items()}


def cmd_eval_gps(args):
    _require_file(args.gt, args.pred, args.cache)
    sets = corr.read_corrs(args.gt)
    preds = read_pred_maps(args.pred)
    cache = load_cache(args.cache)
    config = GpsConfig(sigma=args.sigma, thresholds=args.thresholds or GpsConfig().thresholds)
    dataset = []
    for cs in sets:
        p = preds.get(cs.image)
        if p is not None and p.shape != cs.size:
            raise DomainError(f"{cs.image}: prediction shape {p.shape} != image size {cs.size}")
        dataset.append((cs, p))
    sys.stdout.write(gps_ap_ar(dataset, cache, config).to_csv())


def cmd_eval_reid(args):
    _require_file(args.features, args.labels)
    feats = fileio.read_tensors(args.features)
    for key in ("query", "gallery"):
        if key not in feats:
            raise DomainError(f"{args.features}: missing tensor {key!r}")
    labels = read_labels(args.labels)
    inst = RetrievalInstance(feats["query"], feats["gallery"],
                             labels["query"][0], labels["gallery"][0],
                             labels["query"][1], labels["gallery"][1],
                             labels["query"][2], labels["gallery"][2], protocol=args.protocol)
    res = reid_eval(inst)
    print(f"mAP {100 * res.mAP:.2f}")
    for k in (1, 5, 10):
        print(f"CMC@{k} {100 * res.rank(k):.2f}")


def cmd_viz_pca(args):
    _require_file(args.field)
    _require_out_dir(args.out)
    res = export_pca_ppm(EmbeddingField.load(args.field), args.out)
    print(f"explained variance {' '.join(f'{v:.4g}' for v in res.explained_variance)}")


def cmd_synth_scene(args):
    scene = synth_scene(args.kind, seed=args.seed, out_dir=args.out,
                        count=(args.count_min, args.count_max), n_links=args.links)
    counts = ", ".join(str(len(cs.entries)) for cs in scene.corrsets)
    print(f"{args.kind}: {scene.mesh.n_vertices} vertices, correspondences per view {counts}")


# --- parser -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _thresholds(text):
    return tuple(float(t) for t in text.split(","))


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="run seed (default 0)")
    common.add_argument("--config", help="key = value file of option defaults")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="surfcorr", description="Dense surface correspondence toolkit.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    leaves = []

    def leaf(parent, name, func, help_):
        q = parent.add_parser(name, parents=[common], help=help_)
        q.set_defaults(func=func)
        leaves.append(q)
        return q

    def group(name, help_):
        g = sub.add_parser(name, help=help_)
        return g.add_subparsers(dest="action", metavar="action", parser_class=_Parser)

    mesh = group("mesh", "mesh utilities")
    q = leaf(mesh, "validate", cmd_mesh_validate, "check an OBJ mesh")
    q.add_argument("path")

    geo = group("geodesic", "geodesic distances")
    q = leaf(geo, "precompute", cmd_geodesic_precompute, "write a geodesic cache")
    q.add_argument("--mesh", required=True)
    q.add_argument("--sources", required=True, help="file of vertex indices, or 'all'")
    q.add_argument("--out", required=True)
    q.add_argument("--workers", type=int, default=None)

    c = group("corr", "correspondences")
    q = leaf(c, "generate", cmd_corr_generate, "pseudo-correspondences from a projected mesh")
    q.add_argument("--mesh", required=True)
    q.add_argument("--camera", required=True, help="camera JSON (object or list)")
    q.add_argument("--view", type=int, default=0, help="index into a camera list")
    q.add_argument("--mask", required=True, help="silhouette PGM")
    q.add_argument("--out", required=True)
    q.add_argument("--image", default=None)
    q.add_argument("--pid", type=int, default=0)
    q.add_argument("--cam", type=int, default=0)
    q.add_argument("--clothes", type=int, default=0)
    q.add_argument("--count-min", type=int, default=80)
    q.add_argument("--count-max", type=int, default=125)
    q = leaf(c, "sample-annot", cmd_corr_sample_annot, "annotation pixels from a part map")
    q.add_argument("--parts", required=True, help="part-label PGM, 0 = background")
    q.add_argument("--out", required=True, help="CSV of row,col")
    q.add_argument("--uniform", type=int, default=40)
    q.add_argument("--kmin", type=int, default=5)
    q.add_argument("--kmax", type=int, default=10)
    q = leaf(c, "link", cmd_corr_link, "add cross-view links between images of one person")
    q.add_argument("--in", dest="input", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--n", type=int, default=10)

    loss = group("loss", "loss utilities")
    q = leaf(loss, "check-grad", cmd_loss_check_grad, "finite-difference gradient check")
    q.add_argument("--which", required=True, choices=("geo", "cst", "sil", "id", "tri"))
    q.add_argument("--coords", type=int, default=100)

    q = leaf(sub, "train-toy", cmd_train_toy, "fit embeddings on a synthetic scene")
    q.add_argument("--scene", required=True, help=f"scene directory or one of {SCENE_KINDS}")
    q.add_argument("--steps", type=int, default=500)
    q.add_argument("--lr", type=float, default=300.0)
    q.add_argument("--lr-table", type=float, default=1000.0)
    q.add_argument("--temperature", type=float, default=1.0)
    q.add_argument("--dim", type=int, default=64)
    q.add_argument("--out", required=True)

    ev = group("eval", "evaluation")
    q = leaf(ev, "gps", cmd_eval_gps, "GPS AP/AR table as CSV")
    q.add_argument("--gt", required=True)
    q.add_argument("--pred", required=True)
    q.add_argument("--cache", required=True)
    q.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    q.add_argument("--thresholds", type=_thresholds, default=None)
    q = leaf(ev, "reid", cmd_eval_reid, "re-identification mAP and CMC")
    q.add_argument("--features", required=True)
    q.add_argument("--labels", required=True)
    q.add_argument("--protocol", choices=PROTOCOLS, default="standard")

    viz = group("viz", "visualisation")
    q = leaf(viz, "pca", cmd_viz_pca, "3-component PCA image of an embedding field")
    q.add_argument("--field", required=True)
    q.add_argument("--out", required=True)

    q = leaf(sub, "synth-scene", cmd_synth_scene, "write a synthetic two-view scene")
    q.add_argument("--kind", choices=SCENE_KINDS, default="sphere")
    q.add_argument("--out", required=True)
    q.add_argument("--count-min", type=int, default=80)
    q.add_argument("--count-max", type=int, default=125)
    q.add_argument("--links", type=int, default=10)
    return p, leaves


def _apply_config(argv, leaves):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    if not os.path.isfile(known.config):
        raise UsageError(f"config file not found: {known.config}")
    values = read_config(known.config)
    values.pop("config", None)
    for q in leaves:
        dests = {a.dest for a in q._actions}
        q.set_defaults(**{k: v for k, v in values.items() if k in dests})
    allowed = {a.dest for q in leaves for a in q._actions}
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")


def run(argv=None):
    """Run one command and return its exit status."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, leaves = build_parser()
    try:
        _apply_config(argv, leaves)
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            raise UsageError(parser.format_help())
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (DomainError, MeshError, CacheMiss, corr.CorrespondenceError, ValueError,
            OSError) as exc:
        msg = exc.args[0] if isinstance(exc, CacheMiss) and exc.args else exc
        sys.stderr.write(f"surfcorr: error: {msg}\n")
        return 1
    return 0


def main():
    sys.exit(run())
