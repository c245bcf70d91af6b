import filecmp
import os
import subprocess
import sys

import numpy as np
import pytest

from surfcorr import correspondence as corr
from surfcorr import fileio
from surfcorr.cli import read_pred_maps, run
from surfcorr.embedding import EmbeddingField

TETRA = """\
v 0 0 0
v 1 0 0
v 0 1 0
v 0 0 1
f 1 3 2
f 1 2 4
f 1 4 3
f 2 3 4
"""


@pytest.fixture
def tetra(tmp_path):
    p = tmp_path / "tetra.obj"
    p.write_text(TETRA)
    return p


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    assert run(["synth-scene", "--kind", "twoview-grid", "--out", str(out), "--seed", "4"]) == 0
    return out


def test_mesh_validate(tetra, capsys):
    assert run(["mesh", "validate", str(tetra)]) == 0
    assert capsys.readouterr().out.strip() == "4 vertices, 4 faces, 6 edges, OK"


def test_mesh_validate_errors(tmp_path, capsys):
    assert run(["mesh", "validate", str(tmp_path / "missing.obj")]) == 1
    assert "no such file" in capsys.readouterr().err
    bad = tmp_path / "bad.obj"
    bad.write_text("v 0 0 0\nf 1 2 3\n")
    assert run(["mesh", "validate", str(bad)]) == 1
    assert "surfcorr: error:" in capsys.readouterr().err


def test_usage_errors(capsys):
    assert run(["frobnicate"]) == 2
    assert run([]) == 2
    assert run(["mesh", "validate"]) == 2
    assert run(["loss", "check-grad", "--which", "nope"]) == 2
    assert "usage" in capsys.readouterr().err


def test_module_entry_point(tetra):
    res = subprocess.run([sys.executable, "-m", "surfcorr", "mesh", "validate", str(tetra)],
                         capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("4 vertices")


def test_geodesic_precompute(tetra, tmp_path, capsys):
    out = tmp_path / "g.bin"
    assert run(["geodesic", "precompute", "--mesh", str(tetra), "--sources", "all",
                "--out", str(out)]) == 0
    assert out.read_bytes()[:8] == b"SCGEO\0\0\0"
    src = tmp_path / "src.txt"
    src.write_text("0, 2\n")
    assert run(["geodesic", "precompute", "--mesh", str(tetra), "--sources", str(src),
                "--out", str(out)]) == 0
    assert "2 sources x 4 vertices" in capsys.readouterr().out


def test_output_dir_must_exist(tetra, tmp_path):
    assert run(["geodesic", "precompute", "--mesh", str(tetra), "--sources", "all",
                "--out", str(tmp_path / "nowhere" / "g.bin")]) == 1


@pytest.mark.parametrize("which", ["geo", "cst", "sil", "id", "tri"])
def test_check_grad(which, capsys):
    assert run(["loss", "check-grad", "--which", which, "--seed", "3"]) == 0
    err = float(capsys.readouterr().out.split(":")[1])
    assert err < 1e-5


def test_synth_scene_deterministic(tmp_path, scene_dir):
    again = tmp_path / "again"
    assert run(["synth-scene", "--kind", "twoview-grid", "--out", str(again), "--seed", "4"]) == 0
    cmp = filecmp.dircmp(scene_dir, again)
    assert sorted(os.listdir(scene_dir)) == sorted(os.listdir(again))
    assert not cmp.diff_files and not cmp.left_only
    for name in os.listdir(scene_dir):
        assert (scene_dir / name).read_bytes() == (again / name).read_bytes()


def test_corr_generate_and_link(scene_dir, tmp_path, capsys):
    mesh, cameras = scene_dir / "mesh.obj", scene_dir / "cameras.json"
    masks = sorted(f for f in os.listdir(scene_dir) if f.endswith(".pgm"))
    outs = []
    for view, m in enumerate(masks):
        out = tmp_path / f"c{view}.jsonl"
        assert run(["corr", "generate", "--mesh", str(mesh), "--camera", str(cameras),
                    "--view", str(view), "--mask", str(scene_dir / m), "--out", str(out)]) == 0
        outs.append(out)
    both = tmp_path / "both.jsonl"
    both.write_text("".join(p.read_text() for p in outs))
    linked = tmp_path / "linked.jsonl"
    assert run(["corr", "link", "--in", str(both), "--out", str(linked)]) == 0
    sets = corr.read_corrs(linked)
    assert all(80 <= len(cs.entries) <= 125 for cs in sets)
    assert len(sets[0].cross_view) == len(sets[1].cross_view) <= 10
    assert "cross-view links" in capsys.readouterr().out


def test_corr_sample_annot(tmp_path):
    parts = np.zeros((20, 20), dtype=np.uint8)
    parts[2:10, 2:10] = 1
    parts[12:18, 5:15] = 2
    fileio.write_pgm(tmp_path / "parts.pgm", parts)
    out = tmp_path / "px.csv"
    assert run(["corr", "sample-annot", "--parts", str(tmp_path / "parts.pgm"),
                "--out", str(out), "--uniform", "12"]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "row,col"
    px = np.array([list(map(int, r.split(","))) for r in rows[1:]])
    assert np.all(parts[px[:, 0], px[:, 1]] > 0)


def test_train_toy_deterministic_and_eval(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run(["train-toy", "--scene", "sphere", "--steps", "20", "--seed", "7",
                    "--out", str(out)]) == 0
    for name in sorted(os.listdir(a)):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    trace = (a / "trace.csv").read_text().splitlines()
    assert trace[0] == "step,loss" and len(trace) == 22
    capsys.readouterr()
    assert run(["eval", "gps", "--gt", str(a / "gt.jsonl"), "--pred", str(a / "pred.bin"),
                "--cache", str(a / "geodesics.bin")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "threshold,AP,AR" and lines[-1].startswith("mean,")
    assert len(lines) == 12
    assert run(["viz", "pca", "--field", str(a / "field_0.bin"), "--out", str(a / "v.ppm")]) == 0
    assert fileio.read_pnm(a / "v.ppm").shape[2] == 3


def test_eval_gps_perfect(scene_dir, tmp_path, capsys):
    sets = corr.read_corrs(scene_dir / "corrs.jsonl")
    preds = {}
    for cs in sets:
        m = np.full(cs.size, -1.0)
        px = cs.pixels
        m[px[:, 0], px[:, 1]] = cs.vertices
        preds[cs.image] = m
    fileio.write_tensors(tmp_path / "pred.bin", preds)
    assert np.array_equal(read_pred_maps(tmp_path / "pred.bin")[sets[0].image],
                          preds[sets[0].image].astype(np.int64))
    assert run(["geodesic", "precompute", "--mesh", str(scene_dir / "mesh.obj"),
                "--sources", "all", "--out", str(tmp_path / "g.bin")]) == 0
    capsys.readouterr()
    assert run(["eval", "gps", "--gt", str(scene_dir / "corrs.jsonl"),
                "--pred", str(tmp_path / "pred.bin"), "--cache", str(tmp_path / "g.bin")]) == 0
    rows = capsys.readouterr().out.splitlines()[1:]
    assert len(rows) == 11
    assert all(r.split(",")[1] == "100.0" for r in rows)


def test_config_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# toy settings\nsteps = 3\nlr-table = 500\n")
    assert run(["train-toy", "--scene", "sphere", "--config", str(cfg),
                "--out", str(tmp_path / "a")]) == 0
    assert "after 3 steps" in capsys.readouterr().out
    assert run(["train-toy", "--scene", "sphere", "--config", str(cfg), "--steps", "2",
                "--out", str(tmp_path / "b")]) == 0
    assert "after 2 steps" in capsys.readouterr().out
    cfg.write_text("bogus = 1\n")
    assert run(["train-toy", "--scene", "sphere", "--config", str(cfg),
                "--out", str(tmp_path / "c")]) == 2


def test_eval_reid(tmp_path, capsys):
    rng = np.random.default_rng(0)
    q_ids, g_ids = np.arange(4), np.repeat(np.arange(4), 3)
    q = rng.standard_normal((4, 8))
    g = q[g_ids] + 0.01 * rng.standard_normal((12, 8))
    fileio.write_tensors(tmp_path / "feats.bin", {"query": q, "gallery": g})
    lines = ["split,index,pid,cam,clothes"]
    lines += [f"query,{i},{p},0,0" for i, p in enumerate(q_ids)]
    lines += [f"gallery,{i},{p},1,0" for i, p in enumerate(g_ids)]
    (tmp_path / "labels.csv").write_text("\n".join(lines) + "\n")
    assert run(["eval", "reid", "--features", str(tmp_path / "feats.bin"),
                "--labels", str(tmp_path / "labels.csv")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out == ["mAP 100.00", "CMC@1 100.00", "CMC@5 100.00", "CMC@10 100.00"]
    (tmp_path / "bad.csv").write_text("split,index\nquery,0\n")
    assert run(["eval", "reid", "--features", str(tmp_path / "feats.bin"),
                "--labels", str(tmp_path / "bad.csv")]) == 1


def test_viz_pca_rejects_garbage(tmp_path):
    (tmp_path / "f.bin").write_bytes(b"not a field")
    assert run(["viz", "pca", "--field", str(tmp_path / "f.bin"),
                "--out", str(tmp_path / "v.ppm")]) == 1
    assert not (tmp_path / "v.ppm").exists()


def test_field_file_written_by_cli_loads(tmp_path):
    assert run(["train-toy", "--scene", "sphere", "--steps", "0", "--dim", "8",
                "--out", str(tmp_path)]) == 0
    f = EmbeddingField.load(tmp_path / "field_1.bin")
    assert f.data.shape[2] == 8
