import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from surfcorr import correspondence as corr
from surfcorr.correspondence import (Camera, Correspondence, CorrespondenceSet, CorrSchemaError,
                                     InsufficientCandidates, kmeans, link_cross_view,
                                     project_vertices, zbuffer)
from surfcorr.mesh import TriangleMesh, make_test_mesh
from surfcorr.scene import synth_scene

from oracles import best_two_partition, reference_projection, zbuffer_oracle


# --- projection and z-buffer ------------------------------------------------------

def test_orthographic_identity_unit_square():
    m = TriangleMesh([[0.5, 0.5, 0.3], [3, 0, 0], [0, 3, 0]], [[0, 1, 2]])
    pr = project_vertices(m, Camera.orthographic(), (1, 1))
    assert pr.pixels[0].tolist() == [0, 0]
    assert pr.visible.tolist() == [True, False, False]


def test_pinhole_tetrahedron_matches_reference():
    m = make_test_mesh("tetrahedron")
    cam = Camera.pinhole(40.0, 16.0, 12.0, rotation=corr.rotation_y(0.3),
                         translation=(-0.5, -0.3, 3.0))
    pr = project_vertices(m, cam, (24, 32))
    ref = reference_projection(m, cam, (24, 32))
    assert [tuple(p) for p in pr.pixels.tolist()] == [r[0] for r in ref]
    assert pr.visible.tolist() == [r[2] for r in ref]
    np.testing.assert_allclose(pr.depth, [r[1] for r in ref], rtol=0, atol=1e-12)


def test_pinhole_behind_camera_invisible():
    m = make_test_mesh("tetrahedron")
    cam = Camera.pinhole(10.0, 5.0, 5.0, translation=(0.0, 0.0, -0.5))
    pr = project_vertices(m, cam, (10, 10))
    assert not pr.visible[3]  # z = 0.816 - 0.5 > 0 ... vertex 0 has depth -0.5
    assert not pr.visible[0]


def test_zbuffer_nearest_wins():
    # two vertices on one pixel at depths 1.0 and 2.0
    pr = corr.Projection(np.array([[0, 0], [0, 0]]), np.array([2.0, 1.0]), np.array([True, True]))
    assert zbuffer(pr, (1, 1))[0, 0] == 1


def test_zbuffer_tie_lower_index():
    pr = corr.Projection(np.array([[1, 1], [1, 1], [0, 0]]), np.array([1.0, 1.0, 5.0]),
                         np.array([True, True, True]))
    out = zbuffer(pr, (2, 2))
    assert out[1, 1] == 0 and out[0, 0] == 2 and out[0, 1] == -1


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_zbuffer_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    m = make_test_mesh("icosphere(2)")
    cam = Camera.orthographic(rng.uniform(3, 8), rng.uniform(4, 8), rng.uniform(4, 8),
                              rotation=corr.rotation_y(rng.uniform(0, 6.3)))
    out = zbuffer(project_vertices(m, cam, (12, 12)), (12, 12))
    ref = zbuffer_oracle(m, cam, (12, 12))
    got = {(r, c): int(out[r, c]) for r, c in zip(*np.nonzero(out >= 0))}
    assert got == ref


# --- pseudo-correspondences -------------------------------------------------------

def _sphere_view(angle=0.0):
    m = make_test_mesh("icosphere(3)")
    cam = Camera.orthographic(9.5, 24.0, 24.0, rotation=corr.rotation_y(angle))
    return m, cam, corr.rasterize_mask(m, cam, (48, 48))


def test_generated_entries_verify_against_oracle():
    m, cam, mask = _sphere_view()
    cs = corr.generate_pseudo_correspondences(m, cam, mask, seed=7)
    assert 80 <= len(cs.entries) <= 125
    ref = zbuffer_oracle(m, cam, (48, 48))
    for e in cs.entries:
        assert mask[e.row, e.col]
        assert ref[(e.row, e.col)] == e.vertex


def test_generation_deterministic():
    m, cam, mask = _sphere_view()
    a = corr.generate_pseudo_correspondences(m, cam, mask, seed=11)
    b = corr.generate_pseudo_correspondences(m, cam, mask, seed=11)
    c = corr.generate_pseudo_correspondences(m, cam, mask, seed=12)
    assert corr.dumps(a) == corr.dumps(b)
    assert corr.dumps(a) != corr.dumps(c)


def test_mask_excluding_projection_errors():
    m, cam, mask = _sphere_view()
    empty_overlap = np.zeros_like(mask)
    empty_overlap[0, 0] = True
    with pytest.raises(corr.CorrespondenceError, match="no projected vertex"):
        corr.generate_pseudo_correspondences(m, cam, empty_overlap)
    with pytest.raises(corr.CorrespondenceError, match="empty"):
        corr.generate_pseudo_correspondences(m, cam, np.zeros_like(mask))


def test_insufficient_candidates_reported():
    m, cam, mask = _sphere_view()
    with pytest.raises(InsufficientCandidates) as exc:
        corr.generate_pseudo_correspondences(m, cam, mask, count=(80, 100000))
    assert exc.value.requested == 100000 and exc.value.available < 100000


# --- annotation sampling --------------------------------------------------------

def test_single_square_part_default_sampling():
    parts = np.zeros((20, 20), dtype=np.int64)
    parts[5:15, 5:15] = 1
    px = corr.sample_annotation_pixels(parts, uniform_n=40, centroids_per_part=5, seed=0)
    assert len(px) == 45
    assert np.all(parts[px[:, 0], px[:, 1]] == 1)
    assert len({tuple(p) for p in px[:40]}) == 40


def test_single_centroid_is_mean_pixel():
    parts = np.zeros((9, 9), dtype=np.int64)
    parts[2:7, 1:8] = 3
    px = corr.sample_annotation_pixels(parts, uniform_n=0, centroids_per_part=1, seed=0)
    assert px.tolist() == [[4, 4]]


def test_equal_parts_equal_k():
    parts = np.zeros((10, 20), dtype=np.int64)
    parts[:, :10] = 1
    parts[:, 10:] = 2
    px = corr.sample_annotation_pixels(parts, uniform_n=0, centroids_per_part=(5, 10), seed=1)
    labels = parts[px[:, 0], px[:, 1]]
    assert (labels == 1).sum() == (labels == 2).sum() == 10


def test_centroids_for_part_rule():
    # k = floor(5 + 5 * share + 0.5)
    assert corr.centroids_for_part(100, 100, (5, 10)) == 10
    assert corr.centroids_for_part(50, 100, (5, 10)) == 8
    assert corr.centroids_for_part(10, 100, (5, 10)) == 6
    assert corr.centroids_for_part(1, 100, (5, 10)) == 5


def test_annotation_empty_foreground():
    with pytest.raises(corr.CorrespondenceError):
        corr.sample_annotation_pixels(np.zeros((4, 4), dtype=int))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_annotation_pixels_inside_parts_and_deterministic(seed):
    rng = np.random.default_rng(seed)
    parts = rng.integers(0, 4, (16, 16))
    a = corr.sample_annotation_pixels(parts, uniform_n=10, seed=seed)
    b = corr.sample_annotation_pixels(parts, uniform_n=10, seed=seed)
    assert np.array_equal(a, b)
    assert np.all(parts[a[:, 0], a[:, 1]] != 0)


# --- k-means ----------------------------------------------------------------------

def test_kmeans_k_equals_n():
    pts = np.random.default_rng(0).standard_normal((6, 2))
    res = kmeans(pts, 6, seed=0)
    assert sorted(map(tuple, res.centroids.round(12))) == sorted(map(tuple, pts.round(12)))


def test_kmeans_k1_is_mean():
    pts = np.random.default_rng(1).standard_normal((30, 2))
    np.testing.assert_allclose(kmeans(pts, 1).centroids[0], pts.mean(axis=0), atol=1e-12)


def test_kmeans_two_blobs_matches_exhaustive_partition():
    rng = np.random.default_rng(2)
    pts = np.vstack([rng.normal(0, 0.3, (10, 2)), rng.normal(5, 0.3, (10, 2))])
    res = kmeans(pts, 2, seed=0)
    best, labels = best_two_partition(pts)
    sse = sum(((pts[res.labels == k] - res.centroids[k]) ** 2).sum() for k in (0, 1))
    assert sse == pytest.approx(best, rel=1e-12)
    # same partition up to label swap
    assert np.array_equal(res.labels, labels) or np.array_equal(res.labels, 1 - labels)


def test_kmeans_rejects_too_many_clusters():
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 4)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_kmeans_objective_nonincreasing(seed, k):
    pts = np.random.default_rng(seed).standard_normal((40, 2))
    h = kmeans(pts, k, seed=seed).history
    assert all(b <= a + 1e-12 for a, b in zip(h, h[1:]))


# --- cross-view links -----------------------------------------------------------

def _set(image, verts, pid=0):
    entries = tuple(Correspondence(i, i, v) for i, v in enumerate(verts))
    return CorrespondenceSet(image=image, size=(64, 64), pid=pid, entries=entries)


def test_links_disjoint():
    a, b, n = link_cross_view(_set("a", [1, 2, 3]), _set("b", [4, 5, 6]))
    assert n == 0 and a.cross_view == ()


def test_links_identical_lists_smallest_vertices():
    verts = list(np.random.default_rng(0).permutation(40))
    a, b, n = link_cross_view(_set("a", verts), _set("b", verts[::-1]), 10)
    assert n == 10
    linked = sorted(a.vertex_at(l.row, l.col) for l in a.cross_view)
    assert linked == sorted(set(verts))[:10]
    for la in a.cross_view:
        assert a.vertex_at(la.row, la.col) == b.vertex_at(la.row2, la.col2)


def test_links_capped_by_availability():
    a, b, n = link_cross_view(_set("a", [1, 2, 3, 9]), _set("b", [3, 2, 1, 7]), 10)
    assert n == 3 and len(b.cross_view) == 3


def test_links_require_same_person():
    with pytest.raises(corr.CorrespondenceError):
        link_cross_view(_set("a", [1], pid=0), _set("b", [1], pid=1))


# --- JSONL --------------------------------------------------------------------------

def test_jsonl_round_trip(tmp_path):
    sc = synth_scene("twoview-grid", seed=3)
    p = tmp_path / "c.jsonl"
    corr.write_corrs(p, sc.corrsets)
    back = corr.read_corrs(p)
    assert [corr.dumps(x) for x in back] == [corr.dumps(x) for x in sc.corrsets]
    rec = json.loads(p.read_text().splitlines()[0])
    assert set(rec) == {"image", "h", "w", "pid", "cam", "clothes", "entries", "cross_view"}


def test_missing_vertex_field_names_line(tmp_path):
    good = corr.dumps(_set("a", [1, 2]))
    bad = json.loads(good)
    bad["entries"][1] = [1, 1]
    p = tmp_path / "c.jsonl"
    p.write_text(good + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(CorrSchemaError) as exc:
        corr.read_corrs(p)
    assert exc.value.line == 2


def test_iter_corrs_streams(tmp_path):
    p = tmp_path / "many.jsonl"
    line = corr.dumps(_set("img", [1, 2, 3]))
    with open(p, "w") as fh:
        for _ in range(39100):
            fh.write(line + "\n")
    it = corr.iter_corrs(p)
    first = next(it)
    assert first.image == "img"
    assert sum(1 for _ in it) == 39099
