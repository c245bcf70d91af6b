import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from surfcorr.geodesics import (CacheMiss, build_cache, geodesic_from, load_cache,
                                load_or_build_cache, save_cache, scale)
from surfcorr.mesh import TriangleMesh, build_edge_graph, make_test_mesh

from oracles import floyd_warshall, jittered_mesh


def test_source_distance_zero_and_tetrahedron():
    g = build_edge_graph(make_test_mesh("tetrahedron"))
    d = geodesic_from(g, 0)
    assert d[0] == 0.0
    np.testing.assert_allclose(d, [0.0, 1.0, 1.0, 1.0], rtol=0, atol=1e-15)
    assert np.array_equal(d, floyd_warshall(make_test_mesh("tetrahedron"))[0])


def test_strip_path():
    # v0-v1-v2 along the bottom of a thin strip; the top row is far away
    v = [[0, 0, 0], [1, 0, 0], [2, 0, 0], [0.5, 2, 0], [1.5, 2, 0]]
    m = TriangleMesh(v, [[0, 1, 3], [1, 4, 3], [1, 2, 4]])
    d = geodesic_from(build_edge_graph(m), 0)
    assert d[2] == 2.0
    assert np.array_equal(d, floyd_warshall(m)[0])


def test_source_out_of_range():
    g = build_edge_graph(make_test_mesh("tetrahedron"))
    with pytest.raises(IndexError):
        geodesic_from(g, 4)
    with pytest.raises(IndexError):
        geodesic_from(g, -1)


def test_matches_floyd_warshall_icosphere():
    m = make_test_mesh("icosphere(1)")
    g = build_edge_graph(m)
    fw = floyd_warshall(m)
    for s in range(m.n_vertices):
        np.testing.assert_allclose(geodesic_from(g, s), fw[s], rtol=0, atol=1e-12)


def test_cache_all_tetrahedron():
    c = build_cache(build_edge_graph(make_test_mesh("tetrahedron")), "all")
    assert c.dist.shape == (4, 4)
    assert np.all(np.diag(c.dist) == 0)
    assert c.g_max == 1.0


def test_singleton_cache_equals_row():
    g = build_edge_graph(make_test_mesh("icosphere(1)"))
    c = build_cache(g, [7])
    assert np.array_equal(c.row(7), geodesic_from(g, 7))


def test_cache_rows_match_independent_dijkstra():
    m = make_test_mesh("icosphere(1)")
    g = build_edge_graph(m)
    src = np.random.default_rng(3).choice(m.n_vertices, 10, replace=False)
    c = build_cache(g, src.tolist())
    fw = floyd_warshall(m)
    for s in src:
        np.testing.assert_allclose(c.row(s), fw[s], rtol=0, atol=1e-12)


def test_threaded_cache_identical(monkeypatch):
    g = build_edge_graph(make_test_mesh("icosphere(2)"))
    serial = build_cache(g, "all", workers=1)
    threaded = build_cache(g, "all", workers=4)
    assert np.array_equal(serial.dist, threaded.dist)


def test_cache_lookup_either_direction_and_miss():
    g = build_edge_graph(make_test_mesh("icosphere(1)"))
    c = build_cache(g, [3, 5])
    assert c.distance(3, 10) == c.distance(10, 3)
    assert np.array_equal(c.distances([3, 10, 5], [10, 5, 3]),
                          [c.distance(3, 10), c.distance(10, 5), c.distance(5, 3)])
    with pytest.raises(CacheMiss):
        c.row(4)
    with pytest.raises(CacheMiss):
        c.distance(4, 6)


def test_scale_examples():
    G = 3.7
    assert scale(0.0, G) == 0.0
    assert scale(G, G) == 2.0
    assert scale(G / 4, G) == 0.5
    assert scale(10 * G, G) == 2.0
    with pytest.raises(ValueError):
        scale(1.0, 0.0)
    with pytest.raises(ValueError):
        scale(-1.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1e6, allow_nan=False), min_size=2, max_size=20),
       st.floats(1e-3, 1e3))
def test_scale_monotone_clamped(gs, gmax):
    gs = np.sort(np.array(gs))
    s = scale(gs, gmax)
    assert np.all(s >= 0) and np.all(s <= 2)
    assert np.all(np.diff(s) >= 0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_symmetry_and_triangle_inequality(seed):
    rng = np.random.default_rng(seed)
    m = jittered_mesh(rng, max_vertices=120)
    c = build_cache(build_edge_graph(m), "all")
    assert np.abs(c.dist - c.dist.T).max() <= 1e-9
    tri = rng.integers(0, m.n_vertices, (200, 3))
    a, b, d = tri.T
    assert np.all(c.dist[a, d] <= c.dist[a, b] + c.dist[b, d] + 1e-9)


def test_save_load_round_trip(tmp_path):
    m = make_test_mesh("icosphere(1)")
    c = build_cache(build_edge_graph(m), [0, 4, 9], mesh_hash=m.content_hash())
    save_cache(c, tmp_path / "g.bin")
    raw = (tmp_path / "g.bin").read_bytes()
    assert raw[:8] == b"SCGEO\0\0\0"
    back = load_cache(tmp_path / "g.bin")
    assert back.sources.tolist() == [0, 4, 9]
    assert back.mesh_hash == m.content_hash()
    np.testing.assert_allclose(back.dist, c.dist, rtol=1e-7)


def test_cache_rebuilt_on_hash_mismatch(tmp_path):
    a = make_test_mesh("icosphere(1)")
    b = TriangleMesh(a.vertices * 2.0, a.faces)
    p = tmp_path / "g.bin"
    load_or_build_cache(p, a, [0])
    c = load_or_build_cache(p, b, [0])
    assert c.mesh_hash == b.content_hash()
    np.testing.assert_allclose(c.row(0), 2.0 * load_or_build_cache(p, a, [0]).row(0), rtol=1e-6)


def test_truncated_cache_rejected(tmp_path):
    m = make_test_mesh("tetrahedron")
    c = build_cache(build_edge_graph(m), "all")
    save_cache(c, tmp_path / "g.bin")
    data = (tmp_path / "g.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(data[:-3])
    with pytest.raises(ValueError, match="truncated"):
        load_cache(tmp_path / "t.bin")
