import http.server
import json
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from support import dbscan_reference
from vtsplat.touch import (OUTLIER, MockRanker, PartLabeledCloud, PartRanking, RemoteRanker, SelectionError,
                           TouchCandidate, dbscan, make_ranker, order_touches, parse_ranking, plan_touches,
                           rank_common_sense, rank_geometric, select_high_gradient)


@pytest.mark.parametrize("seed", range(100))
def test_dbscan_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 51))
    centers = rng.uniform(0, 1, (rng.integers(1, 5), 3))
    pts = centers[rng.integers(0, len(centers), n)] + rng.normal(0, rng.uniform(0.02, 0.15), (n, 3))
    eps = float(rng.uniform(0.03, 0.25))
    min_pts = int(rng.integers(1, 7))
    assert np.array_equal(dbscan(pts, eps, min_pts), dbscan_reference(pts, eps, min_pts))


def test_dbscan_two_blobs_and_noise():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 0.002, (20, 3))
    b = rng.normal(1, 0.002, (20, 3))
    pts = np.vstack([a, b, [[5, 5, 5]]])
    lab = dbscan(pts, 0.01, 5)
    assert set(lab[:20]) == {0} and set(lab[20:40]) == {1} and lab[40] == OUTLIER


def test_dbscan_bad_parameters():
    with pytest.raises(ValueError):
        dbscan(np.zeros((3, 3)), 0.0, 3)


def test_select_high_gradient_strict_threshold_and_region():
    g = np.array([1.0, 1.0, 1.0, 10.0, 10.0])
    region = np.array([True, True, True, True, False])
    sel = select_high_gradient(g, np.zeros((5, 3)), float(g.mean()), region)
    assert sel.indices.tolist() == [3] and not sel.fallback
    with pytest.raises(SelectionError):
        select_high_gradient(np.ones(4), np.zeros((4, 3)), 1.0, np.ones(4, bool), allow_fallback=False)
    fb = select_high_gradient(np.ones(4), np.zeros((4, 3)), 1.0, np.ones(4, bool))
    assert fb.fallback and len(fb.indices) == 1


def test_rank_geometric_by_mean_gradient():
    labels = np.array([0, 0, 1, 1, OUTLIER])
    g = np.array([1.0, 1.0, 5.0, 3.0, 100.0])
    ranks, info = rank_geometric(labels, g)
    assert ranks.tolist() == [2, 2, 1, 1, 0]
    assert info[1] == (1, 4.0)


def test_rank_common_sense_nearest_label_and_unknowns():
    cloud = PartLabeledCloud([[0, 0, 0], [1, 0, 0], [2, 0, 0]], ["ears", "body", "tail"])
    parts, r = rank_common_sense(np.array([[0.1, 0, 0], [0.9, 0, 0], [2.1, 0, 0]]), cloud,
                                 PartRanking("bunny", ("ears", "head", "body")))
    assert parts == ["ears", "body", "tail"]
    # 'head' is absent from the cloud and dropped; 'tail' is unranked and goes last
    assert r.tolist() == [1, 2, 3]
    _, r0 = rank_common_sense(np.zeros((2, 3)), cloud, PartRanking("bunny"))
    assert r0.tolist() == [1, 1]


candidate_sets = st.lists(
    st.tuples(st.integers(1, 4), st.integers(1, 6), st.integers(0, 5)), min_size=1, max_size=40)


@settings(max_examples=200, deadline=None)
@given(candidate_sets, st.integers(1, 15))
def test_order_is_lexicographic(rows, n):
    cands = [TouchCandidate(np.zeros(3), i, cluster, part_rank=pr, geo_rank=gr)
             for i, (pr, gr, cluster) in enumerate(rows)]
    plan = order_touches(cands, n)
    keys = [(c.part_rank, c.geo_rank) for c in plan.touches]
    assert keys == sorted(keys)
    assert len(plan.touches) == min(n, len(cands))
    assert plan.shortfall == (len(cands) < n)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 6), st.integers(0, 5)), min_size=1, max_size=40), st.integers(1, 15))
def test_empty_part_ranking_gives_geometric_order(rows, n):
    cands = [TouchCandidate(np.zeros(3), i, cluster, part_rank=1, geo_rank=gr)
             for i, (gr, cluster) in enumerate(rows)]
    plan = order_touches(cands, n)
    assert [c.gaussian_id for c in plan.touches] == [c.gaussian_id for c in
                                                     sorted(plan.touches, key=lambda c: (c.geo_rank, c.gaussian_id))]


def test_round_robin_spreads_over_clusters():
    cands = [TouchCandidate(np.zeros(3), i, 0, geo_rank=1) for i in range(10)]
    cands += [TouchCandidate(np.zeros(3), 10 + i, 1, geo_rank=2) for i in range(10)]
    plan = order_touches(cands, 4)
    assert [c.cluster for c in plan.touches] == [0, 0, 1, 1]


def _blobs(rng):
    centers = np.array([[0, 0, 0], [0.1, 0, 0], [0, 0.1, 0]])
    pts = np.repeat(centers, 15, axis=0) + rng.normal(0, 0.001, (45, 3))
    grads = np.repeat([3.0, 5.0, 4.0], 15) + rng.uniform(0, 0.1, 45)
    return pts, grads


def test_plan_touches_with_and_without_ranking():
    rng = np.random.default_rng(1)
    pts, grads = _blobs(rng)
    pts = np.vstack([pts, rng.uniform(-1, 1, (100, 3))])
    grads = np.concatenate([grads, np.zeros(100)])
    region = np.ones(len(pts), bool)
    tau = float(grads.mean())
    cloud = PartLabeledCloud([[0, 0, 0], [0.1, 0, 0], [0, 0.1, 0]], ["base", "head", "ears"])
    geo = plan_touches(grads, pts, tau, region, cloud, PartRanking("x"), n=6)
    assert [c.geo_rank for c in geo.touches] == [1, 1, 2, 2, 3, 3]
    ranked = plan_touches(grads, pts, tau, region, cloud, PartRanking("bunny", ("ears", "head", "body", "base")),
                          n=6)
    assert [c.part for c in ranked.touches] == ["ears", "ears", "head", "head", "base", "base"]


def test_mock_ranker_table():
    r = MockRanker().query("Bunny")
    assert r.parts[0] == "ears"
    assert MockRanker().query("teapot").empty
    assert make_ranker("none") is None
    with pytest.raises(ValueError):
        make_ranker("oracle")


def test_parse_ranking_validates_and_dedups():
    r = parse_ranking({"label": "mug", "parts": ["handle", "rim"], "priority": ["rim", "handle", "rim"]})
    assert r.parts == ("rim", "handle")
    with pytest.raises(ValueError):
        parse_ranking({"label": "mug", "parts": "handle", "priority": []})


def test_remote_ranker_soft_fails_without_endpoint(monkeypatch):
    monkeypatch.delenv("VTSPLAT_RANKER_URL", raising=False)
    assert RemoteRanker().query("bunny").empty
    assert RemoteRanker(url="http://127.0.0.1:9/none", timeout=0.5).query("bunny").empty


def test_remote_ranker_reads_structured_reply():
    reply = {"choices": [{"message": {"content": json.dumps(
        {"label": "bunny", "parts": ["ears", "body"], "priority": ["ears", "body"]})}}]}

    class Handler(http.server.BaseHTTPRequestHandler):
        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            assert body["response_format"]["type"] == "json_schema"
            data = json.dumps(reply).encode()
            self.send_response(200)
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, *a):
            pass

    srv = http.server.HTTPServer(("127.0.0.1", 0), Handler)
    th = threading.Thread(target=srv.handle_request, daemon=True)
    th.start()
    try:
        r = RemoteRanker(url=f"http://127.0.0.1:{srv.server_port}/", timeout=5).query("bunny")
    finally:
        th.join(5)
        srv.server_close()
    assert r.parts == ("ears", "body")
